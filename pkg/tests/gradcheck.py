"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

STEP = 1e-5
TOL = 1e-6


def numeric_grad(f, x: np.ndarray, h: float = STEP) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def rel_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(a) + np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def away_from_zero(rng, shape, margin=0.05):
    """Normal samples pushed off the ReLU kink so finite differences stay on one side."""
    x = rng.normal(size=shape)
    return x + np.sign(x) * margin


# ---------------------------------------------------------------------------
# One random instance per call; each returns the worst relative error over
# every gradient the layer produces.

def _conv_instance(rng):
    from fusionvote import nn_core as nn

    B, n, m = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4)
    k, stride, pad = rng.integers(1, 4), rng.integers(1, 3), rng.integers(0, 2)
    H, W = rng.integers(k + 1, 7), rng.integers(k + 1, 7)
    x = rng.normal(size=(B, n, H, W))
    w = rng.normal(size=(m, n, k, k))
    b = rng.normal(size=m)
    out = nn.conv2d_forward(x, w, b, stride, pad)
    R = rng.normal(size=out.shape)
    f = lambda: float((nn.conv2d_forward(x, w, b, stride, pad) * R).sum())
    g = nn.conv2d_backward(x, w, R, stride, pad)
    return max(rel_error(g.params["weight"], numeric_grad(f, w)),
               rel_error(g.params["bias"], numeric_grad(f, b)),
               rel_error(g.input, numeric_grad(f, x)))


def _dense_instance(rng):
    from fusionvote import nn_core as nn

    B, i, o = rng.integers(1, 5), rng.integers(1, 8), rng.integers(1, 6)
    x, w, b = rng.normal(size=(B, i)), rng.normal(size=(o, i)), rng.normal(size=o)
    R = rng.normal(size=(B, o))
    f = lambda: float((nn.dense_forward(x, w, b) * R).sum())
    g = nn.dense_backward(x, w, R)
    return max(rel_error(g.params["weight"], numeric_grad(f, w)),
               rel_error(g.params["bias"], numeric_grad(f, b)),
               rel_error(g.input, numeric_grad(f, x)))


def _unary_instance(forward, backward, make_x):
    def run(rng):
        x = make_x(rng)
        R = rng.normal(size=forward(x).shape)
        f = lambda: float((forward(x) * R).sum())
        return rel_error(backward(x, R).input, numeric_grad(f, x))
    return run


def _fa_instance(rng):
    from fusionvote.model_zoo import Region, fa_backward, fa_forward

    B, n, m = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
    size = int(rng.integers(6, 9))
    regions = []
    for _ in range(rng.integers(1, 4)):
        h, w = rng.integers(3, size + 1), rng.integers(3, size + 1)
        regions.append(Region(int(rng.integers(0, size - h + 1)), int(rng.integers(0, size - w + 1)), int(h), int(w)))
    lams = list(rng.uniform(0.1, 1.0, size=len(regions)))
    x = rng.normal(size=(B, n, size, size))
    main = (rng.normal(size=(m, n, 3, 3)), rng.normal(size=m))
    branches = [(rng.normal(size=(m, n, 3, 3)), rng.normal(size=m)) for _ in regions]
    R = rng.normal(size=fa_forward(x, main, branches, lams, regions, 1, 1).shape)
    f = lambda: float((fa_forward(x, main, branches, lams, regions, 1, 1) * R).sum())
    mg, bgs = fa_backward(x, main[0], [bw for bw, _ in branches], lams, regions, R, 1, 1)
    errs = [rel_error(mg.params["weight"], numeric_grad(f, main[0])),
            rel_error(mg.params["bias"], numeric_grad(f, main[1])),
            rel_error(mg.input, numeric_grad(f, x))]
    for (bw, bb), bg in zip(branches, bgs):
        errs.append(rel_error(bg.params["weight"], numeric_grad(f, bw)))
        errs.append(rel_error(bg.params["bias"], numeric_grad(f, bb)))
    return max(errs)


def _loss_instance(kind):
    def run(rng):
        from fusionvote.losses import ce_loss, lsr_loss

        B, C = int(rng.integers(1, 6)), int(rng.integers(2, 8))
        z = rng.normal(scale=2.0, size=(B, C))
        y = rng.integers(0, C, size=B)
        if kind == "CE":
            fn = lambda: ce_loss(z, y)
        elif kind == "WCE":
            w = rng.uniform(0.2, 3.0, size=C)
            fn = lambda: ce_loss(z, y, w)
        else:
            eps = float(rng.uniform(0.0, 0.5))
            fn = lambda: lsr_loss(z, y, eps)
        _, grad = fn()
        return rel_error(grad, numeric_grad(lambda: fn()[0], z))
    return run


def _cases():
    from fusionvote import nn_core as nn

    return {
        "conv2d": _conv_instance,
        "dense": _dense_instance,
        "relu": _unary_instance(nn.relu_forward, nn.relu_backward,
                                lambda r: away_from_zero(r, (2, 3, 4, 4))),
        "maxpool2x2": _unary_instance(nn.maxpool2x2_forward, nn.maxpool2x2_backward,
                                      lambda r: r.normal(size=(2, 2, 4, 6))),
        "flatten": _unary_instance(nn.flatten, nn.flatten_backward,
                                   lambda r: r.normal(size=(2, 2, 3, 3))),
        "global_avg_pool": _unary_instance(nn.global_avg_pool, nn.global_avg_pool_backward,
                                           lambda r: r.normal(size=(2, 3, 4, 5))),
        "fa_conv": _fa_instance,
        "CE": _loss_instance("CE"),
        "WCE": _loss_instance("WCE"),
        "LSR": _loss_instance("LSR"),
    }




def gradient_cases():
    """Mapping of layer / loss name to an instance generator ``rng -> worst rel. error``."""
    return _cases()


def worst_errors(instances: int = 20, seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    return {name: max(run(rng) for _ in range(instances)) for name, run in gradient_cases().items()}

"""
Command-line entry point: ``fusionvote <command> [options]``.

Failures print one line to stderr, ``error code=<n> kind=<kind> message=<text>``,
and exit with a code specific to the failure kind (see :data:`EXIT_CODES`).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import ensemble
from .config import RunConfig, describe_defaults
from .data_io import (
    generate_synthetic,
    load_checkpoint,
    load_dataset,
    save_checkpoint,
    save_dataset,
)
from .errors import (
    ConfigurationError,
    FormatError,
    InputError,
    PreconditionError,
    SpecMismatchError,
)
from .fga import Population, evolve_generation
from .model_zoo import build, predict_logits
from .report import Report, confusion_table, rank_table
from .study import network_seeds
from .trainer import TrainConfig, evaluate_predictions, train_many

EXIT_CODES = {
    "missing_file": 3,
    "spec_mismatch": 4,
    "config": 5,
    "format": 6,
    "input": 7,
    "precondition": 8,
}


def _fail(kind: str, message: str) -> int:
    text = " ".join(str(message).split())
    print(f"error code={EXIT_CODES[kind]} kind={kind} message={text}", file=sys.stderr)
    return EXIT_CODES[kind]


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(str(p))
    return p


def _config(args) -> RunConfig:
    return RunConfig.load(_require(args.config)) if getattr(args, "config", None) else RunConfig()


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise ConfigurationError(f"expected comma-separated integers, got {text!r}") from exc


def _load_members(paths):
    states = [load_checkpoint(_require(p)) for p in paths]
    if not states:
        raise InputError("no checkpoints given")
    for p, s in zip(paths[1:], states[1:]):
        if s.spec != states[0].spec:
            raise SpecMismatchError(f"{p} has a different network spec than {paths[0]}")
    return states


def _config_section(cfg: RunConfig) -> str:
    return cfg.render(resolved=True)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    counts = _int_list(args.counts)
    counts = counts[0] if len(counts) == 1 else counts
    test_counts = None
    if args.test_counts:
        tc = _int_list(args.test_counts)
        test_counts = tc[0] if len(tc) == 1 else tc
    train, test = generate_synthetic(args.classes, counts, args.size, args.noise, args.seed,
                                     test_counts=test_counts, jitter=args.jitter)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, out / "train.fvd")
    save_dataset(test, out / "test.fvd")
    print(f"wrote {len(train)} training and {len(test)} test images to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    seed = args.seed if args.seed is not None else int(cfg["train.seed"])
    cfg.set("train.seed", seed)
    data = load_dataset(_require(args.data))
    spec = cfg.network_spec()
    base = cfg.train_config()
    states, cfgs = [], []
    for index in range(args.nets):
        init_seed, train_seed = network_seeds(seed, index)
        states.append(build(spec, init_seed))
        cfgs.append(TrainConfig(**{**base.__dict__, "seed": train_seed}))
    states, reports = train_many(states, data, cfgs, args.parallel)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep = Report("train")
    rep.add("config", _config_section(cfg))
    rows = []
    for index, (state, tr) in enumerate(zip(states, reports)):
        save_checkpoint(state, out / f"net{index:02d}.ckpt")
        last = tr.epochs[-1] if tr.epochs else None
        rows.append([f"net{index:02d}", state.seed, len(tr.epochs),
                     "-" if tr.switch_epoch is None else tr.switch_epoch,
                     last.monitor_loss if last else float("nan"),
                     last.accuracy if last else float("nan"),
                     state.fitness if state.fitness is not None else float("nan")])
        rep.add_table(f"net{index:02d} epochs", ["epoch", "loss", "ce", "accuracy", "lr", "phase", "kinds"],
                      [[e.epoch, e.loss, e.monitor_loss, e.accuracy, f"{e.lr:.3e}", e.phase,
                        " ".join(f"{k}:{v}" for k, v in e.loss_kinds.items())] for e in tr.epochs])
    rep.add_table("networks", ["network", "init_seed", "epochs", "switch_epoch", "ce", "train_acc", "fitness"], rows)
    rep.metric("networks", len(states))
    rep.metric("mean_train_accuracy", float(np.mean([r[5] for r in rows])) if rows else 0.0)
    rep.write(out / "train_report.txt")
    print(f"trained {len(states)} networks into {out}")
    return 0


def cmd_fuse(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg.set("fga.seed", args.seed)
    paths = sorted(_require(args.population_dir).glob("*.ckpt"))
    if not paths:
        raise FileNotFoundError(f"no checkpoints in {args.population_dir}")
    members = _load_members(paths)
    data = load_dataset(_require(args.data))
    population = Population(members, cfg.fga_config())
    train_cfg = cfg.train_config()
    for _ in range(args.generations):
        population = evolve_generation(population, train_cfg, data, args.parallel)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for slot, state in enumerate(population.members):
        save_checkpoint(state, out / f"net{slot:02d}.ckpt")
    rep = Report("fuse")
    rep.add("config", _config_section(cfg))
    rep.add("population", "\n".join(p.name for p in paths))
    rep.add_table("lineage", ["generation", "slot", "origin", "parents", "parent_fitness", "seed", "fitness"],
                  [[e.generation, e.slot, e.origin, ",".join(map(str, e.parents)) or "-",
                    ",".join(f"{f:.4f}" for f in e.parent_fitness) or "-", e.seed, e.fitness]
                   for e in population.lineage])
    rep.metric("generations", population.generation)
    rep.metric("best_fitness", min(population.fitness))
    rep.write(out / "fuse_report.txt")
    print(f"wrote generation {population.generation} ({len(population)} networks) to {out}")
    return 0


def _ensemble_args(args, cfg: RunConfig):
    strategy, alpha, beta = cfg.ensemble_params()
    strategy = args.strategy or strategy
    alpha = args.alpha if args.alpha is not None else alpha
    beta = args.beta if args.beta is not None else beta
    if strategy not in ensemble.STRATEGIES:
        raise ConfigurationError(f"unknown strategy {strategy!r}")
    cfg.set("ensemble.strategy", strategy)
    cfg.set("ensemble.alpha", alpha)
    cfg.set("ensemble.beta", beta)
    return strategy, alpha, beta


def cmd_ensemble_eval(args) -> int:
    cfg = _config(args)
    strategy, alpha, beta = _ensemble_args(args, cfg)
    states = _load_members(args.checkpoints)
    data = load_dataset(_require(args.data))
    logits = np.stack([predict_logits(s, data.images) for s in states])
    decision = ensemble.combine(strategy, logits, alpha, beta)
    result = evaluate_predictions(decision.predicted, data.labels, data.classes)

    rep = Report("ensemble-eval")
    rep.add("config", _config_section(cfg))
    single = [evaluate_predictions(lg.argmax(axis=1), data.labels, data.classes).accuracy for lg in logits]
    rep.add_table("networks", ["checkpoint", "accuracy"], [[str(p), a] for p, a in zip(args.checkpoints, single)])
    rep.add("confusion (%)", confusion_table(result.confusion, data.class_names))
    rep.add_table("per-class accuracy", ["class", "accuracy"], list(zip(data.class_names, result.per_class_accuracy)))
    rep.metric("strategy", strategy)
    rep.metric("networks", len(states))
    rep.metric("samples", len(data))
    rep.metric("accuracy", result.accuracy)
    rep.metric("mean_single_accuracy", float(np.mean(single)))
    _emit(rep, args.report)
    return 0


def cmd_rank_dist(args) -> int:
    state = load_checkpoint(_require(args.checkpoint))
    data = load_dataset(_require(args.data))
    logits = predict_logits(state, data.images)
    dist = ensemble.rank_distribution(logits, data.labels)
    accuracy = evaluate_predictions(logits.argmax(axis=1), data.labels, data.classes).accuracy
    rep = Report("rank-dist")
    rep.add("rank distribution (%)", rank_table({str(args.checkpoint): dist}))
    for k, v in enumerate(dist, 1):
        rep.metric(f"rank{k}", float(v))
    rep.metric("top2", float(dist[:2].sum()))
    rep.metric("accuracy", accuracy)
    _emit(rep, args.report)
    return 0


def _parse_sizes(text: str, upper: int) -> list[int]:
    if ".." in text:
        lo, _, hi = text.partition("..")
        try:
            sizes = list(range(int(lo), int(hi) + 1))
        except ValueError as exc:
            raise ConfigurationError(f"malformed --sizes {text!r}") from exc
    else:
        sizes = _int_list(text)
    if not sizes or min(sizes) < 1 or max(sizes) > upper:
        raise ConfigurationError(f"ensemble sizes {text!r} must lie within 1..{upper}")
    return sizes


def cmd_sweep(args) -> int:
    cfg = _config(args)
    strategy, alpha, beta = _ensemble_args(args, cfg)
    states = _load_members(args.checkpoints)
    data = load_dataset(_require(args.data))
    sizes = _parse_sizes(args.sizes, len(states))
    logits = np.stack([predict_logits(s, data.images) for s in states])
    rows = []
    rep = Report("sweep")
    rep.add("config", _config_section(cfg))
    for k in sizes:
        # size k always uses the first k checkpoints in the given order
        decision = ensemble.combine(strategy, logits[:k], alpha, beta)
        acc = evaluate_predictions(decision.predicted, data.labels, data.classes).accuracy
        rows.append([k, acc])
        rep.metric(f"accuracy_m{k}", acc)
    rep.add_table("sweep", ["size", f"{strategy}_accuracy"], rows)
    _emit(rep, args.report)
    return 0


def cmd_study(args) -> int:
    from .study import ensemble_study, fga_study, study_report

    study, train, test = ensemble_study(args.seed, args.members, args.parallel)
    fga = fga_study(args.seed, study.states, train, test, parallel=args.parallel) if args.fga else None
    _emit(study_report(study, fga), args.report)
    return 0


def cmd_defaults(args) -> int:
    sys.stdout.write(describe_defaults())
    return 0


def _emit(rep: Report, path) -> None:
    if path:
        rep.write(path)
    else:
        sys.stdout.write(rep.render())


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusionvote", description=__doc__.splitlines()[1])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic train/test datasets")
    p.add_argument("--out", required=True, help="output directory for train.fvd and test.fvd")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--counts", default="400", help="training samples per class: one int or a comma list")
    p.add_argument("--test-counts", default=None, help="test samples per class (default: a quarter)")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--jitter", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train M independently seeded networks")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--nets", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="overrides train.seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="run FGA generations over a population of checkpoints")
    p.add_argument("--config")
    p.add_argument("--population-dir", required=True)
    p.add_argument("--data", required=True, help="training data for retraining new networks")
    p.add_argument("--generations", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--seed", type=int, default=None, help="overrides fga.seed")
    p.set_defaults(func=cmd_fuse)

    def ensemble_flags(p):
        p.add_argument("--config")
        p.add_argument("--checkpoints", nargs="+", required=True)
        p.add_argument("--data", required=True)
        p.add_argument("--strategy", choices=ensemble.STRATEGIES, default=None)
        p.add_argument("--alpha", type=float, default=None)
        p.add_argument("--beta", type=float, default=None)
        p.add_argument("--report", default=None, help="report path (default: stdout)")

    p = sub.add_parser("ensemble-eval", help="evaluate a T2V / top-1 / NOI ensemble")
    ensemble_flags(p)
    p.set_defaults(func=cmd_ensemble_eval)

    p = sub.add_parser("rank-dist", help="distribution of the true label's rank in a network's output")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_rank_dist)

    p = sub.add_parser("sweep", help="ensemble accuracy against the number of networks")
    ensemble_flags(p)
    p.add_argument("--sizes", default="2..6", help="'lo..hi' or a comma list")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("study", help="run the pinned desk-scale study for one seed")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--members", type=int, default=6)
    p.add_argument("--fga", action="store_true", help="also run one FGA generation")
    p.add_argument("--parallel", type=int, default=1)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("defaults", help="print every configuration key with its default")
    p.set_defaults(func=cmd_defaults)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        return _fail("missing_file", exc.filename or exc)
    except SpecMismatchError as exc:
        return _fail("spec_mismatch", exc)
    except FormatError as exc:
        return _fail("format", exc)
    except ConfigurationError as exc:
        return _fail("config", exc)
    except PreconditionError as exc:
        return _fail("precondition", exc)
    except InputError as exc:
        return _fail("input", exc)


if __name__ == "__main__":
    sys.exit(main())

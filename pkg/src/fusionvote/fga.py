"""
Fusion of same-architecture networks by parameter averaging, wrapped in a
small genetic loop: pick parents preferentially by low training loss,
average them into children, add freshly initialized networks, retrain.

Averaging is exact feature fusion at the first convolution: every parent
sees the same input, and convolution is linear in its kernels, so the
fused layer's output is the mean of the parents' outputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data_io import DatasetBundle
from .errors import ConfigurationError, InputError, PreconditionError, SpecMismatchError
from .model_zoo import NetworkState, build
from .trainer import TrainConfig, train_many


@dataclass(frozen=True)
class FGAConfig:
    fusions: int = 2  # fused children per generation
    parents: int = 3  # K, parents per child
    fresh: int = 2  # R, freshly initialized networks per generation
    tau: float = 0.5  # selection temperature
    child_epochs: int = 20  # retraining cap for children and fresh networks
    seed: int = 0

    def __post_init__(self):
        if min(self.fusions, self.fresh) < 0 or self.parents < 1:
            raise ConfigurationError("fusions and fresh must be >= 0, parents >= 1")
        if not self.tau > 0:
            raise ConfigurationError(f"selection temperature must be positive, got {self.tau}")
        if self.child_epochs < 1:
            raise ConfigurationError("child_epochs must be >= 1")


@dataclass
class LineageEntry:
    generation: int
    slot: int
    origin: str  # "survivor", "fused" or "fresh"
    parents: tuple[int, ...]  # slots in the previous generation
    parent_fitness: tuple[float, ...]
    seed: int
    fitness: float | None = None


@dataclass
class Population:
    members: list[NetworkState]
    config: FGAConfig = FGAConfig()
    generation: int = 0
    lineage: list[LineageEntry] = field(default_factory=list)

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("population is empty")
        spec = self.members[0].spec
        if any(m.spec != spec for m in self.members):
            raise SpecMismatchError("population members must share one network spec")

    @property
    def fitness(self) -> list[float]:
        return [m.fitness for m in self.members]  # type: ignore[misc]

    def __len__(self) -> int:
        return len(self.members)


def fuse_weights(parents, seed: int = 0) -> NetworkState:
    """Child whose every parameter is the element-wise mean of the parents'.

    Values are sorted across parents before summing, which makes the
    result bit-identical under any parent ordering.
    """
    parents = list(parents)
    if not parents:
        raise ConfigurationError("fusion needs at least one parent")
    spec = parents[0].spec
    for p in parents[1:]:
        if p.spec != spec:
            raise SpecMismatchError("cannot fuse networks with different specs")
    for p in parents:
        p.check()
    params = {}
    for name, ref in parents[0].params.items():
        stack = np.sort(np.stack([p.params[name] for p in parents]).astype(np.float64), axis=0)
        params[name] = (stack.sum(axis=0) / len(parents)).astype(ref.dtype)
    return NetworkState(spec=spec, params=params, seed=seed)


def selection_probabilities(losses, tau: float) -> np.ndarray:
    """Boltzmann weights ``exp(-loss / tau)``, normalized; lower loss is likelier."""
    losses = np.asarray(losses, dtype=np.float64)
    if not tau > 0:
        raise ConfigurationError(f"selection temperature must be positive, got {tau}")
    if losses.ndim != 1 or losses.size == 0:
        raise InputError("need a non-empty 1-D sequence of losses")
    if not np.all(np.isfinite(losses)):
        raise InputError("losses must be finite")
    z = -(losses - losses.min()) / tau
    w = np.exp(z)
    return w / w.sum()


def select_parents(losses, k: int, tau: float, rng: np.random.Generator) -> list[int]:
    """``k`` distinct indices, drawn one at a time from the renormalized remaining weights."""
    probs = selection_probabilities(losses, tau)
    if k > probs.size or k < 0:
        raise ConfigurationError(f"cannot select {k} parents from {probs.size} members")
    remaining = list(range(probs.size))
    chosen = []
    for _ in range(k):
        w = probs[remaining]
        w = w / w.sum()
        pick = int(np.searchsorted(np.cumsum(w), rng.random(), side="right"))
        chosen.append(remaining.pop(min(pick, len(remaining) - 1)))
    return chosen


def evolve_generation(population: Population, train_cfg: TrainConfig, data: DatasetBundle,
                      parallel: int = 1) -> Population:
    """One round: fuse, add fresh networks, retrain both, keep the population size.

    Survivors are the ``size - fusions - fresh`` fittest members, in their
    original order; children and fresh networks are appended after them.
    """
    cfg = population.config
    members = population.members
    if any(not m.well_trained or m.fitness is None for m in members):
        raise PreconditionError("every member must be trained to plateau before fusion")
    size = len(members)
    keep = size - cfg.fusions - cfg.fresh
    if keep < 0:
        raise ConfigurationError(f"{cfg.fusions} fusions + {cfg.fresh} fresh exceed population size {size}")
    if cfg.fusions and cfg.parents > size:
        raise ConfigurationError(f"cannot select {cfg.parents} parents from {size} members")

    gen = population.generation + 1
    rng = np.random.default_rng([cfg.seed, gen])
    fitness = [float(m.fitness) for m in members]  # type: ignore[arg-type]
    ranked = sorted(range(size), key=lambda i: (fitness[i], i))
    survivors = sorted(ranked[:keep])

    lineage = [LineageEntry(gen, slot, "survivor", (i,), (fitness[i],), members[i].seed, fitness[i])
               for slot, i in enumerate(survivors)]
    new_states, new_entries = [], []
    for _ in range(cfg.fusions):
        picked = select_parents(fitness, cfg.parents, cfg.tau, rng)
        child_seed = int(rng.integers(2**31))
        new_states.append(fuse_weights([members[i] for i in picked], seed=child_seed))
        new_entries.append(("fused", tuple(picked), child_seed))
    for _ in range(cfg.fresh):
        fresh_seed = int(rng.integers(2**31))
        new_states.append(build(members[0].spec, fresh_seed))
        new_entries.append(("fresh", (), fresh_seed))

    cfgs = [replace(train_cfg, max_epochs=cfg.child_epochs, cosine_period=None,
                    stop_on_plateau=True, seed=seed) for _, _, seed in new_entries]
    trained, _ = train_many(new_states, data, cfgs, parallel)

    for offset, (state, (origin, picked, seed)) in enumerate(zip(trained, new_entries)):
        if state.fitness is None or not math.isfinite(state.fitness):
            raise InputError(f"retrained {origin} network produced non-finite fitness")
        lineage.append(LineageEntry(gen, keep + offset, origin, picked,
                                    tuple(fitness[i] for i in picked), seed, state.fitness))
    next_members = [members[i] for i in survivors] + list(trained)
    return Population(next_members, cfg, gen, population.lineage + lineage)

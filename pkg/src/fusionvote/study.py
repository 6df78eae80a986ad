"""
The pinned desk-scale protocol: skewed synthetic 5-class data, M
independently seeded MiniCNNs, and the ensemble / FGA comparisons run on
top of them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ensemble
from .data_io import DatasetBundle, generate_synthetic
from .fga import FGAConfig, Population, evolve_generation
from .losses import SKEWED_POLICY
from .model_zoo import NetworkState, build, minicnn_spec, predict_logits
from .report import Report, rank_table
from .trainer import TrainConfig, evaluate, train_many

CLASSES = 5
TRAIN_COUNTS = (800, 500, 400, 200, 100)
TEST_COUNTS = (200, 125, 100, 50, 25)
IMAGE_SIZE = 16
NOISE = 0.1
MAX_EPOCHS = 30
MEMBERS = 6


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def network_seeds(base: int, index: int) -> tuple[int, int]:
    """(initialization seed, training seed) of the index-th network of a run."""
    return derive_seed(base, index, 0), derive_seed(base, index, 1)


def protocol_data(seed: int) -> tuple[DatasetBundle, DatasetBundle]:
    return generate_synthetic(CLASSES, TRAIN_COUNTS, IMAGE_SIZE, NOISE, seed, test_counts=TEST_COUNTS)


def protocol_train_config(seed: int) -> TrainConfig:
    return TrainConfig(max_epochs=MAX_EPOCHS, loss_policy=SKEWED_POLICY, seed=seed)


def train_members(seed: int, data: DatasetBundle, members: int = MEMBERS, parallel: int = 1,
                  base_cfg: TrainConfig | None = None, spec=None) -> list[NetworkState]:
    spec = spec or minicnn_spec(data.image_shape, data.classes)
    base_cfg = base_cfg or protocol_train_config(0)
    states, cfgs = [], []
    for index in range(members):
        init_seed, train_seed = network_seeds(seed, index)
        states.append(build(spec, init_seed))
        cfgs.append(TrainConfig(**{**base_cfg.__dict__, "seed": train_seed}))
    trained, _ = train_many(states, data, cfgs, parallel)
    return trained


@dataclass
class EnsembleStudy:
    seed: int
    labels: np.ndarray
    logits: np.ndarray  # [M, N, C] test logits
    single_accuracy: list[float]
    strategy_accuracy: dict[str, dict[int, float]]  # strategy -> ensemble size -> accuracy
    rank_distributions: list[np.ndarray]
    states: list[NetworkState] = field(default_factory=list, repr=False)

    @property
    def mean_single(self) -> float:
        return float(np.mean(self.single_accuracy))


def ensemble_accuracy(strategy: str, logits: np.ndarray, labels: np.ndarray,
                      alpha: float = ensemble.DEFAULT_ALPHA, beta: float = ensemble.DEFAULT_BETA) -> float:
    decision = ensemble.combine(strategy, logits, alpha, beta)
    return int((decision.predicted == labels).sum()) / len(labels)


def analyze(seed: int, states: list[NetworkState], test: DatasetBundle) -> EnsembleStudy:
    logits = np.stack([predict_logits(s, test.images) for s in states])
    single = [evaluate(s, test).accuracy for s in states]
    sizes = range(1, len(states) + 1)
    by_strategy = {
        strategy: {k: ensemble_accuracy(strategy, logits[:k], test.labels) for k in sizes}
        for strategy in ensemble.STRATEGIES
    }
    dists = [ensemble.rank_distribution(lg, test.labels) for lg in logits]
    return EnsembleStudy(seed, test.labels, logits, single, by_strategy, dists, list(states))


def ensemble_study(seed: int, members: int = MEMBERS, parallel: int = 1):
    train, test = protocol_data(seed)
    states = train_members(seed, train, members, parallel)
    return analyze(seed, states, test), train, test


@dataclass
class FGAStudy:
    seed: int
    pre_accuracy: list[float]
    post_accuracy: list[float]
    population: Population

    @property
    def pre_best(self) -> float:
        return max(self.pre_accuracy)

    @property
    def post_best(self) -> float:
        return max(self.post_accuracy)


def fga_study(seed: int, states: list[NetworkState], train: DatasetBundle, test: DatasetBundle,
              config: FGAConfig | None = None, parallel: int = 1) -> FGAStudy:
    config = config or FGAConfig(fusions=2, parents=3, fresh=2, seed=derive_seed(seed, 99))
    population = Population([s.copy() for s in states], config)
    after = evolve_generation(population, protocol_train_config(0), train, parallel)
    pre = [evaluate(s, test).accuracy for s in states]
    post = [evaluate(s, test).accuracy for s in after.members]
    return FGAStudy(seed, pre, post, after)


def study_report(study: EnsembleStudy, fga: FGAStudy | None = None) -> Report:
    rep = Report(f"desk-scale study seed={study.seed}")
    M = len(study.single_accuracy)
    rep.add_table("single networks", ["network", "accuracy"],
                  [[f"net{i}", a] for i, a in enumerate(study.single_accuracy)])
    rows = [[k] + [study.strategy_accuracy[s][k] for s in ensemble.STRATEGIES] for k in range(1, M + 1)]
    rep.add_table("ensemble size sweep", ["size"] + list(ensemble.STRATEGIES), rows)
    rep.add("rank distribution (%)", rank_table({f"net{i}": d for i, d in enumerate(study.rank_distributions)}))
    rep.metric("seed", study.seed)
    rep.metric("mean_single", study.mean_single)
    for s in ensemble.STRATEGIES:
        rep.metric(f"{s}_m{M}", study.strategy_accuracy[s][M])
    rep.metric("t2v_m2", study.strategy_accuracy["t2v"][2])
    if fga is not None:
        rep.add_table("fga lineage", ["slot", "origin", "parents", "seed", "fitness", "accuracy"],
                      [[e.slot, e.origin, ",".join(map(str, e.parents)) or "-", e.seed, e.fitness, acc]
                       for e, acc in zip(fga.population.lineage, fga.post_accuracy)])
        rep.metric("fga_pre_best", fga.pre_best)
        rep.metric("fga_post_best", fga.post_best)
    return rep

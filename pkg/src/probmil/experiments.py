"""Desk-scale comparisons on synthetic data.

Three experiments mirror the published comparisons:

* ``pooling``   - max vs collective vs attention (softmax) pooling;
* ``phi``       - the three non-negative functions of the measure head;
* ``balancing`` - class-balanced vs uniformly shuffled mini-batches on a
  task where one class is 50 times more frequent than the others.

Every run trains on its own seed and is scored on a held-out split with
the final network (no checkpoint selection on the scored split).
"""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from .data import SyntheticSpec, generate_synthetic, split
from .metrics import evaluate
from .training import ExperimentConfig, predict_scores, train

logger = logging.getLogger(__name__)

# narrower than the 500-unit default so a 10k-step run takes ~25 s on one core
DESK_HIDDEN = (64, 64, 64)
SEEDS = (0, 1, 2, 3, 4)


def default_task(seed, **overrides):
    """K=10, M=16, L=10, 1-2 positives; 5000 train / 1000 eval bags."""
    spec = SyntheticSpec(num_classes=10, feature_dim=16, bag_size=10, bags_per_class=600,
                         positives=(1, 2), seed=seed, **overrides)
    return split(generate_synthetic(spec), (5 / 6, 1 / 6), seed)


def skewed_task(seed, minority=40, ratio=50, **overrides):
    """Class 0 has ``ratio`` times as many bags as each other class."""
    counts = [minority * ratio] + [minority] * 9
    spec = SyntheticSpec(num_classes=10, feature_dim=16, bag_size=10, bags_per_class=counts,
                         seed=seed, **overrides)
    return split(generate_synthetic(spec), (0.8, 0.2), seed)


@dataclass
class RunResult:
    label: str
    seed: int
    mAP: float
    AUC: float
    d_prime: float
    per_class_ap: list
    seconds: float


def run(label, seed, train_ds, eval_ds, **config) -> RunResult:
    config.setdefault("hidden", DESK_HIDDEN)
    cfg = ExperimentConfig(seed=seed, **config)
    t0 = time.perf_counter()
    _, final, _ = train(train_ds, eval_ds, cfg)
    rep = evaluate(predict_scores(final, cfg.strategy, eval_ds.instances()), eval_ds.labels)
    aps = [m.ap if m is not None else float("nan") for m in rep.per_class]
    res = RunResult(label, seed, rep.mAP, rep.AUC, rep.d_prime, aps, time.perf_counter() - t0)
    logger.info("%s seed %d: mAP %.4f AUC %.4f (%.0fs)", label, seed, res.mAP, res.AUC, res.seconds)
    return res


@dataclass
class Comparison:
    name: str
    results: dict = field(default_factory=dict)  # label -> list[RunResult]

    def add(self, r: RunResult):
        self.results.setdefault(r.label, []).append(r)

    def values(self, label, key="mAP"):
        return [getattr(r, key) for r in self.results[label]]

    def median(self, label, key="mAP"):
        return statistics.median(self.values(label, key))

    def table(self, key_columns=("mAP", "AUC", "d_prime")) -> str:
        head = f"{'':28s}" + "".join(f"{k:>10s}" for k in key_columns)
        lines = [self.name, head]
        for label, runs in self.results.items():
            cells = "".join(f"{statistics.median([getattr(r, k) for r in runs]):10.3f}"
                            for k in key_columns)
            lines.append(f"{label:28s}{cells}")
        lines.append("(medians over seeds " + ",".join(str(r.seed) for r in next(iter(self.results.values()))) + ")")
        return "\n".join(lines)


POOLING_RUNS = (
    ("DNN max pooling", dict(strategy="max")),
    ("DNN avg. pooling", dict(strategy="collective")),
    ("DNN softmax attention", dict(strategy="attention", phi="softmax")),
)

PHI_RUNS = (
    ("DNN ReLU attention", dict(strategy="attention", phi="relu")),
    ("DNN sigmoid attention", dict(strategy="attention", phi="sigmoid")),
    ("DNN softmax attention", dict(strategy="attention", phi="softmax")),
)

# pooling left at the pipeline default (attention)
BALANCE_RUNS = (
    ("w/o balancing", dict(balanced=False)),
    ("with balancing", dict(balanced=True)),
)


def pooling_comparison(seeds=SEEDS, **config) -> Comparison:
    comp = Comparison("pooling strategies")
    for seed in seeds:
        tr, ev = default_task(seed)
        for label, opts in POOLING_RUNS:
            comp.add(run(label, seed, tr, ev, **{**config, **opts}))
    return comp


def phi_comparison(seeds=SEEDS, reuse: Comparison = None, **config) -> Comparison:
    """Compare phi variants; softmax runs are taken from ``reuse`` if present."""
    comp = Comparison("measure non-negative function")
    for seed in seeds:
        tr = ev = None
        for label, opts in PHI_RUNS:
            cached = [r for r in (reuse.results.get(label, []) if reuse else []) if r.seed == seed]
            if cached:
                comp.add(cached[0])
                continue
            if tr is None:
                tr, ev = default_task(seed)
            comp.add(run(label, seed, tr, ev, **{**config, **opts}))
    return comp


def minority_ap(r: RunResult) -> float:
    return float(np.nanmean(r.per_class_ap[1:]))


def balancing_comparison(seeds=SEEDS, **config) -> Comparison:
    comp = Comparison("mini-batch balancing (class 0 is 50x more frequent)")
    for seed in seeds:
        tr, ev = skewed_task(seed)
        for label, opts in BALANCE_RUNS:
            comp.add(run(label, seed, tr, ev, **{**config, **opts}))
    return comp


EXPERIMENTS = {
    "pooling": pooling_comparison,
    "phi": phi_comparison,
    "balancing": balancing_comparison,
}

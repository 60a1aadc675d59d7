"""Mini-batch training with periodic evaluation and best-mAP selection."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import Dataset, SamplerState, SyntheticSpec, balanced_batches, shuffled_batches
from .metrics import EvaluationError, MetricsReport, evaluate
from .model import (
    Adam,
    ConfigError,
    MilNetwork,
    backward,
    forward_batch,
    init_network,
    loss,
    parse_strategy,
    sgd_step,
)
from .tensor_core import Rng

logger = logging.getLogger(__name__)


class NumericError(ArithmeticError):
    def __init__(self, step, value):
        self.step = step
        super().__init__(f"non-finite training loss {value} at step {step}")


@dataclass
class ExperimentConfig:
    data: Optional[str] = None
    eval_data: Optional[str] = None
    eval_fraction: float = 0.2
    synthetic: Optional[dict] = None
    strategy: str = "attention"
    phi: str = "softmax"
    hidden: tuple = (500, 500, 500)
    dropout: float = 0.2
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 10000
    balanced: bool = True
    seed: int = 0
    checkpoint: Optional[str] = None
    eval_every: int = 500
    deterministic: bool = True

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        parse_strategy(self.strategy)
        if self.batch_size < 1 or self.steps < 0 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1, steps >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(**(self.synthetic or {}))


@dataclass
class EvalRecord:
    step: int
    train_loss: float
    mAP: float
    AUC: float
    d_prime: float
    wall_time: float = 0.0


@dataclass
class RunLog:
    config: dict
    records: list = field(default_factory=list)
    best_step: Optional[int] = None

    def add(self, rec: EvalRecord):
        if self.records and rec.step <= self.records[-1].step:
            raise ValueError(f"eval steps must increase: {rec.step} after {self.records[-1].step}")
        self.records.append(rec)

    def to_keyvalue(self, include_wall_time=False) -> str:
        """One ``key=value`` per line.

        ``config.<name>`` lines echo the effective configuration (JSON
        values), then ``records``, ``best_step`` and per-record lines
        ``record.<i>.<field>``.  Wall time is left out unless requested
        since it is the only non-reproducible field.
        """
        lines = [f"config.{k}={json.dumps(v)}" for k, v in self.config.items()]
        lines.append(f"records={len(self.records)}")
        lines.append(f"best_step={self.best_step if self.best_step is not None else ''}")
        for i, r in enumerate(self.records):
            lines += [f"record.{i}.step={r.step}",
                      f"record.{i}.train_loss={r.train_loss!r}",
                      f"record.{i}.mAP={r.mAP!r}",
                      f"record.{i}.AUC={r.AUC!r}",
                      f"record.{i}.d_prime={r.d_prime!r}"]
            if include_wall_time:
                lines.append(f"record.{i}.wall_time={r.wall_time!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_keyvalue(cls, text: str) -> "RunLog":
        kv = dict(line.split("=", 1) for line in text.splitlines() if line.strip())
        config = {k[len("config."):]: json.loads(v) for k, v in kv.items() if k.startswith("config.")}
        log = cls(config, best_step=int(kv["best_step"]) if kv.get("best_step") else None)
        for i in range(int(kv["records"])):
            g = lambda name, conv=float: conv(kv[f"record.{i}.{name}"])  # noqa: E731
            log.records.append(EvalRecord(g("step", int), g("train_loss"), g("mAP"), g("AUC"),
                                          g("d_prime"), float(kv.get(f"record.{i}.wall_time", 0.0))))
        return log


# --------------------------------------------------------------------------


def _groups(X, idx):
    """Yield (positions-in-batch, stacked bags) grouped by bag length."""
    if isinstance(X, np.ndarray):
        yield np.arange(len(idx)), X[idx]
        return
    by_len = {}
    for pos, i in enumerate(idx):
        by_len.setdefault(X[i].shape[0], []).append(pos)
    for L in sorted(by_len):
        pos = np.asarray(by_len[L])
        yield pos, np.stack([X[idx[p]] for p in pos])


def batch_gradients(net, strategy, X, Y, idx, rng=None):
    """Mean loss and gradients over the bags ``idx``; mixed lengths allowed."""
    idx = np.asarray(idx)
    total, grads = 0.0, None
    for pos, bags in _groups(X, idx):
        w = len(pos) / len(idx)
        c = forward_batch(net, strategy, bags, rng)
        d = Y[idx[pos]]
        total += w * loss(c.F, d)
        g = backward(net, d, c)
        if grads is None:
            grads = [w * gi for gi in g]
        else:
            for acc, gi in zip(grads, g):
                acc += w * gi
    return total, grads


def predict_scores(net: MilNetwork, strategy, X, chunk=512) -> np.ndarray:
    """Eval-mode bag predictions, (N, K)."""
    strategy = parse_strategy(strategy)
    was_training = net.training
    net.eval()
    try:
        n = len(X)
        out = np.empty((n, net.num_classes))
        for start in range(0, n, chunk):
            idx = np.arange(start, min(n, start + chunk))
            for pos, bags in _groups(X, idx):
                out[idx[pos]] = forward_batch(net, strategy, bags).F
        net.last_forward = None
        return out
    finally:
        net.training = was_training


def evaluate_network(net, strategy, ds: Dataset) -> MetricsReport:
    return evaluate(predict_scores(net, strategy, ds.instances()), ds.labels)


def train(train_ds: Dataset, eval_ds: Optional[Dataset], config: ExperimentConfig,
          net: Optional[MilNetwork] = None):
    """Train a network; returns ``(best_net, final_net, run_log)``.

    Randomness comes from independent sub-streams of ``Rng(config.seed)``:
    ``init`` for weights, ``dropout`` for masks and ``sampler`` for batch
    order, so toggling balancing changes only the batch order.
    """
    strategy = parse_strategy(config.strategy)
    root = Rng(config.seed)
    if net is None:
        net = init_network(train_ds.feature_dim, train_ds.num_classes, config.hidden,
                           config.dropout, config.phi, root.stream("init"))
    elif net.feature_dim != train_ds.feature_dim or net.num_classes != train_ds.num_classes:
        raise ConfigError(
            f"network expects M={net.feature_dim}, K={net.num_classes}; "
            f"data has M={train_ds.feature_dim}, K={train_ds.num_classes}"
        )
    if len(train_ds) == 0:
        raise ConfigError("training set is empty")
    drop_rng = root.stream("dropout")
    samp_rng = root.stream("sampler")
    if config.balanced:
        batches = balanced_batches(SamplerState.from_labels(train_ds.labels, samp_rng), config.batch_size)
    else:
        batches = shuffled_batches(len(train_ds), config.batch_size, samp_rng)

    X = train_ds.instances()
    Y = train_ds.labels.astype(np.float64)
    X_eval = eval_ds.instances() if eval_ds is not None and len(eval_ds) else None
    opt = Adam(lr=config.lr)
    # the checkpoint path is an output location, not part of the experiment
    log = RunLog({k: v for k, v in config.to_dict().items() if k != "checkpoint"})
    best_net, best_map = net.copy(), -math.inf
    start = time.perf_counter()

    def checkpoint_eval(step):
        nonlocal best_net, best_map
        train_loss = loss(predict_scores(net, strategy, X), Y)
        if not math.isfinite(train_loss):
            raise NumericError(step, train_loss)
        mAP = AUC = dp = math.nan
        if X_eval is not None:
            try:
                rep = evaluate(predict_scores(net, strategy, X_eval), eval_ds.labels)
                mAP, AUC, dp = rep.mAP, rep.AUC, rep.d_prime
            except EvaluationError as exc:
                logger.warning("evaluation skipped at step %d: %s", step, exc)
        rec = EvalRecord(step, train_loss, mAP, AUC, dp, time.perf_counter() - start)
        log.add(rec)
        logger.info("step %d loss %.5f mAP %.4f AUC %.4f d' %.3f", step, train_loss, mAP, AUC, dp)
        score = mAP if math.isfinite(mAP) else -train_loss
        if score > best_map:
            best_map, best_net = score, net.copy()
            log.best_step = step

    checkpoint_eval(0)
    net.train()
    for step in range(1, config.steps + 1):
        idx = next(batches)
        value, grads = batch_gradients(net, strategy, X, Y, idx, drop_rng)
        if not math.isfinite(value):
            raise NumericError(step, value)
        sgd_step(net, grads, opt)
        if step % config.eval_every == 0 or step == config.steps:
            net.eval()
            checkpoint_eval(step)
            net.train()
    net.eval()
    net.last_forward = None
    best_net.eval()
    return best_net, net, log

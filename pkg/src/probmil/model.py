"""Instance-level network, bag pooling and hand-written backpropagation.

The network maps every instance of a bag through a shared stack of fully
connected ReLU layers (the embedding ``g``).  Two linear heads read the
embedding: a sigmoid classifier ``f`` giving per-instance class
probabilities, and a measure head ``v = phi(W_v h + b_v)`` giving a
non-negative weight per instance and class.  Normalising ``v`` over the
instances of a bag yields a probability measure ``p`` and the bag
prediction is the expectation of ``f`` under ``p``.

Collective (mean) and max pooling are available for comparison; they
ignore the measure head.

Everything here works on stacks of equal-length bags, shape
``(B, L, M)``, flattened to ``(B * L, M)`` for the dense layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .tensor_core import (
    DomainError,
    Rng,
    ShapeError,
    as_matrix,
    relu,
    sigmoid,
    softmax_rows,
)

PHIS = ("relu", "sigmoid", "softmax")
MEASURE_EPS = 1e-8
LOSS_CLAMP = 1e-12


class ConfigError(ValueError):
    pass


class StateError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# pooling strategies


@dataclass(frozen=True)
class Collective:
    """Unweighted mean of instance predictions."""

    name = "collective"
    uses_measure = False


@dataclass(frozen=True)
class MaxSelection:
    """Per-class maximum over instance predictions."""

    name = "max"
    uses_measure = False


@dataclass(frozen=True)
class WeightedCollective:
    """Weighted mean with an explicit weight source.

    ``weight_source="measure"`` uses the measure head as ``w(x)`` and is
    numerically the same computation as :class:`Attention`;
    ``"uniform"`` uses ``w(x) = 1`` and reduces to :class:`Collective`.
    """

    weight_source: str = "measure"
    name = "weighted"

    def __post_init__(self):
        if self.weight_source not in ("measure", "uniform"):
            raise ConfigError(f"unknown weight source {self.weight_source!r}")

    @property
    def uses_measure(self):
        return self.weight_source == "measure"


@dataclass(frozen=True)
class Attention:
    """Expectation of instance predictions under the learned measure.

    The non-negative function ``phi`` is a property of the network.
    """

    name = "attention"
    uses_measure = True


PoolingStrategy = Union[Collective, MaxSelection, WeightedCollective, Attention]

STRATEGIES = {
    "collective": Collective,
    "max": MaxSelection,
    "weighted": WeightedCollective,
    "attention": Attention,
}


def parse_strategy(name) -> PoolingStrategy:
    if isinstance(name, (Collective, MaxSelection, WeightedCollective, Attention)):
        return name
    try:
        return STRATEGIES[name]()
    except KeyError:
        raise ConfigError(
            f"unknown pooling strategy {name!r}; choose from {sorted(STRATEGIES)}"
        ) from None


# --------------------------------------------------------------------------
# value types


@dataclass(frozen=True)
class ProbabilityMeasure:
    """Per-class probability over the instances of one bag, shape (L, K)."""

    p: np.ndarray

    def __post_init__(self):
        p = as_matrix(self.p, "p")
        if np.any(p < 0):
            raise DomainError("probability measure has negative mass")
        if not np.allclose(p.sum(axis=0), 1.0, rtol=0, atol=1e-9):
            raise DomainError("probability measure columns must sum to 1")
        object.__setattr__(self, "p", p)


@dataclass(frozen=True)
class BagPrediction:
    F: np.ndarray  # (1, K)
    instance_probs: np.ndarray  # (L, K)
    measure: Optional[ProbabilityMeasure] = None


class MilNetwork:
    """Parameters of the embedding stack and the two heads.

    Parameters are kept in declaration order: ``W0, b0, ..., W_f, b_f,
    W_v, b_v``.  Biases are ``(1, out)`` rows.
    """

    def __init__(self, weights, biases, W_f, b_f, W_v, b_v, dropout=0.2, phi="softmax"):
        if len(weights) != len(biases) or not weights:
            raise ConfigError("need at least one embedding layer")
        if phi not in PHIS:
            raise ConfigError(f"phi must be one of {PHIS}, got {phi!r}")
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {dropout}")
        self.weights = [as_matrix(w) for w in weights]
        self.biases = [as_matrix(b) for b in biases]
        self.W_f, self.b_f = as_matrix(W_f), as_matrix(b_f)
        self.W_v, self.b_v = as_matrix(W_v), as_matrix(b_v)
        self.dropout = float(dropout)
        self.phi = phi
        self.training = False
        self.last_forward = None
        self._check_shapes()

    def _check_shapes(self):
        prev = self.weights[0].shape[0]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[0] != prev:
                raise ShapeError(f"layer {i} expects {w.shape[0]} inputs, previous layer gives {prev}")
            if b.shape != (1, w.shape[1]):
                raise ShapeError(f"layer {i} bias shape {b.shape} != (1, {w.shape[1]})")
            prev = w.shape[1]
        k = self.W_f.shape[1]
        for name, w, b in (("classifier", self.W_f, self.b_f), ("measure", self.W_v, self.b_v)):
            if w.shape != (prev, k) or b.shape != (1, k):
                raise ShapeError(
                    f"{name} head shapes {w.shape}/{b.shape} do not match embedding dim {prev}, K={k}"
                )

    @property
    def feature_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.W_f.shape[1]

    @property
    def hidden(self) -> list[int]:
        return [w.shape[1] for w in self.weights]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.W_f, self.b_f, self.W_v, self.b_v]

    def parameter_names(self) -> list[str]:
        names = []
        for i in range(len(self.weights)):
            names += [f"W{i}", f"b{i}"]
        return names + ["W_f", "b_f", "W_v", "b_v"]

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self) -> "MilNetwork":
        net = MilNetwork(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.W_f.copy(), self.b_f.copy(), self.W_v.copy(), self.b_v.copy(),
            self.dropout, self.phi,
        )
        net.training = self.training
        return net

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self


def init_network(feature_dim, num_classes, hidden=(500, 500, 500), dropout=0.2,
                 phi="softmax", rng: Optional[Rng] = None) -> MilNetwork:
    """Glorot-uniform weights, zero biases."""
    if feature_dim < 1 or num_classes < 1:
        raise ConfigError("feature_dim and num_classes must be >= 1")
    hidden = list(hidden)
    if not hidden or any(h < 1 for h in hidden):
        raise ConfigError(f"hidden must be a non-empty list of positive sizes, got {hidden}")
    rng = rng if rng is not None else Rng(0)

    def glorot(fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return (2.0 * rng.uniform(fan_in, fan_out) - 1.0) * limit

    weights, biases = [], []
    prev = feature_dim
    for h in hidden:
        weights.append(glorot(prev, h))
        biases.append(np.zeros((1, h)))
        prev = h
    W_f = glorot(prev, num_classes)
    W_v = glorot(prev, num_classes)
    return MilNetwork(weights, biases, W_f, np.zeros((1, num_classes)),
                      W_v, np.zeros((1, num_classes)), dropout, phi)


# --------------------------------------------------------------------------
# forward pieces


def _embed(net: MilNetwork, x: np.ndarray, rng: Optional[Rng]):
    if x.shape[1] != net.feature_dim:
        raise ShapeError(f"instances have {x.shape[1]} features, network expects {net.feature_dim}")
    drop = net.training and net.dropout > 0
    if drop and rng is None:
        raise StateError("training-mode dropout needs an Rng")
    inputs, pre, masks = [], [], []
    a = x
    for w, b in zip(net.weights, net.biases):
        inputs.append(a)
        z = a @ w + b
        pre.append(z)
        a = relu(z)
        if drop:
            m = (rng.uniform(*a.shape) >= net.dropout) / (1.0 - net.dropout)
            a = a * m
        else:
            m = None
        masks.append(m)
    return a, inputs, pre, masks


def embed(net: MilNetwork, instances, rng: Optional[Rng] = None) -> np.ndarray:
    """Embedded instances ``h = g(x)`` for an (L, M) matrix."""
    h, *_ = _embed(net, as_matrix(instances, "instances"), rng)
    return h


def _check_embedding(net, h):
    h = as_matrix(h, "h")
    if h.shape[1] != net.W_f.shape[0]:
        raise ShapeError(f"embedding has {h.shape[1]} columns, heads expect {net.W_f.shape[0]}")
    return h


def classify_instances(net: MilNetwork, h) -> np.ndarray:
    h = _check_embedding(net, h)
    return sigmoid(h @ net.W_f + net.b_f)


def _phi(name, z):
    if name == "relu":
        return relu(z)
    if name == "sigmoid":
        return sigmoid(z)
    # across classes, per instance
    return softmax_rows(z)


def measure_instances(net: MilNetwork, h) -> np.ndarray:
    h = _check_embedding(net, h)
    return _phi(net.phi, h @ net.W_v + net.b_v)


def _normalize(v: np.ndarray) -> np.ndarray:
    # v: (..., L, K); normalise over the instance axis
    ve = v + MEASURE_EPS
    return ve / ve.sum(axis=-2, keepdims=True)


def normalize_measure(v) -> ProbabilityMeasure:
    v = as_matrix(v, "v")
    if np.any(v < 0):
        raise DomainError("measure values must be non-negative")
    return ProbabilityMeasure(_normalize(v))


def _pool(strategy, f, p):
    # f, p: (B, L, K) -> (B, K)
    if isinstance(strategy, Collective) or (
        isinstance(strategy, WeightedCollective) and not strategy.uses_measure
    ):
        return f.mean(axis=1)
    if isinstance(strategy, MaxSelection):
        return f.max(axis=1)
    if p is None:
        raise StateError(f"{strategy.name} pooling needs a probability measure")
    if p.shape != f.shape:
        raise ShapeError(f"measure shape {p.shape} does not match predictions {f.shape}")
    return (f * p).sum(axis=1)


def pool(strategy, f, p=None) -> np.ndarray:
    """Bag prediction (1, K) from instance predictions ``f`` (L, K)."""
    strategy = parse_strategy(strategy)
    f = as_matrix(f, "f")
    if isinstance(p, ProbabilityMeasure):
        p = p.p
    if p is not None:
        p = as_matrix(p, "p")[None]
    return _pool(strategy, f[None], p)


# --------------------------------------------------------------------------
# batched forward / backward


@dataclass
class ForwardCache:
    strategy: PoolingStrategy
    B: int
    L: int
    inputs: list
    pre: list
    masks: list
    h: np.ndarray  # (B*L, H)
    f: np.ndarray  # (B, L, K)
    zv: Optional[np.ndarray] = None  # (B*L, K)
    v: Optional[np.ndarray] = None  # (B, L, K)
    p: Optional[np.ndarray] = None  # (B, L, K)
    F: np.ndarray = field(default=None)  # (B, K)


def forward_batch(net: MilNetwork, strategy, bags, rng: Optional[Rng] = None) -> ForwardCache:
    """Forward a stack of equal-length bags, shape (B, L, M).

    The returned cache is also stored on ``net.last_forward`` for
    :func:`backward`.
    """
    strategy = parse_strategy(strategy)
    bags = np.asarray(bags, dtype=np.float64)
    if bags.ndim != 3:
        raise ShapeError(f"bags must be (B, L, M), got shape {bags.shape}")
    B, L, M = bags.shape
    if B == 0 or L == 0:
        raise ShapeError("empty bag batch")
    h, inputs, pre, masks = _embed(net, bags.reshape(B * L, M), rng)
    K = net.num_classes
    f = sigmoid(h @ net.W_f + net.b_f).reshape(B, L, K)
    cache = ForwardCache(strategy, B, L, inputs, pre, masks, h, f)
    if strategy.uses_measure:
        cache.zv = h @ net.W_v + net.b_v
        cache.v = _phi(net.phi, cache.zv).reshape(B, L, K)
        cache.p = _normalize(cache.v)
    cache.F = _pool(strategy, f, cache.p)
    net.last_forward = cache
    return cache


def forward_bag(net: MilNetwork, strategy, bag, rng: Optional[Rng] = None) -> BagPrediction:
    bag = as_matrix(bag, "bag")
    c = forward_batch(net, strategy, bag[None], rng)
    measure = ProbabilityMeasure(c.p[0]) if c.p is not None else None
    return BagPrediction(c.F[0][None], c.f[0], measure)


def loss(F, d) -> float:
    """Binary cross-entropy averaged over classes (and bags, for 2-D input).

    ``F`` is clamped to ``[1e-12, 1 - 1e-12]`` before taking logs.
    """
    F = np.clip(np.asarray(F, dtype=np.float64), LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    d = np.asarray(d, dtype=np.float64)
    if F.shape != d.shape:
        raise ShapeError(f"prediction shape {F.shape} != label shape {d.shape}")
    return float(-np.mean(d * np.log(F) + (1.0 - d) * np.log(1.0 - F)))


def _loss_grad(F, d):
    inside = (F >= LOSS_CLAMP) & (F <= 1.0 - LOSS_CLAMP)
    Fc = np.clip(F, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    return inside * (Fc - d) / (Fc * (1.0 - Fc)) / F.size


def backward(net: MilNetwork, d, cache: Optional[ForwardCache] = None) -> list[np.ndarray]:
    """Gradients of :func:`loss` with respect to ``net.parameters()``.

    Uses ``cache`` or, if omitted, the network's most recent forward pass.
    """
    c = cache if cache is not None else net.last_forward
    if c is None:
        raise StateError("backward called before forward")
    d = np.asarray(d, dtype=np.float64).reshape(c.F.shape)
    B, L, K = c.f.shape
    gF = _loss_grad(c.F, d)  # (B, K)

    s = c.strategy
    if isinstance(s, MaxSelection):
        # only the (first) argmax instance of each class receives gradient
        idx = np.argmax(c.f, axis=1)
        df = np.zeros_like(c.f)
        bi, ki = np.meshgrid(np.arange(B), np.arange(K), indexing="ij")
        df[bi, idx, ki] = gF
    elif s.uses_measure:
        df = gF[:, None, :] * c.p
    else:
        df = np.broadcast_to(gF[:, None, :] / L, c.f.shape)

    dzf = (df * c.f * (1.0 - c.f)).reshape(B * L, K)
    dW_f = c.h.T @ dzf
    db_f = dzf.sum(axis=0, keepdims=True)
    dh = dzf @ net.W_f.T

    if s.uses_measure:
        # quotient rule through p = (v + eps) / sum_l (v + eps)
        denom = (c.v + MEASURE_EPS).sum(axis=1, keepdims=True)
        dv = (gF[:, None, :] * (c.f - c.F[:, None, :]) / denom).reshape(B * L, K)
        v = c.v.reshape(B * L, K)
        if net.phi == "relu":
            dzv = dv * (c.zv > 0)
        elif net.phi == "sigmoid":
            dzv = dv * v * (1.0 - v)
        else:
            dzv = v * (dv - (dv * v).sum(axis=1, keepdims=True))
        dW_v = c.h.T @ dzv
        db_v = dzv.sum(axis=0, keepdims=True)
        dh = dh + dzv @ net.W_v.T
    else:
        dW_v = np.zeros_like(net.W_v)
        db_v = np.zeros_like(net.b_v)

    layer_grads = []
    for i in reversed(range(len(net.weights))):
        da = dh if c.masks[i] is None else dh * c.masks[i]
        dz = da * (c.pre[i] > 0)
        layer_grads.append((c.inputs[i].T @ dz, dz.sum(axis=0, keepdims=True)))
        if i > 0:
            dh = dz @ net.weights[i].T
    grads = []
    for gw, gb in reversed(layer_grads):
        grads += [gw, gb]
    return grads + [dW_f, db_f, dW_v, db_v]


# --------------------------------------------------------------------------
# optimiser


class Adam:
    """Adam with bias-corrected moments; updates parameters in place."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads, lr=None):
        if len(params) != len(grads):
            raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        lr = self.lr if lr is None else lr
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def sgd_step(net: MilNetwork, grads, state: Adam, lr=None) -> MilNetwork:
    """Apply one Adam update to ``net`` in place and return it."""
    state.step(net.parameters(), grads, lr)
    return net

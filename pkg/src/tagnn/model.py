"""Target-attentive gated graph network over session graphs.

All batched computations use the row-vector convention: a linear map ``W x``
is evaluated as ``x @ W.T`` on a stack of rows. Session-level pooling runs
over prefix *positions* (node states gathered through the alias map), so an
item clicked twice contributes twice.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import GraphBatch, SessionGraph, build_graph, pad_graphs

VARIANTS = ("full", "L", "Avg", "Att", "L_plus_Att")
LOSS_MODES = ("categorical", "eq13")
LOG_FLOOR = 1e-12

# Number of d-wide blocks the output projection takes, per variant.
_W3_BLOCKS = {"full": 3, "L_plus_Att": 2, "Att": 1}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VariantConfig:
    variant: str = "full"
    steps: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")
        if self.steps < 0:
            raise ConfigError(f"GGNN steps must be >= 0, got {self.steps}")


def param_shapes(m: int, d: int, variant: str) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes used by ``variant``, in canonical order."""
    shapes = {
        "embedding": (m + 1, d),  # last row is the frozen padding item
        "H_out": (d, d),
        "H_in": (d, d),
        "b_out": (d,),
        "b_in": (d,),
        "W_z": (d, 2 * d),
        "U_z": (d, d),
        "W_r": (d, 2 * d),
        "U_r": (d, d),
        "W_o": (d, 2 * d),
        "U_o": (d, d),
    }
    if variant == "full":
        shapes["W_att"] = (d, d)
    if variant in _W3_BLOCKS:
        shapes.update(q=(d,), c=(d,), W_1=(d, d), W_2=(d, d), W_3=(d, _W3_BLOCKS[variant] * d))
    return shapes


def init_params(m: int, d: int, seed: int = 0, variant: str = "full") -> dict[str, Tensor]:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) for every weight, zero padding embedding."""
    if m < 1 or d < 1:
        raise ConfigError(f"need m >= 1 and d >= 1, got m={m}, d={d}")
    VariantConfig(variant)
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d)
    params = {}
    for name, shape in param_shapes(m, d, variant).items():
        data = rng.uniform(-bound, bound, size=shape).astype(ad.default_dtype())
        if name == "embedding":
            data[m] = 0.0
        params[name] = ad.parameter(data, name=name)
    return params


def _t(w: Tensor) -> Tensor:
    return ad.transpose(w, None)


# ---------------------------------------------------------------------------
# building blocks


def ggnn_step(states: Tensor, a_out, a_in, p: dict[str, Tensor]) -> Tensor:
    """One gated update of every node from its in- and out-neighbours."""
    a_out, a_in = ad.as_tensor(a_out), ad.as_tensor(a_in)
    msg_out = ad.matmul(a_out, ad.matmul(states, p["H_out"])) + p["b_out"]
    msg_in = ad.matmul(a_in, ad.matmul(states, p["H_in"])) + p["b_in"]
    a = ad.concat([msg_out, msg_in], axis=-1)
    z = ad.sigmoid(ad.matmul(a, _t(p["W_z"])) + ad.matmul(states, _t(p["U_z"])))
    r = ad.sigmoid(ad.matmul(a, _t(p["W_r"])) + ad.matmul(states, _t(p["U_r"])))
    candidate = ad.tanh(ad.matmul(a, _t(p["W_o"])) + ad.matmul(r * states, _t(p["U_o"])))
    return ad.one_minus(z) * states + z * candidate


def ggnn_propagate(graph: SessionGraph | GraphBatch, params: dict[str, Tensor], steps: int) -> Tensor:
    """Node states after ``steps`` propagation rounds.

    A single graph yields an (n, d) tensor, a padded batch (B, N, d).
    """
    states = ad.take_rows(params["embedding"], graph.nodes)
    a_out, a_in = ad.Tensor(graph.a_out), ad.Tensor(graph.a_in)
    for step in range(steps):
        try:
            states = ggnn_step(states, a_out, a_in, params)
        except ad.NumericError as exc:
            raise ad.NumericError(f"GGNN step {step}: {exc}") from exc
    return states


def target_attention(states: Tensor, mask, targets: Tensor, w_att: Tensor) -> tuple[Tensor, Tensor]:
    """Per-target weighted sums of session states.

    ``states`` is (B, L, d), ``mask`` (B, L), ``targets`` (m, d). Returns the
    target embeddings (B, m, d) and the attention weights (B, m, L).
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ad.DegenerateInputError("target attention over a session with no unmasked position")
    scores = ad.matmul(ad.matmul(states, _t(w_att)), _t(targets))  # (B, L, m)
    beta = ad.softmax(ad.swapaxes(scores, 1, 2), mask=mask[:, None, :], axis=-1)
    return ad.matmul(beta, states), beta


def global_attention(states: Tensor, mask, last: Tensor, p: dict[str, Tensor]) -> Tensor:
    """Unnormalised soft attention of each position against the last click."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any(axis=-1).all():
        raise ad.DegenerateInputError("global attention over a session with no unmasked position")
    b, _, d = states.shape
    query = ad.reshape(ad.matmul(last, _t(p["W_1"])), (b, 1, d))
    gate = ad.sigmoid(query + ad.matmul(states, _t(p["W_2"])) + p["c"])
    alpha = ad.matmul(gate, ad.reshape(p["q"], (d, 1)))  # (B, L, 1)
    alpha = alpha * mask[..., None].astype(states.dtype)
    return ad.tsum(alpha * states, axis=1)


def average_pool(states: Tensor, mask) -> Tensor:
    mask = np.asarray(mask, dtype=bool)
    weights = (mask / mask.sum(axis=-1, keepdims=True)).astype(states.dtype)
    return ad.tsum(states * weights[..., None], axis=1)


def compose_session_embedding(variant: str, s_local: Tensor | None = None, s_global: Tensor | None = None,
                              s_avg: Tensor | None = None, s_target: Tensor | None = None,
                              w3: Tensor | None = None) -> Tensor:
    """Session embedding(s): (B, d), or (B, m, d) for the full variant."""
    if variant == "L":
        return s_local
    if variant == "Avg":
        return s_avg
    blocks = _W3_BLOCKS.get(variant)
    if blocks is None:
        raise ConfigError(f"unknown variant {variant!r}")
    d = (s_global if s_global is not None else s_local).shape[-1]
    if w3 is None or w3.shape != (d, blocks * d):
        got = None if w3 is None else w3.shape
        raise ConfigError(f"variant {variant} needs W_3 of shape {(d, blocks * d)}, got {got}")
    if variant == "Att":
        return ad.matmul(s_global, _t(w3))
    if variant == "L_plus_Att":
        return ad.matmul(ad.concat([s_local, s_global], axis=-1), _t(w3))
    # full: the target block varies per candidate, the other two are shared
    w_target = ad.getitem(w3, (slice(None), slice(0, d)))
    w_rest = ad.getitem(w3, (slice(None), slice(d, 3 * d)))
    shared = ad.matmul(ad.concat([s_local, s_global], axis=-1), _t(w_rest))
    b = shared.shape[0]
    return ad.matmul(s_target, _t(w_target)) + ad.reshape(shared, (b, 1, d))


def score(session: Tensor, targets: Tensor) -> Tensor:
    """Inner product of each session embedding with each candidate item."""
    if session.ndim == 3:
        return ad.tsum(session * targets, axis=-1)
    return ad.matmul(session, _t(targets))


def score_and_normalize(session: Tensor, targets: Tensor) -> Tensor:
    return ad.softmax(score(session, targets), axis=-1)


# ---------------------------------------------------------------------------
# losses


def loss(logits: Tensor, labels, mode: str = "categorical") -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer labels.

    ``categorical`` is ``-log p[label]``; ``eq13`` sums the binary
    cross-entropy over every item against the one-hot target. Log arguments
    are floored at 1e-12 in both modes.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, m = logits.shape
    if labels.shape[0] != b:
        raise ValueError(f"{labels.shape[0]} labels for a batch of {b}")
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"label out of range [0, {m})")
    rows = np.arange(b)
    if mode == "categorical":
        picked = ad.getitem(ad.log_softmax(logits, axis=-1), (rows, labels))
        return -ad.mean(ad.maximum_const(picked, math.log(LOG_FLOOR)))
    if mode == "eq13":
        return one_vs_rest_loss(ad.softmax(logits, axis=-1), labels)
    raise ConfigError(f"unknown loss mode {mode!r}")


def one_vs_rest_loss(probs: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, m = probs.shape
    onehot = np.zeros((b, m), dtype=probs.dtype)
    onehot[np.arange(b), labels] = 1.0
    pos = ad.log(probs, eps=LOG_FLOOR) * onehot
    neg = ad.log(ad.one_minus(probs), eps=LOG_FLOOR) * (1.0 - onehot)
    return -ad.tsum(pos + neg) * (1.0 / b)


def loss_from_probs(probs, labels, mode: str = "categorical") -> Tensor:
    """Loss on an explicit probability table (B, m)."""
    probs = ad.as_tensor(probs)
    if probs.ndim == 1:
        probs = ad.reshape(probs, (1, -1))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    m = probs.shape[-1]
    if labels.min() < 0 or labels.max() >= m:
        raise ValueError(f"label out of range [0, {m})")
    if mode == "categorical":
        picked = ad.getitem(ad.log(probs, eps=LOG_FLOOR), (np.arange(len(labels)), labels))
        return -ad.mean(picked)
    if mode == "eq13":
        return one_vs_rest_loss(probs, labels)
    raise ConfigError(f"unknown loss mode {mode!r}")


# ---------------------------------------------------------------------------
# model


class TAGNN:
    """Parameters plus the batched forward pass for one variant."""

    def __init__(self, n_items: int, d: int = 100, variant: str = "full", steps: int = 1,
                 seed: int = 0, params: dict[str, Tensor] | None = None):
        self.config = VariantConfig(variant, steps)
        self.n_items = n_items
        self.d = d
        self.params = params if params is not None else init_params(n_items, d, seed, variant)
        expected = param_shapes(n_items, d, variant)
        got = {k: tuple(v.shape) for k, v in self.params.items()}
        if got != expected:
            raise ConfigError(f"parameter shapes {got} do not match variant {variant} ({expected})")

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def pad_index(self) -> int:
        return self.n_items

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def batch(self, prefixes: Sequence[Sequence[int]], max_n: int | None = None) -> GraphBatch:
        return pad_graphs([build_graph(p) for p in prefixes], max_n=max_n, pad_index=self.pad_index)

    def logits(self, batch: GraphBatch) -> Tensor:
        """Unnormalised scores over the real items, shape (B, m)."""
        p = self.params
        nodes = ggnn_propagate(batch, p, self.config.steps)
        b = len(batch)
        rows = np.arange(b)
        seq = ad.getitem(nodes, (rows[:, None], batch.alias))
        last = ad.getitem(nodes, (rows, batch.last_slot))
        mask = batch.position_mask
        targets = ad.getitem(p["embedding"], slice(0, self.n_items))

        variant = self.variant
        parts = {"s_local": last}
        if variant == "Avg":
            parts["s_avg"] = average_pool(seq, mask)
        if variant in _W3_BLOCKS:
            parts["s_global"] = global_attention(seq, mask, last, p)
            parts["w3"] = p["W_3"]
        if variant == "full":
            parts["s_target"], _ = target_attention(seq, mask, targets, p["W_att"])
        session = compose_session_embedding(variant, **parts)
        return score(session, targets)

    def probabilities(self, batch: GraphBatch) -> Tensor:
        return ad.softmax(self.logits(batch), axis=-1)

    def loss(self, batch: GraphBatch, labels, mode: str = "categorical") -> Tensor:
        return loss(self.logits(batch), labels, mode)

    def predict_logits(self, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
        return self.logits(self.batch(prefixes)).data

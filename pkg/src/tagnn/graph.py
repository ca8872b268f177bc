"""Session graphs: unique items as nodes, consecutive clicks as weighted edges."""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class SessionGraph:
    nodes: np.ndarray  # (n,) item indices in first-occurrence order
    alias: np.ndarray  # (L,) position -> node slot
    a_out: np.ndarray  # (n, n) outgoing weights, rows sum to 1 or 0
    a_in: np.ndarray  # (n, n) incoming weights
    last_slot: int

    @property
    def n(self) -> int:
        return len(self.nodes)

    def edges(self) -> list[tuple[int, int, float]]:
        """(u, v, weight) triples of the outgoing adjacency, in item space."""
        rows, cols = np.nonzero(self.a_out)
        return [(int(self.nodes[r]), int(self.nodes[c]), float(self.a_out[r, c])) for r, c in zip(rows, cols)]

    def dump(self, names: Callable[[int], str] = str) -> str:
        return "\n".join(f"{names(u)} -> {names(v)} : {w:.6g}" for u, v, w in self.edges())


def _normalize_rows(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=1, keepdims=True)
    return np.divide(counts, totals, out=np.zeros_like(counts), where=totals > 0)


def srgnn_graph(prefix: Sequence[int]) -> SessionGraph:
    """Count consecutive pairs and normalise by out-degree and in-degree."""
    if len(prefix) == 0:
        raise ValueError("cannot build a session graph from an empty prefix")
    slot: dict[int, int] = {}
    for item in prefix:
        slot.setdefault(int(item), len(slot))
    n = len(slot)
    alias = np.array([slot[int(item)] for item in prefix], dtype=np.int64)

    counts = np.zeros((n, n), dtype=np.float64)
    for (u, v), c in Counter(zip(alias[:-1], alias[1:])).items():
        counts[u, v] = c
    a_out = _normalize_rows(counts)
    a_in = _normalize_rows(counts.T.copy())
    return SessionGraph(
        nodes=np.fromiter(slot.keys(), dtype=np.int64, count=n),
        alias=alias,
        a_out=a_out,
        a_in=a_in,
        last_slot=int(alias[-1]),
    )


# Alternative construction schemes plug in here.
STRATEGIES: dict[str, Callable[[Sequence[int]], SessionGraph]] = {"srgnn": srgnn_graph}


def build_graph(prefix: Sequence[int], strategy: str = "srgnn") -> SessionGraph:
    return STRATEGIES[strategy](prefix)


@dataclass
class GraphBatch:
    """A batch of session graphs padded to shared node and position counts."""

    nodes: np.ndarray  # (B, N) int, pad_index where absent
    a_out: np.ndarray  # (B, N, N)
    a_in: np.ndarray  # (B, N, N)
    node_mask: np.ndarray  # (B, N) bool
    alias: np.ndarray  # (B, L) int, 0 where absent
    position_mask: np.ndarray  # (B, L) bool
    last_slot: np.ndarray  # (B,) int

    def __len__(self):
        return len(self.nodes)


def pad_graphs(graphs: Sequence[SessionGraph], max_n: int | None = None, pad_index: int = 0,
               max_len: int | None = None) -> GraphBatch:
    if not graphs:
        raise ValueError("pad_graphs needs at least one graph")
    need_n = max(g.n for g in graphs)
    need_len = max(len(g.alias) for g in graphs)
    max_n = need_n if max_n is None else max_n
    max_len = need_len if max_len is None else max_len
    if max_n < need_n:
        raise ValueError(f"max_n={max_n} is smaller than the largest graph ({need_n} nodes)")
    if max_len < need_len:
        raise ValueError(f"max_len={max_len} is shorter than the longest prefix ({need_len})")

    b = len(graphs)
    nodes = np.full((b, max_n), pad_index, dtype=np.int64)
    a_out = np.zeros((b, max_n, max_n))
    a_in = np.zeros((b, max_n, max_n))
    node_mask = np.zeros((b, max_n), dtype=bool)
    alias = np.zeros((b, max_len), dtype=np.int64)
    position_mask = np.zeros((b, max_len), dtype=bool)
    last = np.zeros(b, dtype=np.int64)
    for i, g in enumerate(graphs):
        n, length = g.n, len(g.alias)
        nodes[i, :n] = g.nodes
        a_out[i, :n, :n] = g.a_out
        a_in[i, :n, :n] = g.a_in
        node_mask[i, :n] = True
        alias[i, :length] = g.alias
        position_mask[i, :length] = True
        last[i] = g.last_slot
    return GraphBatch(nodes, a_out, a_in, node_mask, alias, position_mask, last)

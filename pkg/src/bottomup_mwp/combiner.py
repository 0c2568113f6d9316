"""Pair enumeration over layered candidate sets, pair scoring, beam and loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor


@dataclass
class CandidateNode:
    id: int
    layer: int
    embedding: np.ndarray
    children: Optional[tuple[int, int]] = None
    op_dist: Optional[np.ndarray] = None
    p_comb: Optional[float] = None
    p_ter: Optional[float] = None
    p_joint: float = 0.0

    @property
    def is_leaf(self) -> bool:
        return self.children is None


class LayerSet:
    """Candidate layers ``L_0 .. L_t`` plus an id index over their union."""

    def __init__(self, layers: Optional[list[list[CandidateNode]]] = None):
        self.layers: list[list[CandidateNode]] = []
        self.by_id: dict[int, CandidateNode] = {}
        self.pairs: set[tuple[int, int]] = set()
        for layer in layers or []:
            self.add_layer(layer)

    def add_layer(self, nodes: list[CandidateNode]) -> None:
        for node in nodes:
            if node.id in self.by_id:
                raise ValueError(f"duplicate node id {node.id}")
            if node.children is not None:
                if node.children in self.pairs:
                    raise ValueError(f"pair {node.children} already materialized")
                self.pairs.add(node.children)
            self.by_id[node.id] = node
        self.layers.append(list(nodes))

    @property
    def history(self) -> list[CandidateNode]:
        return [n for layer in self.layers for n in layer]

    @property
    def next_id(self) -> int:
        return max(self.by_id, default=-1) + 1

    def inner_nodes(self) -> list[CandidateNode]:
        return [n for layer in self.layers[1:] for n in layer]

    def __getitem__(self, node_id: int) -> CandidateNode:
        return self.by_id[node_id]


def enumerate_pair_ids(candidates: Sequence[int], right_set: Sequence[int],
                       existing: set = frozenset()) -> list[tuple[int, int]]:
    """``(l, r)`` with ``r`` in ``right_set``, ``l`` in ``candidates``, ``l < r``; sorted."""
    right = sorted(set(right_set))
    out = []
    for r in right:
        for left in candidates:
            if left < r and (left, r) not in existing:
                out.append((left, r))
    out.sort()
    return out


def enumerate_pairs(layers: LayerSet, k_from: int) -> list[tuple[CandidateNode, CandidateNode]]:
    """Pairs feeding layer ``k_from + 1``: right operand from ``L_k``, left from ``L_0..L_k``."""
    candidates = sorted(n.id for layer in layers.layers[: k_from + 1] for n in layer)
    right = [n.id for n in layers.layers[k_from]]
    return [(layers[l], layers[r]) for l, r in enumerate_pair_ids(candidates, right, layers.pairs)]


class CombinerParams:
    """Key/query projections; column block ``i`` of each matrix is head ``i``."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, scale: bool = True):
        if d % n_heads:
            raise ValueError("n_heads must divide d")
        self.n_heads = n_heads
        self.d = d
        dh = d // n_heads
        self.w_key = tc.parameter(np.concatenate([tc.glorot(rng, d, dh) for _ in range(n_heads)], axis=1),
                                  "comb.w_key")
        self.w_query = tc.parameter(np.concatenate([tc.glorot(rng, d, dh) for _ in range(n_heads)], axis=1),
                                    "comb.w_query")
        self.scale = 1.0 / np.sqrt(d) if scale else 1.0

    def tensors(self) -> list[Tensor]:
        return [self.w_key, self.w_query]


def pair_logits(h_left: Tensor, h_right: Tensor, h_query: Tensor, params: CombinerParams) -> Tensor:
    """Row-wise ``s · (W_k h_l)·(W_q (h_r + h_query))`` for ``P x d`` inputs."""
    keys = h_left @ params.w_key
    queries = (h_right + h_query) @ params.w_query
    return tc.sum_(keys * queries, axis=-1) * params.scale


def score_pairs(h_left: Tensor, h_right: Tensor, h_query: Tensor, params: CombinerParams) -> Tensor:
    return tc.sigmoid(pair_logits(h_left, h_right, h_query, params))


def score_pair(left: CandidateNode, right: CandidateNode, h_query, params: CombinerParams) -> float:
    with tc.no_grad():
        hq = np.asarray(getattr(h_query, "data", h_query))[None, :]
        p = score_pairs(Tensor(left.embedding[None, :]), Tensor(right.embedding[None, :]), Tensor(hq), params)
    return float(p.data[0])


def select_beam(scored_pairs: Sequence[tuple], k: int) -> list[tuple]:
    """Top-``k`` of ``(left, right, score)`` by score, ties to smaller ``(left.id, right.id)``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ranked = sorted(scored_pairs, key=lambda item: (-item[2], item[0].id, item[1].id))
    return ranked[:k]


def combination_loss(scores: Tensor, labels, theta: float,
                     segments=None, n_segments: int = 1) -> Tensor:
    """Positive NLL plus the unlabeled NLL floored at ``theta``, per segment, summed.

    ``labels`` is truthy for pairs in the gold tree.  ``segments`` assigns
    pairs to problems so the floor applies per problem.
    """
    labels = np.asarray(labels, dtype=bool)
    if segments is None:
        segments = np.zeros(len(labels), dtype=np.intp)
    pos_w = Tensor(labels.astype(float))
    unl_w = Tensor((~labels).astype(float))
    pos_nll = tc.log(scores) * pos_w * -1.0
    unl_nll = tc.log(1.0 - scores) * unl_w * -1.0
    pos_sum = tc.segment_sum(pos_nll, segments, n_segments)
    unl_sum = tc.segment_sum(unl_nll, segments, n_segments)
    return tc.sum_(pos_sum + tc.floor_at(unl_sum, theta))

"""Operator classifier, inner-node encoder and termination classifier.

All heads work on stacked rows: ``P`` node pairs (or nodes) at once, each
attending over the token states of its own problem (``rec_idx`` selects the
problem from a ``B x T x d`` batch).
"""

from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .exprtree import OPERATORS
from .tensorcore import Tensor

N_OPS = len(OPERATORS)


class PredictorParams:
    def __init__(self, d: int, d_op: int, hidden: int, rng: np.random.Generator):
        self.d, self.d_op, self.hidden = d, d_op, hidden
        p = tc.parameter
        self.op_wq = p(tc.glorot(rng, 2 * d, d), "pred.op_wq")
        self.op_w1 = p(tc.glorot(rng, 3 * d, hidden), "pred.op_w1")
        self.op_b1 = p(np.zeros(hidden), "pred.op_b1")
        self.op_w2 = p(tc.glorot(rng, hidden, N_OPS), "pred.op_w2")
        self.op_b2 = p(np.zeros(N_OPS), "pred.op_b2")
        self.op_emb = p(rng.normal(0.0, 0.02, (N_OPS, d_op)), "pred.op_emb")
        self.in_w1 = p(tc.glorot(rng, 2 * d + d_op, hidden), "pred.in_w1")
        self.in_b1 = p(np.zeros(hidden), "pred.in_b1")
        self.in_w2 = p(tc.glorot(rng, hidden, d), "pred.in_w2")
        self.in_b2 = p(np.zeros(d), "pred.in_b2")
        self.ter_wq = p(tc.glorot(rng, d, d), "pred.ter_wq")
        self.ter_w1 = p(tc.glorot(rng, 2 * d, hidden), "pred.ter_w1")
        self.ter_b1 = p(np.zeros(hidden), "pred.ter_b1")
        self.ter_w2 = p(tc.glorot(rng, hidden, 2), "pred.ter_w2")
        self.ter_b2 = p(np.zeros(2), "pred.ter_b2")

    def tensors(self) -> list[Tensor]:
        return [v for v in vars(self).values() if isinstance(v, Tensor)]


def attend(query: Tensor, states: Tensor, mask: np.ndarray, rec_idx) -> Tensor:
    """Single-head attention of ``P x d`` queries over their problems' token states."""
    rec_idx = np.asarray(rec_idx, dtype=np.intp)
    P, d = query.shape
    keys = tc.take_rows(states, rec_idx)  # P x T x d
    q = tc.reshape(query, (P, 1, d))
    ctx = tc.scaled_dot_attention(q, keys, keys, mask[rec_idx][:, None, :])
    return tc.reshape(ctx, (P, d))


def _ff(x: Tensor, w1, b1, w2, b2) -> Tensor:
    return tc.relu(x @ w1 + b1) @ w2 + b2


def operator_probs(h_left: Tensor, h_right: Tensor, states: Tensor, mask: np.ndarray, rec_idx,
                   params: PredictorParams) -> Tensor:
    """``P x 6`` independent sigmoid probabilities, one column per operator."""
    pair = tc.concat([h_left, h_right], axis=-1)
    ctx = attend(pair @ params.op_wq, states, mask, rec_idx)
    logits = _ff(tc.concat([ctx, h_left, h_right], axis=-1), params.op_w1, params.op_b1,
                 params.op_w2, params.op_b2)
    return tc.sigmoid(logits)


def classify_operator(left, right, token_states, params: PredictorParams) -> np.ndarray:
    """Operator probabilities for one pair given a ``T x d`` problem encoding."""
    states = token_states if isinstance(token_states, Tensor) else Tensor(token_states)
    with tc.no_grad():
        T, d = states.shape
        probs = operator_probs(Tensor(left.embedding[None]), Tensor(right.embedding[None]),
                               tc.reshape(states, (1, T, d)), np.ones((1, T), bool), [0], params)
    return probs.data[0]


def operator_embedding(op_dist: Tensor, params: PredictorParams) -> Tensor:
    """``Σ_o P(o) e_o`` row-wise."""
    return op_dist @ params.op_emb


def inner_embeddings(h_left: Tensor, h_right: Tensor, op_dist: Tensor, params: PredictorParams) -> Tensor:
    h_op = operator_embedding(op_dist, params)
    return _ff(tc.concat([h_left, h_right, h_op], axis=-1), params.in_w1, params.in_b1,
               params.in_w2, params.in_b2)


def encode_inner(left, right, op_dist, params: PredictorParams) -> np.ndarray:
    with tc.no_grad():
        h = inner_embeddings(Tensor(left.embedding[None]), Tensor(right.embedding[None]),
                             Tensor(np.asarray(op_dist)[None]), params)
    return h.data[0]


def termination_dist(h_node: Tensor, states: Tensor, mask: np.ndarray, rec_idx,
                     params: PredictorParams) -> Tensor:
    """``P x 2`` softmax; column 1 is the probability of terminating."""
    ctx = attend(h_node @ params.ter_wq, states, mask, rec_idx)
    logits = _ff(tc.concat([ctx, h_node], axis=-1), params.ter_w1, params.ter_b1,
                 params.ter_w2, params.ter_b2)
    return tc.softmax(logits, axis=-1)


def termination_probs(h_node: Tensor, states: Tensor, mask: np.ndarray, rec_idx,
                      params: PredictorParams) -> Tensor:
    return termination_dist(h_node, states, mask, rec_idx, params)[:, 1]


def classify_termination(node, token_states, params: PredictorParams) -> float:
    if node.children is None:
        raise ValueError("termination is only defined for inner nodes")
    states = token_states if isinstance(token_states, Tensor) else Tensor(token_states)
    with tc.no_grad():
        T, d = states.shape
        p = termination_probs(Tensor(node.embedding[None]), tc.reshape(states, (1, T, d)),
                              np.ones((1, T), bool), [0], params)
    return float(p.data[0])


def bce(probs: Tensor, targets) -> Tensor:
    """Summed binary cross-entropy with logs clamped at 1e-12."""
    y = Tensor(np.asarray(targets, dtype=float))
    return tc.sum_((y * tc.log(probs) + (1.0 - y) * tc.log(1.0 - probs)) * -1.0)


def operator_loss(probs: Tensor, targets) -> Tensor:
    return bce(probs, targets)


def termination_loss(probs: Tensor, labels) -> Tensor:
    return bce(probs, labels)

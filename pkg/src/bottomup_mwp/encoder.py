"""Problem encoder: a small pre-LN transformer trained from scratch.

It stands in for a pre-trained language model with the same interface:
token states from the last block, number states picked at the ``NUM<i>``
placeholders, a mean-pooled query vector, and a lookup table for constants.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensorcore as tc
from .combiner import CandidateNode, LayerSet
from .config import ModelConfig
from .dataio import ProblemRecord
from .tensorcore import Tensor

PAD, UNK = "<pad>", "<unk>"
N_PLACEHOLDERS = 16
_NUM_RE = re.compile(r"NUM\d+")


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, records: Iterable[ProblemRecord], min_freq: int = 1) -> "Vocab":
        counts = Counter(t for r in records for t in r.tokens)
        base = [PAD, UNK] + [f"NUM{i}" for i in range(N_PLACEHOLDERS)]
        extra = sorted(t for t, c in counts.items() if c >= min_freq and t not in base)
        return cls(base + extra)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        unk = self.index[UNK]
        return [self.index.get(t, unk) for t in tokens]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())


class EncoderParams:
    def __init__(self, cfg: ModelConfig, vocab_size: int, n_constants: int, rng: np.random.Generator):
        d, f = cfg.d_model, cfg.d_ff
        self.cfg = cfg
        self.tok_emb = tc.parameter(rng.normal(0.0, 0.02, (vocab_size, d)), "enc.tok_emb")
        self.pos_emb = tc.parameter(rng.normal(0.0, 0.02, (cfg.max_len, d)), "enc.pos_emb")
        self.const_emb = tc.parameter(rng.normal(0.0, 0.02, (max(n_constants, 1), d)), "enc.const_emb")
        self.blocks = []
        for i in range(cfg.n_layers):
            p = f"enc.block{i}."
            self.blocks.append({
                "ln1_g": tc.parameter(np.ones(d), p + "ln1_g"),
                "ln1_b": tc.parameter(np.zeros(d), p + "ln1_b"),
                "wq": tc.parameter(tc.glorot(rng, d, d), p + "wq"),
                "wk": tc.parameter(tc.glorot(rng, d, d), p + "wk"),
                "wv": tc.parameter(tc.glorot(rng, d, d), p + "wv"),
                "wo": tc.parameter(tc.glorot(rng, d, d), p + "wo"),
                "ln2_g": tc.parameter(np.ones(d), p + "ln2_g"),
                "ln2_b": tc.parameter(np.zeros(d), p + "ln2_b"),
                "w1": tc.parameter(tc.glorot(rng, d, f), p + "w1"),
                "b1": tc.parameter(np.zeros(f), p + "b1"),
                "w2": tc.parameter(tc.glorot(rng, f, d), p + "w2"),
                "b2": tc.parameter(np.zeros(d), p + "b2"),
            })
        self.lnf_g = tc.parameter(np.ones(d), "enc.lnf_g")
        self.lnf_b = tc.parameter(np.zeros(d), "enc.lnf_b")

    def tensors(self) -> list[Tensor]:
        out = [self.tok_emb, self.pos_emb, self.const_emb]
        for block in self.blocks:
            out.extend(block.values())
        return out + [self.lnf_g, self.lnf_b]


@dataclass
class EncoderOutput:
    token_states: Tensor  # T x d
    number_positions: list[int]
    h_query: Tensor  # d
    d: int


def fit_length(tokens: Sequence[str], query_span: tuple[int, int], max_len: int):
    """Drop tokens from the front, sparing placeholders and the query span."""
    if len(tokens) <= max_len:
        return list(tokens), query_span
    excess = len(tokens) - max_len
    start, end = query_span
    keep = []
    for i, tok in enumerate(tokens):
        if excess and i < start and not _NUM_RE.fullmatch(tok):
            excess -= 1
            continue
        keep.append(i)
    if excess:
        raise ValueError(f"cannot fit {len(tokens)} tokens into {max_len} without losing numbers or the query")
    dropped_before = start - sum(1 for i in keep if i < start)
    return [tokens[i] for i in keep], (start - dropped_before, end - dropped_before)


@dataclass
class EncodedBatch:
    states: Tensor  # B x T x d
    mask: np.ndarray  # B x T, True at real tokens
    h_query: Tensor  # B x d
    number_positions: list[list[int]]


def _attention_block(x: Tensor, block: dict, mask: np.ndarray, n_heads: int) -> Tensor:
    B, T, d = x.shape
    dh = d // n_heads
    h = tc.layer_norm(x, block["ln1_g"], block["ln1_b"])

    def heads(w):
        return tc.transpose(tc.reshape(h @ w, (B, T, n_heads, dh)), (0, 2, 1, 3))

    att = tc.scaled_dot_attention(heads(block["wq"]), heads(block["wk"]), heads(block["wv"]),
                                  mask[:, None, None, :])
    merged = tc.reshape(tc.transpose(att, (0, 2, 1, 3)), (B, T, d))
    x = x + merged @ block["wo"]
    h = tc.layer_norm(x, block["ln2_g"], block["ln2_b"])
    return x + tc.relu(h @ block["w1"] + block["b1"]) @ block["w2"] + block["b2"]


def encode_batch(records: Sequence[ProblemRecord], params: EncoderParams, vocab: Vocab) -> EncodedBatch:
    cfg = params.cfg
    fitted = [fit_length(r.tokens, r.query_span, cfg.max_len) for r in records]
    T = max(len(toks) for toks, _ in fitted)
    B = len(records)
    ids = np.zeros((B, T), dtype=np.intp)
    mask = np.zeros((B, T), dtype=bool)
    pool = np.zeros((B, 1, T))
    positions = []
    for b, (toks, (qs, qe)) in enumerate(fitted):
        ids[b, : len(toks)] = vocab.encode(toks)
        mask[b, : len(toks)] = True
        pool[b, 0, qs:qe] = 1.0 / (qe - qs)
        pos = {int(t[3:]): i for i, t in enumerate(toks) if _NUM_RE.fullmatch(t)}
        positions.append([pos[i] for i in range(len(records[b].numbers))])
    x = tc.take_rows(params.tok_emb, ids.reshape(-1)).reshape(B, T, cfg.d_model)
    x = x + params.pos_emb[:T]
    for block in params.blocks:
        x = _attention_block(x, block, mask, cfg.n_heads)
    states = tc.layer_norm(x, params.lnf_g, params.lnf_b)
    h_query = tc.reshape(tc.matmul(Tensor(pool), states), (B, cfg.d_model))
    return EncodedBatch(states, mask, h_query, positions)


def encode_problem(record: ProblemRecord, params: EncoderParams, vocab: Vocab) -> EncoderOutput:
    enc = encode_batch([record], params, vocab)
    T = enc.states.shape[1]
    states = tc.reshape(enc.states, (T, params.cfg.d_model))
    return EncoderOutput(states, enc.number_positions[0], tc.reshape(enc.h_query, (params.cfg.d_model,)),
                         params.cfg.d_model)


def constant_rows(record: ProblemRecord, pool: Sequence[float]) -> list[int]:
    rows = []
    for c in record.constants:
        match = [j for j, v in enumerate(pool) if abs(float(v) - float(c)) <= 1e-9 * max(1.0, abs(float(c)))]
        if not match:
            raise ValueError(f"record {record.id}: constant {c} is not in the model's pool {list(pool)}")
        rows.append(match[0])
    return rows


def leaf_embeddings(output: EncoderOutput, record: ProblemRecord, params: EncoderParams,
                    pool: Sequence[float]) -> Tensor:
    """``(|N|+|C|) x d`` rows: number states, then constant table rows."""
    parts = []
    if output.number_positions:
        parts.append(tc.take_rows(output.token_states, output.number_positions))
    if record.constants:
        parts.append(tc.take_rows(params.const_emb, constant_rows(record, pool)))
    if not parts:
        return Tensor(np.zeros((0, output.d)))
    return parts[0] if len(parts) == 1 else tc.concat(parts, axis=0)


def init_leaves(output: EncoderOutput, record: ProblemRecord, params: EncoderParams,
                pool: Sequence[float]):
    """Layer 0 of the candidate sets: one node per number, then per constant."""
    emb = leaf_embeddings(output, record, params, pool)
    nodes = [CandidateNode(id=i, layer=0, embedding=emb.data[i]) for i in range(emb.shape[0])]
    return LayerSet([nodes])


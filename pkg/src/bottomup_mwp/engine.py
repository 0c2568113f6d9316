"""Training with teacher forcing and layered beam-search decoding."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensorcore as tc
from .combiner import (
    CandidateNode,
    CombinerParams,
    LayerSet,
    combination_loss,
    enumerate_pair_ids,
    enumerate_pairs,
    score_pairs,
    select_beam,
)
from .config import Hyperparams, ModelConfig, RunConfig
from .dataio import ProblemRecord, answers_match
from .encoder import EncoderParams, Vocab, constant_rows, encode_batch
from .exprtree import (
    OPERATORS,
    ExprNode,
    ExprTree,
    GoldDecomposition,
    decompose_gold,
    evaluate,
    to_template,
)
from .predictor import (
    PredictorParams,
    inner_embeddings,
    operator_loss,
    operator_probs,
    termination_loss,
    termination_probs,
)
from .tensorcore import Tensor

log = logging.getLogger(__name__)


class Model:
    """Every trainable array plus what is needed to rebuild and run it."""

    def __init__(self, cfg: ModelConfig, vocab: Vocab, constant_pool: Sequence[float], seed: int = 0,
                 l_max: int = 3, beam_k: int = 4):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vocab = vocab
        self.constant_pool = [float(c) for c in constant_pool]
        self.encoder = EncoderParams(cfg, len(vocab), len(self.constant_pool), rng)
        self.combiner = CombinerParams(cfg.d_model, cfg.comb_heads, rng, cfg.scale_scores)
        self.predictor = PredictorParams(cfg.d_model, cfg.d_op, cfg.head_hidden, rng)
        self.l_max = l_max
        self.beam_k = beam_k
        # templates of the training split, kept for unseen-template counting
        self.train_templates: list[str] = []

    def tensors(self) -> list[Tensor]:
        return self.encoder.tensors() + self.combiner.tensors() + self.predictor.tensors()

    def state_dict(self) -> dict[str, np.ndarray]:
        return {t.name: t.data for t in self.tensors()}

    def load_state_dict(self, arrays: dict[str, np.ndarray]) -> None:
        for t in self.tensors():
            if arrays[t.name].shape != t.data.shape:
                raise ValueError(f"{t.name}: checkpoint shape {arrays[t.name].shape} != {t.data.shape}")
            t.data[...] = arrays[t.name]

    def save(self, path) -> Path:
        path = Path(path)
        vocab_path = path.with_suffix(".vocab.txt")
        self.vocab.save(vocab_path)
        meta = {
            "format": "FC2C1",
            "model": dataclasses.asdict(self.cfg),
            "constant_pool": self.constant_pool,
            "l_max": self.l_max,
            "beam_k": self.beam_k,
            "vocab": vocab_path.name,
            "train_templates": self.train_templates,
        }
        tc.save_arrays(path, self.state_dict(), meta)
        return path

    @classmethod
    def load(cls, path) -> "Model":
        path = Path(path)
        arrays, meta = tc.load_arrays(path)
        if meta is None:
            raise ValueError(f"{path}: missing sidecar config")
        vocab = Vocab.load(path.parent / meta["vocab"])
        model = cls(ModelConfig(**meta["model"]), vocab, meta["constant_pool"],
                    l_max=meta["l_max"], beam_k=meta["beam_k"])
        model.train_templates = list(meta.get("train_templates", []))
        model.load_state_dict(arrays)
        return model


# --- training -----------------------------------------------------------------

@dataclass
class Losses:
    comb: Tensor
    op: Tensor
    ter: Tensor
    total: Tensor

    def values(self) -> tuple[float, float, float, float]:
        return self.comb.item(), self.op.item(), self.ter.item(), self.total.item()


def is_trainable(record: ProblemRecord) -> bool:
    return record.gold_tree is not None and decompose_gold(record.gold_tree).trainable


def _gold_layer_ids(dec: GoldDecomposition) -> list[list[int]]:
    return [list(range(dec.leaf_arity))] + dec.inner_ids()


def compute_losses(records: Sequence[ProblemRecord], model: Model, hyper: Hyperparams,
                   trace: Optional[dict] = None) -> Losses:
    """Teacher-forced losses averaged over ``records``.

    Only gold combinations reach the prediction heads and the next layer;
    every enumerated pair over the gold candidate sets is scored for the
    combination loss.  ``trace`` (if given) receives, per layer, the scored
    ``(record, left id, right id)`` pairs under ``"scored"`` and the
    ``(record, left id, right id, node id)`` rows fed to the prediction
    heads under ``"heads"``.
    """
    decomps = [decompose_gold(r.gold_tree) for r in records]
    for r, dec in zip(records, decomps):
        if not dec.trainable:
            raise ValueError(f"record {r.id} cannot be trained on")
    enc = encode_batch(records, model.encoder, model.vocab)
    B, T, d = enc.states.shape
    table = tc.concat([tc.reshape(enc.states, (B * T, d)), model.encoder.const_emb], axis=0)
    row_of: dict[tuple[int, int], int] = {}
    leaf_idx = []
    for b, r in enumerate(records):
        src = [b * T + p for p in enc.number_positions[b]] + [B * T + j for j in
                                                                 constant_rows(r, model.constant_pool)]
        for nid, row in enumerate(src):
            row_of[(b, nid)] = len(leaf_idx)
            leaf_idx.append(row)
    nodes = tc.take_rows(table, leaf_idx)
    n_rows = len(leaf_idx)

    layer_ids = [_gold_layer_ids(dec) for dec in decomps]
    scores, labels, segs = [], [], []
    op_p, op_y = [], []
    ter_p, ter_y = [], []
    depth = max(len(dec.layers) for dec in decomps)
    for t in range(1, depth + 1):
        L, R, seg, lab = [], [], [], []
        gL, gR, gseg, gy, groot, gids, gpos = [], [], [], [], [], [], []
        scored_ids, head_ids = [], []
        for b, dec in enumerate(decomps):
            if len(dec.layers) < t:
                continue
            ids = layer_ids[b]
            cands = sorted(i for layer in ids[:t] for i in layer)
            gold = {(l, r): op for l, r, op in dec.layers[t - 1]}
            for l, r in enumerate_pair_ids(cands, ids[t - 1]):
                scored_ids.append((b, l, r))
                if (l, r) in gold:
                    gpos.append(len(L))
                L.append(row_of[(b, l)])
                R.append(row_of[(b, r)])
                seg.append(b)
                lab.append((l, r) in gold)
            for (l, r, op), nid in zip(dec.layers[t - 1], ids[t]):
                gL.append(row_of[(b, l)])
                gR.append(row_of[(b, r)])
                gseg.append(b)
                gy.append([1.0 if o is op else 0.0 for o in OPERATORS])
                groot.append(1.0 if nid == dec.root_id else 0.0)
                gids.append((b, nid))
                head_ids.append((b, l, r, nid))
        if trace is not None:
            trace.setdefault("scored", []).append(scored_ids)
            trace.setdefault("heads", []).append(head_ids)
        hl, hr = tc.take_rows(nodes, L), tc.take_rows(nodes, R)
        scores.append(score_pairs(hl, hr, tc.take_rows(enc.h_query, seg), model.combiner))
        labels.extend(lab)
        segs.extend(seg)

        ghl, ghr = tc.take_rows(nodes, gL), tc.take_rows(nodes, gR)
        if model.cfg.op_loss_all_pairs:
            all_p = operator_probs(hl, hr, enc.states, enc.mask, seg, model.predictor)
            targets = np.zeros((len(L), len(OPERATORS)))
            targets[gpos] = gy
            op_p.append(all_p)
            op_y.append(targets)
            probs = tc.take_rows(all_p, gpos)
        else:
            probs = operator_probs(ghl, ghr, enc.states, enc.mask, gseg, model.predictor)
            op_p.append(probs)
            op_y.append(np.array(gy))
        emb = inner_embeddings(ghl, ghr, probs, model.predictor)
        ter_p.append(termination_probs(emb, enc.states, enc.mask, gseg, model.predictor))
        ter_y.extend(groot)
        nodes = tc.concat([nodes, emb], axis=0)
        for k, key in enumerate(gids):
            row_of[key] = n_rows + k
        n_rows += len(gids)

    inv_b = 1.0 / B
    l_comb = combination_loss(tc.concat(scores, axis=0), labels, hyper.theta, segs, B) * inv_b
    l_op = operator_loss(tc.concat(op_p, axis=0), np.concatenate(op_y, axis=0)) * inv_b
    l_ter = termination_loss(tc.concat(ter_p, axis=0), ter_y) * inv_b
    total = l_comb * hyper.gamma + l_op * hyper.alpha + l_ter * hyper.beta
    return Losses(l_comb, l_op, l_ter, total)


def train_step(batch: Sequence[ProblemRecord], model: Model, hyper: Hyperparams,
               optimizer: tc.AdamState) -> tuple[float, float, float, float]:
    """One Adam step on the batch; untrainable records are skipped."""
    usable = [r for r in batch if is_trainable(r)]
    if len(usable) < len(batch):
        log.warning("skipping %d untrainable record(s)", len(batch) - len(usable))
    if not usable:
        return (0.0, 0.0, 0.0, 0.0)
    tc.zero_grad(optimizer.params)
    losses = compute_losses(usable, model, hyper)
    tc.backward(losses.total)
    tc.adam_step(optimizer)
    return losses.values()


def derive_limits(train_set: Sequence[ProblemRecord], beam_floor: int = 4) -> tuple[int, int]:
    """``(l_max, beam_k)``: deepest gold tree and widest gold layer, beam floored."""
    if not train_set:
        raise ValueError("empty training set")
    depth, width = 0, 0
    for r in train_set:
        if r.gold_tree is None:
            continue
        dec = decompose_gold(r.gold_tree)
        depth = max(depth, len(dec.layers))
        width = max([width] + [len(layer) for layer in dec.layers])
    return max(depth, 1), max(width, beam_floor)


# --- decoding -----------------------------------------------------------------

@dataclass
class DecodeResult:
    tree: Optional[ExprTree]
    answer: Optional[float]
    root_score: float
    all_candidates: LayerSet

    @property
    def failed(self) -> bool:
        return self.tree is None


def joint_probability(node: CandidateNode, history: LayerSet) -> float:
    if node.children is None:
        return 0.0
    p_local = float(np.max(node.op_dist)) * node.p_comb
    if node.layer == 1:
        return p_local
    child_pj = [history[c].p_joint for c in node.children]
    nonzero = [p for p in child_pj if p != 0.0]
    avg = sum(nonzero) / len(nonzero) if nonzero else 1.0
    return avg * p_local


def select_root(candidates: LayerSet) -> CandidateNode:
    """Inner node with the highest ``P_J * P_ter``; the smaller id wins ties."""
    best, best_score = None, -1.0
    for node in sorted(candidates.inner_nodes(), key=lambda n: n.id):
        score = node.p_joint * node.p_ter
        if score > best_score:
            best, best_score = node, score
    if best is None:
        raise ValueError("no inner node to choose a root from")
    return best


def restore_tree(root: CandidateNode, history: LayerSet, leaf_arity: int) -> ExprTree:
    """Materialize the subtree under ``root`` with argmax operators."""
    if root.children is None:
        raise ValueError("root must be an inner node")
    inner: dict[int, CandidateNode] = {}
    stack = [root.id]
    while stack:
        nid = stack.pop()
        if nid in inner or nid < leaf_arity:
            continue
        node = history.by_id.get(nid)
        assert node is not None and node.children is not None, f"dangling child {nid}"
        inner[nid] = node
        stack.extend(node.children)
    new_id = {i: i for i in range(leaf_arity)}
    for k, nid in enumerate(sorted(inner)):
        new_id[nid] = leaf_arity + k
    nodes = [ExprNode(i) for i in range(leaf_arity)]
    for nid in sorted(inner):
        node = inner[nid]
        l, r = (new_id[c] for c in node.children)
        op = OPERATORS[int(np.argmax(node.op_dist))]
        nodes.append(ExprNode(new_id[nid], 1 + max(nodes[l].layer, nodes[r].layer), op, l, r))
    return ExprTree(tuple(nodes), new_id[root.id], leaf_arity)


def infer(record: ProblemRecord, model: Model, l_max: Optional[int] = None,
          beam_k: Optional[int] = -1) -> DecodeResult:
    """Layered beam decoding; ``beam_k=None`` keeps every pair, ``-1`` uses the model's k."""
    l_max = model.l_max if l_max is None else l_max
    beam_k = model.beam_k if beam_k == -1 else beam_k
    with tc.no_grad():
        enc = encode_batch([record], model.encoder, model.vocab)
        states, mask = enc.states, enc.mask
        T, d = states.shape[1], states.shape[2]
        flat = states.data.reshape(T, d)
        leaf_emb = [flat[p] for p in enc.number_positions[0]]
        leaf_emb += [model.encoder.const_emb.data[j] for j in constant_rows(record, model.constant_pool)]
        layers = LayerSet([[CandidateNode(i, 0, e) for i, e in enumerate(leaf_emb)]])
        h_query = enc.h_query
        for t in range(1, l_max + 1):
            pairs = enumerate_pairs(layers, t - 1)
            if not pairs:
                break
            hl = Tensor(np.stack([l.embedding for l, _ in pairs]))
            hr = Tensor(np.stack([r.embedding for _, r in pairs]))
            p = score_pairs(hl, hr, h_query, model.combiner).data
            scored = [(l, r, float(s)) for (l, r), s in zip(pairs, p)]
            kept = scored if beam_k is None else select_beam(scored, beam_k)
            kept = sorted(kept, key=lambda item: (item[0].id, item[1].id))
            kl = Tensor(np.stack([l.embedding for l, _, _ in kept]))
            kr = Tensor(np.stack([r.embedding for _, r, _ in kept]))
            zeros = np.zeros(len(kept), dtype=np.intp)
            ops = operator_probs(kl, kr, states, mask, zeros, model.predictor)
            emb = inner_embeddings(kl, kr, ops, model.predictor)
            ter = termination_probs(emb, states, mask, zeros, model.predictor).data
            base = layers.next_id
            new = []
            for i, (l, r, s) in enumerate(kept):
                node = CandidateNode(base + i, t, emb.data[i], (l.id, r.id), ops.data[i], s, float(ter[i]))
                node.p_joint = joint_probability(node, layers)
                new.append(node)
            layers.add_layer(new)
    if not layers.inner_nodes():
        return DecodeResult(None, None, 0.0, layers)
    root = select_root(layers)
    tree = restore_tree(root, layers, record.leaf_arity)
    value = evaluate(tree, record.leaf_values)
    return DecodeResult(tree, None if value is None else float(value), root.p_joint * root.p_ter, layers)


def decode_all(records: Sequence[ProblemRecord], model: Model, workers: int = 1) -> list[DecodeResult]:
    if workers <= 1:
        return [infer(r, model) for r in records]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda r: infer(r, model), records))


def accuracy(records: Sequence[ProblemRecord], results: Sequence[DecodeResult], tol: float) -> float:
    if not records:
        return 0.0
    hits = sum(answers_match(res.answer, r.gold_answer, tol) for r, res in zip(records, results))
    return hits / len(records)


# --- training loop ------------------------------------------------------------

def build_model(train_records: Sequence[ProblemRecord], cfg: ModelConfig, hyper: Hyperparams,
                constant_pool: Sequence[float]) -> Model:
    l_max, beam_k = derive_limits(train_records, hyper.beam_floor)
    model = Model(cfg, Vocab.build(train_records), constant_pool, seed=hyper.seed,
                  l_max=hyper.l_max or l_max, beam_k=hyper.beam_k or beam_k)
    model.train_templates = sorted({to_template(r.gold_tree) for r in train_records if r.gold_tree})
    return model


def train(train_records: Sequence[ProblemRecord], run: RunConfig,
          val_records: Optional[Sequence[ProblemRecord]] = None, model: Optional[Model] = None) -> Path:
    """Epoch loop; returns the best-validation checkpoint (last one without validation).

    Writes ``metrics.jsonl`` (one line per epoch), ``epochNNN.fc2c`` every
    ``checkpoint_every`` epochs, ``best.fc2c`` and ``last.fc2c`` to
    ``run.output_dir``.
    """
    hyper = run.hyper
    usable = [r for r in train_records if is_trainable(r)]
    if not usable:
        raise ValueError("empty training set")
    if len(usable) < len(train_records):
        log.warning("dropping %d untrainable training record(s)", len(train_records) - len(usable))
    out = Path(run.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if model is None:
        model = build_model(usable, run.model_config(), hyper, run.constant_pool)
    log.info("l_max=%d beam_k=%d, %d parameters", model.l_max, model.beam_k,
             sum(t.data.size for t in model.tensors()))
    (out / "run_config.json").write_text(json.dumps(run.to_dict(), sort_keys=True, indent=2) + "\n")
    opt = tc.AdamState(model.tensors(), learning_rate=hyper.learning_rate)
    rng = np.random.default_rng(hyper.seed + 1)
    best_acc = -1.0
    best_path = out / "best.fc2c"
    metrics_path = out / "metrics.jsonl"
    metrics_path.write_text("")
    for epoch in range(1, hyper.epochs + 1):
        opt.learning_rate = tc.halved_lr(hyper.learning_rate, epoch, hyper.lr_halving_period)
        order = rng.permutation(len(usable))
        sums = np.zeros(4)
        started = time.perf_counter()
        n_batches = 0
        for i in range(0, len(order), hyper.batch_size):
            batch = [usable[j] for j in order[i: i + hyper.batch_size]]
            sums += train_step(batch, model, hyper, opt)
            n_batches += 1
        means = sums / max(n_batches, 1)
        val_acc = None
        if val_records and (epoch % hyper.eval_every == 0 or epoch == hyper.epochs):
            results = decode_all(val_records, model, hyper.eval_workers)
            val_acc = accuracy(val_records, results, hyper.answer_tol)
        line = {
            "epoch": epoch, "L_comb": means[0], "L_op": means[1], "L_ter": means[2],
            "L_total": means[3], "val_answer_acc": val_acc, "lr": opt.learning_rate,
        }
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(line) + "\n")
        log.info("epoch %d  L_total %.4f  L_op %.4f  val_acc %s  (%.1fs)", epoch, means[3], means[1],
                 "-" if val_acc is None else f"{val_acc:.4f}", time.perf_counter() - started)
        if hyper.checkpoint_every and epoch % hyper.checkpoint_every == 0:
            model.save(out / f"epoch{epoch:03d}.fc2c")
        if val_acc is not None and val_acc > best_acc:
            best_acc = val_acc
            model.save(best_path)
        if val_acc is not None and hyper.target_accuracy is not None and val_acc >= hyper.target_accuracy:
            log.info("validation accuracy %.4f reached target at epoch %d", val_acc, epoch)
            break
    last = model.save(out / "last.fc2c")
    return best_path if best_acc >= 0 else last

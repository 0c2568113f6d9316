"""End-to-end acceptance checks, one test group per criterion.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion.  The desk-scale training run (criteria 7 and 8)
takes the bulk of the time.
"""

from __future__ import annotations

import json
import time
from fractions import Fraction

import numpy as np
import pytest

from bottomup_mwp import tensorcore as tc
from bottomup_mwp.combiner import CandidateNode, LayerSet, combination_loss
from bottomup_mwp.config import Hyperparams, ModelConfig, RunConfig
from bottomup_mwp.dataio import (
    SplitSpec,
    SynthConfig,
    make_record,
    random_split,
    resplit_by_template,
    synth_generate,
    template_counts,
)
from bottomup_mwp.encoder import Vocab
from bottomup_mwp.engine import (
    Model,
    compute_losses,
    infer,
    joint_probability,
    train,
)
from bottomup_mwp.evalharness import evaluate_model, write_report
from bottomup_mwp.exprtree import OPERATORS, evaluate, make_tree, normalize

TINY = ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32, d_op=8, head_hidden=16, comb_heads=2)

# --- 1. gradient fidelity -----------------------------------------------------


def _unlabeled_sum(record, model) -> float:
    """Unlabeled-pair NLL of one record: the quantity the hinge floors."""
    big = 1e3
    with tc.no_grad():
        live = compute_losses([record], model, Hyperparams(theta=0.0)).comb.item()
        floored = compute_losses([record], model, Hyperparams(theta=big)).comb.item()
    return live - (floored - big)


GRAD_TENSORS = ("comb.w_key", "comb.w_query", "pred.op_w2", "pred.in_w1", "pred.ter_w2", "enc.block0.wq")


@pytest.mark.criterion(1, "gradient fidelity of L_comb, L_op, L_ter and the composite (20 seeds, <=1e-4, <1 min)")
def test_gradient_fidelity(detail):
    started = time.perf_counter()
    corpus = synth_generate(SynthConfig(num_records=200, max_layers=3, seed=123))
    worst = {"comb": 0.0, "op": 0.0, "ter": 0.0, "total": 0.0}
    for seed in range(20):
        rng = np.random.default_rng(seed)
        batch = [corpus[i] for i in rng.choice(len(corpus), size=2, replace=False)]
        model = Model(TINY, Vocab.build(batch), [], seed=seed)
        sums = [_unlabeled_sum(r, model) for r in batch]
        # clear of the kink: live hinge on even seeds, floored on odd ones
        theta = 0.5 * min(sums) if seed % 2 == 0 else 2.0 * max(sums)
        hyper = Hyperparams(theta=theta)
        by_name = {t.name: t for t in model.tensors()}
        picked = [by_name[n] for n in GRAD_TENSORS]
        for name in worst:
            fn = lambda name=name: getattr(compute_losses(batch, model, hyper), name)
            worst[name] = max(worst[name], tc.grad_check(fn, picked, max_entries=2, seed=seed))
    elapsed = time.perf_counter() - started
    detail.append("max rel err " + ", ".join(f"{k}={v:.1e}" for k, v in worst.items()))
    detail.append(f"{elapsed:.1f}s")
    assert max(worst.values()) <= 1e-4
    assert elapsed < 60


# --- 2. tree algebra -----------------------------------------------------------

def _random_spec(rng, arity, depth, top=True):
    if depth == 0 or (not top and rng.random() < 0.25):
        return int(rng.integers(arity))
    return (OPERATORS[int(rng.integers(6))], _random_spec(rng, arity, depth - 1, False),
            _random_spec(rng, arity, depth - 1, False))


@pytest.mark.criterion(2, "tree algebra: 10,000 normalize round-trips, idempotence, f/r duality")
def test_tree_algebra(detail):
    rng = np.random.default_rng(2024)
    arity = 5
    exact = idempotent = dual = 0
    for _ in range(10_000):
        tree = make_tree(arity, _random_spec(rng, arity, int(rng.integers(1, 5))))
        values = [Fraction(int(rng.integers(-30, 31)), int(rng.integers(1, 7))) for _ in range(arity)]
        norm = normalize(tree)
        assert evaluate(norm, values) == evaluate(tree, values)
        exact += 1
        assert normalize(norm) == norm
        idempotent += 1
        a, b = values[0], values[1]
        for fwd, rev in ((OPERATORS[2], OPERATORS[3]), (OPERATORS[4], OPERATORS[5])):
            assert evaluate(make_tree(2, (rev, 0, 1)), [a, b]) == evaluate(make_tree(2, (fwd, 1, 0)), [a, b])
        dual += 1
    detail.append(f"{exact} exact round-trips, {idempotent} idempotent, {dual} duality samples")


# --- 3. enumeration oracle -----------------------------------------------------

def _oracle_shapes(n_leaves: int, l_max: int) -> set:
    """All nested-tuple trees of depth <= l_max obeying the selection rule.

    Built by brute force over every binary tree (leaves may repeat) and then
    filtered: the right child sits exactly one layer below its parent and the
    left child precedes the right child in creation order, which ranks nodes
    by (layer, left key, right key).
    """

    def layer(t):
        return 0 if isinstance(t, int) else 1 + max(layer(t[0]), layer(t[1]))

    def key(t):
        return (0, t) if isinstance(t, int) else (layer(t), key(t[0]), key(t[1]))

    def allowed(t):
        if isinstance(t, int):
            return True
        left, right = t
        return (layer(right) == layer(t) - 1 and key(left) < key(right)
                and allowed(left) and allowed(right))

    trees = set(range(n_leaves))
    for _ in range(l_max):
        trees |= {(a, b) for a in trees for b in trees}
    return {t for t in trees if not isinstance(t, int) and allowed(t)}


def _decoder_shapes(result) -> tuple[set, int]:
    ls = result.all_candidates

    def shape(nid):
        node = ls[nid]
        return nid if node.children is None else (shape(node.children[0]), shape(node.children[1]))

    pairs = [n.children for n in ls.inner_nodes()]
    return {shape(n.id) for n in ls.inner_nodes()}, len(pairs) - len(set(pairs))


@pytest.mark.criterion(3, "decoder at k=inf generates exactly the brute-force tree set; no duplicate pairs")
def test_enumeration_oracle(detail):
    checked = 0
    for n_leaves in range(1, 5):
        text = " ".join(f"w{i} {i + 2} ." for i in range(n_leaves)) + " how many ?"
        record = make_record("oracle", text, None, None)
        model = Model(TINY, Vocab.build([record]), [], seed=n_leaves)
        for l_max in range(1, 4):
            result = infer(record, model, l_max=l_max, beam_k=None)
            got, dups = _decoder_shapes(result) if not result.failed else (set(), 0)
            want = _oracle_shapes(n_leaves, l_max)
            assert dups == 0
            assert got == want, f"{n_leaves} leaves, l_max {l_max}"
            checked += 1
    detail.append(f"{checked} (leaves, l_max) settings; largest set {len(want)} trees")


# --- 4. hinge ----------------------------------------------------------------

@pytest.mark.criterion(4, "hinge floor: loss=theta with zero unlabeled gradient below, live gradient above")
@pytest.mark.parametrize("theta", [1.3, 1.5])
def test_hinge(theta, detail):
    below = tc.parameter(np.array([0.5]))  # -log(0.5) = 0.693 < theta
    loss = combination_loss(below, [False], theta)
    tc.backward(loss)
    assert loss.item() == pytest.approx(theta) and below.grad[0] == 0.0

    above = tc.parameter(np.array([0.9]))  # -log(0.1) = 2.303 > theta
    loss = combination_loss(above, [False], theta)
    tc.backward(loss)
    assert loss.item() == pytest.approx(2.302585093, abs=1e-9) and above.grad[0] == pytest.approx(10.0)

    # a positive pair alongside keeps its own gradient while the floor holds
    mixed = tc.parameter(np.array([0.5, 0.5]))
    loss = combination_loss(mixed, [True, False], theta)
    tc.backward(loss)
    assert mixed.grad[0] == pytest.approx(-2.0) and mixed.grad[1] == 0.0
    detail.append(f"theta={theta} ok")


# --- 5. joint probability ------------------------------------------------------

@pytest.mark.criterion(5, "joint probability worked cases: leaf 0, layer-1 0.4, layer-2 0.18")
def test_joint_probability(detail):
    def dist(p):
        d = np.full(6, (1 - p) / 5)
        d[0] = p
        return d

    leaves = [CandidateNode(i, 0, np.zeros(2)) for i in range(3)]
    ls = LayerSet([leaves])
    assert joint_probability(leaves[0], ls) == 0.0
    n3 = CandidateNode(3, 1, np.zeros(2), (0, 1), dist(0.8), 0.5)
    n3.p_joint = joint_probability(n3, ls)
    assert n3.p_joint == pytest.approx(0.4, abs=1e-15)
    ls.add_layer([n3])
    n4 = CandidateNode(4, 2, np.zeros(2), (2, 3), dist(0.9), 0.5)
    assert joint_probability(n4, ls) == pytest.approx(0.18, abs=1e-15)
    detail.append("0 / 0.4 / 0.18")


# --- 6. overfit sanity -------------------------------------------------------

@pytest.mark.criterion(6, "20-problem set (<=2 layers) reaches 100% within 300 epochs, <5 min")
def test_overfit(tmp_path, detail):
    records = synth_generate(SynthConfig(num_records=20, max_layers=2, seed=0))
    run = RunConfig(train_path="", constant_pool=[], output_dir=str(tmp_path),
                    hyper=Hyperparams(epochs=300, batch_size=32, target_accuracy=1.0, checkpoint_every=0))
    started = time.perf_counter()
    best = train(records, run, records)
    acc = evaluate_model(Model.load(best), records).answer_accuracy
    elapsed = time.perf_counter() - started
    epochs = sum(1 for _ in open(tmp_path / "metrics.jsonl"))
    detail.append(f"accuracy {acc:.2f} after {epochs} epochs in {elapsed:.0f}s")
    assert acc == 1.0 and epochs <= 300 and elapsed < 300


# --- 9. determinism ------------------------------------------------------------

@pytest.mark.criterion(9, "identical seeds give identical metric logs and checkpoints")
def test_determinism(tmp_path, detail):
    records = synth_generate(SynthConfig(num_records=60, max_layers=3, seed=9))
    train_r, test_r = random_split(records, 0.25, seed=0)
    for name in ("a", "b"):
        run = RunConfig(train_path="", constant_pool=[], output_dir=str(tmp_path / name),
                        model=dict(TINY.__dict__),
                        hyper=Hyperparams(epochs=3, batch_size=16, checkpoint_every=1, seed=5))
        best = train(train_r, run, test_r)
        write_report(evaluate_model(Model.load(best), test_r), tmp_path / name / "report.json")
        # the only legitimate difference between the two runs
        cfg = json.loads((tmp_path / name / "run_config.json").read_text())
        assert cfg.pop("output_dir") == str(tmp_path / name)
        (tmp_path / name / "run_config.json").write_text(json.dumps(cfg, sort_keys=True))
    a, b = tmp_path / "a", tmp_path / "b"
    files = sorted(p.name for p in a.iterdir())
    assert files == sorted(p.name for p in b.iterdir())
    assert {"metrics.jsonl", "best.fc2c", "epoch003.fc2c", "report.json"} <= set(files)
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name
    detail.append(f"{len(files)} files byte-identical")


# --- 7 and 8. desk-scale generalization ------------------------------------------

DESK_CORPUS = SynthConfig(num_records=2000, max_layers=3, seed=7)
# beam width from the widest gold layer alone: the floor of 4 exists for tiny
# training sets and here only admits junk inner nodes into layer 1
DESK_HYPER = dict(epochs=60, eval_every=4, checkpoint_every=10, beam_floor=1)
BUDGET_SECONDS = 30 * 60


@pytest.fixture(scope="module")
def desk_corpus():
    return synth_generate(DESK_CORPUS)


@pytest.fixture(scope="module")
def desk_run(desk_corpus, tmp_path_factory):
    """Train on a same-template split; the best-validation checkpoint is scored on test."""
    train_r, test_r = random_split(desk_corpus, 0.2, seed=0, same_template=True)
    train_r, val_r = random_split(train_r, 0.1, seed=1)
    out = tmp_path_factory.mktemp("desk")
    run = RunConfig(train_path="", constant_pool=[], output_dir=str(out), hyper=Hyperparams(**DESK_HYPER))
    started = time.perf_counter()
    best = train(train_r, run, val_r)
    report = evaluate_model(Model.load(best), test_r)
    elapsed = time.perf_counter() - started
    epochs = sum(1 for _ in open(out / "metrics.jsonl"))
    return report, elapsed, epochs


@pytest.mark.criterion(7, "same-template split >= 90% within 200 epochs and 30 min; template re-split predicts unseen templates")
def test_desk_generalization(desk_run, detail):
    report, elapsed, epochs = desk_run
    detail.append(f"test accuracy {report.answer_accuracy:.4f} (n={report.n_total}) after {epochs} epochs "
                  f"in {elapsed / 60:.1f} min on one core")
    assert epochs <= 200
    assert report.answer_accuracy >= 0.90
    assert elapsed < BUDGET_SECONDS


@pytest.mark.criterion(7, "same-template split >= 90% within 200 epochs and 30 min; template re-split predicts unseen templates")
def test_template_resplit_predicts_unseen(desk_corpus, tmp_path, detail):
    n_templates = len(template_counts(desk_corpus))
    train_r, test_r = resplit_by_template(desk_corpus, SplitSpec(int(0.8 * n_templates), seed=0))
    run = RunConfig(train_path="", constant_pool=[], output_dir=str(tmp_path),
                    hyper=Hyperparams(epochs=20, checkpoint_every=0, eval_every=20, beam_floor=1))
    best = train(train_r, run, test_r[:100])
    report = evaluate_model(Model.load(best), test_r)
    detail.append(f"{report.unseen_template_count} of {report.n_total} re-split test predictions "
                  f"use templates absent from training")
    assert report.unseen_template_count > 0


@pytest.mark.criterion(8, "accuracy by operator count is non-increasing: 1-op >= 2-op >= 3-op")
def test_complexity_breakdown(desk_run, detail):
    report, _, _ = desk_run
    by_ops = report.accuracy_by_op_count
    detail.append(", ".join(f"{k}-op {acc:.3f} (n={n})" for k, (n, acc) in by_ops.items()))
    assert {1, 2, 3} <= set(by_ops)
    accs = [by_ops[k][1] for k in (1, 2, 3)]
    assert accs[0] >= accs[1] >= accs[2]

"""Problem records, file ingestion, synthetic problems and template re-splits."""

from __future__ import annotations

import json
import logging
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .exprtree import (
    EquationSyntaxError,
    ExprTree,
    Number,
    Operator,
    evaluate,
    leaf_names,
    make_tree,
    normalize,
    parse_equation,
    to_infix,
    to_template,
)

log = logging.getLogger(__name__)

DEFAULT_CONSTANT_POOL: tuple[float, ...] = (1, 100, math.pi, 7)
TERMINATORS = frozenset({".", "?", "!", "？", "。"})
ANSWER_RTOL = 1e-6

_TOKEN_RE = re.compile(r"(?P<num>\d+(?:\.\d+)?(?:/\d+)?%?)(?!\w)|(?P<word>\w+)|(?P<punct>\S)")


@dataclass
class ProblemRecord:
    id: str
    tokens: list[str]
    numbers: list[Number]
    constants: list[Number] = field(default_factory=list)
    query_span: tuple[int, int] = (0, 0)
    gold_tree: Optional[ExprTree] = None
    gold_answer: Optional[float] = None

    @property
    def leaf_arity(self) -> int:
        return len(self.numbers) + len(self.constants)

    @property
    def leaf_values(self) -> list[Number]:
        return list(self.numbers) + list(self.constants)

    @property
    def text(self) -> str:
        """Surface text with placeholders swapped back for their numbers."""
        out = []
        for tok in self.tokens:
            m = re.fullmatch(r"NUM(\d+)", tok)
            out.append(format_number(self.numbers[int(m.group(1))]) if m else tok)
        return " ".join(out)

    @property
    def equation(self) -> Optional[str]:
        if self.gold_tree is None:
            return None
        return "x=" + to_infix(self.gold_tree, leaf_names(len(self.numbers), self.leaf_arity))


def format_number(value: Number) -> str:
    if isinstance(value, float):
        return repr(value)
    value = Fraction(value)
    if value.denominator == 1:
        return str(value.numerator)
    den = value.denominator
    while den % 2 == 0:
        den //= 2
    while den % 5 == 0:
        den //= 5
    if den == 1:
        # terminating decimal, render exactly
        digits = 0
        while (value * 10**digits).denominator != 1:
            digits += 1
        scaled = value * 10**digits
        sign = "-" if scaled < 0 else ""
        s = str(abs(scaled.numerator)).rjust(digits + 1, "0")
        return f"{sign}{s[:-digits]}.{s[-digits:]}"
    return f"{value.numerator}/{value.denominator}"


def parse_number(literal: str) -> Number:
    percent = literal.endswith("%")
    if percent:
        literal = literal[:-1]
    if "/" in literal:
        num, den = literal.split("/")
        value = Fraction(int(num), int(den)) if int(den) else Fraction(int(num))
    elif "." in literal:
        value = Fraction(literal)
    else:
        value = int(literal)
    if percent:
        log.debug("percentage literal %s%% read as a fraction", literal)
        value = Fraction(value) / 100
    return value


def tokenize(text: str) -> list[str]:
    return [m.group(0) for m in _TOKEN_RE.finditer(text)]


def substitute_numbers(raw_text: str) -> tuple[list[str], list[Number]]:
    """Replace each numeric literal by ``NUM<i>`` in appearance order."""
    tokens, numbers = [], []
    for m in _TOKEN_RE.finditer(raw_text):
        if m.group("num"):
            tokens.append(f"NUM{len(numbers)}")
            numbers.append(parse_number(m.group("num")))
        else:
            tokens.append(m.group(0))
    return tokens, numbers


def detect_query(tokens: Sequence[str]) -> tuple[int, int]:
    """Span of the last sentence; the whole sequence if there is no interior terminator."""
    if not tokens:
        raise ValueError("empty token list")
    for i in range(len(tokens) - 2, -1, -1):
        if tokens[i] in TERMINATORS:
            return (i + 1, len(tokens))
    return (0, len(tokens))


def answers_match(pred, gold, tol: float = ANSWER_RTOL) -> bool:
    if pred is None or gold is None:
        return False
    pred, gold = float(pred), float(gold)
    if not (math.isfinite(pred) and math.isfinite(gold)):
        return False
    return abs(pred - gold) <= max(tol, tol * abs(gold))


def validate_record(record: ProblemRecord) -> None:
    """Raise ValueError listing every broken record invariant."""
    problems = []
    placeholders = [int(t[3:]) for t in record.tokens if re.fullmatch(r"NUM\d+", t)]
    if sorted(placeholders) != list(range(len(record.numbers))):
        problems.append(f"placeholders {placeholders} do not match {len(record.numbers)} numbers")
    start, end = record.query_span
    if not 0 <= start < end <= len(record.tokens):
        problems.append(f"query span {record.query_span} invalid for {len(record.tokens)} tokens")
    if record.gold_tree is not None:
        if record.gold_tree.leaf_arity != record.leaf_arity:
            problems.append("gold tree arity differs from numbers + constants")
        elif record.gold_answer is not None:
            value = evaluate(record.gold_tree, record.leaf_values)
            if not answers_match(value, record.gold_answer):
                problems.append(f"gold tree evaluates to {value}, answer is {record.gold_answer}")
    if problems:
        raise ValueError(f"record {record.id}: " + "; ".join(problems))


def make_record(
    record_id: str,
    text: str,
    equation: Optional[str],
    answer: Optional[float],
    constants: Sequence[Number] = (),
    query_text: Optional[str] = None,
) -> ProblemRecord:
    """Build a record from raw text and a placeholder equation.

    When ``query_text`` is given it is appended to ``text`` and its tokens
    form the query span; otherwise the last sentence is used.
    """
    tokens, numbers = substitute_numbers(text)
    if query_text is not None:
        qtokens, qnumbers = substitute_numbers(query_text)
        offset = len(numbers)
        qtokens = [f"NUM{int(t[3:]) + offset}" if re.fullmatch(r"NUM\d+", t) else t for t in qtokens]
        span = (len(tokens), len(tokens) + len(qtokens))
        tokens, numbers = tokens + qtokens, numbers + qnumbers
        if span[0] == span[1]:
            span = detect_query(tokens)
    else:
        span = detect_query(tokens)
    constants = list(constants)
    tree = None
    if equation is not None:
        tree = normalize(parse_equation(equation, len(numbers) + len(constants), len(numbers)))
    return ProblemRecord(record_id, tokens, numbers, constants, span, tree,
                         None if answer is None else float(answer))


def _pool_index(value: float, pool: Sequence[Number]) -> Optional[int]:
    for j, c in enumerate(pool):
        if math.isclose(float(value), float(c), rel_tol=1e-9, abs_tol=1e-12):
            return j
    return None


_SVAMP_EQ_RE = re.compile(r"\s*(?:(?P<ph>number\d+)|(?P<num>\d+(?:\.\d+)?)|(?P<sym>[-+*/()]))")


def _align_svamp_equation(equation: str, numbers: Sequence[Number], pool: Sequence[Number]) -> str:
    """Rewrite a SVAMP equation over literals / ``numberK`` into ``n``/``c`` placeholders."""
    out, pos = [], 0
    equation = equation.strip()
    while pos < len(equation):
        m = _SVAMP_EQ_RE.match(equation, pos)
        if m is None or m.end() == pos:
            raise EquationSyntaxError(f"cannot read equation {equation!r} at {pos}")
        pos = m.end()
        if m.group("ph"):
            out.append("n" + m.group("ph")[6:])
        elif m.group("num"):
            value = Fraction(m.group("num"))
            idx = next((i for i, n in enumerate(numbers) if Fraction(n) == value), None)
            if idx is not None:
                out.append(f"n{idx}")
            else:
                j = _pool_index(float(value), pool)
                if j is None:
                    raise LookupError(f"number {m.group('num')} is neither in the text nor in the constant pool")
                out.append(f"c{j}")
        else:
            out.append(m.group("sym"))
        while pos < len(equation) and equation[pos].isspace():
            pos += 1
    return "".join(out)


def _check_gold(record: ProblemRecord) -> Optional[str]:
    if record.gold_tree is None or record.gold_answer is None:
        return None
    value = evaluate(record.gold_tree, record.leaf_values)
    if not answers_match(value, record.gold_answer):
        return f"equation evaluates to {value}, answer is {record.gold_answer}"
    return None


def load_records(
    path,
    fmt: str = "native",
    constant_pool: Sequence[Number] = DEFAULT_CONSTANT_POOL,
    issues: Optional[list] = None,
) -> list[ProblemRecord]:
    """Read ``native`` (JSON lines) or ``svamp`` (JSON array) problem files.

    Bad records are skipped and logged; ``(location, reason)`` pairs are
    appended to ``issues`` when a list is supplied.
    """
    fmt = {"native-jsonl": "native", "svamp-json": "svamp"}.get(fmt, fmt)
    if fmt not in ("native", "svamp"):
        raise ValueError(f"unknown format {fmt!r}")
    issues = issues if issues is not None else []
    records: list[ProblemRecord] = []

    def skip(where: str, reason: str) -> None:
        log.warning("skipping %s: %s", where, reason)
        issues.append((where, reason))

    path = Path(path)
    if fmt == "native":
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                where = f"{path.name}:{lineno}"
                try:
                    raw = json.loads(line)
                    record = make_record(
                        str(raw.get("id", lineno)),
                        raw["text"],
                        raw.get("equation"),
                        raw.get("answer"),
                        raw.get("constants", list(constant_pool)),
                    )
                except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as exc:
                    skip(where, f"malformed record ({exc})")
                    continue
                except EquationSyntaxError as exc:
                    skip(where, f"unparseable equation ({exc})")
                    continue
                bad = _check_gold(record)
                if bad:
                    skip(where, bad)
                    continue
                records.append(record)
        return records

    with open(path, encoding="utf-8") as fh:
        items = json.load(fh)
    for i, raw in enumerate(items):
        where = f"{path.name}[{i}]"
        try:
            body, question = raw["Body"].strip(), raw["Question"].strip()
            _, numbers = substitute_numbers(body + " " + question)
            equation = _align_svamp_equation(str(raw["Equation"]), numbers, constant_pool)
            record = make_record(str(raw["ID"]), body, equation, raw.get("Answer"),
                                 list(constant_pool), query_text=question)
        except (KeyError, TypeError, AttributeError) as exc:
            skip(where, f"malformed record ({exc})")
            continue
        except EquationSyntaxError as exc:
            skip(where, f"unparseable equation ({exc})")
            continue
        except LookupError as exc:
            skip(where, str(exc))
            continue
        bad = _check_gold(record)
        if bad:
            skip(where, bad)
            continue
        records.append(record)
    return records


def record_to_json(record: ProblemRecord) -> dict:
    return {
        "id": record.id,
        "text": record.text,
        "equation": record.equation,
        "answer": record.gold_answer,
        "constants": [float(c) for c in record.constants],
    }


def write_records(path, records: Iterable[ProblemRecord]) -> None:
    """Write records in the native JSON-lines format."""
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record_to_json(record)) + "\n")


# --- synthetic problems -------------------------------------------------------

_NAMES = ("alice", "bob", "carol", "dave", "erin", "frank", "grace", "heidi")
# role of a child in its parent, keyed by operator family and calculation side
_ROLES = {
    ("+", 0): "joins", ("+", 1): "joins",
    ("*", 0): "scales", ("*", 1): "scales",
    ("-", 0): "keeps", ("-", 1): "loses",
    ("/", 0): "splits", ("/", 1): "shares",
}
_QUERIES = {
    "+": "how many items are there in total ?",
    "-": "how many items are left ?",
    "*": "how many items are there in all groups ?",
    "/": "how many items does each get ?",
}
_FAMILY_OP = {"+": Operator.ADD, "-": Operator.SUB_F, "*": Operator.MUL, "/": Operator.DIV_F}


@dataclass
class SynthConfig:
    num_records: int = 1000
    max_layers: int = 3
    operator_weights: dict = field(default_factory=lambda: {"+": 1.0, "-": 1.0, "*": 1.0, "/": 1.0})
    value_range: tuple[int, int] = (1, 20)
    seed: int = 0
    max_leaves: int = 4
    shuffle_leaves: bool = True
    constants: list = field(default_factory=list)
    constant_prob: float = 0.0

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        raw = dict(raw)
        if "value_range" in raw:
            raw["value_range"] = tuple(raw["value_range"])
        return cls(**raw)


def _sample_shape(rng: np.random.Generator, depth: int, budget: int):
    """Nested ``[left, right]`` lists of exact ``depth`` with at most ``budget`` leaves."""
    if depth == 0:
        return None
    other_max = min(depth - 1, budget - depth - 1)
    # favour shallow side branches
    weights = np.array([2.0 ** -e for e in range(other_max + 1)])
    other_depth = int(rng.choice(other_max + 1, p=weights / weights.sum()))
    other = _sample_shape(rng, other_depth, budget - depth)
    deep = _sample_shape(rng, depth - 1, budget - _count_leaves(other))
    return [deep, other] if rng.random() < 0.5 else [other, deep]


def _count_leaves(shape) -> int:
    return 1 if shape is None else _count_leaves(shape[0]) + _count_leaves(shape[1])


def synth_generate(config: SynthConfig) -> list[ProblemRecord]:
    """Reproducible templated problems whose text pins down the gold tree.

    Each number gets one clause naming the chain of operations it feeds
    (role word + box id per ancestor); the final question is keyed to the
    root operator family.
    """
    if not 1 <= config.max_layers <= 4:
        raise ValueError("max_layers must be in 1..4")
    if config.max_leaves < config.max_layers + 1:
        raise ValueError("max_leaves must exceed max_layers")
    families = [f for f in "+-*/" if config.operator_weights.get(f, 0) > 0]
    if not families:
        raise ValueError("no operators enabled")
    fam_p = np.array([config.operator_weights[f] for f in families], dtype=float)
    fam_p /= fam_p.sum()
    rng = np.random.default_rng(config.seed)
    lo, hi = config.value_range
    constants = list(config.constants)
    records = []
    while len(records) < config.num_records:
        depth = int(rng.integers(1, config.max_layers + 1))
        shape = _sample_shape(rng, depth, config.max_leaves)
        n_leaves = _count_leaves(shape)
        is_const = [bool(constants) and rng.random() < config.constant_prob for _ in range(n_leaves)]
        if all(is_const):
            is_const[0] = False
        n_nums = n_leaves - sum(is_const)
        order = rng.permutation(n_nums) if config.shuffle_leaves else np.arange(n_nums)
        const_pick = [int(rng.integers(len(constants))) if c else -1 for c in is_const]
        leaf_slots, k = [], 0
        for c, pick in zip(is_const, const_pick):
            if c:
                leaf_slots.append(n_nums + pick)
            else:
                leaf_slots.append(int(order[k]))
                k += 1
        counter = iter(leaf_slots)

        def build(node):
            if node is None:
                return next(counter)
            fam = families[int(rng.choice(len(families), p=fam_p))]
            return (_FAMILY_OP[fam], build(node[0]), build(node[1]))

        spec = build(shape)
        values = [int(v) for v in rng.integers(lo, hi + 1, size=n_nums)]
        raw_tree = make_tree(n_nums + len(constants), spec)
        answer = evaluate(raw_tree, values + constants)
        if answer is None:
            continue
        tree = normalize(raw_tree)
        tokens = _render(raw_tree, tree, values, n_nums, constants)
        text = " ".join(tokens)
        toks, numbers = substitute_numbers(text)
        record = ProblemRecord(
            f"synth-{len(records)}", toks, numbers, list(constants),
            detect_query(toks), tree, float(answer),
        )
        records.append(record)
    return records


def _render(raw: ExprTree, norm: ExprTree, values, n_nums: int, constants) -> list[str]:
    # map raw inner ids to normalized ones through matching subtree structure
    box_of = _box_ids(raw, norm)
    parent: dict[int, list[tuple[int, str]]] = defaultdict(list)  # leaf -> [(raw inner id, role)]
    up: dict[int, tuple[int, str]] = {}
    for node in raw.inner_nodes():
        fam = node.op.family
        for side, child in enumerate((node.left, node.right)):
            role = _ROLES[(fam, side)]
            if raw.nodes[child].is_leaf:
                parent[child].append((node.id, role))
            else:
                up[child] = (node.id, role)

    def path(inner: int, role: str) -> list[str]:
        out = [role, f"box{box_of[inner]}"]
        while inner in up:
            inner, role = up[inner]
            out += [role, f"box{box_of[inner]}"]
        return out

    tokens: list[str] = []
    for leaf in sorted(parent):
        for inner, role in parent[leaf]:
            if leaf < n_nums:
                tokens += [_NAMES[leaf % len(_NAMES)], "has", str(values[leaf]), "items"]
            else:
                tokens += ["rate", f"const{leaf - n_nums}"]
            tokens += path(inner, role) + ["."]
    tokens += _QUERIES[raw.root_node.op.family].split()
    return tokens


def _box_ids(raw: ExprTree, norm: ExprTree) -> dict[int, int]:
    """Raw inner id -> normalized inner index, matched by leaf-set and op family."""

    def signature(tree: ExprTree, nid: int):
        node = tree.nodes[nid]
        if node.is_leaf:
            return nid
        kids = sorted([signature(tree, node.left), signature(tree, node.right)], key=repr)
        return (node.op.family, tuple(kids))

    norm_sig = {}
    for node in norm.inner_nodes():
        norm_sig.setdefault(signature(norm, node.id), node.id - norm.leaf_arity)
    return {node.id: norm_sig[signature(raw, node.id)] for node in raw.inner_nodes()}


# --- splits -------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_template_count: int
    seed: int = 0

    def __post_init__(self):
        if self.train_template_count < 1:
            raise ValueError("train_template_count must be >= 1")


def resplit_by_template(records: Sequence[ProblemRecord], spec: SplitSpec):
    """Train on all records of ``train_template_count`` random templates, test on the rest."""
    groups: dict[str, list[ProblemRecord]] = defaultdict(list)
    for record in records:
        if record.gold_tree is None:
            raise ValueError(f"record {record.id} has no gold tree")
        groups[to_template(record.gold_tree)].append(record)
    templates = sorted(groups)
    if len(templates) <= spec.train_template_count:
        if len(templates) < spec.train_template_count:
            log.warning("only %d templates for %d requested; test split is empty",
                        len(templates), spec.train_template_count)
        return list(records), []
    rng = np.random.default_rng(spec.seed)
    chosen = {templates[i] for i in rng.permutation(len(templates))[: spec.train_template_count]}
    train = [r for r in records if to_template(r.gold_tree) in chosen]
    test = [r for r in records if to_template(r.gold_tree) not in chosen]
    return train, test


def random_split(records: Sequence[ProblemRecord], test_fraction: float, seed: int = 0,
                 same_template: bool = False):
    """Seeded random split; ``same_template`` drops test records with templates unseen in train."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(records))
    n_test = int(round(test_fraction * len(records)))
    test = [records[i] for i in sorted(perm[:n_test])]
    train = [records[i] for i in sorted(perm[n_test:])]
    if same_template:
        seen = {to_template(r.gold_tree) for r in train}
        test = [r for r in test if to_template(r.gold_tree) in seen]
    return train, test


def template_counts(records: Iterable[ProblemRecord]) -> Counter:
    return Counter(to_template(r.gold_tree) for r in records if r.gold_tree is not None)

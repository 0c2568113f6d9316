"""Binary expression trees over numbered leaf slots.

A tree is stored as a flat tuple of nodes.  Nodes ``0 .. leaf_arity-1`` are
the leaf slots (numbers first, then constants); inner nodes follow.  Leaves
are shared slots rather than owned children, so a leaf may be referenced by
several inner nodes, or by none.  The inner nodes themselves always form a
tree hanging off ``root``.

Normalized trees assign inner-node ids layer by layer (bottom-up), and within
a layer by ascending ``(left id, right id)``.  Every inner node then has
``left < right``, and its right child sits in the layer directly below it.
"""

from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from fractions import Fraction
from numbers import Rational
from typing import Iterator, Optional, Sequence, Union

Number = Union[int, float, Fraction]


class Operator(enum.Enum):
    """The six ordered operators; member order fixes the classifier output order."""

    ADD = 0
    MUL = 1
    SUB_F = 2
    SUB_R = 3
    DIV_F = 4
    DIV_R = 5

    @property
    def index(self) -> int:
        return self.value

    @property
    def symbol(self) -> str:
        return _SYMBOLS[self]

    @property
    def family(self) -> str:
        """One of ``"+"``, ``"*"``, ``"-"``, ``"/"``."""
        return _SYMBOLS[self][0]

    @property
    def ordered(self) -> bool:
        return self.family in "-/"

    @property
    def reversed(self) -> bool:
        return self in (Operator.SUB_R, Operator.DIV_R)

    def flipped(self) -> "Operator":
        return _FLIP.get(self, self)

    @classmethod
    def from_symbol(cls, symbol: str) -> "Operator":
        for op, sym in _SYMBOLS.items():
            if sym == symbol:
                return op
        raise ValueError(f"unknown operator symbol {symbol!r}")


_SYMBOLS = {
    Operator.ADD: "+",
    Operator.MUL: "*",
    Operator.SUB_F: "-f",
    Operator.SUB_R: "-r",
    Operator.DIV_F: "/f",
    Operator.DIV_R: "/r",
}
_FLIP = {
    Operator.SUB_F: Operator.SUB_R,
    Operator.SUB_R: Operator.SUB_F,
    Operator.DIV_F: Operator.DIV_R,
    Operator.DIV_R: Operator.DIV_F,
}
OPERATORS: tuple[Operator, ...] = tuple(Operator)
TEMPLATE_ALPHABET = frozenset(_SYMBOLS.values()) | {"N"}


@dataclass(frozen=True)
class ExprNode:
    id: int
    layer: int = 0
    op: Optional[Operator] = None
    left: Optional[int] = None
    right: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.op is None


@dataclass(frozen=True)
class ExprTree:
    nodes: tuple[ExprNode, ...]
    root: int
    leaf_arity: int

    def node(self, node_id: int) -> ExprNode:
        return self.nodes[node_id]

    @property
    def root_node(self) -> ExprNode:
        return self.nodes[self.root]

    def inner_nodes(self) -> Iterator[ExprNode]:
        """Inner nodes reachable from the root, children before parents."""
        seen: set[int] = set()
        order: list[ExprNode] = []
        stack = [(self.root, False)]
        while stack:
            nid, expanded = stack.pop()
            node = self.nodes[nid]
            if node.is_leaf or nid in seen:
                continue
            if expanded:
                seen.add(nid)
                order.append(node)
            else:
                stack.append((nid, True))
                stack.append((node.right, False))
                stack.append((node.left, False))
        return iter(order)

    @property
    def op_count(self) -> int:
        return sum(1 for _ in self.inner_nodes())

    @property
    def depth(self) -> int:
        return self.root_node.layer

    def used_leaves(self) -> set[int]:
        if self.root_node.is_leaf:
            return {self.root}
        used = set()
        for node in self.inner_nodes():
            for child in (node.left, node.right):
                if self.nodes[child].is_leaf:
                    used.add(child)
        return used


@dataclass(frozen=True)
class GoldDecomposition:
    """Per-layer ``(left_id, right_id, operator)`` triples of a normalized tree."""

    layers: tuple[tuple[tuple[int, int, Operator], ...], ...]
    root_id: int
    leaf_arity: int

    @property
    def trainable(self) -> bool:
        """False for leaf-only trees, self-pairs and repeated child pairs.

        The decoder never pairs a node with itself and materializes each
        ``(left, right)`` pair at most once, so such trees are unreachable.
        """
        if not self.layers:
            return False
        pairs = [(l, r) for layer in self.layers for l, r, _ in layer]
        return all(l < r for l, r in pairs) and len(set(pairs)) == len(pairs)

    def inner_ids(self) -> list[list[int]]:
        ids, next_id = [], self.leaf_arity
        for layer in self.layers:
            ids.append(list(range(next_id, next_id + len(layer))))
            next_id += len(layer)
        return ids

    def replay(self) -> ExprTree:
        nodes = [ExprNode(i) for i in range(self.leaf_arity)]
        for layer in self.layers:
            for left, right, op in layer:
                depth = 1 + max(nodes[left].layer, nodes[right].layer)
                nodes.append(ExprNode(len(nodes), depth, op, left, right))
        return ExprTree(tuple(nodes), self.root_id, self.leaf_arity)


class EquationSyntaxError(ValueError):
    pass


_TOKEN_RE = re.compile(r"\s*(?:(?P<leaf>[nc]\d+)|(?P<op>[-+*/×÷−])|(?P<paren>[()]))")
_OP_ALIASES = {"+": "+", "-": "-", "−": "-", "*": "*", "×": "*", "/": "/", "÷": "/"}


def _tokenize(text: str) -> list[str]:
    tokens, pos = [], 0
    text = text.strip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            raise EquationSyntaxError(f"unknown token at {pos} in {text!r}")
        tokens.append(m.group("leaf") or _OP_ALIASES.get(m.group("op"), None) or m.group("paren"))
        pos = m.end()
        while pos < len(text) and text[pos].isspace():
            pos += 1
    return tokens


def parse_equation(equation_text: str, leaf_arity: int, n_numbers: Optional[int] = None) -> ExprTree:
    """Parse an infix equation over ``n0..``/``c0..`` into an un-normalized tree.

    ``c<j>`` maps to leaf slot ``n_numbers + j``; ``n_numbers`` defaults to
    ``leaf_arity`` minus the number of constants, so pass it whenever the
    equation uses constants.  A leading ``x=`` is stripped.
    """
    text = equation_text.strip()
    text = re.sub(r"^\s*x\s*=", "", text)
    tokens = _tokenize(text)
    if not tokens:
        raise EquationSyntaxError("empty equation")
    if n_numbers is None:
        n_numbers = leaf_arity
    nodes = [ExprNode(i) for i in range(leaf_arity)]
    pos = 0

    def peek() -> Optional[str]:
        return tokens[pos] if pos < len(tokens) else None

    def take() -> str:
        nonlocal pos
        tok = tokens[pos]
        pos += 1
        return tok

    def make(op_sym: str, left: int, right: int) -> int:
        op = {"+": Operator.ADD, "*": Operator.MUL, "-": Operator.SUB_F, "/": Operator.DIV_F}[op_sym]
        layer = 1 + max(nodes[left].layer, nodes[right].layer)
        nodes.append(ExprNode(len(nodes), layer, op, left, right))
        return len(nodes) - 1

    def atom() -> int:
        tok = peek()
        if tok is None:
            raise EquationSyntaxError(f"unexpected end of {equation_text!r}")
        if tok == "(":
            take()
            inner = expr()
            if peek() != ")":
                raise EquationSyntaxError(f"unbalanced parentheses in {equation_text!r}")
            take()
            return inner
        if tok[0] in "nc":
            take()
            idx = int(tok[1:]) + (n_numbers if tok[0] == "c" else 0)
            if tok[0] == "n" and idx >= n_numbers or idx >= leaf_arity:
                raise EquationSyntaxError(f"operand {tok} out of range (arity {leaf_arity})")
            return idx
        raise EquationSyntaxError(f"unexpected token {tok!r} in {equation_text!r}")

    def term() -> int:
        left = atom()
        while peek() in ("*", "/"):
            left = make(take(), left, atom())
        return left

    def expr() -> int:
        left = term()
        while peek() in ("+", "-"):
            left = make(take(), left, term())
        return left

    root = expr()
    if pos != len(tokens):
        raise EquationSyntaxError(f"trailing tokens {tokens[pos:]} in {equation_text!r}")
    return ExprTree(tuple(nodes), root, leaf_arity)


def normalize(tree: ExprTree) -> ExprTree:
    """Reassign inner ids bottom-up and put the smaller id on the left.

    Swapping the operands of a SUB/DIV node flips its order tag, so the
    value is unchanged.  Unreachable inner nodes are dropped.
    """
    if tree.root_node.is_leaf:
        leaves = tuple(ExprNode(i) for i in range(tree.leaf_arity))
        return ExprTree(leaves, tree.root, tree.leaf_arity)

    by_layer: dict[int, list[ExprNode]] = {}
    for node in tree.inner_nodes():
        by_layer.setdefault(node.layer, []).append(node)

    new_id = {i: i for i in range(tree.leaf_arity)}
    out = [ExprNode(i) for i in range(tree.leaf_arity)]
    for layer in sorted(by_layer):
        keyed = []
        for node in by_layer[layer]:
            a, b = new_id[node.left], new_id[node.right]
            op = node.op
            if a > b:
                a, b = b, a
                op = op.flipped()
            keyed.append(((a, b, op.index, node.id), node.id, op))
        keyed.sort(key=lambda item: item[0])
        for (a, b, _, _), old_id, op in keyed:
            new_id[old_id] = len(out)
            depth = 1 + max(out[a].layer, out[b].layer)
            out.append(ExprNode(len(out), depth, op, a, b))
    return ExprTree(tuple(out), new_id[tree.root], tree.leaf_arity)


def _is_rational(value) -> bool:
    return isinstance(value, Rational) and not isinstance(value, bool)


def evaluate(tree: ExprTree, leaf_values: Sequence[Number]) -> Optional[Number]:
    """Evaluate the tree; returns None on division by an exact zero.

    Arithmetic is exact (Fraction) when every used leaf is rational,
    float64 otherwise.
    """
    if len(leaf_values) != tree.leaf_arity:
        raise ValueError(f"expected {tree.leaf_arity} leaf values, got {len(leaf_values)}")
    used = tree.used_leaves()
    exact = all(_is_rational(leaf_values[i]) for i in used)
    values: dict[int, Number] = {}
    for i in used:
        v = leaf_values[i]
        values[i] = Fraction(v) if exact else float(v)
    if tree.root_node.is_leaf:
        return values[tree.root]
    for node in tree.inner_nodes():
        a, b = values[node.left], values[node.right]
        if node.op.reversed:
            a, b = b, a
        family = node.op.family
        if family == "+":
            out = a + b
        elif family == "*":
            out = a * b
        elif family == "-":
            out = a - b
        else:
            if b == 0:
                return None
            out = a / b
        if not exact and not math.isfinite(out):
            return None
        values[node.id] = out
    return values[tree.root]


def to_template(tree: ExprTree) -> str:
    """Prefix form with every leaf masked as ``N``."""
    out: list[str] = []
    stack = [tree.root]
    while stack:
        node = tree.nodes[stack.pop()]
        if node.is_leaf:
            out.append("N")
        else:
            out.append(node.op.symbol)
            stack.append(node.right)
            stack.append(node.left)
    return " ".join(out)


def decompose_gold(tree: ExprTree) -> GoldDecomposition:
    layers: dict[int, list[tuple[int, int, Operator]]] = {}
    for node in sorted(tree.inner_nodes(), key=lambda n: n.id):
        layers.setdefault(node.layer, []).append((node.left, node.right, node.op))
    ordered = tuple(tuple(layers[k]) for k in sorted(layers))
    return GoldDecomposition(ordered, tree.root, tree.leaf_arity)


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def leaf_names(n_numbers: int, leaf_arity: int) -> list[str]:
    return [f"n{i}" for i in range(n_numbers)] + [f"c{j}" for j in range(leaf_arity - n_numbers)]


def to_infix(tree: ExprTree, names: Optional[Sequence[str]] = None) -> str:
    """Render in true calculation order; parses back to the same normalized tree."""
    if names is None:
        names = leaf_names(tree.leaf_arity, tree.leaf_arity)

    def render(nid: int) -> tuple[str, int]:
        node = tree.nodes[nid]
        if node.is_leaf:
            return str(names[nid]), 3
        a, b = node.left, node.right
        if node.op.reversed:
            a, b = b, a
        fam = node.op.family
        prec = _PREC[fam]
        ls, lp = render(a)
        rs, rp = render(b)
        if lp < prec:
            ls = f"({ls})"
        if rp <= prec:
            rs = f"({rs})"
        return f"{ls}{fam}{rs}", prec

    return render(tree.root)[0]


def render_tree(tree: ExprTree, names: Optional[Sequence[str]] = None) -> str:
    """Indented multi-line drawing, one node per line."""
    if names is None:
        names = leaf_names(tree.leaf_arity, tree.leaf_arity)
    lines: list[str] = []

    def walk(nid: int, indent: str) -> None:
        node = tree.nodes[nid]
        if node.is_leaf:
            lines.append(f"{indent}{names[nid]}")
            return
        lines.append(f"{indent}{node.op.symbol}  [id {nid}, L{node.layer}]")
        walk(node.left, indent + "  ")
        walk(node.right, indent + "  ")

    walk(tree.root, "")
    return "\n".join(lines)


def make_tree(leaf_arity: int, spec) -> ExprTree:
    """Build a tree from a nested ``(op, left, right)`` / leaf-index literal.

    Handy for tests and generators; the result is not normalized.
    """
    nodes = [ExprNode(i) for i in range(leaf_arity)]

    def build(item) -> int:
        if isinstance(item, int):
            if not 0 <= item < leaf_arity:
                raise ValueError(f"leaf {item} out of range")
            return item
        op, left, right = item
        li, ri = build(left), build(right)
        nodes.append(ExprNode(len(nodes), 1 + max(nodes[li].layer, nodes[ri].layer), op, li, ri))
        return len(nodes) - 1

    root = build(spec)
    return ExprTree(tuple(nodes), root, leaf_arity)

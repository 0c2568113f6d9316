from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bottomup_mwp.exprtree import (
    OPERATORS,
    EquationSyntaxError,
    ExprNode,
    ExprTree,
    Operator,
    decompose_gold,
    evaluate,
    make_tree,
    normalize,
    parse_equation,
    render_tree,
    to_infix,
    to_template,
)

ADD, MUL, SUB_F, SUB_R, DIV_F, DIV_R = OPERATORS


def shape(tree: ExprTree, nid=None):
    """Nested (op, left, right) literal for structural comparison."""
    nid = tree.root if nid is None else nid
    node = tree.nodes[nid]
    if node.is_leaf:
        return nid
    return (node.op, shape(tree, node.left), shape(tree, node.right))


def python_value(equation: str, values: dict) -> Fraction:
    """Independent oracle: Python's own arithmetic over Fractions."""
    expr = equation.replace("x=", "")
    return eval(expr, {}, {k: Fraction(v) for k, v in values.items()})


class TestOperator:
    def test_six_members_in_classifier_order(self):
        assert [op.symbol for op in OPERATORS] == ["+", "*", "-f", "-r", "/f", "/r"]

    def test_flip_only_ordered(self):
        assert ADD.flipped() is ADD and MUL.flipped() is MUL
        assert SUB_F.flipped() is SUB_R and DIV_R.flipped() is DIV_F


class TestParse:
    def test_precedence(self):
        assert shape(parse_equation("(n0+n1)*n2", 3)) == (MUL, (ADD, 0, 1), 2)
        assert shape(parse_equation("n0+n1*n2", 3)) == (ADD, 0, (MUL, 1, 2))

    def test_no_reordering_at_parse(self):
        assert shape(parse_equation("n1-n0", 2)) == (SUB_F, 1, 0)

    def test_percentage_change_shape(self):
        # (99-76)/76/100 with 76 -> n0, 99 -> n1, 100 -> c0
        tree = parse_equation("(n1-n0)/n0/c0", 3, n_numbers=2)
        assert shape(tree) == (DIV_F, (DIV_F, (SUB_F, 1, 0), 0), 2)

    def test_left_associative_and_prefix(self):
        assert shape(parse_equation("x = n0-n1-n2", 3)) == (SUB_F, (SUB_F, 0, 1), 2)

    def test_unicode_operators(self):
        assert shape(parse_equation("n0×n1÷n2−n0", 3)) == (SUB_F, (DIV_F, (MUL, 0, 1), 2), 0)

    @pytest.mark.parametrize("bad", ["(n0+n1", "n0+", "n0 $ n1", "n0 n1", ""])
    def test_syntax_errors(self, bad):
        with pytest.raises(EquationSyntaxError):
            parse_equation(bad, 2)

    def test_operand_out_of_range(self):
        with pytest.raises(EquationSyntaxError):
            parse_equation("n0+n2", 2)
        with pytest.raises(EquationSyntaxError):
            parse_equation("n0+c1", 2, n_numbers=1)


class TestNormalize:
    def test_sub_swap_flips_tag(self):
        tree = normalize(parse_equation("n1-n0", 2))
        root = tree.root_node
        assert (root.op, root.left, root.right) == (SUB_R, 0, 1)

    def test_commutative_no_tag(self):
        root = normalize(parse_equation("n1+n0", 2)).root_node
        assert (root.op, root.left, root.right) == (ADD, 0, 1)

    def test_inner_node_goes_right(self):
        raw = parse_equation("n2/(n0+n1)", 3)
        tree = normalize(raw)
        root = tree.root_node
        assert root.op is DIV_F and root.left == 2 and root.right == 3
        assert tree.nodes[3].op is ADD
        values = {"n0": 4, "n1": 6, "n2": 5}
        assert evaluate(tree, [4, 6, 5]) == python_value("n2/(n0+n1)", values) == Fraction(1, 2)

    def test_ids_layer_ordered(self):
        # (n0+n1)-(n2*n3) then divided by n4: layer-1 nodes first, ascending by children
        tree = normalize(parse_equation("n4/((n2*n3)-(n0+n1))", 5))
        inner = [tree.nodes[i] for i in range(5, len(tree.nodes))]
        assert [(n.op, n.left, n.right, n.layer) for n in inner] == [
            (ADD, 0, 1, 1), (MUL, 2, 3, 1), (SUB_R, 5, 6, 2), (DIV_F, 4, 7, 3)]

    def test_right_child_in_previous_layer(self):
        tree = normalize(parse_equation("((n0+n1)*n2)+(n3-n4)", 5))
        for node in tree.inner_nodes():
            assert tree.nodes[node.right].layer == node.layer - 1
            assert node.left < node.right

    def test_leaf_root(self):
        tree = normalize(parse_equation("x=n0", 1))
        assert tree.root == 0 and evaluate(tree, [3]) == 3


class TestEvaluate:
    def test_reverse_sub(self):
        tree = make_tree(2, (SUB_R, 0, 1))
        assert evaluate(tree, [3, 10]) == 7

    def test_add(self):
        assert evaluate(make_tree(2, (ADD, 0, 1)), [2, 3]) == 5

    def test_percentage_change_value(self):
        tree = normalize(parse_equation("(n1-n0)/n0", 2))
        value = evaluate(tree, [76, 99])
        assert value == Fraction(23, 76)
        assert float(value) == pytest.approx(0.3026315789, rel=1e-9)

    def test_division_by_zero_signals(self):
        assert evaluate(parse_equation("n0/(n1-n1)", 2), [1, 5]) is None
        assert evaluate(parse_equation("n0/(n1-n1)", 2), [1.5, 5.0]) is None

    def test_exact_vs_float_mode(self):
        tree = parse_equation("n0/n1", 2)
        assert isinstance(evaluate(tree, [1, 3]), Fraction)
        assert isinstance(evaluate(tree, [1.0, 3]), float)

    def test_unused_irrational_leaf_keeps_exact_mode(self):
        tree = parse_equation("n0/n1", 3)
        assert evaluate(tree, [1, 3, 3.14159]) == Fraction(1, 3)

    def test_arity_mismatch(self):
        with pytest.raises(ValueError):
            evaluate(parse_equation("n0+n1", 2), [1])


class TestTemplate:
    def test_prefix(self):
        assert to_template(normalize(parse_equation("(n0+n1)*n2", 3))) == "* N + N N"

    def test_masking(self):
        a = normalize(parse_equation("(n0+n1)*n2", 3))
        b = normalize(parse_equation("(n1+n2)*n0", 3))
        assert to_template(a) == to_template(b)

    def test_tag_in_template(self):
        assert to_template(make_tree(2, (SUB_R, 0, 1))) == "-r N N"


class TestDecompose:
    def test_balanced(self):
        tree = normalize(parse_equation("(n0+n1)*(n2+n3)", 4))
        dec = decompose_gold(tree)
        assert dec.layers == (((0, 1, ADD), (2, 3, ADD)), ((4, 5, MUL),))
        assert dec.root_id == 6 and tree.root_node.op is MUL

    def test_layer_rule(self):
        dec = decompose_gold(normalize(parse_equation("(n0+n1)*n2", 3)))
        assert dec.layers == (((0, 1, ADD),), ((2, 3, MUL),))

    def test_single_op(self):
        dec = decompose_gold(normalize(parse_equation("n0+n1", 2)))
        assert len(dec.layers) == 1 and dec.root_id == 2 and dec.trainable

    def test_leaf_only_untrainable(self):
        dec = decompose_gold(normalize(parse_equation("n0", 1)))
        assert dec.layers == () and not dec.trainable

    def test_self_pair_and_repeat_untrainable(self):
        assert not decompose_gold(normalize(parse_equation("n0*n0", 1))).trainable
        assert not decompose_gold(normalize(parse_equation("(n0+n1)*(n0-n1)", 2))).trainable


def test_infix_round_trip_and_render():
    tree = normalize(parse_equation("n4/((n2*n3)-(n0+n1))", 5))
    assert normalize(parse_equation(to_infix(tree), 5)) == tree
    assert "/f" in render_tree(tree)


# --- properties ---------------------------------------------------------------

ARITY = 5


def tree_specs(max_leaves=6):
    leaf = st.integers(0, ARITY - 1)
    return st.recursive(
        leaf,
        lambda kids: st.tuples(st.sampled_from(OPERATORS), kids, kids),
        max_leaves=max_leaves,
    )


leaf_values = st.lists(st.fractions(min_value=-50, max_value=50, max_denominator=12),
                       min_size=ARITY, max_size=ARITY)


@settings(max_examples=300, deadline=None)
@given(tree_specs(), leaf_values)
def test_normalize_preserves_value_exactly(spec, values):
    tree = make_tree(ARITY, spec)
    assert evaluate(normalize(tree), values) == evaluate(tree, values)


@settings(max_examples=300, deadline=None)
@given(tree_specs(), st.lists(st.floats(-1e3, 1e3), min_size=ARITY, max_size=ARITY))
def test_normalize_preserves_value_float(spec, values):
    tree = make_tree(ARITY, spec)
    a, b = evaluate(tree, values), evaluate(normalize(tree), values)
    if a is None or b is None:
        assert a is None and b is None
    else:
        assert b == pytest.approx(a, rel=1e-12, abs=1e-9)


@settings(max_examples=300, deadline=None)
@given(tree_specs())
def test_normalize_idempotent(spec):
    once = normalize(make_tree(ARITY, spec))
    assert normalize(once) == once


@settings(max_examples=200, deadline=None)
@given(tree_specs(), leaf_values)
def test_decomposition_replays(spec, values):
    tree = normalize(make_tree(ARITY, spec))
    if tree.root_node.is_leaf:
        return
    replayed = decompose_gold(tree).replay()
    assert to_template(replayed) == to_template(tree)
    assert evaluate(replayed, values) == evaluate(tree, values)
    assert replayed.root == tree.root
    assert shape(replayed) == shape(tree)


@settings(max_examples=200, deadline=None)
@given(st.fractions(-20, 20), st.fractions(-20, 20))
def test_operator_tag_duality(a, b):
    for fwd, rev in ((SUB_F, SUB_R), (DIV_F, DIV_R)):
        lhs = evaluate(make_tree(2, (rev, 0, 1)), [a, b])
        rhs = evaluate(make_tree(2, (fwd, 1, 0)), [a, b])
        assert lhs == rhs


def test_exprnode_invariants_on_parse():
    tree = parse_equation("(n0+n1)*(n2-n0)", 3)
    for node in tree.inner_nodes():
        assert node.layer == 1 + max(tree.nodes[node.left].layer, tree.nodes[node.right].layer)
    assert isinstance(tree.nodes[0], ExprNode) and tree.nodes[0].layer == 0
    assert tree.op_count == 3 and tree.depth == 2

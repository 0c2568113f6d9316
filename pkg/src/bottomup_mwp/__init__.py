"""Bottom-up math word problem solver: layered pair combination over number leaves."""

from .exprtree import OPERATORS, ExprTree, Operator, evaluate, normalize, parse_equation, to_template

__all__ = ["OPERATORS", "ExprTree", "Operator", "evaluate", "normalize", "parse_equation", "to_template"]
__version__ = "0.1.0"

from __future__ import annotations

import ast
import operator
from typing import Callable
from typing import Dict
from typing import Sequence
from typing import Type

import numpy as np

from ddbounds.utils._types import ScalarFunction
from ddbounds.utils._types import VectorFunction

_BINARY_OPS: Dict[Type[ast.operator], Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNARY_OPS: Dict[Type[ast.unaryop], Callable[[np.ndarray], np.ndarray]] = {
    ast.USub: operator.neg,
    ast.UAdd: operator.pos,
}
_VARIABLES = ("x", "y")


def _evaluate(node: ast.AST, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if isinstance(node, ast.Expression):
        return _evaluate(node.body, x, y)
    if isinstance(node, ast.Constant):
        return np.asarray(float(node.value))
    if isinstance(node, ast.Name):
        return x if node.id == "x" else y
    if isinstance(node, ast.BinOp):
        return _BINARY_OPS[type(node.op)](_evaluate(node.left, x, y), _evaluate(node.right, x, y))
    if isinstance(node, ast.UnaryOp):
        return _UNARY_OPS[type(node.op)](_evaluate(node.operand, x, y))
    msg = f"Unsupported expression node {type(node).__name__}"  # pragma: no cover
    raise ValueError(msg)  # pragma: no cover


def _validate(tree: ast.AST, text: str) -> None:
    for node in ast.walk(tree):
        if isinstance(node, (ast.Expression, ast.Load)) or type(node) in _BINARY_OPS or type(node) in _UNARY_OPS:
            continue
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) and not isinstance(node.value, bool):
            continue
        if isinstance(node, ast.Name) and node.id in _VARIABLES:
            continue
        if isinstance(node, (ast.BinOp, ast.UnaryOp)):
            continue
        msg = f"Invalid token `{ast.dump(node)}` in expression {text!r}. Only numbers, x, y, + - * / ^ are allowed."
        raise ValueError(msg)


def compile_expression(text: str) -> ScalarFunction:
    """Compiles an arithmetic expression over `x` and `y` into a vectorized callable.

    The grammar accepts numbers, the variables `x` and `y`, parentheses, unary signs and the binary operators
    `+`, `-`, `*`, `/` and `^` (power, also accepted as `**`).

    Arguments:
        text: The expression, e.g. `"2*x^2 - y"`.

    Returns:
        A function of `(x, y)` evaluating the expression elementwise, with the output broadcast to `x.shape`.

    Raises:
        ValueError: If the expression does not parse or uses anything outside the grammar.

    Examples:
        ```python
        import numpy as np
        from ddbounds.utils._expr import compile_expression

        fn = compile_expression("x^2 - 3*y")
        fn(np.array([1.0, 2.0]), np.array([0.0, 1.0]))  # array([1., 1.])
        ```
    """
    try:
        tree = ast.parse(text.replace("^", "**"), mode="eval")
    except SyntaxError as exc:
        msg = f"Cannot parse expression {text!r}: {exc.msg}"
        raise ValueError(msg) from exc

    _validate(tree, text)

    def _fn(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x_, y_ = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        return np.broadcast_to(_evaluate(tree, x_, y_), x_.shape).astype(float)

    return _fn


def compile_vector_expression(texts: Sequence[str]) -> VectorFunction:
    """Compiles a pair of expressions into a vector valued function returning shape `(2, *x.shape)`."""
    if len(texts) != 2:  # noqa: PLR2004
        msg = f"A vector expression needs exactly two components. Found {len(texts)}"
        raise ValueError(msg)

    fx, fy = (compile_expression(t) for t in texts)

    def _fn(x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return np.stack([fx(x, y), fy(x, y)])

    return _fn

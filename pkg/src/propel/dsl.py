"""Programmatic policy DSL: PID library calls behind boolean guards.

Grammar (concrete syntax; NUMBER is a decimal literal with optional sign
handled at the call sites shown, IDENT is a sensor name resolved through an
explicit mapping):

    program   := expr
    expr      := 'if' bool 'then' expr 'else' expr | sum
    sum       := product ('+' product)*
    product   := NUMBER ['*' product] | primary
    primary   := '(' expr ')' | pid | vector
    vector    := '[' NUMBER (',' NUMBER)* ']'
    pid       := 'PID' '<' sensor ',' NUMBER ',' NUMBER ',' NUMBER ',' NUMBER '>' ['@' INT]
    bool      := conj ('or' conj)*
    conj      := unary ('and' unary)*
    unary     := 'not' unary | '(' bool ')' | pred
    pred      := 's' '[' sensor ']' ('<' | '>') NUMBER
    sensor    := INT | IDENT

A bare NUMBER is a one-dimensional constant action; `f * x` scales a
sub-program by the constant f; `a + b` adds sub-programs pointwise.
`PID<j, c, kp, ki, kd>` runs a PID controller driving sensor j toward
target c; the optional `@d` routes its output to action component d
(omitted when d = 0). Conditions read the newest window entry only.

PID semantics over a window w with samples w[0..k-1] (oldest first) and
control period dt, with errors e_t = c - w[t][j]:

    out = kp * e[k-1]  +  ki * dt * sum_t e[t]  +  kd * (e[k-1] - e[k-2]) / dt

ASTs are immutable and compare structurally, so parse(print(ast)) == ast.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

from .policies import ObservationWindow, Policy

# -- AST -----------------------------------------------------------------


@dataclass(frozen=True)
class AtomicPredicate:
    sensor: int
    op: str  # '<' or '>'
    threshold: float

    def __post_init__(self):
        assert self.op in ("<", ">"), f"bad comparator {self.op!r}"
        assert self.sensor >= 0


@dataclass(frozen=True)
class And:
    terms: tuple

    def __post_init__(self):
        assert len(self.terms) >= 2


@dataclass(frozen=True)
class Or:
    terms: tuple

    def __post_init__(self):
        assert len(self.terms) >= 2


@dataclass(frozen=True)
class Not:
    term: object


BoolExpr = (AtomicPredicate, And, Or, Not)


@dataclass(frozen=True)
class PidConfig:
    sensor: int
    target: float
    kp: float
    ki: float
    kd: float
    output_index: int = 0

    def __post_init__(self):
        assert self.sensor >= 0 and self.output_index >= 0


@dataclass(frozen=True)
class ConstAction:
    values: tuple  # one float per action component

    def __post_init__(self):
        assert len(self.values) >= 1


@dataclass(frozen=True)
class Combine:
    op: str  # 'add' or 'scale'
    factor: float | None
    children: tuple

    def __post_init__(self):
        assert self.op in ("add", "scale"), f"bad combine op {self.op!r}"
        if self.op == "add":
            assert self.factor is None and len(self.children) >= 2
        else:
            assert self.factor is not None and len(self.children) == 1


@dataclass(frozen=True)
class IfThenElse:
    cond: object
    then: object
    other: object


@dataclass(frozen=True)
class LibCall:
    pid: PidConfig


ProgramAST = (ConstAction, Combine, IfThenElse, LibCall)


class DslTypeError(Exception):
    pass


def typecheck(ast, obs_dim: int, action_dim: int) -> None:
    """Validate sensor ranges, action dimensions, and parameter finiteness."""

    def check_bool(b):
        if isinstance(b, AtomicPredicate):
            if b.sensor >= obs_dim:
                raise DslTypeError(
                    f"predicate sensor {b.sensor} out of range for obs_dim {obs_dim}"
                )
            if not np.isfinite(b.threshold):
                raise DslTypeError("non-finite predicate threshold")
        elif isinstance(b, (And, Or)):
            for t in b.terms:
                check_bool(t)
        elif isinstance(b, Not):
            check_bool(b.term)
        else:
            raise DslTypeError(f"not a boolean expression: {b!r}")

    def check(node):
        if isinstance(node, ConstAction):
            if len(node.values) != action_dim:
                raise DslTypeError(
                    f"constant action has {len(node.values)} components, "
                    f"expected {action_dim}"
                )
            if not all(np.isfinite(v) for v in node.values):
                raise DslTypeError("non-finite constant action")
        elif isinstance(node, Combine):
            if node.op == "scale" and not np.isfinite(node.factor):
                raise DslTypeError("non-finite scale factor")
            for c in node.children:
                check(c)
        elif isinstance(node, IfThenElse):
            check_bool(node.cond)
            check(node.then)
            check(node.other)
        elif isinstance(node, LibCall):
            p = node.pid
            if p.sensor >= obs_dim:
                raise DslTypeError(
                    f"PID sensor {p.sensor} out of range for obs_dim {obs_dim}"
                )
            if p.output_index >= action_dim:
                raise DslTypeError(
                    f"PID output index {p.output_index} out of range for "
                    f"action_dim {action_dim}"
                )
            if not all(np.isfinite(v) for v in (p.target, p.kp, p.ki, p.kd)):
                raise DslTypeError("non-finite PID parameter")
        else:
            raise DslTypeError(f"not a program node: {node!r}")

    check(ast)


def program_depth(ast) -> int:
    """Conditional nesting depth: constants and calls are depth 0."""
    if isinstance(ast, IfThenElse):
        return 1 + max(program_depth(ast.then), program_depth(ast.other))
    if isinstance(ast, Combine):
        return max(program_depth(c) for c in ast.children)
    return 0


# -- evaluation -----------------------------------------------------------


def pid_response(cfg: PidConfig, window: ObservationWindow) -> float:
    x = window.samples[:, cfg.sensor]
    e_last = cfg.target - x[-1]
    e_prev = cfg.target - x[-2]
    e_sum = cfg.target * len(x) - float(np.sum(x))
    return (
        cfg.kp * e_last
        + cfg.ki * window.dt * e_sum
        + cfg.kd * (e_last - e_prev) / window.dt
    )


def eval_bool(cond, obs: np.ndarray) -> bool:
    if isinstance(cond, AtomicPredicate):
        v = obs[cond.sensor]
        return bool(v < cond.threshold) if cond.op == "<" else bool(v > cond.threshold)
    if isinstance(cond, And):
        return all(eval_bool(t, obs) for t in cond.terms)
    if isinstance(cond, Or):
        return any(eval_bool(t, obs) for t in cond.terms)
    if isinstance(cond, Not):
        return not eval_bool(cond.term, obs)
    raise TypeError(f"not a boolean expression: {cond!r}")


def eval_program(ast, window: ObservationWindow, action_dim: int) -> np.ndarray:
    """Pure evaluation of a program on one window."""
    if isinstance(ast, ConstAction):
        return np.array(ast.values, dtype=np.float64)
    if isinstance(ast, Combine):
        if ast.op == "add":
            out = eval_program(ast.children[0], window, action_dim)
            for c in ast.children[1:]:
                out = out + eval_program(c, window, action_dim)
            return out
        return ast.factor * eval_program(ast.children[0], window, action_dim)
    if isinstance(ast, IfThenElse):
        branch = ast.then if eval_bool(ast.cond, window.newest) else ast.other
        return eval_program(branch, window, action_dim)
    if isinstance(ast, LibCall):
        out = np.zeros(action_dim)
        out[ast.pid.output_index] = pid_response(ast.pid, window)
        return out
    raise TypeError(f"not a program node: {ast!r}")


def pid_response_batch(cfg: PidConfig, samples: np.ndarray, dt: float) -> np.ndarray:
    x = samples[:, :, cfg.sensor]
    e_last = cfg.target - x[:, -1]
    e_prev = cfg.target - x[:, -2]
    e_sum = cfg.target * x.shape[1] - x.sum(axis=1)
    return cfg.kp * e_last + cfg.ki * dt * e_sum + cfg.kd * (e_last - e_prev) / dt


def eval_bool_batch(cond, obs: np.ndarray) -> np.ndarray:
    if isinstance(cond, AtomicPredicate):
        col = obs[:, cond.sensor]
        return col < cond.threshold if cond.op == "<" else col > cond.threshold
    if isinstance(cond, And):
        out = eval_bool_batch(cond.terms[0], obs)
        for t in cond.terms[1:]:
            out = out & eval_bool_batch(t, obs)
        return out
    if isinstance(cond, Or):
        out = eval_bool_batch(cond.terms[0], obs)
        for t in cond.terms[1:]:
            out = out | eval_bool_batch(t, obs)
        return out
    if isinstance(cond, Not):
        return ~eval_bool_batch(cond.term, obs)
    raise TypeError(f"not a boolean expression: {cond!r}")


def eval_program_batch(
    ast, samples: np.ndarray, dt: float, action_dim: int
) -> np.ndarray:
    """Vectorized evaluation over stacked windows (n, k, obs_dim)."""
    n = samples.shape[0]
    if isinstance(ast, ConstAction):
        return np.tile(np.array(ast.values, dtype=np.float64), (n, 1))
    if isinstance(ast, Combine):
        if ast.op == "add":
            out = eval_program_batch(ast.children[0], samples, dt, action_dim)
            for c in ast.children[1:]:
                out = out + eval_program_batch(c, samples, dt, action_dim)
            return out
        return ast.factor * eval_program_batch(ast.children[0], samples, dt, action_dim)
    if isinstance(ast, IfThenElse):
        mask = eval_bool_batch(ast.cond, samples[:, -1, :])
        a = eval_program_batch(ast.then, samples, dt, action_dim)
        b = eval_program_batch(ast.other, samples, dt, action_dim)
        return np.where(mask[:, None], a, b)
    if isinstance(ast, LibCall):
        out = np.zeros((n, action_dim))
        out[:, ast.pid.output_index] = pid_response_batch(ast.pid, samples, dt)
        return out
    raise TypeError(f"not a program node: {ast!r}")


class ProgramPolicy(Policy):
    """Policy handle around a typechecked program."""

    def __init__(self, ast, env_spec):
        typecheck(ast, env_spec.obs_dim, env_spec.action_dim)
        self.ast = ast
        self.action_dim = env_spec.action_dim

    def act(self, window: ObservationWindow) -> np.ndarray:
        return eval_program(self.ast, window, self.action_dim)

    def act_batch(self, samples: np.ndarray, dt: float) -> np.ndarray:
        return eval_program_batch(self.ast, samples, dt, self.action_dim)


# -- printer ---------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def _print_bool(b, parent=None) -> str:
    if isinstance(b, AtomicPredicate):
        return f"s[{b.sensor}] {b.op} {_fmt(b.threshold)}"
    if isinstance(b, Not):
        inner = _print_bool(b.term)
        if isinstance(b.term, (And, Or)):
            inner = f"({inner})"
        return f"not {inner}"
    if isinstance(b, And):
        parts = [
            f"({_print_bool(t)})" if isinstance(t, (And, Or)) else _print_bool(t)
            for t in b.terms
        ]
        return " and ".join(parts)
    if isinstance(b, Or):
        # 'and' binds tighter, so And children round-trip without parens
        parts = [
            f"({_print_bool(t)})" if isinstance(t, Or) else _print_bool(t)
            for t in b.terms
        ]
        return " or ".join(parts)
    raise TypeError(f"not a boolean expression: {b!r}")


def print_program(ast) -> str:
    """Canonical text form; parse(print_program(ast)) == ast."""
    if isinstance(ast, ConstAction):
        if len(ast.values) == 1:
            return _fmt(ast.values[0])
        return "[" + ", ".join(_fmt(v) for v in ast.values) + "]"
    if isinstance(ast, LibCall):
        p = ast.pid
        core = (
            f"PID<{p.sensor}, {_fmt(p.target)}, {_fmt(p.kp)}, "
            f"{_fmt(p.ki)}, {_fmt(p.kd)}>"
        )
        return core if p.output_index == 0 else f"{core}@{p.output_index}"
    if isinstance(ast, IfThenElse):
        return (
            f"if ({_print_bool(ast.cond)}) then {print_program(ast.then)} "
            f"else {print_program(ast.other)}"
        )
    if isinstance(ast, Combine):
        if ast.op == "scale":
            child = ast.children[0]
            body = print_program(child)
            if isinstance(child, (IfThenElse,)) or (
                isinstance(child, Combine) and child.op == "add"
            ):
                body = f"({body})"
            return f"{_fmt(ast.factor)} * {body}"
        parts = []
        for c in ast.children:
            body = print_program(c)
            if isinstance(c, IfThenElse) or (
                isinstance(c, Combine) and c.op == "add"
            ):
                body = f"({body})"
            parts.append(body)
        return " + ".join(parts)
    raise TypeError(f"not a program node: {ast!r}")


# -- parser -----------------------------------------------------------------


class ParseError(Exception):
    def __init__(self, message, line, col):
        super().__init__(f"{message} (line {line}, column {col})")
        self.line = line
        self.col = col


_TOKEN_RE = re.compile(
    r"(?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<sym>[()\[\]<>,+*@-])"
)

_KEYWORDS = {"if", "then", "else", "and", "or", "not", "s", "PID"}


@dataclass(frozen=True)
class _Token:
    kind: str  # 'number', 'ident', 'sym', 'end'
    text: str
    line: int
    col: int


def _line_col(text: str, pos: int) -> tuple[int, int]:
    line = text.count("\n", 0, pos) + 1
    col = pos - text.rfind("\n", 0, pos)
    return line, col


def _tokenize(text: str) -> list[_Token]:
    tokens = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            break
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ParseError(f"unexpected character {text[pos]!r}", *_line_col(text, pos))
        tokens.append(_Token(m.lastgroup, m.group(), *_line_col(text, pos)))
        pos = m.end()
    tokens.append(_Token("end", "", *_line_col(text, len(text))))
    return tokens


class _Parser:
    def __init__(self, tokens, sensor_names):
        self.tokens = tokens
        self.i = 0
        self.sensor_names = sensor_names or {}

    def peek(self) -> _Token:
        return self.tokens[self.i]

    def advance(self) -> _Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, expected: str):
        tok = self.peek()
        found = repr(tok.text) if tok.kind != "end" else "end of input"
        raise ParseError(f"expected {expected}, found {found}", tok.line, tok.col)

    def expect_sym(self, sym: str) -> _Token:
        tok = self.peek()
        if tok.kind != "sym" or tok.text != sym:
            self.error(f"{sym!r}")
        return self.advance()

    def expect_kw(self, kw: str) -> _Token:
        tok = self.peek()
        if tok.kind != "ident" or tok.text != kw:
            self.error(f"keyword {kw!r}")
        return self.advance()

    def at_kw(self, kw: str) -> bool:
        tok = self.peek()
        return tok.kind == "ident" and tok.text == kw

    def at_sym(self, sym: str) -> bool:
        tok = self.peek()
        return tok.kind == "sym" and tok.text == sym

    def number(self) -> float:
        neg = False
        if self.at_sym("-"):
            self.advance()
            neg = True
        tok = self.peek()
        if tok.kind != "number":
            self.error("a number")
        self.advance()
        v = float(tok.text)
        return -v if neg else v

    def integer(self, what: str) -> int:
        tok = self.peek()
        if tok.kind != "number" or not re.fullmatch(r"\d+", tok.text):
            self.error(what)
        self.advance()
        return int(tok.text)

    def sensor(self) -> int:
        tok = self.peek()
        if tok.kind == "number":
            return self.integer("a sensor index")
        if tok.kind == "ident" and tok.text not in _KEYWORDS:
            self.advance()
            if tok.text not in self.sensor_names:
                raise ParseError(
                    f"unknown sensor name {tok.text!r} "
                    f"(known: {sorted(self.sensor_names) or 'none'})",
                    tok.line,
                    tok.col,
                )
            return int(self.sensor_names[tok.text])
        self.error("a sensor index or sensor name")

    # expressions ---------------------------------------------------------
    def expr(self):
        if self.at_kw("if"):
            return self.ifexpr()
        return self.sum()

    def ifexpr(self):
        self.expect_kw("if")
        cond = self.bool_expr()
        self.expect_kw("then")
        then = self.expr()
        self.expect_kw("else")
        other = self.expr()
        return IfThenElse(cond, then, other)

    def sum(self):
        items = [self.product()]
        while self.at_sym("+"):
            self.advance()
            items.append(self.product())
        if len(items) == 1:
            return items[0]
        return Combine("add", None, tuple(items))

    def product(self):
        if self.peek().kind == "number" or self.at_sym("-"):
            v = self.number()
            if self.at_sym("*"):
                self.advance()
                return Combine("scale", v, (self.product(),))
            return ConstAction((v,))
        return self.primary()

    def primary(self):
        if self.at_sym("("):
            self.advance()
            node = self.expr()
            self.expect_sym(")")
            return node
        if self.at_sym("["):
            self.advance()
            values = [self.number()]
            while self.at_sym(","):
                self.advance()
                values.append(self.number())
            self.expect_sym("]")
            return ConstAction(tuple(values))
        if self.at_kw("PID"):
            return self.pid()
        self.error("'(', '[', 'PID', 'if', or a number")

    def pid(self):
        self.expect_kw("PID")
        self.expect_sym("<")
        sensor = self.sensor()
        self.expect_sym(",")
        target = self.number()
        self.expect_sym(",")
        kp = self.number()
        self.expect_sym(",")
        ki = self.number()
        self.expect_sym(",")
        kd = self.number()
        self.expect_sym(">")
        out_index = 0
        if self.at_sym("@"):
            self.advance()
            out_index = self.integer("an action component index")
        return LibCall(PidConfig(sensor, target, kp, ki, kd, out_index))

    # booleans --------------------------------------------------------------
    def bool_expr(self):
        items = [self.conj()]
        while self.at_kw("or"):
            self.advance()
            items.append(self.conj())
        if len(items) == 1:
            return items[0]
        return Or(tuple(items))

    def conj(self):
        items = [self.unary()]
        while self.at_kw("and"):
            self.advance()
            items.append(self.unary())
        if len(items) == 1:
            return items[0]
        return And(tuple(items))

    def unary(self):
        if self.at_kw("not"):
            self.advance()
            return Not(self.unary())
        if self.at_sym("("):
            self.advance()
            node = self.bool_expr()
            self.expect_sym(")")
            return node
        return self.pred()

    def pred(self):
        if not self.at_kw("s"):
            self.error("'s', 'not', or '('")
        self.advance()
        self.expect_sym("[")
        sensor = self.sensor()
        self.expect_sym("]")
        if self.at_sym("<"):
            op = "<"
        elif self.at_sym(">"):
            op = ">"
        else:
            self.error("'<' or '>'")
        self.advance()
        threshold = self.number()
        return AtomicPredicate(sensor, op, threshold)


def parse(text: str, sensor_names=None):
    """Parse program text to an AST. sensor_names maps symbolic sensor
    names to observation indices for texts written against named sensors."""
    parser = _Parser(_tokenize(text), sensor_names)
    ast = parser.expr()
    if parser.peek().kind != "end":
        parser.error("end of input")
    return ast


# -- parameter vector --------------------------------------------------------

PARAM_KINDS = ("const", "scale", "threshold", "target", "kp", "ki", "kd")


@dataclass
class ParamVector:
    """All continuous scalars of a program in canonical pre-order, with a
    kind tag per slot so searches can scale steps sensibly."""

    values: np.ndarray
    kinds: list


def _walk_bool_params(b, out):
    if isinstance(b, AtomicPredicate):
        out.append(("threshold", b.threshold))
    elif isinstance(b, (And, Or)):
        for t in b.terms:
            _walk_bool_params(t, out)
    else:
        _walk_bool_params(b.term, out)


def _walk_params(node, out):
    if isinstance(node, ConstAction):
        for v in node.values:
            out.append(("const", v))
    elif isinstance(node, Combine):
        if node.op == "scale":
            out.append(("scale", node.factor))
        for c in node.children:
            _walk_params(c, out)
    elif isinstance(node, IfThenElse):
        _walk_bool_params(node.cond, out)
        _walk_params(node.then, out)
        _walk_params(node.other, out)
    elif isinstance(node, LibCall):
        p = node.pid
        out.append(("target", p.target))
        out.append(("kp", p.kp))
        out.append(("ki", p.ki))
        out.append(("kd", p.kd))
    else:
        raise TypeError(f"not a program node: {node!r}")


def extract_params(ast) -> ParamVector:
    out = []
    _walk_params(ast, out)
    kinds = [k for k, _ in out]
    values = np.array([v for _, v in out], dtype=np.float64)
    return ParamVector(values, kinds)


def _rebuild_bool(b, values, pos):
    if isinstance(b, AtomicPredicate):
        v = float(values[pos[0]])
        pos[0] += 1
        return AtomicPredicate(b.sensor, b.op, v)
    if isinstance(b, And):
        return And(tuple(_rebuild_bool(t, values, pos) for t in b.terms))
    if isinstance(b, Or):
        return Or(tuple(_rebuild_bool(t, values, pos) for t in b.terms))
    return Not(_rebuild_bool(b.term, values, pos))


def _rebuild(node, values, pos):
    if isinstance(node, ConstAction):
        n = len(node.values)
        vals = tuple(float(v) for v in values[pos[0] : pos[0] + n])
        pos[0] += n
        return ConstAction(vals)
    if isinstance(node, Combine):
        if node.op == "scale":
            f = float(values[pos[0]])
            pos[0] += 1
            return Combine("scale", f, (_rebuild(node.children[0], values, pos),))
        return Combine(
            "add", None, tuple(_rebuild(c, values, pos) for c in node.children)
        )
    if isinstance(node, IfThenElse):
        cond = _rebuild_bool(node.cond, values, pos)
        then = _rebuild(node.then, values, pos)
        other = _rebuild(node.other, values, pos)
        return IfThenElse(cond, then, other)
    if isinstance(node, LibCall):
        p = node.pid
        target, kp, ki, kd = (float(v) for v in values[pos[0] : pos[0] + 4])
        pos[0] += 4
        return LibCall(PidConfig(p.sensor, target, kp, ki, kd, p.output_index))
    raise TypeError(f"not a program node: {node!r}")


def inject_params(ast, values) -> object:
    """Rebuild the program with the given scalars in extract_params order."""
    values = np.asarray(values, dtype=np.float64)
    n = len(extract_params(ast).values)
    assert len(values) == n, f"expected {n} parameters, got {len(values)}"
    pos = [0]
    return _rebuild(ast, values, pos)

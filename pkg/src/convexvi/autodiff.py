"""Scalar reverse-mode automatic differentiation.

A ``Tape`` records a computation over scalar nodes in topological
(creation) order; ``backward`` runs one reverse sweep and returns the
gradient with respect to every declared input.  Graphs are static once
recorded, so a tape can be re-evaluated at new input values with
``forward`` without re-recording (useful inside optimization loops).

Everything is double precision.  The math helpers at the bottom
(``exp``, ``log``, ``sigmoid``, ...) accept either a ``Node`` or a plain
float, so the same formula can be evaluated on or off the tape.
"""

from __future__ import annotations

import math

# Op kinds.  Binary ops with a folded float operand keep their kind and
# store the constant in `aux` with parent2 = -1.
CONST = 0
INPUT = 1
ADD = 2
MUL = 3
NEG = 4
EXP = 5
LOG = 6
TANH = 7
SIGMOID = 8
SOFTPLUS = 9
SQRT = 10
POW = 11
DIV = 12
RDIV = 13  # aux / node; still a div op, operand order flipped


class Node:
    """Handle to one tape entry.  Supports arithmetic overloads."""

    __slots__ = ("tape", "i")

    def __init__(self, tape, i):
        self.tape = tape
        self.i = i

    @property
    def value(self):
        return self.tape.vals[self.i]

    def __add__(self, other):
        t = self.tape
        if isinstance(other, Node):
            if other.tape is not t:
                raise ValueError("cannot combine nodes from different tapes")
            return t._binary(ADD, self.i, other.i, t.vals[self.i] + t.vals[other.i], 1.0, 1.0)
        return t._unary_aux(ADD, self.i, t.vals[self.i] + other, 1.0, other)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __neg__(self):
        t = self.tape
        return t._unary(NEG, self.i, -t.vals[self.i], -1.0)

    def __mul__(self, other):
        t = self.tape
        if isinstance(other, Node):
            if other.tape is not t:
                raise ValueError("cannot combine nodes from different tapes")
            a, b = t.vals[self.i], t.vals[other.i]
            return t._binary(MUL, self.i, other.i, a * b, b, a)
        return t._unary_aux(MUL, self.i, t.vals[self.i] * other, other, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        t = self.tape
        if isinstance(other, Node):
            if other.tape is not t:
                raise ValueError("cannot combine nodes from different tapes")
            a, b = t.vals[self.i], t.vals[other.i]
            inv = 1.0 / b
            return t._binary(DIV, self.i, other.i, a * inv, inv, -a * inv * inv)
        inv = 1.0 / other
        return t._unary_aux(MUL, self.i, t.vals[self.i] * inv, inv, inv)

    def __rtruediv__(self, other):
        # other / self
        t = self.tape
        a = t.vals[self.i]
        return t._unary_aux(RDIV, self.i, other / a, -other / (a * a), other)

    def __pow__(self, p):
        if isinstance(p, Node):
            raise TypeError("exponent must be a plain number")
        t = self.tape
        a = t.vals[self.i]
        if a < 0.0 and p != round(p):
            raise DomainError(f"fractional power of negative value {a!r}")
        return t._unary_aux(POW, self.i, a ** p, p * a ** (p - 1.0), p)

    def __repr__(self):
        return f"Node({self.value!r})"


class Tape:
    """Append-only record of a scalar computation graph.

    Parents of any node precede it, so the storage order is a
    topological order and one reverse sweep suffices for backward.
    """

    __slots__ = ("ops", "p1", "p2", "d1", "d2", "aux", "vals", "input_ids")

    def __init__(self):
        self.ops = []
        self.p1 = []
        self.p2 = []
        self.d1 = []
        self.d2 = []
        self.aux = []
        self.vals = []
        self.input_ids = []

    def __len__(self):
        return len(self.ops)

    def _append(self, op, p1, p2, d1, d2, aux, val):
        i = len(self.ops)
        self.ops.append(op)
        self.p1.append(p1)
        self.p2.append(p2)
        self.d1.append(d1)
        self.d2.append(d2)
        self.aux.append(aux)
        self.vals.append(val)
        return Node(self, i)

    def _binary(self, op, i, j, val, d1, d2):
        return self._append(op, i, j, d1, d2, 0.0, val)

    def _unary(self, op, i, val, d1):
        return self._append(op, i, -1, d1, 0.0, 0.0, val)

    def _unary_aux(self, op, i, val, d1, aux):
        return self._append(op, i, -1, d1, 0.0, aux, val)

    def input(self, value):
        """Declare a differentiable input holding `value`."""
        node = self._append(INPUT, -1, -1, 0.0, 0.0, 0.0, float(value))
        self.input_ids.append(node.i)
        return node

    def constant(self, value):
        """A leaf the gradient does not flow into."""
        return self._append(CONST, -1, -1, 0.0, 0.0, 0.0, float(value))

    def set_input(self, node, value):
        if self.ops[node.i] != INPUT:
            raise ValueError("set_input on a non-input node")
        self.vals[node.i] = float(value)

    def backward(self, output):
        """Reverse accumulation from `output`.

        Returns a dict mapping every declared input's node id to
        d(output)/d(input), with explicit zeros for untouched inputs.
        """
        vals = self.vals
        adj = [0.0] * len(vals)
        adj[output.i] = 1.0
        p1, p2, d1, d2 = self.p1, self.p2, self.d1, self.d2
        for i in range(output.i, -1, -1):
            a = adj[i]
            if a == 0.0:
                continue
            j = p1[i]
            if j >= 0:
                adj[j] += a * d1[i]
                k = p2[i]
                if k >= 0:
                    adj[k] += a * d2[i]
        return {i: adj[i] for i in self.input_ids}

    def forward(self):
        """Recompute all values and local partials from current inputs.

        The graph is fixed; only input values (via ``set_input``) are
        expected to have changed since recording.
        """
        ops, p1, p2, aux, vals = self.ops, self.p1, self.p2, self.aux, self.vals
        d1, d2 = self.d1, self.d2
        for i in range(len(ops)):
            op = ops[i]
            if op <= INPUT:  # CONST or INPUT: value already in place
                continue
            a = vals[p1[i]]
            if op == ADD:
                j = p2[i]
                if j >= 0:
                    vals[i] = a + vals[j]
                else:
                    vals[i] = a + aux[i]
            elif op == MUL:
                j = p2[i]
                if j >= 0:
                    b = vals[j]
                    vals[i] = a * b
                    d1[i] = b
                    d2[i] = a
                else:
                    vals[i] = a * aux[i]
            elif op == NEG:
                vals[i] = -a
            elif op == EXP:
                v = _exp_float(a)
                vals[i] = v
                d1[i] = v
            elif op == LOG:
                if a <= 0.0:
                    raise DomainError(f"log of non-positive value {a!r}")
                vals[i] = math.log(a)
                d1[i] = 1.0 / a
            elif op == TANH:
                v = math.tanh(a)
                vals[i] = v
                d1[i] = 1.0 - v * v
            elif op == SIGMOID:
                v = _sigmoid_float(a)
                vals[i] = v
                d1[i] = v * (1.0 - v)
            elif op == SOFTPLUS:
                vals[i] = _softplus_float(a)
                d1[i] = _sigmoid_float(a)
            elif op == SQRT:
                if a < 0.0:
                    raise DomainError(f"sqrt of negative value {a!r}")
                v = math.sqrt(a)
                vals[i] = v
                d1[i] = 0.5 / v if v > 0.0 else math.inf
            elif op == POW:
                p = aux[i]
                if a < 0.0 and p != round(p):
                    raise DomainError(f"fractional power of negative value {a!r}")
                vals[i] = a ** p
                d1[i] = p * a ** (p - 1.0)
            elif op == DIV:
                b = vals[p2[i]]
                inv = 1.0 / b
                vals[i] = a * inv
                d1[i] = inv
                d2[i] = -a * inv * inv
            elif op == RDIV:
                c = aux[i]
                vals[i] = c / a
                d1[i] = -c / (a * a)
            else:
                raise ValueError(f"unknown op kind {op}")


class DomainError(ValueError):
    """Raised when an op is recorded outside its domain (log/sqrt of a
    negative argument); arguments are rejected rather than clamped."""


def _sigmoid_float(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _softplus_float(x):
    # branch form avoids overflow of exp for large |x|
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


def _exp_float(x):
    # overflow becomes inf so divergence shows up as a non-finite value
    # in the diagnostics instead of an OverflowError mid-graph
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def exp(x):
    if isinstance(x, Node):
        v = _exp_float(x.value)
        return x.tape._unary(EXP, x.i, v, v)
    return _exp_float(x)


def log(x):
    if isinstance(x, Node):
        a = x.value
        if a <= 0.0:
            raise DomainError(f"log of non-positive value {a!r}")
        return x.tape._unary(LOG, x.i, math.log(a), 1.0 / a)
    if x <= 0.0:
        raise DomainError(f"log of non-positive value {x!r}")
    return math.log(x)


def tanh(x):
    if isinstance(x, Node):
        v = math.tanh(x.value)
        return x.tape._unary(TANH, x.i, v, 1.0 - v * v)
    return math.tanh(x)


def sigmoid(x):
    if isinstance(x, Node):
        v = _sigmoid_float(x.value)
        return x.tape._unary(SIGMOID, x.i, v, v * (1.0 - v))
    return _sigmoid_float(x)


def softplus(x):
    if isinstance(x, Node):
        a = x.value
        return x.tape._unary_aux(SOFTPLUS, x.i, _softplus_float(a), _sigmoid_float(a), 0.0)
    return _softplus_float(x)


def sqrt(x):
    if isinstance(x, Node):
        a = x.value
        if a < 0.0:
            raise DomainError(f"sqrt of negative value {a!r}")
        v = math.sqrt(a)
        return x.tape._unary(SQRT, x.i, v, 0.5 / v if v > 0.0 else math.inf)
    if x < 0.0:
        raise DomainError(f"sqrt of negative value {x!r}")
    return math.sqrt(x)


def value_of(x):
    """Float value of a Node or a plain number."""
    return x.value if isinstance(x, Node) else float(x)


def record(fn, point):
    """Record `fn` over fresh inputs at `point`.

    `fn` takes a list of Nodes and returns a single Node.  Returns
    (tape, inputs, output).
    """
    tape = Tape()
    inputs = [tape.input(v) for v in point]
    out = fn(inputs)
    if not isinstance(out, Node):
        raise TypeError("recorded function must return a Node")
    return tape, inputs, out


def gradient(fn, point):
    """Gradient of `fn` (list-of-Nodes -> Node) at `point`."""
    tape, inputs, out = record(fn, point)
    adj = tape.backward(out)
    return [adj[x.i] for x in inputs]


def finite_difference_check(fn, point, step=1e-5):
    """Max relative disagreement between AD and central differences.

    Relative error per input is |AD - FD| / max(1, |AD|).
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    grad = gradient(fn, point)

    def feval(vals):
        tape = Tape()
        return fn([tape.input(v) for v in vals]).value

    worst = 0.0
    for k in range(len(point)):
        hi = list(point)
        lo = list(point)
        hi[k] += step
        lo[k] -= step
        fd = (feval(hi) - feval(lo)) / (2.0 * step)
        err = abs(grad[k] - fd) / max(1.0, abs(grad[k]))
        if err > worst:
            worst = err
    return worst

"""Reverse-mode automatic differentiation over small dense float64 arrays.

One Tape records the computation for one query. Node references are plain
ints into an append-only arena, so parent links always point backwards and
the graph is topologically ordered by construction; backward() is a single
reverse sweep over the arena.

A Tape is strictly single-threaded. Distinct tapes may share read-only
input arrays.
"""

from __future__ import annotations

import math

import numpy as np

# Below this distance the L2 derivative is singular; we use the zero
# subgradient instead of dividing by ~0.
DISTANCE_EPS = 1e-12

# Floor for log() inputs; turns log(0) into a large finite value.
LOG_FLOOR = 1e-30
LOG_FLOOR_VALUE = math.log(LOG_FLOOR)


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


def l2_value(a: np.ndarray, b: np.ndarray) -> np.float64:
    """Euclidean distance, shared by the tape op and plain tree traversal.

    Both callers must agree bitwise, so this is the single implementation.
    """
    diff = a - b
    return np.sqrt(np.sum(diff * diff))


class _Node:
    __slots__ = ("value", "parents", "vjp", "clamped")

    def __init__(self, value, parents=(), vjp=None):
        self.value = value
        self.parents = parents
        self.vjp = vjp  # maps the output gradient to one gradient per parent
        self.clamped = False


class Tape:
    """Append-only computation record with one gradient slot per node."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.leaf_refs: list[int] = []
        self.grads: list = []
        # Times the log floor fired for a value that fed the loss.
        self.clamp_events = 0
        # ParameterSet id -> per-layer leaf refs; lets every forward pass on
        # this tape reuse the same parameter leaves (see transform.bind_params).
        self.bound_params: dict[int, list] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _push(self, value, parents=(), vjp=None) -> int:
        self.nodes.append(_Node(value, parents, vjp))
        return len(self.nodes) - 1

    def value(self, ref: int):
        return self.nodes[ref].value

    # ---- inputs ----------------------------------------------------------

    def leaf(self, array) -> int:
        """Register an input with a gradient slot reported by backward()."""
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"leaf: rank {arr.ndim} unsupported, expected rank 0..2")
        ref = self._push(arr)
        self.leaf_refs.append(ref)
        return ref

    def constant(self, array) -> int:
        """Register an input that never needs a reported gradient."""
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"constant: rank {arr.ndim} unsupported, expected rank 0..2")
        return self._push(arr)

    # ---- array ops -------------------------------------------------------

    def matmul_add(self, w: int, x: int, b: int) -> int:
        """Affine map w @ x + b with rank-2 w and rank-1 x, b."""
        wv = self.nodes[w].value
        xv = self.nodes[x].value
        bv = self.nodes[b].value
        if wv.ndim != 2:
            raise ShapeError(f"matmul_add weight: expected rank 2, got shape {np.shape(wv)}")
        m, n = wv.shape
        if np.shape(xv) != (n,):
            raise ShapeError(f"matmul_add input: expected shape ({n},), got {np.shape(xv)}")
        if np.shape(bv) != (m,):
            raise ShapeError(f"matmul_add bias: expected shape ({m},), got {np.shape(bv)}")
        out = wv @ xv + bv

        def vjp(g):
            return np.outer(g, xv), wv.T @ g, g

        return self._push(out, (w, x, b), vjp)

    def relu(self, x: int) -> int:
        xv = self.nodes[x].value
        out = np.maximum(xv, 0.0)

        def vjp(g):
            # subgradient 0 at exactly 0
            return (np.where(xv > 0.0, g, 0.0),)

        return self._push(out, (x,), vjp)

    def tanh(self, x: int) -> int:
        xv = self.nodes[x].value
        out = np.tanh(xv)

        def vjp(g):
            return (g * (1.0 - out * out),)

        return self._push(out, (x,), vjp)

    def l2_distance(self, a: int, b: int) -> int:
        """Euclidean distance between two rank-1 nodes (scalar output)."""
        av = self.nodes[a].value
        bv = self.nodes[b].value
        if np.ndim(av) != 1 or np.shape(av) != np.shape(bv):
            raise ShapeError(
                f"l2_distance: expected equal rank-1 shapes, got {np.shape(av)} and {np.shape(bv)}"
            )
        diff = av - bv
        d = np.sqrt(np.sum(diff * diff))

        def vjp(g):
            if d < DISTANCE_EPS:
                z = np.zeros_like(diff)
                return z, z
            scaled = (g / d) * diff
            return scaled, -scaled

        return self._push(d, (a, b), vjp)

    # ---- scalar ops ------------------------------------------------------

    def neg_dist_log_softmax(self, dists: list[int]) -> list[int]:
        """Log of softmax(-d) over a candidate set of scalar distances.

        Uses max-subtraction so large distances cannot underflow the
        normalizer. Returns one scalar ref per candidate, in order.
        """
        if not dists:
            raise ValueError("neg_dist_log_softmax: empty candidate list")
        neg = np.array([-float(self.nodes[r].value) for r in dists])
        m = neg.max()
        lse = m + np.log(np.sum(np.exp(neg - m)))
        logps = neg - lse
        probs = np.exp(logps)
        parents = tuple(dists)

        out = []
        for j in range(len(dists)):
            def vjp(g, j=j):
                # d logp_j / d dist_k = p_k - [k == j]
                grads = g * probs
                grads = grads.copy()
                grads[j] -= g
                return tuple(grads)

            out.append(self._push(np.float64(logps[j]), parents, vjp))
        return out

    def add(self, a: int, b: int) -> int:
        av = self.nodes[a].value
        bv = self.nodes[b].value
        if np.shape(av) != np.shape(bv):
            raise ShapeError(f"add: shapes {np.shape(av)} and {np.shape(bv)} differ")

        def vjp(g):
            return g, g

        return self._push(av + bv, (a, b), vjp)

    def sub(self, a: int, b: int) -> int:
        av = self.nodes[a].value
        bv = self.nodes[b].value
        if np.shape(av) != np.shape(bv):
            raise ShapeError(f"sub: shapes {np.shape(av)} and {np.shape(bv)} differ")

        def vjp(g):
            return g, -g

        return self._push(av - bv, (a, b), vjp)

    def mul(self, a: int, b: int) -> int:
        av = self.nodes[a].value
        bv = self.nodes[b].value
        if np.shape(av) != np.shape(bv):
            raise ShapeError(f"mul: shapes {np.shape(av)} and {np.shape(bv)} differ")

        def vjp(g):
            return g * bv, g * av

        return self._push(av * bv, (a, b), vjp)

    def neg(self, x: int) -> int:
        xv = self.nodes[x].value

        def vjp(g):
            return (-g,)

        return self._push(-xv, (x,), vjp)

    def exp(self, x: int) -> int:
        out = np.exp(self.nodes[x].value)

        def vjp(g):
            return (g * out,)

        return self._push(out, (x,), vjp)

    def log(self, x: int) -> int:
        """Natural log of a scalar, clamped at LOG_FLOOR.

        A clamped node keeps the floor value and a zero gradient; the
        `clamped` flag lets loss code count how often this fires.
        """
        xv = float(self.nodes[x].value)
        clamped = xv < LOG_FLOOR

        def vjp(g):
            if clamped:
                return (np.float64(0.0),)
            return (g / xv,)

        ref = self._push(np.float64(math.log(max(xv, LOG_FLOOR))), (x,), vjp)
        self.nodes[ref].clamped = clamped
        return ref

    def sum_scalars(self, refs: list[int]) -> int:
        """Sum of scalar nodes in list order; the empty sum is the constant 0."""
        if not refs:
            return self.constant(0.0)
        if len(refs) == 1:
            return refs[0]
        total = np.float64(0.0)
        for r in refs:
            total = total + self.nodes[r].value

        def vjp(g):
            return tuple(g for _ in refs)

        return self._push(total, tuple(refs), vjp)

    def sum_elements(self, x: int) -> int:
        """Sum of all elements of a node (scalar output)."""
        xv = self.nodes[x].value

        def vjp(g):
            return (np.full(np.shape(xv), g),)

        return self._push(np.float64(np.sum(xv)), (x,), vjp)

    # ---- backward --------------------------------------------------------

    def backward(self, loss: int) -> dict[int, np.ndarray]:
        """Reverse sweep from a scalar loss node.

        Fills the per-node gradient slots and returns a map from every leaf
        ref to its gradient; leaves unreachable from the loss get zeros.
        """
        lnode = self.nodes[loss]
        if np.ndim(lnode.value) != 0:
            raise ShapeError(f"backward: loss must be scalar, got shape {np.shape(lnode.value)}")
        grads: list = [None] * len(self.nodes)
        grads[loss] = np.float64(1.0)
        for i in range(loss, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                continue
            for p, pg in zip(node.parents, node.vjp(g)):
                grads[p] = pg if grads[p] is None else grads[p] + pg
        self.grads = grads
        out = {}
        for ref in self.leaf_refs:
            g = grads[ref]
            out[ref] = np.zeros_like(self.nodes[ref].value) if g is None else g
        return out


def grad_check(build_loss, params: list[np.ndarray], step: float = 1e-5) -> float:
    """Max relative disagreement between backward() and central differences.

    `build_loss(tape, refs)` must deterministically assemble a scalar loss
    from one leaf ref per entry of `params`. The numeric side re-evaluates
    the loss at +/- step per coordinate, so it never trusts the tape's
    gradient rules.
    """
    if step <= 0:
        raise ValueError("grad_check: step must be positive")
    arrays = [np.asarray(p, dtype=np.float64) for p in params]

    def evaluate(arrs):
        tape = Tape()
        refs = [tape.leaf(a) for a in arrs]
        loss = build_loss(tape, refs)
        val = float(tape.value(loss))
        if not math.isfinite(val):
            raise FloatingPointError(f"grad_check: loss is non-finite ({val})")
        return tape, refs, loss, val

    tape, refs, loss, _ = evaluate(arrays)
    grad_map = tape.backward(loss)

    worst = 0.0
    for pi, arr in enumerate(arrays):
        analytic = np.asarray(grad_map[refs[pi]])
        for k in range(arr.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[pi].flat[k] += step
            minus[pi].flat[k] -= step
            _, _, _, f_plus = evaluate(plus)
            _, _, _, f_minus = evaluate(minus)
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(analytic.flat[k]) if analytic.ndim else float(analytic)
            rel = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, rel)
    return worst

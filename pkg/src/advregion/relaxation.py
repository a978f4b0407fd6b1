"""Convex relaxations of ReLU networks over polyhedral input regions.

Two relaxations are supported.  The triangle relaxation encodes, per unstable
neuron, the convex hull of the ReLU graph over its pre-activation bounds and
verifies regions by LP.  The coarser variant keeps a single lower bound per
neuron and replaces the big LP by backsubstitution terminated at the input
layer, finishing every bound with a small LP in input variables only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry, lp
from .network import RELU, Network

TRIANGLE = "triangle"
DEEPPOLY = "deeppoly"

_TIE_BREAK = 1e-9  # secondary objective weight pushing relu outputs to their upper bounds


class RelaxationError(ValueError):
    pass


@dataclass(frozen=True)
class RelaxationState:
    """Per-neuron pre-activation bounds, phases, and relaxation data.

    phase is +1 for stable-active (l >= 0), -1 for stable-inactive (u <= 0)
    and 0 for unstable.  For the backsubstitution variant, sym_lower/sym_upper
    hold per-layer linear input-space expressions (coeff matrix, constant).
    """

    kind: str
    lower: tuple[np.ndarray, ...]
    upper: tuple[np.ndarray, ...]
    phase: tuple[np.ndarray, ...]
    sym_lower: tuple[tuple[np.ndarray, np.ndarray], ...] | None = None
    sym_upper: tuple[tuple[np.ndarray, np.ndarray], ...] | None = None

    def lam_mu(self, h: int) -> tuple[np.ndarray, np.ndarray]:
        """Triangle upper-line coefficients for hidden layer h (unstable neurons only)."""
        l, u, ph = self.lower[h], self.upper[h], self.phase[h]
        lam = np.ones_like(l)
        mu = np.zeros_like(l)
        unstable = ph == 0
        d = u[unstable] - l[unstable]
        lam[unstable] = u[unstable] / d
        mu[unstable] = -l[unstable] * u[unstable] / d
        return lam, mu


@dataclass(frozen=True)
class SolveRecord:
    """Optimum of a verification solve plus the primal witness it produced."""

    objective: float
    target: int
    adversary: int
    x_star: np.ndarray
    g_affine: tuple[np.ndarray, ...] | None  # per layer incl. output (triangle)
    g_relu: tuple[np.ndarray, ...] | None  # per hidden layer (triangle)
    margin_expr: tuple[np.ndarray, float] | None  # input-space margin (backsub)
    state: RelaxationState


def _relu_coeffs(state: RelaxationState, h: int):
    """Per-neuron relaxation slopes: z^r >= al*z^a and z^r <= au*z^a + bu."""
    l, u, ph = state.lower[h], state.upper[h], state.phase[h]
    lam, mu = state.lam_mu(h)
    al = np.where(ph == 1, 1.0, 0.0)
    au = np.where(ph == 1, 1.0, np.where(ph == -1, 0.0, lam))
    bu = np.where(ph == 0, mu, 0.0)
    # minimum-area lower line: keep z^r >= z^a unless u <= -l
    al = np.where((ph == 0) & (u > -l), 1.0, al)
    return al, au, bu


# --- triangle LP encoding -----------------------------------------------------


class _Encoding:
    """Variable layout of the relaxation LP: x | (za, zr) per hidden | head za."""

    def __init__(self, net: Network, relu_layers: int, head: str | None):
        self.net = net
        self.relu_layers = relu_layers
        self.head = head
        n = net.input_dim
        self.x = slice(0, n)
        self.za, self.zr = [], []
        for h in range(relu_layers):
            width = net.layers[h].out_dim
            self.za.append(slice(n, n + width))
            self.zr.append(slice(n + width, n + 2 * width))
            n += 2 * width
        if head == "hidden":
            width = net.layers[relu_layers].out_dim
            self.head_slice = slice(n, n + width)
            n += width
        elif head == "output":
            width = net.output_dim
            self.head_slice = slice(n, n + width)
            n += width
        else:
            self.head_slice = None
        self.n_vars = n

    def prev_slice(self, h: int) -> slice:
        return self.x if h == 0 else self.zr[h - 1]


def _encode_triangle(
    net: Network,
    poly: geometry.Polyhedron,
    state,
    relu_layers: int,
    head: str | None,
    fix_x: np.ndarray | None = None,
) -> tuple[lp.LinearProgram, _Encoding]:
    enc = _Encoding(net, relu_layers, head)
    prog = lp.LinearProgram(enc.n_vars)
    n0 = net.input_dim

    if fix_x is not None:
        for j in range(n0):
            prog.set_bounds(j, fix_x[j], fix_x[j])
    else:
        for j in range(n0):
            prog.set_bounds(j, poly.lb[j], poly.ub[j])
        for w, ci in zip(poly.W, poly.c):
            row = np.zeros(enc.n_vars)
            row[enc.x] = w
            prog.add(row, "<=", ci)

    def affine_rows(layer_idx: int, out_slice: slice, in_slice: slice):
        lay = net.layers[layer_idx]
        for j in range(lay.out_dim):
            row = np.zeros(enc.n_vars)
            row[out_slice][j] = 1.0
            row[in_slice] = -lay.weight[j]
            prog.add(row, "=", lay.bias[j])

    for h in range(relu_layers):
        affine_rows(h, enc.za[h], enc.prev_slice(h))
        lower, upper, phase = state.lower[h], state.upper[h], state.phase[h]
        d = upper - lower
        for j in range(net.layers[h].out_dim):
            za_j = enc.za[h].start + j
            zr_j = enc.zr[h].start + j
            row = np.zeros(enc.n_vars)
            if phase[j] == 1:  # z^r = z^a
                row[zr_j] = 1.0
                row[za_j] = -1.0
                prog.add(row, "=", 0.0)
            elif phase[j] == -1:  # z^r = 0
                row[zr_j] = 1.0
                prog.add(row, "=", 0.0)
            else:
                prog.set_bounds(zr_j, 0.0, None)
                row[za_j] = 1.0
                row[zr_j] = -1.0
                prog.add(row, "<=", 0.0)  # z^r >= z^a
                lam = upper[j] / d[j]
                mu = -lower[j] * upper[j] / d[j]
                row = np.zeros(enc.n_vars)
                row[zr_j] = 1.0
                row[za_j] = -lam
                prog.add(row, "<=", mu)  # z^r <= lam z^a + mu

    if head == "hidden":
        affine_rows(relu_layers, enc.head_slice, enc.prev_slice(relu_layers))
    elif head == "output":
        affine_rows(len(net.layers) - 1, enc.head_slice, enc.prev_slice(relu_layers))
    return prog, enc


class _PartialState:
    """Read-only bound view while layers are still being built."""

    def __init__(self, lower, upper, phase):
        self.lower, self.upper, self.phase = lower, upper, phase


def build_relaxation(
    net: Network,
    poly: geometry.Polyhedron,
    kind: str = TRIANGLE,
    prev: RelaxationState | None = None,
) -> RelaxationState:
    """Compute per-neuron bounds and phases of the relaxation over the region.

    Bounds are seeded by interval propagation over the bounding box, then
    unstable neurons are tightened by LP in topological order.  When prev is
    given (for a region nested in prev's), neurons stable in prev keep their
    phase without re-solving, and recomputed bounds never get looser.
    """
    if kind == DEEPPOLY:
        return deeppoly_bounds(net, poly, prev)
    if kind != TRIANGLE:
        raise RelaxationError(f"unknown relaxation kind {kind!r}")
    if prev is not None and prev.kind != kind:
        raise RelaxationError("previous state uses a different relaxation kind")
    geometry.interior_point(poly)  # raises on empty region

    n_hidden = len(net.layers) - 1
    lower, upper, phase = [], [], []
    partial = _PartialState(lower, upper, phase)
    post_l, post_u = poly.lb.copy(), poly.ub.copy()

    for h in range(n_hidden):
        lay = net.layers[h]
        if lay.activation != RELU:
            raise RelaxationError("hidden layers must be ReLU")
        wp = np.maximum(lay.weight, 0.0)
        wn = np.minimum(lay.weight, 0.0)
        seed_l = wp @ post_l + wn @ post_u + lay.bias
        seed_u = wp @ post_u + wn @ post_l + lay.bias
        l = np.empty_like(seed_l)
        u = np.empty_like(seed_u)
        ph = np.zeros(lay.out_dim, dtype=np.int8)
        prog = enc = None
        for j in range(lay.out_dim):
            if prev is not None and prev.phase[h][j] != 0:
                l[j], u[j] = prev.lower[h][j], prev.upper[h][j]
                ph[j] = prev.phase[h][j]
                continue
            lj, uj = seed_l[j], seed_u[j]
            if prev is not None:
                lj = max(lj, prev.lower[h][j])
                uj = min(uj, prev.upper[h][j])
            if lj < 0.0 < uj:
                if prog is None:
                    prog, enc = _encode_triangle(net, poly, partial, h, "hidden")
                obj = np.zeros(enc.n_vars)
                obj[enc.head_slice.start + j] = 1.0
                prog.objective = obj
                prog.sense = "min"
                lo = lp.solve(prog)
                prog.sense = "max"
                hi = lp.solve(prog)
                if lo.status != lp.OPTIMAL or hi.status != lp.OPTIMAL:
                    raise geometry.EmptyRegionError("region is empty")
                lj = max(lj, lo.value)
                uj = min(uj, hi.value)
            uj = max(uj, lj)
            l[j], u[j] = lj, uj
            ph[j] = 1 if lj >= 0.0 else (-1 if uj <= 0.0 else 0)
        lower.append(l)
        upper.append(u)
        phase.append(ph)
        post_l = np.maximum(l, 0.0)
        post_u = np.maximum(u, 0.0)

    return RelaxationState(TRIANGLE, tuple(lower), tuple(upper), tuple(phase))


# --- backsubstitution (coarse relaxation) --------------------------------------


def _backsub(net: Network, state, layer_idx: int, w: np.ndarray, const: np.ndarray, bound: str):
    """Bound w . za_{layer_idx} + const by a linear expression of the inputs.

    layer_idx counts affine blocks: hidden layers 0..H-1, the output layer H.
    w may be a matrix (one expression per row).
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    const = np.atleast_1d(np.asarray(const, dtype=float)).copy()
    i = layer_idx
    while True:
        lay = net.layers[i]
        const = const + w @ lay.bias
        w = w @ lay.weight  # now in terms of zr_{i-1} (inputs when i == 0)
        if i == 0:
            return w, const
        al, au, bu = _relu_coeffs(state, i - 1)
        pos = w >= 0
        if bound == "lower":
            const = const + np.where(pos, 0.0, w) @ bu
            w = np.where(pos, w * al, w * au)
        else:
            const = const + np.where(pos, w, 0.0) @ bu
            w = np.where(pos, w * au, w * al)
        i -= 1


def deeppoly_bounds(
    net: Network, poly: geometry.Polyhedron, prev: RelaxationState | None = None
) -> RelaxationState:
    """Bounds from backsubstituted expressions, each finished by an LP over P."""
    if prev is not None and prev.kind != DEEPPOLY:
        raise RelaxationError("previous state uses a different relaxation kind")
    geometry.interior_point(poly)

    n_hidden = len(net.layers) - 1
    lower, upper, phase = [], [], []
    sym_lower, sym_upper = [], []
    partial = _PartialState(lower, upper, phase)

    for h in range(n_hidden):
        width = net.layers[h].out_dim
        eye = np.eye(width)
        wl, cl = _backsub(net, partial, h, eye, np.zeros(width), "lower")
        wu, cu = _backsub(net, partial, h, eye, np.zeros(width), "upper")
        l = np.empty(width)
        u = np.empty(width)
        ph = np.zeros(width, dtype=np.int8)
        for j in range(width):
            if prev is not None and prev.phase[h][j] != 0:
                l[j], u[j] = prev.lower[h][j], prev.upper[h][j]
                ph[j] = prev.phase[h][j]
                wl[j], cl[j] = prev.sym_lower[h][0][j], prev.sym_lower[h][1][j]
                wu[j], cu[j] = prev.sym_upper[h][0][j], prev.sym_upper[h][1][j]
                continue
            lo, _ = geometry.linear_extreme(poly, wl[j], "min")
            hi, _ = geometry.linear_extreme(poly, wu[j], "max")
            lj = lo + cl[j]
            uj = hi + cu[j]
            if prev is not None:
                lj = max(lj, prev.lower[h][j])
                uj = min(uj, prev.upper[h][j])
            uj = max(uj, lj)
            l[j], u[j] = lj, uj
            ph[j] = 1 if lj >= 0.0 else (-1 if uj <= 0.0 else 0)
        lower.append(l)
        upper.append(u)
        phase.append(ph)
        sym_lower.append((wl, cl))
        sym_upper.append((wu, cu))

    return RelaxationState(
        DEEPPOLY,
        tuple(lower),
        tuple(upper),
        tuple(phase),
        tuple(sym_lower),
        tuple(sym_upper),
    )


# --- verification ---------------------------------------------------------------


def _adversaries(n_out: int, y_t: int):
    if not 0 <= y_t < n_out:
        raise RelaxationError(f"target {y_t} out of range for {n_out} classes")
    if n_out < 2:
        raise RelaxationError("verification needs at least two classes")
    return [y for y in range(n_out) if y != y_t]


def _margin_objective(enc: _Encoding, y_t: int, y: int) -> np.ndarray:
    obj = np.zeros(enc.n_vars)
    obj[enc.head_slice.start + y_t] = 1.0
    obj[enc.head_slice.start + y] = -1.0
    return obj


def _tie_broken(obj: np.ndarray, enc: _Encoding, state) -> np.ndarray:
    # push unstable relu outputs to their upper bounds so the witness record is
    # reproducible: the plain LP has ties whenever a relu output cancels out
    obj = obj.copy()
    for h in range(enc.relu_layers):
        unstable = state.phase[h] == 0
        obj[enc.zr[h]] -= _TIE_BREAK * unstable
    return obj


def verify_region(
    net: Network,
    poly: geometry.Polyhedron,
    y_t: int,
    kind: str = TRIANGLE,
    prev: RelaxationState | None = None,
    state: RelaxationState | None = None,
) -> tuple[bool, float, SolveRecord]:
    """Minimum relaxed margin of y_t over the region; verified iff it is positive.

    The returned record holds the minimizing adversary's solution: the input
    witness and (for the triangle kind) the primal value of every neuron.
    """
    if state is None:
        state = build_relaxation(net, poly, kind, prev)
    if state.kind == TRIANGLE:
        verified, margin, record = _verify_triangle(net, poly, y_t, state)
    elif state.kind == DEEPPOLY:
        verified, margin, record = _verify_backsub(net, poly, y_t, state)
    else:
        raise RelaxationError(f"unknown relaxation kind {state.kind!r}")
    return verified, margin, record


def _verify_triangle(net, poly, y_t, state):
    n_hidden = len(net.layers) - 1
    prog, enc = _encode_triangle(net, poly, state, n_hidden, "output")
    margin, adversary = np.inf, None
    for y in _adversaries(net.output_dim, y_t):
        prog.objective = _margin_objective(enc, y_t, y)
        prog.sense = "min"
        sol = lp.solve(prog)
        if sol.status == lp.INFEASIBLE:
            raise geometry.EmptyRegionError("region is empty")
        if sol.status != lp.OPTIMAL:
            raise RelaxationError(f"margin LP ended with status {sol.status}")
        if sol.value < margin:
            margin, adversary = sol.value, y
    prog.objective = _tie_broken(_margin_objective(enc, y_t, adversary), enc, state)
    sol = lp.solve(prog)
    if sol.status != lp.OPTIMAL:
        raise RelaxationError(f"witness LP ended with status {sol.status}")
    record = _record_from_primal(net, state, enc, sol.primal, margin, y_t, adversary)
    return margin > 0.0, float(margin), record


def _record_from_primal(net, state, enc, primal, objective, y_t, adversary):
    g_affine = [primal[enc.za[h]].copy() for h in range(enc.relu_layers)]
    g_affine.append(primal[enc.head_slice].copy())
    g_relu = [primal[enc.zr[h]].copy() for h in range(enc.relu_layers)]
    return SolveRecord(
        objective=float(objective),
        target=y_t,
        adversary=adversary,
        x_star=primal[enc.x].copy(),
        g_affine=tuple(g_affine),
        g_relu=tuple(g_relu),
        margin_expr=None,
        state=state,
    )


def _verify_backsub(net, poly, y_t, state):
    n_out = net.output_dim
    margin, adversary, best = np.inf, None, None
    for y in _adversaries(n_out, y_t):
        w = np.zeros(n_out)
        w[y_t] = 1.0
        w[y] = -1.0
        w0, c0 = _backsub(net, state, len(net.layers) - 1, w, 0.0, "lower")
        w0, c0 = w0[0], float(c0[0])
        value, xmin = geometry.linear_extreme(poly, w0, "min")
        value += c0
        if value < margin:
            margin, adversary, best = value, y, (w0, c0, xmin)
    w0, c0, xmin = best
    record = SolveRecord(
        objective=float(margin),
        target=y_t,
        adversary=adversary,
        x_star=xmin,
        g_affine=None,
        g_relu=None,
        margin_expr=(w0, c0),
        state=state,
    )
    return margin > 0.0, float(margin), record


def worst_abstract_counterexample(record: SolveRecord) -> np.ndarray:
    """The input the verification solve used to minimize its objective."""
    if record.objective >= 0.0:
        raise RelaxationError("record comes from a verified region; no counterexample")
    return record.x_star


def exact_objective_at(
    net: Network,
    state: RelaxationState,
    x,
    y_t: int,
    adversary: int | None = None,
) -> float:
    """Relaxed objective with the input pinned to x (exact, not approximated)."""
    x = np.asarray(x, dtype=float)
    ys = [adversary] if adversary is not None else _adversaries(net.output_dim, y_t)
    if state.kind == DEEPPOLY:
        best = np.inf
        for y in ys:
            w = np.zeros(net.output_dim)
            w[y_t] = 1.0
            w[y] = -1.0
            w0, c0 = _backsub(net, state, len(net.layers) - 1, w, 0.0, "lower")
            best = min(best, float(w0[0] @ x + c0[0]))
        return best
    n_hidden = len(net.layers) - 1
    prog, enc = _encode_triangle(net, None, state, n_hidden, "output", fix_x=x)
    best = np.inf
    for y in ys:
        prog.objective = _margin_objective(enc, y_t, y)
        prog.sense = "min"
        sol = lp.solve(prog)
        if sol.status != lp.OPTIMAL:
            raise RelaxationError(f"pinned-input LP ended with status {sol.status}")
        best = min(best, sol.value)
    return float(best)


def witness_record(
    net: Network,
    state: RelaxationState,
    x,
    y_t: int,
    adversary: int | None = None,
) -> SolveRecord:
    """Record built at a given witness input by re-solving the pinned-input LP."""
    x = np.asarray(x, dtype=float)
    if state.kind != TRIANGLE:
        raise RelaxationError("witness records exist for the triangle kind only")
    n_hidden = len(net.layers) - 1
    prog, enc = _encode_triangle(net, None, state, n_hidden, "output", fix_x=x)
    best, best_y = np.inf, None
    for y in [adversary] if adversary is not None else _adversaries(net.output_dim, y_t):
        prog.objective = _margin_objective(enc, y_t, y)
        prog.sense = "min"
        sol = lp.solve(prog)
        if sol.status != lp.OPTIMAL:
            raise RelaxationError(f"pinned-input LP ended with status {sol.status}")
        if sol.value < best:
            best, best_y = sol.value, y
    prog.objective = _tie_broken(_margin_objective(enc, y_t, best_y), enc, state)
    sol = lp.solve(prog)
    if sol.status != lp.OPTIMAL:
        raise RelaxationError(f"witness LP ended with status {sol.status}")
    return _record_from_primal(net, state, enc, sol.primal, best, y_t, best_y)

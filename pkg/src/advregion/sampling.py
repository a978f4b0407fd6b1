"""Counterexample collection: worst-case points, line-guided Gaussian sampling,
fast approximate abstract-counterexample evaluation, and the history set."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import geometry, relaxation
from .network import Network, forward, forward_batch, margin, margin_gradient
from .relaxation import DEEPPOLY, TRIANGLE, RelaxationState, SolveRecord

CONCRETE = "concrete"
ABSTRACT = "abstract"

FW_GAP_TOL = 1e-4
FW_MAX_ITERS = 200

N_CENTERS = 6  # equally spaced points on the x*..x+ segment
PROBES_PER_RHO = 64
ACCEPT_THRESHOLD = 0.5
RHO_SEARCH_ITERS = 12
RHO_MIN_FRACTION = 1e-4
FALLBACK_SAMPLES = 32

_EXACT_SIGN_ENUM_DIM = 4  # exact L1-farthest point for small dimensions


class SamplingError(ValueError):
    pass


@dataclass(frozen=True)
class CounterexampleBatch:
    points: np.ndarray  # (k, n)
    mode: str
    provenance: tuple[tuple[int, float], ...]  # (center index, rho) per point

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2:
            raise SamplingError("batch points must be a 2-D array")
        if self.mode not in (CONCRETE, ABSTRACT):
            raise SamplingError(f"unknown mode {self.mode!r}")
        if len(self.provenance) != len(pts):
            raise SamplingError("provenance length mismatch")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)


@dataclass
class HistorySet:
    """Ring of the last n counterexample batches."""

    size: int = 5
    batches: deque = field(default_factory=deque)

    def __post_init__(self):
        if self.size < 1:
            raise SamplingError("history size must be >= 1")
        self.batches = deque(self.batches, maxlen=self.size)

    def push(self, batch: CounterexampleBatch) -> "HistorySet":
        self.batches.append(batch)
        return self

    def copy(self) -> "HistorySet":
        return HistorySet(self.size, deque(self.batches, maxlen=self.size))

    def points_in(self, poly: geometry.Polyhedron) -> np.ndarray:
        """Flattened view, re-filtered to the current region before use."""
        stacked = [b.points for b in self.batches if len(b)]
        if not stacked:
            return np.zeros((0, poly.dim))
        pts = np.vstack(stacked)
        return pts[poly.contains_batch(pts)]

    def __len__(self):
        return sum(len(b) for b in self.batches)


def update_history(history: HistorySet, batch: CounterexampleBatch) -> HistorySet:
    return history.push(batch)


# --- worst-case counterexamples ------------------------------------------------


def worst_concrete_counterexample(
    net: Network, poly: geometry.Polyhedron, y_t: int, seed: int = 0
) -> np.ndarray | None:
    """Frank-Wolfe minimization of the concrete margin over the region.

    Returns a stationary point (FW gap <= 1e-4) that the network misclassifies
    relative to y_t, or None when the minimum found is >= 0.
    """
    rng = np.random.default_rng(seed)
    center = geometry.interior_point(poly)
    # a mild seeded jitter keeps distinct seeds from retracing identical paths
    jitter = rng.uniform(-1.0, 1.0, size=poly.dim) * (poly.ub - poly.lb) * 0.05
    x = center + jitter
    if not poly.contains(x):
        x = center
    for _ in range(FW_MAX_ITERS):
        g = margin_gradient(net, x, y_t)
        _, s = geometry.linear_extreme(poly, g, "min")
        gap = float(g @ (x - s))
        if gap <= FW_GAP_TOL:
            break
        base = margin(net, x, y_t)
        gamma, best = 0.0, base
        c = 1.0
        for _ in range(30):
            val = margin(net, x + c * (s - x), y_t)
            if val < best - 1e-15:
                gamma, best = c, val
                break
            c *= 0.5
        if gamma == 0.0:
            break
        x = x + gamma * (s - x)
    if margin(net, x, y_t) >= 0.0:
        return None
    return x


def far_point(poly: geometry.Polyhedron, x_star) -> np.ndarray:
    """Point of the region farthest from x_star in L1 distance.

    Maximizing an L1 distance over a polytope needs one LP per sign pattern;
    small dimensions are enumerated exactly, larger ones use a monotone
    sign-refinement iteration seeded from the bounding-box geometry.
    """
    x_star = np.asarray(x_star, dtype=float)
    if x_star.shape != (poly.dim,):
        raise SamplingError("x_star dimension mismatch")
    if not poly.contains(x_star, slack=1e-6):
        raise SamplingError("x_star must lie in the region")

    def solve_for(signs: np.ndarray) -> tuple[float, np.ndarray]:
        value, point = geometry.linear_extreme(poly, signs, "max")
        return value - float(signs @ x_star), point

    n = poly.dim
    if n <= _EXACT_SIGN_ENUM_DIM:
        best_val, best_pt = -np.inf, None
        for mask in range(2**n):
            signs = np.array([1.0 if mask >> j & 1 else -1.0 for j in range(n)])
            val, pt = solve_for(signs)
            if val > best_val + 1e-12:
                best_val, best_pt = val, pt
        return best_pt

    signs = np.where(poly.ub - x_star >= x_star - poly.lb, 1.0, -1.0)
    best_val, best_pt = solve_for(signs)
    for _ in range(n):
        new_signs = np.where(best_pt >= x_star, 1.0, -1.0)
        if (new_signs == signs).all():
            break
        signs = new_signs
        val, pt = solve_for(signs)
        if val <= best_val + 1e-12:
            break
        best_val, best_pt = val, pt
    return best_pt


# --- approximate abstract evaluation --------------------------------------------


def approx_abstract_eval(
    net: Network, state: RelaxationState, record: SolveRecord, x
) -> float:
    """Upper bound on the relaxed objective at x, computed without an LP.

    Each unstable neuron copies the side the witness solution took between its
    relaxation bounds, interpolating when the witness sat strictly between
    them.  The resulting assignment is feasible for the pinned-input LP, so a
    negative value proves x is an abstract counterexample.
    """
    return float(_approx_eval_batch(net, state, record, np.atleast_2d(x))[0])


def _approx_eval_batch(net, state, record, xs: np.ndarray) -> np.ndarray:
    xs = np.asarray(xs, dtype=float)
    if state.kind == DEEPPOLY:
        w, c = record.margin_expr
        return xs @ w + c
    if state.kind != TRIANGLE:
        raise SamplingError(f"unknown relaxation kind {state.kind!r}")
    g = xs
    for h in range(len(net.layers) - 1):
        lay = net.layers[h]
        ga = g @ lay.weight.T + lay.bias
        phase = state.phase[h]
        lam, mu = state.lam_mu(h)
        lb = np.maximum(0.0, ga)
        ub = lam * ga + mu
        ub = np.maximum(ub, lb)
        gsa = record.g_affine[h]
        gsr = record.g_relu[h]
        lb_s = np.maximum(0.0, gsa)
        ub_s = lam * gsa + mu
        dlb = np.maximum(gsr - lb_s, 0.0)
        dub = np.maximum(ub_s - gsr, 0.0)
        denom = dlb + dub
        degenerate = denom <= 1e-12
        safe = np.where(degenerate, 1.0, denom)
        interp = (lb * dub + ub * dlb) / safe
        gr = np.where(degenerate, lb, interp)
        gr = np.clip(gr, lb, ub)
        g = np.where(phase == 1, ga, np.where(phase == -1, 0.0, gr))
    out = g @ net.layers[-1].weight.T + net.layers[-1].bias
    return out[:, record.target] - out[:, record.adversary]


# --- Gaussian line sampling ------------------------------------------------------


def _is_counterexample_batch(net, poly, y_t, mode, state, record, xs) -> np.ndarray:
    ok = poly.contains_batch(xs)
    if not ok.any():
        return ok
    if mode == CONCRETE:
        logits = forward_batch(net, xs)
        ok &= np.argmax(logits, axis=1) != y_t
    else:
        ok &= _approx_eval_batch(net, state, record, xs) < 0.0
    return ok


def gaussian_sample(
    net: Network,
    poly: geometry.Polyhedron,
    x_star,
    x_plus,
    s_minus: int,
    mode: str,
    record: SolveRecord,
    seed: int = 0,
    n_centers: int = N_CENTERS,
    probes: int = PROBES_PER_RHO,
    threshold: float = ACCEPT_THRESHOLD,
    rho_iters: int = RHO_SEARCH_ITERS,
) -> CounterexampleBatch:
    """Counterexamples from isotropic Gaussians centered on the x*..x+ segment.

    Per center, the Gaussian radius is the largest probed value whose
    acceptance rate (inside the region and a counterexample of the requested
    mode) stays above the threshold.  Deterministic for a fixed seed.
    """
    if mode not in (CONCRETE, ABSTRACT):
        raise SamplingError(f"unknown mode {mode!r}")
    x_star = np.asarray(x_star, dtype=float)
    x_plus = np.asarray(x_plus, dtype=float)
    if s_minus < 1:
        raise SamplingError("s_minus must be >= 1")
    state = record.state
    y_t = record.target
    rng = np.random.default_rng(seed)
    diam = float(np.max(poly.ub - poly.lb))
    points: list[np.ndarray] = []
    provenance: list[tuple[int, float]] = []

    if diam > 0.0:
        quota = max(1, -(-s_minus // n_centers))
        ts = np.linspace(0.0, 1.0, n_centers)
        for idx, t in enumerate(ts):
            center = x_star + t * (x_plus - x_star)
            lo_rho, hi_rho = RHO_MIN_FRACTION * diam, diam
            best_rho = None

            def rate(rho: float) -> float:
                draws = rng.normal(center, rho, size=(probes, poly.dim))
                return float(
                    _is_counterexample_batch(net, poly, y_t, mode, state, record, draws).mean()
                )

            if rate(lo_rho) >= threshold:
                best_rho = lo_rho
                for _ in range(rho_iters):
                    mid = 0.5 * (lo_rho + hi_rho)
                    if rate(mid) >= threshold:
                        best_rho, lo_rho = mid, mid
                    else:
                        hi_rho = mid
            if best_rho is None:
                continue
            kept = 0
            for _ in range(8):  # bounded final draws at the accepted radius
                draws = rng.normal(center, best_rho, size=(quota, poly.dim))
                good = _is_counterexample_batch(net, poly, y_t, mode, state, record, draws)
                for p in draws[good]:
                    if kept == quota:
                        break
                    points.append(p)
                    provenance.append((idx, best_rho))
                    kept += 1
                if kept == quota:
                    break

    if not points:
        fb_pts, fb_prov = _fallback_samples(net, poly, y_t, mode, state, record, rng)
        points, provenance = fb_pts, fb_prov

    if points:
        pts = np.array(points[:s_minus])
        prov = tuple(provenance[: s_minus])
    else:
        pts = np.zeros((0, poly.dim))
        prov = ()
    batch = CounterexampleBatch(pts, mode, prov)
    _recheck_batch(net, poly, y_t, mode, state, record, batch)
    return batch


def _fallback_samples(net, poly, y_t, mode, state, record, rng):
    """Exact per-sample evaluation of fresh box rejections; last resort."""
    points, provenance = [], []
    tries = 0
    while len(points) < FALLBACK_SAMPLES and tries < FALLBACK_SAMPLES * 50:
        tries += 1
        x = rng.uniform(poly.lb, poly.ub)
        if not poly.contains(x):
            continue
        if mode == CONCRETE:
            ok = int(np.argmax(forward(net, x)[0])) != y_t
        else:
            ok = relaxation.exact_objective_at(net, state, x, y_t, record.adversary) < 0.0
        if ok:
            points.append(x)
            provenance.append((-1, 0.0))
    return points, provenance


def _recheck_batch(net, poly, y_t, mode, state, record, batch):
    if not len(batch):
        return
    if not poly.contains_batch(batch.points).all():
        raise SamplingError("batch point escaped the region")
    if mode == CONCRETE:
        if (np.argmax(forward_batch(net, batch.points), axis=1) == y_t).any():
            raise SamplingError("concrete batch contains an adversarial point")
    else:
        fallback = np.array([p[0] < 0 for p in batch.provenance])
        approx_ok = _approx_eval_batch(net, state, record, batch.points) < 0.0
        if not (approx_ok | fallback).all():
            raise SamplingError("abstract batch contains a non-counterexample")

"""End-to-end region synthesis: attack-seeded box, iterative hyperplane cuts
guided by sampled counterexamples, verification, and last-resort shrinking."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import attack as attack_mod
from . import geometry, meter, sampling
from .classifier import fit_separator
from .network import LabeledQuery, Network, forward
from .relaxation import (
    TRIANGLE,
    SolveRecord,
    verify_region,
    worst_abstract_counterexample,
)
from .sampling import ABSTRACT, CONCRETE, CounterexampleBatch, HistorySet

METHOD_FW = "fw"  # concrete counterexamples via Frank-Wolfe
METHOD_LP = "lp"  # abstract counterexamples via the verifier's witness

PROGRESS_EPS = 1e-6
STALL_LIMIT = 3  # consecutive low-progress cuts before shrinking early

SHRINK_STEPS = 12
SHRINK_THETA_TOL = 1e-3


class SynthesisError(RuntimeError):
    pass


class NoAttacksError(SynthesisError):
    """Raised when the attack collection finds no adversarial examples."""


class ShrinkCenterError(SynthesisError):
    """Raised when the shrink center itself is not adversarial."""


@dataclass(frozen=True)
class SynthesisConfig:
    s_plus: int = 200
    s_minus: int = 256
    t_max: int = 20
    period: int = 5
    history: int = 5
    kind: str = TRIANGLE
    seed: int = 0
    weight_ratio: float = 100.0
    n_centers: int = sampling.N_CENTERS
    probes: int = sampling.PROBES_PER_RHO
    accept_threshold: float = sampling.ACCEPT_THRESHOLD
    rho_iters: int = sampling.RHO_SEARCH_ITERS
    levels: int = 256

    def __post_init__(self):
        if self.t_max < 0:
            raise SynthesisError("t_max must be >= 0")
        if self.period < 1:
            raise SynthesisError("period must be >= 1")
        if self.s_plus < 1 or self.s_minus < 1:
            raise SynthesisError("sample counts must be >= 1")


@dataclass
class IterationLog:
    t: int
    method: str
    margin: float
    n_neg: int
    n_pos: int


@dataclass
class RegionReport:
    polyhedron: geometry.Polyhedron
    verified: bool
    margin: float
    cuts_used: int
    trace: list[IterationLog] = field(default_factory=list)
    over_box: geometry.BoxApprox | None = None
    under_box: geometry.BoxApprox | None = None
    wall_time: float = 0.0
    shrink_theta: float | None = None
    failure: str | None = None
    attacks: np.ndarray | None = None

    @property
    def log10_over(self) -> float | None:
        return None if self.over_box is None else self.over_box.log10_count

    @property
    def log10_under(self) -> float | None:
        return None if self.under_box is None else self.under_box.log10_count

    def log_lines(self) -> list[str]:
        lines = [
            f"t={entry.t} method={entry.method} margin={entry.margin:.6f} "
            f"neg={entry.n_neg} pos={entry.n_pos}"
            for entry in self.trace
        ]
        lines.append(
            f"final verified={self.verified} margin={self.margin:.6f} cuts={self.cuts_used}"
            + (f" shrink_theta={self.shrink_theta:.4f}" if self.shrink_theta is not None else "")
            + (f" failure={self.failure}" if self.failure else "")
        )
        return lines


def _step_seed(base: int, t: int, salt: int = 0) -> int:
    return int(np.random.SeedSequence([base & 0x7FFFFFFF, t, salt]).generate_state(1)[0])


def generate_region_step(
    method: str,
    poly: geometry.Polyhedron,
    s_minus: int,
    d_plus: np.ndarray,
    record: SolveRecord,
    history: HistorySet,
    *,
    net: Network,
    cfg: SynthesisConfig,
    seed: int,
) -> tuple[geometry.Polyhedron, CounterexampleBatch, bool]:
    """One pruning step: sample counterexamples, fit a cut, intersect.

    Returns (new region, batch, no_progress).  On an empty batch, or when the
    fitted cut does not actually remove anything, the region comes back
    unchanged with the no-progress flag set.
    """
    if len(d_plus) == 0:
        raise SynthesisError("positive dataset is empty")
    y_t = record.target
    mode = CONCRETE if method == METHOD_FW else ABSTRACT
    x_star = None
    if method == METHOD_FW:
        x_star = sampling.worst_concrete_counterexample(net, poly, y_t, seed=seed)
        if x_star is None:
            mode = ABSTRACT  # no concrete counterexample found; use the verifier witness
    if x_star is None:
        x_star = worst_abstract_counterexample(record)
    x_plus = sampling.far_point(poly, x_star)
    batch = sampling.gaussian_sample(
        net,
        poly,
        x_star,
        x_plus,
        s_minus,
        mode,
        record,
        seed=seed,
        n_centers=cfg.n_centers,
        probes=cfg.probes,
        threshold=cfg.accept_threshold,
        rho_iters=cfg.rho_iters,
    )
    if not len(batch):
        return poly, batch, True
    sampling.update_history(history, batch)
    negatives = history.points_in(poly)
    if len(negatives) == 0:
        return poly, batch, True
    sep = fit_separator(d_plus, negatives, cfg.weight_ratio)
    worst, _ = geometry.linear_extreme(poly, sep.w, "max")
    if worst <= sep.c + 1e-12:
        return poly, batch, True  # vacuous cut (degenerate separator)
    cut = poly.intersect(sep.w, sep.c)
    if geometry.is_empty(cut):
        return poly, batch, True
    return cut, batch, False


def choose_method(
    t: int,
    m_prev: str,
    poly: geometry.Polyhedron,
    d_plus: np.ndarray,
    period: int,
    s_minus: int,
    *,
    net: Network,
    cfg: SynthesisConfig,
    record: SolveRecord,
    history: HistorySet,
    seed: int,
) -> str:
    """Every `period` iterations, race both sampling methods on a trial step
    and keep the one with the better objective improvement per unit of work."""
    if t % period != 0:
        return m_prev
    base = record.objective
    scores = {}
    for salt, method in enumerate((METHOD_FW, METHOD_LP)):
        start = meter.count()
        trial, _, no_progress = generate_region_step(
            method,
            poly,
            s_minus,
            d_plus,
            record,
            history.copy(),
            net=net,
            cfg=cfg,
            seed=_step_seed(seed, t, 100 + salt),
        )
        if no_progress:
            margin = base
        else:
            _, margin, _ = verify_region(net, trial, record.target, cfg.kind, prev=record.state)
        work = max(meter.count() - start, 1)
        scores[method] = (margin - base) / work
    return METHOD_FW if scores[METHOD_FW] >= scores[METHOD_LP] else METHOD_LP


def shrink_at(poly: geometry.Polyhedron, x_c, theta: float) -> geometry.Polyhedron:
    """Translate every facet (box faces included) toward x_c by fraction theta.

    Facet normals stay fixed: row biases move by theta * distance(x_c, facet),
    so theta=0 is the identity and theta=1 collapses a bounded region to x_c.
    """
    x_c = np.asarray(x_c, dtype=float)
    if x_c.shape != (poly.dim,):
        raise SynthesisError("shrink center dimension mismatch")
    theta = float(theta)
    if not 0.0 <= theta <= 1.0:
        raise SynthesisError("theta must lie in [0, 1]")
    if poly.n_rows:
        norms = np.linalg.norm(poly.W, axis=1)
        dist = np.abs(poly.W @ x_c - poly.c) / norms
        c_new = poly.c - theta * dist * norms
    else:
        c_new = poly.c
    lb_new = poly.lb + theta * np.abs(x_c - poly.lb)
    ub_new = poly.ub - theta * np.abs(poly.ub - x_c)
    lb_new = np.minimum(lb_new, ub_new)
    return geometry.Polyhedron(poly.W, c_new, lb_new, ub_new)


@dataclass
class ShrinkOutcome:
    polyhedron: geometry.Polyhedron | None
    theta: float | None
    margin: float | None
    center: np.ndarray


def shrink_region(
    net: Network,
    poly: geometry.Polyhedron,
    d_plus: np.ndarray,
    y_t: int,
    kind: str = TRIANGLE,
) -> ShrinkOutcome:
    """Binary search for the smallest facet translation that verifies.

    The center is the coordinate-wise median of the adversarial points,
    falling back to the nearest of them when the median leaves the region.
    Returns polyhedron=None when even the full collapse fails to verify.
    """
    d_plus = np.atleast_2d(np.asarray(d_plus, dtype=float))
    if d_plus.shape[0] == 0:
        raise SynthesisError("shrinking needs a nonempty adversarial dataset")
    x_c = np.median(d_plus, axis=0)
    if not poly.contains(x_c, slack=1e-9):
        nearest = int(np.argmin(np.linalg.norm(d_plus - x_c, axis=1)))
        x_c = d_plus[nearest]
    logits, _ = forward(net, x_c)
    if int(np.argmax(logits)) != y_t:
        raise ShrinkCenterError("shrink center is not classified as the target label")

    def check(theta: float):
        region = shrink_at(poly, x_c, theta)
        ok, margin, _ = verify_region(net, region, y_t, kind)
        return ok, margin, region

    ok, margin, region = check(1.0)
    if not ok:
        return ShrinkOutcome(None, None, margin, x_c)
    best = (1.0, margin, region)
    lo, hi = 0.0, 1.0
    for _ in range(SHRINK_STEPS):
        if hi - lo <= SHRINK_THETA_TOL:
            break
        mid = 0.5 * (lo + hi)
        ok, margin, region = check(mid)
        if ok:
            hi = mid
            best = (mid, margin, region)
        else:
            lo = mid
    theta, margin, region = best
    return ShrinkOutcome(region, theta, margin, x_c)


def synthesize(net: Network, q: LabeledQuery, cfg: SynthesisConfig) -> RegionReport:
    """Run the full synthesis loop for one query; see module docstring."""
    t0 = time.perf_counter()
    d_plus_0 = attack_mod.collect_attacks(net, q, cfg.s_plus, base_seed=cfg.seed)
    if d_plus_0.shape[0] == 0:
        raise NoAttacksError("no adversarial examples found")

    poly = attack_mod.initial_region(d_plus_0, q)
    verified, margin, record = verify_region(net, poly, q.y_t, cfg.kind)
    trace = [IterationLog(0, "init", margin, 0, len(d_plus_0))]
    if verified:
        return _finish(net, q, cfg, poly, True, margin, 0, trace, t0, None, None, d_plus_0)

    rng = np.random.default_rng(cfg.seed)
    method = METHOD_FW if rng.integers(2) == 0 else METHOD_LP
    history = HistorySet(cfg.history)
    stall = 0
    cuts = 0
    d_plus = d_plus_0

    for t in range(1, cfg.t_max + 1):
        keep = poly.contains_batch(d_plus_0)
        filtered = d_plus_0[keep]
        if filtered.shape[0] == 0:
            break  # every attack point was cut away; move to shrinking
        d_plus = filtered
        method = choose_method(
            t,
            method,
            poly,
            d_plus,
            cfg.period,
            cfg.s_minus,
            net=net,
            cfg=cfg,
            record=record,
            history=history,
            seed=cfg.seed,
        )
        new_poly, batch, no_progress = generate_region_step(
            method,
            poly,
            cfg.s_minus,
            d_plus,
            record,
            history,
            net=net,
            cfg=cfg,
            seed=_step_seed(cfg.seed, t),
        )
        if no_progress:
            trace.append(IterationLog(t, method, margin, len(batch), len(d_plus)))
            stall += 1
            if stall >= STALL_LIMIT:
                break
            continue
        poly = new_poly
        cuts += 1
        prev_margin = margin
        verified, margin, record = verify_region(
            net, poly, q.y_t, cfg.kind, prev=record.state
        )
        trace.append(IterationLog(t, method, margin, len(batch), len(d_plus)))
        if verified:
            return _finish(net, q, cfg, poly, True, margin, cuts, trace, t0, None, None, d_plus_0)
        stall = stall + 1 if margin - prev_margin < PROGRESS_EPS else 0
        if stall >= STALL_LIMIT:
            break

    keep = poly.contains_batch(d_plus_0)
    shrink_pos = d_plus_0[keep] if keep.any() else d_plus
    try:
        outcome = shrink_region(net, poly, shrink_pos, q.y_t, cfg.kind)
    except ShrinkCenterError as exc:
        return _finish(net, q, cfg, poly, False, margin, cuts, trace, t0, None, str(exc), d_plus_0)
    if outcome.polyhedron is None:
        return _finish(
            net, q, cfg, poly, False, margin, cuts, trace, t0, None,
            "shrinking failed to verify even at full collapse", d_plus_0,
        )
    return _finish(
        net, q, cfg, outcome.polyhedron, True, outcome.margin, cuts, trace, t0,
        outcome.theta, None, d_plus_0,
    )


def _finish(net, q, cfg, poly, verified, margin, cuts, trace, t0, theta, failure, attacks):
    over = under = None
    try:
        over = geometry.overapprox_box(poly, cfg.levels)
        under = geometry.underapprox_box(poly, cfg.levels)
    except geometry.EmptyRegionError:
        pass
    return RegionReport(
        polyhedron=poly,
        verified=verified,
        margin=float(margin),
        cuts_used=cuts,
        trace=trace,
        over_box=over,
        under_box=under,
        wall_time=time.perf_counter() - t0,
        shrink_theta=theta,
        failure=failure,
        attacks=attacks,
    )

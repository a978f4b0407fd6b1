"""Polyhedral candidate regions, box approximations, and discrete image counts."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import lp

MEMBERSHIP_SLACK = 1e-9  # absolute, below the LP feasibility tolerance

OVER = "over"
UNDER = "under"


class GeometryError(ValueError):
    pass


class EmptyRegionError(GeometryError):
    pass


@dataclass(frozen=True)
class Polyhedron:
    """Candidate region {x : W x <= c} intersected with a bounding box."""

    W: np.ndarray  # (m, n), m may be 0
    c: np.ndarray  # (m,)
    lb: np.ndarray  # (n,)
    ub: np.ndarray  # (n,)

    def __post_init__(self):
        lb = np.asarray(self.lb, dtype=float)
        ub = np.asarray(self.ub, dtype=float)
        if lb.ndim != 1 or lb.shape != ub.shape:
            raise GeometryError("box bounds must be matching vectors")
        if (lb > ub).any():
            raise GeometryError("box lower bound exceeds upper bound")
        n = lb.shape[0]
        W = np.asarray(self.W, dtype=float).reshape(-1, n)
        c = np.asarray(self.c, dtype=float).reshape(-1)
        if W.shape[0] != c.shape[0]:
            raise GeometryError("W and c row counts disagree")
        if not (np.isfinite(W).all() and np.isfinite(c).all() and np.isfinite(lb).all() and np.isfinite(ub).all()):
            raise GeometryError("region data must be finite")
        if W.shape[0] and (np.linalg.norm(W, axis=1) == 0).any():
            raise GeometryError("zero normal vector in W")
        for arr in (W, c, lb, ub):
            arr.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "lb", lb)
        object.__setattr__(self, "ub", ub)

    @property
    def dim(self) -> int:
        return self.lb.shape[0]

    @property
    def n_rows(self) -> int:
        return self.W.shape[0]

    def contains(self, x, slack: float = MEMBERSHIP_SLACK) -> bool:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise GeometryError(f"point shape {x.shape} != ({self.dim},)")
        if (x < self.lb - slack).any() or (x > self.ub + slack).any():
            return False
        return not self.n_rows or bool((self.W @ x <= self.c + slack).all())

    def contains_batch(self, xs, slack: float = MEMBERSHIP_SLACK) -> np.ndarray:
        xs = np.asarray(xs, dtype=float).reshape(-1, self.dim)
        ok = ((xs >= self.lb - slack) & (xs <= self.ub + slack)).all(axis=1)
        if self.n_rows:
            ok &= (xs @ self.W.T <= self.c + slack).all(axis=1)
        return ok

    def intersect(self, w, c: float) -> "Polyhedron":
        """Append the half-space w . x <= c."""
        w = np.asarray(w, dtype=float)
        if w.shape != (self.dim,):
            raise GeometryError("half-space dimension mismatch")
        if np.linalg.norm(w) == 0:
            raise GeometryError("zero normal vector")
        W = np.vstack([self.W, w[None, :]]) if self.n_rows else w[None, :]
        return Polyhedron(W, np.append(self.c, float(c)), self.lb, self.ub)

    def with_box(self, lb, ub) -> "Polyhedron":
        return Polyhedron(self.W, self.c, lb, ub)

    def all_rows(self) -> tuple[np.ndarray, np.ndarray]:
        """Every constraint as rows, the box included."""
        eye = np.eye(self.dim)
        A = np.vstack([self.W, eye, -eye])
        b = np.concatenate([self.c, self.ub, -self.lb])
        return A, b


def box(lb, ub) -> Polyhedron:
    lb = np.asarray(lb, dtype=float)
    return Polyhedron(np.zeros((0, lb.shape[0])), np.zeros(0), lb, ub)


@dataclass(frozen=True)
class BoxApprox:
    lower: np.ndarray
    upper: np.ndarray
    kind: str
    log10_count: float

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=float)
        upper = np.asarray(self.upper, dtype=float)
        if (lower > upper + 1e-12).any():
            raise GeometryError("box approximation has inverted bounds")
        if self.kind not in (OVER, UNDER):
            raise GeometryError(f"unknown box kind {self.kind!r}")
        upper = np.maximum(lower, upper)
        for arr in (lower, upper):
            arr.setflags(write=False)
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)


def interior_point(poly: Polyhedron) -> np.ndarray:
    """A deep feasible point (Chebyshev-style max-slack LP); raises if P is empty."""
    n = poly.dim
    prog = lp.LinearProgram(n + 1, objective=np.append(np.zeros(n), -1.0))
    for w, ci in zip(poly.W, poly.c):
        prog.add(np.append(w, np.linalg.norm(w)), "<=", ci)
    for j in range(n):
        e = np.zeros(n + 1)
        e[j] = 1.0
        e[n] = 1.0
        prog.add(e, "<=", poly.ub[j])
        e = np.zeros(n + 1)
        e[j] = -1.0
        e[n] = 1.0
        prog.add(e, "<=", -poly.lb[j])
    prog.set_bounds(n, 0.0, None)
    sol = lp.solve(prog)
    if sol.status != lp.OPTIMAL:
        raise EmptyRegionError("region is empty")
    return sol.primal[:n]


def is_empty(poly: Polyhedron) -> bool:
    try:
        interior_point(poly)
        return False
    except EmptyRegionError:
        return True


def _extreme(poly: Polyhedron, coeffs: np.ndarray, sense: str) -> tuple[float, np.ndarray]:
    prog = lp.LinearProgram(poly.dim, objective=coeffs, sense=sense)
    for w, ci in zip(poly.W, poly.c):
        prog.add(w, "<=", ci)
    for j in range(poly.dim):
        prog.set_bounds(j, poly.lb[j], poly.ub[j])
    sol = lp.solve(prog)
    if sol.status != lp.OPTIMAL:
        raise EmptyRegionError("region is empty")
    return sol.value, sol.primal


def linear_extreme(poly: Polyhedron, coeffs, sense: str = "min") -> tuple[float, np.ndarray]:
    """Optimum of a linear function over the region; (value, argpoint)."""
    return _extreme(poly, np.asarray(coeffs, dtype=float), sense)


def overapprox_box(poly: Polyhedron, levels: int = 256) -> BoxApprox:
    """Per-dimension min/max box via 2*n LPs; the region is inside it."""
    n = poly.dim
    lo = np.empty(n)
    hi = np.empty(n)
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        lo[j], _ = _extreme(poly, e, "min")
        hi[j], _ = _extreme(poly, e, "max")
    hi = np.maximum(lo, hi)
    return BoxApprox(lo, hi, OVER, log10_box_count(lo, hi, levels))


def underapprox_box(poly: Polyhedron, levels: int = 256) -> BoxApprox:
    """Largest-min-width axis-aligned box inside the region.

    LP over center x_c and half-widths r: maximize t + 1e-6 * sum(r) with
    r_j >= t >= 0 and, for every row, W_i . x_c + sum_j |W_ij| r_j <= c_i.
    The tiny secondary term breaks ties toward volume.
    """
    n = poly.dim
    A, b = poly.all_rows()
    # variables: x_c (n), r (n), t (1)
    obj = np.concatenate([np.zeros(n), np.full(n, 1e-6), [1.0]])
    prog = lp.LinearProgram(2 * n + 1, objective=obj, sense="max")
    for row, rhs in zip(A, b):
        prog.add(np.concatenate([row, np.abs(row), [0.0]]), "<=", rhs)
    for j in range(n):
        e = np.zeros(2 * n + 1)
        e[n + j] = -1.0
        e[2 * n] = 1.0
        prog.add(e, "<=", 0.0)  # t <= r_j
        prog.set_bounds(n + j, 0.0, None)
    prog.set_bounds(2 * n, 0.0, None)
    sol = lp.solve(prog)
    if sol.status != lp.OPTIMAL:
        raise EmptyRegionError("region is empty")
    xc, r = sol.primal[:n], np.maximum(sol.primal[n : 2 * n], 0.0)
    if np.max(A @ xc + np.abs(A) @ r - b) > lp.FEAS_TOL:
        raise GeometryError("inscribed box certificate violated")
    return BoxApprox(xc - r, xc + r, UNDER, log10_box_count(xc - r, xc + r, levels))


def log10_box_count(lower, upper, levels: int = 256) -> float:
    """log10 of the number of discrete images the box contains."""
    widths = np.maximum(np.asarray(upper, dtype=float) - np.asarray(lower, dtype=float), 0.0)
    per_pixel = np.floor(widths * (levels - 1)) + 1.0
    return float(np.sum(np.log10(per_pixel)))


def log10_discrete_count(approx: BoxApprox, levels: int = 256) -> float:
    return log10_box_count(approx.lower, approx.upper, levels)


def sensitivity_map(approx: BoxApprox, levels: int = 256) -> np.ndarray:
    """Per-pixel count of discrete values, each in [1, levels]."""
    widths = np.maximum(approx.upper - approx.lower, 0.0)
    values = np.floor(widths * (levels - 1)).astype(int) + 1
    return np.clip(values, 1, levels)


# --- artifact formats --------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _jsonify(obj):
    if isinstance(obj, (np.floating, float)):
        return float(_fmt(obj))
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return [_jsonify(v) for v in obj.tolist()]
    if isinstance(obj, (list, tuple)):
        return [_jsonify(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    return obj


def region_to_json(poly: Polyhedron, meta: dict | None = None) -> str:
    doc = {
        "dim": poly.dim,
        "W": _jsonify(poly.W),
        "c": _jsonify(poly.c),
        "box": {"lb": _jsonify(poly.lb), "ub": _jsonify(poly.ub)},
        "meta": _jsonify(meta or {}),
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def save_region(path, poly: Polyhedron, meta: dict | None = None) -> None:
    atomic_write_text(path, region_to_json(poly, meta) + "\n")


def load_region(path) -> tuple[Polyhedron, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        dim = int(doc["dim"])
        W = np.array(doc["W"], dtype=float).reshape(-1, dim)
        c = np.array(doc["c"], dtype=float)
        b = doc["box"]
        poly = Polyhedron(W, c, np.array(b["lb"], dtype=float), np.array(b["ub"], dtype=float))
    except (KeyError, TypeError, ValueError) as exc:
        raise GeometryError(f"bad region file: {exc}") from exc
    return poly, doc.get("meta", {})


def sensitivity_csv(values: np.ndarray) -> str:
    return ",".join(str(int(v)) for v in values) + "\n"


def sensitivity_pgm(values: np.ndarray, levels: int = 256) -> bytes:
    """Binary P5 graymap, one row, maxval 255, pixel = value - 1."""
    vals = np.clip(np.asarray(values, dtype=int) - 1, 0, levels - 1).astype(np.uint8)
    header = f"P5\n{vals.size} 1\n255\n".encode("ascii")
    return header + vals.tobytes()


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)

"""Concrete adversarial attacks (PGD and Frank-Wolfe) and the initial region."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .network import LabeledQuery, Network, forward, margin, margin_gradient

PGD = "pgd"
FW = "fw"

_DEDUP_RESOLUTION = 1e-9


class AttackError(ValueError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    seed: int = 0
    steps: int = 40
    step_size: float | None = None  # defaults to epsilon / 10
    restarts: int = 1
    method: str = PGD

    def __post_init__(self):
        if self.steps < 1:
            raise AttackError("steps must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise AttackError("step_size must be positive")
        if self.restarts < 1:
            raise AttackError("restarts must be >= 1")
        if self.method not in (PGD, FW):
            raise AttackError(f"unknown attack method {self.method!r}")


def _ball(q: LabeledQuery) -> tuple[np.ndarray, np.ndarray]:
    lo = np.clip(q.x_o - q.epsilon, 0.0, 1.0)
    hi = np.clip(q.x_o + q.epsilon, 0.0, 1.0)
    return lo, hi


def _is_hit(net: Network, q: LabeledQuery, x: np.ndarray) -> bool:
    logits, _ = forward(net, x)
    return int(np.argmax(logits)) == q.y_t


def attack(net: Network, q: LabeledQuery, cfg: AttackConfig) -> np.ndarray | None:
    """Search the epsilon ball for a point the network classifies as y_t.

    Returns None when the search fails; any returned point is re-verified.
    """
    if q.x_o.shape != (net.input_dim,):
        raise AttackError("query dimension does not match the network")
    lo, hi = _ball(q)
    rng = np.random.default_rng(cfg.seed)
    runner = _pgd if cfg.method == PGD else _frank_wolfe
    for _ in range(cfg.restarts):
        x = runner(net, q, cfg, lo, hi, rng)
        if x is not None and _is_hit(net, q, x):
            if np.abs(x - q.x_o).max() > q.epsilon + 1e-12:
                raise AttackError("attack left the epsilon ball")
            return x
    return None


def _pgd(net, q, cfg, lo, hi, rng):
    step = cfg.step_size if cfg.step_size is not None else q.epsilon / 10.0
    x = rng.uniform(lo, hi)
    for _ in range(cfg.steps):
        if _is_hit(net, q, x):
            return x
        g = margin_gradient(net, x, q.y_t)
        x = np.clip(x + step * np.sign(g), lo, hi)
    return x if _is_hit(net, q, x) else None


def _frank_wolfe(net, q, cfg, lo, hi, rng):
    # ascend the target margin; the linear oracle over a box is the signed corner
    x = rng.uniform(lo, hi)
    for _ in range(cfg.steps):
        if _is_hit(net, q, x):
            return x
        g = margin_gradient(net, x, q.y_t)
        s = np.where(g > 0, hi, lo)
        d = s - x
        if np.abs(d).max() < 1e-14:
            break
        base = margin(net, x, q.y_t)
        gamma, best = 0.0, base
        c = 1.0
        for _ in range(20):  # backtracking line search on the piecewise-linear margin
            val = margin(net, x + c * d, q.y_t)
            if val > best:
                gamma, best = c, val
                break
            c *= 0.5
        if gamma == 0.0:
            break
        x = x + gamma * d
    return x if _is_hit(net, q, x) else None


def collect_attacks(
    net: Network, q: LabeledQuery, s_plus: int, base_seed: int = 0
) -> np.ndarray:
    """Up to s_plus distinct attack points, seeds split between PGD and FW."""
    if s_plus < 1:
        raise AttackError("s_plus must be >= 1")
    found: list[np.ndarray] = []
    seen: set[tuple] = set()
    for i in range(s_plus):
        cfg = AttackConfig(seed=base_seed + i, method=PGD if i % 2 == 0 else FW)
        p = attack(net, q, cfg)
        if p is None:
            continue
        key = tuple(np.round(p / _DEDUP_RESOLUTION).astype(np.int64).tolist())
        if key in seen:
            continue
        seen.add(key)
        found.append(p)
    if not found:
        return np.zeros((0, net.input_dim))
    return np.array(found)


def initial_region(d_plus: np.ndarray, q: LabeledQuery | None = None) -> geometry.Polyhedron:
    """Bounding box of the attack points, clipped to the ball and the unit box.

    Pass q=None to skip the clipping (test mode for unconstrained point sets).
    """
    d_plus = np.asarray(d_plus, dtype=float)
    if d_plus.ndim != 2 or d_plus.shape[0] == 0:
        raise AttackError("attack dataset is empty")
    lb = d_plus.min(axis=0)
    ub = d_plus.max(axis=0)
    if q is not None:
        ball_lo, ball_hi = _ball(q)
        lb = np.maximum(lb, ball_lo)
        ub = np.minimum(ub, ball_hi)
        if (lb > ub).any():
            raise AttackError("attack points lie outside the epsilon ball")
    return geometry.box(lb, ub)

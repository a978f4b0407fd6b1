"""Separating hyperplanes between adversarial points and counterexamples."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

L2_REG = 1e-6
MAX_ITERS = 5000
GRAD_TOL = 1e-6


class ClassifierError(ValueError):
    pass


@dataclass(frozen=True)
class LinearSeparator:
    """Half-space w . x <= c keeps the adversarial side; counterexamples are removed."""

    w: np.ndarray
    c: float

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if np.linalg.norm(w) == 0:
            raise ClassifierError("separator normal must be nonzero")
        w.setflags(write=False)
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "c", float(self.c))

    def keeps(self, x) -> bool:
        return float(self.w @ np.asarray(x, dtype=float)) <= self.c

    def keeps_batch(self, xs) -> np.ndarray:
        return np.asarray(xs, dtype=float) @ self.w <= self.c


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _log1p_exp(z: np.ndarray) -> np.ndarray:
    return np.where(z > 0, z + np.log1p(np.exp(-np.abs(z))), np.log1p(np.exp(z)))


def fit_separator(
    positives, negatives, weight_ratio: float = 100.0
) -> LinearSeparator:
    """Weighted logistic regression; counterexamples weigh weight_ratio times more.

    Features are standardized for the fit and the separator un-standardized
    before returning.  When the fitted direction separates the data, the
    threshold is re-centered so every negative is strictly removed.
    """
    pos = np.atleast_2d(np.asarray(positives, dtype=float))
    neg = np.atleast_2d(np.asarray(negatives, dtype=float))
    if pos.shape[0] == 0 or neg.shape[0] == 0:
        raise ClassifierError("both classes must be nonempty")
    if pos.shape[1] != neg.shape[1]:
        raise ClassifierError("class dimensions disagree")

    X = np.vstack([pos, neg])
    y = np.concatenate([np.zeros(len(pos)), np.ones(len(neg))])  # 1 = remove
    sw = np.where(y == 1, float(weight_ratio), 1.0)
    sw = sw / sw.sum()

    mu = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale < 1e-12] = 1.0
    Xs = (X - mu) / scale

    w = np.zeros(X.shape[1])
    b = 0.0

    def loss_grad(w, b):
        z = Xs @ w + b
        p = _sigmoid(z)
        # weighted logistic loss: -[y log p + (1-y) log(1-p)]
        loss = float(sw @ _log1p_exp(np.where(y == 1, -z, z))) + 0.5 * L2_REG * float(w @ w)
        r = sw * (p - y)
        return loss, Xs.T @ r + L2_REG * w, float(r.sum())

    step = 1.0
    loss, gw, gb = loss_grad(w, b)
    for _ in range(MAX_ITERS):
        gnorm = np.sqrt(float(gw @ gw) + gb * gb)
        if gnorm <= GRAD_TOL:
            break
        while step > 1e-12:
            w2, b2 = w - step * gw, b - step * gb
            loss2, gw2, gb2 = loss_grad(w2, b2)
            if loss2 < loss - 1e-4 * step * gnorm * gnorm:
                break
            step *= 0.5
        else:
            break
        w, b, loss, gw, gb = w2, b2, loss2, gw2, gb2
        step = min(step * 2.0, 1e6)

    # un-standardize: w_s.(x-mu)/scale + b > 0  <=>  (w_s/scale).x > -b + w_s.mu/scale
    ws = w / scale
    cs = -b + float((w / scale) @ mu)

    if np.linalg.norm(ws) < 1e-12:
        # degenerate data (e.g. identical classes); return a fixed direction
        direction = neg.mean(axis=0) - pos.mean(axis=0)
        if np.linalg.norm(direction) < 1e-12:
            direction = np.zeros(X.shape[1])
            direction[0] = 1.0
        ws = direction / np.linalg.norm(direction)
        cs = float(ws @ X.mean(axis=0))
        return LinearSeparator(ws, cs)

    pos_scores = pos @ ws
    neg_scores = neg @ ws
    if pos_scores.max() < neg_scores.min():
        cs = 0.5 * (pos_scores.max() + neg_scores.min())
    return LinearSeparator(ws, cs)

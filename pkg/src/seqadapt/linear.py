"""Binary hinge-loss classifiers with general + domain weight decomposition.

Composed weights are ``w_s = theta_g + theta_s`` and ``w_t = theta_g + theta_t``.
Regularizing the blocks separately, ``lam * (|g|^2 + |s|^2)``, equals
``lam/2 * |w_s|^2 + lam/2 * |g - s|^2``, so the joint objective is the two
per-domain SVM objectives at half strength plus a pull of each domain block
toward the general one.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .mathcore import Rng


@dataclass
class LinearAugModel:
    theta_g: np.ndarray
    theta_s: np.ndarray
    theta_t: np.ndarray
    lam: float

    def __post_init__(self):
        if not (self.theta_g.shape == self.theta_s.shape == self.theta_t.shape):
            raise ValueError("theta blocks must share one dimension")
        if self.lam <= 0:
            raise ValueError("lambda must be > 0")

    @property
    def w_s(self) -> np.ndarray:
        return self.theta_g + self.theta_s

    @property
    def w_t(self) -> np.ndarray:
        return self.theta_g + self.theta_t

    def copy(self) -> "LinearAugModel":
        return LinearAugModel(self.theta_g.copy(), self.theta_s.copy(), self.theta_t.copy(), self.lam)

    @classmethod
    def random(cls, d: int, lam: float, rng: Rng, scale: float = 1.0) -> "LinearAugModel":
        return cls(rng.normal(d) * scale, rng.normal(d) * scale, rng.normal(d) * scale, lam)


def _check_labels(y: np.ndarray):
    if not np.all((y == 1) | (y == -1)):
        raise ValueError("labels must be -1 or +1")


def mean_hinge(w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(np.maximum(0.0, 1.0 - y * (X @ w))))


def aug_objective(model: LinearAugModel, source: tuple[np.ndarray, np.ndarray],
                  target: tuple[np.ndarray, np.ndarray]) -> float:
    Xs, ys = source
    Xt, yt = target
    _check_labels(ys)
    _check_labels(yt)
    g, s, t, lam = model.theta_g, model.theta_s, model.theta_t, model.lam
    return (
        mean_hinge(model.w_s, Xs, ys)
        + lam * (g @ g + s @ s)
        + mean_hinge(model.w_t, Xt, yt)
        + lam * (g @ g + t @ t)
    )


def _hinge_subgrad(w, X, y):
    if len(y) == 0:
        return np.zeros_like(w)
    # margin exactly 1 counts as satisfied: subgradient 0 at the kink
    active = y * (X @ w) < 1.0
    return -(X[active].T @ y[active]) / len(y)


def aug_subgradient(model: LinearAugModel, source, target) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    Xs, ys = source
    Xt, yt = target
    gs = _hinge_subgrad(model.w_s, Xs, ys)
    gt = _hinge_subgrad(model.w_t, Xt, yt)
    lam = model.lam
    dg = gs + gt + 4.0 * lam * model.theta_g
    ds = gs + 2.0 * lam * model.theta_s
    dt = gt + 2.0 * lam * model.theta_t
    return dg, ds, dt


def reg_identity(theta_g, theta_d) -> tuple[float, float]:
    """(2(|g|^2 + |d|^2) - |g + d|^2, |g - d|^2); equal up to rounding."""
    g = np.asarray(theta_g, dtype=np.float64)
    d = np.asarray(theta_d, dtype=np.float64)
    if g.shape != d.shape:
        raise ValueError("dimension mismatch")
    lhs = 2.0 * (g @ g + d @ d) - (g + d) @ (g + d)
    rhs = (g - d) @ (g - d)
    return float(lhs), float(rhs)


def train_linear(model: LinearAugModel, source, target, steps: int, step_size: float,
                 freeze_general: bool = False) -> tuple[LinearAugModel, LinearAugModel]:
    """Fixed-step subgradient descent.

    Returns (last iterate, running average of iterates); the averaged iterate
    is the one with the usual convergence guarantee.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    _check_labels(source[1])
    _check_labels(target[1])
    cur = model.copy()
    avg = model.copy()
    for k in range(1, steps + 1):
        dg, ds, dt = aug_subgradient(cur, source, target)
        if not freeze_general:
            cur.theta_g -= step_size * dg
        cur.theta_s -= step_size * ds
        cur.theta_t -= step_size * dt
        for name in ("theta_g", "theta_s", "theta_t"):
            a = getattr(avg, name)
            a += (getattr(cur, name) - a) / (k + 1)
    return cur, avg


def svm_objective(w: np.ndarray, X: np.ndarray, y: np.ndarray, lam: float) -> float:
    _check_labels(y)
    return mean_hinge(w, X, y) + lam * float(w @ w)


def train_svm(w: np.ndarray, X: np.ndarray, y: np.ndarray, lam: float, steps: int, step_size: float) -> np.ndarray:
    """Single-domain counterpart of ``train_linear`` (last iterate)."""
    w = np.array(w, dtype=np.float64)
    for _ in range(steps):
        w -= step_size * (_hinge_subgrad(w, X, y) + 2.0 * lam * w)
    return w


def accuracy(w: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.where(X @ w > 0, 1, -1) == y))


def read_labeled_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Rows of ``label, x1, ..., xd``; label must be -1 or +1."""
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            try:
                values = [float(v) for v in row]
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field") from None
            if values[0] not in (-1.0, 1.0):
                raise ValueError(f"{path}:{lineno}: label must be -1 or +1")
            if rows and len(values) - 1 != len(rows[0]):
                raise ValueError(f"{path}:{lineno}: expected {len(rows[0])} features")
            labels.append(values[0])
            rows.append(values[1:])
    return np.array(rows, dtype=np.float64).reshape(len(rows), -1), np.array(labels)

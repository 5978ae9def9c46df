"""Second-order view of why averaging checkpoints helps.

Around an optimum ``theta*`` with Hessian ``H`` the loss is
``L(theta*) + 0.5 * d^T H d`` for ``d = theta - theta*``.  For ``k``
checkpoints with deviations ``d_i`` and ``Q_ij = d_i^T H d_j``:

* mean member loss  = ``L* + diag / (2k)``
* merged loss       = ``L* + (diag + cross) / (2k^2)``

so the uniform average beats the members' mean exactly when
``cross < (k - 1) * diag``.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

MAX_DENSE_DIM = 200
SYMMETRY_TOL = 1e-12
TIE_BAND = 1e-12


class AnalysisError(ValueError):
    pass


@dataclass
class QuadraticOracle:
    theta_star: np.ndarray
    hessian: np.ndarray
    loss_at_opt: float = 0.0

    def __post_init__(self) -> None:
        self.theta_star = np.asarray(self.theta_star, dtype=np.float64).reshape(-1)
        self.hessian = np.asarray(self.hessian, dtype=np.float64)
        d = self.theta_star.size
        if self.hessian.shape != (d, d):
            raise AnalysisError(f"hessian shape {self.hessian.shape} does not match dimension {d}")
        scale = max(1.0, float(np.max(np.abs(self.hessian))))
        if np.max(np.abs(self.hessian - self.hessian.T)) > SYMMETRY_TOL * scale:
            raise AnalysisError("hessian is not symmetric")
        if np.min(np.linalg.eigvalsh(self.hessian)) <= 0:
            raise AnalysisError("hessian is not positive definite")
        self.loss_at_opt = float(self.loss_at_opt)

    @property
    def dim(self) -> int:
        return self.theta_star.size

    @classmethod
    def random(cls, rng: np.random.Generator, d: int, cond: float = 100.0) -> "QuadraticOracle":
        """Random instance with eigenvalues log-spaced in ``[1/cond, 1]``."""
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        eig = np.logspace(-np.log10(cond), 0.0, d)
        h = (q * eig) @ q.T
        return cls(rng.standard_normal(d), 0.5 * (h + h.T), abs(float(rng.standard_normal())))


def _vec(theta, d: int) -> np.ndarray:
    v = np.asarray(theta, dtype=np.float64).reshape(-1)
    if v.size != d:
        raise AnalysisError(f"parameter vector has {v.size} entries, oracle has {d}")
    return v


def quadratic_loss(oracle: QuadraticOracle, theta) -> float:
    delta = _vec(theta, oracle.dim) - oracle.theta_star
    return oracle.loss_at_opt + 0.5 * float(delta @ oracle.hessian @ delta)


@dataclass
class TaylorReport:
    q_matrix: np.ndarray
    diag_sum: float
    cross_sum: float
    condition_holds: bool
    avg_individual_loss: float
    merged_loss_predicted: float
    merged_loss_exact: float | None = None
    weights: list[float] = field(default_factory=list)
    notes: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return self.q_matrix.shape[0]

    @property
    def benefit(self) -> float:
        """``avg_individual_loss - merged_loss_predicted``; positive when merging helps."""
        return self.avg_individual_loss - self.merged_loss_predicted

    @property
    def cross_ratio(self) -> float:
        return self.cross_sum / self.diag_sum if self.diag_sum else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["q_matrix"] = self.q_matrix.tolist()
        d["k"] = self.k
        d["cross_ratio"] = self.cross_ratio
        return d

    def save(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return path


def merging_condition(diag_sum: float, cross_sum: float, k: int) -> bool:
    """``cross < (k-1) * diag`` with ties (relative to the magnitudes) treated as failure."""
    lhs, rhs = cross_sum, (k - 1) * diag_sum
    return rhs - lhs > TIE_BAND * max(abs(lhs), abs(rhs), np.finfo(float).tiny)


def taylor_report(oracle: QuadraticOracle, thetas: Sequence, weights: Sequence[float] | None = None) -> TaylorReport:
    """Quadratic-form breakdown for merging ``thetas`` around ``oracle``.

    Without ``weights`` the merge is the uniform mean.  With weights the
    mean member loss and merged losses use them (``sum_ij w_i w_j Q_ij``);
    the diag/cross sums and the verdict are still the unweighted ones.
    """
    k = len(thetas)
    if k < 2:
        raise AnalysisError(f"need at least two parameter vectors, got {k}")
    deltas = np.stack([_vec(t, oracle.dim) for t in thetas]) - oracle.theta_star
    q = deltas @ oracle.hessian @ deltas.T
    q = 0.5 * (q + q.T)
    diag = float(np.trace(q))
    cross = float(np.sum(q) - diag)
    l_star = oracle.loss_at_opt

    if weights is None:
        w = np.full(k, 1.0 / k)
        avg = l_star + diag / (2 * k)
        predicted = l_star + (diag + cross) / (2 * k * k)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (k,):
            raise AnalysisError(f"{w.size} weights for {k} parameter vectors")
        avg = l_star + 0.5 * float(w @ np.diag(q))
        predicted = l_star + 0.5 * float(w @ q @ w)
    stacked = np.stack([_vec(t, oracle.dim) for t in thetas])
    merged_theta = stacked.mean(axis=0) if weights is None else w @ stacked

    return TaylorReport(
        q_matrix=q,
        diag_sum=diag,
        cross_sum=cross,
        condition_holds=merging_condition(diag, cross, k),
        avg_individual_loss=avg,
        merged_loss_predicted=predicted,
        merged_loss_exact=quadratic_loss(oracle, merged_theta),
        weights=w.tolist(),
    )


def empirical_hessian(loss_fn: Callable[[np.ndarray], float], theta, h: float = 1e-4) -> np.ndarray:
    """Dense Hessian of a black-box loss by central second differences, symmetrized."""
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    d = theta.size
    if d > MAX_DENSE_DIM:
        raise AnalysisError(f"dimension {d} exceeds the dense Hessian cap of {MAX_DENSE_DIM}")

    def f(x):
        value = float(loss_fn(x))
        if not np.isfinite(value):
            raise AnalysisError("non-finite loss while probing the Hessian")
        return value

    f0 = f(theta)
    eye = np.eye(d) * h
    plus = np.array([f(theta + eye[i]) for i in range(d)])
    minus = np.array([f(theta - eye[i]) for i in range(d)])
    hess = np.empty((d, d))
    for i in range(d):
        hess[i, i] = (plus[i] - 2.0 * f0 + minus[i]) / (h * h)
        for j in range(i + 1, d):
            pp = f(theta + eye[i] + eye[j])
            pm = f(theta + eye[i] - eye[j])
            mp = f(theta - eye[i] + eye[j])
            mm = f(theta - eye[i] - eye[j])
            hess[i, j] = hess[j, i] = (pp - pm - mp + mm) / (4.0 * h * h)
    return 0.5 * (hess + hess.T)


def trajectory_report(
    loss_fn: Callable[[np.ndarray], float],
    thetas: Sequence[np.ndarray],
    candidates: Sequence[np.ndarray] | None = None,
    h: float = 1e-4,
) -> TaylorReport:
    """Taylor report for real checkpoints, where the optimum is unknown.

    The reference point is the lowest-loss vector among the checkpoints,
    their uniform mean and any extra ``candidates``; the Hessian there is
    estimated numerically and regularized to positive definite if needed.
    """
    pool = [np.asarray(t, dtype=np.float64) for t in thetas]
    pool.append(np.mean(pool, axis=0))
    pool.extend(np.asarray(c, dtype=np.float64) for c in (candidates or ()))
    losses = [float(loss_fn(p)) for p in pool]
    best = int(np.argmin(losses))
    hess = empirical_hessian(loss_fn, pool[best], h)
    eig = np.linalg.eigvalsh(hess)
    shift = 0.0
    if eig[0] <= 0:
        shift = 1e-8 * max(1.0, float(eig[-1])) - float(eig[0])
        hess = hess + shift * np.eye(hess.shape[0])
    report = taylor_report(QuadraticOracle(pool[best], hess, losses[best]), thetas)
    report.notes = {
        "reference": "best of checkpoints/mean/candidates by loss",
        "reference_index": best,
        "reference_loss": losses[best],
        "hessian_min_eig": float(eig[0]),
        "hessian_shift": shift,
        "merged_loss_true": float(loss_fn(np.mean(pool[: len(thetas)], axis=0))),
        "avg_individual_loss_true": float(np.mean(losses[: len(thetas)])),
    }
    return report


@dataclass
class SurfaceGrid:
    xs: np.ndarray
    ys: np.ndarray
    values: np.ndarray  # shape (len(ys), len(xs))
    points: list[tuple[str, float, float, float | None]]

    def rows(self) -> list[tuple[float, float, float]]:
        return [(float(x), float(y), float(self.values[iy, ix]))
                for iy, y in enumerate(self.ys) for ix, x in enumerate(self.xs)]

    def argmin(self) -> tuple[int, int]:
        iy, ix = np.unravel_index(int(np.argmin(self.values)), self.values.shape)
        return int(ix), int(iy)

    def write_csv(self, out_dir: str | os.PathLike) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        surface, points = out / "surface.csv", out / "points.csv"
        with open(surface, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "y", "value"])
            w.writerows([repr(x), repr(y), repr(v)] for x, y, v in self.rows())
        with open(points, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "x", "y", "value"])
            w.writerows([label, repr(x), repr(y), "" if v is None else repr(v)] for label, x, y, v in self.points)
        return surface, points


def surface_grid(
    fn: Callable[[np.ndarray], float],
    base_theta,
    axis_i: int,
    axis_j: int,
    ranges: tuple[tuple[float, float], tuple[float, float]],
    resolution: int | tuple[int, int] = 21,
    checkpoints: Sequence[tuple[str, np.ndarray]] = (),
) -> SurfaceGrid:
    """Evaluate ``fn`` on a 2-D slice through ``base_theta``.

    Only coordinates ``axis_i`` (x) and ``axis_j`` (y) vary, over the absolute
    value ranges given.  Each labelled checkpoint is projected onto the slice
    as its own ``(theta[axis_i], theta[axis_j])`` together with ``fn`` at the
    full checkpoint.
    """
    base = np.asarray(base_theta, dtype=np.float64).reshape(-1)
    d = base.size
    for axis in (axis_i, axis_j):
        if not 0 <= axis < d:
            raise AnalysisError(f"axis index {axis} out of range for dimension {d}")
    if axis_i == axis_j:
        raise AnalysisError("axis indices must differ")
    nx, ny = (resolution, resolution) if isinstance(resolution, int) else resolution
    if nx < 2 or ny < 2:
        raise AnalysisError("resolution must be >= 2 on each axis")
    xs = np.linspace(ranges[0][0], ranges[0][1], nx)
    ys = np.linspace(ranges[1][0], ranges[1][1], ny)
    values = np.empty((ny, nx))
    probe = base.copy()
    for iy, y in enumerate(ys):
        for ix, x in enumerate(xs):
            probe[axis_i], probe[axis_j] = x, y
            values[iy, ix] = fn(probe)
    points = []
    for label, theta in checkpoints:
        t = np.asarray(theta, dtype=np.float64).reshape(-1)
        if t.size != d:
            raise AnalysisError(f"checkpoint {label!r} has {t.size} entries, expected {d}")
        points.append((label, float(t[axis_i]), float(t[axis_j]), float(fn(t))))
    return SurfaceGrid(xs, ys, values, points)

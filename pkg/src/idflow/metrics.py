"""Evaluation metrics and the serialized evaluation report."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .exceptions import DegenerateInputError, InvalidArgumentError


def _points(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != 3 or len(x) < 1:
        raise InvalidArgumentError(f"expected (n, 3) coordinates with n >= 1, got {x.shape}")
    return x


def rmsd(x, y) -> float:
    """Root mean squared deviation without any superposition."""
    x, y = _points(x), _points(y)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch: {x.shape} vs {y.shape}")
    return float(np.sqrt(np.mean(np.sum((x - y) ** 2, axis=1))))


def kabsch_superpose(x, y):
    """Optimal proper rotation ``R`` and translation ``t`` minimizing ``|R x + t - y|``."""
    x, y = _points(x), _points(y)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch: {x.shape} vs {y.shape}")
    if len(x) < 3:
        raise DegenerateInputError("superposition needs at least 3 points")
    cx, cy = x.mean(axis=0), y.mean(axis=0)
    xc, yc = x - cx, y - cy
    for pts in (xc, yc):
        sv = np.linalg.svd(pts, compute_uv=False)
        if sv[1] <= 1e-10 * max(sv[0], 1.0):
            raise DegenerateInputError("point set has rank < 2")
    H = xc.T @ yc
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = Vt.T @ D @ U.T
    return R, cy - R @ cx


def kabsch_rmsd(x, y) -> float:
    """RMSD after optimal rigid superposition of ``x`` onto ``y``."""
    R, t = kabsch_superpose(x, y)
    return rmsd(np.asarray(x) @ R.T + t, y)


def fraction_below(values, threshold: float) -> float:
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise InvalidArgumentError("fraction_below of an empty sequence")
    return float(np.count_nonzero(v < threshold) / v.size)


def median(values) -> float:
    """Lower median (no averaging for even lengths)."""
    v = np.sort(np.asarray(values, dtype=float).ravel())
    if v.size == 0:
        raise InvalidArgumentError("median of an empty sequence")
    return float(v[(v.size - 1) // 2])


def _mean_pairwise(a: np.ndarray, b: np.ndarray) -> float:
    diff = a[:, None, :] - b[None, :, :]
    return float(np.mean(np.sqrt(np.sum(diff * diff, axis=-1))))


def energy_distance_2d(samples_a, samples_b) -> float:
    """Statistical energy distance ``2E|A-B| - E|A-A'| - E|B-B'|`` over all pairs."""
    a = np.asarray(samples_a, dtype=float)
    b = np.asarray(samples_b, dtype=float)
    if a.ndim != 2 or b.ndim != 2 or len(a) == 0 or len(b) == 0:
        raise InvalidArgumentError("energy distance needs two non-empty (n, d) sample sets")
    if a.shape[1] != b.shape[1]:
        raise InvalidArgumentError("sample sets differ in dimension")
    value = 2.0 * _mean_pairwise(a, b) - _mean_pairwise(a, a) - _mean_pairwise(b, b)
    return max(value, 0.0)


@dataclass
class EvalReport:
    rmsds: list = field(default_factory=list)
    fraction_below: dict = field(default_factory=dict)
    median: Optional[float] = None
    mean_idempotency_residual: Optional[float] = None
    energy_distance: Optional[float] = None
    extra: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_rmsds(cls, rmsds, thresholds=(2.0, 5.0), **kwargs) -> "EvalReport":
        rmsds = [float(r) for r in rmsds]
        return cls(
            rmsds=rmsds,
            fraction_below={f"{th:g}": fraction_below(rmsds, th) for th in thresholds},
            median=median(rmsds),
            **kwargs,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def save(self, json_path: os.PathLike, csv_path: Optional[os.PathLike] = None) -> None:
        with open(json_path, "w") as fh:
            fh.write(self.to_json() + "\n")
        if csv_path is not None:
            self.write_csv(csv_path)

    def table_row(self) -> dict:
        row = {f"%<{k}": v for k, v in self.fraction_below.items()}
        row["Med."] = self.median
        row["idempotency"] = self.mean_idempotency_residual
        row["energy_distance"] = self.energy_distance
        return row

    def write_csv(self, path: os.PathLike) -> None:
        row = self.table_row()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(row))
            w.writerow(["" if v is None else f"{v:.17g}" for v in row.values()])

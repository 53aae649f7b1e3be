"""Energies of predicted clean samples.

All energies are non-negative and are only ever compared with each other;
no partition function is computed.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgumentError
from .geometry import FrameChain, state_distance


def _flat(x) -> np.ndarray:
    if isinstance(x, FrameChain):
        raise InvalidArgumentError("expected a Euclidean state")
    return np.asarray(x, dtype=float)


def idempotency_residual(model, x, t) -> np.ndarray:
    """``|| f(f(x, t), t) - f(x, t) ||`` per item (a float for a single state)."""
    once = model(x, t)
    twice = model(once, t)
    res = state_distance(twice, once)
    return float(res) if np.ndim(res) == 0 else res


def reconstruction_energy(model, x1_hat, t) -> np.ndarray:
    """``|| f(x1_hat, t) - x1_hat ||^2`` with the flow map acting as its own refiner."""
    res = state_distance(model(x1_hat, t), x1_hat) ** 2
    return float(res) if np.ndim(res) == 0 else res


def nll_energy(x1_hat, x1, sigma1: float) -> np.ndarray:
    """Gaussian negative log-likelihood ``||x1_hat - x1||^2 / (2 sigma1^2)``, constants dropped."""
    if not sigma1 > 0:
        raise InvalidArgumentError("sigma1 must be positive")
    diff = _flat(x1_hat) - _flat(x1)
    out = np.sum(diff * diff, axis=-1) / (2.0 * sigma1**2)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class DistanceSpec:
    """Reference distances for bonded and pocket pairs.

    ``bonds`` and ``pocket`` are sequences of ``(i, j, d_ref)``. Bond pairs
    index two atoms of the sample; pocket pairs index a sample atom ``i`` and
    a fixed anchor ``j`` from ``anchors``.
    """

    bonds: tuple = ()
    pocket: tuple = ()
    anchors: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "bonds", tuple((int(i), int(j), float(d)) for i, j, d in self.bonds))
        object.__setattr__(self, "pocket", tuple((int(i), int(j), float(d)) for i, j, d in self.pocket))
        if self.anchors is not None:
            object.__setattr__(self, "anchors", np.asarray(self.anchors, dtype=float).reshape(-1, 3))
        for _, _, d in self.bonds + self.pocket:
            if not d > 0:
                raise InvalidArgumentError("reference distances must be positive")
        if self.pocket and self.anchors is None:
            raise InvalidArgumentError("pocket pairs need anchor coordinates")

    def validate_for(self, n_atoms: int) -> None:
        for i, j, _ in self.bonds:
            if not (0 <= i < n_atoms and 0 <= j < n_atoms):
                raise InvalidArgumentError(f"bond ({i}, {j}) out of range for {n_atoms} atoms")
        n_anchor = 0 if self.anchors is None else len(self.anchors)
        for i, j, _ in self.pocket:
            if not (0 <= i < n_atoms and 0 <= j < n_anchor):
                raise InvalidArgumentError(f"pocket pair ({i}, {j}) out of range")


def distance_potential(x1_hat, spec: DistanceSpec, squared: bool = False) -> float:
    """Sum of absolute deviations of pair distances from their references.

    ``x1_hat`` has shape ``(n_atoms, 3)``. ``squared=True`` switches each
    term to the squared deviation.
    """
    x = np.asarray(x1_hat, dtype=float)
    if x.ndim != 2 or x.shape[1] != 3:
        raise InvalidArgumentError(f"expected (n_atoms, 3) coordinates, got {x.shape}")
    spec.validate_for(len(x))
    total = 0.0
    for i, j, d in spec.bonds:
        dev = d - np.linalg.norm(x[i] - x[j])
        total += dev * dev if squared else abs(dev)
    for i, j, d in spec.pocket:
        dev = d - np.linalg.norm(x[i] - spec.anchors[j])
        total += dev * dev if squared else abs(dev)
    return float(total)


def read_distance_spec(path: os.PathLike, anchors=None) -> DistanceSpec:
    """Read a ``kind,i,j,reference_distance`` CSV (kind is ``bond`` or ``pocket``)."""
    bonds, pocket = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), 2):
            kind = row["kind"].strip()
            entry = (int(row["i"]), int(row["j"]), float(row["reference_distance"]))
            if kind == "bond":
                bonds.append(entry)
            elif kind == "pocket":
                pocket.append(entry)
            else:
                raise InvalidArgumentError(f"line {lineno}: unknown pair kind {kind!r}")
    return DistanceSpec(bonds, pocket, anchors)


def write_distance_spec(path: os.PathLike, spec: DistanceSpec) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "i", "j", "reference_distance"])
        for i, j, d in spec.bonds:
            w.writerow(["bond", i, j, repr(d)])
        for i, j, d in spec.pocket:
            w.writerow(["pocket", i, j, repr(d)])

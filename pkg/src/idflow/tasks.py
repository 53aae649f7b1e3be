"""Synthetic generative tasks with known ground truth.

``mixture2d``
    Isotropic Gaussian mixture in the plane.
``chain3d``
    A fixed template chain with rigid bond lengths whose bond directions are
    jittered per sample; states are flattened ``(3 n,)`` coordinates.
``helix_frames``
    Ideal alpha-helix residue frames with per-frame rotation noise.
"""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .exceptions import InvalidArgumentError
from .flow import harmonic_prior_sample
from .geometry import FrameChain, so3_exp, uniform_so3_sample

KINDS = ("mixture2d", "chain3d", "helix_frames")


def _circle_means(n: int = 8, radius: float = 4.0) -> list:
    ang = 2.0 * np.pi * np.arange(n) / n
    return [[float(radius * np.cos(a)), float(radius * np.sin(a))] for a in ang]


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "mixture2d"
    # mixture2d
    means: tuple = field(default_factory=lambda: tuple(map(tuple, _circle_means())))
    weights: Optional[tuple] = None
    stds: tuple = (0.3,)
    # chain3d
    n_atoms: int = 8
    bond_length: float = 1.5
    bond_angle_deg: float = 109.5
    angle_noise: float = 0.1
    template_seed: int = 0
    prior_eps: float = 1e-4
    # helix_frames
    n_residues: int = 16
    rise: float = 1.5
    twist_deg: float = 100.0
    ca_spacing: float = 3.8
    noise_std: float = 0.02

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"unknown task kind {self.kind!r}")
        means = tuple(tuple(float(v) for v in m) for m in self.means)
        object.__setattr__(self, "means", means)
        n = len(means)
        weights = self.weights if self.weights is not None else (1.0 / n,) * n
        weights = tuple(float(w) for w in weights)
        stds = tuple(float(s) for s in self.stds)
        if len(stds) == 1:
            stds = stds * n
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "stds", stds)
        if self.kind == "mixture2d":
            if n < 1 or any(len(m) != 2 for m in means):
                raise InvalidArgumentError("mixture means must be a non-empty list of 2-vectors")
            if len(weights) != n or len(stds) != n:
                raise InvalidArgumentError("mixture weights/stds must match the number of means")
            if any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
                raise InvalidArgumentError("mixture weights must be non-negative and sum to 1")
            if any(s < 0 for s in stds):
                raise InvalidArgumentError("mixture stds must be non-negative")
        if self.kind == "chain3d":
            if self.n_atoms < 2 or not self.bond_length > 0 or self.angle_noise < 0:
                raise InvalidArgumentError("chain3d needs n_atoms >= 2, bond_length > 0, angle_noise >= 0")
        if self.kind == "helix_frames":
            if self.n_residues < 1 or not self.rise > 0 or not self.ca_spacing > self.rise:
                raise InvalidArgumentError("helix needs n_residues >= 1 and ca_spacing > rise > 0")
            if self.noise_std < 0:
                raise InvalidArgumentError("helix noise_std must be non-negative")

    @property
    def state_dim(self) -> int:
        """Euclidean state size, or the number of frames for helix tasks."""
        return {"mixture2d": 2, "chain3d": 3 * self.n_atoms, "helix_frames": self.n_residues}[self.kind]

    @property
    def head(self) -> str:
        return "se3" if self.kind == "helix_frames" else "euclidean"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["means"] = [list(m) for m in self.means]
        d["weights"] = list(self.weights)
        d["stds"] = list(self.stds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidArgumentError(f"unknown task keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("means", "weights", "stds"):
            if key in d and d[key] is not None:
                d[key] = tuple(tuple(v) if isinstance(v, (list, tuple)) else v for v in d[key])
        return cls(**d)


@dataclass
class DataBatch:
    x1: object
    conditioning: Optional[dict] = None
    seed: Optional[int] = None


# -- chain template --------------------------------------------------------


def _rotate_about(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    return so3_exp(angle * axis) @ v


def chain_template(spec: TaskSpec) -> np.ndarray:
    """Deterministic reference chain ``(n_atoms, 3)``, centred at the origin."""
    rng = np.random.default_rng(spec.template_seed)
    n = spec.n_atoms
    angle = np.deg2rad(180.0 - spec.bond_angle_deg)
    dirs = [np.array([1.0, 0.0, 0.0])]
    perp = np.array([0.0, 1.0, 0.0])
    for _ in range(n - 2):
        prev = dirs[-1]
        # turn by the supplementary bond angle about a random perpendicular axis
        dihedral = rng.uniform(-np.pi, np.pi)
        axis = _rotate_about(perp, prev, dihedral)
        dirs.append(_rotate_about(prev, axis, angle))
        perp = np.cross(dirs[-2], dirs[-1])
        perp /= np.linalg.norm(perp)
    pts = np.vstack([np.zeros(3), np.cumsum(spec.bond_length * np.array(dirs[: n - 1]), axis=0)])
    return pts - pts.mean(axis=0)


def _jitter_chain(template: np.ndarray, rng: np.random.Generator, noise: float) -> np.ndarray:
    bonds = np.diff(template, axis=0)
    if noise > 0:
        bonds = np.einsum("bij,bj->bi", so3_exp(noise * rng.standard_normal(bonds.shape)), bonds)
    pts = np.vstack([np.zeros(3), np.cumsum(bonds, axis=0)])
    return pts - pts.mean(axis=0)


# -- helix -----------------------------------------------------------------


def helix_radius(spec: TaskSpec) -> float:
    phi = np.deg2rad(spec.twist_deg)
    return float(np.sqrt((spec.ca_spacing**2 - spec.rise**2) / (2.0 * (1.0 - np.cos(phi)))))


def helix_ca(spec: TaskSpec, index) -> np.ndarray:
    """C-alpha positions on the continuous (uncentred) helix."""
    index = np.asarray(index, dtype=float)
    phi = np.deg2rad(spec.twist_deg)
    rho = helix_radius(spec)
    return np.stack([rho * np.cos(index * phi), rho * np.sin(index * phi), spec.rise * index], axis=-1)


def ideal_helix(spec: TaskSpec) -> FrameChain:
    """Screw-symmetric helix frames, translations centred on their mean.

    Each frame's x axis points to the next C-alpha and its y axis lies in the
    plane of the previous and next neighbours.
    """
    idx = np.arange(spec.n_residues)
    ca = helix_ca(spec, idx)
    fwd = helix_ca(spec, idx + 1) - ca
    back = helix_ca(spec, idx - 1) - ca
    e1 = fwd / np.linalg.norm(fwd, axis=-1, keepdims=True)
    u2 = back - np.sum(back * e1, axis=-1, keepdims=True) * e1
    e2 = u2 / np.linalg.norm(u2, axis=-1, keepdims=True)
    e3 = np.cross(e1, e2)
    rots = np.stack([e1, e2, e3], axis=-1)
    return FrameChain(rots, ca - ca.mean(axis=0))


# -- sampling --------------------------------------------------------------


def sample_target(spec: TaskSpec, rng: np.random.Generator, batch: int) -> DataBatch:
    """Draw ``batch`` ground-truth samples."""
    if batch < 1:
        raise InvalidArgumentError("batch must be >= 1")
    if spec.kind == "mixture2d":
        means = np.array(spec.means)
        comp = rng.choice(len(means), size=batch, p=np.array(spec.weights))
        z = rng.standard_normal((batch, 2))
        x1 = means[comp] + np.array(spec.stds)[comp][:, None] * z
        return DataBatch(x1)
    if spec.kind == "chain3d":
        template = chain_template(spec)
        x1 = np.stack([_jitter_chain(template, rng, spec.angle_noise) for _ in range(batch)])
        return DataBatch(x1.reshape(batch, -1))
    helix = ideal_helix(spec)
    rots = np.broadcast_to(helix.rots, (batch,) + helix.rots.shape)
    if spec.noise_std > 0:
        eps = spec.noise_std * rng.standard_normal((batch, spec.n_residues, 3))
        rots = rots @ so3_exp(eps)
    trans = np.broadcast_to(helix.trans, (batch,) + helix.trans.shape).copy()
    return DataBatch(FrameChain(np.array(rots), trans))


def sample_prior(spec: TaskSpec, rng: np.random.Generator, batch: int):
    """Source distribution matched to the task's state space."""
    if batch < 1:
        raise InvalidArgumentError("batch must be >= 1")
    if spec.kind == "mixture2d":
        return rng.standard_normal((batch, 2))
    if spec.kind == "chain3d":
        return harmonic_prior_sample(spec.n_atoms, rng, size=batch, eps=spec.prior_eps).reshape(batch, -1)
    rots = uniform_so3_sample(rng, (batch, spec.n_residues))
    trans = rng.standard_normal((batch, spec.n_residues, 3))
    return FrameChain(rots, trans)


def reference_structure(spec: TaskSpec):
    """Noise-free reference: the chain template, the helix, or ``None`` for mixtures."""
    if spec.kind == "chain3d":
        return chain_template(spec)
    if spec.kind == "helix_frames":
        return ideal_helix(spec)
    return None


def write_samples_csv(path: os.PathLike, x: np.ndarray) -> None:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise InvalidArgumentError("samples must be a (n_samples, dim) array")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample"] + [f"x{j}" for j in range(x.shape[1])])
        for i, row in enumerate(x):
            w.writerow([i] + [f"{v:.17g}" for v in row])


def read_samples_csv(path: os.PathLike) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise InvalidArgumentError(f"{path}: no samples")
    return np.array([[float(v) for v in r[1:]] for r in rows[1:]])

"""Closed-form SO(3) / SE(3) operations.

Rotation vectors are axis-angle 3-vectors, rotation matrices are 3x3 arrays.
Every function accepts arbitrary leading batch dimensions.

Numerical policy
----------------
SMALL_ANGLE = 1e-7
    Below this angle exp/log switch to their Taylor forms so that the
    ``sin(theta)`` denominators never amplify rounding error.
NEAR_PI = 1e-6
    When ``pi - theta`` falls below this value the log map recovers the axis
    from the symmetric part of ``R`` instead of the antisymmetric part.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from typing import Iterable, Sequence, TextIO, Union

import numpy as np

from .exceptions import InvalidArgumentError

SMALL_ANGLE = 1e-7
NEAR_PI = 1e-6
ROTATION_TOL = 1e-9

# Idealized backbone atoms in the residue frame, centred on C-alpha (Angstrom).
IDEAL_N = np.array([-0.525, 1.363, 0.0])
IDEAL_CA = np.array([0.0, 0.0, 0.0])
IDEAL_C = np.array([1.526, 0.0, 0.0])
IDEAL_O = np.array([0.627, 1.062, 0.0])
IDEAL_BACKBONE = np.stack([IDEAL_N, IDEAL_CA, IDEAL_C, IDEAL_O])


def hat(w: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix ``[w]x`` of a 3-vector."""
    w = np.asarray(w, dtype=float)
    out = np.zeros(w.shape[:-1] + (3, 3))
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def vee(W: np.ndarray) -> np.ndarray:
    """Inverse of :func:`hat` applied to the antisymmetric part of ``W``."""
    W = np.asarray(W, dtype=float)
    return 0.5 * np.stack(
        [
            W[..., 2, 1] - W[..., 1, 2],
            W[..., 0, 2] - W[..., 2, 0],
            W[..., 1, 0] - W[..., 0, 1],
        ],
        axis=-1,
    )


def _eye_like(shape: tuple) -> np.ndarray:
    return np.broadcast_to(np.eye(3), shape + (3, 3)).copy()


def rotation_error(R: np.ndarray) -> np.ndarray:
    """Largest deviation of ``R`` from orthonormality / unit determinant."""
    R = np.asarray(R, dtype=float)
    RtR = np.swapaxes(R, -1, -2) @ R
    ortho = np.abs(RtR - np.eye(3)).max(axis=(-1, -2))
    det = np.abs(np.linalg.det(R) - 1.0)
    return np.maximum(ortho, det)


def is_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3) or not np.all(np.isfinite(R)):
        return False
    return bool(np.all(rotation_error(R) < tol))


def check_rotation(R, tol: float = ROTATION_TOL) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    if R.shape[-2:] != (3, 3):
        raise InvalidArgumentError(f"rotation matrices must be (..., 3, 3), got {R.shape}")
    if not is_rotation(R, tol):
        raise InvalidArgumentError("input is not a valid rotation matrix")
    return R


def so3_exp(w) -> np.ndarray:
    """Exponential map from rotation vectors to rotation matrices (Rodrigues).

    Parameters
    ----------
    w : array_like, shape (..., 3)
        Rotation vectors (angle in radians times unit axis).

    Returns
    -------
    R : ndarray, shape (..., 3, 3)
    """
    w = np.asarray(w, dtype=float)
    if w.shape[-1:] != (3,):
        raise InvalidArgumentError(f"rotation vectors must be (..., 3), got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise InvalidArgumentError("rotation vector has non-finite entries")
    theta = np.linalg.norm(w, axis=-1)
    W = hat(w)
    W2 = W @ W
    small = theta < SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    # R = I + sin(t)/t W + (1 - cos t)/t^2 W^2, identical to the axis form.
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1.0 - np.cos(safe)) / safe**2)
    return _eye_like(w.shape[:-1]) + a[..., None, None] * W + b[..., None, None] * W2


def state_distance(a, b) -> np.ndarray:
    """Per-item distance between two states.

    Arrays use the Euclidean norm over the last axis; frame chains use the
    product metric summed over residues.
    """
    if isinstance(a, FrameChain):
        rel = np.swapaxes(a.rots, -1, -2) @ b.rots
        rot = np.sum(so3_log(rel) ** 2, axis=-1)
        trans = np.sum((a.trans - b.trans) ** 2, axis=-1)
        return np.sqrt(np.sum(rot + trans, axis=-1))
    return np.linalg.norm(np.asarray(a, dtype=float) - np.asarray(b, dtype=float), axis=-1)


def _canonical_sign(axis: np.ndarray) -> np.ndarray:
    """Flip each axis so that its first non-negligible component is positive."""
    flat = axis.reshape(-1, 3)
    out = flat.copy()
    for i, v in enumerate(flat):
        nz = np.flatnonzero(np.abs(v) > 1e-12)
        if nz.size and v[nz[0]] < 0:
            out[i] = -v
    return out.reshape(axis.shape)


def so3_log(R) -> np.ndarray:
    """Logarithm map from rotation matrices to rotation vectors with norm <= pi.

    Three branches: a Taylor form for tiny angles, the Rodrigues inverse in
    the bulk, and an axis-from-symmetric-part recovery next to ``pi``. At an
    angle of exactly ``pi`` the axis sign is fixed by making its first
    nonzero component positive.
    """
    R = check_rotation(R)
    batch = R.shape[:-2]
    Rf = R.reshape(-1, 3, 3)
    cos_t = np.clip((np.trace(Rf, axis1=-2, axis2=-1) - 1.0) / 2.0, -1.0, 1.0)
    anti = vee(Rf)  # = sin(theta) * axis
    # atan2 keeps full precision near 0 and pi, where arccos does not
    theta = np.arctan2(np.linalg.norm(anti, axis=-1), cos_t)
    out = np.empty((Rf.shape[0], 3))

    small = theta < SMALL_ANGLE
    near_pi = (np.pi - theta) < NEAR_PI
    bulk = ~small & ~near_pi

    out[small] = anti[small]
    if np.any(bulk):
        th = theta[bulk]
        out[bulk] = (th / np.sin(th))[:, None] * anti[bulk]
    if np.any(near_pi):
        for i in np.flatnonzero(near_pi):
            sym = 0.5 * (Rf[i] + Rf[i].T)
            # sym = cos(t) I + (1 - cos t) e e^T
            eet = (sym - cos_t[i] * np.eye(3)) / (1.0 - cos_t[i])
            col = int(np.argmax(np.diag(eet)))
            axis = eet[:, col] / np.sqrt(eet[col, col])
            axis /= np.linalg.norm(axis)
            d = float(axis @ anti[i])
            if abs(d) > 1e-14:
                axis = axis if d > 0 else -axis
            else:
                axis = _canonical_sign(axis)
            out[i] = theta[i] * axis
    return out.reshape(batch + (3,))


def rotation_angle(R) -> np.ndarray:
    """Geodesic distance of ``R`` from the identity, in [0, pi]."""
    R = np.asarray(R, dtype=float)
    cos_t = (np.trace(R, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arctan2(np.linalg.norm(vee(R), axis=-1), cos_t)


def _check_t(t) -> float:
    t = float(t)
    if not (0.0 <= t <= 1.0):
        raise InvalidArgumentError(f"t must lie in [0, 1], got {t}")
    return t


def so3_geodesic(r0, r1, t) -> np.ndarray:
    """Point at fraction ``t`` along the geodesic from ``r0`` to ``r1``."""
    t = _check_t(t)
    r0 = check_rotation(r0)
    r1 = check_rotation(r1)
    rel = np.swapaxes(r0, -1, -2) @ r1
    return r0 @ so3_exp(t * so3_log(rel))


def euclidean_interpolant(x0, x1, t) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.shape != x1.shape:
        raise InvalidArgumentError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    t = _check_t(t)
    return t * x1 + (1.0 - t) * x0


@dataclass(frozen=True)
class Frame:
    """A rigid transform ``x -> r @ x + s`` placing one residue."""

    r: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        r = check_rotation(self.r)
        s = np.asarray(self.s, dtype=float)
        if r.shape != (3, 3) or s.shape != (3,):
            raise InvalidArgumentError("a Frame holds one 3x3 rotation and one 3-vector")
        if not np.all(np.isfinite(s)):
            raise InvalidArgumentError("translation has non-finite entries")
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "s", s)

    @classmethod
    def identity(cls) -> "Frame":
        return cls(np.eye(3), np.zeros(3))

    def compose(self, other: "Frame") -> "Frame":
        return Frame(self.r @ other.r, self.r @ other.s + self.s)

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.r.T + self.s


@dataclass(frozen=True)
class FrameChain:
    """``N`` residue frames stored as stacked arrays.

    ``rots`` has shape ``(..., N, 3, 3)`` and ``trans`` ``(..., N, 3)``; a
    leading batch dimension holds several chains at once.
    """

    rots: np.ndarray
    trans: np.ndarray

    def __post_init__(self):
        rots = np.asarray(self.rots, dtype=float)
        trans = np.asarray(self.trans, dtype=float)
        if rots.ndim < 3 or rots.shape[-2:] != (3, 3):
            raise InvalidArgumentError(f"rots must be (..., N, 3, 3), got {rots.shape}")
        if trans.shape != rots.shape[:-1]:
            raise InvalidArgumentError(
                f"trans shape {trans.shape} does not match rots {rots.shape}"
            )
        if rots.shape[-3] < 1:
            raise InvalidArgumentError("a frame chain needs at least one frame")
        object.__setattr__(self, "rots", rots)
        object.__setattr__(self, "trans", trans)

    @classmethod
    def from_frames(cls, frames: Sequence[Frame]) -> "FrameChain":
        if not frames:
            raise InvalidArgumentError("a frame chain needs at least one frame")
        return cls(np.stack([f.r for f in frames]), np.stack([f.s for f in frames]))

    @classmethod
    def identity(cls, n: int) -> "FrameChain":
        return cls(_eye_like((n,)), np.zeros((n, 3)))

    @property
    def n_frames(self) -> int:
        return self.rots.shape[-3]

    @property
    def batch_shape(self) -> tuple:
        return self.rots.shape[:-3]

    def __len__(self) -> int:
        return self.n_frames

    def __getitem__(self, idx) -> "FrameChain":
        """Index the leading batch dimension."""
        if not self.batch_shape:
            raise InvalidArgumentError("unbatched chain; use .frames() to get residues")
        return FrameChain(self.rots[idx], self.trans[idx])

    def frames(self) -> list:
        if self.batch_shape:
            raise InvalidArgumentError("frames() requires an unbatched chain")
        return [Frame(r, s) for r, s in zip(self.rots, self.trans)]

    def is_valid(self) -> bool:
        return is_rotation(self.rots) and bool(np.all(np.isfinite(self.trans)))

    def validate(self) -> "FrameChain":
        check_rotation(self.rots)
        if not np.all(np.isfinite(self.trans)):
            raise InvalidArgumentError("translation has non-finite entries")
        return self

    def copy(self) -> "FrameChain":
        return FrameChain(self.rots.copy(), self.trans.copy())


def stack_chains(chains: Iterable[FrameChain]) -> FrameChain:
    chains = list(chains)
    return FrameChain(
        np.stack([c.rots for c in chains]), np.stack([c.trans for c in chains])
    )


def se3_interpolant(f0, f1, t):
    """Product-metric geodesic between two frames (or two frame chains)."""
    t = _check_t(t)
    if isinstance(f0, Frame) and isinstance(f1, Frame):
        return Frame(so3_geodesic(f0.r, f1.r, t), euclidean_interpolant(f0.s, f1.s, t))
    if isinstance(f0, FrameChain) and isinstance(f1, FrameChain):
        return FrameChain(
            so3_geodesic(f0.rots, f1.rots, t), euclidean_interpolant(f0.trans, f1.trans, t)
        )
    raise InvalidArgumentError("se3_interpolant needs two Frames or two FrameChains")


def quaternion_to_matrix(q) -> np.ndarray:
    """Rotation matrix of a (not necessarily normalized) quaternion ``(a, b, c, d)``."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    a, b, c, d = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    rows = [
        [a * a + b * b - c * c - d * d, 2 * b * c - 2 * a * d, 2 * b * d + 2 * a * c],
        [2 * b * c + 2 * a * d, a * a - b * b + c * c - d * d, 2 * c * d - 2 * a * b],
        [2 * b * d - 2 * a * c, 2 * c * d + 2 * a * b, a * a - b * b - c * c + d * d],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def uniform_so3_sample(rng: np.random.Generator, size=None) -> np.ndarray:
    """Haar-uniform rotations from normalized Gaussian quaternions."""
    shape = () if size is None else ((size,) if np.isscalar(size) else tuple(size))
    q = rng.standard_normal(shape + (4,))
    return quaternion_to_matrix(q)


def frame_update(f: Frame, b: float, c: float, d: float, s_update) -> Frame:
    """Compose ``f`` with the update built from quaternion ``(1, b, c, d)``."""
    r_update = quaternion_to_matrix(np.array([1.0, b, c, d], dtype=float))
    return f.compose(Frame(r_update, s_update))


def chain_update(chain: FrameChain, bcd, s_update) -> FrameChain:
    """Vectorized :func:`frame_update` over every frame of a (batched) chain.

    ``bcd`` and ``s_update`` have the chain's ``trans`` shape ``(..., N, 3)``.
    """
    bcd = np.asarray(bcd, dtype=float)
    s_update = np.asarray(s_update, dtype=float)
    ones = np.ones(bcd.shape[:-1] + (1,))
    r_update = quaternion_to_matrix(np.concatenate([ones, bcd], axis=-1))
    rots = chain.rots @ r_update
    trans = np.einsum("...ij,...j->...i", chain.rots, s_update) + chain.trans
    return FrameChain(rots, trans)


@dataclass(frozen=True)
class BackboneAtoms:
    n: np.ndarray
    ca: np.ndarray
    c: np.ndarray
    o: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.stack([self.n, self.ca, self.c, self.o], axis=-2)


def frame_to_atoms(f) -> BackboneAtoms:
    """Place the idealized backbone atoms with a frame or a chain of frames."""
    if isinstance(f, Frame):
        r, s = f.r, f.s
    elif isinstance(f, FrameChain):
        r, s = f.rots, f.trans
    else:
        raise InvalidArgumentError("frame_to_atoms needs a Frame or FrameChain")
    atoms = np.einsum("...ij,aj->...ai", r, IDEAL_BACKBONE) + s[..., None, :]
    return BackboneAtoms(atoms[..., 0, :], atoms[..., 1, :], atoms[..., 2, :], atoms[..., 3, :])


# Frame table: one line per residue, "index r00 .. r22 s0 s1 s2".
# Several chains in one file are separated by "# chain <k>" lines.


def _format_row(i: int, r: np.ndarray, s: np.ndarray) -> str:
    vals = list(r.reshape(9)) + list(s)
    return " ".join([str(i)] + [f"{v:.17g}" for v in vals])


def write_frame_table(dest: Union[str, os.PathLike, TextIO], chains) -> None:
    if isinstance(chains, FrameChain):
        chains = [chains] if not chains.batch_shape else [chains[i] for i in range(chains.batch_shape[0])]
    lines = []
    for k, chain in enumerate(chains):
        lines.append(f"# chain {k}")
        for i in range(chain.n_frames):
            lines.append(_format_row(i, chain.rots[i], chain.trans[i]))
    text = "\n".join(lines) + "\n"
    if isinstance(dest, (str, os.PathLike)):
        with open(dest, "w") as fh:
            fh.write(text)
    else:
        dest.write(text)


def read_frame_table(src: Union[str, os.PathLike, TextIO]) -> list:
    if isinstance(src, (str, os.PathLike)):
        with open(src) as fh:
            text = fh.read()
    else:
        text = src.read()
    chains, rows = [], []

    def flush():
        if rows:
            arr = np.array(rows)
            chains.append(FrameChain(arr[:, 1:10].reshape(-1, 3, 3), arr[:, 10:13]))
            rows.clear()

    for lineno, line in enumerate(io.StringIO(text), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            flush()
            continue
        parts = line.split()
        if len(parts) != 13:
            raise InvalidArgumentError(f"line {lineno}: expected 13 fields, got {len(parts)}")
        rows.append([float(p) for p in parts])
    flush()
    return chains

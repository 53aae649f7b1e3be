"""Conditional paths, flow-matching losses and idempotent training.

States are either ``(B, n)`` arrays (euclidean head) or batched
:class:`~idflow.geometry.FrameChain` objects (se3 head). Losses come in two
flavours: ``*_t`` functions return differentiable torch scalars of the flat
parameter tensor, the plain functions return floats.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import torch
from scipy.linalg import eigh_tridiagonal

from .exceptions import InvalidArgumentError
from .geometry import FrameChain, so3_exp, so3_log
from .nn import DTYPE, AdamConfig, AdamState, FlowModel, adam_step, loss_gradient

logger = logging.getLogger(__name__)

State = Union[np.ndarray, FrameChain]

# Rotation-distance surrogate: series below this 1 - cos(theta), clamp near pi.
_SERIES_GAP = 1e-6
_PI_CLAMP = 1e-10


@dataclass(frozen=True)
class PathConfig:
    """Noise schedule of the Gaussian conditional path.

    ``sigma_mode="constant"`` uses ``sigma`` at every ``t``; ``"bridge"`` uses
    ``sqrt(t (1 - t))``.
    """

    sigma_mode: str = "constant"
    sigma: float = 0.5

    def __post_init__(self):
        if self.sigma_mode not in ("constant", "bridge"):
            raise InvalidArgumentError(f"unknown sigma_mode {self.sigma_mode!r}")
        if self.sigma < 0:
            raise InvalidArgumentError("sigma must be non-negative")

    def sigma_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if self.sigma_mode == "constant":
            return np.full(t.shape, float(self.sigma))
        return np.sqrt(np.clip(t * (1.0 - t), 0.0, None))


@dataclass
class PathSample:
    """A batch of points on conditional paths; ``t`` has shape ``(B,)``."""

    x0: State
    x1: State
    t: np.ndarray
    x_t: State
    mu_t: State

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class TrainConfig:
    k_max: int = 2
    refine_branch_prob: float = 0.5
    refine_time_mode: str = "same_t"
    refine_noise: float = 0.0
    steps: int = 1000
    batch_size: int = 64
    lr: float = 1e-3
    lr_schedule: str = "constant"
    seed: int = 0

    def __post_init__(self):
        if self.k_max < 1:
            raise InvalidArgumentError("k_max must be >= 1")
        if not 0.0 <= self.refine_branch_prob <= 1.0:
            raise InvalidArgumentError("refine_branch_prob must lie in [0, 1]")
        if self.refine_time_mode not in ("same_t", "one"):
            raise InvalidArgumentError(f"unknown refine_time_mode {self.refine_time_mode!r}")
        if self.refine_noise < 0:
            raise InvalidArgumentError("refine_noise must be non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise InvalidArgumentError("steps must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise InvalidArgumentError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise InvalidArgumentError(f"unknown lr_schedule {self.lr_schedule!r}")

    def lr_at(self, step: int) -> float:
        """Learning rate for ``step``; ``"cosine"`` decays to zero at ``steps``."""
        if self.lr_schedule == "constant" or self.steps == 0:
            return self.lr
        return 0.5 * self.lr * (1.0 + np.cos(np.pi * min(step, self.steps) / self.steps))


def _batch_len(x: State) -> int:
    if isinstance(x, FrameChain):
        if len(x.batch_shape) != 1:
            raise InvalidArgumentError("expected a batch of frame chains with one leading dimension")
        return x.batch_shape[0]
    x = np.asarray(x)
    if x.ndim != 2:
        raise InvalidArgumentError(f"expected a (B, n) batch of states, got shape {x.shape}")
    return x.shape[0]


def _time_vector(t, batch: int) -> np.ndarray:
    t = np.broadcast_to(np.asarray(t, dtype=float), (batch,)).copy()
    if np.any(t < 0) or np.any(t > 1):
        raise InvalidArgumentError("t must lie in [0, 1]")
    return t


def sample_path(x0: State, x1: State, t, cfg: PathConfig, rng: np.random.Generator) -> PathSample:
    """Draw ``x_t ~ N(t x1 + (1 - t) x0, sigma_t^2 I)`` for each pair.

    Frame chains get Gaussian noise on translations only; rotations follow
    the noiseless geodesic ``r0 exp(t log(r0^T r1))``.
    """
    batch = _batch_len(x0)
    if _batch_len(x1) != batch:
        raise InvalidArgumentError("x0 and x1 batches differ in size")
    t = _time_vector(t, batch)
    sig = cfg.sigma_t(t)
    if isinstance(x0, FrameChain):
        if not isinstance(x1, FrameChain) or x0.rots.shape != x1.rots.shape:
            raise InvalidArgumentError("x0 and x1 chains must have matching shapes")
        tc = t[:, None, None]
        mu_trans = tc * x1.trans + (1.0 - tc) * x0.trans
        rel = np.swapaxes(x0.rots, -1, -2) @ x1.rots
        rots = x0.rots @ so3_exp(tc * so3_log(rel))
        z = rng.standard_normal(mu_trans.shape)
        mu = FrameChain(rots, mu_trans)
        x_t = FrameChain(rots, mu_trans + sig[:, None, None] * z)
        return PathSample(x0, x1, t, x_t, mu)
    x0 = np.asarray(x0, dtype=float)
    x1 = np.asarray(x1, dtype=float)
    if x0.shape != x1.shape:
        raise InvalidArgumentError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    tc = t[:, None]
    mu = tc * x1 + (1.0 - tc) * x0
    z = rng.standard_normal(mu.shape)
    return PathSample(x0, x1, t, mu + sig[:, None] * z, mu)


# -- tensor helpers --------------------------------------------------------


def _to_t(x: State):
    if isinstance(x, FrameChain):
        return torch.as_tensor(x.rots, dtype=DTYPE), torch.as_tensor(x.trans, dtype=DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=float), dtype=DTYPE)


def _detach(x):
    if isinstance(x, tuple):
        return tuple(v.detach() for v in x)
    return x.detach()


def rotation_sq_distance_t(r_pred: torch.Tensor, r_true: torch.Tensor) -> torch.Tensor:
    """Smooth ``||log(r_pred^T r_true)||^2`` over the trailing 3x3 dimensions.

    Uses the series ``acos(1-u)^2 = 2u + u^2/3 + 8u^3/45`` close to the
    identity and clamps ``cos(theta)`` just above -1, keeping gradients finite.
    """
    tr = (r_pred * r_true).sum(dim=(-1, -2))  # trace(r_pred^T r_true)
    c = (tr - 1.0) / 2.0
    u = 1.0 - c
    series = 2.0 * u + u * u / 3.0 + 8.0 * u**3 / 45.0
    near_id = u < _SERIES_GAP
    c_safe = torch.where(near_id, torch.zeros_like(c), c).clamp(-1.0 + _PI_CLAMP, 1.0)
    exact = torch.acos(c_safe) ** 2
    return torch.where(near_id, series, exact)


def _sq_error_t(pred, target) -> torch.Tensor:
    """Per-item squared error; sums over residues for chains."""
    if isinstance(pred, tuple):
        rots, trans = pred
        t_rots, t_trans = target
        trans_term = ((trans - t_trans) ** 2).sum(dim=(-1, -2))
        rot_term = rotation_sq_distance_t(rots, t_rots).sum(dim=-1)
        return trans_term + rot_term
    return ((pred - target) ** 2).sum(dim=-1)


def cfm_loss_t(model: FlowModel, theta: torch.Tensor, batch: PathSample) -> torch.Tensor:
    if len(batch) == 0:
        raise InvalidArgumentError("empty batch")
    pred = model.predict_t(theta, _to_t(batch.x_t), torch.as_tensor(batch.t, dtype=DTYPE))
    return _sq_error_t(pred, _to_t(batch.x1)).mean()


def cfm_loss(model: FlowModel, batch: PathSample) -> float:
    """Mean squared distance between ``f(x_t, t)`` and ``x1``.

    For the se3 head this is the per-chain sum over residues of translation
    and squared geodesic rotation error, averaged over the batch.
    """
    if model.head == "se3":
        return se3_cfm_loss(model, batch)
    with torch.no_grad():
        return float(cfm_loss_t(model, model.theta(), batch))


def se3_cfm_loss(model: FlowModel, batch: PathSample) -> float:
    if model.head != "se3":
        raise InvalidArgumentError("se3_cfm_loss needs a model with the se3 head")
    for chain in (batch.x_t, batch.x1):
        if not isinstance(chain, FrameChain):
            raise InvalidArgumentError("se3_cfm_loss needs frame-chain path samples")
        chain.validate()
    with torch.no_grad():
        return float(cfm_loss_t(model, model.theta(), batch))


def _refine_time(t: np.ndarray, mode: str) -> np.ndarray:
    return t if mode == "same_t" else np.ones_like(t)


def refinement_loss_t(
    model: FlowModel,
    theta: torch.Tensor,
    x_t: State,
    t,
    x1: State,
    k: int,
    cfg: TrainConfig = TrainConfig(),
    rng: Optional[np.random.Generator] = None,
) -> torch.Tensor:
    """Refinement objective: predict without gradient, then refine ``k + 1`` times.

    Each refinement input is detached, so gradients flow only through the
    single network call that produced each collected output.
    """
    if k < 1:
        raise InvalidArgumentError("k must be >= 1")
    batch = _batch_len(x_t)
    t = _time_vector(t, batch)
    t_ref = torch.as_tensor(_refine_time(t, cfg.refine_time_mode), dtype=DTYPE)
    with torch.no_grad():
        x_hat = model.predict_t(theta.detach(), _to_t(x_t), torch.as_tensor(t, dtype=DTYPE))
        if cfg.refine_noise > 0:
            if rng is None:
                raise InvalidArgumentError("refine_noise > 0 needs an rng")
            if isinstance(x_hat, tuple):
                noise = torch.as_tensor(rng.standard_normal(tuple(x_hat[1].shape)), dtype=DTYPE)
                x_hat = (x_hat[0], x_hat[1] + cfg.refine_noise * noise)
            else:
                noise = torch.as_tensor(rng.standard_normal(tuple(x_hat.shape)), dtype=DTYPE)
                x_hat = x_hat + cfg.refine_noise * noise
    target = _to_t(x1)
    terms = []
    for _ in range(k + 1):
        x_hat = model.predict_t(theta, _detach(x_hat), t_ref)
        terms.append(_sq_error_t(x_hat, target).mean())
    return torch.stack(terms).mean()


def refinement_loss(model: FlowModel, x_t: State, t, x1: State, k: int, cfg: TrainConfig = TrainConfig(), rng=None) -> float:
    with torch.no_grad():
        return float(refinement_loss_t(model, model.theta(), x_t, t, x1, k, cfg, rng))


@dataclass
class StepResult:
    model: FlowModel
    opt_state: AdamState
    loss: float
    branch: str
    k: int


def train_step(
    model: FlowModel,
    opt_state: AdamState,
    x0: State,
    x1: State,
    rng: np.random.Generator,
    cfg: TrainConfig,
    path_cfg: PathConfig = PathConfig(),
    lr: Optional[float] = None,
) -> StepResult:
    """One parameter update following the idempotent training recipe.

    Draws ``t ~ U(0, 1)`` per item and ``m ~ U(0, 1)`` per step. With
    ``m <= refine_branch_prob`` a refinement count ``k`` is drawn uniformly
    from ``{1, ..., k_max}`` and the refinement loss is minimized; otherwise
    the plain flow-matching loss is. ``lr`` overrides ``cfg.lr``.
    """
    batch = _batch_len(x0)
    if _batch_len(x1) != batch:
        raise InvalidArgumentError("x0 and x1 batches differ in size")
    t = rng.uniform(0.0, 1.0, size=batch)
    m = rng.uniform(0.0, 1.0)
    path = sample_path(x0, x1, t, path_cfg, rng)
    if cfg.refine_branch_prob > 0 and m <= cfg.refine_branch_prob:
        k = int(rng.integers(1, cfg.k_max + 1))
        branch = "refine"
        loss_fn = lambda th: refinement_loss_t(model, th, path.x_t, t, x1, k, cfg, rng)
    else:
        k = 0
        branch = "cfm"
        loss_fn = lambda th: cfm_loss_t(model, th, path)
    grad, value = loss_gradient(model, loss_fn, return_loss=True)
    if not (np.isfinite(value) and np.all(np.isfinite(grad))):
        # keep the last finite parameters; a NaN loss tells the caller to stop
        return StepResult(model, opt_state, value if not np.isfinite(value) else float("nan"), branch, k)
    new_params, new_state = adam_step(model.params, grad, opt_state, AdamConfig(lr=cfg.lr if lr is None else lr))
    return StepResult(FlowModel(model.config, new_params), new_state, value, branch, k)


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    branches: list = field(default_factory=list)
    ks: list = field(default_factory=list)

    def rows(self):
        for i, (loss, branch, k) in enumerate(zip(self.losses, self.branches, self.ks)):
            yield {"step": i, "loss": loss, "branch": branch, "k": k}


Sampler = Callable[[np.random.Generator, int], State]


def train(
    model: FlowModel,
    sample_x0: Sampler,
    sample_x1: Sampler,
    cfg: TrainConfig,
    path_cfg: PathConfig = PathConfig(),
    callback: Optional[Callable[[int, StepResult], Optional[bool]]] = None,
):
    """Run ``cfg.steps`` training steps from a single seeded generator.

    ``callback(step, result)`` may return ``True`` to stop early. Returns the
    trained model and a :class:`TrainHistory`.
    """
    rng = np.random.default_rng(cfg.seed)
    opt_state = AdamState.zeros(model.params.size)
    history = TrainHistory()
    for step in range(cfg.steps):
        x0 = sample_x0(rng, cfg.batch_size)
        x1 = sample_x1(rng, cfg.batch_size)
        res = train_step(model, opt_state, x0, x1, rng, cfg, path_cfg, lr=cfg.lr_at(step))
        model, opt_state = res.model, res.opt_state
        history.losses.append(res.loss)
        history.branches.append(res.branch)
        history.ks.append(res.k)
        if not np.isfinite(res.loss):
            logger.warning("non-finite loss at step %d", step)
            break
        if callback is not None and callback(step, res):
            break
    return model, history


def path_laplacian(n: int) -> np.ndarray:
    """Graph Laplacian of the path on ``n`` nodes."""
    adj = np.eye(n, k=1) + np.eye(n, k=-1)
    return np.diag(adj.sum(axis=1)) - adj


def harmonic_prior_sample(n: int, rng: np.random.Generator, size=None, eps: float = 1e-4) -> np.ndarray:
    """Chain-shaped Gaussian prior ``N(0, (L + eps I)^-1)`` per coordinate axis.

    Returns shape ``(n, 3)``, or ``(size, n, 3)`` when ``size`` is given.
    """
    if n < 2:
        raise InvalidArgumentError("harmonic prior needs a chain of at least 2 atoms")
    diag = np.diag(path_laplacian(n)) + eps
    evals, evecs = eigh_tridiagonal(diag, -np.ones(n - 1))
    shape = (() if size is None else (int(size),)) + (n, 3)
    z = rng.standard_normal(shape)
    return np.einsum("ij,...jc->...ic", evecs / np.sqrt(evals), z)

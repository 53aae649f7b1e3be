"""Euler integration of the x1-parameterized flow with optional refinement.

A flow map is any callable ``f(x, t) -> x1_hat``; a :class:`~idflow.nn.FlowModel`
qualifies. Euclidean states are ``(n,)`` or ``(B, n)`` arrays; frame chains
are integrated on SO(3) x R^3 with the exponential map.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .exceptions import InvalidArgumentError, InvalidStateError
from .geometry import FrameChain, so3_exp, so3_log, state_distance

FlowMap = Callable[[object, float], object]

REFINE_TIMES = ("same_t", "last", "one")


@dataclass(frozen=True)
class SampleConfig:
    """Sampler settings.

    ``steps`` is the grid size ``T`` (``dt = 1 / T``; the loop performs
    ``T - 1`` updates). ``final_completion`` jumps to the last prediction
    after the loop; disabling it stops at ``t = 1 - dt`` exactly as the
    printed algorithm does. ``refine_time`` selects the time passed to
    refinement calls: ``"same_t"``, ``"last"`` (``1 - dt``) or ``"one"``
    (``t = 1``, treating the prediction as a data point).
    """

    steps: int = 10
    refinements: int = 1
    final_completion: bool = True
    record_energy: bool = False
    refine_time: str = "same_t"

    def __post_init__(self):
        if self.steps < 2:
            raise InvalidArgumentError("steps must be >= 2")
        if self.refinements < 0:
            raise InvalidArgumentError("refinements must be >= 0")
        if self.refine_time not in REFINE_TIMES:
            raise InvalidArgumentError(f"unknown refine_time {self.refine_time!r}")

    @property
    def nfe(self) -> int:
        return (self.steps - 1) * (1 + self.refinements)


@dataclass
class Trajectory:
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    pre_predictions: list = field(default_factory=list)
    post_predictions: list = field(default_factory=list)
    pre_residuals: Optional[list] = None
    post_residuals: Optional[list] = None
    nfe_count: int = 0
    # Forward calls spent on residual tracing; not part of nfe_count.
    extra_evals: int = 0
    completed: bool = False


def vector_field(x1_hat, x_t, t):
    """Velocity ``(x1_hat - x_t) / (1 - t)`` implied by a clean-sample prediction."""
    t = float(t)
    if t >= 1.0:
        raise InvalidArgumentError("the vector field is undefined at t >= 1")
    x1_hat = np.asarray(x1_hat, dtype=float)
    x_t = np.asarray(x_t, dtype=float)
    if x1_hat.shape != x_t.shape:
        raise InvalidArgumentError(f"shape mismatch: {x1_hat.shape} vs {x_t.shape}")
    return (x1_hat - x_t) / (1.0 - t)


def _euclid_step(x, x1_hat, t, dt):
    return x + dt * vector_field(x1_hat, x, t)


def _se3_step(x: FrameChain, x1_hat: FrameChain, t, dt) -> FrameChain:
    scale = dt / (1.0 - t)
    rel = np.swapaxes(x.rots, -1, -2) @ x1_hat.rots
    rots = x.rots @ so3_exp(scale * so3_log(rel))
    trans = x.trans + scale * (x1_hat.trans - x.trans)
    return FrameChain(rots, trans)


def _mean_residual(a, b) -> float:
    return float(np.mean(state_distance(a, b)))


def predictor_refiner_sample(flow_map: FlowMap, x0, cfg: SampleConfig = SampleConfig(), rng=None):
    """Predict, refine ``cfg.refinements`` times, take an Euler step; repeat.

    ``rng`` is accepted for interface symmetry; the integration is
    deterministic. Returns ``(final_state, Trajectory)``.
    """
    del rng
    is_chain = isinstance(x0, FrameChain)
    if is_chain:
        x0.validate()
        step_fn = _se3_step
    else:
        x0 = np.asarray(x0, dtype=float)
        step_fn = _euclid_step
    T, k = cfg.steps, cfg.refinements
    dt = 1.0 / T
    t_ref_fixed = 1.0 - dt if cfg.refine_time == "last" else 1.0
    traj = Trajectory()
    if cfg.record_energy:
        traj.pre_residuals, traj.post_residuals = [], []
    x = x0
    traj.states.append(x)
    x1_hat = None
    for s in range(T - 1):
        t = s * dt
        t_ref = t if cfg.refine_time == "same_t" else t_ref_fixed
        x1_hat = flow_map(x, t)
        traj.nfe_count += 1
        first = x1_hat
        refined_once = None
        for _ in range(k):
            x1_hat = flow_map(x1_hat, t_ref)
            traj.nfe_count += 1
            if refined_once is None:
                refined_once = x1_hat
        if cfg.record_energy:
            if refined_once is None:
                refined_once = flow_map(first, t_ref)
                traj.extra_evals += 1
            traj.pre_residuals.append(_mean_residual(refined_once, first))
            after = flow_map(x1_hat, t_ref)
            traj.extra_evals += 1
            traj.post_residuals.append(_mean_residual(after, x1_hat))
        traj.times.append(t)
        traj.pre_predictions.append(first)
        traj.post_predictions.append(x1_hat)
        x = step_fn(x, x1_hat, t, dt)
        traj.states.append(x)
    if cfg.final_completion:
        x = x1_hat.copy()
        traj.states.append(x)
        traj.completed = True
    return x, traj


def plain_sample(flow_map: FlowMap, x0, cfg: SampleConfig = SampleConfig(), rng=None):
    """Euler sampler without refinement (``refinements`` forced to 0)."""
    cfg = SampleConfig(
        steps=cfg.steps,
        refinements=0,
        final_completion=cfg.final_completion,
        record_energy=cfg.record_energy,
        refine_time=cfg.refine_time,
    )
    return predictor_refiner_sample(flow_map, x0, cfg, rng)


def se3_sample(flow_map: FlowMap, chain0: FrameChain, cfg: SampleConfig = SampleConfig(), rng=None):
    """Predictor-refiner sampling on SE(3)^N; rotations step along geodesics."""
    if not isinstance(chain0, FrameChain):
        raise InvalidArgumentError("se3_sample needs a FrameChain")
    return predictor_refiner_sample(flow_map, chain0, cfg, rng)


def energy_trace(traj: Trajectory) -> list:
    """``[(t, pre_refine_residual, post_refine_residual), ...]`` per update step."""
    if traj.pre_residuals is None or traj.post_residuals is None:
        raise InvalidStateError("trajectory was recorded without residuals (record_energy=False)")
    return list(zip(traj.times, traj.pre_residuals, traj.post_residuals))


def _state_norm(x) -> float:
    if isinstance(x, FrameChain):
        return float(np.mean(np.linalg.norm(x.trans.reshape(x.trans.shape[:-2] + (-1,)), axis=-1)))
    x = np.asarray(x)
    return float(np.mean(np.linalg.norm(x, axis=-1)))


TRAJECTORY_COLUMNS = ("step", "t", "state_norm", "pre_residual", "post_residual", "nfe_cumulative")


def trajectory_rows(traj: Trajectory, refinements: int) -> list:
    rows = []
    per_step = 1 + refinements
    n_updates = len(traj.times)
    for s in range(n_updates):
        rows.append(
            {
                "step": s + 1,
                "t": traj.times[s],
                "state_norm": _state_norm(traj.states[s + 1]),
                "pre_residual": traj.pre_residuals[s] if traj.pre_residuals is not None else "",
                "post_residual": traj.post_residuals[s] if traj.post_residuals is not None else "",
                "nfe_cumulative": (s + 1) * per_step,
            }
        )
    if traj.completed:
        rows.append(
            {
                "step": n_updates + 1,
                "t": 1.0,
                "state_norm": _state_norm(traj.states[-1]),
                "pre_residual": "",
                "post_residual": "",
                "nfe_cumulative": n_updates * per_step,
            }
        )
    return rows


def _fmt(v):
    return f"{v:.17g}" if isinstance(v, float) else v


def write_trajectory_csv(path: os.PathLike, traj: Trajectory, refinements: int) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRAJECTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in trajectory_rows(traj, refinements):
            writer.writerow({k: _fmt(v) for k, v in row.items()})

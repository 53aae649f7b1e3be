"""Task-level training, sampling and evaluation built from a :class:`RunConfig`.

Random streams are derived from the run seed so that every stage can be
rerun on its own: parameters are initialised from ``seed``, training draws
from ``default_rng(seed)``, and sampling, reference sets, held-out
trajectories and held-out paths use ``default_rng([seed, 1])`` to
``default_rng([seed, 4])``.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from .config import ConfigError, RunConfig
from .energy import idempotency_residual
from .exceptions import InvalidArgumentError
from .flow import cfm_loss, sample_path, train
from .geometry import FrameChain, stack_chains
from .metrics import EvalReport, energy_distance_2d, kabsch_rmsd
from .nn import FlowModel
from .sampler import SampleConfig, Trajectory, predictor_refiner_sample
from .tasks import reference_structure, sample_prior, sample_target

SAMPLE_STREAM, REFERENCE_STREAM, HELDOUT_STREAM, LOSS_STREAM = 1, 2, 3, 4


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([seed, which])


def build_model(cfg: RunConfig) -> FlowModel:
    return FlowModel(cfg.net, seed=cfg.seed)


def train_model(cfg: RunConfig, model: Optional[FlowModel] = None, callback=None):
    """Train on the configured task; returns ``(model, TrainHistory)``."""
    task = cfg.task
    model = build_model(cfg) if model is None else model
    return train(
        model,
        lambda rng, b: sample_prior(task, rng, b),
        lambda rng, b: sample_target(task, rng, b).x1,
        cfg.train,
        cfg.path,
        callback=callback,
    )


def check_compatible(cfg: RunConfig, model: FlowModel) -> None:
    for key in ("head", "dim"):
        want, have = getattr(cfg.net, key), getattr(model.config, key)
        if want != have:
            raise ConfigError(f"net.{key}", f"checkpoint has {have!r}, config needs {want!r}")


def draw_samples(cfg: RunConfig, model: FlowModel, sample_cfg: Optional[SampleConfig] = None, n: Optional[int] = None):
    """Integrate ``n`` prior draws; returns ``(samples, Trajectory)``."""
    check_compatible(cfg, model)
    sample_cfg = cfg.sample if sample_cfg is None else sample_cfg
    n = cfg.n_samples if n is None else n
    x0 = sample_prior(cfg.task, stream(cfg.seed, SAMPLE_STREAM), n)
    return predictor_refiner_sample(model, x0, sample_cfg)


def reference_samples(cfg: RunConfig, n: Optional[int] = None):
    n = cfg.eval.n_reference if n is None else n
    return sample_target(cfg.task, stream(cfg.seed, REFERENCE_STREAM), n).x1


def heldout_idempotency(cfg: RunConfig, model: FlowModel, n: Optional[int] = None) -> float:
    """Mean ``|f(x1_hat, t) - x1_hat|`` at points of fresh plain-Euler trajectories.

    ``x1_hat = f(x_t, t)`` is the model's own prediction along a trajectory
    started from held-out prior draws, so every model is judged on the
    states it actually visits.
    """
    check_compatible(cfg, model)
    n = cfg.eval.idempotency_samples if n is None else n
    x = sample_prior(cfg.task, stream(cfg.seed, HELDOUT_STREAM), n)
    plain = dataclasses.replace(cfg.sample, refinements=0, record_energy=False)
    _, traj = predictor_refiner_sample(model, x, plain)
    values = [np.mean(idempotency_residual(model, state, t)) for state, t in zip(traj.states, traj.times)]
    return float(np.mean(values))


def heldout_cfm_loss(cfg: RunConfig, model: FlowModel, n: Optional[int] = None) -> float:
    """Flow-matching loss on fresh prior/target pairs with ``t ~ U(0, 1)``."""
    check_compatible(cfg, model)
    n = cfg.eval.idempotency_samples if n is None else n
    rng = stream(cfg.seed, LOSS_STREAM)
    x0 = sample_prior(cfg.task, rng, n)
    x1 = sample_target(cfg.task, rng, n).x1
    return cfm_loss(model, sample_path(x0, x1, rng.uniform(size=n), cfg.path, rng))


def _as_structures(cfg: RunConfig, samples) -> np.ndarray:
    """Coordinates ``(n, atoms, 3)`` for the structure tasks."""
    if cfg.task.kind == "helix_frames":
        if isinstance(samples, list):
            samples = stack_chains(samples)
        if not isinstance(samples, FrameChain):
            raise InvalidArgumentError("helix evaluation needs frame chains")
        if samples.trans.ndim != 3:
            raise InvalidArgumentError("helix evaluation needs a batch of frame chains")
        if samples.n_frames != cfg.task.n_residues:
            raise InvalidArgumentError(f"chains have {samples.n_frames} frames, task has {cfg.task.n_residues}")
        return samples.trans
    x = np.asarray(samples, dtype=float)
    if x.ndim != 2 or x.shape[1] != 3 * cfg.task.n_atoms:
        raise InvalidArgumentError(f"expected (n, {3 * cfg.task.n_atoms}) chain coordinates, got {x.shape}")
    return x.reshape(len(x), cfg.task.n_atoms, 3)


def evaluate(cfg: RunConfig, samples, references=None, model: Optional[FlowModel] = None) -> EvalReport:
    """Task metrics for ``samples``.

    Mixtures get the energy distance to ``references`` (or a fresh reference
    set). Structure tasks get per-sample Kabsch RMSD, against the paired
    reference when ``references`` is given and the noise-free reference
    structure otherwise; helices also report the fraction of consecutive
    C-alpha spacings within tolerance.
    """
    kind = cfg.task.kind
    if kind == "mixture2d":
        x = np.asarray(samples, dtype=float)
        if x.ndim != 2 or x.shape[1] != 2 or len(x) == 0:
            raise InvalidArgumentError(f"expected non-empty (n, 2) samples, got {x.shape}")
        ref = reference_samples(cfg) if references is None else np.asarray(references, dtype=float)
        report = EvalReport(energy_distance=energy_distance_2d(x, ref))
        n_eval = len(x)
    else:
        coords = _as_structures(cfg, samples)
        if len(coords) == 0:
            raise InvalidArgumentError("no samples to evaluate")
        if references is None:
            ref = reference_structure(cfg.task)
            ref = ref.trans if isinstance(ref, FrameChain) else ref
            refs = np.broadcast_to(ref, coords.shape)
        else:
            refs = _as_structures(cfg, references)
            if len(refs) == 1:
                refs = np.broadcast_to(refs[0], coords.shape)
            elif refs.shape != coords.shape:
                raise InvalidArgumentError(f"{len(refs)} references for {len(coords)} samples")
        rmsds = [kabsch_rmsd(c, r) for c, r in zip(coords, refs)]
        n_eval = len(coords)
        report = EvalReport.from_rmsds(rmsds)
        if kind == "helix_frames":
            spacing = np.linalg.norm(np.diff(coords, axis=1), axis=-1)
            ok = np.abs(spacing - cfg.task.ca_spacing) <= cfg.eval.ca_tolerance
            report.extra["ca_spacing_fraction"] = float(np.mean(ok))
            report.extra["mean_rmsd"] = float(np.mean(rmsds))
    if model is not None:
        report.mean_idempotency_residual = heldout_idempotency(cfg, model)
        report.extra["heldout_cfm_loss"] = heldout_cfm_loss(cfg, model)
    report.metadata = {"task": kind, "n_samples": int(n_eval)}
    return report


def ablation_steps(budget: int, k: int) -> int:
    """Grid size ``T`` with ``(T - 1)(1 + k) <= budget`` as large as possible."""
    return budget // (1 + k) + 1


ABLATION_COLUMNS = ("k", "steps", "nfe", "metric", "value", "mean_post_residual")


def ablation_table(cfg: RunConfig, model: FlowModel) -> list:
    """Task metric for each ``k`` in ``cfg.eval.ablation_ks`` at a fixed NFE budget.

    Every row starts from the same prior draws. The metric is the energy
    distance for mixtures and the median RMSD for structure tasks.
    """
    check_compatible(cfg, model)
    x0 = sample_prior(cfg.task, stream(cfg.seed, SAMPLE_STREAM), cfg.n_samples)
    refs = reference_samples(cfg) if cfg.task.kind == "mixture2d" else None
    rows = []
    for k in cfg.eval.ablation_ks:
        steps = ablation_steps(cfg.eval.ablation_nfe, k)
        scfg = dataclasses.replace(cfg.sample, steps=steps, refinements=k, record_energy=True)
        x, traj = predictor_refiner_sample(model, x0, scfg)
        report = evaluate(cfg, x, refs)
        metric, value = ("energy_distance", report.energy_distance) if refs is not None else ("median_rmsd", report.median)
        rows.append(
            {
                "k": k,
                "steps": steps,
                "nfe": traj.nfe_count,
                "metric": metric,
                "value": value,
                "mean_post_residual": float(np.mean(traj.post_residuals)),
            }
        )
    return rows


def final_quarter_residuals(traj: Trajectory):
    """Mean pre- and post-refinement residuals over the last quarter of steps."""
    if traj.pre_residuals is None:
        raise InvalidArgumentError("trajectory has no recorded residuals")
    n = len(traj.pre_residuals)
    start = n - max(1, n // 4)
    return float(np.mean(traj.pre_residuals[start:])), float(np.mean(traj.post_residuals[start:]))

"""Self-contained numerical check suites behind ``idflow check``.

Each suite compares the library against an independent route to the same
quantity and reports the worst error it saw. ``faults`` injects known bugs so
that the suites can be shown to fail when they should.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from .exceptions import InvalidArgumentError
from .flow import PathConfig, cfm_loss_t, sample_path
from .geometry import FrameChain, hat, so3_exp, so3_log, uniform_so3_sample
from .nn import FlowModel, NetConfig, finite_diff_gradient, loss_gradient
from .sampler import SampleConfig, predictor_refiner_sample, vector_field

SUITES = ("geom", "grad", "sampler")
FAULTS = ("exp_sign", "grad_scale", "vf_sign")

CHECK_COLUMNS = ("suite", "check", "max_error", "tolerance", "passed")


@dataclass
class CheckResult:
    suite: str
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_error) and self.max_error < self.tolerance)


def taylor_expm(A: np.ndarray, terms: int = 30) -> np.ndarray:
    """Matrix exponential by Taylor series with scaling and squaring."""
    A = np.asarray(A, dtype=float)
    norm = np.abs(A).sum(axis=-1).max()
    squarings = max(0, int(math.ceil(math.log2(norm))) + 1) if norm > 0.5 else 0
    B = A / 2.0**squarings
    out = np.eye(A.shape[-1])
    term = np.eye(A.shape[-1])
    for k in range(1, terms):
        term = term @ B / k
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out


def _random_vectors(rng, n, lo, hi):
    axes = rng.standard_normal((n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    return axes * rng.uniform(lo, hi, size=(n, 1))


def geom_suite(rng: np.random.Generator, faults=()) -> list:
    exp = (lambda w: so3_exp(-np.asarray(w))) if "exp_sign" in faults else so3_exp
    out = []

    w = _random_vectors(rng, 1000, 0.0, 3.0 * math.pi)
    err = max(np.abs(exp(v) - taylor_expm(hat(v))).max() for v in w)
    out.append(CheckResult("geom", "exp_vs_taylor", float(err), 1e-10))

    w = _random_vectors(rng, 1000, 1e-6, math.pi - 1e-3)
    err = np.abs(so3_log(exp(w)) - w).max()
    out.append(CheckResult("geom", "exp_log_roundtrip", float(err), 1e-9))

    R = uniform_so3_sample(rng, 1000)
    err = np.abs(exp(so3_log(R)) - R).max()
    out.append(CheckResult("geom", "log_exp_roundtrip", float(err), 1e-9))

    E = exp(_random_vectors(rng, 1000, 0.0, 10.0))
    ortho = np.abs(np.swapaxes(E, -1, -2) @ E - np.eye(3)).max()
    det = np.abs(np.linalg.det(E) - 1.0).max()
    out.append(CheckResult("geom", "exp_is_rotation", float(max(ortho, det)), 1e-12))

    # one-parameter subgroup: exp(a w) exp(b w) = exp((a + b) w)
    w = _random_vectors(rng, 200, 0.0, 1.0)
    a, b = rng.uniform(-2, 2, size=(2, 200, 1))
    err = np.abs(exp(a * w) @ exp(b * w) - exp((a + b) * w)).max()
    out.append(CheckResult("geom", "exp_homomorphism", float(err), 1e-12))
    return out


GRAD_CONFIGS = (
    NetConfig(head="euclidean", dim=3, hidden_dims=(4,)),
    NetConfig(head="euclidean", dim=3, hidden_dims=(6, 5), activation="tanh"),
    NetConfig(head="euclidean", dim=2, hidden_dims=(8,), linear_skip=True),
    NetConfig(head="se3", dim=2, hidden_dims=(4,), time_embed_dim=4),
    NetConfig(head="se3", dim=2, hidden_dims=(5, 5), activation="tanh", trans_scale=3.0),
    NetConfig(head="se3", dim=3, hidden_dims=(6,), linear_skip=True, rotation_param="abcd"),
    NetConfig(head="se3", dim=2, hidden_dims=(5,), linear_skip=True, rotation_param="gram_schmidt"),
)


def _config_label(cfg: NetConfig) -> str:
    extras = "+skip" if cfg.linear_skip else ""
    if cfg.head == "se3" and cfg.rotation_param != "bcd":
        extras += "+" + cfg.rotation_param
    widths = "x".join(map(str, cfg.hidden_dims))
    return f"{cfg.head}_{widths}_{cfg.activation}{extras}"


def _grad_batch(cfg: NetConfig, rng, batch=4):
    if cfg.head == "euclidean":
        x0 = rng.standard_normal((batch, cfg.dim))
        x1 = rng.standard_normal((batch, cfg.dim)) + 1.0
    else:
        x0 = FrameChain(uniform_so3_sample(rng, (batch, cfg.dim)), rng.standard_normal((batch, cfg.dim, 3)))
        x1 = FrameChain(uniform_so3_sample(rng, (batch, cfg.dim)), 2.0 * rng.standard_normal((batch, cfg.dim, 3)))
    return sample_path(x0, x1, rng.uniform(0.05, 0.95, size=batch), PathConfig(sigma=0.3), rng)


def relative_gradient_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Worst ``|a - n| / |a|`` over coordinates with ``|a| > floor``."""
    mask = np.abs(analytic) > floor
    if not mask.any():
        return 0.0
    return float(np.max(np.abs(analytic[mask] - numeric[mask]) / np.abs(analytic[mask])))


def grad_suite(rng: np.random.Generator, faults=()) -> list:
    out = []
    for cfg in GRAD_CONFIGS:
        base = FlowModel(cfg, seed=int(rng.integers(2**31)))
        # the zero output layer would hide most of the network from the check
        model = FlowModel(cfg, base.params + 0.3 * rng.standard_normal(base.params.size))
        batch = _grad_batch(cfg, rng)
        loss = lambda th: cfm_loss_t(model, th, batch)
        analytic = loss_gradient(model, loss)
        if "grad_scale" in faults:
            analytic = analytic * (1.0 + 1e-3)
        numeric = finite_diff_gradient(model, loss, h=1e-3, order=4)
        out.append(CheckResult("grad", f"fd_{_config_label(cfg)}", relative_gradient_error(analytic, numeric), 1e-4))
    return out


class ConstantOracle:
    """Flow map that ignores its input and always predicts ``target``."""

    def __init__(self, target):
        self.target = target

    def __call__(self, x, t):
        if isinstance(self.target, FrameChain):
            return self.target.copy()
        return np.broadcast_to(self.target, np.shape(x)).copy()


def sampler_suite(rng: np.random.Generator, faults=()) -> list:
    out = []
    final_err = grid_err = nfe_err = strict_err = 0.0
    for T in (2, 10, 100):
        for k in (0, 1, 2):
            x0 = 3.0 * rng.standard_normal((5, 4))
            c = rng.standard_normal(4)
            cfg = SampleConfig(steps=T, refinements=k)
            x, traj = predictor_refiner_sample(ConstantOracle(c), x0, cfg)
            final_err = max(final_err, np.abs(x - c).max())
            for s, state in enumerate(traj.states[: T]):
                t = s / T
                grid_err = max(grid_err, np.abs(state - (c + (1.0 - t) * (x0 - c))).max())
            nfe_err = max(nfe_err, abs(traj.nfe_count - (T - 1) * (1 + k)))
            xs, _ = predictor_refiner_sample(ConstantOracle(c), x0, SampleConfig(steps=T, refinements=k, final_completion=False))
            strict_err = max(strict_err, np.abs(xs - (c + (x0 - c) / T)).max())
    out.append(CheckResult("sampler", "constant_final_state", float(final_err), 1e-12))
    out.append(CheckResult("sampler", "constant_grid_states", float(grid_err), 1e-12))
    out.append(CheckResult("sampler", "nfe_count", float(nfe_err), 0.5))
    out.append(CheckResult("sampler", "strict_stop_state", float(strict_err), 1e-12))

    chain_err = 0.0
    for T in (2, 10, 100):
        target = FrameChain(uniform_so3_sample(rng, 3), rng.standard_normal((3, 3)))
        start_rots = target.rots @ so3_exp(_random_vectors(rng, 3, 0.1, 2.5))
        start = FrameChain(start_rots, rng.standard_normal((3, 3)))
        _, traj = predictor_refiner_sample(ConstantOracle(target), start, SampleConfig(steps=T, refinements=1))
        rel = so3_log(np.swapaxes(target.rots, -1, -2) @ start.rots)
        for s, state in enumerate(traj.states[:T]):
            t = s / T
            expected = target.rots @ so3_exp((1.0 - t) * rel)
            chain_err = max(chain_err, np.abs(state.rots - expected).max())
    out.append(CheckResult("sampler", "se3_geodesic_states", float(chain_err), 1e-10))

    vf = (lambda a, b, t: -vector_field(a, b, t)) if "vf_sign" in faults else vector_field
    x0 = rng.standard_normal((200, 3))
    x1 = rng.standard_normal((200, 3))
    vf_err = 0.0
    for t in np.linspace(0.0, 0.99, 100):
        x_t = t * x1 + (1.0 - t) * x0
        vf_err = max(vf_err, np.abs(vf(x1, x_t, t) - (x1 - x0)).max())
    out.append(CheckResult("sampler", "vector_field_identity", float(vf_err), 1e-12))
    return out


_RUNNERS = {"geom": geom_suite, "grad": grad_suite, "sampler": sampler_suite}


def run_suite(name: str, seed: int = 0, faults=()) -> list:
    """Run one suite (or ``"all"``) and return its :class:`CheckResult` list."""
    unknown = set(faults) - set(FAULTS)
    if unknown:
        raise InvalidArgumentError(f"unknown faults {sorted(unknown)}; choose from {FAULTS}")
    names = SUITES if name == "all" else (name,)
    results = []
    for n in names:
        if n not in _RUNNERS:
            raise InvalidArgumentError(f"unknown suite {n!r}; choose from {SUITES + ('all',)}")
        results.extend(_RUNNERS[n](np.random.default_rng(seed), tuple(faults)))
    return results


def write_check_csv(path: os.PathLike, results) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CHECK_COLUMNS)
        for r in results:
            w.writerow([r.suite, r.name, f"{r.max_error:.6g}", f"{r.tolerance:g}", int(r.passed)])

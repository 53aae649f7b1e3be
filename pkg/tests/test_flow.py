import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from idflow.exceptions import InvalidArgumentError
from idflow.flow import (
    PathConfig,
    PathSample,
    TrainConfig,
    cfm_loss,
    cfm_loss_t,
    harmonic_prior_sample,
    path_laplacian,
    refinement_loss,
    refinement_loss_t,
    rotation_sq_distance_t,
    sample_path,
    se3_cfm_loss,
    train,
    train_step,
)
from idflow.geometry import FrameChain, so3_exp, uniform_so3_sample
from idflow.nn import AdamState, FlowModel, NetConfig, finite_diff_gradient, loss_gradient

from oracles import geodesic_distance


def perturbed(cfg, seed=0, scale=0.3):
    base = FlowModel(cfg, seed=seed)
    noise = np.random.default_rng(seed + 100).standard_normal(base.params.size)
    return FlowModel(cfg, base.params + scale * noise)


def frames(rng, batch, n):
    return FrameChain(uniform_so3_sample(rng, (batch, n)), rng.standard_normal((batch, n, 3)))


# -- paths -----------------------------------------------------------------


def test_sigma_zero_path_is_affine():
    p = sample_path(np.zeros((1, 2)), np.array([[10.0, 0.0]]), 0.3, PathConfig(sigma=0.0), np.random.default_rng(0))
    np.testing.assert_allclose(p.x_t, [[3.0, 0.0]], atol=1e-15)
    np.testing.assert_array_equal(p.x_t, p.mu_t)


@pytest.mark.parametrize("t", [0.0, 1.0])
def test_bridge_path_is_noise_free_at_endpoints(t):
    rng = np.random.default_rng(1)
    x0, x1 = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    p = sample_path(x0, x1, t, PathConfig(sigma_mode="bridge"), rng)
    np.testing.assert_array_equal(p.x_t, p.mu_t)


def test_constant_sigma_empirical_std():
    rng = np.random.default_rng(2)
    n = 100_000
    p = sample_path(np.zeros((n, 1)), np.ones((n, 1)), rng.uniform(size=n), PathConfig(sigma=0.5), rng)
    assert abs(np.std(p.x_t - p.mu_t) - 0.5) < 0.01


def test_bridge_sigma_values():
    np.testing.assert_allclose(PathConfig(sigma_mode="bridge").sigma_t([0.25, 0.5]), [math.sqrt(3) / 4, 0.5])


def test_se3_path_rotations_follow_geodesic_without_noise():
    rng = np.random.default_rng(3)
    x0, x1 = frames(rng, 4, 3), frames(rng, 4, 3)
    p = sample_path(x0, x1, 0.4, PathConfig(sigma=0.5), rng)
    for b in range(4):
        for i in range(3):
            d0 = geodesic_distance(x0.rots[b, i], p.x_t.rots[b, i])
            d1 = geodesic_distance(p.x_t.rots[b, i], x1.rots[b, i])
            total = geodesic_distance(x0.rots[b, i], x1.rots[b, i])
            assert d0 == pytest.approx(0.4 * total, abs=1e-9)
            assert d1 == pytest.approx(0.6 * total, abs=1e-9)
    np.testing.assert_array_equal(p.x_t.rots, p.mu_t.rots)
    assert not np.allclose(p.x_t.trans, p.mu_t.trans)


def test_path_argument_errors():
    rng = np.random.default_rng(0)
    with pytest.raises(InvalidArgumentError):
        PathConfig(sigma=-1.0)
    with pytest.raises(InvalidArgumentError):
        PathConfig(sigma_mode="cosine")
    with pytest.raises(InvalidArgumentError):
        sample_path(np.zeros((2, 2)), np.zeros((3, 2)), 0.5, PathConfig(), rng)
    with pytest.raises(InvalidArgumentError):
        sample_path(np.zeros((2, 2)), np.zeros((2, 2)), 1.5, PathConfig(), rng)


# -- losses ----------------------------------------------------------------


def zero_model(dim=2):
    return FlowModel(NetConfig(dim=dim, hidden_dims=(4,)), seed=0)


def manual_batch(x_t, x1, t):
    return PathSample(x_t, x1, np.asarray(t, dtype=float), x_t, x_t)


def test_cfm_loss_zero_model_single_sample():
    assert cfm_loss(zero_model(), manual_batch(np.array([[0.3, -0.2]]), np.array([[1.0, 0.0]]), [0.5])) == pytest.approx(1.0)


def test_cfm_loss_is_batch_mean():
    x1 = np.array([[1.0, 0.0], [1.0, math.sqrt(2.0)]])
    assert cfm_loss(zero_model(), manual_batch(np.zeros((2, 2)), x1, [0.1, 0.9])) == pytest.approx(2.0)


def test_cfm_loss_zero_for_perfect_model():
    # zero-init model predicts 0 everywhere
    assert cfm_loss(zero_model(), manual_batch(np.ones((3, 2)), np.zeros((3, 2)), [0.2, 0.5, 0.7])) == 0.0


def test_cfm_loss_rejects_empty_batch():
    with pytest.raises(InvalidArgumentError):
        cfm_loss(zero_model(), manual_batch(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0)))


def se3_model(n, **kw):
    return FlowModel(NetConfig(head="se3", dim=n, hidden_dims=(5,), **kw), seed=0)


def test_se3_loss_quarter_turn_per_residue():
    n = 3
    x_t = FrameChain(np.broadcast_to(np.eye(3), (1, n, 3, 3)).copy(), np.zeros((1, n, 3)))
    x1 = FrameChain(np.broadcast_to(so3_exp([0.0, 0.0, math.pi / 2]), (1, n, 3, 3)).copy(), np.zeros((1, n, 3)))
    loss = se3_cfm_loss(se3_model(n), manual_batch(x_t, x1, [0.5]))
    assert loss == pytest.approx(n * (math.pi / 2) ** 2, rel=1e-12)


def test_se3_loss_zero_for_perfect_prediction():
    rng = np.random.default_rng(4)
    x = frames(rng, 2, 4)
    assert se3_cfm_loss(se3_model(4), manual_batch(x, x, [0.3, 0.6])) == pytest.approx(0.0, abs=1e-12)


def test_se3_loss_matches_componentwise_oracle():
    rng = np.random.default_rng(5)
    model = perturbed(NetConfig(head="se3", dim=3, hidden_dims=(6,)), seed=1)
    x_t, x1 = frames(rng, 4, 3), frames(rng, 4, 3)
    t = rng.uniform(size=4)
    pred = model(x_t, t)
    expect = []
    for b in range(4):
        trans = np.sum((pred.trans[b] - x1.trans[b]) ** 2)
        rot = sum(geodesic_distance(pred.rots[b, i], x1.rots[b, i]) ** 2 for i in range(3))
        expect.append(trans + rot)
    assert se3_cfm_loss(model, manual_batch(x_t, x1, t)) == pytest.approx(np.mean(expect), rel=1e-9)


def test_se3_loss_needs_se3_model():
    rng = np.random.default_rng(0)
    x = frames(rng, 1, 2)
    with pytest.raises(InvalidArgumentError):
        se3_cfm_loss(zero_model(), manual_batch(x, x, [0.5]))


@given(st.floats(0.0, math.pi - 1e-3))
@settings(max_examples=50, deadline=None)
def test_rotation_surrogate_matches_angle_squared(theta):
    r = torch.as_tensor(so3_exp([theta, 0.0, 0.0]))
    value = float(rotation_sq_distance_t(torch.eye(3, dtype=torch.float64), r))
    assert value == pytest.approx(theta**2, rel=1e-6, abs=1e-12)


@pytest.mark.parametrize("theta", [0.0, 1e-5, 1.0, math.pi - 1e-6, math.pi])
def test_rotation_surrogate_gradient_is_finite(theta):
    r_true = torch.as_tensor(so3_exp([0.0, theta, 0.0]))
    r_pred = torch.eye(3, dtype=torch.float64, requires_grad=True)
    rotation_sq_distance_t(r_pred, r_true).backward()
    assert torch.isfinite(r_pred.grad).all()


def test_rotation_surrogate_continuous_at_series_switch():
    # 1 - cos(theta) = 1e-6 is the switch point
    theta = math.acos(1.0 - 1e-6)
    below = float(rotation_sq_distance_t(torch.eye(3, dtype=torch.float64), torch.as_tensor(so3_exp([0, 0, theta * 0.999999]))))
    above = float(rotation_sq_distance_t(torch.eye(3, dtype=torch.float64), torch.as_tensor(so3_exp([0, 0, theta * 1.000001]))))
    assert below == pytest.approx(above, rel=1e-5)


# -- refinement ------------------------------------------------------------


def test_refinement_loss_zero_init_model():
    model = FlowModel(NetConfig(dim=1, hidden_dims=(4,)), seed=0)
    assert refinement_loss(model, np.array([[0.7]]), 0.4, np.array([[2.0]]), k=1) == pytest.approx(4.0)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_refinement_loss_zero_for_constant_target(k):
    # zero-init model is the constant map onto x1 = 0
    model = zero_model()
    rng = np.random.default_rng(k)
    assert refinement_loss(model, rng.standard_normal((5, 2)), rng.uniform(size=5), np.zeros((5, 2)), k=k) == 0.0


@pytest.mark.parametrize("mode", ["same_t", "one"])
def test_refinement_loss_is_mean_of_collected_losses(mode):
    model = perturbed(NetConfig(dim=2, hidden_dims=(6,)), seed=2)
    rng = np.random.default_rng(6)
    x_t, x1, t = rng.standard_normal((4, 2)), rng.standard_normal((4, 2)), rng.uniform(size=4)
    k = 2
    t_ref = t if mode == "same_t" else np.ones(4)
    x_hat = model(x_t, t)
    losses = []
    for _ in range(k + 1):
        x_hat = model(x_hat, t_ref)
        losses.append(np.mean(np.sum((x_hat - x1) ** 2, axis=1)))
    got = refinement_loss(model, x_t, t, x1, k, TrainConfig(refine_time_mode=mode))
    assert got == pytest.approx(np.mean(losses), rel=1e-12)


def test_refinement_gradient_ignores_pre_loop_prediction():
    model = perturbed(NetConfig(dim=2, hidden_dims=(5,)), seed=3)
    rng = np.random.default_rng(7)
    x_t, x1, t = rng.standard_normal((3, 2)), rng.standard_normal((3, 2)), rng.uniform(size=3)
    analytic = loss_gradient(model, lambda th: refinement_loss_t(model, th, x_t, t, x1, 2))
    # every refinement input is a constant evaluated at the current parameters
    inputs = [model(x_t, t)]
    for _ in range(2):
        inputs.append(model(inputs[-1], t))

    def loop_only(th):
        terms = [((model.predict_t(th, torch.as_tensor(a), torch.as_tensor(t)) - torch.as_tensor(x1)) ** 2).sum(-1).mean() for a in inputs]
        return torch.stack(terms).mean()

    fd = finite_diff_gradient(model, loop_only, h=1e-3, order=4)
    np.testing.assert_allclose(analytic, fd, rtol=1e-6, atol=1e-9)


def test_refinement_noise_needs_rng():
    model = zero_model()
    with pytest.raises(InvalidArgumentError):
        refinement_loss(model, np.zeros((1, 2)), 0.5, np.zeros((1, 2)), 1, TrainConfig(refine_noise=0.1))


def test_refinement_loss_rejects_k_zero():
    with pytest.raises(InvalidArgumentError):
        refinement_loss(zero_model(), np.zeros((1, 2)), 0.5, np.zeros((1, 2)), 0)


# -- training --------------------------------------------------------------


def tiny():
    return FlowModel(NetConfig(dim=1, hidden_dims=(2,), time_embed_dim=0), seed=0)


def gauss(rng, b):
    return rng.standard_normal((b, 1))


def test_train_config_validation():
    for bad in (dict(k_max=0), dict(refine_branch_prob=1.5), dict(refine_time_mode="x"), dict(lr=0.0), dict(steps=-1), dict(lr_schedule="step")):
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**bad)


def test_baseline_branch_is_always_cfm():
    _, hist = train(tiny(), gauss, gauss, TrainConfig(refine_branch_prob=0.0, steps=200, batch_size=1))
    assert set(hist.branches) == {"cfm"}
    assert set(hist.ks) == {0}


def test_k_max_one_always_refines_once():
    _, hist = train(tiny(), gauss, gauss, TrainConfig(k_max=1, refine_branch_prob=1.0, steps=100, batch_size=1))
    assert set(hist.ks) == {1}
    assert set(hist.branches) == {"refine"}


def test_k_is_uniform_over_one_to_k_max():
    _, hist = train(tiny(), gauss, gauss, TrainConfig(k_max=3, refine_branch_prob=1.0, steps=600, batch_size=1))
    counts = np.bincount(hist.ks, minlength=4)
    assert counts[0] == 0
    assert all(abs(c / 600 - 1 / 3) < 0.06 for c in counts[1:])


def test_branch_frequency_over_ten_thousand_steps():
    _, hist = train(tiny(), gauss, gauss, TrainConfig(k_max=1, refine_branch_prob=0.5, steps=10_000, batch_size=1))
    freq = np.mean([b == "refine" for b in hist.branches])
    assert abs(freq - 0.5) < 0.02


def test_training_is_deterministic():
    cfg = TrainConfig(steps=30, batch_size=4, seed=11)
    m1, h1 = train(tiny(), gauss, gauss, cfg)
    m2, h2 = train(tiny(), gauss, gauss, cfg)
    assert h1.branches == h2.branches and h1.ks == h2.ks and h1.losses == h2.losses
    np.testing.assert_array_equal(m1.params, m2.params)


def test_losses_are_non_negative():
    _, hist = train(tiny(), gauss, gauss, TrainConfig(steps=50, batch_size=4))
    assert min(hist.losses) >= 0.0


def test_single_point_training_converges():
    target = np.array([[1.5, -0.5]])
    model = FlowModel(NetConfig(dim=2, hidden_dims=(16,)), seed=0)
    model, _ = train(
        model,
        lambda rng, b: rng.standard_normal((b, 2)),
        lambda rng, b: np.repeat(target, b, axis=0),
        TrainConfig(steps=2000, batch_size=16, lr=1e-2, lr_schedule="cosine"),
        PathConfig(sigma=0.0),
    )
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal((64, 2))
    t = rng.uniform(size=64)
    x_t = t[:, None] * target + (1 - t[:, None]) * x0
    assert np.max(np.linalg.norm(model(x_t, t) - target, axis=1)) < 0.05


def test_train_step_returns_new_model():
    model = tiny()
    rng = np.random.default_rng(0)
    res = train_step(model, AdamState.zeros(model.params.size), gauss(rng, 4), gauss(rng, 4), rng, TrainConfig())
    assert res.model is not model
    assert not np.array_equal(res.model.params, model.params)
    assert res.opt_state.step == 1


def test_cosine_schedule():
    cfg = TrainConfig(lr=1e-3, steps=100, lr_schedule="cosine")
    assert cfg.lr_at(0) == pytest.approx(1e-3)
    assert cfg.lr_at(50) == pytest.approx(5e-4)
    assert cfg.lr_at(100) == pytest.approx(0.0, abs=1e-18)
    assert TrainConfig(lr=1e-3).lr_at(70) == 1e-3


def test_callback_can_stop_training():
    _, hist = train(tiny(), gauss, gauss, TrainConfig(steps=100), callback=lambda step, res: step == 4)
    assert len(hist.losses) == 5


def test_history_rows():
    _, hist = train(tiny(), gauss, gauss, TrainConfig(steps=3))
    rows = list(hist.rows())
    assert [r["step"] for r in rows] == [0, 1, 2]
    assert set(rows[0]) == {"step", "loss", "branch", "k"}


# -- harmonic prior --------------------------------------------------------


def test_path_laplacian():
    np.testing.assert_array_equal(path_laplacian(3), [[1, -1, 0], [-1, 2, -1], [0, -1, 1]])


def dense_covariance(n, eps):
    L = np.diag([1.0] + [2.0] * (n - 2) + [1.0]) - np.eye(n, k=1) - np.eye(n, k=-1)
    return np.linalg.inv(L + eps * np.eye(n))


def test_harmonic_prior_shapes():
    rng = np.random.default_rng(0)
    assert harmonic_prior_sample(5, rng).shape == (5, 3)
    assert harmonic_prior_sample(5, rng, size=7).shape == (7, 5, 3)
    with pytest.raises(InvalidArgumentError):
        harmonic_prior_sample(1, rng)


def test_harmonic_prior_mean_within_monte_carlo_bound():
    n, eps, draws = 5, 1e-4, 100_000
    x = harmonic_prior_sample(n, np.random.default_rng(8), size=draws, eps=eps)
    sd = np.sqrt(np.diag(dense_covariance(n, eps)))[:, None] / math.sqrt(draws)
    assert np.all(np.abs(x.mean(axis=0)) < 3 * sd)


def test_harmonic_prior_difference_covariance():
    n, eps = 6, 1e-4
    C = dense_covariance(n, eps)
    x = harmonic_prior_sample(n, np.random.default_rng(9), size=100_000, eps=eps)
    for i in range(n - 1):
        expect = C[i, i] + C[i + 1, i + 1] - 2 * C[i, i + 1]
        got = np.var(x[:, i, :] - x[:, i + 1, :], axis=0)
        np.testing.assert_allclose(got, expect, rtol=0.03)


def test_harmonic_prior_distance_grows_with_separation():
    n, eps = 8, 1e-4
    C = dense_covariance(n, eps)
    x = harmonic_prior_sample(n, np.random.default_rng(10), size=20_000, eps=eps)
    empirical = [np.mean(np.sum((x[:, 0] - x[:, k]) ** 2, axis=-1)) for k in range(1, 5)]
    theory = [3 * (C[0, 0] + C[k, k] - 2 * C[0, k]) for k in range(1, 5)]
    assert all(a < b for a, b in zip(empirical, empirical[1:]))
    np.testing.assert_allclose(empirical, theory, rtol=0.05)


def test_non_finite_loss_stops_training_and_keeps_parameters():
    model = FlowModel(NetConfig(dim=1, hidden_dims=(4,)), seed=0)
    trained, hist = train(model, gauss, gauss, TrainConfig(steps=50, lr=1e200, batch_size=4))
    assert not np.isfinite(hist.losses[-1])
    assert all(np.isfinite(hist.losses[:-1]))
    assert len(hist.losses) < 50
    assert np.all(np.isfinite(trained.params))

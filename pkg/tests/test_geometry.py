import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idflow.exceptions import InvalidArgumentError
from idflow.geometry import (
    IDEAL_BACKBONE,
    Frame,
    FrameChain,
    chain_update,
    euclidean_interpolant,
    frame_to_atoms,
    frame_update,
    hat,
    is_rotation,
    quaternion_to_matrix,
    read_frame_table,
    rotation_angle,
    se3_interpolant,
    so3_exp,
    so3_geodesic,
    so3_log,
    stack_chains,
    state_distance,
    uniform_so3_sample,
    vee,
    write_frame_table,
)

from oracles import eig_log_angle_axis, geodesic_distance, quaternion_matrix, rejection_haar, skew, taylor_expm

finite = st.floats(-10.0, 10.0, allow_nan=False)
vectors = st.tuples(finite, finite, finite).map(np.array)


def unit(v):
    return v / np.linalg.norm(v)


def rotvec_with_norm(rng, lo, hi, n):
    axes = rng.standard_normal((n, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    return axes * rng.uniform(lo, hi, size=(n, 1))


# -- exp ---------------------------------------------------------------------


def test_exp_of_zero_is_identity():
    assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))


def test_exp_quarter_turn_about_z():
    expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    assert np.abs(so3_exp([0, 0, math.pi / 2]) - expected).max() < 1e-15
    assert np.abs(taylor_expm(skew([0, 0, math.pi / 2])) - expected).max() < 1e-14


def test_exp_tiny_angle_is_first_order():
    w = 1e-9 * unit(np.array([0.3, -0.5, 0.8]))
    assert np.abs(so3_exp(w) - (np.eye(3) + hat(w))).max() < 1e-17


def test_exp_matches_taylor_oracle():
    rng = np.random.default_rng(0)
    for w in rotvec_with_norm(rng, 0.0, 3 * math.pi, 1000):
        assert np.abs(so3_exp(w) - taylor_expm(skew(w))).max() < 1e-10


def test_exp_batched_matches_loop():
    w = np.random.default_rng(1).standard_normal((4, 5, 3))
    batched = so3_exp(w)
    assert batched.shape == (4, 5, 3, 3)
    assert np.allclose(batched[2, 3], so3_exp(w[2, 3]), atol=0, rtol=0)


@pytest.mark.parametrize("bad", [[np.nan, 0, 0], [0, np.inf, 0]])
def test_exp_rejects_non_finite(bad):
    with pytest.raises(InvalidArgumentError):
        so3_exp(bad)


def test_exp_rejects_wrong_shape():
    with pytest.raises(InvalidArgumentError):
        so3_exp([1.0, 2.0])


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_exp_is_rotation(w):
    assert is_rotation(so3_exp(w))


def test_hat_vee_roundtrip():
    w = np.array([0.1, -2.0, 3.5])
    assert np.array_equal(vee(hat(w)), w)
    assert np.allclose(hat(w) @ np.array([1.0, 2.0, 3.0]), np.cross(w, [1.0, 2.0, 3.0]))


# -- log ---------------------------------------------------------------------


def test_log_of_identity_is_zero():
    assert np.array_equal(so3_log(np.eye(3)), np.zeros(3))


def test_log_exp_roundtrip_range():
    rng = np.random.default_rng(2)
    w = rotvec_with_norm(rng, 1e-6, math.pi - 1e-3, 2000)
    assert np.abs(so3_log(so3_exp(w)) - w).max() < 1e-9


def test_log_half_turn_about_z():
    w = so3_log(np.diag([-1.0, -1.0, 1.0]))
    theta, axis = eig_log_angle_axis(np.diag([-1.0, -1.0, 1.0]))
    assert math.isclose(np.linalg.norm(w), math.pi, abs_tol=1e-12)
    assert math.isclose(theta, math.pi, abs_tol=1e-12)
    assert np.allclose(np.abs(unit(w)), np.abs(axis), atol=1e-12)
    # the tie-break makes the first nonzero component positive
    assert np.allclose(w, [0.0, 0.0, math.pi], atol=1e-12)


def test_log_half_turn_canonical_sign():
    axis = unit(np.array([-1.0, 2.0, -0.5]))
    R = 2.0 * np.outer(axis, axis) - np.eye(3)  # exact half-turn
    w = so3_log(R)
    assert w[0] > 0
    assert np.allclose(np.abs(w), math.pi * np.abs(axis), atol=1e-10)


def test_log_near_pi_recovers_vector():
    rng = np.random.default_rng(3)
    for delta in (1e-3, 1e-6, 1e-8, 1e-10):
        axis = unit(rng.standard_normal(3))
        w = (math.pi - delta) * axis
        assert np.abs(so3_log(so3_exp(w)) - w).max() < 1e-7


def test_log_agrees_with_eigen_oracle():
    rng = np.random.default_rng(4)
    for R in rejection_haar(rng, 200):
        w = so3_log(R)
        theta, axis = eig_log_angle_axis(R)
        assert math.isclose(np.linalg.norm(w), theta, abs_tol=1e-9)
        assert abs(abs(unit(w) @ axis) - 1.0) < 1e-8


def test_log_exp_on_haar_rotations():
    R = uniform_so3_sample(np.random.default_rng(5), 1000)
    assert np.abs(so3_exp(so3_log(R)) - R).max() < 1e-9
    assert np.all(np.linalg.norm(so3_log(R), axis=-1) <= math.pi + 1e-12)


def test_log_rejects_non_rotation():
    with pytest.raises(InvalidArgumentError):
        so3_log(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(InvalidArgumentError):
        so3_log(2.0 * np.eye(3))


@settings(max_examples=200, deadline=None)
@given(vectors)
def test_log_norm_at_most_pi(w):
    v = so3_log(so3_exp(w))
    assert np.linalg.norm(v) <= math.pi + 1e-12
    assert np.abs(so3_exp(v) - so3_exp(w)).max() < 1e-9


def test_rotation_angle_matches_log_norm():
    R = uniform_so3_sample(np.random.default_rng(6), 50)
    assert np.allclose(rotation_angle(R), np.linalg.norm(so3_log(R), axis=-1), atol=1e-12)


# -- geodesics ---------------------------------------------------------------


def test_geodesic_endpoints():
    r0, r1 = uniform_so3_sample(np.random.default_rng(7), 2)
    assert np.abs(so3_geodesic(r0, r1, 0.0) - r0).max() < 1e-12
    assert np.abs(so3_geodesic(r0, r1, 1.0) - r1).max() < 1e-12


def test_geodesic_midpoint_of_quarter_turn():
    r1 = taylor_expm(skew([0, 0, math.pi / 2]))
    mid = so3_geodesic(np.eye(3), r1, 0.5)
    assert np.abs(mid - taylor_expm(skew([0, 0, math.pi / 4]))).max() < 1e-12


def test_geodesic_distance_proportional():
    rng = np.random.default_rng(8)
    for _ in range(50):
        r0, r1 = uniform_so3_sample(rng, 2)
        t = rng.uniform()
        rt = so3_geodesic(r0, r1, t)
        assert math.isclose(geodesic_distance(rt, r1), (1 - t) * geodesic_distance(r0, r1), abs_tol=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_geodesic_additivity(a, b, seed):
    r0, r1 = uniform_so3_sample(np.random.default_rng(seed), 2)
    # stay clear of the cut locus, where the geodesic direction is ambiguous
    if rotation_angle(r0.T @ r1) > math.pi - 1e-3:
        return
    lhs = so3_geodesic(r0, r1, a * b)
    rhs = so3_geodesic(r0, so3_geodesic(r0, r1, b), a)
    assert np.abs(lhs - rhs).max() < 1e-9


def test_geodesic_rejects_t_outside_unit_interval():
    with pytest.raises(InvalidArgumentError):
        so3_geodesic(np.eye(3), np.eye(3), 1.5)


def test_euclidean_interpolant():
    assert np.array_equal(euclidean_interpolant([0, 0], [2, 4], 0.25), [0.5, 1.0])
    assert np.array_equal(euclidean_interpolant([1, 2], [3, 4], 0.0), [1, 2])
    assert np.array_equal(euclidean_interpolant([1, 2], [3, 4], 1.0), [3, 4])
    with pytest.raises(InvalidArgumentError):
        euclidean_interpolant([0, 0], [1, 1, 1], 0.5)


def test_se3_interpolant_endpoints_and_components():
    rng = np.random.default_rng(9)
    r0, r1 = uniform_so3_sample(rng, 2)
    f0, f1 = Frame(r0, rng.standard_normal(3)), Frame(r1, rng.standard_normal(3))
    for t in (0.0, 0.3, 1.0):
        ft = se3_interpolant(f0, f1, t)
        assert np.abs(ft.r - so3_geodesic(r0, r1, t)).max() < 1e-15
        assert np.allclose(ft.s, t * f1.s + (1 - t) * f0.s, atol=1e-15)
    assert np.abs(se3_interpolant(f0, f1, 0.0).r - r0).max() < 1e-12
    assert np.abs(se3_interpolant(f0, f1, 1.0).r - r1).max() < 1e-12


def test_se3_interpolant_pure_translation():
    f0, f1 = Frame(np.eye(3), [0.0, 0, 0]), Frame(np.eye(3), [1.0, 2, 3])
    for t in np.linspace(0, 1, 7):
        assert np.array_equal(se3_interpolant(f0, f1, t).r, np.eye(3))


def test_se3_interpolant_chains():
    rng = np.random.default_rng(10)
    a = FrameChain(uniform_so3_sample(rng, 4), rng.standard_normal((4, 3)))
    b = FrameChain(uniform_so3_sample(rng, 4), rng.standard_normal((4, 3)))
    mid = se3_interpolant(a, b, 0.5)
    for i, (fa, fb) in enumerate(zip(a.frames(), b.frames())):
        single = se3_interpolant(fa, fb, 0.5)
        assert np.abs(mid.rots[i] - single.r).max() < 1e-14
    with pytest.raises(InvalidArgumentError):
        se3_interpolant(a, a.frames()[0], 0.5)


# -- sampling and quaternions ------------------------------------------------


def test_uniform_sample_golden():
    R = uniform_so3_sample(np.random.default_rng(1234))
    golden = np.array(
        [
            [0.6365305103562435, 0.1856482656687576, -0.7485743990010632],
            [-0.12531559745587836, 0.9825946154606962, 0.13712703125905917],
            [0.7610025692597211, 0.006522508860027809, 0.6487160753814216],
        ]
    )
    assert np.abs(R - golden).max() < 1e-14


def test_uniform_sample_is_rotation():
    R = uniform_so3_sample(np.random.default_rng(11), (3, 7))
    assert R.shape == (3, 7, 3, 3)
    assert is_rotation(R)


def test_uniform_sample_haar_trace_mean():
    R = uniform_so3_sample(np.random.default_rng(12), 100_000)
    tr = np.trace(R, axis1=-2, axis2=-1)
    # independent sampler, same law: compare the first two moments
    ref = np.trace(rejection_haar(np.random.default_rng(13), 5000), axis1=-2, axis2=-1)
    sd = tr.std()
    assert abs(tr.mean()) < 3 * sd / math.sqrt(tr.size)
    assert abs(sd - ref.std()) < 0.05
    # for Haar measure E[tr R] = 0 and E[tr(R)^2] = 1
    assert abs(np.mean(tr**2) - 1.0) < 0.03


def test_quaternion_matrix_matches_sandwich_oracle():
    rng = np.random.default_rng(14)
    for q in rng.standard_normal((200, 4)):
        assert np.abs(quaternion_to_matrix(q) - quaternion_matrix(*q)).max() < 1e-14


def test_quaternion_row3_col2_entry():
    # R[2, 1] = 2cd + 2ab for a unit quaternion (a, b, c, d)
    q = unit(np.array([0.4, 0.3, -0.5, 0.7]))
    a, b, c, d = q
    assert math.isclose(quaternion_to_matrix(q)[2, 1], 2 * c * d + 2 * a * b, abs_tol=1e-15)


# -- frames ------------------------------------------------------------------


def test_frame_update_zero_is_identity():
    rng = np.random.default_rng(15)
    f = Frame(uniform_so3_sample(rng), rng.standard_normal(3))
    g = frame_update(f, 0.0, 0.0, 0.0, np.zeros(3))
    assert np.array_equal(g.r, f.r)
    assert np.array_equal(g.s, f.s)


def test_frame_update_unit_b_is_quarter_turn_about_x():
    g = frame_update(Frame.identity(), 1.0, 0.0, 0.0, np.zeros(3))
    expected = quaternion_matrix(1.0, 1.0, 0.0, 0.0)
    assert np.abs(g.r - expected).max() < 1e-15
    assert np.abs(g.r - taylor_expm(skew([math.pi / 2, 0, 0]))).max() < 1e-12


def test_frame_update_composition_order():
    rng = np.random.default_rng(16)
    f = Frame(uniform_so3_sample(rng), rng.standard_normal(3))
    b, c, d = rng.standard_normal(3)
    s_u = rng.standard_normal(3)
    g = frame_update(f, b, c, d, s_u)
    r_u = quaternion_matrix(1.0, b, c, d)
    assert np.abs(g.r - f.r @ r_u).max() < 1e-14
    assert np.abs(g.s - (f.r @ s_u + f.s)).max() < 1e-14


@settings(max_examples=100, deadline=None)
@given(finite, finite, finite, vectors)
def test_frame_update_stays_rigid(b, c, d, s):
    g = frame_update(Frame.identity(), b, c, d, s)
    assert is_rotation(g.r)


def test_chain_update_matches_frame_update():
    rng = np.random.default_rng(17)
    chain = FrameChain(uniform_so3_sample(rng, 5), rng.standard_normal((5, 3)))
    bcd, s_u = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    out = chain_update(chain, bcd, s_u)
    for i, f in enumerate(chain.frames()):
        g = frame_update(f, *bcd[i], s_u[i])
        assert np.abs(out.rots[i] - g.r).max() < 1e-14
        assert np.abs(out.trans[i] - g.s).max() < 1e-14


def test_frame_validation():
    with pytest.raises(InvalidArgumentError):
        Frame(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(InvalidArgumentError):
        Frame(np.eye(3), [0.0, np.nan, 0.0])
    with pytest.raises(InvalidArgumentError):
        FrameChain(np.zeros((0, 3, 3)), np.zeros((0, 3)))
    with pytest.raises(InvalidArgumentError):
        FrameChain(np.eye(3)[None], np.zeros((2, 3)))


def test_frame_compose_and_apply():
    rng = np.random.default_rng(18)
    f = Frame(uniform_so3_sample(rng), rng.standard_normal(3))
    g = Frame(uniform_so3_sample(rng), rng.standard_normal(3))
    x = rng.standard_normal((4, 3))
    assert np.allclose(f.compose(g).apply(x), f.apply(g.apply(x)), atol=1e-13)


def test_chain_indexing_and_stacking():
    rng = np.random.default_rng(19)
    chains = [FrameChain(uniform_so3_sample(rng, 3), rng.standard_normal((3, 3))) for _ in range(2)]
    batch = stack_chains(chains)
    assert batch.batch_shape == (2,)
    assert batch.n_frames == 3
    assert np.array_equal(batch[1].rots, chains[1].rots)
    with pytest.raises(InvalidArgumentError):
        chains[0][0]
    with pytest.raises(InvalidArgumentError):
        batch.frames()


def test_state_distance():
    assert np.allclose(state_distance(np.array([[3.0, 4.0]]), np.zeros((1, 2))), [5.0])
    rng = np.random.default_rng(20)
    a = FrameChain(uniform_so3_sample(rng, 2), rng.standard_normal((2, 3)))
    b = FrameChain(a.rots @ so3_exp(np.array([[0.3, 0, 0], [0, 0.4, 0]])), a.trans + [[1.0, 0, 0], [0, 0, 0]])
    assert math.isclose(float(state_distance(a, b)), math.sqrt(0.09 + 0.16 + 1.0), rel_tol=1e-12)


# -- atoms -------------------------------------------------------------------


def test_identity_frame_gives_ideal_atoms():
    atoms = frame_to_atoms(Frame.identity())
    assert np.array_equal(atoms.n, [-0.525, 1.363, 0.0])
    assert np.array_equal(atoms.ca, [0.0, 0.0, 0.0])
    assert np.array_equal(atoms.c, [1.526, 0.0, 0.0])
    assert np.array_equal(atoms.o, [0.627, 1.062, 0.0])


def test_ca_equals_translation_and_rigidity():
    rng = np.random.default_rng(21)

    def pairwise(x):
        return np.linalg.norm(x[:, None] - x[None], axis=-1)

    ref = pairwise(IDEAL_BACKBONE)
    for _ in range(20):
        f = Frame(uniform_so3_sample(rng), 10 * rng.standard_normal(3))
        atoms = frame_to_atoms(f)
        assert np.abs(atoms.ca - f.s).max() < 1e-12
        assert np.abs(pairwise(atoms.as_array()) - ref).max() < 1e-12


def test_chain_atoms_shape():
    chain = FrameChain.identity(4)
    assert frame_to_atoms(chain).as_array().shape == (4, 4, 3)


# -- frame table -------------------------------------------------------------


def test_frame_table_roundtrip_is_exact():
    rng = np.random.default_rng(22)
    chains = [FrameChain(uniform_so3_sample(rng, n), rng.standard_normal((n, 3))) for n in (3, 5)]
    buf = io.StringIO()
    write_frame_table(buf, chains)
    buf.seek(0)
    back = read_frame_table(buf)
    assert len(back) == 2
    for a, b in zip(chains, back):
        assert np.array_equal(a.rots, b.rots)
        assert np.array_equal(a.trans, b.trans)


def test_frame_table_rejects_short_lines(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("# chain 0\n0 1 0 0\n")
    with pytest.raises(InvalidArgumentError):
        read_frame_table(path)

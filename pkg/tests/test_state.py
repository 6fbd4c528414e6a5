import numpy as np
import pytest

from dcviro.lie import ExtendedPose, sek3_exp
from dcviro.state import (
    RobotState,
    WindowError,
    apply_correction,
    check_covariance,
    clone_pose,
    compute_error,
    from_record,
    initial_state,
    marginalize_oldest,
    to_record,
)
from dcviro.anchor_init import InitResult, augment_anchor

from _oracles import random_rotation


def random_spd(rng, n, scale=1.0):
    A = rng.normal(size=(n, n + 3))
    return scale * (A @ A.T) / n


def make_state(rng, n_anchors=2, n_clones=3, window=5):
    st = initial_state(random_rotation(rng), rng.normal(size=3), rng.normal(size=3),
                       1e-3 * np.eye(9), window=window)
    for a in range(n_anchors):
        res = InitResult(rng.normal(scale=5, size=3), 0.01 * np.eye(3), np.zeros((3, st.dim)))
        st = augment_anchor(st, res, a)
    st = st.copy(P=random_spd(rng, st.dim, 1e-2))
    for k in range(n_clones):
        st = clone_pose(st.copy(t=float(k)), float(k))
    return st


class TestLayout:
    def test_dimensions(self):
        st = make_state(np.random.default_rng(0), n_anchors=3, n_clones=4, window=6)
        assert st.dim == 15 + 9 + 24
        assert st.bias_slice == slice(18, 24)
        assert st.clone_slice(0) == slice(24, 30)
        assert st.anchor_slice(2) == slice(15, 18)

    def test_anchor_index_checked(self):
        st = make_state(np.random.default_rng(0), n_anchors=1, n_clones=0)
        with pytest.raises(IndexError):
            st.anchor_slice(1)

    def test_covariance_shape_checked(self):
        st = make_state(np.random.default_rng(0), n_anchors=0, n_clones=0)
        with pytest.raises(ValueError):
            RobotState(st.imu, st.biases, np.eye(3))


class TestCloning:
    def test_zero_covariance_gives_zero_clone_block(self):
        st = initial_state(np.eye(3), np.zeros(3), np.zeros(3), np.zeros((9, 9)),
                           bias_sigma=(0.0, 0.0))
        st = clone_pose(st, 0.0)
        assert not np.any(st.P)

    def test_matches_dense_construction(self):
        rng = np.random.default_rng(1)
        st = make_state(rng, n_anchors=1, n_clones=2)
        new = clone_pose(st, 99.0)
        n = st.clone_start
        # dense oracle: J maps old error to new error
        J = np.zeros((st.dim + 6, st.dim))
        J[:n, :n] = np.eye(n)
        J[n : n + 3, 0:3] = np.eye(3)
        J[n + 3 : n + 6, 6:9] = np.eye(3)
        J[n + 6 :, n:] = np.eye(st.dim - n)
        np.testing.assert_allclose(new.P, J @ st.P @ J.T, atol=1e-15)
        block = st.P[np.ix_(np.r_[0:3, 6:9], np.r_[0:3, 6:9])]
        assert np.trace(new.P) == pytest.approx(np.trace(st.P) + np.trace(block))

    def test_clone_reads_back_current_pose(self):
        st = make_state(np.random.default_rng(2), n_clones=0)
        st = clone_pose(st, 0.5)
        assert np.array_equal(st.clones[0].R, st.R)
        assert np.array_equal(st.clones[0].p, st.p)

    def test_window_limit(self):
        st = make_state(np.random.default_rng(3), n_clones=2, window=2)
        with pytest.raises(WindowError):
            clone_pose(st, 10.0)

    def test_timestamps_increase(self):
        st = make_state(np.random.default_rng(3), n_clones=1)
        with pytest.raises(WindowError):
            clone_pose(st, -1.0)


class TestMarginalize:
    def test_restores_dimension(self):
        st = make_state(np.random.default_rng(4), n_clones=0)
        back = marginalize_oldest(clone_pose(st, 0.0))
        assert back.dim == st.dim
        np.testing.assert_array_equal(back.P, st.P)

    def test_principal_submatrix(self):
        st = make_state(np.random.default_rng(5), n_clones=4)
        out = marginalize_oldest(st)
        keep = np.arange(st.dim - 6)
        np.testing.assert_array_equal(out.P, np.delete(np.delete(st.P, np.s_[-6:], 0),
                                                       np.s_[-6:], 1))
        np.testing.assert_array_equal(out.P, st.P[np.ix_(keep, keep)])
        assert [c.t for c in out.clones] == [c.t for c in st.clones[:-1]]

    def test_psd_preserved(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            st = make_state(rng, n_anchors=int(rng.integers(0, 3)), n_clones=int(rng.integers(1, 5)))
            out = marginalize_oldest(st)
            assert np.linalg.eigvalsh(out.P).min() >= -1e-9

    def test_empty_window(self):
        st = make_state(np.random.default_rng(6), n_clones=0)
        with pytest.raises(WindowError):
            marginalize_oldest(st)


class TestCorrection:
    def test_zero_is_noop(self):
        st = make_state(np.random.default_rng(7))
        out = apply_correction(st, np.zeros(st.dim))
        np.testing.assert_allclose(out.imu.matrix(), st.imu.matrix(), atol=0)
        for a, b in zip(out.clones, st.clones):
            np.testing.assert_array_equal(a.R, b.R)

    def test_small_round_trip(self):
        rng = np.random.default_rng(8)
        st = make_state(rng)
        eps = rng.normal(size=st.dim)
        eps *= 1e-6 / np.linalg.norm(eps)
        back = apply_correction(apply_correction(st, eps), -eps)
        np.testing.assert_allclose(back.imu.matrix(), st.imu.matrix(), atol=1e-9)
        np.testing.assert_allclose(back.biases.vector, st.biases.vector, atol=1e-15)

    def test_anchor_block_isolated(self):
        st = make_state(np.random.default_rng(9))
        eps = np.zeros(st.dim)
        eps[st.anchor_slice(1)] = [0.1, -0.2, 0.3]
        out = apply_correction(st, eps)
        np.testing.assert_array_equal(out.R, st.R)
        np.testing.assert_allclose(out.anchor_position(1), st.anchor_position(1) + eps[st.anchor_slice(1)])
        np.testing.assert_array_equal(out.anchor_position(0), st.anchor_position(0))
        np.testing.assert_array_equal(out.p, st.p)

    def test_wrong_length(self):
        st = make_state(np.random.default_rng(9))
        with pytest.raises(ValueError):
            apply_correction(st, np.zeros(st.dim + 1))


class TestError:
    def test_identical_states(self):
        st = make_state(np.random.default_rng(10))
        assert np.abs(compute_error(st, st)).max() < 1e-14

    def test_recovers_applied_twist(self):
        rng = np.random.default_rng(11)
        st = make_state(rng)
        xi = 1e-3 * rng.normal(size=st.dim)
        hat = apply_correction(st, xi)
        err = compute_error(hat, st)
        assert np.abs(err - xi).max() < 10 * np.linalg.norm(xi) ** 2 + 1e-12

    def test_bias_error_is_plain_difference(self):
        rng = np.random.default_rng(12)
        st = make_state(rng, n_clones=0)
        eps = np.zeros(st.dim)
        eps[st.bias_slice] = rng.normal(size=6)
        err = compute_error(apply_correction(st, eps), st)
        np.testing.assert_allclose(err[st.bias_slice], eps[st.bias_slice], atol=1e-15)

    def test_layout_mismatch(self):
        rng = np.random.default_rng(13)
        with pytest.raises(ValueError):
            compute_error(make_state(rng, n_clones=1), make_state(rng, n_clones=2))


def test_check_covariance():
    check_covariance(np.eye(4))
    with pytest.raises(ValueError):
        check_covariance(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        check_covariance(np.diag([1.0, -1.0]))


def test_record_round_trip():
    st = make_state(np.random.default_rng(14)).copy(robot_id=3, t=12.5)
    back = from_record(to_record(st))
    assert back.anchor_ids == st.anchor_ids
    assert back.robot_id == 3 and back.t == 12.5
    np.testing.assert_array_equal(back.P, st.P)
    np.testing.assert_array_equal(back.imu.matrix(), st.imu.matrix())
    assert [c.t for c in back.clones] == [c.t for c in st.clones]

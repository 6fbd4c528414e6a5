import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from dcviro.lie import (
    ExtendedPose,
    adjoint,
    is_rotation,
    pose_to_quaternion,
    sek3_exp,
    sek3_log,
    skew,
    so3_exp,
    so3_log,
    vee,
    wedge,
)

from _oracles import random_rotation, sek3_exp_ref

finite = st.floats(-3.0, 3.0, allow_nan=False, allow_infinity=False)
vec3 = st.lists(finite, min_size=3, max_size=3).map(np.array)


def random_pose(rng, K):
    return ExtendedPose(random_rotation(rng), rng.normal(scale=5.0, size=(3, K)))


class TestSO3:
    def test_zero_is_identity(self):
        assert np.array_equal(so3_exp(np.zeros(3)), np.eye(3))

    def test_quarter_turn_about_z(self):
        R = so3_exp(np.array([0.0, 0.0, np.pi / 2]))
        np.testing.assert_allclose(R @ [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], atol=1e-15)

    def test_log_identity(self):
        assert np.array_equal(so3_log(np.eye(3)), np.zeros(3))

    def test_log_half_turn(self):
        R = np.diag([-1.0, -1.0, 1.0])
        phi = so3_log(R)
        assert abs(np.linalg.norm(phi) - np.pi) < 1e-12
        np.testing.assert_allclose(np.abs(phi), [0.0, 0.0, np.pi], atol=1e-12)

    @pytest.mark.parametrize("angle", [1e-12, 1e-8, 1e-4, 0.5, 3.0, np.pi - 1e-6])
    def test_round_trip_across_magnitudes(self, angle):
        rng = np.random.default_rng(17)
        axis = rng.normal(size=3)
        phi = angle * axis / np.linalg.norm(axis)
        np.testing.assert_allclose(so3_log(so3_exp(phi)), phi, atol=1e-10)

    def test_matches_scipy(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            phi = rng.normal(size=3)
            np.testing.assert_allclose(so3_exp(phi), Rotation.from_rotvec(phi).as_matrix(),
                                       atol=1e-13)

    @given(vec3)
    @settings(max_examples=200, deadline=None)
    def test_round_trip_property(self, phi):
        if np.linalg.norm(phi) >= np.pi - 1e-6:
            phi = phi * (np.pi - 1e-3) / np.linalg.norm(phi)
        np.testing.assert_allclose(so3_log(so3_exp(phi)), phi, atol=1e-9)

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            so3_log(2.0 * np.eye(3))


class TestSEK3:
    def test_zero_twist(self):
        X = sek3_exp(np.zeros(12))
        assert X.K == 3
        assert np.array_equal(X.matrix(), np.eye(6))

    def test_pure_translation(self):
        t = np.arange(9.0)
        X = sek3_exp(np.r_[0.0, 0.0, 0.0, t])
        assert np.array_equal(X.R, np.eye(3))
        np.testing.assert_allclose(X.cols, t.reshape(3, 3).T)

    @pytest.mark.parametrize("K", [1, 2, 3, 5])
    def test_exp_matches_dense_expm(self, K):
        rng = np.random.default_rng(K)
        for _ in range(20):
            xi = rng.normal(size=3 * (K + 1))
            np.testing.assert_allclose(sek3_exp(xi).matrix(), sek3_exp_ref(xi), atol=1e-10)

    def test_round_trip_thousand(self):
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            K = int(rng.integers(1, 5))
            X = random_pose(rng, K)
            worst = max(worst, np.abs(sek3_exp(sek3_log(X)).matrix() - X.matrix()).max())
        assert worst < 1e-9

    def test_first_order_error_is_quadratic(self):
        rng = np.random.default_rng(5)
        d = rng.normal(size=12)
        d /= np.linalg.norm(d)
        errs = []
        for s in (1e-2, 1e-3, 1e-4):
            xi = s * d
            errs.append(np.linalg.norm(sek3_exp(xi).matrix() - (np.eye(6) + wedge(xi))))
        ratios = [errs[i] / errs[i + 1] for i in range(2)]
        for r in ratios:
            assert 80.0 < r < 120.0
        assert errs[0] <= 1.0 * 1e-4

    def test_wedge_vee_inverse(self):
        xi = np.random.default_rng(0).normal(size=9)
        np.testing.assert_array_equal(vee(wedge(xi)), xi)

    def test_group_axioms(self):
        rng = np.random.default_rng(3)
        A, B = random_pose(rng, 3), random_pose(rng, 3)
        np.testing.assert_allclose(A.compose(ExtendedPose.identity(3)).matrix(), A.matrix())
        np.testing.assert_allclose(A.compose(B).compose(B.inverse()).matrix(), A.matrix(),
                                   atol=1e-10)

    def test_invariant_error_of_perturbed_pose(self):
        rng = np.random.default_rng(8)
        T = random_pose(rng, 2)
        xi = 0.3 * rng.normal(size=9)
        T_hat = sek3_exp(xi).compose(T)
        eta = T_hat.compose(T.inverse())
        np.testing.assert_allclose(eta.matrix(), sek3_exp(xi).matrix(), atol=1e-12)

    def test_mixed_k_compose_rejected(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError):
            random_pose(rng, 2).compose(random_pose(rng, 3))

    def test_reflection_is_not_a_rotation(self):
        assert not is_rotation(np.diag([1.0, 1.0, -1.0]))
        assert is_rotation(so3_exp(np.array([0.3, -1.0, 2.0])))

    def test_bad_shapes_rejected(self):
        with pytest.raises(ValueError):
            ExtendedPose(np.eye(3), np.zeros((2, 2)))


class TestAdjoint:
    def test_identity(self):
        assert np.array_equal(adjoint(ExtendedPose.identity(3)), np.eye(12))

    def test_definition(self):
        rng = np.random.default_rng(11)
        for K in (1, 2, 3):
            X = random_pose(rng, K)
            xi = rng.normal(size=3 * (K + 1))
            lhs = adjoint(X) @ xi
            rhs = vee(X.matrix() @ wedge(xi) @ np.linalg.inv(X.matrix()))
            np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_homomorphism(self):
        rng = np.random.default_rng(12)
        worst = 0.0
        for _ in range(200):
            A, B = random_pose(rng, 3), random_pose(rng, 3)
            worst = max(worst, np.abs(adjoint(A.compose(B)) - adjoint(A) @ adjoint(B)).max())
        assert worst < 1e-8

    def test_three_column_layout(self):
        rng = np.random.default_rng(4)
        X = random_pose(rng, 3)
        Ad = adjoint(X)
        R = X.R
        for j in range(4):
            np.testing.assert_array_equal(Ad[3 * j : 3 * j + 3, 3 * j : 3 * j + 3], R)
        for j in range(3):
            np.testing.assert_allclose(Ad[3 * j + 3 : 3 * j + 6, 0:3], skew(X.cols[:, j]) @ R)
        assert np.count_nonzero(Ad[0:3, 3:]) == 0


def test_quaternion_matches_scipy():
    rng = np.random.default_rng(6)
    for _ in range(20):
        R = random_rotation(rng)
        q = pose_to_quaternion(R)
        x, y, z, w = Rotation.from_matrix(R).as_quat()
        ref = np.array([w, x, y, z])
        assert min(np.abs(q - ref).max(), np.abs(q + ref).max()) < 1e-12

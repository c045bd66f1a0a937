import math

import numpy as np
import pytest

from aquaslam import dpins, geom
from aquaslam.dpins import (
    IDX_P, IDX_TH, IDX_V, STATE_DIM,
    DvlSample, DrPose, ImuSample, NominalState, NoiseConfig, PressureSample,
)

G_DOWN = np.array([0.0, 0.0, dpins.GRAVITY])


def level_state():
    return NominalState.at_rest()


def body_specific_force(rot, a_world):
    """What the accelerometer reads for given world acceleration/attitude."""
    return rot.inverse().apply(a_world - G_DOWN)


class TestPredict:
    def test_equilibrium_leaves_state_fixed(self):
        state = level_state()
        cov = dpins.default_initial_covariance()
        noise = NoiseConfig()
        imu = ImuSample(0.0, np.zeros(3), body_specific_force(state.rot, np.zeros(3)))
        tr0 = np.trace(cov)
        for _ in range(200):
            state, cov = dpins.predict(state, cov, imu, 0.005, noise)
        assert np.allclose(state.p, 0, atol=1e-12)
        assert np.allclose(state.v, 0, atol=1e-12)
        assert state.rot.angle_to(geom.Rotation.identity()) < 1e-12
        assert np.trace(cov) > tr0  # covariance grows without updates

    def test_constant_acceleration_closed_form(self):
        # Oracle: p = 0.5 a t^2, v = a t for constant world acceleration.
        state = level_state()
        cov = dpins.default_initial_covariance()
        noise = NoiseConfig()
        a_world = np.array([1.0, 0.0, 0.0])
        imu = ImuSample(0.0, np.zeros(3), body_specific_force(state.rot, a_world))
        dt = 1.0 / 200.0
        for _ in range(200):
            state, cov = dpins.predict(state, cov, imu, dt, noise)
        assert np.allclose(state.v, [1.0, 0.0, 0.0], atol=1e-3)
        assert np.allclose(state.p, [0.5, 0.0, 0.0], atol=1e-3)

    def test_pure_rotation_exact_so3(self):
        # Oracle: attitude(t) = Exp(w t) for constant body rate.
        state = level_state()
        cov = dpins.default_initial_covariance()
        noise = NoiseConfig()
        w = np.array([0.0, 0.0, math.pi / 2.0])
        dt = 1.0 / 200.0
        t = 0.0
        for _ in range(200):
            a_body = body_specific_force(state.rot, np.zeros(3))
            state, cov = dpins.predict(state, cov, ImuSample(t, w, a_body), dt, noise)
            t += dt
        expected = geom.exp_so3(w * 1.0)
        assert state.rot.angle_to(expected) < 1e-4

    def test_rejects_bad_dt(self):
        state = level_state()
        cov = dpins.default_initial_covariance()
        imu = ImuSample(0.0, np.zeros(3), np.zeros(3))
        with pytest.raises(ValueError):
            dpins.predict(state, cov, imu, 0.0, NoiseConfig())
        with pytest.raises(ValueError):
            dpins.predict(state, cov, imu, 0.2, NoiseConfig())


class TestEskfUpdate:
    def test_zero_residual_keeps_state(self):
        state = level_state()
        cov = dpins.default_initial_covariance()
        h = np.zeros((3, STATE_DIM))
        h[:, IDX_V:IDX_V + 3] = np.eye(3)
        new_state, new_cov = dpins.eskf_update(state, cov, h, np.zeros(3),
                                               np.eye(3) * 1e-4)
        assert np.allclose(new_state.p, state.p)
        assert np.allclose(new_state.v, state.v)
        assert np.trace(new_cov) <= np.trace(cov) + 1e-12

    def test_tight_scalar_observation_pins_component(self):
        # Oracle: V -> 0 drives the Kalman gain to 1.
        state = level_state()
        state.p = np.array([0.3, 0.0, 0.0])
        cov = dpins.default_initial_covariance()
        h = np.zeros((1, STATE_DIM))
        h[0, IDX_P] = 1.0
        z_meas = 1.7
        residual = np.array([z_meas - state.p[0]])
        new_state, _ = dpins.eskf_update(state, cov, h, residual,
                                         np.array([[1e-15]]))
        assert abs(new_state.p[0] - z_meas) < 1e-9

    def test_repeated_updates_follow_scalar_kalman_recursion(self):
        # Oracle: p' = p v / (p + v) for a scalar direct observation.
        state = level_state()
        cov = dpins.default_initial_covariance()
        h = np.zeros((1, STATE_DIM))
        h[0, IDX_P] = 1.0
        v = 1e-3
        p_oracle = cov[IDX_P, IDX_P]
        for _ in range(20):
            state, cov = dpins.eskf_update(state, cov, h, np.zeros(1),
                                           np.array([[v]]))
            p_expected = p_oracle * v / (p_oracle + v)
            assert cov[IDX_P, IDX_P] < p_oracle
            assert abs(cov[IDX_P, IDX_P] - p_expected) < 1e-12
            p_oracle = p_expected

    def test_singular_innovation_raises(self):
        state = level_state()
        cov = np.zeros((STATE_DIM, STATE_DIM))
        h = np.zeros((1, STATE_DIM))
        h[0, IDX_P] = 1.0
        with pytest.raises(np.linalg.LinAlgError):
            dpins.eskf_update(state, cov, h, np.zeros(1), np.array([[0.0]]))


def rand_calib(rng):
    return geom.CalibrationSet(
        dvl_from_imu=geom.exp_so3(rng.normal(size=3) * 0.3),
        dvl_in_imu=geom.Pose(geom.exp_so3(rng.normal(size=3) * 0.3),
                             rng.normal(size=3) * 0.1),
        world_reference=geom.exp_so3(rng.normal(size=3) * 0.3),
    )


def rand_state(rng):
    return NominalState(
        p=rng.normal(size=3), v=rng.normal(size=3),
        rot=geom.exp_so3(rng.normal(size=3)),
        bg=rng.normal(size=3) * 1e-3, ba=rng.normal(size=3) * 1e-2,
        g=G_DOWN.copy())


class TestDvlObservation:
    def test_consistent_measurement_zero_residual(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            state = rand_state(rng)
            calib = rand_calib(rng)
            sample = DvlSample(0.0, calib.dvl_from_imu.apply(state.v))
            _, r = dpins.dvl_observation(state, sample, calib)
            assert np.allclose(r, 0, atol=1e-12)

    def test_kalman_gain_pulls_velocity(self):
        state = level_state()
        state.v = np.array([1.0, 0.0, 0.0])
        cov = dpins.default_initial_covariance()
        calib = geom.CalibrationSet()
        sample = DvlSample(0.0, np.array([0.9, 0.0, 0.0]))
        h, r = dpins.dvl_observation(state, sample, calib)
        new_state, _ = dpins.eskf_update(state, cov, h, r, np.eye(3) * 1e-10)
        assert abs(new_state.v[0] - 0.9) < 1e-3


class TestPressureObservation:
    def test_consistent_measurement_zero_residual(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            state = rand_state(rng)
            calib = rand_calib(rng)
            depth0 = 5.0
            p_meas = calib.world_reference.apply(state.p) + [0, 0, depth0]
            # consistent only when the rotated position is depth-axis only
            state.p = calib.world_reference.inverse().apply(
                [0.0, 0.0, float(p_meas[2]) - depth0])
            sample = PressureSample(0.0, float(p_meas[2]))
            _, r = dpins.pressure_observation(state, sample, depth0, calib)
            assert abs(r[2]) < 1e-12

    def test_depth_only_information_corrects_z(self):
        # Oracle: per-axis scalar Kalman with a diagonal prior.
        state = level_state()
        state.p = np.array([0.5, 0.5, 0.5])
        cov = dpins.default_initial_covariance()
        calib = geom.CalibrationSet()
        depth0 = 10.0
        sample = PressureSample(0.0, depth0 + 0.4)  # true z = 0.4
        h, r = dpins.pressure_observation(state, sample, depth0, calib)
        v = np.diag([1e9, 1e9, 1e-8])
        new_state, _ = dpins.eskf_update(state, cov, h, r, v)
        p0 = cov[IDX_P, IDX_P]
        kz = p0 / (p0 + 1e-8)
        assert abs(new_state.p[2] - (0.5 + kz * (0.4 - 0.5))) < 1e-9
        assert abs(new_state.p[0] - 0.5) < 1e-6
        assert abs(new_state.p[1] - 0.5) < 1e-6


class TestDrObservation:
    def test_consistent_measurement_zero_residual(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            state = rand_state(rng)
            calib = rand_calib(rng)
            t_id = calib.dvl_in_imu
            dr_pose = t_id.inverse().compose(state.pose())
            _, r = dpins.dr_observation(state, DrPose(0.0, dr_pose), calib)
            assert np.allclose(r, 0, atol=1e-9)

    def test_tight_update_corrects_yaw(self):
        state = level_state()
        state.rot = geom.exp_so3([0, 0, math.radians(5.0)])
        cov = dpins.default_initial_covariance()
        calib = geom.CalibrationSet()
        dr_pose = geom.Pose(geom.Rotation.identity(), np.zeros(3))
        h, r = dpins.dr_observation(state, DrPose(0.0, dr_pose), calib)
        v = np.eye(6) * 1e-10
        new_state, _ = dpins.eskf_update(state, cov, h, r, v)
        yaw = geom.log_so3(new_state.rot)[2]
        assert abs(math.degrees(yaw)) < 0.1


class TestObservationJacobians:
    """Central finite differences of each residual at measurement-consistent
    states; the selector-block Jacobians are exact there."""

    @staticmethod
    def fd_jacobian(residual_fn, state, dim):
        eps = 1e-7
        out = np.zeros((dim, STATE_DIM))
        for k in range(STATE_DIM):
            dx = np.zeros(STATE_DIM)
            dx[k] = eps
            rp = residual_fn(dpins.inject(state, dx))
            rm = residual_fn(dpins.inject(state, -dx))
            out[:, k] = (rp - rm) / (2 * eps)
        return out

    def test_dvl_jacobian(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            state = rand_state(rng)
            calib = rand_calib(rng)
            sample = DvlSample(0.0, calib.dvl_from_imu.apply(state.v))
            h, _ = dpins.dvl_observation(state, sample, calib)
            fd = self.fd_jacobian(
                lambda s: dpins.dvl_observation(s, sample, calib)[1], state, 3)
            assert np.abs(-fd - h).max() < 1e-6

    def test_pressure_jacobian(self):
        rng = np.random.default_rng(4)
        for _ in range(10):
            state = rand_state(rng)
            calib = rand_calib(rng)
            depth0 = 2.0
            state.p = calib.world_reference.inverse().apply([0.0, 0.0, 1.0])
            sample = PressureSample(0.0, depth0 + 1.0)
            h, r = dpins.pressure_observation(state, sample, depth0, calib)
            assert np.allclose(r, 0, atol=1e-12)
            fd = self.fd_jacobian(
                lambda s: dpins.pressure_observation(s, sample, depth0, calib)[1],
                state, 3)
            assert np.abs(-fd - h).max() < 1e-6

    def test_dr_jacobian_identity_blocks(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            state = rand_state(rng)
            calib = rand_calib(rng)
            dr_pose = calib.dvl_in_imu.inverse().compose(state.pose())
            dr = DrPose(0.0, dr_pose)
            h, r = dpins.dr_observation(state, dr, calib)
            assert np.allclose(r, 0, atol=1e-9)
            fd = self.fd_jacobian(
                lambda s: dpins.dr_observation(s, dr, calib)[1], state, 6)
            assert np.abs(-fd - h).max() < 1e-6
            assert np.allclose(h[0:3, IDX_P:IDX_P + 3], np.eye(3))
            assert np.allclose(h[3:6, IDX_TH:IDX_TH + 3], np.eye(3))


class TestDetectOutlier:
    def test_zero_deviation_accepts(self):
        window = np.ones((10, 1))
        assert not dpins.detect_outlier(window, np.array([1.0]), 3.0)

    def test_formula_case_rejects(self):
        # window mean 0, per-axis std norm 0.1, deviation 0.5, xi = 3
        window = np.array([[0.1], [-0.1]] * 5)
        assert abs(np.linalg.norm(window.std(axis=0)) - 0.1) < 1e-12
        assert dpins.detect_outlier(window, np.array([0.5]), 3.0)
        assert not dpins.detect_outlier(window, np.array([0.2]), 3.0)

    def test_degenerate_zero_spread_rejects_any_deviation(self):
        window = np.full((10, 1), 2.0)
        assert dpins.detect_outlier(window, np.array([2.0001]), 3.0)
        assert not dpins.detect_outlier(window, np.array([2.0]), 3.0)

    def test_small_window_accepts(self):
        assert not dpins.detect_outlier(np.array([[1.0]]), np.array([99.0]), 3.0)

    def test_rejected_measurement_never_changes_state(self):
        filt = dpins.DpinsFilter(NoiseConfig(), geom.CalibrationSet())
        filt.initialize_exact(0.0, level_state())
        for i in range(10):
            filt.handle_dvl(DvlSample(0.1 * i, np.array([0.0, 0.0, 0.0])))
        before_p = filt.state.p.copy()
        before_v = filt.state.v.copy()
        filt.handle_dvl(DvlSample(2.0, np.array([50.0, 0.0, 0.0])))
        assert any(f["reason"] == "outlier" for f in filt.faults)
        assert np.array_equal(filt.state.p, before_p)
        assert np.array_equal(filt.state.v, before_v)


class TestOdometryBuffer:
    def test_query_exact_and_interpolated(self):
        buf = dpins.OdometryBuffer(max_gap=2.0)
        a = geom.Pose.identity()
        b = geom.Pose(geom.exp_so3([0, 0, math.pi / 2]), [2.0, 0, 0])
        buf.append(0.0, a)
        buf.append(1.0, b)
        assert np.allclose(buf.query(0.0).matrix(), a.matrix())
        mid = buf.query(0.5)
        oracle = geom.interpolate_pose(a, 0.0, b, 1.0, 0.5)
        assert np.allclose(mid.matrix(), oracle.matrix(), atol=1e-12)

    def test_query_before_first_sample_errors(self):
        buf = dpins.OdometryBuffer()
        with pytest.raises(LookupError):
            buf.query(0.0)
        buf.append(1.0, geom.Pose.identity())
        with pytest.raises(LookupError):
            buf.query(0.5)

    def test_gap_detection(self):
        buf = dpins.OdometryBuffer(max_gap=0.05)
        buf.append(0.0, geom.Pose.identity())
        buf.append(1.0, geom.Pose.identity())
        with pytest.raises(LookupError):
            buf.query(0.5)

    def test_output_rate_after_decimation(self):
        filt = dpins.DpinsFilter(NoiseConfig(), geom.CalibrationSet(),
                                 dpins.DpinsParams(output_decimation=2))
        filt.initialize_exact(0.0, level_state())
        dt = 1.0 / 200.0
        a_body = body_specific_force(geom.Rotation.identity(), np.zeros(3))
        for i in range(400):
            filt.handle_imu(ImuSample((i + 1) * dt, np.zeros(3), a_body))
        # 2 s of 200 Hz IMU decimated by 2 -> at least 100 Hz output
        assert len(filt.odometry) >= 100 * 2 - 5


class TestFilterProperties:
    def test_covariance_stays_spd_through_many_cycles(self):
        rng = np.random.default_rng(6)
        filt = dpins.DpinsFilter(NoiseConfig(), geom.CalibrationSet())
        filt.initialize_exact(0.0, level_state())
        dt = 1.0 / 200.0
        t = 0.0
        a_body = body_specific_force(geom.Rotation.identity(), np.zeros(3))
        for i in range(20000):
            t += dt
            filt.handle_imu(ImuSample(t, rng.normal(size=3) * 1e-3,
                                      a_body + rng.normal(size=3) * 1e-3))
            if i % 16 == 0:
                filt.handle_dvl(DvlSample(t, rng.normal(size=3) * 1e-3))
            if i % 3 == 0:
                filt.handle_ps(PressureSample(t, rng.normal() * 1e-3))
        cov = filt.cov
        assert np.abs(cov - cov.T).max() < 1e-9
        assert np.linalg.eigvalsh(cov).min() > 0

    def test_deterministic_replay(self):
        def run():
            filt = dpins.DpinsFilter(NoiseConfig(), geom.CalibrationSet())
            filt.initialize_exact(0.0, level_state())
            rng = np.random.default_rng(7)
            t = 0.0
            out = []
            for i in range(2000):
                t += 1.0 / 200.0
                filt.handle_imu(ImuSample(
                    t, rng.normal(size=3) * 1e-2,
                    body_specific_force(geom.Rotation.identity(), np.zeros(3))
                    + rng.normal(size=3) * 1e-2))
                if i % 20 == 0:
                    filt.handle_dvl(DvlSample(t, rng.normal(size=3) * 0.01))
                out.append((t, filt.state.p.copy(), filt.state.rot.q.copy()))
            return out

        a, b = run(), run()
        for (ta, pa, qa), (tb, pb, qb) in zip(a, b):
            assert ta == tb
            assert np.array_equal(pa, pb)
            assert np.array_equal(qa, qb)

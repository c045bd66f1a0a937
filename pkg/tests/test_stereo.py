import math

import numpy as np
import pytest

from aquaslam import geom, sim, stereo
from aquaslam.dpins import OdometryBuffer, RelativeCovModel
from aquaslam.geom import Pose
from aquaslam.logio import CameraParams, TrackFrame, TrackObs
from aquaslam.stereo import (CameraModel, SlidingWindow, StereoOdometry,
                             StereoParams, depth_residual,
                             ins_relative_residual, reprojection_residual)

CAM = CameraParams(fx=380.0, fy=380.0, cx=320.0, cy=240.0, baseline=0.06)


def make_cam():
    return CameraModel(CAM, sim.default_rig().cam_in_body)


def wall_landmarks(n=48, wall_x=4.0, rng=None):
    rng = rng or np.random.default_rng(0)
    pts = np.column_stack([
        np.full(n, wall_x),
        rng.uniform(-1.6, 1.6, n),
        rng.uniform(-1.0, 1.0, n)])
    return pts


def project_exact(pose_body: Pose, landmarks, cam: CameraModel,
                  depth_for=lambda i: True):
    """Exact stereo observations of landmarks from a body pose (the oracle)."""
    t_wc = pose_body.compose(cam.body_from_cam)
    t_cw = t_wc.inverse()
    obs = []
    for i, lm in enumerate(landmarks):
        p_c = t_cw.apply(lm)
        if p_c[2] <= 0.2:
            continue
        u = CAM.fx * p_c[0] / p_c[2] + CAM.cx
        v = CAM.fy * p_c[1] / p_c[2] + CAM.cy
        u_r = CAM.fx * (p_c[0] - CAM.baseline) / p_c[2] + CAM.cx
        if not (0 <= u < CAM.width and 0 <= v < CAM.height):
            continue
        depth = float(p_c[2]) if depth_for(i) else None
        obs.append(TrackObs(i, float(u), float(v), float(u_r), float(v), depth))
    return obs


def line_poses(n, spacing=0.4, speed=0.08):
    """Slow lateral drift in front of the wall, heading +x."""
    out = []
    for k in range(n):
        t = k * spacing
        out.append((t, Pose(geom.Rotation.identity(),
                            [0.02 * k, speed * t, 0.01 * k])))
    return out


def odom_from_poses(poses, rate=100.0):
    buf = OdometryBuffer(max_gap=0.5)
    t0, t1 = poses[0][0], poses[-1][0]
    ts = np.array([p[0] for p in poses])
    n = int((t1 - t0) * rate) + 2   # pad past t1 against float-grid mismatch
    for i in range(n + 1):
        t = t0 + i / rate
        j = int(np.searchsorted(ts, t, side="right"))
        if j == 0:
            buf.append(t, poses[0][1])
        elif j >= len(poses):
            buf.append(t, poses[-1][1])
        else:
            buf.append(t, geom.interpolate_pose(
                poses[j - 1][1], ts[j - 1], poses[j][1], ts[j], t))
    return buf


class TestReprojectionResidual:
    def test_exact_geometry_zero_residual(self):
        cam = make_cam()
        rng = np.random.default_rng(1)
        lms = wall_landmarks(rng=rng)
        pose_i = Pose(geom.Rotation.identity(), np.zeros(3))
        pose_j = Pose(geom.exp_so3([0.0, 0.0, 0.05]), [0.1, 0.2, -0.05])
        obs_i = {o.feature_id: o for o in project_exact(pose_i, lms, cam)}
        obs_j = {o.feature_id: o for o in project_exact(pose_j, lms, cam)}
        checked = 0
        for fid, oi in obs_i.items():
            if fid not in obs_j:
                continue
            lam = 1.0 / oi.depth
            for right in (False, True):
                oj = obs_j[fid]
                uv = (oj.u_r, oj.v_r) if right else (oj.u_l, oj.v_l)
                out = reprojection_residual(pose_i, pose_j, lam,
                                            (oi.u_l, oi.v_l), uv, cam,
                                            right=right)
                assert out is not None
                assert np.abs(out[0]).max() < 1e-12
                checked += 1
        assert checked > 40

    def test_jacobians_match_finite_differences(self):
        cam = make_cam()
        rng = np.random.default_rng(2)
        eps = 1e-6
        for _ in range(30):
            pose_i = Pose(geom.exp_so3(rng.normal(size=3) * 0.2),
                          rng.normal(size=3) * 0.3)
            pose_j = Pose(geom.exp_so3(rng.normal(size=3) * 0.2),
                          rng.normal(size=3) * 0.3 + [0.0, 0.1, 0.0])
            lam = rng.uniform(0.2, 0.8)
            anchor_uv = (rng.uniform(200, 440), rng.uniform(140, 340))
            obs_uv = (rng.uniform(200, 440), rng.uniform(140, 340))
            right = bool(rng.integers(2))
            out = reprojection_residual(pose_i, pose_j, lam, anchor_uv, obs_uv,
                                        cam, right=right)
            if out is None:
                continue
            r0, j_i, j_j, j_l = out

            def res(pi, pj, lm):
                o = reprojection_residual(pi, pj, lm, anchor_uv, obs_uv, cam,
                                          right=right)
                return o[0]

            for k in range(6):
                d = np.zeros(6)
                d[k] = eps
                pp = Pose(pose_i.rotation * geom.exp_so3(d[3:]),
                          pose_i.translation + d[:3])
                pm = Pose(pose_i.rotation * geom.exp_so3(-d[3:]),
                          pose_i.translation - d[:3])
                fd = (res(pp, pose_j, lam) - res(pm, pose_j, lam)) / (2 * eps)
                assert np.abs(fd - j_i[:, k]).max() < 1e-5
                pp = Pose(pose_j.rotation * geom.exp_so3(d[3:]),
                          pose_j.translation + d[:3])
                pm = Pose(pose_j.rotation * geom.exp_so3(-d[3:]),
                          pose_j.translation - d[:3])
                fd = (res(pose_i, pp, lam) - res(pose_i, pm, lam)) / (2 * eps)
                assert np.abs(fd - j_j[:, k]).max() < 1e-5
            fd = (res(pose_i, pose_j, lam + eps)
                  - res(pose_i, pose_j, lam - eps)) / (2 * eps)
            assert np.abs(fd - j_l).max() < 1e-5

    def test_inverse_depth_direction_consistency(self):
        cam = make_cam()
        pose_i = Pose(geom.Rotation.identity(), np.zeros(3))
        pose_j = Pose(geom.Rotation.identity(), [0.0, 0.3, 0.0])
        lam = 0.5  # 2 m landmark
        anchor_uv = (330.0, 250.0)
        obs_uv = (300.0, 250.0)
        out = reprojection_residual(pose_i, pose_j, lam, anchor_uv, obs_uv, cam)
        r0, _, _, j_l = out
        d_lam = 0.05  # +10%
        r1 = reprojection_residual(pose_i, pose_j, lam + d_lam, anchor_uv,
                                   obs_uv, cam)[0]
        predicted = r0 + j_l * d_lam
        assert np.linalg.norm(r1 - predicted) < 0.1 * np.linalg.norm(r1 - r0)

    def test_behind_camera_excluded(self):
        cam = make_cam()
        pose_i = Pose(geom.Rotation.identity(), np.zeros(3))
        # observer far ahead of the landmark, looking away
        pose_j = Pose(geom.Rotation.identity(), [10.0, 0.0, 0.0])
        out = reprojection_residual(pose_i, pose_j, 0.5, (320.0, 240.0),
                                    (320.0, 240.0), cam)
        assert out is None


class TestDepthResidual:
    def test_consistent_zero(self):
        r, _ = depth_residual(2.0, 0.5)
        assert abs(r) < 1e-15

    def test_direct_formula(self):
        r, j = depth_residual(2.0, 0.55)
        assert abs(r - (-0.05)) < 1e-12
        assert j == -1.0

    def test_rejects_nonpositive(self):
        with pytest.raises(ValueError):
            depth_residual(0.0, 0.5)


class TestInsRelativeResidual:
    def test_consistent_zero(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            d_prev = Pose(geom.exp_so3(rng.normal(size=3)), rng.normal(size=3))
            d_cur = Pose(geom.exp_so3(rng.normal(size=3)), rng.normal(size=3))
            r, _, _ = ins_relative_residual(d_prev, d_cur, d_prev, d_cur)
            assert np.abs(r).max() < 1e-9

    def test_jacobians_match_finite_differences(self):
        rng = np.random.default_rng(4)
        eps = 1e-6
        for _ in range(20):
            k_prev = Pose(geom.exp_so3(rng.normal(size=3)), rng.normal(size=3))
            k_cur = Pose(geom.exp_so3(rng.normal(size=3)), rng.normal(size=3))
            d_prev = Pose(geom.exp_so3(rng.normal(size=3)), rng.normal(size=3))
            d_cur = Pose(geom.exp_so3(rng.normal(size=3)), rng.normal(size=3))
            _, j_a, j_b = ins_relative_residual(k_prev, k_cur, d_prev, d_cur)
            for k in range(6):
                d = np.zeros(6)
                d[k] = eps
                pp = Pose(k_prev.rotation * geom.exp_so3(d[3:]),
                          k_prev.translation + d[:3])
                pm = Pose(k_prev.rotation * geom.exp_so3(-d[3:]),
                          k_prev.translation - d[:3])
                fd = (ins_relative_residual(pp, k_cur, d_prev, d_cur)[0]
                      - ins_relative_residual(pm, k_cur, d_prev, d_cur)[0]) / (2 * eps)
                assert np.abs(fd - j_a[:, k]).max() < 1e-5
                pp = Pose(k_cur.rotation * geom.exp_so3(d[3:]),
                          k_cur.translation + d[:3])
                pm = Pose(k_cur.rotation * geom.exp_so3(-d[3:]),
                          k_cur.translation - d[:3])
                fd = (ins_relative_residual(k_prev, pp, d_prev, d_cur)[0]
                      - ins_relative_residual(k_prev, pm, d_prev, d_cur)[0]) / (2 * eps)
                assert np.abs(fd - j_b[:, k]).max() < 1e-5

    def test_gauge_invariance(self):
        rng = np.random.default_rng(5)
        k_prev = Pose(geom.exp_so3(rng.normal(size=3)), rng.normal(size=3))
        k_cur = Pose(geom.exp_so3(rng.normal(size=3)), rng.normal(size=3))
        d_prev = Pose(geom.exp_so3(rng.normal(size=3)), rng.normal(size=3))
        d_cur = Pose(geom.exp_so3(rng.normal(size=3)), rng.normal(size=3))
        r0, _, _ = ins_relative_residual(k_prev, k_cur, d_prev, d_cur)
        g = Pose(geom.exp_so3(rng.normal(size=3)), rng.normal(size=3))
        r1, _, _ = ins_relative_residual(g.compose(k_prev), g.compose(k_cur),
                                         g.compose(d_prev), g.compose(d_cur))
        assert np.allclose(r0, r1, atol=1e-9)


def build_odometry_and_frames(n_frames=8, n_landmarks=48, seed=0,
                              depth_fraction=1.0):
    rng = np.random.default_rng(seed)
    cam = make_cam()
    lms = wall_landmarks(n_landmarks, rng=rng)
    poses = line_poses(n_frames)
    frames = [TrackFrame(t, project_exact(
        pose, lms, cam, depth_for=lambda i: (i / n_landmarks) < depth_fraction))
        for t, pose in poses]
    odom = odom_from_poses(poses)
    return cam, lms, poses, frames, odom


class TestSlidingWindow:
    def test_noise_free_exact_init_is_global_optimum(self):
        cam, lms, poses, frames, odom = build_odometry_and_frames()
        odo = StereoOdometry(CAM, sim.default_rig())
        for frame in frames:
            odo.process_frame(frame, odom)
        win = odo.window
        assert not win.failed
        info = win.optimize()
        assert info["cost"] < 1e-10
        for kf, (t, true_pose) in zip(win.frames, poses[-len(win.frames):]):
            assert np.linalg.norm(kf.pose.translation - true_pose.translation) < 1e-6
            assert kf.pose.rotation.angle_to(true_pose.rotation) < 1e-6

    def test_perturbed_init_recovers_truth(self):
        cam, lms, poses, frames, odom = build_odometry_and_frames(n_frames=6)
        # weak odometry so the visual factors do the work
        odo = StereoOdometry(CAM, sim.default_rig(),
                             rel_cov=RelativeCovModel(pos_rate=1.0, rot_rate=1.0))
        for frame in frames:
            odo.process_frame(frame, odom)
        win = odo.window
        rng = np.random.default_rng(6)
        for kf in win.frames[1:]:
            kf.pose = Pose(kf.pose.rotation * geom.exp_so3(
                rng.normal(size=3) / np.linalg.norm(rng.normal(size=3))
                * math.radians(2.0)),
                kf.pose.translation + rng.uniform(-0.05, 0.05, size=3))
        win.params.max_iterations = 30
        info = win.optimize()
        assert not win.failed
        for kf, (t, true_pose) in zip(win.frames, poses[-len(win.frames):]):
            assert np.linalg.norm(kf.pose.translation - true_pose.translation) < 1e-3

    def test_marginalization_keeps_remaining_poses(self):
        cam, lms, poses, frames, odom = build_odometry_and_frames(n_frames=6)
        odo = StereoOdometry(CAM, sim.default_rig())
        for frame in frames:
            odo.process_frame(frame, odom)
        win = odo.window
        win.optimize()
        before = [Pose(geom.Rotation(f.pose.rotation.q),
                       f.pose.translation.copy()) for f in win.frames[1:]]
        n_frames_before = len(win.frames)
        win.marginalize_oldest()
        assert len(win.frames) == n_frames_before - 1
        win.optimize()
        for kf, ref in zip(win.frames, before):
            assert np.linalg.norm(kf.pose.translation - ref.translation) < 1e-6
            assert kf.pose.rotation.angle_to(ref.rotation) < 1e-6

    def test_landmarks_reanchor_after_marginalization(self):
        cam, lms, poses, frames, odom = build_odometry_and_frames(n_frames=6)
        odo = StereoOdometry(CAM, sim.default_rig())
        for frame in frames:
            odo.process_frame(frame, odom)
        win = odo.window
        old_kid = win.frames[0].kid
        anchored = [lm.fid for lm in win.landmarks.values()
                    if lm.anchor == old_kid]
        assert anchored
        win.marginalize_oldest()
        survivors = [fid for fid in anchored if fid in win.landmarks]
        assert survivors
        for fid in survivors:
            assert win.landmarks[fid].anchor != old_kid


class TestStereoOdometry:
    def test_emits_relative_constraints(self):
        cam, lms, poses, frames, odom = build_odometry_and_frames()
        odo = StereoOdometry(CAM, sim.default_rig())
        constraints = []
        for frame in frames:
            c = odo.process_frame(frame, odom)
            if c is not None:
                constraints.append(c)
        assert len(constraints) >= len(frames) - 2
        pose_by_t = dict(poses)
        for c in constraints:
            true_rel = pose_by_t[c.t1].inverse().compose(pose_by_t[c.t2])
            assert np.linalg.norm(c.pose.translation - true_rel.translation) < 1e-3
            assert c.pose.rotation.angle_to(true_rel.rotation) < 1e-3

    def test_constraints_telescope_across_window(self):
        cam, lms, poses, frames, odom = build_odometry_and_frames()
        odo = StereoOdometry(CAM, sim.default_rig())
        constraints = [c for c in (odo.process_frame(f, odom) for f in frames)
                       if c is not None]
        composed = Pose.identity()
        for c in constraints:
            composed = composed.compose(c.pose)
        first = odo.window.frames[0]
        # composition of consecutive constraints equals end-to-end motion
        t_first = constraints[0].t1
        pose_first = dict(poses)[t_first]
        pose_last = dict(poses)[constraints[-1].t2]
        true_comp = pose_first.inverse().compose(pose_last)
        assert np.linalg.norm(composed.translation - true_comp.translation) < 1e-3

    def test_covariance_grows_when_tracks_drop(self):
        _, _, _, frames_full, odom = build_odometry_and_frames(n_landmarks=60)
        _, _, _, frames_thin, _ = build_odometry_and_frames(n_landmarks=6)
        weak = RelativeCovModel(pos_rate=1.0, rot_rate=1.0)
        params = StereoParams(min_tracked=3, min_obs=2)
        odo_a = StereoOdometry(CAM, sim.default_rig(), params=params, rel_cov=weak)
        odo_b = StereoOdometry(CAM, sim.default_rig(), params=params, rel_cov=weak)
        last_a = last_b = None
        for fa, fb in zip(frames_full, frames_thin):
            ca = odo_a.process_frame(fa, odom)
            cb = odo_b.process_frame(fb, odom)
            last_a, last_b = ca or last_a, cb or last_b
        assert last_a is not None and last_b is not None
        assert np.trace(last_b.cov) > np.trace(last_a.cov)

    def test_reinitialize_assigns_filter_pose_and_triangulates(self):
        cam, lms, poses, frames, odom = build_odometry_and_frames()
        odo = StereoOdometry(CAM, sim.default_rig())
        for frame in frames[:4]:
            odo.process_frame(frame, odom)
        frame = frames[4]
        assert odo.reinitialize(frame, odom)
        t, true_pose = poses[4]
        kf = odo.window.frames[0]
        odo_pose = odom.query(frame.t)
        assert np.allclose(kf.pose.translation, odo_pose.translation)
        assert kf.pose.rotation.angle_to(odo_pose.rotation) < 1e-12
        # stereo triangulation recovers exact depths on noise-free pairs
        t_wc = true_pose.compose(cam.body_from_cam)
        for lm in odo.window.landmarks.values():
            p_c = t_wc.inverse().apply(lms[lm.fid])
            assert abs(1.0 / lm.inv_depth - p_c[2]) < 0.01 * p_c[2]

    def test_blackout_triggers_reinit_and_recovers(self):
        cam, lms, poses, frames, odom = build_odometry_and_frames(n_frames=8)
        odo = StereoOdometry(CAM, sim.default_rig())
        for frame in frames[:3]:
            odo.process_frame(frame, odom)
        # blackout: two keyframes with no features at all
        for k in (3, 4):
            odo.process_frame(TrackFrame(frames[k].t, []), odom)
        assert odo.reinit_count >= 1
        for frame in frames[5:]:
            odo.process_frame(frame, odom)
        assert odo.window.frames
        assert not odo.window.failed

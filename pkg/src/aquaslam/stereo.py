"""Sliding-window MAP estimation over keyframe poses and inverse-depth
landmarks, constrained by unit-sphere stereo reprojection, measured depths,
and relative motion from the high-rate filter odometry. Includes the
failure-triggered reinitialization protocol.

Pose variables use the split perturbation (dp world-additive, dtheta
body-right). Landmarks are parameterized by inverse depth along the measured
bearing in their anchor keyframe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .dpins import OdometryBuffer, RelativeCovModel
from .geom import CalibrationSet, Pose
from .logio import CameraParams, TrackFrame


@dataclass
class CameraModel:
    """Rectified pinhole stereo pair; the right camera sits at +baseline along
    the left camera's x axis."""
    params: CameraParams
    body_from_cam: Pose

    @property
    def fx(self):
        return self.params.fx

    @property
    def baseline(self):
        return self.params.baseline

    def back_project(self, u, v):
        """Normalized image-plane ray [(u-cx)/fx, (v-cy)/fy, 1]."""
        p = self.params
        return np.array([(u - p.cx) / p.fx, (v - p.cy) / p.fy, 1.0])

    def bearing(self, u, v):
        m = self.back_project(u, v)
        return m / np.linalg.norm(m)

    def project(self, p_cam):
        p = self.params
        return np.array([p.fx * p_cam[0] / p_cam[2] + p.cx,
                         p.fy * p_cam[1] / p_cam[2] + p.cy])


def _unit_jacobian(p):
    n = np.linalg.norm(p)
    u = p / n
    return (np.eye(3) - np.outer(u, u)) / n


def reprojection_residual(pose_i: Pose, pose_j: Pose, inv_depth: float,
                          anchor_uv, obs_uv, cam: CameraModel,
                          right: bool = False):
    """Unit-sphere reprojection error of a landmark anchored in keyframe i
    and observed in keyframe j (left or right camera).

    Returns (r, J_pose_i 3x6, J_pose_j 3x6, J_lambda 3) or None when the
    predicted point falls behind the observing camera.
    """
    t_bc = cam.body_from_cam
    r_bc = t_bc.rotation.matrix()
    m_i = cam.back_project(*anchor_uv)
    p_ci = m_i / inv_depth
    p_bi = t_bc.apply(p_ci)
    r_i = pose_i.rotation.matrix()
    p_w = pose_i.apply(p_bi)
    r_j = pose_j.rotation.matrix()
    p_bj = r_j.T @ (p_w - pose_j.translation)
    p_cj = r_bc.T @ (p_bj - t_bc.translation)
    if right:
        p_cj = p_cj - np.array([cam.baseline, 0.0, 0.0])
    if p_cj[2] <= 1e-3:
        return None
    b_meas = cam.bearing(*obs_uv)
    b_pred = p_cj / np.linalg.norm(p_cj)
    r = b_meas - b_pred

    n_jac = _unit_jacobian(p_cj)          # d(unit)/d p_cj
    m_chain = r_bc.T @ r_j.T              # d p_cj / d p_w
    d_pcj_pw = -n_jac @ m_chain           # d r / d p_w (sign from r = meas - pred)
    j_pose_i = np.zeros((3, 6))
    j_pose_i[:, :3] = d_pcj_pw
    j_pose_i[:, 3:] = d_pcj_pw @ (-r_i @ geom.hat(p_bi))
    j_pose_j = np.zeros((3, 6))
    j_pose_j[:, :3] = n_jac @ m_chain
    j_pose_j[:, 3:] = -n_jac @ (r_bc.T @ geom.hat(p_bj))
    j_lambda = d_pcj_pw @ (r_i @ r_bc @ (-m_i / inv_depth ** 2))
    return r, j_pose_i, j_pose_j, j_lambda


def depth_residual(depth_meas: float, inv_depth: float):
    """Measured-depth factor: r = 1/depth - lambda, dr/dlambda = -1."""
    if depth_meas <= 0.0:
        raise ValueError("measured depth must be positive")
    return 1.0 / depth_meas - inv_depth, -1.0


def ins_relative_residual(pose_prev: Pose, pose_cur: Pose,
                          odo_prev: Pose, odo_cur: Pose):
    """Relative-motion factor tying consecutive keyframes to the filter
    odometry; zero when the window's relative motion matches the odometry."""
    meas = odo_prev.inverse().compose(odo_cur)
    return geom.relative_pose_residual(meas, pose_prev, pose_cur)


@dataclass
class WindowLandmark:
    fid: int
    anchor: int                 # keyframe id of the anchor frame
    inv_depth: float
    anchor_uv: tuple
    obs: dict = field(default_factory=dict)   # keyframe id -> TrackObs
    depth_meas: float | None = None           # measured depth in the anchor


@dataclass
class Keyframe:
    kid: int
    t: float
    pose: Pose
    odo_pose: Pose              # filter pose at this time (for INS factors)


@dataclass
class StereoParams:
    window_size: int = 10
    keyframe_dt: float = 0.33
    keyframe_dist: float = 0.1
    min_obs: int = 3
    default_inv_depth: float = 0.2
    huber_px: float = 1.5
    pixel_sigma: float = 1.0
    depth_sigma_inv: float = 0.05      # sigma on inverse-depth residuals
    max_iterations: int = 10
    cost_tol: float = 1e-10
    min_tracked: int = 8
    max_damping_steps: int = 6


class SlidingWindow:
    """Keyframe poses + inverse depths with a marginalization prior."""

    def __init__(self, cam: CameraModel, params: StereoParams,
                 rel_cov: RelativeCovModel):
        self.cam = cam
        self.params = params
        self.rel_cov = rel_cov
        self.frames: list[Keyframe] = []
        self.landmarks: dict[int, WindowLandmark] = {}
        # prior: 0.5 * || H^(1/2) (X (-) lin) + ... ||^2 stored as (H, b, lin)
        self.prior_h: np.ndarray | None = None
        self.prior_b: np.ndarray | None = None
        self.prior_lin: list[Pose] = []
        self.failed = False

    # ---- variable indexing ------------------------------------------------

    def _active_landmarks(self):
        kids = {f.kid for f in self.frames}
        out = []
        for lm in self.landmarks.values():
            n_obs = sum(1 for k in lm.obs if k in kids)
            if lm.anchor in kids and n_obs >= self.params.min_obs:
                out.append(lm)
        return out

    def _dims(self, lms):
        return 6 * len(self.frames) + len(lms)

    # ---- residual assembly --------------------------------------------

    def _assemble(self, lms, poses, inv_depths):
        """Normal equations (H, b) and robust cost at the given variables."""
        n = self._dims(lms)
        h = np.zeros((n, n))
        b = np.zeros(n)
        cost = 0.0
        kid_to_idx = {f.kid: i for i, f in enumerate(self.frames)}
        huber = self.params.huber_px / self.cam.fx * self.params.pixel_sigma
        sigma_r = self.params.pixel_sigma / self.cam.fx
        for li, lm in enumerate(lms):
            ai = kid_to_idx[lm.anchor]
            lam = inv_depths[li]
            lcol = 6 * len(self.frames) + li
            for kid, obs in lm.obs.items():
                if kid not in kid_to_idx:
                    continue
                ji = kid_to_idx[kid]
                for right in (False, True):
                    if right and (obs.u_r is None or obs.v_r is None):
                        continue
                    uv = (obs.u_r, obs.v_r) if right else (obs.u_l, obs.v_l)
                    if ji == ai and not right:
                        continue    # anchor's left view defines the bearing
                    out = reprojection_residual(
                        poses[ai], poses[ji], lam, lm.anchor_uv, uv, self.cam,
                        right=right)
                    if out is None:
                        continue
                    r, j_i, j_j, j_l = out
                    r_w = r / sigma_r
                    w = 1.0
                    nrm = np.linalg.norm(r_w)
                    if nrm > huber / sigma_r:
                        w = (huber / sigma_r) / nrm
                    cost += w * float(r_w @ r_w)
                    jw = 1.0 / sigma_r
                    rows = [(6 * ai, j_i * jw), (6 * ji, j_j * jw)]
                    _accumulate_blocks(h, b, rows, lcol, j_l * jw, r_w, w)
            if lm.depth_meas is not None and lm.depth_meas > 0:
                r, j_l = depth_residual(lm.depth_meas, lam)
                s = self.params.depth_sigma_inv
                cost += (r / s) ** 2
                h[lcol, lcol] += (j_l / s) ** 2
                b[lcol] += (j_l / s) * (r / s)
        # odometry relative factors between consecutive keyframes
        for i in range(1, len(self.frames)):
            fa, fb = self.frames[i - 1], self.frames[i]
            r, j_a, j_b = ins_relative_residual(poses[i - 1], poses[i],
                                                fa.odo_pose, fb.odo_pose)
            cov = self.rel_cov.cov6(fb.t - fa.t)
            w_inv = np.linalg.inv(cov)
            cost += float(r @ w_inv @ r)
            ia, ib = 6 * (i - 1), 6 * i
            h[ia:ia + 6, ia:ia + 6] += j_a.T @ w_inv @ j_a
            h[ia:ia + 6, ib:ib + 6] += j_a.T @ w_inv @ j_b
            h[ib:ib + 6, ia:ia + 6] += j_b.T @ w_inv @ j_a
            h[ib:ib + 6, ib:ib + 6] += j_b.T @ w_inv @ j_b
            b[ia:ia + 6] += j_a.T @ w_inv @ r
            b[ib:ib + 6] += j_b.T @ w_inv @ r
        # marginalization prior over the pose variables
        if self.prior_h is not None:
            np_ = 6 * len(self.prior_lin)
            delta = np.zeros(np_)
            for i, lin in enumerate(self.prior_lin):
                delta[6 * i:6 * i + 3] = poses[i].translation - lin.translation
                delta[6 * i + 3:6 * i + 6] = geom.log_so3(
                    lin.rotation.inverse() * poses[i].rotation)
            g = self.prior_h @ delta + self.prior_b
            cost += float(delta @ self.prior_h @ delta
                          + 2.0 * self.prior_b @ delta)
            h[:np_, :np_] += self.prior_h
            b[:np_] += g
        return h, b, cost

    def _cost_only(self, lms, poses, inv_depths):
        return self._assemble(lms, poses, inv_depths)[2]

    # ---- optimization ------------------------------------------------------

    def optimize(self):
        """Damped Gauss-Newton over poses and inverse depths.

        Returns an info dict; divergence (no damping step decreases the cost)
        flags the window failed, which triggers reinitialization upstream.
        """
        if len(self.frames) < 2:
            return {"converged": True, "cost": 0.0, "iterations": 0}
        lms = self._active_landmarks()
        poses = [f.pose for f in self.frames]
        inv_depths = np.array([lm.inv_depth for lm in lms])
        lam_damp = 1e-6
        info = {"converged": False, "cost": 0.0, "iterations": 0}
        h, b, cost = self._assemble(lms, poses, inv_depths)
        for it in range(self.params.max_iterations):
            info["iterations"] = it + 1
            try:
                dx = np.linalg.solve(h + lam_damp * np.diag(np.diag(h) + 1e-12),
                                     -b)
            except np.linalg.LinAlgError:
                self.failed = True
                info["failed"] = True
                return info
            improved = False
            for _ in range(self.params.max_damping_steps):
                cand_poses = _apply_pose_steps(poses, dx)
                cand_depths = inv_depths + dx[6 * len(self.frames):]
                cand_cost = self._cost_only(lms, cand_poses, cand_depths)
                if cand_cost <= cost + 1e-15:
                    poses, inv_depths, improved = cand_poses, cand_depths, True
                    lam_damp = max(lam_damp / 4.0, 1e-9)
                    break
                lam_damp *= 10.0
                dx = np.linalg.solve(
                    h + lam_damp * np.diag(np.diag(h) + 1e-12), -b)
            if not improved:
                self.failed = True
                info["failed"] = True
                break
            h, b, new_cost = self._assemble(lms, poses, inv_depths)
            if abs(cost - new_cost) < self.params.cost_tol * max(cost, 1.0):
                cost = new_cost
                info["converged"] = True
                break
            cost = new_cost
        info["cost"] = cost
        for f, pose in zip(self.frames, poses):
            f.pose = pose
        for lm, lam in zip(lms, inv_depths):
            lm.inv_depth = float(lam)
        self._last_h = self._assemble(lms, [f.pose for f in self.frames],
                                      np.array([lm.inv_depth for lm in lms]))[0]
        return info

    # ---- marginalization ----------------------------------------------

    def marginalize_oldest(self):
        """Fold the oldest keyframe (and landmarks anchored there) into the
        pose prior via the Schur complement; tracked landmarks re-anchor."""
        if len(self.frames) < 2:
            return
        old = self.frames[0]
        lms_anchored = [lm for lm in self.landmarks.values()
                        if lm.anchor == old.kid]
        # normal equations of only the factors touching the old frame
        h, b = self._marginal_system(old, lms_anchored)
        n_m = 6 + len(lms_anchored)
        h_mm = h[:n_m, :n_m]
        h_mr = h[:n_m, n_m:]
        h_rr = h[n_m:, n_m:]
        b_m = b[:n_m]
        b_r = b[n_m:]
        try:
            sol = np.linalg.solve(h_mm + np.eye(n_m) * 1e-12, h_mr)
            sol_b = np.linalg.solve(h_mm + np.eye(n_m) * 1e-12, b_m)
        except np.linalg.LinAlgError:
            sol = np.zeros_like(h_mr)
            sol_b = np.zeros_like(b_m)
        self.prior_h = h_rr - h_mr.T @ sol
        self.prior_b = b_r - h_mr.T @ sol_b
        self.prior_lin = [Pose(geom.Rotation(f.pose.rotation.q),
                               f.pose.translation.copy())
                          for f in self.frames[1:]]
        # re-anchor surviving landmarks in the next frame that observes them
        kids_left = [f.kid for f in self.frames[1:]]
        frame_by_kid = {f.kid: f for f in self.frames}
        for lm in lms_anchored:
            new_anchor = next((k for k in kids_left if k in lm.obs), None)
            if new_anchor is None:
                del self.landmarks[lm.fid]
                continue
            p_w = _landmark_world(lm, frame_by_kid[lm.anchor].pose, self.cam)
            anchor_frame = frame_by_kid[new_anchor]
            p_c = self.cam.body_from_cam.inverse().apply(
                anchor_frame.pose.inverse().apply(p_w))
            if p_c[2] <= 0.05:
                del self.landmarks[lm.fid]
                continue
            obs = lm.obs[new_anchor]
            lm.anchor = new_anchor
            lm.anchor_uv = (obs.u_l, obs.v_l)
            lm.inv_depth = 1.0 / p_c[2]
            lm.depth_meas = obs.depth
        for lm in self.landmarks.values():
            lm.obs.pop(old.kid, None)
        self.frames.pop(0)

    def _marginal_system(self, old, lms_anchored):
        """Dense (H, b) over [old pose, anchored lambdas | remaining poses]
        from the factors that touch the old frame."""
        n_rest = 6 * (len(self.frames) - 1)
        n = 6 + len(lms_anchored) + n_rest
        h = np.zeros((n, n))
        b = np.zeros(n)
        kid_to_rest = {f.kid: i for i, f in enumerate(self.frames[1:])}
        sigma_r = self.params.pixel_sigma / self.cam.fx
        poses = {f.kid: f.pose for f in self.frames}
        for li, lm in enumerate(lms_anchored):
            lcol = 6 + li
            for kid, obs in lm.obs.items():
                if kid != old.kid and kid not in kid_to_rest:
                    continue
                for right in (False, True):
                    if right and (obs.u_r is None or obs.v_r is None):
                        continue
                    if kid == old.kid and not right:
                        continue
                    uv = (obs.u_r, obs.v_r) if right else (obs.u_l, obs.v_l)
                    out = reprojection_residual(
                        poses[old.kid], poses[kid], lm.inv_depth,
                        lm.anchor_uv, uv, self.cam, right=right)
                    if out is None:
                        continue
                    r, j_i, j_j, j_l = out
                    jw = 1.0 / sigma_r
                    rows = [(0, j_i * jw)]
                    if kid == old.kid:
                        rows = [(0, (j_i + j_j) * jw)]
                    else:
                        rows.append((6 + len(lms_anchored)
                                     + 6 * kid_to_rest[kid], j_j * jw))
                    _accumulate_blocks(h, b, rows, lcol, j_l * jw, r / sigma_r,
                                       1.0)
            if lm.depth_meas is not None and lm.depth_meas > 0:
                r, j_l = depth_residual(lm.depth_meas, lm.inv_depth)
                s = self.params.depth_sigma_inv
                h[lcol, lcol] += (j_l / s) ** 2
                b[lcol] += (j_l / s) * (r / s)
        # odometry factor old -> next
        if len(self.frames) >= 2:
            nxt = self.frames[1]
            r, j_a, j_b = ins_relative_residual(old.pose, nxt.pose,
                                                old.odo_pose, nxt.odo_pose)
            w_inv = np.linalg.inv(self.rel_cov.cov6(nxt.t - old.t))
            ib = 6 + len(lms_anchored)
            h[0:6, 0:6] += j_a.T @ w_inv @ j_a
            h[0:6, ib:ib + 6] += j_a.T @ w_inv @ j_b
            h[ib:ib + 6, 0:6] += j_b.T @ w_inv @ j_a
            h[ib:ib + 6, ib:ib + 6] += j_b.T @ w_inv @ j_b
            b[0:6] += j_a.T @ w_inv @ r
            b[ib:ib + 6] += j_b.T @ w_inv @ r
        # previous prior (covers a prefix of the frames, starting at the old one)
        if self.prior_h is not None:
            np_ = 6 * len(self.prior_lin)
            delta = np.zeros(np_)
            for i, lin in enumerate(self.prior_lin):
                pose = self.frames[i].pose
                delta[6 * i:6 * i + 3] = pose.translation - lin.translation
                delta[6 * i + 3:6 * i + 6] = geom.log_so3(
                    lin.rotation.inverse() * pose.rotation)
            g = self.prior_h @ delta + self.prior_b
            idx = [np.arange(0, 6)]
            for i in range(1, len(self.prior_lin)):
                start = 6 + len(lms_anchored) + 6 * (i - 1)
                idx.append(np.arange(start, start + 6))
            order = np.concatenate(idx)
            h[np.ix_(order, order)] += self.prior_h
            b[order] += g
        return h, b


def _accumulate_blocks(h, b, pose_rows, lcol, j_l, r_w, w):
    """Scatter one residual's pose/landmark blocks into (h, b)."""
    for (ra, ja) in pose_rows:
        for (rb, jb) in pose_rows:
            h[ra:ra + 6, rb:rb + 6] += w * (ja.T @ jb)
        h[ra:ra + 6, lcol] += w * (ja.T @ j_l)
        h[lcol, ra:ra + 6] += w * (j_l.T @ ja)
        b[ra:ra + 6] += w * (ja.T @ r_w)
    h[lcol, lcol] += w * float(j_l @ j_l)
    b[lcol] += w * float(j_l @ r_w)


def _apply_pose_steps(poses, dx):
    out = []
    for i, pose in enumerate(poses):
        d = dx[6 * i:6 * i + 6]
        out.append(Pose(pose.rotation * geom.exp_so3(d[3:]),
                        pose.translation + d[:3]))
    return out


def _landmark_world(lm: WindowLandmark, anchor_pose: Pose, cam: CameraModel):
    m = cam.back_project(*lm.anchor_uv)
    return anchor_pose.apply(cam.body_from_cam.apply(m / lm.inv_depth))


@dataclass
class StereoConstraint:
    t1: float
    t2: float
    pose: Pose
    cov: np.ndarray
    kind: str = "stereo"
    track_stats: object = None


@dataclass
class TrackQuality:
    n_tracked: int = 0
    n_total: int = 0
    sigma_flow: float = 0.0
    max_flow: float = 1.0


class StereoOdometry:
    """Keyframe front-end around the sliding window: ingestion, failure
    detection, reinitialization, and constraint emission."""

    def __init__(self, cam_params: CameraParams, calib: CalibrationSet,
                 params: StereoParams | None = None,
                 rel_cov: RelativeCovModel | None = None):
        self.cam = CameraModel(cam_params, calib.cam_in_body)
        self.params = params or StereoParams()
        self.rel_cov = rel_cov or RelativeCovModel()
        self.window = SlidingWindow(self.cam, self.params, self.rel_cov)
        self.next_kid = 0
        self.last_frame_obs: dict | None = None
        self.reinit_count = 0
        self.faults: list[dict] = []

    # ---- keyframe policy ----------------------------------------------

    def _is_keyframe(self, t: float, odom: OdometryBuffer) -> bool:
        if not self.window.frames:
            return True
        last = self.window.frames[-1]
        if t - last.t >= self.params.keyframe_dt:
            return True
        try:
            motion = odom.relative(last.t, t)
        except LookupError:
            return False
        return bool(np.linalg.norm(motion.translation)
                    >= self.params.keyframe_dist)

    def process_frame(self, frame: TrackFrame, odom: OdometryBuffer):
        """Ingest one track frame; returns a StereoConstraint when a keyframe
        completes an optimization, else None."""
        quality = self._track_quality(frame)
        self.last_frame_obs = {o.feature_id: o for o in frame.obs}
        if not self._is_keyframe(frame.t, odom):
            return None
        try:
            odo_pose = odom.query(frame.t)
        except LookupError:
            self.faults.append({"t": frame.t, "reason": "odometry_gap"})
            return None

        if not self.window.frames:
            # cold start runs the same protocol as failure recovery
            self.reinitialize(frame, odom)
            return None
        if self.window.failed or quality.n_tracked < self.params.min_tracked:
            self.reinitialize(frame, odom)
            return None

        self._append_keyframe(frame, odo_pose)
        if len(self.window.frames) < 2:
            return None
        info = self.window.optimize()
        if self.window.failed or info.get("failed"):
            self.faults.append({"t": frame.t, "reason": "diverged"})
            self.reinitialize(frame, odom)
            return None
        constraint = self._emit_constraint(quality)
        if len(self.window.frames) > self.params.window_size:
            self.window.marginalize_oldest()
        return constraint

    def _track_quality(self, frame: TrackFrame) -> TrackQuality:
        cur = {o.feature_id: o for o in frame.obs}
        if self.last_frame_obs is None:
            return TrackQuality(len(cur), len(cur), 0.0, 1.0)
        common = set(cur) & set(self.last_frame_obs)
        flows = [math.hypot(cur[i].u_l - self.last_frame_obs[i].u_l,
                            cur[i].v_l - self.last_frame_obs[i].v_l)
                 for i in common]
        n_total = max(len(self.last_frame_obs), 1)
        if not flows:
            return TrackQuality(0, n_total, 0.0, 1.0)
        return TrackQuality(len(common), n_total,
                            float(np.std(flows)), max(max(flows), 1e-9))

    def _append_keyframe(self, frame: TrackFrame, odo_pose: Pose):
        if self.window.frames:
            last = self.window.frames[-1]
            rel = last.odo_pose.inverse().compose(odo_pose)
            pose = last.pose.compose(rel)
        else:
            pose = odo_pose
        kf = Keyframe(self.next_kid, frame.t, pose, odo_pose)
        self.next_kid += 1
        self.window.frames.append(kf)
        for obs in frame.obs:
            lm = self.window.landmarks.get(obs.feature_id)
            if lm is None:
                lam = self._initial_inv_depth(obs)
                lm = WindowLandmark(obs.feature_id, kf.kid, lam,
                                    (obs.u_l, obs.v_l), depth_meas=obs.depth)
                self.window.landmarks[obs.feature_id] = lm
            lm.obs[kf.kid] = obs

    def _initial_inv_depth(self, obs) -> float:
        if obs.u_r is not None:
            disparity = obs.u_l - obs.u_r
            if disparity > 1e-3:
                return disparity / (self.cam.fx * self.cam.baseline)
        if obs.depth is not None and obs.depth > 0:
            return 1.0 / obs.depth
        return self.params.default_inv_depth

    def _emit_constraint(self, quality: TrackQuality):
        frames = self.window.frames
        prev, cur = frames[-2], frames[-1]
        rel = prev.pose.inverse().compose(cur.pose)
        cov = self.rel_cov.cov6(cur.t - prev.t)
        h = getattr(self.window, "_last_h", None)
        if h is not None and h.shape[0] >= 12:
            i0 = 6 * (len(frames) - 2)
            i1 = 6 * (len(frames) - 1)
            try:
                block = np.linalg.inv(h[i0:i1 + 6, i0:i1 + 6]
                                      + np.eye(12) * 1e-9)
                cov = block[:6, :6] + block[6:, 6:]
            except np.linalg.LinAlgError:
                pass
        return StereoConstraint(t1=prev.t, t2=cur.t, pose=rel, cov=cov,
                                track_stats=quality)

    # ---- recovery ------------------------------------------------------

    def reinitialize(self, frame: TrackFrame, odom: OdometryBuffer):
        """Recovery protocol: clear buffers, assign the interpolated filter
        pose, re-triangulate landmarks from the stereo pair, reset the prior
        to the filter-pose prior. Deferred when odometry cannot cover t."""
        try:
            odo_pose = odom.query(frame.t)
        except LookupError:
            self.faults.append({"t": frame.t, "reason": "reinit_deferred"})
            return False
        self.window = SlidingWindow(self.cam, self.params, self.rel_cov)
        kf = Keyframe(self.next_kid, frame.t, odo_pose, odo_pose)
        self.next_kid += 1
        self.window.frames.append(kf)
        for obs in frame.obs:
            lam = self._initial_inv_depth(obs)
            lm = WindowLandmark(obs.feature_id, kf.kid, lam,
                                (obs.u_l, obs.v_l), depth_meas=obs.depth)
            lm.obs[kf.kid] = obs
            self.window.landmarks[obs.feature_id] = lm
        # pose prior anchors the new window at the filter solution
        self.window.prior_h = np.diag([1e6] * 3 + [1e6] * 3).astype(float)
        self.window.prior_b = np.zeros(6)
        self.window.prior_lin = [Pose(geom.Rotation(odo_pose.rotation.q),
                                      odo_pose.translation.copy())]
        self.reinit_count += 1
        return True

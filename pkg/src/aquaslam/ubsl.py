"""Structured-light odometry: deskews scan lines into sweeps using the
high-rate filter odometry, then tightly couples NDT sweep registration with a
filter-pose observation in an iterated error-state update, emitting
relative-pose constraints between consecutive sweeps.

The iterated update is Gauss-Newton on the MAP cost

    || x (-) x_prior ||^2_{P^-1} + sum_obs || z - h(x) ||^2_{V^-1}

whose first iteration is exactly the information-form Kalman step
dx = ((J P J^T)^-1 + Q)^-1 Z with Q = H^T V^-1 H and Z = H^T V^-1 (z - h).
Later iterations keep the prior-pullback term so the fixed point on linear
models equals the one-shot update.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom, ndt
from .dpins import (IDX_P, IDX_TH, STATE_DIM, NominalState, OdometryBuffer,
                    RelativeCovModel, inject)
from .geom import CalibrationSet, Pose
from .ndt import NdtParams, NdtVoxelMap, PointCloud


class OdometryGapError(RuntimeError):
    """Raised when the odometry buffer cannot cover a sweep's scan times."""


@dataclass
class ScanLine:
    t: float
    points: np.ndarray          # (n, 3), sensor frame


@dataclass
class Sweep:
    t_ref: float
    points: np.ndarray          # deskewed, body frame at t_ref
    n_scans: int
    ref_pose: Pose              # world pose used for deskew at t_ref


def assemble_sweep(scans: list[ScanLine], odom: OdometryBuffer,
                   calib: CalibrationSet, ref_time: float | None = None,
                   max_gap: float = 0.05) -> Sweep:
    """Deskew scan lines into the body frame at the sweep reference time.

    Each line's points go sensor -> body -> world at the line's interpolated
    pose, then into the body frame at ref_time (default: the last line's
    timestamp). An odometry gap larger than max_gap at any scan time rejects
    the sweep.
    """
    if not scans:
        raise ValueError("assemble_sweep needs at least one scan line")
    if ref_time is None:
        ref_time = scans[-1].t
    old_gap = odom.max_gap
    odom.max_gap = max_gap
    try:
        try:
            ref_pose = odom.query(ref_time)
        except LookupError as exc:
            raise OdometryGapError(str(exc)) from exc
        t_sb = calib.scanner_in_body
        ref_inv = ref_pose.inverse()
        chunks = []
        for line in scans:
            if line.points.shape[0] == 0:
                continue
            try:
                line_pose = odom.query(line.t)
            except LookupError as exc:
                raise OdometryGapError(str(exc)) from exc
            t_rel = ref_inv.compose(line_pose).compose(t_sb)
            chunks.append(t_rel.apply(line.points))
    finally:
        odom.max_gap = old_gap
    pts = np.vstack(chunks) if chunks else np.zeros((0, 3))
    return Sweep(t_ref=ref_time, points=pts, n_scans=len(scans),
                 ref_pose=ref_pose)


@dataclass
class IeskfState:
    state: NominalState
    cov: np.ndarray             # 18x18

    def copy(self) -> "IeskfState":
        return IeskfState(self.state.copy(), self.cov.copy())


@dataclass
class IeskfParams:
    max_iter: int = 5
    tol: float = 1e-6
    max_halvings: int = 8


def iteration_jacobian(dtheta: np.ndarray) -> np.ndarray:
    """Tangent-transport Jacobian: identity except the attitude block, which
    is the inverse right Jacobian of the accumulated attitude correction."""
    j = np.eye(STATE_DIM)
    j[IDX_TH:IDX_TH + 3, IDX_TH:IDX_TH + 3] = geom.so3_right_jacobian_inv(dtheta)
    return j


def dpins_observation(state: NominalState, prior_pose: Pose, pose_cov6):
    """Pose observation from the filter odometry: H selects (dp, dtheta).

    Returns (Q, Z) with Q = H^T V^-1 H and Z = H^T V^-1 (z - h(x)).
    """
    v_inv = np.linalg.inv(np.asarray(pose_cov6, dtype=float))
    r = np.concatenate([
        prior_pose.translation - state.p,
        geom.log_so3(state.rot.inverse() * prior_pose.rotation)])
    h = np.zeros((6, STATE_DIM))
    h[0:3, IDX_P:IDX_P + 3] = np.eye(3)
    h[3:6, IDX_TH:IDX_TH + 3] = np.eye(3)
    q = h.T @ v_inv @ h
    z = h.T @ v_inv @ r
    return q, z


class PoseObservation:
    """Filter-pose observation for the iterated update."""

    def __init__(self, pose: Pose, cov6):
        self.pose = pose
        self.v_inv = np.linalg.inv(np.asarray(cov6, dtype=float))
        self.n_matched = 1

    def _residual(self, state):
        return np.concatenate([
            self.pose.translation - state.p,
            geom.log_so3(state.rot.inverse() * self.pose.rotation)])

    def linearize(self, state):
        q, z = dpins_observation(state, self.pose, np.linalg.inv(self.v_inv))
        r = self._residual(state)
        return q, z, float(r @ self.v_inv @ r)

    def cost(self, state):
        r = self._residual(state)
        return float(r @ self.v_inv @ r)


class SweepNdtObservation:
    """Per-point NDT observation; associations freeze at each linearization
    so the line search evaluates a continuous cost."""

    def __init__(self, points_body, vmap: NdtVoxelMap, min_matches: int = 20):
        self.points_body = np.asarray(points_body, dtype=float).reshape(-1, 3)
        self.vmap = vmap
        self.min_matches = min_matches
        self.n_matched = 0
        self._frozen = None

    def linearize(self, state):
        q, z, n = ndt_observation(state, self.points_body, self.vmap,
                                  self.min_matches)
        self.n_matched = n
        if n == 0:
            self._frozen = None
            return q, z, 0.0
        pose = state.pose()
        pts_world = pose.apply(self.points_body)
        mask, mu, sig_inv = self.vmap.match(pts_world)
        self._frozen = (self.points_body[mask], mu[mask], sig_inv[mask])
        return q, z, self.cost(state)

    def cost(self, state):
        if self._frozen is None:
            return 0.0
        q_pts, mu, si = self._frozen
        e = state.pose().apply(q_pts) - mu
        return float(np.einsum("ni,nij,nj->", e, si, e))


def ndt_observation(state: NominalState, sweep_points_body: np.ndarray,
                    local_map: NdtVoxelMap, min_matches: int = 20):
    """Accumulated per-point NDT contributions at the state's pose.

    Per point j: residual e_j = R q_j + t - mu_j with block Jacobian
    [I, 0, -R q^, 0] in the state ordering (dp, dv, dtheta, ...). Returns
    (Q, Z, n_matched); fewer matches than min_matches gives a zero
    contribution (callers fall back to the filter-pose observation alone).
    """
    q_out = np.zeros((STATE_DIM, STATE_DIM))
    z_out = np.zeros(STATE_DIM)
    pts_body = np.asarray(sweep_points_body, dtype=float).reshape(-1, 3)
    if pts_body.shape[0] == 0 or len(local_map) == 0:
        return q_out, z_out, 0
    pose = state.pose()
    pts_world = pose.apply(pts_body)
    mask, mu, sig_inv = local_map.match(pts_world)
    n = int(mask.sum())
    if n < min_matches:
        return q_out, z_out, 0
    e = pts_world[mask] - mu[mask]
    si = sig_inv[mask]
    rot_m = pose.rotation.matrix()
    rq = pts_world[mask] - pose.translation          # = R q_j
    jtheta = np.einsum("nij,jk->nik", -ndt._hat_batch(rq), rot_m)
    si_e = np.einsum("nij,nj->ni", si, e)
    q_out[IDX_P:IDX_P + 3, IDX_P:IDX_P + 3] = si.sum(axis=0)
    q_pt = np.einsum("nij,njk->ik", si, jtheta)
    q_out[IDX_P:IDX_P + 3, IDX_TH:IDX_TH + 3] = q_pt
    q_out[IDX_TH:IDX_TH + 3, IDX_P:IDX_P + 3] = q_pt.T
    q_out[IDX_TH:IDX_TH + 3, IDX_TH:IDX_TH + 3] = np.einsum(
        "nji,njk,nkl->il", jtheta, si, jtheta)
    z_out[IDX_P:IDX_P + 3] = si_e.sum(axis=0)
    z_out[IDX_TH:IDX_TH + 3] = np.einsum("nji,nj->i", jtheta, si_e)
    return q_out, z_out, n


def ieskf_update(prior: IeskfState, observations,
                 params: IeskfParams | None = None):
    """Iterated update: dx solves ((J P J^T)^-1 + Q) dx = Z - (J P J^T)^-1 acc
    with Q/Z summed over the observations linearized at the iterate and acc
    the accumulated correction, so the fixed point is the MAP estimate (on
    linear models: the one-shot Kalman update).

    Each observation must provide linearize(state) -> (Q, Z, cost) and
    cost(state) (evaluated on correspondences frozen at the last
    linearization). Steps are halved until the frozen MAP objective
    decreases. A singular information matrix returns the prior flagged
    degenerate.
    """
    p = params or IeskfParams()
    x_k = prior.state.copy()
    acc = np.zeros(STATE_DIM)           # accumulated correction x_k (-) x_prior
    info = {"iterations": 0, "converged": False, "degenerate": False,
            "step_norms": []}
    q_k = np.zeros((STATE_DIM, STATE_DIM))
    j_k = np.eye(STATE_DIM)
    for it in range(p.max_iter):
        q_k = np.zeros((STATE_DIM, STATE_DIM))
        z_k = np.zeros(STATE_DIM)
        cost_obs = 0.0
        for obs in observations:
            q_i, z_i, c_i = obs.linearize(x_k)
            q_k += q_i
            z_k += z_i
            cost_obs += c_i
        j_k = iteration_jacobian(acc[IDX_TH:IDX_TH + 3])
        p_k = j_k @ prior.cov @ j_k.T
        try:
            p_k_inv = np.linalg.inv(p_k)
            dx = np.linalg.solve(p_k_inv + q_k, z_k - p_k_inv @ acc)
        except np.linalg.LinAlgError:
            info["degenerate"] = True
            return prior.copy(), info
        info["iterations"] = it + 1
        if np.linalg.norm(dx) < p.tol:
            info["step_norms"].append(float(np.linalg.norm(dx)))
            info["converged"] = True
            break
        cost_now = cost_obs + float(acc @ p_k_inv @ acc)
        step = 1.0
        accepted = False
        for _ in range(p.max_halvings + 1):
            cand = inject(x_k, step * dx)
            cand_acc = acc + step * dx
            cand_cost = (float(cand_acc @ p_k_inv @ cand_acc)
                         + sum(obs.cost(cand) for obs in observations))
            if cand_cost <= cost_now + 1e-12:
                x_k = cand
                acc = cand_acc
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        info["step_norms"].append(float(np.linalg.norm(step * dx)))
        if np.linalg.norm(step * dx) < p.tol:
            info["converged"] = True
            break
    p_k = j_k @ prior.cov @ j_k.T
    try:
        new_cov = np.linalg.inv(np.linalg.inv(p_k) + q_k)
    except np.linalg.LinAlgError:
        info["degenerate"] = True
        return prior.copy(), info
    new_cov = 0.5 * (new_cov + new_cov.T)
    return IeskfState(x_k, new_cov), info


@dataclass
class UbslParams:
    ndt: NdtParams = field(default_factory=lambda: NdtParams(capacity=20000))
    ieskf: IeskfParams = field(default_factory=IeskfParams)
    max_deskew_gap: float = 0.05
    min_matches: int = 20
    # inflation applied to the propagated prior so fresh observations dominate
    prior_inflation: float = 4.0


@dataclass
class RelativeConstraint:
    t1: float
    t2: float
    pose: Pose                  # motion of the body frame from t1 to t2
    cov: np.ndarray             # 6x6 (translation, rotation)
    kind: str = "ubsl"
    stats: object = None


class UbslOdometry:
    """Per-sweep pipeline: deskew, IESKF fusion, local-map insertion.

    Holds its own iterated state propagated between sweeps by the filter's
    relative motion; biases ride along from the filter and are not
    re-estimated here.
    """

    def __init__(self, calib: CalibrationSet, params: UbslParams | None = None,
                 rel_cov: RelativeCovModel | None = None):
        self.calib = calib
        self.params = params or UbslParams()
        self.rel_cov = rel_cov or RelativeCovModel()
        self.local_map = NdtVoxelMap(self.params.ndt)
        self.prev: IeskfState | None = None
        self.prev_t: float | None = None
        self.faults: list[dict] = []

    def reset_map(self):
        self.local_map = NdtVoxelMap(self.params.ndt)

    def process_sweep(self, sweep: Sweep, odom: OdometryBuffer,
                      dpins_state: NominalState, dpins_cov: np.ndarray):
        """Fuse the filter prior with the NDT observation; returns
        (pose, RelativeConstraint | None). The first sweep initializes the
        map at the filter pose and emits no constraint."""
        pose_cov6 = _pose_block(dpins_cov)
        if self.prev is None:
            est = IeskfState(dpins_state.copy(), dpins_cov.copy())
            self._insert(sweep, est.state.pose())
            self.prev = est
            self.prev_t = sweep.t_ref
            return est.state.pose(), None

        rel = odom.relative(self.prev_t, sweep.t_ref)
        rel_cov6 = self.rel_cov.cov6(sweep.t_ref - self.prev_t)
        prior_state = self.prev.state.copy()
        prior_state.p = self.prev.state.pose().apply(rel.translation)
        prior_state.rot = self.prev.state.rot * rel.rotation
        prior_state.v = dpins_state.v.copy()
        prior_state.bg = dpins_state.bg.copy()
        prior_state.ba = dpins_state.ba.copy()
        prior_cov = self.prev.cov * self.params.prior_inflation \
            + _expand_pose_cov(rel_cov6)
        prior = IeskfState(prior_state, prior_cov)

        obs_pose = PoseObservation(dpins_state.pose(), pose_cov6)
        obs_ndt = SweepNdtObservation(sweep.points, self.local_map,
                                      self.params.min_matches)
        est, info = ieskf_update(prior, [obs_pose, obs_ndt], self.params.ieskf)
        info["ndt_matched"] = obs_ndt.n_matched
        if obs_ndt.n_matched == 0:
            self.faults.append({"t": sweep.t_ref, "reason": "ndt_no_match"})
        if info["degenerate"]:
            self.faults.append({"t": sweep.t_ref, "reason": "degenerate"})
            return est.state.pose(), None

        pose = est.state.pose()
        self._insert(sweep, pose)
        t_rel = self.prev.state.pose().inverse().compose(pose)
        constraint = RelativeConstraint(
            t1=self.prev_t, t2=sweep.t_ref, pose=t_rel,
            cov=_pose_block(est.cov), kind="ubsl", stats=info)
        self.prev = est
        self.prev_t = sweep.t_ref
        return pose, constraint

    def _insert(self, sweep: Sweep, pose: Pose):
        ndt.insert_sweep(self.local_map, PointCloud(sweep.points), pose)


def _pose_block(cov18: np.ndarray) -> np.ndarray:
    out = np.zeros((6, 6))
    out[:3, :3] = cov18[IDX_P:IDX_P + 3, IDX_P:IDX_P + 3]
    out[:3, 3:] = cov18[IDX_P:IDX_P + 3, IDX_TH:IDX_TH + 3]
    out[3:, :3] = cov18[IDX_TH:IDX_TH + 3, IDX_P:IDX_P + 3]
    out[3:, 3:] = cov18[IDX_TH:IDX_TH + 3, IDX_TH:IDX_TH + 3]
    return out


def _expand_pose_cov(cov6: np.ndarray) -> np.ndarray:
    out = np.zeros((STATE_DIM, STATE_DIM))
    out[IDX_P:IDX_P + 3, IDX_P:IDX_P + 3] = cov6[:3, :3]
    out[IDX_P:IDX_P + 3, IDX_TH:IDX_TH + 3] = cov6[:3, 3:]
    out[IDX_TH:IDX_TH + 3, IDX_P:IDX_P + 3] = cov6[3:, :3]
    out[IDX_TH:IDX_TH + 3, IDX_TH:IDX_TH + 3] = cov6[3:, 3:]
    return out

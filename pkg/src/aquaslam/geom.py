"""Rigid-body math shared by every estimator: SO(3)/SE(3) operations on
unit quaternions, pose interpolation, Lie-group Jacobians, and the sensor
extrinsic calibration set.

Conventions:
  - Rotation stores a unit quaternion (w, x, y, z) and is renormalized after
    every composition.
  - Pose maps body coordinates to world coordinates: p_w = R p_b + t.
  - SE(3) tangent vectors are ordered (translation, rotation): xi = (rho, phi),
    with Exp(xi) = (Exp(phi), V(phi) rho).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Below this angle exp/log switch to second-order Taylor series.
SMALL_ANGLE = 1e-8


def hat(v):
    """Skew-symmetric matrix such that hat(v) @ w == cross(v, w)."""
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def vee(m, tol=1e-9):
    """Inverse of hat. Rejects matrices that are not skew within tol."""
    m = np.asarray(m, dtype=float)
    if np.abs(m + m.T).max() > tol:
        raise ValueError("vee expects a skew-symmetric matrix")
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


class Rotation:
    """Rotation stored as a unit quaternion (w, x, y, z)."""

    __slots__ = ("q",)

    def __init__(self, q):
        q = np.asarray(q, dtype=float)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("quaternion must be finite and nonzero")
        self.q = q / n

    @staticmethod
    def identity() -> "Rotation":
        return Rotation(np.array([1.0, 0.0, 0.0, 0.0]))

    @staticmethod
    def from_matrix(m) -> "Rotation":
        m = np.asarray(m, dtype=float)
        t = np.trace(m)
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            q = np.array([0.25 * s,
                          (m[2, 1] - m[1, 2]) / s,
                          (m[0, 2] - m[2, 0]) / s,
                          (m[1, 0] - m[0, 1]) / s])
        else:
            i = int(np.argmax(np.diag(m)))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = math.sqrt(max(1.0 + m[i, i] - m[j, j] - m[k, k], 0.0)) * 2.0
            q = np.empty(4)
            q[0] = (m[k, j] - m[j, k]) / s
            q[1 + i] = 0.25 * s
            q[1 + j] = (m[j, i] + m[i, j]) / s
            q[1 + k] = (m[k, i] + m[i, k]) / s
        return Rotation(q)

    def matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ])

    def __mul__(self, other: "Rotation") -> "Rotation":
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation(np.array([
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]))

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation(np.array([w, -x, -y, -z]))

    def apply(self, v) -> np.ndarray:
        """Rotate one vector (3,) or a stack (N, 3)."""
        v = np.asarray(v, dtype=float)
        m = self.matrix()
        if v.ndim == 1:
            return m @ v
        return v @ m.T

    def angle_to(self, other: "Rotation") -> float:
        return float(np.linalg.norm(log_so3(self.inverse() * other)))

    def __repr__(self):
        return f"Rotation(q={self.q.tolist()})"


def exp_so3(phi) -> Rotation:
    """Rotation by angle |phi| about axis phi/|phi|; total function."""
    phi = np.asarray(phi, dtype=float)
    angle = float(np.linalg.norm(phi))
    half = 0.5 * angle
    if angle < SMALL_ANGLE:
        # sin(a/2)/a ~ 1/2 - a^2/48, cos(a/2) ~ 1 - a^2/8
        s = 0.5 - angle * angle / 48.0
        w = 1.0 - angle * angle / 8.0
    else:
        s = math.sin(half) / angle
        w = math.cos(half)
    return Rotation(np.array([w, s * phi[0], s * phi[1], s * phi[2]]))


def log_so3(r: Rotation) -> np.ndarray:
    """Principal axis-angle vector, |result| <= pi.

    At angle pi the axis is taken from the largest diagonal element of the
    rotation matrix, with the sign fixed so the first nonzero component is
    positive.
    """
    m = r.matrix()
    cos_a = min(1.0, max(-1.0, 0.5 * (np.trace(m) - 1.0)))
    angle = math.acos(cos_a)
    if angle < SMALL_ANGLE:
        # 0.5 * (1 + a^2/6) * (m - m^T)^vee to second order
        w = 0.5 * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
        return w * (1.0 + angle * angle / 6.0)
    if math.pi - angle < 1e-6:
        d = np.diag(m)
        i = int(np.argmax(d))
        axis = np.zeros(3)
        axis[i] = math.sqrt(max((d[i] + 1.0) * 0.5, 0.0))
        j, k = (i + 1) % 3, (i + 2) % 3
        axis[j] = m[i, j] / (2.0 * axis[i])
        axis[k] = m[i, k] / (2.0 * axis[i])
        axis /= np.linalg.norm(axis)
        for c in axis:
            if abs(c) > 1e-12:
                if c < 0.0:
                    axis = -axis
                break
        return axis * angle
    scale = angle / (2.0 * math.sin(angle))
    return scale * np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])


def so3_left_jacobian(phi) -> np.ndarray:
    """V(phi) = I + (1-cos)/a^2 phi^ + (a-sin)/a^3 phi^ phi^."""
    phi = np.asarray(phi, dtype=float)
    a = float(np.linalg.norm(phi))
    px = hat(phi)
    if a < SMALL_ANGLE:
        c1 = 0.5 - a * a / 24.0
        c2 = 1.0 / 6.0 - a * a / 120.0
    else:
        c1 = (1.0 - math.cos(a)) / (a * a)
        c2 = (a - math.sin(a)) / (a ** 3)
    return np.eye(3) + c1 * px + c2 * (px @ px)


def so3_left_jacobian_inv(phi) -> np.ndarray:
    """V(phi)^-1 = I - 1/2 phi^ + c(a) phi^ phi^, c = 1/a^2 - cot(a/2)/(2a)."""
    phi = np.asarray(phi, dtype=float)
    a = float(np.linalg.norm(phi))
    px = hat(phi)
    if a < SMALL_ANGLE:
        c = 1.0 / 12.0 + a * a / 720.0
    else:
        c = 1.0 / (a * a) - math.cos(0.5 * a) / (2.0 * a * math.sin(0.5 * a))
    return np.eye(3) - 0.5 * px + c * (px @ px)


def so3_right_jacobian(phi) -> np.ndarray:
    return so3_left_jacobian(-np.asarray(phi, dtype=float))


def so3_right_jacobian_inv(phi) -> np.ndarray:
    return so3_left_jacobian_inv(-np.asarray(phi, dtype=float))


class Pose:
    """Rigid transform: p_world = rotation @ p_body + translation."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation, translation):
        self.rotation = rotation
        self.translation = np.asarray(translation, dtype=float).copy()

    @staticmethod
    def identity() -> "Pose":
        return Pose(Rotation.identity(), np.zeros(3))

    @staticmethod
    def from_matrix(m) -> "Pose":
        m = np.asarray(m, dtype=float)
        return Pose(Rotation.from_matrix(m[:3, :3]), m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation.matrix()
        m[:3, 3] = self.translation
        return m

    def compose(self, other: "Pose") -> "Pose":
        return Pose(self.rotation * other.rotation,
                    self.rotation.apply(other.translation) + self.translation)

    def inverse(self) -> "Pose":
        rinv = self.rotation.inverse()
        return Pose(rinv, -rinv.apply(self.translation))

    def apply(self, v) -> np.ndarray:
        return self.rotation.apply(v) + self.translation

    def __repr__(self):
        return f"Pose(q={self.rotation.q.tolist()}, t={self.translation.tolist()})"


def exp_se3(xi) -> Pose:
    """SE(3) exponential of xi = (rho, phi), with the left-Jacobian V matrix."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    return Pose(exp_so3(phi), so3_left_jacobian(phi) @ rho)


def log_se3(p: Pose) -> np.ndarray:
    """SE(3) logarithm, 6-vector (translation part, rotation part)."""
    phi = log_so3(p.rotation)
    rho = so3_left_jacobian_inv(phi) @ p.translation
    return np.concatenate([rho, phi])


def se3_adjoint(p: Pose) -> np.ndarray:
    """Ad_T for xi = (rho, phi): Exp(Ad_T xi) = T Exp(xi) T^-1."""
    r = p.rotation.matrix()
    ad = np.zeros((6, 6))
    ad[:3, :3] = r
    ad[:3, 3:] = hat(p.translation) @ r
    ad[3:, 3:] = r
    return ad


def _se3_q_matrix(rho, phi) -> np.ndarray:
    """Translation-rotation coupling block of the SE(3) left Jacobian."""
    a = float(np.linalg.norm(phi))
    px = hat(phi)
    rx = hat(rho)
    if a < 1e-4:
        m2 = 1.0 / 6.0 - a * a / 120.0
        m3 = 1.0 / 24.0 - a * a / 720.0
        m4 = 1.0 / 120.0 - a * a / 2520.0
    else:
        sa, ca = math.sin(a), math.cos(a)
        m2 = (a - sa) / a ** 3
        m3 = (a * a + 2.0 * ca - 2.0) / (2.0 * a ** 4)
        m4 = (2.0 * a - 3.0 * sa + a * ca) / (2.0 * a ** 5)
    pr = px @ rx
    rp = rx @ px
    prp = pr @ px
    return (0.5 * rx
            + m2 * (pr + rp + prp)
            + m3 * (px @ pr - 3.0 * prp + rp @ px)
            + m4 * (prp @ px + px @ pr @ px))


def se3_left_jacobian(xi) -> np.ndarray:
    """6x6 left Jacobian: Exp(xi + d) ~ Exp(Jl(xi) d) Exp(xi)."""
    xi = np.asarray(xi, dtype=float)
    rho, phi = xi[:3], xi[3:]
    jl = so3_left_jacobian(phi)
    out = np.zeros((6, 6))
    out[:3, :3] = jl
    out[3:, 3:] = jl
    out[:3, 3:] = _se3_q_matrix(rho, phi)
    return out


def se3_right_jacobian(xi) -> np.ndarray:
    return se3_left_jacobian(-np.asarray(xi, dtype=float))


def se3_left_jacobian_inv(xi) -> np.ndarray:
    xi = np.asarray(xi, dtype=float)
    jinv = so3_left_jacobian_inv(xi[3:])
    out = np.zeros((6, 6))
    out[:3, :3] = jinv
    out[3:, 3:] = jinv
    out[:3, 3:] = -jinv @ _se3_q_matrix(xi[:3], xi[3:]) @ jinv
    return out


def se3_right_jacobian_inv(xi) -> np.ndarray:
    return se3_left_jacobian_inv(-np.asarray(xi, dtype=float))


def slerp(ra: Rotation, rb: Rotation, u: float) -> Rotation:
    """Spherical interpolation along the shortest arc, u in [0, 1]."""
    qa, qb = ra.q, rb.q.copy()
    dot = float(qa @ qb)
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-12:
        return Rotation(qa + u * (qb - qa))
    theta = math.acos(min(dot, 1.0))
    s = math.sin(theta)
    return Rotation((math.sin((1.0 - u) * theta) / s) * qa
                    + (math.sin(u * theta) / s) * qb)


def interpolate_pose(pose_a: Pose, t_a: float, pose_b: Pose, t_b: float,
                     t: float) -> Pose:
    """Linear translation / slerp rotation interpolation at time t.

    Requires t_a < t_b and t inside [t_a, t_b].
    """
    if t_a >= t_b:
        raise ValueError(f"interpolate_pose needs t_a < t_b, got {t_a} >= {t_b}")
    if t < t_a or t > t_b:
        raise ValueError(f"time {t} outside interval [{t_a}, {t_b}]")
    u = (t - t_a) / (t_b - t_a)
    return Pose(slerp(pose_a.rotation, pose_b.rotation, u),
                (1.0 - u) * pose_a.translation + u * pose_b.translation)


def relative_pose_residual(meas_ab: Pose, pose_a: Pose, pose_b: Pose):
    """Residual and Jacobians of a relative-pose measurement.

    r = Log_SE3(meas_ab^-1 * pose_a^-1 * pose_b), zero when the estimated
    relative motion a->b equals the measurement. Jacobians are with respect
    to the split perturbation (dp world-additive, dtheta body-right) of each
    endpoint, stacked as 6x6 blocks.
    """
    m = meas_ab.inverse().compose(pose_a.inverse()).compose(pose_b)
    r = log_se3(m)
    jr_inv = se3_right_jacobian_inv(r)
    jl_inv = se3_left_jacobian_inv(r)
    sb = np.zeros((6, 6))
    sb[:3, :3] = pose_b.rotation.matrix().T
    sb[3:, 3:] = np.eye(3)
    sa = np.zeros((6, 6))
    sa[:3, :3] = pose_a.rotation.matrix().T
    sa[3:, 3:] = np.eye(3)
    j_b = jr_inv @ sb
    j_a = -jl_inv @ se3_adjoint(meas_ab.inverse()) @ sa
    return r, j_a, j_b


@dataclass
class CalibrationSet:
    """Extrinsic calibration shared across the subsystems.

    All rotations are Rotation instances; translations in meters.
      dvl_from_imu        maps IMU-frame vectors into the DVL frame
      dvl_in_imu          DVL unit pose in the IMU frame (rotation, lever arm),
                          used by the dead-reckoning observation
      cam_in_body         left-camera pose in the body(IMU) frame
      world_reference     attitude of the IMU frame at startup (world reference
                          used by the pressure observation)
      mag_from_imu        magnetometer mounting rotation in the IMU frame
      scanner_in_body     structured-light sensor pose in the body frame
    """
    dvl_from_imu: Rotation = field(default_factory=Rotation.identity)
    dvl_in_imu: Pose = field(default_factory=Pose.identity)
    cam_in_body: Pose = field(default_factory=Pose.identity)
    world_reference: Rotation = field(default_factory=Rotation.identity)
    mag_from_imu: Rotation = field(default_factory=Rotation.identity)
    scanner_in_body: Pose = field(default_factory=Pose.identity)

    def to_dict(self) -> dict:
        return {
            "dvl_from_imu": self.dvl_from_imu.q.tolist(),
            "dvl_in_imu": _pose_to_list(self.dvl_in_imu),
            "cam_in_body": _pose_to_list(self.cam_in_body),
            "world_reference": self.world_reference.q.tolist(),
            "mag_from_imu": self.mag_from_imu.q.tolist(),
            "scanner_in_body": _pose_to_list(self.scanner_in_body),
        }

    @staticmethod
    def from_dict(d: dict) -> "CalibrationSet":
        return CalibrationSet(
            dvl_from_imu=Rotation(d["dvl_from_imu"]),
            dvl_in_imu=_pose_from_list(d["dvl_in_imu"]),
            cam_in_body=_pose_from_list(d["cam_in_body"]),
            world_reference=Rotation(d["world_reference"]),
            mag_from_imu=Rotation(d["mag_from_imu"]),
            scanner_in_body=_pose_from_list(d["scanner_in_body"]),
        )


def _pose_to_list(p: Pose):
    return [p.rotation.q.tolist(), p.translation.tolist()]


def _pose_from_list(v) -> Pose:
    return Pose(Rotation(v[0]), np.asarray(v[1], dtype=float))

"""Error-state Kalman filter fusing IMU propagation with DVL velocity,
pressure depth, and external dead-reckoning pose updates.

The error state is the 18-vector (dp, dv, dtheta, dbg, dba, dg) with blocks
at indices 0, 3, 6, 9, 12, 15. Attitude errors are injected on the right:
R <- R Exp(dtheta). The world frame has z pointing down, gravity +9.81 along z,
so depth grows with world z.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .geom import Pose, Rotation

STATE_DIM = 18
IDX_P, IDX_V, IDX_TH, IDX_BG, IDX_BA, IDX_G = 0, 3, 6, 9, 12, 15

GRAVITY = 9.81
MAX_IMU_DT = 0.1
COV_EIG_FLOOR = 1e-12


@dataclass
class NominalState:
    p: np.ndarray
    v: np.ndarray
    rot: Rotation
    bg: np.ndarray
    ba: np.ndarray
    g: np.ndarray

    @staticmethod
    def at_rest(rot: Rotation | None = None) -> "NominalState":
        return NominalState(
            p=np.zeros(3), v=np.zeros(3),
            rot=rot if rot is not None else Rotation.identity(),
            bg=np.zeros(3), ba=np.zeros(3),
            g=np.array([0.0, 0.0, GRAVITY]))

    def copy(self) -> "NominalState":
        return NominalState(self.p.copy(), self.v.copy(), Rotation(self.rot.q),
                            self.bg.copy(), self.ba.copy(), self.g.copy())

    def pose(self) -> Pose:
        return Pose(self.rot, self.p)


@dataclass
class ImuSample:
    t: float
    w: np.ndarray   # rad/s, body
    a: np.ndarray   # m/s^2 specific force, body


@dataclass
class DvlSample:
    t: float
    v: np.ndarray   # m/s, DVL frame
    valid: bool = True


@dataclass
class PressureSample:
    t: float
    depth: float    # m, down-positive


@dataclass
class DrPose:
    t: float
    pose: Pose      # dead-reckoning pose in the DVL frame


@dataclass
class MagSample:
    t: float
    rot: Rotation   # absolute orientation from the magnetometer-aided IMU


@dataclass
class NoiseConfig:
    """White-noise densities, bias random walks, and measurement covariances.

    Process densities are continuous-time (per sqrt(Hz)); the discrete process
    noise scales with dt. All variances must be strictly positive.
    """
    gyro_noise: float = 1e-4          # rad/s/sqrt(Hz)
    accel_noise: float = 1e-2         # m/s^2/sqrt(Hz)
    gyro_bias_walk: float = 1e-6      # rad/s^2/sqrt(Hz)
    accel_bias_walk: float = 1e-5     # m/s^3/sqrt(Hz)
    dvl_var: float = 2.5e-5           # (m/s)^2 per axis
    ps_var: float = 4e-6              # m^2, depth axis
    ps_xy_var: float = 1e9            # m^2, uninformative lateral rows
    dr_pos_var: float = 1e-4          # m^2
    dr_rot_var: float = 3e-4          # rad^2
    mag_var: float = 1e-4             # rad^2

    def validate(self):
        for name in ("gyro_noise", "accel_noise", "gyro_bias_walk",
                     "accel_bias_walk", "dvl_var", "ps_var", "ps_xy_var",
                     "dr_pos_var", "dr_rot_var", "mag_var"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"noise.{name} must be strictly positive")
        return self

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d: dict) -> "NoiseConfig":
        return NoiseConfig(**d)


def process_noise(noise: NoiseConfig, dt: float) -> np.ndarray:
    q = np.zeros(STATE_DIM)
    q[IDX_V:IDX_V + 3] = noise.accel_noise ** 2 * dt
    q[IDX_TH:IDX_TH + 3] = noise.gyro_noise ** 2 * dt
    q[IDX_BG:IDX_BG + 3] = noise.gyro_bias_walk ** 2 * dt
    q[IDX_BA:IDX_BA + 3] = noise.accel_bias_walk ** 2 * dt
    return np.diag(q)


def default_initial_covariance() -> np.ndarray:
    d = np.empty(STATE_DIM)
    d[IDX_P:IDX_P + 3] = 1e-4
    d[IDX_V:IDX_V + 3] = 1e-2
    d[IDX_TH:IDX_TH + 3] = 1e-2
    d[IDX_BG:IDX_BG + 3] = 1e-6
    d[IDX_BA:IDX_BA + 3] = 1e-4
    d[IDX_G:IDX_G + 3] = 1e-4
    return np.diag(d)


def symmetrize(cov: np.ndarray, floor: float = COV_EIG_FLOOR) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    w, v = np.linalg.eigh(cov)
    if w.min() < floor:
        w = np.maximum(w, floor)
        cov = (v * w) @ v.T
        cov = 0.5 * (cov + cov.T)
    return cov


def predict(state: NominalState, cov: np.ndarray, imu: ImuSample, dt: float,
            noise: NoiseConfig):
    """Integrate the nominal state and propagate the covariance one IMU step.

    The sample's rates are applied over the whole step (callers feeding the
    midpoint of consecutive samples get second-order accuracy). Rejects
    dt <= 0 or dt > 0.1 s, which signals a log gap.
    """
    if dt <= 0.0 or dt > MAX_IMU_DT:
        raise ValueError(f"imu step dt={dt} outside (0, {MAX_IMU_DT}]")
    w_b = np.asarray(imu.w, dtype=float) - state.bg
    a_b = np.asarray(imu.a, dtype=float) - state.ba

    rot_half = state.rot * geom.exp_so3(0.5 * dt * w_b)
    a_w = rot_half.apply(a_b) + state.g
    new = state.copy()
    new.p = state.p + state.v * dt + 0.5 * a_w * dt * dt
    new.v = state.v + a_w * dt
    new.rot = state.rot * geom.exp_so3(dt * w_b)

    r = state.rot.matrix()
    f = np.eye(STATE_DIM)
    f[IDX_P:IDX_P + 3, IDX_V:IDX_V + 3] = np.eye(3) * dt
    f[IDX_V:IDX_V + 3, IDX_TH:IDX_TH + 3] = -r @ geom.hat(a_b) * dt
    f[IDX_V:IDX_V + 3, IDX_BA:IDX_BA + 3] = -r * dt
    f[IDX_V:IDX_V + 3, IDX_G:IDX_G + 3] = np.eye(3) * dt
    f[IDX_TH:IDX_TH + 3, IDX_TH:IDX_TH + 3] = geom.exp_so3(-w_b * dt).matrix()
    f[IDX_TH:IDX_TH + 3, IDX_BG:IDX_BG + 3] = -np.eye(3) * dt
    new_cov = f @ cov @ f.T + process_noise(noise, dt)
    return new, 0.5 * (new_cov + new_cov.T)


def inject(state: NominalState, dx: np.ndarray) -> NominalState:
    """Fold an error-state estimate into the nominal state (error resets to 0)."""
    out = state.copy()
    out.p = state.p + dx[IDX_P:IDX_P + 3]
    out.v = state.v + dx[IDX_V:IDX_V + 3]
    out.rot = state.rot * geom.exp_so3(dx[IDX_TH:IDX_TH + 3])
    out.bg = state.bg + dx[IDX_BG:IDX_BG + 3]
    out.ba = state.ba + dx[IDX_BA:IDX_BA + 3]
    out.g = state.g + dx[IDX_G:IDX_G + 3]
    return out


def eskf_update(state: NominalState, cov: np.ndarray, h: np.ndarray,
                residual: np.ndarray, v: np.ndarray):
    """Kalman update: gain from the innovation covariance, injection, reset.

    Raises numpy.linalg.LinAlgError when the innovation covariance is not
    invertible; callers treat that as a recorded fault and keep the state.
    """
    h = np.atleast_2d(np.asarray(h, dtype=float))
    residual = np.atleast_1d(np.asarray(residual, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    s = h @ cov @ h.T + v
    k = cov @ h.T @ np.linalg.inv(s)
    dx = k @ residual
    new_state = inject(state, dx)
    new_cov = (np.eye(STATE_DIM) - k @ h) @ cov
    return new_state, symmetrize(new_cov)


def dvl_observation(state: NominalState, sample: DvlSample,
                    calib: geom.CalibrationSet):
    """Velocity observation: measurement mapped to the IMU frame minus v."""
    z = calib.dvl_from_imu.inverse().apply(sample.v)
    h = np.zeros((3, STATE_DIM))
    h[:, IDX_V:IDX_V + 3] = np.eye(3)
    return h, z - state.v


def pressure_observation(state: NominalState, sample: PressureSample,
                         depth0: float, calib: geom.CalibrationSet):
    """Absolute position observation built from the depth measurement.

    Only the depth row carries information; the lateral rows are nulled by a
    huge configured variance.
    """
    p_ps = np.array([0.0, 0.0, sample.depth])
    p_0 = np.array([0.0, 0.0, depth0])
    z = calib.world_reference.inverse().apply(p_ps - p_0)
    h = np.zeros((3, STATE_DIM))
    h[:, IDX_P:IDX_P + 3] = np.eye(3)
    return h, z - state.p


def dr_observation(state: NominalState, dr: DrPose, calib: geom.CalibrationSet):
    """Dead-reckoning pose observation: direct observation of (dp, dtheta)."""
    r_id = calib.dvl_in_imu.rotation
    p_id = calib.dvl_in_imu.translation
    z_p = r_id.apply(dr.pose.translation) + p_id - state.p
    z_th = geom.log_so3(state.rot.inverse() * r_id * dr.pose.rotation)
    h = np.zeros((6, STATE_DIM))
    h[0:3, IDX_P:IDX_P + 3] = np.eye(3)
    h[3:6, IDX_TH:IDX_TH + 3] = np.eye(3)
    return h, np.concatenate([z_p, z_th])


def detect_outlier(window: np.ndarray, m: np.ndarray, xi: float) -> bool:
    """True iff m deviates from the window mean by more than xi window-sigmas.

    A zero-spread window rejects any deviating measurement (strict inequality
    on ||M - e|| > xi ||s||). Fewer than 2 samples never reject.
    """
    window = np.atleast_2d(np.asarray(window, dtype=float))
    if window.shape[0] < 2:
        return False
    e = window.mean(axis=0)
    s = window.std(axis=0)
    return bool(np.linalg.norm(np.atleast_1d(m) - e) > xi * np.linalg.norm(s))


class MeasurementWindow:
    """FIFO window backing the statistical outlier gate.

    The gate is fed innovations (measurement minus prediction), which stay
    zero-mean under vehicle dynamics; windowing raw measurements would reject
    every sample once the platform accelerates. Every sample enters the window
    whether or not it is accepted, so an isolated spike widens the statistic
    for one window span instead of freezing it.
    """

    def __init__(self, capacity: int = 20, xi: float = 3.0):
        self.capacity = capacity
        self.xi = xi
        self._data: list[np.ndarray] = []

    def accept(self, m) -> bool:
        m = np.atleast_1d(np.asarray(m, dtype=float))
        ok = not (self._data
                  and detect_outlier(np.vstack(self._data), m, self.xi))
        self._data.append(m)
        if len(self._data) > self.capacity:
            self._data.pop(0)
        return ok


class OdometryBuffer:
    """Time-indexed ring buffer of stamped poses with interpolation queries.

    Appends must be strictly increasing in time. Queries strictly interpolate;
    a gap between the bracketing samples larger than max_gap raises.
    """

    def __init__(self, capacity: int = 200000, max_gap: float = 0.05):
        self.capacity = capacity
        self.max_gap = max_gap
        self._t: list[float] = []
        self._poses: list[Pose] = []

    def __len__(self):
        return len(self._t)

    @property
    def t_first(self) -> float:
        if not self._t:
            raise LookupError("odometry buffer is empty")
        return self._t[0]

    @property
    def t_last(self) -> float:
        if not self._t:
            raise LookupError("odometry buffer is empty")
        return self._t[-1]

    def append(self, t: float, pose: Pose):
        if self._t and t <= self._t[-1]:
            raise ValueError(f"odometry timestamps must increase ({t} <= {self._t[-1]})")
        self._t.append(t)
        self._poses.append(pose)
        if len(self._t) > self.capacity:
            del self._t[0], self._poses[0]

    def query(self, t: float) -> Pose:
        if not self._t:
            raise LookupError("query before first odometry sample")
        i = bisect.bisect_left(self._t, t)
        if i < len(self._t) and self._t[i] == t:
            return self._poses[i]
        if i == 0 or i == len(self._t):
            raise LookupError(f"time {t} outside odometry span "
                              f"[{self._t[0]}, {self._t[-1]}]")
        if self._t[i] - self._t[i - 1] > self.max_gap:
            raise LookupError(f"odometry gap {self._t[i] - self._t[i-1]:.3f}s at t={t}")
        return geom.interpolate_pose(self._poses[i - 1], self._t[i - 1],
                                     self._poses[i], self._t[i], t)

    def covers(self, t0: float, t1: float) -> bool:
        try:
            self.query(t0)
            self.query(t1)
        except LookupError:
            return False
        return True

    def relative(self, t1: float, t2: float) -> Pose:
        """Motion from the pose at t1 to the pose at t2, in the t1 frame."""
        return self.query(t1).inverse().compose(self.query(t2))


@dataclass
class RelativeCovModel:
    """Linear-in-dt model for the uncertainty of a DP-INS relative pose.

    Differencing the filter's absolute covariances is not PSD-safe, so the
    consumers of relative constraints (fault gate, graph edges) use variance
    rates instead.
    """
    pos_rate: float = 4e-6   # m^2 per second
    rot_rate: float = 4e-7   # rad^2 per second
    floor: float = 1e-10

    def cov6(self, dt: float) -> np.ndarray:
        dt = abs(dt)
        d = np.empty(6)
        d[:3] = max(self.pos_rate * dt, self.floor)
        d[3:] = max(self.rot_rate * dt, self.floor)
        return np.diag(d)

    def sigmas(self, dt: float):
        c = self.cov6(dt)
        return math.sqrt(np.trace(c[:3, :3])), math.sqrt(np.trace(c[3:, 3:]))


@dataclass
class DpinsParams:
    output_decimation: int = 2        # 200 Hz IMU -> 100 Hz odometry out
    outlier_window: int = 20
    outlier_xi: float = 3.0
    init_stationary_time: float = 1.0
    use_dr: bool = True


class DpinsFilter:
    """Single-writer ESKF pipeline: feed time-ordered measurements, read the
    odometry buffer concurrently."""

    def __init__(self, noise: NoiseConfig, calib: geom.CalibrationSet,
                 params: DpinsParams | None = None,
                 rel_cov: RelativeCovModel | None = None):
        self.noise = noise.validate()
        self.calib = calib
        self.params = params or DpinsParams()
        self.rel_cov = rel_cov or RelativeCovModel()
        self.state: NominalState | None = None
        self.cov = default_initial_covariance()
        self.odometry = OdometryBuffer()
        self.depth0: float | None = None
        self.faults: list[dict] = []
        self._init_accum: list[ImuSample] = []
        self._init_mag: Rotation | None = None
        self._prev_imu: ImuSample | None = None
        self._imu_count = 0
        self._dvl_window = MeasurementWindow(self.params.outlier_window,
                                             self.params.outlier_xi)
        self._ps_window = MeasurementWindow(self.params.outlier_window,
                                            self.params.outlier_xi)
        self._dr_window = MeasurementWindow(self.params.outlier_window,
                                            self.params.outlier_xi)

    @property
    def initialized(self) -> bool:
        return self.state is not None

    def initialize_exact(self, t: float, state: NominalState, depth0: float = 0.0):
        """Test/benchmark entry point: start from a known state."""
        self.state = state.copy()
        self.depth0 = depth0
        self._prev_imu = None
        self.odometry.append(t, state.pose())

    def handle_imu(self, imu: ImuSample):
        if self.state is None:
            self._try_initialize(imu)
            return
        prev = self._prev_imu
        dt = imu.t - prev.t if prev is not None else None
        if prev is not None and dt is not None and 0.0 < dt <= MAX_IMU_DT:
            mid = ImuSample(imu.t, 0.5 * (prev.w + imu.w), 0.5 * (prev.a + imu.a))
            self.state, self.cov = predict(self.state, self.cov, mid, dt,
                                           self.noise)
            self._imu_count += 1
            if self._imu_count % self.params.output_decimation == 0:
                self.odometry.append(imu.t, self.state.pose())
        elif prev is not None:
            self.faults.append({"t": imu.t, "sensor": "imu", "reason": "gap"})
        self._prev_imu = imu

    def handle_mag(self, mag: MagSample):
        if self.state is None:
            self._init_mag = mag.rot

    def handle_dvl(self, sample: DvlSample):
        if self.state is None:
            return
        if not sample.valid:
            self.faults.append({"t": sample.t, "sensor": "dvl", "reason": "invalid"})
            return
        h, r = dvl_observation(self.state, sample, self.calib)
        if not self._dvl_window.accept(r):
            self.faults.append({"t": sample.t, "sensor": "dvl", "reason": "outlier"})
            return
        self._apply(h, r, np.eye(3) * self.noise.dvl_var, sample.t, "dvl")

    def handle_ps(self, sample: PressureSample):
        if self.state is None:
            return
        if self.depth0 is None:
            self.depth0 = sample.depth
        h, r = pressure_observation(self.state, sample, self.depth0, self.calib)
        # gate only the depth row; the lateral rows are model placeholders
        if not self._ps_window.accept([r[2]]):
            self.faults.append({"t": sample.t, "sensor": "ps", "reason": "outlier"})
            return
        v = np.diag([self.noise.ps_xy_var, self.noise.ps_xy_var, self.noise.ps_var])
        self._apply(h, r, v, sample.t, "ps")

    def handle_dr(self, dr: DrPose):
        if self.state is None or not self.params.use_dr:
            return
        h, r = dr_observation(self.state, dr, self.calib)
        if not self._dr_window.accept(r):
            self.faults.append({"t": dr.t, "sensor": "dr", "reason": "outlier"})
            return
        v = np.diag([self.noise.dr_pos_var] * 3 + [self.noise.dr_rot_var] * 3)
        self._apply(h, r, v, dr.t, "dr")

    def _apply(self, h, r, v, t, sensor):
        try:
            self.state, self.cov = eskf_update(self.state, self.cov, h, r, v)
        except np.linalg.LinAlgError:
            self.faults.append({"t": t, "sensor": sensor, "reason": "singular"})

    def _try_initialize(self, imu: ImuSample):
        self._init_accum.append(imu)
        span = self._init_accum[-1].t - self._init_accum[0].t
        if span < self.params.init_stationary_time:
            return
        a_mean = np.mean([s.a for s in self._init_accum], axis=0)
        w_mean = np.mean([s.w for s in self._init_accum], axis=0)
        # Specific force at rest: a = R^T (0, 0, -g). Level from it, yaw from mag.
        g = float(np.linalg.norm(a_mean))
        pitch = math.asin(max(-1.0, min(1.0, a_mean[0] / g)))
        roll = math.atan2(-a_mean[1], -a_mean[2])
        yaw = 0.0
        if self._init_mag is not None:
            # mounting convention: mag_from_imu * reading = body attitude
            mag_world = self.calib.mag_from_imu * self._init_mag
            m = mag_world.matrix()
            yaw = math.atan2(m[1, 0], m[0, 0])
        rot = (geom.exp_so3([0, 0, yaw]) * geom.exp_so3([0, pitch, 0])
               * geom.exp_so3([roll, 0, 0]))
        state = NominalState.at_rest(rot)
        state.g = np.array([0.0, 0.0, g])
        state.bg = w_mean.copy()  # stationary lead-in: rate reading is pure bias
        self.state = state
        self._prev_imu = imu
        self.odometry.append(imu.t, state.pose())

    def relative_pose(self, t1: float, t2: float):
        """Relative motion and its rate-model covariance over [t1, t2]."""
        return self.odometry.relative(t1, t2), self.rel_cov.cov6(t2 - t1)

"""Deterministic ground-truthed sensor simulator.

Trajectories are closed-form with exact velocity/acceleration/body-rate, so
noise-free sensor streams are analytically consistent with the ground truth.
All randomness flows from a single seed through per-stream child generators.

The world frame has z pointing down (depth grows with z); gravity is
(0, 0, +9.81). Vehicle attitude is yaw-only (heading-following), which keeps
the body rate an exact closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from . import geom
from .dpins import GRAVITY, DrPose, DvlSample, ImuSample, MagSample, PressureSample
from .geom import CalibrationSet, Pose, Rotation
from .logio import (CameraParams, FaultEvent, LogHeader, RateConfig, ScanRecord,
                    SensorLog, TrackFrame, TrackObs, TruthSample)

G_WORLD = np.array([0.0, 0.0, GRAVITY])


# ---------------------------------------------------------------------------
# motion profiles


def _smoothstep(x):
    """Quintic smoothstep: zero value/slope/curvature at 0, unit value at 1."""
    x = min(max(x, 0.0), 1.0)
    return x ** 3 * (10.0 - 15.0 * x + 6.0 * x * x)


def _smoothstep_d(x):
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return 30.0 * x ** 2 * (1.0 - x) ** 2


def _smoothstep_int(x):
    x = min(max(x, 0.0), 1.0)
    return 2.5 * x ** 4 - 3.0 * x ** 5 + x ** 6


class SpeedProfile:
    """Arc-length profile: rest until t_start, quintic ramp to cruise speed."""

    def __init__(self, speed: float, t_start: float, ramp: float = 2.0):
        self.speed = speed
        self.t_start = t_start
        self.ramp = max(ramp, 1e-6)

    def at(self, t: float):
        """(distance, speed, acceleration) along the path at time t."""
        if t <= self.t_start or self.speed == 0.0:
            return 0.0, 0.0, 0.0
        u = t - self.t_start
        if u < self.ramp:
            x = u / self.ramp
            return (self.speed * self.ramp * _smoothstep_int(x),
                    self.speed * _smoothstep(x),
                    self.speed * _smoothstep_d(x) / self.ramp)
        d0 = self.speed * self.ramp * 0.5
        return d0 + self.speed * (u - self.ramp), self.speed, 0.0


@dataclass
class TrajectorySpec:
    kind: str = "figure8"            # line | circle | figure8 | lawnmower | waypoints
    speed: float = 0.2               # m/s cruise
    duration: float = 60.0
    stationary_time: float = 2.0     # rest at start (filter initialization)
    ramp_time: float = 2.0
    extent: float = 1.0              # radius / half-size, meters
    depth_amplitude: float = 0.0     # sinusoidal depth riding on the path
    depth_wavelength: float = 4.0    # meters of path per depth cycle
    start: tuple = (0.0, 0.0, 0.0)
    waypoints: list = field(default_factory=list)
    lawnmower_rows: int = 4

    def to_dict(self):
        d = dict(self.__dict__)
        d["start"] = list(self.start)
        d["waypoints"] = [list(w) for w in self.waypoints]
        return d


class Trajectory:
    """Closed-form rigid-body motion: pose, world velocity/acceleration, and
    body angular rate, all exact."""

    def __init__(self, spec: TrajectorySpec):
        self.spec = spec
        self.profile = SpeedProfile(spec.speed, spec.stationary_time,
                                    spec.ramp_time)
        self._start = np.asarray(spec.start, dtype=float)
        kind = spec.kind
        if kind == "line":
            self._setup_line()
        elif kind == "circle":
            self._setup_circle()
        elif kind == "figure8":
            self._setup_figure8()
        elif kind in ("lawnmower", "waypoints"):
            self._setup_spline()
        else:
            raise ValueError(f"unknown trajectory kind {kind!r}")

    # Each _eval_* returns (xy position(2,), d/ds, d2/ds2) at arc length s,
    # plus heading and dheading/ds.

    def _setup_line(self):
        self._dir = np.array([1.0, 0.0])

    def _setup_circle(self):
        self._radius = max(self.spec.extent, 1e-3)

    def _setup_figure8(self):
        self._scale = max(self.spec.extent, 1e-3)

    def _setup_spline(self):
        if self.spec.kind == "lawnmower":
            wps = []
            w = self.spec.extent * 2.0
            rows = max(self.spec.lawnmower_rows, 2)
            pitch = w / (rows - 1)
            for i in range(rows):
                y = i * pitch
                xs = (0.0, w) if i % 2 == 0 else (w, 0.0)
                wps.append((xs[0], y))
                wps.append((xs[1], y))
            pts = np.asarray(wps, dtype=float)
        else:
            if len(self.spec.waypoints) < 2:
                raise ValueError("waypoints trajectory needs >= 2 waypoints")
            pts = np.asarray([w[:2] for w in self.spec.waypoints], dtype=float)
        chord = np.concatenate([[0.0], np.cumsum(
            np.linalg.norm(np.diff(pts, axis=0), axis=1))])
        if chord[-1] <= 0.0:
            raise ValueError("waypoints must span a nonzero path")
        self._spline = CubicSpline(chord, pts, bc_type="natural")
        self._spline_d1 = self._spline.derivative(1)
        self._spline_d2 = self._spline.derivative(2)
        self._spline_len = float(chord[-1])

    def _eval_path(self, s: float):
        kind = self.spec.kind
        if kind == "line":
            p = self._dir * s
            return p, self._dir, np.zeros(2)
        if kind == "circle":
            r = self._radius
            th = s / r
            p = np.array([r * math.sin(th), r * (1.0 - math.cos(th))])
            d1 = np.array([math.cos(th), math.sin(th)])
            d2 = np.array([-math.sin(th), math.cos(th)]) / r
            return p, d1, d2
        if kind == "figure8":
            a = self._scale
            phi = s / a
            p = np.array([a * math.sin(phi), 0.5 * a * math.sin(2.0 * phi)])
            d1 = np.array([math.cos(phi), math.cos(2.0 * phi)])
            d2 = np.array([-math.sin(phi), -2.0 * math.sin(2.0 * phi)]) / a
            return p, d1, d2
        # spline path, clamped to its length
        s = min(s, self._spline_len)
        return (self._spline(s), self._spline_d1(s), self._spline_d2(s))

    def _depth(self, s: float, sd: float, sdd: float):
        amp, lam = self.spec.depth_amplitude, self.spec.depth_wavelength
        if amp == 0.0:
            return 0.0, 0.0, 0.0
        k = 2.0 * math.pi / lam
        z = amp * math.sin(k * s)
        zd = amp * k * math.cos(k * s) * sd
        zdd = (-amp * k * k * math.sin(k * s) * sd * sd
               + amp * k * math.cos(k * s) * sdd)
        return z, zd, zdd

    def state(self, t: float):
        """(pose, v_world, a_world, omega_body) at time t."""
        s, sd, sdd = self.profile.at(t)
        p2, d1, d2 = self._eval_path(s)
        z, zd, zdd = self._depth(s, sd, sdd)
        pos = self._start + np.array([p2[0], p2[1], z])
        vel = np.array([d1[0] * sd, d1[1] * sd, zd])
        acc = np.array([d2[0] * sd * sd + d1[0] * sdd,
                        d2[1] * sd * sd + d1[1] * sdd, zdd])
        # yaw follows the planar heading; d1 never vanishes on these paths
        yaw = math.atan2(d1[1], d1[0])
        n1 = d1[0] * d1[0] + d1[1] * d1[1]
        dyaw_ds = (d1[0] * d2[1] - d1[1] * d2[0]) / n1
        yaw_rate = dyaw_ds * sd
        rot = geom.exp_so3([0.0, 0.0, yaw])
        omega_body = np.array([0.0, 0.0, yaw_rate])
        return Pose(rot, pos), vel, acc, omega_body

    def pose(self, t: float) -> Pose:
        return self.state(t)[0]


# ---------------------------------------------------------------------------
# scenes


class PlaneRect:
    """Bounded rectangle: anchor + u*au + v*av, |u| <= hu, |v| <= hv."""

    def __init__(self, anchor, normal, u_axis, half_u, half_v):
        self.anchor = np.asarray(anchor, dtype=float)
        n = np.asarray(normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        u = np.asarray(u_axis, dtype=float)
        u = u - (u @ self.normal) * self.normal
        self.u_axis = u / np.linalg.norm(u)
        self.v_axis = np.cross(self.normal, self.u_axis)
        self.half_u = half_u
        self.half_v = half_v

    def raycast_batch(self, origin, dirs):
        with np.errstate(divide="ignore", invalid="ignore"):
            denom = dirs @ self.normal
            t = ((self.anchor - origin) @ self.normal) / denom
            hit = origin + t[:, None] * dirs
            rel = hit - self.anchor
            ok = ((np.abs(denom) > 1e-12) & (t > 1e-6)
                  & (np.abs(rel @ self.u_axis) <= self.half_u)
                  & (np.abs(rel @ self.v_axis) <= self.half_v))
        return np.where(ok, t, np.inf)

    def distance(self, pts):
        return np.abs((np.atleast_2d(pts) - self.anchor) @ self.normal)

    def sample_points(self, n, rng):
        u = rng.uniform(-self.half_u, self.half_u, size=n)
        v = rng.uniform(-self.half_v, self.half_v, size=n)
        return self.anchor + u[:, None] * self.u_axis + v[:, None] * self.v_axis


class SphereSurf:
    def __init__(self, center, radius):
        self.center = np.asarray(center, dtype=float)
        self.radius = radius

    def raycast_batch(self, origin, dirs):
        oc = origin - self.center
        b = dirs @ oc
        c = oc @ oc - self.radius ** 2
        disc = b * b - c
        t = np.full(dirs.shape[0], np.inf)
        ok = disc >= 0.0
        sq = np.sqrt(np.maximum(disc, 0.0))
        t1 = -b - sq
        t2 = -b + sq
        cand = np.where(t1 > 1e-6, t1, np.where(t2 > 1e-6, t2, np.inf))
        t[ok] = cand[ok]
        return t

    def distance(self, pts):
        return np.abs(np.linalg.norm(np.atleast_2d(pts) - self.center, axis=1)
                      - self.radius)

    def sample_points(self, n, rng):
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return self.center + self.radius * d


def room_box(lo, hi):
    """Interior of an axis-aligned box as six bounded wall rectangles."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    c = 0.5 * (lo + hi)
    h = 0.5 * (hi - lo)
    walls = []
    axes = np.eye(3)
    for k in range(3):
        u = axes[(k + 1) % 3]
        hu, hv = h[(k + 1) % 3], h[(k + 2) % 3]
        for sign in (-1.0, 1.0):
            anchor = c.copy()
            anchor[k] = lo[k] if sign < 0 else hi[k]
            walls.append(PlaneRect(anchor, sign * axes[k], u, hu, hv))
    return walls


@dataclass
class SceneSpec:
    surfaces: list = field(default_factory=list)
    landmarks: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    name: str = ""

    def raycast_batch(self, origin, dirs):
        best = np.full(dirs.shape[0], np.inf)
        for s in self.surfaces:
            best = np.minimum(best, s.raycast_batch(origin, dirs))
        return best

    def distance(self, pts):
        pts = np.atleast_2d(pts)
        best = np.full(pts.shape[0], np.inf)
        for s in self.surfaces:
            best = np.minimum(best, s.distance(pts))
        return best

    def scatter_landmarks(self, n, rng):
        """Place landmarks on the scene surfaces (round-robin)."""
        if not self.surfaces:
            self.landmarks = np.zeros((0, 3))
            return self
        per = [n // len(self.surfaces)] * len(self.surfaces)
        per[0] += n - sum(per)
        pts = [s.sample_points(k, rng) for s, k in zip(self.surfaces, per) if k]
        self.landmarks = np.vstack(pts) if pts else np.zeros((0, 3))
        return self


def pool_scene(size=(6.0, 5.0, 3.0), origin=(-2.0, -2.0, -1.0),
               n_landmarks=120, seed=7) -> SceneSpec:
    """Default test scene: a box pool interior with wall landmarks."""
    lo = np.asarray(origin, dtype=float)
    hi = lo + np.asarray(size, dtype=float)
    scene = SceneSpec(surfaces=room_box(lo, hi), name="pool")
    scene.scatter_landmarks(n_landmarks, np.random.default_rng(seed))
    return scene


def default_rig() -> CalibrationSet:
    """Sensor rig with the camera and scanner looking along body x.

    The world frame is z-down, so identity optics would stare at the floor;
    this maps optical z (forward) to body x, optical x (right) to body y,
    optical y (down) to body z.
    """
    forward = Rotation.from_matrix(np.array([
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
    ]))
    return CalibrationSet(
        cam_in_body=Pose(forward, np.array([0.1, 0.0, 0.0])),
        scanner_in_body=Pose(forward, np.array([0.15, 0.0, 0.05])),
    )


# ---------------------------------------------------------------------------
# sensor noise


@dataclass
class SimNoise:
    """Magnitudes of the noise added by the simulator (zero = ideal sensors)."""
    gyro: float = 0.0           # rad/s white, per sample
    accel: float = 0.0          # m/s^2 white, per sample
    gyro_bias0: float = 0.0     # rad/s constant offset scale
    accel_bias0: float = 0.0    # m/s^2 constant offset scale
    gyro_walk: float = 0.0      # rad/s per sqrt(s)
    accel_walk: float = 0.0     # m/s^2 per sqrt(s)
    dvl: float = 0.0            # m/s per axis
    ps: float = 0.0             # m depth
    mag: float = 0.0            # rad per axis
    dr_pos: float = 0.0         # m per axis
    dr_rot: float = 0.0         # rad per axis
    scan: float = 0.0           # m per point axis
    pixel: float = 0.0          # px
    depth_meas: float = 0.0     # m on track depths
    track_outlier_rate: float = 0.0
    depth_fraction: float = 0.4  # fraction of tracked features with depth

    @staticmethod
    def zero() -> "SimNoise":
        return SimNoise()

    @staticmethod
    def realistic() -> "SimNoise":
        """Noise scales in line with the sensor-grade the platform carries."""
        return SimNoise(gyro=2e-3, accel=2e-2, gyro_bias0=2e-3,
                        accel_bias0=1e-2, gyro_walk=1e-5, accel_walk=1e-4,
                        dvl=5e-3, ps=2e-3, mag=5e-3, dr_pos=1e-2, dr_rot=5e-3,
                        scan=2e-3, pixel=0.5, depth_meas=0.02,
                        track_outlier_rate=0.01)

    def to_dict(self):
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d):
        return SimNoise(**d)


@dataclass
class FaultSpec:
    """Per-stream dropout windows and tagged outlier spikes."""
    dropouts: dict = field(default_factory=dict)   # stream -> [(t0, t1)]
    spikes: list = field(default_factory=list)     # (stream, t, magnitude)

    def empty(self) -> bool:
        return not self.dropouts and not self.spikes


# ---------------------------------------------------------------------------
# generation


def _grid(rate: float, duration: float):
    n = int(math.floor(duration * rate))
    return (np.arange(n + 1) / rate)


def generate(traj_spec: TrajectorySpec, scene: SceneSpec,
             noise: SimNoise | None = None,
             rates: RateConfig | None = None,
             calib: CalibrationSet | None = None,
             camera: CameraParams | None = None,
             faults: FaultSpec | None = None,
             seed: int = 0,
             points_per_scan: int = 512,
             depth_offset: float = 5.0,
             truth_rate: float = 50.0) -> SensorLog:
    """Sample every sensor stream along the trajectory. Deterministic in seed."""
    noise = noise or SimNoise.zero()
    rates = (rates or RateConfig()).validate()
    calib = calib or CalibrationSet()
    camera = camera or CameraParams()
    traj = Trajectory(traj_spec)
    duration = traj_spec.duration

    streams = ("imu", "dvl", "ps", "mag", "dr", "scan", "tracks", "faults")
    seeds = np.random.SeedSequence(seed).spawn(len(streams))
    rngs = {name: np.random.default_rng(s) for name, s in zip(streams, seeds)}

    log = SensorLog(header=LogHeader(
        seed=seed, duration=duration, rates=rates, calibration=calib,
        noise=noise.to_dict(), camera=camera, points_per_scan=points_per_scan,
        meta={"trajectory": traj_spec.to_dict(), "scene": scene.name,
              "depth_offset": depth_offset}))

    _gen_imu(log, traj, rates, noise, rngs["imu"], duration)
    _gen_dvl(log, traj, rates, noise, calib, rngs["dvl"], duration)
    _gen_ps(log, traj, rates, noise, rngs["ps"], duration, depth_offset)
    _gen_mag(log, traj, rates, noise, calib, rngs["mag"], duration)
    _gen_dr(log, traj, rates, noise, calib, rngs["dr"], duration)
    _gen_scans(log, traj, scene, rates, noise, calib, rngs["scan"], duration,
               points_per_scan)
    _gen_tracks(log, traj, scene, rates, noise, calib, camera,
                rngs["tracks"], duration)
    for t in _grid(truth_rate, duration):
        pose, v, _, _ = traj.state(t)
        log.truth.append(TruthSample(t, pose, v))

    if faults is not None and not faults.empty():
        inject_faults(log, faults, rng=rngs["faults"])
    return log


def _gen_imu(log, traj, rates, noise, rng, duration):
    dt = 1.0 / rates.imu
    bg = rng.normal(size=3) * noise.gyro_bias0
    ba = rng.normal(size=3) * noise.accel_bias0
    for t in _grid(rates.imu, duration):
        pose, _, acc, omega = traj.state(t)
        bg = bg + rng.normal(size=3) * noise.gyro_walk * math.sqrt(dt)
        ba = ba + rng.normal(size=3) * noise.accel_walk * math.sqrt(dt)
        a_body = pose.rotation.inverse().apply(acc - G_WORLD)
        w = omega + bg + rng.normal(size=3) * noise.gyro
        a = a_body + ba + rng.normal(size=3) * noise.accel
        log.imu.append(ImuSample(float(t), w, a))


def _gen_dvl(log, traj, rates, noise, calib, rng, duration):
    for t in _grid(rates.dvl, duration):
        _, v, _, _ = traj.state(t)
        meas = calib.dvl_from_imu.apply(v) + rng.normal(size=3) * noise.dvl
        log.dvl.append(DvlSample(float(t), meas, True))


def _gen_ps(log, traj, rates, noise, rng, duration, depth_offset):
    for t in _grid(rates.ps, duration):
        pose = traj.pose(t)
        depth = depth_offset + pose.translation[2] + rng.normal() * noise.ps
        log.ps.append(PressureSample(float(t), float(depth)))


def _gen_mag(log, traj, rates, noise, calib, rng, duration):
    for t in _grid(rates.mag, duration):
        pose = traj.pose(t)
        reading = calib.mag_from_imu.inverse() * pose.rotation
        if noise.mag:
            reading = reading * geom.exp_so3(rng.normal(size=3) * noise.mag)
        log.mag.append(MagSample(float(t), reading))


def _gen_dr(log, traj, rates, noise, calib, rng, duration):
    t_id_inv = calib.dvl_in_imu.inverse()
    for t in _grid(rates.dr, duration):
        pose = traj.pose(t)
        dr = t_id_inv.compose(pose)
        if noise.dr_pos or noise.dr_rot:
            dr = Pose(dr.rotation * geom.exp_so3(rng.normal(size=3) * noise.dr_rot),
                      dr.translation + rng.normal(size=3) * noise.dr_pos)
        log.dr.append(DrPose(float(t), dr))


def _scan_directions(n_points, fan_angle_deg, mirror_angle_rad):
    """Fan of rays in the sensor frame (z forward, fan spread along x),
    pivoted about the x axis by the mirror angle."""
    alphas = np.linspace(-0.5, 0.5, n_points) * math.radians(fan_angle_deg)
    dirs = np.column_stack([np.sin(alphas), np.zeros(n_points), np.cos(alphas)])
    cm, sm = math.cos(mirror_angle_rad), math.sin(mirror_angle_rad)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cm, -sm], [0.0, sm, cm]])
    return dirs @ rx.T


def _gen_scans(log, traj, scene, rates, noise, calib, rng, duration,
               points_per_scan, fan_angle_deg=35.0, mirror_half_deg=45.0):
    if not scene.surfaces:
        return
    per_sweep = max(int(round(rates.scan / rates.sweep)), 1)
    t_sb = calib.scanner_in_body
    misses = 0
    for i, t in enumerate(_grid(rates.scan, duration)):
        step = i % per_sweep
        sweep_id = i // per_sweep
        mirror = math.radians(mirror_half_deg) * (2.0 * step / max(per_sweep - 1, 1) - 1.0)
        dirs_s = _scan_directions(points_per_scan, fan_angle_deg, mirror)
        t_ws = traj.pose(t).compose(t_sb)
        origin = t_ws.translation
        dirs_w = dirs_s @ t_ws.rotation.matrix().T
        rng_hits = scene.raycast_batch(origin, dirs_w)
        ok = np.isfinite(rng_hits)
        if not ok.any():
            misses += 1
            continue
        pts_sensor = dirs_s[ok] * rng_hits[ok, None]
        if noise.scan:
            pts_sensor = pts_sensor + rng.normal(size=pts_sensor.shape) * noise.scan
        log.scan.append(ScanRecord(float(t), step, sweep_id, pts_sensor))
    if misses:
        log.header.meta["scan_miss_warnings"] = misses


def _gen_tracks(log, traj, scene, rates, noise, calib, camera, rng, duration,
                max_range=8.0):
    if scene.landmarks.shape[0] == 0:
        return
    t_bc = calib.cam_in_body
    baseline = np.array([camera.baseline, 0.0, 0.0])
    for t in _grid(rates.stereo, duration):
        t_wc = traj.pose(t).compose(t_bc)
        t_cw = t_wc.inverse()
        p_cam = t_cw.apply(scene.landmarks)
        z = p_cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = camera.fx * p_cam[:, 0] / z + camera.cx
            v = camera.fy * p_cam[:, 1] / z + camera.cy
            ur = camera.fx * (p_cam[:, 0] - baseline[0]) / z + camera.cx
        vis = ((z > 0.2) & (z < max_range)
               & (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
               & (ur >= 0) & (ur < camera.width))
        ids = np.nonzero(vis)[0]
        if ids.size == 0:
            continue
        obs = []
        for fid in ids:
            ul = u[fid] + rng.normal() * noise.pixel
            vl = v[fid] + rng.normal() * noise.pixel
            uri = ur[fid] + rng.normal() * noise.pixel
            vri = v[fid] + rng.normal() * noise.pixel
            depth = None
            if rng.uniform() < noise.depth_fraction:
                depth = float(z[fid] + rng.normal() * noise.depth_meas)
            if noise.track_outlier_rate and rng.uniform() < noise.track_outlier_rate:
                ul += rng.uniform(20.0, 80.0) * (1 if rng.uniform() < 0.5 else -1)
                vl += rng.uniform(20.0, 80.0) * (1 if rng.uniform() < 0.5 else -1)
                log.fault_truth.append(FaultEvent(float(t), "tracks", "outlier"))
            obs.append(TrackObs(int(fid), float(ul), float(vl), float(uri),
                                float(vri), depth))
        log.tracks.append(TrackFrame(float(t), obs))


# ---------------------------------------------------------------------------
# fault injection


def inject_faults(log: SensorLog, spec: FaultSpec, seed: int = 0,
                  rng=None) -> SensorLog:
    """Apply dropout windows (records removed) and tagged spikes in place."""
    rng = rng if rng is not None else np.random.default_rng(seed)
    for stream, windows in spec.dropouts.items():
        records = log.stream(stream)
        kept = []
        for rec in records:
            inside = any(t0 <= rec.t <= t1 for t0, t1 in windows)
            if inside:
                kind = "blackout" if stream == "tracks" else "dropout"
                log.fault_truth.append(FaultEvent(rec.t, stream, kind))
            else:
                kept.append(rec)
        records[:] = kept
    for stream, t_spike, magnitude in spec.spikes:
        records = log.stream(stream)
        if not records:
            continue
        idx = int(np.argmin([abs(r.t - t_spike) for r in records]))
        rec = records[idx]
        if stream == "ps":
            rec.depth += magnitude * max(log.header.noise.get("ps", 0.0), 0.01)
        elif stream == "dvl":
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            rec.v = rec.v + d * magnitude * max(log.header.noise.get("dvl", 0.0), 0.02)
        else:
            raise ValueError(f"spike injection not supported for stream {stream!r}")
        log.fault_truth.append(FaultEvent(rec.t, stream, "spike"))
    log.fault_truth.sort(key=lambda e: e.t)
    return log

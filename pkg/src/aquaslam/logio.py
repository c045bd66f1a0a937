"""SensorLog: the timestamped multi-stream dataset format shared by the
simulator and the replay pipeline.

On disk it is JSON-lines: the first line is a header record carrying
calibration, noise, and rate metadata; every following line is one record
with a "type" discriminator. Streams are time-sorted; iteration k-way merges
them into global time order with a fixed stream priority breaking timestamp
ties, so replays are deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .dpins import DrPose, DvlSample, ImuSample, MagSample, PressureSample
from .geom import CalibrationSet, Pose, Rotation


class LogFormatError(ValueError):
    pass


# Merge priority also defines the update order for same-timestamp records.
STREAM_ORDER = ("imu", "dvl", "ps", "mag", "dr", "scan", "tracks", "truth")


@dataclass
class RateConfig:
    imu: float = 200.0
    dvl: float = 12.0
    ps: float = 60.0
    mag: float = 20.0
    dr: float = 4.5
    scan: float = 70.0
    sweep: float = 2.0
    stereo: float = 30.0

    def validate(self):
        for name, value in self.__dict__.items():
            if not (value > 0.0 and np.isfinite(value)):
                raise ValueError(f"rates.{name} must be a positive frequency")
        if self.scan < self.sweep:
            raise ValueError("rates.scan must be at least rates.sweep")
        return self

    def to_dict(self):
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d):
        return RateConfig(**d)


@dataclass
class CameraParams:
    fx: float = 380.0
    fy: float = 380.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    baseline: float = 0.06

    def to_dict(self):
        return dict(self.__dict__)

    @staticmethod
    def from_dict(d):
        return CameraParams(**d)


@dataclass
class LogHeader:
    seed: int = 0
    duration: float = 0.0
    rates: RateConfig = field(default_factory=RateConfig)
    calibration: CalibrationSet = field(default_factory=CalibrationSet)
    noise: dict = field(default_factory=dict)   # simulator noise description
    camera: CameraParams = field(default_factory=CameraParams)
    points_per_scan: int = 512
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "type": "header",
            "version": 1,
            "seed": self.seed,
            "duration": self.duration,
            "rates": self.rates.to_dict(),
            "calibration": self.calibration.to_dict(),
            "noise": self.noise,
            "camera": self.camera.to_dict(),
            "points_per_scan": self.points_per_scan,
            "meta": self.meta,
        }

    @staticmethod
    def from_dict(d):
        return LogHeader(
            seed=d["seed"],
            duration=d["duration"],
            rates=RateConfig.from_dict(d["rates"]),
            calibration=CalibrationSet.from_dict(d["calibration"]),
            noise=d.get("noise", {}),
            camera=CameraParams.from_dict(d["camera"]),
            points_per_scan=d.get("points_per_scan", 512),
            meta=d.get("meta", {}),
        )


@dataclass
class ScanRecord:
    t: float
    mirror_step: int          # index of this line within its sweep
    sweep_id: int
    points: np.ndarray        # (n, 3), sensor frame


@dataclass
class TrackObs:
    feature_id: int
    u_l: float
    v_l: float
    u_r: float | None = None
    v_r: float | None = None
    depth: float | None = None


@dataclass
class TrackFrame:
    t: float
    obs: list[TrackObs]


@dataclass
class TruthSample:
    t: float
    pose: Pose
    v: np.ndarray


@dataclass
class FaultEvent:
    t: float
    stream: str
    kind: str                  # dropout | spike | blackout


@dataclass
class SensorLog:
    header: LogHeader
    imu: list = field(default_factory=list)
    dvl: list = field(default_factory=list)
    ps: list = field(default_factory=list)
    mag: list = field(default_factory=list)
    dr: list = field(default_factory=list)
    scan: list = field(default_factory=list)
    tracks: list = field(default_factory=list)
    truth: list = field(default_factory=list)
    fault_truth: list = field(default_factory=list)

    def stream(self, name):
        return getattr(self, name)

    def iter_merged(self):
        """Yield (stream_name, record) in global time order.

        Ties broken by STREAM_ORDER so replay order is reproducible.
        """
        streams = [(prio, name, self.stream(name))
                   for prio, name in enumerate(STREAM_ORDER)]
        cursors = [0] * len(streams)
        while True:
            best = None
            for i, (prio, name, records) in enumerate(streams):
                if cursors[i] >= len(records):
                    continue
                rec = records[cursors[i]]
                key = (rec.t, prio)
                if best is None or key < best[0]:
                    best = (key, i, name, rec)
            if best is None:
                return
            _, i, name, rec = best
            cursors[i] += 1
            yield name, rec

    def validate_monotone(self):
        for name in STREAM_ORDER:
            ts = [r.t for r in self.stream(name)]
            for a, b in zip(ts, ts[1:]):
                if b <= a:
                    raise LogFormatError(
                        f"stream {name}: non-monotone timestamp {b} after {a}")


def _vec(v):
    return [float(x) for x in v]


def _record_to_dict(name, rec):
    if name == "imu":
        return {"type": "imu", "t": rec.t, "w": _vec(rec.w), "a": _vec(rec.a)}
    if name == "dvl":
        return {"type": "dvl", "t": rec.t, "v": _vec(rec.v), "valid": rec.valid}
    if name == "ps":
        return {"type": "ps", "t": rec.t, "depth": rec.depth}
    if name == "mag":
        return {"type": "mag", "t": rec.t, "q": _vec(rec.rot.q)}
    if name == "dr":
        return {"type": "dr", "t": rec.t, "q": _vec(rec.pose.rotation.q),
                "p": _vec(rec.pose.translation)}
    if name == "scan":
        return {"type": "scan", "t": rec.t, "mirror_step": rec.mirror_step,
                "sweep_id": rec.sweep_id,
                "points": [_vec(p) for p in rec.points]}
    if name == "tracks":
        return {"type": "tracks", "t": rec.t,
                "obs": [[o.feature_id, o.u_l, o.v_l, o.u_r, o.v_r, o.depth]
                        for o in rec.obs]}
    if name == "truth":
        return {"type": "truth", "t": rec.t, "q": _vec(rec.pose.rotation.q),
                "p": _vec(rec.pose.translation), "v": _vec(rec.v)}
    raise LogFormatError(f"unknown stream {name}")


def _record_from_dict(d):
    kind = d["type"]
    if kind == "imu":
        return kind, ImuSample(d["t"], np.asarray(d["w"]), np.asarray(d["a"]))
    if kind == "dvl":
        return kind, DvlSample(d["t"], np.asarray(d["v"]), d["valid"])
    if kind == "ps":
        return kind, PressureSample(d["t"], d["depth"])
    if kind == "mag":
        return kind, MagSample(d["t"], Rotation(d["q"]))
    if kind == "dr":
        return kind, DrPose(d["t"], Pose(Rotation(d["q"]), d["p"]))
    if kind == "scan":
        return kind, ScanRecord(d["t"], d["mirror_step"], d["sweep_id"],
                                np.asarray(d["points"], dtype=float).reshape(-1, 3))
    if kind == "tracks":
        return kind, TrackFrame(d["t"], [TrackObs(int(o[0]), o[1], o[2], o[3],
                                                  o[4], o[5]) for o in d["obs"]])
    if kind == "truth":
        return kind, TruthSample(d["t"], Pose(Rotation(d["q"]), d["p"]),
                                 np.asarray(d["v"]))
    if kind == "fault_truth":
        return kind, FaultEvent(d["t"], d["stream"], d["kind"])
    raise LogFormatError(f"unknown record type {kind!r}")


def write_log(log: SensorLog, path):
    log.validate_monotone()
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(log.header.to_dict()) + "\n")
        for name, rec in log.iter_merged():
            f.write(json.dumps(_record_to_dict(name, rec)) + "\n")
        for ev in log.fault_truth:
            f.write(json.dumps({"type": "fault_truth", "t": ev.t,
                                "stream": ev.stream, "kind": ev.kind}) + "\n")


def read_log(path) -> SensorLog:
    with open(path, "r", encoding="utf-8") as f:
        first = f.readline()
        if not first.strip():
            raise LogFormatError(f"{path}: empty log file")
        try:
            head = json.loads(first)
        except json.JSONDecodeError as exc:
            raise LogFormatError(f"{path}: line 1: malformed header: {exc}") from exc
        if head.get("type") != "header":
            raise LogFormatError(f"{path}: line 1: first record must be the header")
        log = SensorLog(header=LogHeader.from_dict(head))
        for lineno, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as exc:
                stream = _guess_stream(line)
                raise LogFormatError(
                    f"{path}: line {lineno}: truncated or malformed "
                    f"{stream} record: {exc}") from exc
            try:
                kind, rec = _record_from_dict(d)
            except (KeyError, TypeError) as exc:
                raise LogFormatError(
                    f"{path}: line {lineno}: bad record fields: {exc}") from exc
            if kind == "fault_truth":
                log.fault_truth.append(rec)
            else:
                log.stream(kind).append(rec)
    log.validate_monotone()
    return log


def _guess_stream(line: str) -> str:
    marker = '"type": "'
    i = line.find(marker)
    if i < 0:
        marker = '"type":"'
        i = line.find(marker)
    if i < 0:
        return "unknown"
    rest = line[i + len(marker):]
    j = rest.find('"')
    return rest[:j] if j > 0 else "unknown"


def write_tum(path, records):
    """TUM trajectory lines: t px py pz qx qy qz qw."""
    with open(path, "w", encoding="ascii") as f:
        for t, pose in records:
            p = pose.translation
            w, x, y, z = pose.rotation.q
            f.write(f"{t:.6f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                    f"{x:.9f} {y:.9f} {z:.9f} {w:.9f}\n")


def read_tum(path):
    """Returns (t[N], positions[N,3], quaternions wxyz[N,4])."""
    ts, ps, qs = [], [], []
    with open(path, "r", encoding="ascii") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise LogFormatError(
                    f"{path}: line {lineno}: expected 8 fields, got {len(parts)}")
            vals = [float(x) for x in parts]
            ts.append(vals[0])
            ps.append(vals[1:4])
            qs.append([vals[7], vals[4], vals[5], vals[6]])
    return np.asarray(ts), np.asarray(ps).reshape(-1, 3), np.asarray(qs).reshape(-1, 4)

"""Subsystem fault detection: decides whether each structured-light or stereo
relative constraint is admitted to the back-end graph.

Thresholds adapt to the filter odometry's uncertainty over the constraint
interval: tau_t = k_t * sigma_t, tau_R = k_R * sigma_R. Geometry checks flag
structurally degenerate registrations (too few matched points or a planar
eigenvalue profile); visual checks score tracking quality from the tracking
rate and flow consistency.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import geom
from .geom import Pose


@dataclass
class FaultParams:
    k_t: float = 2.0              # translation threshold multiplier
    k_r: float = 4.0              # rotation threshold multiplier
    n_thresh: int = 20            # min matched points
    eps_planarity: float = 1e-2   # lambda_3 / lambda_1 floor
    q_thresh: float = 0.3         # min visual quality
    use_hessian_eigs: bool = False  # degeneracy from the GN Hessian instead
                                    # of the matched-point PCA

    def validate(self):
        if not (0.0 < self.q_thresh < 1.0):
            raise ValueError("q_thresh must lie in (0, 1)")
        for name in ("k_t", "k_r", "eps_planarity"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be positive")
        if self.n_thresh <= 0:
            raise ValueError("n_thresh must be positive")
        return self


@dataclass
class TrackStats:
    n_tracked: int
    n_total: int
    sigma_flow: float
    max_flow: float


@dataclass
class FaultFlag:
    faulted: bool
    criteria: list = field(default_factory=list)
    details: dict = field(default_factory=dict)

    def __bool__(self):
        return self.faulted


def pose_discrepancy(rel_a: Pose, rel_b: Pose):
    """(translation gap, rotation gap) between two relative poses."""
    dt = float(np.linalg.norm(rel_a.translation - rel_b.translation))
    dr = float(np.linalg.norm(geom.log_so3(
        rel_a.rotation.inverse() * rel_b.rotation)))
    return dt, dr


def ubsl_fault_check(rel_meas: Pose, rel_ins: Pose, reg_stats,
                     sigma_t: float, sigma_r: float,
                     params: FaultParams) -> FaultFlag:
    """Consistency + structure gate for a registration constraint.

    Faults when the constraint deviates from the filter's relative motion
    beyond the adaptive thresholds, or when the matched geometry is
    structurally unreliable.
    """
    dt, dr = pose_discrepancy(rel_meas, rel_ins)
    tau_t = params.k_t * sigma_t
    tau_r = params.k_r * sigma_r
    criteria = []
    if dt > tau_t:
        criteria.append("translation_gap")
    if dr > tau_r:
        criteria.append("rotation_gap")
    structure_bad = False
    n_matched = getattr(reg_stats, "n_matched", 0)
    if n_matched < params.n_thresh:
        structure_bad = True
        criteria.append("too_few_matches")
    eigs = _structure_eigs(reg_stats, params)
    if eigs is not None and eigs[0] > 0:
        ratio = eigs[-1] / eigs[0]
        if ratio < params.eps_planarity:
            structure_bad = True
            criteria.append("planar_structure")
    faulted = bool(criteria) or structure_bad
    return FaultFlag(faulted, criteria, {
        "dt": dt, "dr": dr, "tau_t": tau_t, "tau_r": tau_r,
        "n_matched": n_matched})


def _structure_eigs(reg_stats, params: FaultParams):
    if params.use_hessian_eigs:
        eigs = getattr(reg_stats, "hessian_eigvals", None)
        if eigs is None:
            return None
        return np.sort(np.asarray(eigs))[::-1]
    eigs = getattr(reg_stats, "matched_pca_eigvals", None)
    if eigs is None:
        return None
    return np.sort(np.asarray(eigs))[::-1]


def track_quality(stats: TrackStats) -> float:
    """Tracking rate times flow consistency, in [0, 1]."""
    if stats.n_total <= 0:
        return 0.0
    rate = stats.n_tracked / stats.n_total
    consistency = 1.0 - stats.sigma_flow / max(stats.max_flow, 1e-12)
    return max(0.0, min(1.0, rate * consistency))


def stereo_fault_check(rel_meas: Pose, rel_ins: Pose, stats: TrackStats,
                       sigma_t: float, sigma_r: float,
                       params: FaultParams) -> FaultFlag:
    """Visual-quality + consistency gate for a stereo constraint."""
    criteria = []
    if stats.n_total <= 0:
        return FaultFlag(True, ["no_features"], {"q_track": 0.0})
    q = track_quality(stats)
    r_t, r_r = pose_discrepancy(rel_meas, rel_ins)
    tau_t = params.k_t * sigma_t
    tau_r = params.k_r * sigma_r
    if q < params.q_thresh:
        criteria.append("low_track_quality")
    if r_t > tau_t:
        criteria.append("translation_gap")
    if r_r > tau_r:
        criteria.append("rotation_gap")
    return FaultFlag(bool(criteria), criteria, {
        "q_track": q, "r_t": r_t, "r_r": r_r, "tau_t": tau_t, "tau_r": tau_r})


class FaultAudit:
    """JSON-lines audit of fault events; optionally backed by a file."""

    def __init__(self, path=None):
        self.path = path
        self.events: list[dict] = []
        self._fh = open(path, "w", encoding="utf-8") if path else None

    def record(self, t: float, subsystem: str, criteria, details=None):
        event = {"t": t, "subsystem": subsystem,
                 "criteria": list(criteria)}
        if details:
            event["details"] = {k: _plain(v) for k, v in details.items()}
        self.events.append(event)
        if self._fh:
            self._fh.write(json.dumps(event) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, float) and not math.isfinite(v):
        return str(v)
    return v

"""Voxelized normal-distributions registration with incremental Gaussian
merging and degeneracy diagnostics.

Voxels keep raw population statistics (mean, covariance, count) so that
incremental merging is exactly equivalent to batch recomputation; covariance
conditioning (eigenvalue flooring) is applied only when a voxel is used in a
residual.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geom
from .geom import Pose


class RegistrationError(RuntimeError):
    """Raised when fewer points match the map than min_matches."""


@dataclass
class NdtParams:
    resolution: float = 0.5          # m
    capacity: int = 20000            # max voxel count, oldest evicted
    min_points: int = 6              # voxels below this are mean-only
    min_matches: int = 20
    max_iterations: int = 30
    step_tol: float = 1e-6
    max_halvings: int = 8
    cov_rel_floor: float = 1e-3      # eigenvalues floored at rel_floor * max
    cov_abs_floor: float = 1e-6      # m^2, floor for fully degenerate voxels
    degeneracy_ratio: float = 1e-2   # hessian lambda_min/lambda_max flag


@dataclass
class PointCloud:
    points: np.ndarray                # (N, 3)
    frame: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.points.size and not np.isfinite(self.points).all():
            raise ValueError("point cloud contains non-finite points")

    def __len__(self):
        return self.points.shape[0]

    def transform(self, pose: Pose, frame: str = "") -> "PointCloud":
        return PointCloud(pose.apply(self.points), frame or self.frame)


@dataclass
class NdtVoxel:
    mu: np.ndarray                    # (3,) mean
    sigma: np.ndarray                 # (3, 3) raw population covariance
    m: int                            # point count, >= 1

    def conditioned_sigma(self, rel_floor: float, abs_floor: float) -> np.ndarray:
        w, v = np.linalg.eigh(0.5 * (self.sigma + self.sigma.T))
        floor = max(rel_floor * max(w.max(), 0.0), abs_floor)
        w = np.maximum(w, floor)
        return (v * w) @ v.T


def voxel_stats(points: np.ndarray) -> NdtVoxel:
    """Population mean/covariance of a point set (divide-by-m convention)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    m = points.shape[0]
    mu = points.mean(axis=0)
    d = points - mu
    sigma = d.T @ d / m
    return NdtVoxel(mu=mu, sigma=sigma, m=m)


def merge_voxel(hist: NdtVoxel | None, add: NdtVoxel | None) -> NdtVoxel:
    """Exact pooled mean/covariance of two point sets from their statistics.

    Merging with an empty side returns the other side unchanged.
    """
    if add is None or add.m == 0:
        if hist is None:
            raise ValueError("cannot merge two empty voxels")
        return NdtVoxel(hist.mu.copy(), hist.sigma.copy(), hist.m)
    if hist is None or hist.m == 0:
        return NdtVoxel(add.mu.copy(), add.sigma.copy(), add.m)
    m, n = hist.m, add.m
    mu = (m * hist.mu + n * add.mu) / (m + n)
    dh = (hist.mu - mu)[:, None]
    da = (add.mu - mu)[:, None]
    sigma = (m * (hist.sigma + dh @ dh.T) + n * (add.sigma + da @ da.T)) / (m + n)
    return NdtVoxel(mu=mu, sigma=sigma, m=m + n)


class NdtVoxelMap:
    """Spatial hash of per-cell Gaussians with insertion-order eviction."""

    def __init__(self, params: NdtParams | None = None):
        self.params = params or NdtParams()
        self.cells: dict[tuple, NdtVoxel] = {}
        self._birth: dict[tuple, int] = {}
        self._counter = 0

    def __len__(self):
        return len(self.cells)

    def key_of(self, point) -> tuple:
        r = self.params.resolution
        return tuple(int(k) for k in np.floor(np.asarray(point) / r))

    def keys_of(self, points: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(points) / self.params.resolution).astype(np.int64)

    def lookup(self, point) -> NdtVoxel | None:
        return self.cells.get(self.key_of(point))

    def valid_voxel(self, voxel: NdtVoxel) -> bool:
        return voxel.m >= self.params.min_points

    def insert_points(self, points: np.ndarray):
        """Merge world-frame points into the map cell-wise, then evict."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if points.shape[0] == 0:
            return
        keys = self.keys_of(points)
        uniq, first, inverse = np.unique(keys, axis=0, return_index=True,
                                         return_inverse=True)
        order = np.argsort(inverse, kind="stable")
        bounds = np.searchsorted(inverse[order], np.arange(uniq.shape[0] + 1))
        # birth order follows first appearance in the input, not cell sort
        for ci in np.argsort(first, kind="stable"):
            cell_pts = points[order[bounds[ci]:bounds[ci + 1]]]
            key = tuple(int(k) for k in uniq[ci])
            add = voxel_stats(cell_pts)
            if key in self.cells:
                self.cells[key] = merge_voxel(self.cells[key], add)
            else:
                self.cells[key] = add
                self._birth[key] = self._counter
                self._counter += 1
        self._evict()

    def _evict(self):
        over = len(self.cells) - self.params.capacity
        if over <= 0:
            return
        oldest = sorted(self.cells, key=self._birth.__getitem__)[:over]
        for key in oldest:
            del self.cells[key], self._birth[key]

    def match(self, points: np.ndarray):
        """Vectorized association of points with valid voxels.

        Returns (mask, mu[N,3], sigma_inv[N,3,3]) where mask flags points whose
        containing cell holds a valid Gaussian.
        """
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        n = points.shape[0]
        mask = np.zeros(n, dtype=bool)
        mu = np.zeros((n, 3))
        sig_inv = np.zeros((n, 3, 3))
        if n == 0 or not self.cells:
            return mask, mu, sig_inv
        keys = self.keys_of(points)
        cache: dict[tuple, tuple] = {}
        p = self.params
        for i in range(n):
            key = (int(keys[i, 0]), int(keys[i, 1]), int(keys[i, 2]))
            hit = cache.get(key)
            if hit is None:
                voxel = self.cells.get(key)
                if voxel is None or not self.valid_voxel(voxel):
                    hit = (None, None)
                else:
                    sig = voxel.conditioned_sigma(p.cov_rel_floor, p.cov_abs_floor)
                    hit = (voxel.mu, np.linalg.inv(sig))
                cache[key] = hit
            if hit[0] is not None:
                mask[i] = True
                mu[i] = hit[0]
                sig_inv[i] = hit[1]
        return mask, mu, sig_inv


def build_map(cloud: PointCloud, resolution: float,
              params: NdtParams | None = None) -> NdtVoxelMap:
    """Voxelize a cloud into per-cell Gaussians. Empty cloud gives empty map."""
    if resolution <= 0.0:
        raise ValueError("resolution must be positive")
    p = params or NdtParams()
    p = NdtParams(**{**p.__dict__, "resolution": resolution})
    out = NdtVoxelMap(p)
    out.insert_points(cloud.points)
    return out


def insert_sweep(vmap: NdtVoxelMap, cloud: PointCloud, pose: Pose) -> NdtVoxelMap:
    """Merge a posed cloud into the map; evicts oldest voxels over capacity."""
    vmap.insert_points(pose.apply(cloud.points))
    return vmap


def residual_jacobian(point, pose: Pose, voxel: NdtVoxel):
    """Per-point NDT residual e = R q + t - mu and its Jacobians.

    d e / d theta = -R hat(q) (right perturbation), d e / d t = I.
    """
    q = np.asarray(point, dtype=float)
    r = pose.rotation.matrix()
    e = r @ q + pose.translation - voxel.mu
    j_r = -r @ geom.hat(q)
    j_t = np.eye(3)
    return e, j_r, j_t


@dataclass
class RegistrationStats:
    n_matched: int = 0
    cost: float = 0.0
    iterations: int = 0
    converged: bool = False
    degenerate: bool = False
    hessian_eigvals: np.ndarray = field(default_factory=lambda: np.zeros(6))
    matched_pca_eigvals: np.ndarray = field(default_factory=lambda: np.zeros(3))


def _accumulate(points_world, src_points, rot_m, mask, mu, sig_inv):
    """Gauss-Newton normal equations over matched points, state (dt, dtheta)."""
    e = points_world[mask] - mu[mask]
    si = sig_inv[mask]
    q = src_points[mask]
    # J = [I, -R hat(q)] row blocks; accumulate H = sum J^T S J, b = sum J^T S e
    rq = np.einsum("ij,nj->ni", rot_m, q)
    # hat(R q) = R hat(q) R^T, so -R hat(q) = -hat(Rq) R
    jtheta = np.einsum("nij,jk->nik", -_hat_batch(rq), rot_m)
    h = np.zeros((6, 6))
    b = np.zeros(6)
    si_e = np.einsum("nij,nj->ni", si, e)
    h[:3, :3] = si.sum(axis=0)
    h[:3, 3:] = np.einsum("nij,njk->ik", si, jtheta)
    h[3:, :3] = h[:3, 3:].T
    h[3:, 3:] = np.einsum("nji,njk,nkl->il", jtheta, si, jtheta)
    b[:3] = si_e.sum(axis=0)
    b[3:] = np.einsum("nji,nj->i", jtheta, si_e)
    cost = float(np.einsum("ni,ni->", e, si_e))
    return h, b, cost


def _hat_batch(v):
    out = np.zeros((v.shape[0], 3, 3))
    out[:, 0, 1] = -v[:, 2]
    out[:, 0, 2] = v[:, 1]
    out[:, 1, 0] = v[:, 2]
    out[:, 1, 2] = -v[:, 0]
    out[:, 2, 0] = -v[:, 1]
    out[:, 2, 1] = v[:, 0]
    return out


def _pair_cost(pose, q, mu, sig_inv):
    """Mahalanobis cost over a frozen set of (point, voxel) pairs."""
    e = pose.apply(q) - mu
    return float(np.einsum("ni,nij,nj->", e, sig_inv, e))


def register(source: PointCloud, vmap: NdtVoxelMap, init: Pose,
             params: NdtParams | None = None):
    """Gauss-Newton NDT alignment of source against the voxel map.

    Correspondences are frozen within each iteration (point -> containing
    valid voxel); the step-halving line search evaluates the frozen-pair cost,
    so the cost is non-increasing across accepted iterations. Re-association
    happens between iterations. Raises RegistrationError when fewer than
    min_matches points fall into valid voxels at the initial pose;
    non-convergence returns the best iterate flagged converged=False.
    """
    p = params or vmap.params
    src = np.asarray(source.points, dtype=float).reshape(-1, 3)
    pose = Pose(geom.Rotation(init.rotation.q), init.translation.copy())
    stats = RegistrationStats()
    if len(vmap) == 0:
        raise RegistrationError("registration against an empty map")
    mask0, _, _ = vmap.match(pose.apply(src))
    if int(mask0.sum()) < p.min_matches:
        raise RegistrationError(
            f"{int(mask0.sum())} matched points < min_matches={p.min_matches}")
    h_last = np.eye(6)
    matched_pts = None
    for it in range(p.max_iterations):
        pts = pose.apply(src)
        mask, mu_all, sig_all = vmap.match(pts)
        n_matched = int(mask.sum())
        if n_matched < p.min_matches:
            break
        matched_pts = pts[mask]
        q, mu, sig_inv = src[mask], mu_all[mask], sig_all[mask]
        h, b, cost = _accumulate(pts, src, pose.rotation.matrix(), mask,
                                 mu_all, sig_all)
        h_last = h
        try:
            dx = np.linalg.solve(h + np.eye(6) * 1e-12, -b)
        except np.linalg.LinAlgError:
            break
        stats.iterations = it + 1
        if np.linalg.norm(dx) < p.step_tol:
            stats.converged = True
            break
        step = 1.0
        accepted = False
        for _ in range(p.max_halvings + 1):
            cand = Pose(pose.rotation * geom.exp_so3(step * dx[3:]),
                        pose.translation + step * dx[:3])
            if _pair_cost(cand, q, mu, sig_inv) <= cost + 1e-15:
                pose = cand
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        if np.linalg.norm(step * dx) < p.step_tol:
            stats.converged = True
            break

    pts = pose.apply(src)
    mask, mu_all, sig_all = vmap.match(pts)
    stats.n_matched = int(mask.sum())
    if stats.n_matched:
        e = pts[mask] - mu_all[mask]
        stats.cost = float(np.einsum("ni,nij,nj->", e, sig_all[mask], e))
        matched_pts = pts[mask]
    if matched_pts is not None and matched_pts.shape[0] >= 3:
        stats.matched_pca_eigvals = np.sort(
            np.linalg.eigvalsh(np.cov(matched_pts.T, bias=True)))[::-1]
    eig = np.linalg.eigvalsh(0.5 * (h_last + h_last.T))
    stats.hessian_eigvals = eig
    if eig.max() > 0:
        stats.degenerate = bool(eig.min() / eig.max() < p.degeneracy_ratio)
    return pose, stats


def write_ply(path, points: np.ndarray):
    """ASCII PLY with one x y z vertex per point."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    with open(path, "w", encoding="ascii") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {points.shape[0]}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("end_header\n")
        for x, y, z in points:
            f.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def read_ply(path) -> np.ndarray:
    with open(path, "r", encoding="ascii") as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n = 0
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated PLY header")
            line = line.strip()
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line == "end_header":
                break
        pts = np.loadtxt(f, dtype=float, max_rows=n) if n else np.zeros((0, 3))
    return pts.reshape(-1, 3)

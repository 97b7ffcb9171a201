"""PlanarRiver: a drone-over-river CSMDP on the ground plane.

A Catmull-Rom spline on z = 0 defines the river centerline; water is the
band within half the river width of the spline.  The agent is a pinhole
camera (square image, 90 degree FOV, pitch fixed at -30 degrees) whose
binary water image is patchified into the 16x16 observation grid.  Rewards
are one-shot per spline segment; leaving the river volume is a severe
reset, flying against the current direction a minor one.  The immediate
cost in live states is a band penalty on the observed water fraction, a
stand-in for shaped water-coverage costs.

The scene is a single plane seen through a pinhole, so consecutive
observations are related by exact homographies; only patch quantization
and newly revealed terrain are unpredictable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .base import StepResult, marginal_gain

__all__ = [
    "PlanarRiver",
    "RiverLevel",
    "RIVER_LEVELS",
    "build_spline",
    "render_river_mask",
    "patchify",
    "band_penalty",
    "nearest_segment",
]


@dataclass(frozen=True)
class RiverLevel:
    n_ctrl: int       # control points; more points, more bends
    amplitude: float  # lateral excursion per bend


RIVER_LEVELS = {
    "easy": RiverLevel(5, 5.0),
    "medium": RiverLevel(7, 9.0),
    "hard": RiverLevel(9, 13.0),
}


# ---------------------------------------------------------------------------
# spline geometry

def _catmull_rom(p0, p1, p2, p3, t: float) -> np.ndarray:
    t2, t3 = t * t, t * t * t
    return 0.5 * ((2.0 * p1) + (-p0 + p2) * t
                  + (2.0 * p0 - 5.0 * p1 + 4.0 * p2 - p3) * t2
                  + (-p0 + 3.0 * p1 - 3.0 * p2 + p3) * t3)


def _sample_catmull_rom(ctrl: np.ndarray, n_segments: int) -> np.ndarray:
    """Uniform Catmull-Rom through ``ctrl`` with clamped ends; (n+1, 2) points."""
    ext = np.vstack([ctrl[:1], ctrl, ctrl[-1:]])
    spans = len(ctrl) - 1
    pts = np.empty((n_segments + 1, 2))
    for j in range(n_segments + 1):
        s = spans * j / n_segments
        k = min(int(s), spans - 1)
        pts[j] = _catmull_rom(ext[k], ext[k + 1], ext[k + 2], ext[k + 3], s - k)
    return pts


def _proper_intersect(a, b, c, d) -> bool:
    def orient(p, q, r):
        return np.sign((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))

    return (orient(a, b, c) * orient(a, b, d) < 0
            and orient(c, d, a) * orient(c, d, b) < 0)


def _is_simple(pts: np.ndarray) -> bool:
    n = len(pts) - 1
    for i in range(n):
        for j in range(i + 2, n):
            if _proper_intersect(pts[i], pts[i + 1], pts[j], pts[j + 1]):
                return False
    return True


def build_spline(rng: np.random.Generator, n_ctrl: int, amplitude: float,
                 n_segments: int = 40, spacing: float = 14.0) -> np.ndarray:
    """Simple (non-self-intersecting) centerline polyline of ``n_segments``."""
    for _ in range(100):
        ys = [0.0]
        sign = float(rng.choice([-1.0, 1.0]))
        for _ in range(n_ctrl - 1):
            ys.append(ys[-1] + sign * float(rng.uniform(0.3, 1.0)) * amplitude)
            sign = -sign
        ctrl = np.stack([np.arange(n_ctrl) * spacing, np.array(ys)], axis=1)
        pts = _sample_catmull_rom(ctrl, n_segments)
        if _is_simple(pts):
            return pts
    raise RuntimeError("failed to draw a simple spline")


def _dense_points(pts: np.ndarray, per_segment: int = 20) -> np.ndarray:
    a, b = pts[:-1], pts[1:]
    ts = np.linspace(0.0, 1.0, per_segment, endpoint=False)
    dense = (a[:, None, :] + ts[None, :, None] * (b - a)[:, None, :]).reshape(-1, 2)
    return np.concatenate([dense, pts[-1:]], axis=0)


def nearest_segment(p, pts: np.ndarray) -> tuple[float, int]:
    """Exact distance from a ground point to the polyline and the nearest
    segment index."""
    p = np.asarray(p, dtype=np.float64)
    a, b = pts[:-1], pts[1:]
    ab = b - a
    t = np.clip(((p - a) * ab).sum(axis=1) / (ab * ab).sum(axis=1), 0.0, 1.0)
    proj = a + t[:, None] * ab
    d = np.sqrt(((p - proj) ** 2).sum(axis=1))
    i = int(np.argmin(d))
    return float(d[i]), i


def _wrap(angle: float) -> float:
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


# ---------------------------------------------------------------------------
# camera

_PIXEL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _pixel_offsets(image_size: int) -> tuple[np.ndarray, np.ndarray]:
    got = _PIXEL_CACHE.get(image_size)
    if got is None:
        half = (image_size - 1) / 2.0
        j = np.arange(image_size)
        u = (j - half) / (image_size / 2.0)       # right, in tan units (90 FOV)
        v = (half - j) / (image_size / 2.0)       # up
        got = tuple(np.meshgrid(u, v))
        _PIXEL_CACHE[image_size] = got
    return got


def patchify(mask: np.ndarray, patch: int = 8) -> np.ndarray:
    """Binary patch grid: 1 where water pixels strictly exceed half the patch."""
    n = mask.shape[0] // patch
    counts = mask.reshape(n, patch, n, patch).sum(axis=(1, 3))
    return (counts > patch * patch / 2.0).astype(np.float64)


def render_river_mask(pose, pts: np.ndarray | None = None, w: float = 6.0,
                      image_size: int = 128, patch: int = 8,
                      pitch: float = -np.pi / 6.0, tree=None) -> np.ndarray:
    """Patchified water mask seen from ``pose`` = (x, y, z, yaw).

    Each pixel ray is intersected with the ground plane; hits within w/2 of
    the centerline are water, rays at or above the horizon are not.
    """
    if tree is None:
        tree = cKDTree(_dense_points(np.asarray(pts, dtype=np.float64)))
    x, y, z, yaw = (float(q) for q in pose)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cy, sy = np.cos(yaw), np.sin(yaw)
    fwd = np.array([cp * cy, cp * sy, sp])
    right = np.array([sy, -cy, 0.0])
    up = np.array([-cy * sp, -sy * sp, cp])
    u, v = _pixel_offsets(image_size)
    d = (fwd[None, None, :] + u[..., None] * right[None, None, :]
         + v[..., None] * up[None, None, :])
    dz = d[..., 2]
    hit = dz < -1e-12
    water = np.zeros((image_size, image_size), dtype=bool)
    if hit.any():
        t = -z / dz[hit]
        gx = x + t * d[..., 0][hit]
        gy = y + t * d[..., 1][hit]
        dist, _ = tree.query(np.stack([gx, gy], axis=1))
        water[hit] = dist <= w / 2.0
    return patchify(water, patch)


def band_penalty(phi: float, lo: float = 0.15, hi: float = 0.75) -> float:
    """0 inside the water-fraction band, linear ramp to 1 at phi = 0 or 1."""
    if phi < lo:
        return (lo - phi) / lo
    if phi > hi:
        return (phi - hi) / (1.0 - hi)
    return 0.0


# ---------------------------------------------------------------------------
# environment

class PlanarRiver:
    """Camera-over-spline CSMDP with MultiDiscrete (3,3,3,3) actions.

    Branches map {0,1,2} to {-1,0,+1} times the step size, in order:
    vertical translation, yaw rotation, forward, strafe (heading frame,
    rotation applied before translation).
    """

    branches = (3, 3, 3, 3)
    obs_shape = (16, 16)
    STEP_XY = 0.5
    STEP_Z = 0.5
    STEP_YAW = np.pi / 12.0   # 15 degrees
    W = 6.0                   # full river width; water within W/2
    D_MAX = 6.0
    Z_RANGE = (2.0, 12.0)
    N_SEGMENTS = 40

    def __init__(self, level: str = "medium", timeout: int = 500, seed: int = 0):
        if level not in RIVER_LEVELS:
            raise ValueError(f"unknown level {level!r}")
        self.level = level
        self.timeout = timeout
        self._rng = np.random.default_rng(seed)
        self._done = True
        self._segments = frozenset(range(self.N_SEGMENTS))
        self.pts = None
        self.visited: set = set()
        self.steps = 0
        self.x = self.y = self.z = self.yaw = 0.0

    # ---- episode control ----

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        rng = self._rng
        lvl = RIVER_LEVELS[self.level]
        self._install_spline(build_spline(rng, lvl.n_ctrl, lvl.amplitude,
                                          self.N_SEGMENTS))
        k = int(rng.integers(3))
        base = self.pts[k] + float(rng.uniform()) * (self.pts[k + 1] - self.pts[k])
        tangent = self._angles[k]
        normal = np.array([-np.sin(tangent), np.cos(tangent)])
        lateral = float(rng.uniform(-self.W / 4.0, self.W / 4.0))
        self.x, self.y = base + lateral * normal
        self.z = float(rng.uniform(4.0, 8.0))
        self.yaw = _wrap(tangent + float(rng.uniform(-np.pi / 6.0, np.pi / 6.0)))
        # the home segment never pays out: standing still earns nothing
        dist, seg = nearest_segment((self.x, self.y), self.pts)
        self.visited = {seg} if dist <= self.W / 2.0 else set()
        self.steps = 0
        self._done = False
        return self._render()

    def _install_spline(self, pts: np.ndarray) -> None:
        self.pts = pts
        diffs = pts[1:] - pts[:-1]
        self._angles = np.arctan2(diffs[:, 1], diffs[:, 0])
        self._tree = cKDTree(_dense_points(pts))

    def _force_spline(self, pts: np.ndarray) -> None:
        """Test hook: pin the centerline; pose fields are set by the caller."""
        self._install_spline(np.asarray(pts, dtype=np.float64))
        self.visited = set()
        self.steps = 0
        self._done = False

    def _render(self) -> np.ndarray:
        return render_river_mask((self.x, self.y, self.z, self.yaw),
                                 w=self.W, tree=self._tree)

    # ---- dynamics ----

    def step(self, action) -> StepResult:
        if self._done:
            raise RuntimeError("episode finished; call reset()")
        a = np.asarray(action, dtype=np.int64).ravel()
        if a.shape != (4,) or a.min() < 0 or a.max() > 2:
            raise ValueError(f"action {action!r} outside MultiDiscrete (3,3,3,3)")
        d = a - 1
        self.z += self.STEP_Z * d[0]
        self.yaw = _wrap(self.yaw + self.STEP_YAW * d[1])
        cy, sy = np.cos(self.yaw), np.sin(self.yaw)
        self.x += self.STEP_XY * (d[2] * cy + d[3] * sy)
        self.y += self.STEP_XY * (d[2] * sy - d[3] * cy)
        self.steps += 1

        dist, seg = nearest_segment((self.x, self.y), self.pts)
        obs = self._render()
        if dist > self.D_MAX or not self.Z_RANGE[0] <= self.z <= self.Z_RANGE[1]:
            self._done = True
            return StepResult(obs, 0.0, 1.0, True, "severe")
        if abs(_wrap(self.yaw - self._angles[seg])) > np.pi / 2.0:
            self._done = True
            return StepResult(obs, 0.0, 0.5, True, "minor")

        element = seg if dist <= self.W / 2.0 else None
        reward = marginal_gain(self._segments, self.visited, element)
        if reward:
            self.visited.add(seg)
        cost = band_penalty(float(obs.mean()))
        if self.steps >= self.timeout:
            self._done = True
            return StepResult(obs, reward, cost, True, "timeout")
        return StepResult(obs, reward, cost, False, "none")

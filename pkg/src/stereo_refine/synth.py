"""Ray-cast synthetic stereo video with exact depth, flow and texture.

Scenes are built from planes (optionally bounded to a world-space box) and
spheres, always closed by an unbounded background plane so every ray hits
something. Texture is a smooth function of the 3D hit point, so corresponding
pixels in any two views share intensity exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .flow import corner_indices, footprint
from .geometry import (
    CameraIntrinsics,
    RigidTransform,
    StereoRig,
    relative_pose,
    rotation_y,
    stereo_rig_transform,
)

LEFT, RIGHT = "left", "right"

# Matching tolerance used by the visibility test: relative depth agreement.
VISIBILITY_RTOL = 1e-6


@dataclass(frozen=True)
class Texture:
    period: float = 2.5
    phase: float = 0.0
    amplitude: float = 0.2

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        X, Y, Z = pts[..., 0], pts[..., 1], pts[..., 2]
        k = 2 * np.pi / self.period
        return (
            0.5
            + self.amplitude * np.sin(k * (X + 0.5 * Z) + self.phase)
            + self.amplitude * np.sin(k / 0.8 * (Y - 0.3 * Z) + 2 * self.phase)
        )


@dataclass(frozen=True)
class Plane:
    """Points with ``normal . X = offset``; ``bounds`` clips hits to a world x/y box."""

    normal: tuple[float, float, float]
    offset: float
    bounds: tuple[tuple[float, float], tuple[float, float]] | None = None
    texture: Texture = Texture()

    def intersect(self, origin, dirs):
        n = np.asarray(self.normal, dtype=np.float64)
        denom = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.offset - origin @ n) / denom
        t = np.where(np.abs(denom) > 1e-12, t, np.inf)
        if self.bounds is not None:
            (x0, x1), (y0, y1) = self.bounds
            with np.errstate(invalid="ignore"):
                p = origin + t[..., None] * dirs
            inside = (p[..., 0] >= x0) & (p[..., 0] <= x1) & (p[..., 1] >= y0) & (p[..., 1] <= y1)
            t = np.where(inside, t, np.inf)
        return t


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    texture: Texture = Texture()

    def intersect(self, origin, dirs):
        oc = origin - np.asarray(self.center, dtype=np.float64)
        a = np.einsum("...i,...i->...", dirs, dirs)
        b = 2 * (dirs @ oc)
        c = oc @ oc - self.radius**2
        disc = b * b - 4 * a * c
        root = np.sqrt(np.where(disc >= 0, disc, 0.0))
        t = (-b - root) / (2 * a)
        return np.where(disc >= 0, t, np.inf)


def fronto_plane(z: float, bounds=None, texture: Texture | None = None) -> Plane:
    return Plane((0.0, 0.0, 1.0), z, bounds, texture or Texture(period=0.5 * z))


@dataclass(frozen=True)
class CameraPath:
    """Left-camera trajectory: frame ``i`` sits at ``start + i * step`` with yaw ``i * yaw``."""

    start: tuple[float, float, float] = (0.0, 0.0, 0.0)
    step: tuple[float, float, float] = (0.05, 0.0, 0.15)
    yaw: float = 0.01

    def pose(self, i: int) -> RigidTransform:
        t = np.asarray(self.start) + i * np.asarray(self.step)
        return RigidTransform(rotation_y(i * self.yaw), t)


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    rig: StereoRig
    path: CameraPath = CameraPath()
    frames: int = 5
    name: str = "custom"

    def __post_init__(self):
        if self.frames < 2:
            raise ValueError("a scene needs at least two frames")
        if not any(isinstance(p, Plane) and p.bounds is None for p in self.primitives):
            raise ValueError("a scene must contain an unbounded background plane")

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return self.rig.intrinsics

    def pose(self, frame: int, view: str = LEFT) -> RigidTransform:
        """World-from-camera pose of one view."""
        left = self.path.pose(frame)
        if view == LEFT:
            return left
        if view == RIGHT:
            return left @ stereo_rig_transform(self.rig).inverse()
        raise ValueError(f"unknown view {view!r}")


def default_rig(width: int = 64, height: int = 48, focal: float = 60.0, baseline: float = 0.5) -> StereoRig:
    intr = CameraIntrinsics(focal, focal, (width - 1) / 2, (height - 1) / 2, width, height)
    return StereoRig(baseline, intr)


def _rays(intr: CameraIntrinsics, u, v):
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)


def cast(spec: SceneSpec, pose: RigidTransform, u, v):
    """Ray-cast continuous pixel positions from a camera pose.

    Returns ``(depth, primitive_index, world_points)``; depth is the camera z
    of the nearest hit.
    """
    rays = _rays(spec.intrinsics, u, v)
    dirs = rays @ pose.rotation.T
    origin = pose.translation
    best = np.full(rays.shape[:-1], np.inf)
    ids = np.full(rays.shape[:-1], -1, dtype=np.intp)
    for k, prim in enumerate(spec.primitives):
        t = prim.intersect(origin, dirs)
        hit = (t > 1e-9) & (t < best)
        best = np.where(hit, t, best)
        ids = np.where(hit, k, ids)
    pts = origin + best[..., None] * dirs
    return best, ids, pts


def render(spec: SceneSpec, frame: int, view: str = LEFT):
    intr = spec.intrinsics
    u, v = intr.pixel_grid()
    return cast(spec, spec.pose(frame, view), u, v)


def render_depth(spec: SceneSpec, frame: int, view: str = LEFT) -> np.ndarray:
    return render(spec, frame, view)[0]


def render_image(spec: SceneSpec, frame: int, view: str = LEFT) -> np.ndarray:
    """Grayscale image in [0, 1]: each pixel shows the texture of its hit point."""
    _, ids, pts = render(spec, frame, view)
    img = np.zeros(ids.shape)
    for k, prim in enumerate(spec.primitives):
        sel = ids == k
        img[sel] = prim.texture(pts[sel])
    return img


@dataclass
class ExactFlow:
    forward: np.ndarray
    backward: np.ndarray
    visible: np.ndarray
    mask: np.ndarray
    visible_backward: np.ndarray
    mask_backward: np.ndarray


def _one_way(spec, src, tgt):
    (i, vi), (j, vj) = src, tgt
    intr = spec.intrinsics
    pose_s, pose_t = spec.pose(i, vi), spec.pose(j, vj)
    depth, ids, _ = render(spec, i, vi)
    u, v = intr.pixel_grid()
    pts = depth[..., None] * _rays(intr, u, v)
    motion = relative_pose(pose_s, pose_t)
    c = pts @ motion.rotation.T + motion.translation
    z = c[..., 2]
    zs = np.where(z > 0, z, 1.0)
    pu = intr.fx * c[..., 0] / zs + intr.cx
    pv = intr.fy * c[..., 1] / zs + intr.cy
    flow = np.stack([pu - u, pv - v], axis=-1)

    fp = footprint(pu, pv, intr.shape)
    seen, _, _ = cast(spec, pose_t, np.where(fp.inside, pu, 0), np.where(fp.inside, pv, 0))
    visible = fp.inside & (z > 0) & (np.abs(seen - zs) <= VISIBILITY_RTOL * zs)

    # Footprint must lie on the same primitive and carry an exact inverse depth.
    tgt_depth, tgt_ids, _ = render(spec, j, vj)
    same = visible.copy()
    inv_interp = np.zeros_like(pu)
    for wgt, (r, cc) in zip(fp.weights(), corner_indices(fp, intr.shape)):
        same &= ~((wgt > 0) & (tgt_ids[r, cc] != ids))
        inv_interp += wgt * (1.0 / tgt_depth[r, cc])
    exact = np.abs(inv_interp * zs - 1.0) <= 1e-9
    mask = same & exact
    flow[~(z > 0)] = 0.0
    return flow, visible, mask


def exact_flow(spec: SceneSpec, src: tuple[int, str], tgt: tuple[int, str]) -> ExactFlow:
    """Analytic flows between two views plus visibility masks.

    ``visible`` marks source pixels whose reprojection is the first surface
    the target camera sees. ``mask`` further requires the bilinear footprint
    in the target view to lie on the same primitive with inverse depth
    reproduced exactly, so the consistency loss vanishes on ground truth.
    """
    fwd, vis_f, mask_f = _one_way(spec, src, tgt)
    bwd, vis_b, mask_b = _one_way(spec, tgt, src)
    return ExactFlow(fwd, bwd, vis_f, mask_f, vis_b, mask_b)


def perturb(depths, *, noise: float = 0.0, blur: float = 0.0, scale: float = 1.0, seed: int = 0) -> np.ndarray:
    """Degrade depth maps: Gaussian blur (per frame), global scale, then log-normal noise.

    ``noise`` is the standard deviation of the multiplicative noise in
    log-depth, so results stay positive. Deterministic for a fixed seed.
    """
    d = np.array(depths, dtype=np.float64)
    if np.any(~(d > 0)):
        raise ValueError("perturb requires positive depths")
    if blur > 0:
        sigma = [0.0] * (d.ndim - 2) + [blur, blur]
        d = ndimage.gaussian_filter(d, sigma=sigma, mode="nearest")
    d = d * scale
    if noise > 0:
        rng = np.random.default_rng(seed)
        d = d * np.exp(noise * rng.standard_normal(d.shape))
    return d


def scene_preset(name: str = "boxes", seed: int = 0, width: int = 64, height: int = 48, frames: int = 5) -> SceneSpec:
    """Named test scenes; ``seed`` jitters object placement and texture phase."""
    rng = np.random.default_rng(seed)
    rig = default_rig(width, height)
    jitter = lambda s=0.3: float(rng.uniform(-s, s))  # noqa: E731
    bg = fronto_plane(15.0, texture=Texture(period=7.5, phase=jitter(3)))
    path = CameraPath(step=(0.05 + jitter(0.03), jitter(0.02), 0.15 + jitter(0.05)), yaw=0.01 + jitter(0.005))

    if name == "boxes":
        prims = (
            fronto_plane(5.0, ((-1.6 + jitter(), -0.2 + jitter()), (-0.9 + jitter(), 0.8 + jitter())),
                         Texture(2.5, jitter(3))),
            fronto_plane(7.5, ((0.4 + jitter(), 2.4 + jitter()), (-1.5 + jitter(), 0.6 + jitter())),
                         Texture(3.5, jitter(3))),
            bg,
        )
    elif name == "slanted":
        n = np.array([0.0, -0.35 + jitter(0.05), 1.0])
        n /= np.linalg.norm(n)
        prims = (
            fronto_plane(6.0, ((-2.0 + jitter(), -0.6 + jitter()), (-0.6 + jitter(), 1.0 + jitter())),
                         Texture(3.0, jitter(3))),
            Plane(tuple(n), 9.0 * n[2], ((-1.0, 4.0), (-3.0, 3.0)), Texture(4.0, jitter(3))),
            bg,
        )
    elif name == "sphere":
        prims = (
            Sphere((0.6 + jitter(), 0.1 + jitter(0.2), 6.0 + jitter(0.5)), 1.1, Texture(2.5, jitter(3))),
            fronto_plane(4.5, ((-2.2 + jitter(), -1.2 + jitter()), (-1.4, 1.4)), Texture(2.2, jitter(3))),
            bg,
        )
    else:
        raise ValueError(f"unknown scene preset {name!r}")
    return SceneSpec(prims, rig, path, frames, name)


PRESETS = ("boxes", "slanted", "sphere")


@dataclass
class SyntheticBundle:
    """Ground truth for a whole scene plus the refiner-facing bundle."""

    spec: SceneSpec
    gt_left: np.ndarray
    gt_right: np.ndarray
    left_images: np.ndarray
    right_images: np.ndarray
    poses: list[RigidTransform]
    lr_flows: list[ExactFlow]
    temporal_flows: dict[tuple[int, int], ExactFlow] = field(default_factory=dict)

    def video_bundle(self, left_depths=None, right_depths=None, use_masks: bool = True):
        from .refine import VideoBundle

        return VideoBundle(
            rig=self.spec.rig,
            poses=list(self.poses),
            left_depths=self.gt_left.copy() if left_depths is None else np.asarray(left_depths, dtype=np.float64),
            right_depths=self.gt_right.copy() if right_depths is None else np.asarray(right_depths, dtype=np.float64),
            lr_flows=[(f.forward, f.backward) for f in self.lr_flows],
            temporal_flows={k: (f.forward, f.backward) for k, f in self.temporal_flows.items()},
            lr_masks=[f.mask for f in self.lr_flows] if use_masks else None,
            temporal_masks={k: f.mask for k, f in self.temporal_flows.items()} if use_masks else None,
            left_images=self.left_images,
            right_images=self.right_images,
        )


def make_bundle(spec: SceneSpec, temporal_pairs=None) -> SyntheticBundle:
    """Render every frame and exact flows for all left-right and temporal pairs.

    ``temporal_pairs`` defaults to every pair ``(i, j)`` with ``i < j``, which
    covers both consecutive and hierarchical sampling.
    """
    n = spec.frames
    if temporal_pairs is None:
        temporal_pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    gt_left = np.stack([render_depth(spec, i, LEFT) for i in range(n)])
    gt_right = np.stack([render_depth(spec, i, RIGHT) for i in range(n)])
    left_images = np.stack([render_image(spec, i, LEFT) for i in range(n)])
    right_images = np.stack([render_image(spec, i, RIGHT) for i in range(n)])
    lr = [exact_flow(spec, (i, LEFT), (i, RIGHT)) for i in range(n)]
    temporal = {(i, j): exact_flow(spec, (i, LEFT), (j, LEFT)) for i, j in temporal_pairs}
    poses = [spec.pose(i, LEFT) for i in range(n)]
    return SyntheticBundle(spec, gt_left, gt_right, left_images, right_images, poses, lr, temporal)

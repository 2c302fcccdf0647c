"""Geometric consistency losses between frame pairs and their depth gradients.

For every valid source pixel ``x`` the loss compares the flow-displaced pixel
``x + flow(x)`` with the depth-reprojected pixel ``p(x)``: ``x`` lifted to 3-D
at its depth, moved by the pair's rigid motion and projected again:

* spatial term:    ``|p(x) - (x + flow(x))|_2``
* disparity term:  ``fx * |1 / z(x) - invdepth_tgt(x + flow(x))|``

where ``z(x)`` is the z coordinate of the transformed point and the target
inverse depth is read bilinearly at ``x + flow(x)``. A pair loss is the mean of
``spatial + disparity_weight * disparity`` over the pixels that survive the mask and the
runtime exclusions (behind camera, target out of bounds, non-positive depth).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow import corner_indices, footprint
from .geometry import CameraIntrinsics, RigidTransform, lift, project, transform_point

LEFT_RIGHT = "left-right"
TEMPORAL = "temporal"

DISPARITY_WEIGHT = 0.1

# Residuals below these are treated as exactly zero (subgradient 0).
SPATIAL_KINK = 1e-9
DISPARITY_KINK = 1e-12


@dataclass(frozen=True)
class LossWeights:
    disparity_weight: float = DISPARITY_WEIGHT
    w_edge: float = 1.0

    def __post_init__(self):
        if self.disparity_weight < 0 or self.w_edge < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


@dataclass
class FramePairContext:
    """Everything needed to evaluate the consistency loss of one ordered frame pair."""

    src_depth: np.ndarray
    tgt_depth: np.ndarray
    flow: np.ndarray
    mask: np.ndarray
    transform: RigidTransform
    intrinsics: CameraIntrinsics
    kind: str = TEMPORAL
    label: str = ""

    def __post_init__(self):
        shape = self.intrinsics.shape
        for name in ("src_depth", "tgt_depth", "mask"):
            arr = getattr(self, name)
            if np.shape(arr) != shape:
                raise ValueError(f"{name} has shape {np.shape(arr)}, expected {shape}")
        if np.shape(self.flow) != shape + (2,):
            raise ValueError(f"flow has shape {np.shape(self.flow)}, expected {shape + (2,)}")
        if self.kind not in (LEFT_RIGHT, TEMPORAL):
            raise ValueError(f"unknown pair kind {self.kind!r}")


@dataclass(frozen=True)
class PairLossBreakdown:
    spatial: float
    disparity: float
    combined: float
    valid_count: int
    kind: str = TEMPORAL
    label: str = ""


@dataclass
class GeometricLossReport:
    total: float
    lr: float
    temporal: float
    pairs: list[PairLossBreakdown] = field(default_factory=list)


def spatial_residual(x, ctx: FramePairContext) -> float:
    """Spatial residual at a single integer pixel, evaluated step by step."""
    u, v = int(round(x[0])), int(round(x[1]))
    intr = ctx.intrinsics
    c = lift((u, v), ctx.src_depth[v, u], intr)
    p = project(intr, transform_point(ctx.transform, c))
    f = np.array([u, v], dtype=np.float64) + ctx.flow[v, u]
    return float(np.hypot(*(p - f)))


def disparity_residual(x, ctx: FramePairContext) -> float:
    """Disparity residual (before weighting by ``disparity_weight``) at a single integer pixel."""
    u, v = int(round(x[0])), int(round(x[1]))
    intr = ctx.intrinsics
    c = transform_point(ctx.transform, lift((u, v), ctx.src_depth[v, u], intr))
    if not c[2] > 0:
        raise ValueError("transformed point behind the target camera")
    f = np.array([u, v], dtype=np.float64) + ctx.flow[v, u]
    inv_tgt, ok = _sample_inverse_depth(ctx.tgt_depth, f[0], f[1])
    if not ok:
        raise ValueError("target inverse depth unavailable at the displaced pixel")
    return float(intr.fx * abs(1.0 / c[2] - inv_tgt))


def _sample_inverse_depth(depth, u, v):
    depth = np.asarray(depth, dtype=np.float64)
    good = np.isfinite(depth) & (depth > 0)
    inv = np.where(good, 1.0 / np.where(good, depth, 1.0), 0.0)
    fp = footprint(u, v, depth.shape)
    ok = np.array(fp.inside, copy=True)
    val = 0.0
    for wgt, (r, c) in zip(fp.weights(), corner_indices(fp, depth.shape)):
        ok &= ~((wgt > 0) & ~good[r, c])
        val = val + wgt * inv[r, c]
    return val, ok


class _PairTerms:
    """Per-pixel intermediate quantities shared by the loss and its gradient."""

    def __init__(self, ctx: FramePairContext):
        intr = ctx.intrinsics
        R, T = ctx.transform.rotation, ctx.transform.translation
        depth = np.asarray(ctx.src_depth, dtype=np.float64)
        tgt = np.asarray(ctx.tgt_depth, dtype=np.float64)
        flow = np.asarray(ctx.flow, dtype=np.float64)
        u, v = intr.pixel_grid()

        ray = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy, np.ones_like(u)], axis=-1)
        self.a = ray @ R.T  # d(point)/d(depth)
        src_ok = np.isfinite(depth) & (depth > 0)
        d_safe = np.where(src_ok, depth, 1.0)
        pts = d_safe[..., None] * self.a + T
        X, Y, Z = pts[..., 0], pts[..., 1], pts[..., 2]
        valid = np.asarray(ctx.mask, dtype=bool) & src_ok & (Z > 0)
        Zs = np.where(Z > 0, Z, 1.0)

        self.fu = u + flow[..., 0]
        self.fv = v + flow[..., 1]
        tgt_ok = np.isfinite(tgt) & (tgt > 0)
        self.tgt_safe = np.where(tgt_ok, tgt, 1.0)
        inv_tgt = np.where(tgt_ok, 1.0 / self.tgt_safe, 0.0)
        self.fp = footprint(self.fu, self.fv, tgt.shape)
        self.corners = corner_indices(self.fp, tgt.shape)
        self.wts = self.fp.weights()
        ok = self.fp.inside.copy()
        zt_inv = np.zeros_like(u)
        for wgt, (r, c) in zip(self.wts, self.corners):
            ok &= ~((wgt > 0) & ~tgt_ok[r, c])
            zt_inv += wgt * inv_tgt[r, c]
        valid &= ok & np.isfinite(flow).all(axis=-1)

        self.X, self.Y, self.Z = X, Y, Zs
        self.pu = intr.fx * X / Zs + intr.cx
        self.pv = intr.fy * Y / Zs + intr.cy
        self.du = self.pu - self.fu
        self.dv = self.pv - self.fv
        self.spatial = np.hypot(self.du, self.dv)
        self.e = 1.0 / Zs - zt_inv
        self.disparity = intr.fx * np.abs(self.e)
        self.valid = valid
        self.n = int(valid.sum())
        self.fx, self.fy = intr.fx, intr.fy


def pair_loss(ctx: FramePairContext, w: LossWeights = LossWeights()) -> PairLossBreakdown:
    t = _PairTerms(ctx)
    if t.n == 0:
        return PairLossBreakdown(0.0, 0.0, 0.0, 0, ctx.kind, ctx.label)
    spatial = float(np.sum(t.spatial[t.valid])) / t.n
    disparity = float(np.sum(t.disparity[t.valid])) / t.n
    return PairLossBreakdown(
        spatial, disparity, spatial + w.disparity_weight * disparity, t.n, ctx.kind, ctx.label
    )


def pair_loss_gradient(
    ctx: FramePairContext, w: LossWeights = LossWeights()
) -> tuple[np.ndarray, np.ndarray]:
    """Analytic ``(dL/dD_src, dL/dD_tgt)`` of :func:`pair_loss`'s combined value."""
    t = _PairTerms(ctx)
    shape = ctx.intrinsics.shape
    g_src = np.zeros(shape)
    g_tgt = np.zeros(shape)
    if t.n == 0:
        return g_src, g_tgt

    ax, ay, az = t.a[..., 0], t.a[..., 1], t.a[..., 2]
    Z2 = t.Z * t.Z
    dpu = t.fx * (ax * t.Z - t.X * az) / Z2
    dpv = t.fy * (ay * t.Z - t.Y * az) / Z2
    moving = t.spatial > SPATIAL_KINK
    s_safe = np.where(moving, t.spatial, 1.0)
    d_spatial = np.where(moving, (t.du * dpu + t.dv * dpv) / s_safe, 0.0)

    sign = np.where(t.disparity > DISPARITY_KINK, np.sign(t.e), 0.0)
    d_disp_src = t.fx * sign * (-az / Z2)

    scale = 1.0 / t.n
    g_src = np.where(t.valid, (d_spatial + w.disparity_weight * d_disp_src) * scale, 0.0)

    # d(disparity)/d(inv_tgt) = -fx*sign; d(inv_tgt)/d(tgt_k) = -w_k / tgt_k^2
    coef = np.where(t.valid, w.disparity_weight * t.fx * sign * scale, 0.0)
    sel = t.valid & (coef != 0)
    for wgt, (r, c) in zip(t.wts, t.corners):
        rr, cc = r[sel], c[sel]
        contrib = coef[sel] * wgt[sel] / (t.tgt_safe[rr, cc] ** 2)
        np.add.at(g_tgt, (rr, cc), contrib)
    return g_src, g_tgt


def kink_map(ctx: FramePairContext, rel_tol: float = 1e-3) -> tuple[np.ndarray, np.ndarray]:
    """Pixels whose loss terms sit close to a non-differentiable point.

    Returns boolean maps over the source and target grids: a pixel is flagged
    when a valid disparity residual it feeds is smaller than ``rel_tol`` times
    the reprojected inverse depth scaled by fx.
    """
    t = _PairTerms(ctx)
    near = t.valid & (t.disparity < rel_tol * t.fx / t.Z)
    near |= t.valid & (t.spatial < rel_tol)
    src = near.copy()
    tgt = np.zeros(ctx.intrinsics.shape, dtype=bool)
    for wgt, (r, c) in zip(t.wts, t.corners):
        sel = near & (wgt > 0)
        tgt[r[sel], c[sel]] = True
    return src, tgt


def geometric_loss(
    pairs_lr: list[FramePairContext],
    pairs_t: list[FramePairContext],
    w: LossWeights = LossWeights(),
) -> GeometricLossReport:
    """Sum of pair losses over the left-right set and the temporal set."""
    reports = [pair_loss(ctx, w) for ctx in list(pairs_lr) + list(pairs_t)]
    n_lr = len(pairs_lr)
    lr = float(sum(r.combined for r in reports[:n_lr]))
    tt = float(sum(r.combined for r in reports[n_lr:]))
    return GeometricLossReport(lr + tt, lr, tt, reports)

"""Depth-space error metrics and the ground-truth-free photometric metric."""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .flow import sample_bilinear
from .geometry import StereoRig, stereo_rig_transform

THRESHOLD = 1.25


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class DepthEvalResult:
    abs_rel: float
    exceed_1: float
    exceed_2: float
    exceed_3: float
    evaluated_pixels: int


@dataclass(frozen=True)
class PhotoEvalResult:
    l1: float
    l2: float
    covered_pixels: int


def _valid(d):
    return np.isfinite(d) & (d > 0)


def eval_depth(pred, gt) -> DepthEvalResult:
    """Mean absolute relative error and the fraction of pixels whose symmetric
    ratio ``max(pred/gt, gt/pred)`` exceeds ``1.25**k`` for k = 1, 2, 3.

    Pixels with missing ground truth (<= 0) or invalid predictions are ignored.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    sel = _valid(gt) & _valid(pred)
    n = int(sel.sum())
    if n == 0:
        raise MetricError("no pixel has both a valid prediction and ground truth")
    p, g = pred[sel], gt[sel]
    ratio = np.maximum(p / g, g / p)
    return DepthEvalResult(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        exceed_1=float(np.mean(ratio > THRESHOLD)),
        exceed_2=float(np.mean(ratio > THRESHOLD**2)),
        exceed_3=float(np.mean(ratio > THRESHOLD**3)),
        evaluated_pixels=n,
    )


def align_scale(pred, gt) -> tuple[np.ndarray, float]:
    """Least-squares scale ``s = sum(pred*gt) / sum(pred**2)`` over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    sel = _valid(gt) & np.isfinite(pred)
    if not sel.any():
        raise MetricError("no valid pixels to align")
    p, g = pred[sel], gt[sel]
    denom = float(np.dot(p, p))
    if denom == 0:
        raise MetricError("cannot align an all-zero prediction")
    s = float(np.dot(p, g)) / denom
    return s * pred, s


def to_gray(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    return image.mean(axis=-1) if image.ndim == 3 else image


def photometric_metric(left, right, depth_left, rig: StereoRig, mask=None) -> PhotoEvalResult:
    """Compare each left pixel with the right image sampled where its depth reprojects.

    Left pixels without valid depth, whose reprojection leaves the right
    image, or that are excluded by the optional ``mask`` are not counted.
    Colour images are reduced to their channel mean.
    """
    left, right = to_gray(left), to_gray(right)
    depth = np.asarray(depth_left, dtype=np.float64)
    intr = rig.intrinsics
    if not (left.shape == right.shape == depth.shape == intr.shape):
        raise MetricError(
            f"shape mismatch: left {left.shape}, right {right.shape}, depth {depth.shape}, camera {intr.shape}"
        )
    ok = _valid(depth)
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)
    u, v = intr.pixel_grid()
    d = np.where(ok, depth, 1.0)
    motion = stereo_rig_transform(rig)
    x = (u - intr.cx) / intr.fx * d
    y = (v - intr.cy) / intr.fy * d
    pts = np.stack([x, y, d], axis=-1) @ motion.rotation.T + motion.translation
    z = pts[..., 2]
    ok &= z > 0
    zs = np.where(z > 0, z, 1.0)
    pu = intr.fx * pts[..., 0] / zs + intr.cx
    pv = intr.fy * pts[..., 1] / zs + intr.cy
    warped, inside = sample_bilinear(right, pu, pv)
    ok &= inside
    n = int(ok.sum())
    if n == 0:
        raise MetricError("no left pixel reprojects into the right image")
    diff = warped[ok] - left[ok]
    return PhotoEvalResult(float(np.mean(np.abs(diff))), float(np.mean(diff**2)), n)


def eval_sequence(results):
    """Unweighted mean of per-frame results (pixel counts are summed)."""
    results = list(results)
    if not results:
        raise MetricError("no frames to aggregate")
    cls = type(results[0])
    values = {}
    for f in fields(cls):
        col = [getattr(r, f.name) for r in results]
        if f.name in ("evaluated_pixels", "covered_pixels"):
            values[f.name] = int(sum(col))
        else:
            values[f.name] = float(np.mean(col))
    return cls(**values)

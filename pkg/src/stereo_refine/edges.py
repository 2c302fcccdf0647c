"""Edge-preserving losses on depth maps.

Two neighbour-difference operators are used at spacing ``h``; component 0
pairs a pixel with its neighbour ``h`` columns to the right, component 1 with
the neighbour ``h`` rows below.

* scale-invariant gradient: ``(b - a) / (|b| + |a|)``
* ratio gradient: ``max(a, b) / min(a, b)``

Both are unchanged when the map is multiplied by a positive constant, so
the losses built on them compare edge structure rather than absolute depth.
Edge masks are always computed on the reference (initial) map ``reference``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SCALES = (1, 2, 4, 6, 8)
SI_BASE = 0.02
RATIO_BASE = 1.05

MULTISCALE = "multiscale"
CONTRASTIVE = "contrastive"

_NORM_KINK = 1e-12


@dataclass(frozen=True)
class EdgeLossConfig:
    scales: tuple[int, ...] = SCALES
    si_base: float = SI_BASE
    ratio_base: float = RATIO_BASE
    one_sided: bool = True

    def __post_init__(self):
        scales = tuple(int(h) for h in self.scales)
        object.__setattr__(self, "scales", scales)
        if not scales or list(scales) != sorted(scales) or scales[0] < 1:
            raise ValueError(f"scales must be ascending integers >= 1, got {scales}")
        if not self.si_base > 0:
            raise ValueError(f"si_base must be positive, got {self.si_base}")
        if not self.ratio_base > 1:
            raise ValueError(f"ratio_base must exceed 1, got {self.ratio_base}")

    def si_threshold(self, h: int) -> float:
        return self.si_base * 2.0 ** (h - 1)

    def ratio_threshold(self, h: int) -> float:
        return self.ratio_base * 2.0 ** (h - 1)


@dataclass
class EdgeLossReport:
    total: float
    per_scale: dict[int, float] = field(default_factory=dict)
    mask_pixels: dict[int, int] = field(default_factory=dict)


def _neighbour_slices(h: int, axis: int):
    """Slices selecting ``a`` (the pixel) and ``b`` (its h-neighbour) along ``axis``."""
    if axis == 0:
        return (slice(None), slice(None, -h)), (slice(None), slice(h, None))
    return (slice(None, -h), slice(None)), (slice(h, None), slice(None))


def _pair_views(dmap: np.ndarray, h: int):
    """Yield ``(component, a_index, b_index)`` for components whose neighbours exist."""
    for comp, axis_len in ((0, dmap.shape[1]), (1, dmap.shape[0])):
        if h < axis_len:
            a_idx, b_idx = _neighbour_slices(h, comp)
            yield comp, a_idx, b_idx


def si_gradient(dmap, h: int) -> np.ndarray:
    """Scale-invariant gradient, shape ``(H, W, 2)``; 0 where the neighbour is outside."""
    dmap = np.asarray(dmap, dtype=np.float64)
    g = np.zeros(dmap.shape + (2,))
    for comp, ai, bi in _pair_views(dmap, h):
        a, b = dmap[ai], dmap[bi]
        den = np.abs(a) + np.abs(b)
        g[ai + (comp,)] = np.where(den > 0, (b - a) / np.where(den > 0, den, 1.0), 0.0)
    return g


def ratio_gradient(dmap, h: int) -> np.ndarray:
    """Ratio gradient, shape ``(H, W, 2)``.

    Components with an out-of-bounds neighbour are 1. Components touching a
    non-positive or non-finite depth are NaN, which no threshold test passes.
    """
    dmap = np.asarray(dmap, dtype=np.float64)
    g = np.ones(dmap.shape + (2,))
    for comp, ai, bi in _pair_views(dmap, h):
        a, b = dmap[ai], dmap[bi]
        ok = np.isfinite(a) & np.isfinite(b) & (a > 0) & (b > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.maximum(a, b) / np.minimum(a, b)
        g[ai + (comp,)] = np.where(ok, r, np.nan)
    return g


def ratio_edge_components(reference, h: int, cfg: EdgeLossConfig = EdgeLossConfig()) -> np.ndarray:
    """Per-component ratio-edge mask ``(H, W, 2)`` of the reference map."""
    r = ratio_gradient(reference, h)
    with np.errstate(invalid="ignore"):
        return r > cfg.ratio_threshold(h)


def edge_mask(reference, h: int, cfg: EdgeLossConfig = EdgeLossConfig(), kind: str = "si") -> np.ndarray:
    """Boolean ``(H, W)`` edge mask of ``reference`` at spacing ``h``.

    ``kind="si"`` thresholds the larger absolute scale-invariant component
    against ``si_base * 2**(h-1)``; ``kind="ratio"`` marks pixels where either
    ratio component exceeds ``ratio_base * 2**(h-1)``.
    """
    if kind == "si":
        g = si_gradient(reference, h)
        return np.max(np.abs(g), axis=-1) > cfg.si_threshold(h)
    if kind == "ratio":
        return ratio_edge_components(reference, h, cfg).any(axis=-1)
    raise ValueError(f"unknown edge mask kind {kind!r}")


def multiscale_gradient_loss(reference, current, cfg: EdgeLossConfig = EdgeLossConfig()) -> EdgeLossReport:
    """Sum over scales of the mean ``|g_h[reference] - g_h[current]|_2`` on the reference edge mask."""
    reference = np.asarray(reference, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    _check_shapes(reference, current)
    report = EdgeLossReport(0.0)
    for h in cfg.scales:
        mask = edge_mask(reference, h, cfg, "si")
        n = int(mask.sum())
        value = 0.0
        if n:
            diff = si_gradient(reference, h) - si_gradient(current, h)
            value = float(np.sum(np.linalg.norm(diff[mask], axis=-1))) / n
        report.per_scale[h] = value
        report.mask_pixels[h] = n
    report.total = float(sum(report.per_scale.values()))
    return report


def contrastive_loss(reference, current, cfg: EdgeLossConfig = EdgeLossConfig()) -> EdgeLossReport:
    """Penalise reference ratio edges whose current ratio fell below the scale's threshold.

    Terms are ``(thr_h - r)**2`` (only while ``r < thr_h`` when one-sided),
    summed over scales and components and divided by ``H * W``.
    """
    reference = np.asarray(reference, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    _check_shapes(reference, current)
    hw = reference.size
    report = EdgeLossReport(0.0)
    for h in cfg.scales:
        thr = cfg.ratio_threshold(h)
        active, r = _contrastive_active(reference, current, h, cfg)
        report.per_scale[h] = float(np.sum((thr - r[active]) ** 2)) / hw
        report.mask_pixels[h] = int(ratio_edge_components(reference, h, cfg).any(axis=-1).sum())
    report.total = float(sum(report.per_scale.values()))
    return report


def _contrastive_active(reference, current, h, cfg):
    thr = cfg.ratio_threshold(h)
    mask0 = ratio_edge_components(reference, h, cfg)
    r = ratio_gradient(current, h)
    active = mask0 & np.isfinite(r)
    if cfg.one_sided:
        with np.errstate(invalid="ignore"):
            active &= r < thr
    return active, r


def edge_loss_gradient(
    reference, current, cfg: EdgeLossConfig = EdgeLossConfig(), which: str = MULTISCALE
) -> np.ndarray:
    """Analytic derivative of the chosen edge loss with respect to ``current``."""
    reference = np.asarray(reference, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    _check_shapes(reference, current)
    if which == MULTISCALE:
        return _multiscale_grad(reference, current, cfg)
    if which == CONTRASTIVE:
        return _contrastive_grad(reference, current, cfg)
    raise ValueError(f"unknown edge loss {which!r}")


def _multiscale_grad(reference, current, cfg):
    grad = np.zeros_like(current)
    for h in cfg.scales:
        mask = edge_mask(reference, h, cfg, "si")
        n = int(mask.sum())
        if not n:
            continue
        diff = si_gradient(reference, h) - si_gradient(current, h)
        norm = np.linalg.norm(diff, axis=-1)
        use = mask & (norm > _NORM_KINK)
        # d|diff|/d g_cur = -diff / |diff|
        dg = np.where(use[..., None], -diff / np.where(use, norm, 1.0)[..., None], 0.0) / n
        for comp, ai, bi in _pair_views(current, h):
            a, b = current[ai], current[bi]
            S = np.abs(a) + np.abs(b)
            ok = S > 0
            Ss = np.where(ok, S, 1.0)
            num = b - a
            dc_da = np.where(ok, -1.0 / Ss - num * np.sign(a) / Ss**2, 0.0)
            dc_db = np.where(ok, 1.0 / Ss - num * np.sign(b) / Ss**2, 0.0)
            up = dg[ai + (comp,)]
            grad[ai] += up * dc_da
            grad[bi] += up * dc_db
    return grad


def _contrastive_grad(reference, current, cfg):
    grad = np.zeros_like(current)
    hw = current.size
    for h in cfg.scales:
        thr = cfg.ratio_threshold(h)
        active, r = _contrastive_active(reference, current, h, cfg)
        dr = np.where(active, -2.0 * (thr - np.where(active, r, 0.0)), 0.0) / hw
        for comp, ai, bi in _pair_views(current, h):
            a, b = current[ai], current[bi]
            act = active[ai + (comp,)]
            up = dr[ai + (comp,)]
            a_s = np.where(act, a, 1.0)
            b_s = np.where(act, b, 1.0)
            # max/min picks the neighbour first, so a tie takes the b/a branch
            b_top = b_s >= a_s
            dr_da = np.where(b_top, -b_s / a_s**2, 1.0 / b_s)
            dr_db = np.where(b_top, 1.0 / a_s, -a_s / b_s**2)
            grad[ai] += np.where(act, up * dr_da, 0.0)
            grad[bi] += np.where(act, up * dr_db, 0.0)
    return grad


def edge_loss(reference, current, cfg: EdgeLossConfig = EdgeLossConfig(), which: str = MULTISCALE) -> EdgeLossReport:
    if which == MULTISCALE:
        return multiscale_gradient_loss(reference, current, cfg)
    if which == CONTRASTIVE:
        return contrastive_loss(reference, current, cfg)
    raise ValueError(f"unknown edge loss {which!r}")


def tie_map(dmap, cfg: EdgeLossConfig = EdgeLossConfig(), rel_tol: float = 1e-3) -> np.ndarray:
    """Pixels participating in a near-tie ``|a - b| < rel_tol * max(a, b)`` at any scale."""
    dmap = np.asarray(dmap, dtype=np.float64)
    near = np.zeros(dmap.shape, dtype=bool)
    for h in cfg.scales:
        for _, ai, bi in _pair_views(dmap, h):
            a, b = dmap[ai], dmap[bi]
            tie = np.abs(a - b) < rel_tol * np.maximum(np.abs(a), np.abs(b))
            near[ai] |= tie
            near[bi] |= tie
    return near


def threshold_proximity(dmap, cfg: EdgeLossConfig = EdgeLossConfig(), rel_tol: float = 1e-3) -> np.ndarray:
    """Pixels in a neighbour pair whose ratio lies within ``rel_tol`` of its scale's threshold."""
    dmap = np.asarray(dmap, dtype=np.float64)
    near = np.zeros(dmap.shape, dtype=bool)
    for h in cfg.scales:
        r = ratio_gradient(dmap, h)
        thr = cfg.ratio_threshold(h)
        with np.errstate(invalid="ignore"):
            close = np.abs(r - thr) < rel_tol * thr
        for comp, ai, bi in _pair_views(dmap, h):
            near[ai] |= close[ai + (comp,)]
            near[bi] |= close[ai + (comp,)]
    return near


def multiscale_zero_diff(reference, dmap, cfg: EdgeLossConfig = EdgeLossConfig(), rel_tol: float = 1e-3) -> np.ndarray:
    """Pixels feeding a masked gradient difference whose norm is below ``rel_tol``."""
    dmap = np.asarray(dmap, dtype=np.float64)
    near = np.zeros(dmap.shape, dtype=bool)
    for h in cfg.scales:
        mask = edge_mask(reference, h, cfg, "si")
        diff = np.linalg.norm(si_gradient(reference, h) - si_gradient(dmap, h), axis=-1)
        close = mask & (diff < rel_tol)
        for _, ai, bi in _pair_views(dmap, h):
            near[ai] |= close[ai]
            near[bi] |= close[ai]
    return near


def _check_shapes(reference, current):
    if reference.shape != current.shape or reference.ndim != 2:
        raise ValueError(f"depth maps must share a 2-dmap shape, got {reference.shape} and {current.shape}")

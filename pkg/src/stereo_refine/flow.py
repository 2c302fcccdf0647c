"""Optical-flow fields, bilinear sampling and forward-backward occlusion masks.

A flow field is an ``(H, W, 2)`` float array of ``(du, dv)`` pixel
displacements. A validity mask is an ``(H, W)`` bool array in which ``True``
marks a usable pixel (the complement of a dis-occlusion map).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import DomainError


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class Footprint:
    """The four grid neighbours used to bilinearly interpolate at ``(u, v)``.

    ``row``/``col`` index the top-left neighbour; ``fu``/``fv`` are the
    fractional offsets toward the right / lower neighbour. Entries with
    ``inside`` False carry clipped indices and must not be used.
    """

    row: np.ndarray
    col: np.ndarray
    fu: np.ndarray
    fv: np.ndarray
    inside: np.ndarray

    def weights(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Weights of the (top-left, top-right, bottom-left, bottom-right) neighbours."""
        fu, fv = self.fu, self.fv
        return (1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv


def footprint(u, v, shape: tuple[int, int]) -> Footprint:
    """Locate the bilinear footprint of continuous pixel positions on an ``(H, W)`` grid.

    A position exactly on the last row/column is inside; its footprint is
    shifted one cell back with a fractional weight of 1.
    """
    h, w = shape
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    inside = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    uu = np.where(inside, u, 0.0)
    vv = np.where(inside, v, 0.0)
    col = np.clip(np.floor(uu).astype(np.intp), 0, max(w - 2, 0))
    row = np.clip(np.floor(vv).astype(np.intp), 0, max(h - 2, 0))
    fu = uu - col
    fv = vv - row
    if w == 1:
        fu = np.zeros_like(fu)
    if h == 1:
        fv = np.zeros_like(fv)
    return Footprint(row, col, fu, fv, inside)


def corner_indices(fp: Footprint, shape):
    h, w = shape
    r1 = np.minimum(fp.row + 1, h - 1)
    c1 = np.minimum(fp.col + 1, w - 1)
    return ((fp.row, fp.col), (fp.row, c1), (r1, fp.col), (r1, c1))


def sample_bilinear(grid, u, v, valid=None) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly interpolate ``grid`` (``(H, W)`` or ``(H, W, C)``) at ``(u, v)``.

    Returns ``(values, ok)``. ``ok`` is False where the position falls outside
    the grid or any neighbour with non-zero weight is flagged invalid in
    ``valid``; the corresponding values are NaN.
    """
    grid = np.asarray(grid, dtype=np.float64)
    shape = grid.shape[:2]
    fp = footprint(u, v, shape)
    idx = corner_indices(fp, shape)
    ok = fp.inside.copy()
    if valid is not None:
        for wgt, (r, c) in zip(fp.weights(), idx):
            ok &= ~((wgt > 0) & ~valid[r, c])
    extra = (1,) * (grid.ndim - 2)
    fu = fp.fu.reshape(fp.fu.shape + extra)
    fv = fp.fv.reshape(fp.fv.shape + extra)
    g00, g01, g10, g11 = (grid[r, c] for r, c in idx)

    def lerp(a, b, t):
        # exact on constant data; a zero-weight b is never read
        with np.errstate(invalid="ignore"):
            return a + np.where(t > 0, t * (b - a), 0.0)

    out = lerp(lerp(g00, g01, fu), lerp(g10, g11, fu), fv)
    out = np.asarray(out, dtype=np.float64)
    bad = ~ok
    if np.any(bad):
        out = out.copy()
        out[bad] = np.nan
    return out, ok


def displace(x, flow) -> np.ndarray:
    """``x + F(x)`` for a single pixel; F is read bilinearly at non-integer ``x``."""
    flow = np.asarray(flow, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    val, ok = sample_bilinear(flow, x[..., 0], x[..., 1])
    if not np.all(ok):
        raise DomainError(f"pixel {x.tolist()} outside the flow field")
    return x + val


def displaced_grid(flow) -> tuple[np.ndarray, np.ndarray]:
    """Flow-displaced coordinates of every integer pixel, as ``(u, v)`` arrays."""
    flow = np.asarray(flow, dtype=np.float64)
    h, w = flow.shape[:2]
    v, u = np.mgrid[0:h, 0:w]
    return u + flow[..., 0], v + flow[..., 1]


def consistency_mask(flow_fwd, flow_bwd, threshold: float = 1.0) -> np.ndarray:
    """Forward-backward check: valid where ``|F_fwd(x) + F_bwd(x + F_fwd(x))| <= threshold``.

    Pixels whose forward target leaves the image are invalid.
    """
    flow_fwd = np.asarray(flow_fwd, dtype=np.float64)
    flow_bwd = np.asarray(flow_bwd, dtype=np.float64)
    if flow_fwd.shape != flow_bwd.shape or flow_fwd.ndim != 3 or flow_fwd.shape[2] != 2:
        raise ShapeMismatchError(
            f"flow shapes {flow_fwd.shape} and {flow_bwd.shape} do not match"
        )
    tu, tv = displaced_grid(flow_fwd)
    back, ok = sample_bilinear(flow_bwd, tu, tv)
    err = np.linalg.norm(flow_fwd + np.nan_to_num(back), axis=-1)
    return ok & (err <= threshold)


def intersect(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes {a.shape} and {b.shape} do not match")
    return a & b

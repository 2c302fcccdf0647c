"""Independent reference computations used by the tests.

Everything here is written with scalar loops and plain math so that it shares
no code with the vectorized implementations under test.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def lift_project(u, v, depth, fx, fy, cx, cy, R, T):
    """Lift pixel (u, v) at ``depth``, apply ``R @ c + T``; return (pu, pv, z)."""
    c = [(u - cx) / fx * depth, (v - cy) / fy * depth, depth]
    x = [sum(R[r][k] * c[k] for k in range(3)) + T[r] for r in range(3)]
    if x[2] <= 0:
        return None
    return fx * x[0] / x[2] + cx, fy * x[1] / x[2] + cy, x[2]


def bilinear_inverse_depth(depth, fu, fv):
    """Bilinear read of ``1/depth`` at (fu, fv); None when unreadable.

    A coordinate exactly on the last row/column reads that row/column with
    full weight; corners with zero weight need not hold a valid depth.
    """
    H, W = len(depth), len(depth[0])
    if not (0 <= fu <= W - 1 and 0 <= fv <= H - 1):
        return None
    u0 = min(int(math.floor(fu)), W - 2)
    v0 = min(int(math.floor(fv)), H - 2)
    a, b = fu - u0, fv - v0
    total = 0.0
    for (r, c, w) in ((v0, u0, (1 - a) * (1 - b)), (v0, u0 + 1, a * (1 - b)),
                      (v0 + 1, u0, (1 - a) * b), (v0 + 1, u0 + 1, a * b)):
        if w == 0:
            continue
        d = depth[r][c]
        if not (math.isfinite(d) and d > 0):
            return None
        total += w / d
    return total


def pair_loss_bruteforce(src, tgt, flow, mask, intr, R, T, disparity_weight):
    """Per-pixel loop over the pair loss; returns (spatial, disparity, combined, count)."""
    fx, fy, cx, cy = intr
    H, W = len(src), len(src[0])
    s_sum = d_sum = 0.0
    n = 0
    for v in range(H):
        for u in range(W):
            if not mask[v][u]:
                continue
            d = src[v][u]
            if not (math.isfinite(d) and d > 0):
                continue
            proj = lift_project(u, v, d, fx, fy, cx, cy, R, T)
            if proj is None:
                continue
            pu, pv, z = proj
            fu, fv = u + flow[v][u][0], v + flow[v][u][1]
            inv_t = bilinear_inverse_depth(tgt, fu, fv)
            if inv_t is None:
                continue
            s_sum += math.hypot(pu - fu, pv - fv)
            d_sum += fx * abs(1.0 / z - inv_t)
            n += 1
    if n == 0:
        return 0.0, 0.0, 0.0, 0
    return s_sum / n, d_sum / n, (s_sum + disparity_weight * d_sum) / n, n


def central_difference(f, x: np.ndarray, idx, step: float) -> float:
    hi, lo = x.copy(), x.copy()
    hi[idx] += step
    lo[idx] -= step
    return (f(hi) - f(lo)) / (2 * step)


def golden_section(f, a: float, b: float, tol: float = 1e-12, max_iter: int = 500) -> float:
    """Minimizer of a unimodal scalar function on [a, b]."""
    inv_phi = (math.sqrt(5) - 1) / 2
    c, d = b - inv_phi * (b - a), a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(max_iter):
        if abs(b - a) < tol * (abs(a) + abs(b) + 1e-300):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2


def exact_squared_error(scale: float, pred, gt) -> Fraction:
    """``sum((scale * pred - gt)**2)`` in rational arithmetic, free of rounding."""
    t = Fraction(scale)
    return sum((t * Fraction(float(p)) - Fraction(float(g))) ** 2 for p, g in zip(np.ravel(pred), np.ravel(gt)))


def si_component(dmap, r, c, h, axis):
    """Scale-invariant difference toward the pixel ``h`` to the right (axis 0) or below (axis 1)."""
    H, W = len(dmap), len(dmap[0])
    rr, cc = (r, c + h) if axis == 0 else (r + h, c)
    if rr >= H or cc >= W:
        return 0.0
    a, b = dmap[r][c], dmap[rr][cc]
    den = abs(a) + abs(b)
    return 0.0 if den == 0 else (b - a) / den


def ratio_component(dmap, r, c, h, axis):
    H, W = len(dmap), len(dmap[0])
    rr, cc = (r, c + h) if axis == 0 else (r + h, c)
    if rr >= H or cc >= W:
        return 1.0
    a, b = dmap[r][c], dmap[rr][cc]
    return max(a, b) / min(a, b)


def multiscale_bruteforce(reference, dmap, scales=(1, 2, 4, 6, 8), si_base=0.02):
    H, W = len(reference), len(reference[0])
    total = 0.0
    for h in scales:
        thr = si_base * 2 ** (h - 1)
        acc, n = 0.0, 0
        for r in range(H):
            for c in range(W):
                g0 = [si_component(reference, r, c, h, k) for k in (0, 1)]
                if max(abs(g0[0]), abs(g0[1])) <= thr:
                    continue
                g = [si_component(dmap, r, c, h, k) for k in (0, 1)]
                acc += math.hypot(g0[0] - g[0], g0[1] - g[1])
                n += 1
        total += acc / n if n else 0.0
    return total


def contrastive_bruteforce(reference, dmap, scales=(1, 2, 4, 6, 8), base=1.05, one_sided=True):
    H, W = len(reference), len(reference[0])
    total = 0.0
    for h in scales:
        thr = base * 2 ** (h - 1)
        for r in range(H):
            for c in range(W):
                for k in (0, 1):
                    if ratio_component(reference, r, c, h, k) <= thr:
                        continue
                    g = ratio_component(dmap, r, c, h, k)
                    if one_sided and g >= thr:
                        continue
                    total += (thr - g) ** 2
    return total / (H * W)

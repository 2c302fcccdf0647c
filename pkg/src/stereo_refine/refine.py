"""Test-time refinement of per-pixel depth by direct first-order optimisation.

The optimisation variable is inverse depth for every pixel of every left
(and right) depth map. Each epoch evaluates the full geometric loss over the
left-right pairs and temporal pairs, optionally adds an edge-preserving loss
against the initial left depth maps, and takes one Adam step.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .consistency import (
    LEFT_RIGHT,
    TEMPORAL,
    FramePairContext,
    GeometricLossReport,
    LossWeights,
    kink_map,
    pair_loss,
    pair_loss_gradient,
)
from .edges import (
    CONTRASTIVE,
    MULTISCALE,
    EdgeLossConfig,
    edge_loss,
    edge_loss_gradient,
    multiscale_zero_diff,
    threshold_proximity,
    tie_map,
)
from .flow import consistency_mask
from .geometry import RigidTransform, StereoRig, relative_pose, stereo_rig_transform

log = logging.getLogger(__name__)

STEREO_LEARNING_RATE = 4e-5
MONOCULAR_LEARNING_RATE = 4e-4
DEFAULT_EPOCHS = 20
FLOW_CONSISTENCY_THRESHOLD = 1.0

EDGE_MODES = ("none", MULTISCALE, CONTRASTIVE)
SAMPLING_MODES = ("consecutive", "hierarchical")


class RefinementError(RuntimeError):
    pass


@dataclass
class VideoBundle:
    """Inputs of one refinement run. Depth stacks have shape ``(N, H, W)``.

    ``lr_flows[i]`` holds ``(left_i -> right_i, right_i -> left_i)`` flows and
    ``temporal_flows[(i, j)]`` holds ``(left_i -> left_j, left_j -> left_i)``.
    Optional masks are intersected with the forward-backward flow check.
    """

    rig: StereoRig
    poses: list[RigidTransform]
    left_depths: np.ndarray
    right_depths: np.ndarray | None
    lr_flows: list[tuple[np.ndarray, np.ndarray]]
    temporal_flows: dict[tuple[int, int], tuple[np.ndarray, np.ndarray]]
    lr_masks: list[np.ndarray] | None = None
    temporal_masks: dict[tuple[int, int], np.ndarray] | None = None
    left_images: np.ndarray | None = None
    right_images: np.ndarray | None = None

    def __post_init__(self):
        self.left_depths = np.asarray(self.left_depths, dtype=np.float64)
        shape = self.rig.intrinsics.shape
        n = self.frames
        if self.left_depths.shape[1:] != shape:
            raise ValueError(f"left depths have shape {self.left_depths.shape[1:]}, camera is {shape}")
        if len(self.poses) != n:
            raise ValueError(f"trajectory has {len(self.poses)} poses for {n} frames")
        if self.right_depths is not None:
            self.right_depths = np.asarray(self.right_depths, dtype=np.float64)
            if self.right_depths.shape != self.left_depths.shape:
                raise ValueError("left and right depth stacks differ in shape")
        if self.lr_flows and len(self.lr_flows) != n:
            raise ValueError(f"{len(self.lr_flows)} left-right flow pairs for {n} frames")
        if self.lr_flows and self.right_depths is None:
            raise ValueError("left-right pairs need right depth maps")

    @property
    def frames(self) -> int:
        return self.left_depths.shape[0]


@dataclass(frozen=True)
class RefinerConfig:
    epochs: int = DEFAULT_EPOCHS
    learning_rate: float = STEREO_LEARNING_RATE
    disparity_weight: float = 0.1
    w_edge: float = 1.0
    edge: str = "none"
    sampling: str = "consecutive"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    d_min: float = 0.1
    d_max: float = 1000.0
    flow_threshold: float = FLOW_CONSISTENCY_THRESHOLD
    use_lr: bool = True
    use_temporal: bool = True
    edge_cfg: EdgeLossConfig = field(default_factory=EdgeLossConfig)

    def __post_init__(self):
        problems = []
        if int(self.epochs) != self.epochs or self.epochs < 1:
            problems.append(f"epochs must be a positive integer, got {self.epochs}")
        if not self.learning_rate > 0:
            problems.append(f"learning_rate must be positive, got {self.learning_rate}")
        if self.disparity_weight < 0:
            problems.append(f"disparity_weight must be non-negative, got {self.disparity_weight}")
        if self.w_edge < 0:
            problems.append(f"w_edge must be non-negative, got {self.w_edge}")
        if self.edge not in EDGE_MODES:
            problems.append(f"edge must be one of {EDGE_MODES}, got {self.edge!r}")
        if self.sampling not in SAMPLING_MODES:
            problems.append(f"sampling must be one of {SAMPLING_MODES}, got {self.sampling!r}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0 <= b < 1:
                problems.append(f"{name} must lie in [0, 1), got {b}")
        if not self.eps > 0:
            problems.append(f"eps must be positive, got {self.eps}")
        if not 0 < self.d_min < self.d_max:
            problems.append(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")
        if not self.flow_threshold > 0:
            problems.append(f"flow_threshold must be positive, got {self.flow_threshold}")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.disparity_weight, self.w_edge)


@dataclass
class ParameterField:
    """Inverse depth (1/m) of every optimised pixel; ``right`` may be None."""

    left: np.ndarray
    right: np.ndarray | None = None

    @classmethod
    def from_depths(cls, left, right=None) -> ParameterField:
        left = 1.0 / np.asarray(left, dtype=np.float64)
        right = None if right is None else 1.0 / np.asarray(right, dtype=np.float64)
        return cls(left, right)

    def depths(self):
        return 1.0 / self.left, None if self.right is None else 1.0 / self.right

    def stacked(self) -> np.ndarray:
        return self.left if self.right is None else np.stack([self.left, self.right])

    @classmethod
    def unstack(cls, arr: np.ndarray, has_right: bool) -> ParameterField:
        return cls(arr[0].copy(), arr[1].copy()) if has_right else cls(arr.copy(), None)

    def clamp(self, cfg: RefinerConfig) -> ParameterField:
        lo, hi = 1.0 / cfg.d_max, 1.0 / cfg.d_min
        return ParameterField(
            np.clip(self.left, lo, hi), None if self.right is None else np.clip(self.right, lo, hi)
        )


class Adam:
    """Adaptive-moment gradient descent on a single array."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, x: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(x)
            self.v = np.zeros_like(x)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return x - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def build_pair_sets(n: int, sampling: str = "consecutive"):
    """Left-right pairs ``(i, i)`` and temporal pairs ``(i, j)`` for ``n`` frames.

    Hierarchical sampling pairs every ``i`` with ``i + 2**k`` inside the clip.
    """
    if n < 2:
        raise ValueError(f"need at least two frames to form temporal pairs, got {n}")
    s_lr = [(i, i) for i in range(n)]
    if sampling == "consecutive":
        s_t = [(i - 1, i) for i in range(1, n)]
    elif sampling == "hierarchical":
        s_t = []
        gap = 1
        while gap < n:
            s_t += [(i, i + gap) for i in range(n - gap)]
            gap *= 2
    else:
        raise ValueError(f"unknown sampling mode {sampling!r}")
    return s_lr, s_t


@dataclass
class _PairSpec:
    kind: str
    src: tuple[int, int]  # (view, frame), view 0 = left, 1 = right
    tgt: tuple[int, int]
    flow: np.ndarray
    mask: np.ndarray
    transform: RigidTransform
    label: str


def prepare_pairs(bundle: VideoBundle, cfg: RefinerConfig) -> list[_PairSpec]:
    """Resolve pair sets into flows, joint validity masks and transforms."""
    s_lr, s_t = build_pair_sets(bundle.frames, cfg.sampling)
    pairs = []
    if cfg.use_lr and bundle.lr_flows:
        motion = stereo_rig_transform(bundle.rig)
        for i, _ in s_lr:
            fwd, bwd = bundle.lr_flows[i]
            mask = consistency_mask(fwd, bwd, cfg.flow_threshold)
            if bundle.lr_masks is not None:
                mask &= np.asarray(bundle.lr_masks[i], dtype=bool)
            pairs.append(_PairSpec(LEFT_RIGHT, (0, i), (1, i), fwd, mask, motion, f"lr({i})"))
    if cfg.use_temporal:
        for i, j in s_t:
            if (i, j) not in bundle.temporal_flows:
                raise ValueError(f"no flow supplied for temporal pair ({i}, {j})")
            fwd, bwd = bundle.temporal_flows[(i, j)]
            mask = consistency_mask(fwd, bwd, cfg.flow_threshold)
            if bundle.temporal_masks is not None and (i, j) in bundle.temporal_masks:
                mask &= np.asarray(bundle.temporal_masks[(i, j)], dtype=bool)
            motion = relative_pose(bundle.poses[i], bundle.poses[j])
            pairs.append(_PairSpec(TEMPORAL, (0, i), (0, j), fwd, mask, motion, f"t({i},{j})"))
    return pairs


@dataclass
class LossReport:
    total: float
    geometric: GeometricLossReport
    edge: float
    edge_per_frame: list[float]
    grad: ParameterField | None = None


class Problem:
    """A bundle, a configuration and the edge anchors, ready for loss evaluation."""

    def __init__(self, bundle: VideoBundle, cfg: RefinerConfig, anchors=None, pairs=None):
        self.bundle = bundle
        self.cfg = cfg
        self.pairs = prepare_pairs(bundle, cfg) if pairs is None else pairs
        self.has_right = bundle.right_depths is not None and any(p.kind == LEFT_RIGHT for p in self.pairs)
        if anchors is None:
            anchors = 1.0 / self.initial_params().left
        self.anchors = np.asarray(anchors, dtype=np.float64)

    def initial_params(self) -> ParameterField:
        right = self.bundle.right_depths if self.bundle.right_depths is not None else None
        params = ParameterField.from_depths(self.bundle.left_depths, right)
        return params.clamp(self.cfg)

    def _contexts(self, params: ParameterField):
        left, right = params.depths()
        stacks = (left, right)
        intr = self.bundle.rig.intrinsics
        for p in self.pairs:
            src = stacks[p.src[0]][p.src[1]]
            tgt = stacks[p.tgt[0]][p.tgt[1]]
            yield p, FramePairContext(src, tgt, p.flow, p.mask, p.transform, intr, p.kind, p.label)

    def evaluate(self, params: ParameterField, with_grad: bool = False) -> LossReport:
        cfg = self.cfg
        w = cfg.weights
        left, right = params.depths()
        g_left = np.zeros_like(left) if with_grad else None
        g_right = (np.zeros_like(right) if right is not None else None) if with_grad else None
        g_stacks = (g_left, g_right)

        reports = []
        for spec, ctx in self._contexts(params):
            rep = pair_loss(ctx, w)
            if not np.isfinite(rep.combined):
                raise RefinementError(f"non-finite loss in pair {spec.label} ({spec.kind})")
            reports.append(rep)
            if with_grad:
                gs, gt = pair_loss_gradient(ctx, w)
                g_stacks[spec.src[0]][spec.src[1]] += gs
                g_stacks[spec.tgt[0]][spec.tgt[1]] += gt
        lr = float(sum(r.combined for r in reports if r.kind == LEFT_RIGHT))
        tt = float(sum(r.combined for r in reports if r.kind == TEMPORAL))
        geo = GeometricLossReport(lr + tt, lr, tt, reports)

        edge_per_frame = []
        if cfg.edge != "none":
            for i in range(left.shape[0]):
                value = edge_loss(self.anchors[i], left[i], cfg.edge_cfg, cfg.edge).total
                if not np.isfinite(value):
                    raise RefinementError(f"non-finite {cfg.edge} edge loss in frame {i}")
                edge_per_frame.append(value)
                if with_grad and cfg.w_edge > 0:
                    g_left[i] += cfg.w_edge * edge_loss_gradient(self.anchors[i], left[i], cfg.edge_cfg, cfg.edge)
        edge = float(sum(edge_per_frame))
        total = geo.total + cfg.w_edge * edge

        grad = None
        if with_grad:
            # chain rule to inverse depth q = 1/d: dd/dq = -d**2
            grad = ParameterField(
                -g_left * left**2, None if right is None else -g_right * right**2
            )
        return LossReport(total, geo, edge, edge_per_frame, grad)

    def kink_map(self, params: ParameterField, rel_tol: float = 1e-3) -> ParameterField:
        """Parameters sitting near a non-differentiable point of any loss term."""
        left, right = params.depths()
        k_left = np.zeros(left.shape, dtype=bool)
        k_right = None if right is None else np.zeros(right.shape, dtype=bool)
        stacks = (k_left, k_right)
        for spec, ctx in self._contexts(params):
            ks, kt = kink_map(ctx, rel_tol)
            stacks[spec.src[0]][spec.src[1]] |= ks
            stacks[spec.tgt[0]][spec.tgt[1]] |= kt
        if self.cfg.edge != "none":
            ecfg = self.cfg.edge_cfg
            for i in range(left.shape[0]):
                k_left[i] |= tie_map(left[i], ecfg, rel_tol)
                if self.cfg.edge == CONTRASTIVE:
                    k_left[i] |= threshold_proximity(left[i], ecfg, rel_tol)
                else:
                    k_left[i] |= multiscale_zero_diff(self.anchors[i], left[i], ecfg, rel_tol)
        return ParameterField(k_left, k_right)


def total_loss(params: ParameterField, bundle: VideoBundle, cfg: RefinerConfig, anchors=None) -> LossReport:
    """Geometric loss plus ``w_edge`` times the summed per-frame edge loss.

    ``anchors`` are the reference depth maps of the edge loss; by default the
    bundle's initial left depths.
    """
    return Problem(bundle, cfg, anchors).evaluate(params)


@dataclass
class RefineReport:
    history: list[dict]
    depths_left: np.ndarray
    depths_right: np.ndarray | None
    final_loss: dict
    wall_time: float
    config: RefinerConfig


def _history_row(epoch: int, rep: LossReport) -> dict:
    return {
        "epoch": epoch,
        "total": rep.total,
        "geometric": rep.geometric.total,
        "lr": rep.geometric.lr,
        "temporal": rep.geometric.temporal,
        "edge": rep.edge,
    }


def refine(bundle: VideoBundle, cfg: RefinerConfig, progress=None) -> RefineReport:
    """Optimise inverse depth for ``cfg.epochs`` full-batch Adam steps.

    ``history[k]`` holds the losses evaluated at the start of epoch ``k``;
    ``final_loss`` the losses of the returned depths.
    """
    start = time.perf_counter()
    problem = Problem(bundle, cfg)
    params = problem.initial_params()
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    lo, hi = 1.0 / cfg.d_max, 1.0 / cfg.d_min
    history = []
    for epoch in range(cfg.epochs):
        rep = problem.evaluate(params, with_grad=True)
        if not np.isfinite(rep.total):
            raise RefinementError(f"non-finite total loss at epoch {epoch}")
        history.append(_history_row(epoch, rep))
        if progress is not None:
            progress(history[-1])
        theta = opt.step(params.stacked(), rep.grad.stacked())
        if not np.all(np.isfinite(theta)):
            raise RefinementError(f"non-finite parameters after epoch {epoch}")
        params = ParameterField.unstack(np.clip(theta, lo, hi), params.right is not None)
    final = problem.evaluate(params)
    left, right = params.depths()
    return RefineReport(
        history, left, right, _history_row(cfg.epochs, final), time.perf_counter() - start, cfg
    )


@dataclass
class GradientCheckResult:
    max_rel_error: float
    checked: int
    worst: tuple | None
    entries: list[tuple] = field(default_factory=list)


def gradient_check(
    bundle: VideoBundle,
    cfg: RefinerConfig,
    samples: int = 200,
    rel_step: float = 1e-6,
    params: ParameterField | None = None,
    anchors=None,
    floor: float = 1e-10,
) -> GradientCheckResult:
    """Compare the analytic inverse-depth gradient of the total loss with central differences.

    Entries are drawn at random (seeded by ``cfg.seed``) among parameters not
    flagged by :meth:`Problem.kink_map`. Relative errors are taken against
    ``floor`` times the largest gradient magnitude at least, so entries whose
    gradient is pure rounding noise do not count as mismatches.
    """
    problem = Problem(bundle, cfg, anchors)
    if params is None:
        params = problem.initial_params()
    has_right = params.right is not None
    base = params.stacked()
    grad = problem.evaluate(params, with_grad=True).grad.stacked()
    kinks = problem.kink_map(params).stacked()
    atol = floor * float(np.abs(grad).max())
    candidates = np.flatnonzero(~kinks.ravel())
    rng = np.random.default_rng(cfg.seed)
    picks = rng.choice(candidates, size=min(samples, candidates.size), replace=False)

    worst, max_err, entries = None, 0.0, []
    for flat in np.sort(picks):
        idx = np.unravel_index(flat, base.shape)
        step = rel_step * abs(base[idx])
        hi_arr, lo_arr = base.copy(), base.copy()
        hi_arr[idx] += step
        lo_arr[idx] -= step
        f_hi = problem.evaluate(ParameterField.unstack(hi_arr, has_right)).total
        f_lo = problem.evaluate(ParameterField.unstack(lo_arr, has_right)).total
        numeric = (f_hi - f_lo) / (2 * step)
        analytic = grad[idx]
        scale = max(abs(numeric), abs(analytic), atol)
        err = 0.0 if scale == 0 else abs(numeric - analytic) / scale
        entries.append((idx, analytic, numeric, err))
        if err > max_err or worst is None:
            max_err = max(err, max_err)
            worst = (idx, analytic, numeric)
    return GradientCheckResult(max_err, len(entries), worst, entries)


def with_overrides(cfg: RefinerConfig, **kwargs) -> RefinerConfig:
    return replace(cfg, **{k: v for k, v in kwargs.items() if v is not None})

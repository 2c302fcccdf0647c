"""Command-line front end: ``synth``, ``refine``, ``eval`` and ``losses``.

Exit codes: 0 success, 1 invalid input or flags, 2 runtime failure. Tables go
to stdout, progress and diagnostics to stderr, machine-readable records to
files in the output directory.
"""

from __future__ import annotations

import argparse
import configparser
import contextlib
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import dataio
from .edges import CONTRASTIVE, MULTISCALE, EdgeLossConfig, edge_loss, edge_mask
from .flow import consistency_mask
from .metrics import MetricError, align_scale, eval_depth, eval_sequence, photometric_metric
from .refine import SAMPLING_MODES, Problem, RefinementError, RefinerConfig, refine
from .synth import LEFT, PRESETS, RIGHT, make_bundle, perturb, scene_preset

log = logging.getLogger("stereo_refine")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

DEPTH_NAME = "{view}_{i:03d}.pfm"


class UsageError(Exception):
    """Bad flags or inputs; maps to exit code 1."""


@dataclass
class CommandOutcome:
    exit_code: int
    paths: list[Path] = field(default_factory=list)
    summary: str = ""


@contextlib.contextmanager
def locked_dir(out_dir: Path):
    """Create ``out_dir`` and hold an exclusive lock file in it for the duration."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"output directory {out_dir} is locked by another run ({lock})") from None
    os.close(fd)
    try:
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


# --- synth ----------------------------------------------------------------------

_SCENE_SCHEMA = {
    "scene": {"preset": False, "seed": False, "width": False, "height": False, "frames": False},
    "perturb": {"noise": False, "blur": False, "scale": False, "seed": False},
    "refiner": {k: False for k in dataio._SCHEMA["refiner"]},
    "edges": {k: False for k in dataio._SCHEMA["edges"]},
}

SCENE_DEFAULTS = {
    "scene": {"preset": "boxes", "seed": "0", "width": "64", "height": "48", "frames": "5"},
    "perturb": {"noise": "0.1", "blur": "0", "scale": "1", "seed": "1"},
}


@dataclass(frozen=True)
class SceneSettings:
    preset: str = "boxes"
    seed: int = 0
    width: int = 64
    height: int = 48
    frames: int = 5
    noise: float = 0.1
    blur: float = 0.0
    scale: float = 1.0
    perturb_seed: int = 1
    refiner: dict = field(default_factory=dict)
    edges: dict = field(default_factory=dict)


def read_scene_settings(path) -> SceneSettings:
    """Scene manifest: ``[scene]`` preset and size, ``[perturb]`` initial-depth corruption.

    ``[refiner]`` and ``[edges]`` are validated and copied into the run manifest.
    """
    problems: list[str] = []
    text = "" if path is None else Path(path).read_text(encoding="utf-8")
    data = dataio.parse_ini(text, _SCENE_SCHEMA, problems)
    merged = {s: {**SCENE_DEFAULTS[s], **data.get(s, {})} for s in SCENE_DEFAULTS}
    values = {}
    casts = {
        ("scene", "preset"): ("preset", str), ("scene", "seed"): ("seed", int),
        ("scene", "width"): ("width", int), ("scene", "height"): ("height", int),
        ("scene", "frames"): ("frames", int), ("perturb", "noise"): ("noise", float),
        ("perturb", "blur"): ("blur", float), ("perturb", "scale"): ("scale", float),
        ("perturb", "seed"): ("perturb_seed", int),
    }
    for (section, key), (attr, kind) in casts.items():
        raw = merged[section][key]
        try:
            values[attr] = kind(raw.strip())
        except ValueError:
            problems.append(f"[{section}] {key}: cannot parse {raw!r}")
    if values.get("preset") not in PRESETS:
        problems.append(f"[scene] preset must be one of {PRESETS}, got {values.get('preset')!r}")
    if values.get("frames", 2) < 2:
        problems.append("[scene] frames must be at least 2")
    if values.get("width", 1) < 8 or values.get("height", 1) < 8:
        problems.append("[scene] width and height must be at least 8")
    if values.get("noise", 0) < 0 or values.get("blur", 0) < 0 or not values.get("scale", 1) > 0:
        problems.append("[perturb] noise and blur must be non-negative and scale positive")
    refiner = data.get("refiner", {})
    edges = data.get("edges", {})
    try:
        kw = dataio.refiner_settings(refiner, problems)
        kw["edge_cfg"] = EdgeLossConfig(**dataio.edge_settings(edges, problems))
        RefinerConfig(**kw)
    except (ValueError, TypeError) as exc:
        problems.append(f"configuration: {exc}")
    if problems:
        raise dataio.ManifestError(problems)
    return SceneSettings(**values, refiner=refiner, edges=edges)


def _run_manifest_text(s: SceneSettings, baseline: float) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp["run"] = {"frames": str(s.frames), "name": f"{s.preset}-{s.seed}"}
    cp["camera"] = {"intrinsics": "intrinsics.txt", "baseline": repr(float(baseline))}
    cp["inputs"] = {
        "left_depths": "init/left_{i:03d}.pfm",
        "right_depths": "init/right_{i:03d}.pfm",
        "left_images": "images/left_{i:03d}.pfm",
        "right_images": "images/right_{i:03d}.pfm",
        "poses": "poses.txt",
    }
    cp["flows"] = {
        "lr_forward": "flows/lr_{i:03d}_fwd.flo",
        "lr_backward": "flows/lr_{i:03d}_bwd.flo",
        "temporal_forward": "flows/t_{i:03d}_{j:03d}_fwd.flo",
        "temporal_backward": "flows/t_{i:03d}_{j:03d}_bwd.flo",
        "lr_masks": "masks/lr_{i:03d}.png",
        "temporal_masks": "masks/t_{i:03d}_{j:03d}.png",
    }
    if s.refiner:
        cp["refiner"] = s.refiner
    if s.edges:
        cp["edges"] = s.edges
    lines = []
    for section in cp.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in cp[section].items()]
        lines.append("")
    return "\n".join(lines)


def cmd_synth(scene_manifest, out_dir) -> CommandOutcome:
    """Render a synthetic bundle plus a perturbed initialization and its run manifest."""
    s = read_scene_settings(scene_manifest)
    spec = scene_preset(s.preset, s.seed, s.width, s.height, s.frames)
    log.info("rendering %s (seed %d, %dx%d, %d frames)", s.preset, s.seed, s.width, s.height, s.frames)
    sb = make_bundle(spec)
    init_left = perturb(sb.gt_left, noise=s.noise, blur=s.blur, scale=s.scale, seed=s.perturb_seed)
    init_right = perturb(sb.gt_right, noise=s.noise, blur=s.blur, scale=s.scale, seed=s.perturb_seed + 1)

    out = Path(out_dir)
    written = []
    with locked_dir(out):
        for sub in ("gt", "init", "images", "flows", "masks"):
            (out / sub).mkdir(exist_ok=True)

        def put(rel, writer, value):
            writer(out / rel, value)
            written.append(out / rel)

        for i in range(s.frames):
            for view, gt, init, img in ((LEFT, sb.gt_left, init_left, sb.left_images),
                                        (RIGHT, sb.gt_right, init_right, sb.right_images)):
                name = DEPTH_NAME.format(view=view, i=i)
                put(f"gt/{name}", dataio.write_pfm, gt[i])
                put(f"init/{name}", dataio.write_pfm, init[i])
                put(f"images/{name}", dataio.write_pfm, img[i])
            f = sb.lr_flows[i]
            put(f"flows/lr_{i:03d}_fwd.flo", dataio.write_flo, f.forward)
            put(f"flows/lr_{i:03d}_bwd.flo", dataio.write_flo, f.backward)
            put(f"masks/lr_{i:03d}.png", dataio.write_mask, f.mask)
        for (i, j), f in sorted(sb.temporal_flows.items()):
            put(f"flows/t_{i:03d}_{j:03d}_fwd.flo", dataio.write_flo, f.forward)
            put(f"flows/t_{i:03d}_{j:03d}_bwd.flo", dataio.write_flo, f.backward)
            put(f"masks/t_{i:03d}_{j:03d}.png", dataio.write_mask, f.mask)
        put("poses.txt", dataio.write_kitti_poses, sb.poses)
        put("intrinsics.txt", dataio.write_intrinsics, spec.rig.intrinsics)
        put("manifest.ini", lambda p, t: p.write_text(t, encoding="utf-8"),
            _run_manifest_text(s, spec.rig.baseline))
    summary = f"wrote {len(written)} files for a {s.frames}-frame {s.width}x{s.height} '{s.preset}' bundle to {out}"
    return CommandOutcome(EXIT_OK, written, summary)


# --- refine ---------------------------------------------------------------------

HISTORY_COLUMNS = ["epoch", "total", "geometric", "lr", "temporal"]


def cmd_refine(manifest, out_dir, overrides: dict | None = None) -> CommandOutcome:
    """Refine the manifest's initial depths; write depths, history table and records."""
    m = dataio.read_manifest(manifest, overrides)
    cfg = m.refiner
    bundle = dataio.load_bundle(m)
    log.info("refining %d frames: %d epochs, lr %g, edge %s, sampling %s",
             m.frames, cfg.epochs, cfg.learning_rate, cfg.edge, cfg.sampling)

    def progress(row):
        log.debug("epoch %d total %.6g", row["epoch"], row["total"])

    report = refine(bundle, cfg, progress)
    log.info("finished in %.2f s", report.wall_time)
    columns = HISTORY_COLUMNS + (["edge"] if cfg.edge != "none" else [])
    rows = report.history + [report.final_loss]

    out = Path(out_dir)
    written = []
    with locked_dir(out):
        for i in range(m.frames):
            p = out / DEPTH_NAME.format(view=LEFT, i=i)
            dataio.write_pfm(p, report.depths_left[i])
            written.append(p)
            if report.depths_right is not None:
                p = out / DEPTH_NAME.format(view=RIGHT, i=i)
                dataio.write_pfm(p, report.depths_right[i])
                written.append(p)
        dataio.write_table(out / "history.txt", rows, columns)
        dataio.write_records(out / "history.jsonl", [{c: r[c] for c in columns} for r in rows])
        (out / "config.ini").write_text(dataio.config_to_ini(cfg), encoding="utf-8")
        written += [out / "history.txt", out / "history.jsonl", out / "config.ini"]
    sys.stdout.write(dataio.format_table(rows, columns))
    first, last = report.history[0]["geometric"], report.final_loss["geometric"]
    return CommandOutcome(EXIT_OK, written, f"geometric loss {first:.6g} -> {last:.6g} over {cfg.epochs} epochs")


# --- eval -----------------------------------------------------------------------


def _frame_files(directory: Path, view: str, n: int):
    paths = [directory / DEPTH_NAME.format(view=view, i=i) for i in range(n)]
    missing = [str(p) for p in paths if not p.is_file()]
    return paths, missing


def cmd_eval(manifest, pred_dir, gt_dir=None, align=False, masked=True, out_dir=None) -> CommandOutcome:
    """Per-frame depth metrics against ``gt_dir``, or the photometric metric without it."""
    m = dataio.read_manifest(manifest)
    pred_paths, missing = _frame_files(Path(pred_dir), LEFT, m.frames)
    gt_paths = None
    if gt_dir is not None:
        gt_paths, gt_missing = _frame_files(Path(gt_dir), LEFT, m.frames)
        missing += gt_missing
    if missing:
        raise UsageError("missing frames:\n  " + "\n  ".join(missing))
    preds = [dataio.read_depth(p) for p in pred_paths]

    rows = []
    if gt_paths is not None:
        results = []
        for i, (pred, gp) in enumerate(zip(preds, gt_paths)):
            gt = dataio.read_depth(gp)
            scale = 1.0
            if align:
                pred, scale = align_scale(pred, gt)
            r = eval_depth(pred, gt)
            results.append(r)
            rows.append({"frame": str(i), **vars(r)} | ({"scale": scale} if align else {}))
        mean = eval_sequence(results)
        rows.append({"frame": "mean", **vars(mean)})
        columns = ["frame", "abs_rel", "exceed_1", "exceed_2", "exceed_3", "evaluated_pixels"]
        if align:
            columns.append("scale")
    else:
        if m.left_images is None or m.right_images is None:
            raise UsageError("photometric evaluation needs left_images and right_images in the manifest")
        bundle = dataio.load_bundle(m)
        results = []
        for i, pred in enumerate(preds):
            mask = None
            if masked and bundle.lr_flows:
                fwd, bwd = bundle.lr_flows[i]
                mask = consistency_mask(fwd, bwd, m.refiner.flow_threshold)
                if bundle.lr_masks is not None:
                    mask &= bundle.lr_masks[i]
            r = photometric_metric(bundle.left_images[i], bundle.right_images[i], pred, m.rig, mask)
            results.append(r)
            rows.append({"frame": str(i), **vars(r)})
        rows.append({"frame": "mean", **vars(eval_sequence(results))})
        columns = ["frame", "l1", "l2", "covered_pixels"]

    written = []
    if out_dir is not None:
        out = Path(out_dir)
        with locked_dir(out):
            dataio.write_table(out / "eval.txt", rows, columns)
            dataio.write_records(out / "eval.jsonl", [{c: r[c] for c in columns if c in r} for r in rows])
            written = [out / "eval.txt", out / "eval.jsonl"]
    sys.stdout.write(dataio.format_table(rows, columns))
    return CommandOutcome(EXIT_OK, written, f"evaluated {m.frames} frames")


# --- losses ---------------------------------------------------------------------


def cmd_losses(manifest, depth_dir, dump_masks=None, si_base=None, edge=None, out_dir=None) -> CommandOutcome:
    """Loss breakdown of the depths in ``depth_dir`` without optimizing.

    Edge losses compare against the manifest's initial depths, as during refinement.
    """
    overrides = {} if edge is None else {"edge": dataio.EDGE_ALIASES[edge]}
    m = dataio.read_manifest(manifest, overrides)
    cfg = m.refiner
    if si_base is not None:
        if not si_base > 0:
            raise UsageError(f"--si-base must be positive, got {si_base}")
        cfg = replace(cfg, edge_cfg=replace(cfg.edge_cfg, si_base=si_base))
    left_paths, missing = _frame_files(Path(depth_dir), LEFT, m.frames)
    right_paths, right_missing = _frame_files(Path(depth_dir), RIGHT, m.frames)
    if missing:
        raise UsageError("missing frames:\n  " + "\n  ".join(missing))
    left = np.stack([dataio.read_depth(p) for p in left_paths])
    if right_missing and m.lr_flows:
        raise UsageError("missing right frames:\n  " + "\n  ".join(right_missing))
    right = None if right_missing else np.stack([dataio.read_depth(p) for p in right_paths])

    init = dataio.load_bundle(m)
    bundle = dataio.load_bundle(m, left, right)
    problem = Problem(bundle, cfg, anchors=init.left_depths)
    params = problem.initial_params()
    report = problem.evaluate(params)

    pair_rows = [
        {"pair": p.label, "kind": p.kind, "spatial": p.spatial, "disparity": p.disparity,
         "combined": p.combined, "valid": p.valid_count,
         "coverage": p.valid_count / float(m.rig.intrinsics.width * m.rig.intrinsics.height)}
        for p in report.geometric.pairs
    ]
    g = report.geometric
    pair_rows.append({"pair": "total", "kind": "", "combined": g.total})
    pair_cols = ["pair", "kind", "spatial", "disparity", "combined", "valid", "coverage"]

    depths_left, _ = params.depths()
    edge_rows = []
    for i in range(m.frames):
        anchor = init.left_depths[i]
        ms = edge_loss(anchor, depths_left[i], cfg.edge_cfg, MULTISCALE)
        cl = edge_loss(anchor, depths_left[i], cfg.edge_cfg, CONTRASTIVE)
        for h in cfg.edge_cfg.scales:
            edge_rows.append({
                "frame": i, "scale": h, "multiscale": ms.per_scale[h], "contrastive": cl.per_scale[h],
                "si_mask": int(edge_mask(anchor, h, cfg.edge_cfg, "si").sum()),
                "ratio_mask": int(edge_mask(anchor, h, cfg.edge_cfg, "ratio").sum()),
            })
    edge_cols = ["frame", "scale", "multiscale", "contrastive", "si_mask", "ratio_mask"]

    written = []
    if dump_masks is not None:
        mask_dir = Path(dump_masks)
        with locked_dir(mask_dir):
            for spec in problem.pairs:
                p = mask_dir / f"valid_{spec.label.replace('(', '_').replace(')', '').replace(',', '_')}.png"
                dataio.write_mask(p, spec.mask)
                written.append(p)
            for i in range(m.frames):
                for h in cfg.edge_cfg.scales:
                    for kind in ("si", "ratio"):
                        p = mask_dir / f"edge_{kind}_{i:03d}_h{h}.png"
                        dataio.write_mask(p, edge_mask(init.left_depths[i], h, cfg.edge_cfg, kind))
                        written.append(p)
    if out_dir is not None:
        out = Path(out_dir)
        with locked_dir(out):
            dataio.write_records(out / "losses.jsonl", [
                {"record": "pair", **{c: r.get(c) for c in pair_cols}} for r in pair_rows
            ] + [{"record": "edge", **r} for r in edge_rows] + [
                {"record": "total", "total": report.total, "geometric": g.total, "lr": g.lr,
                 "temporal": g.temporal, "edge": report.edge, "edge_mode": cfg.edge}
            ])
            written.append(out / "losses.jsonl")
    sys.stdout.write(dataio.format_table(pair_rows, pair_cols))
    sys.stdout.write("\n")
    sys.stdout.write(dataio.format_table(edge_rows, edge_cols))
    summary = f"geometric {g.total:.6g} (left-right {g.lr:.6g}, temporal {g.temporal:.6g}); total {report.total:.6g}"
    return CommandOutcome(EXIT_OK, written, summary)


# --- argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text}")
    return value


def _positive_float(text):
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return value


def _non_negative_float(text):
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"must be non-negative, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stereo-refine", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="render a synthetic bundle and its run manifest")
    p.add_argument("out_dir", type=Path)
    p.add_argument("--scene", type=Path, default=None, help="scene manifest (defaults: boxes, seed 0, 64x48, 5 frames)")

    p = sub.add_parser("refine", help="refine initial depths of a run manifest")
    p.add_argument("manifest", type=Path)
    p.add_argument("out_dir", type=Path)
    p.add_argument("--epochs", type=_positive_int)
    p.add_argument("--lr", type=_positive_float, dest="learning_rate")
    p.add_argument("--lambda", type=_non_negative_float, dest="disparity_weight")
    p.add_argument("--edge", choices=["none", "ms", "contrastive"])
    p.add_argument("--w-edge", type=_non_negative_float, dest="w_edge")
    p.add_argument("--sampling", choices=list(SAMPLING_MODES))
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="evaluate predicted depths")
    p.add_argument("manifest", type=Path)
    p.add_argument("pred_dir", type=Path)
    p.add_argument("gt_dir", type=Path, nargs="?", default=None)
    p.add_argument("--align-scale", action="store_true", help="per-frame least-squares scale alignment")
    p.add_argument("--unmasked", action="store_true", help="photometric metric over all reprojected pixels")
    p.add_argument("--out", type=Path, default=None, help="directory for eval.txt and eval.jsonl")

    p = sub.add_parser("losses", help="loss breakdown of a set of depth maps")
    p.add_argument("manifest", type=Path)
    p.add_argument("depth_dir", type=Path)
    p.add_argument("--dump-masks", type=Path, default=None)
    p.add_argument("--si-base", type=_positive_float, default=None)
    p.add_argument("--edge", choices=["none", "ms", "contrastive"], default=None)
    p.add_argument("--out", type=Path, default=None, help="directory for losses.jsonl")
    return parser


def run(argv=None) -> CommandOutcome:
    """Parse ``argv`` and execute one command; never raises."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        log.error("%s", exc)
        return CommandOutcome(EXIT_INVALID, summary=str(exc))
    try:
        if args.command == "synth":
            return cmd_synth(args.scene, args.out_dir)
        if args.command == "refine":
            keys = ("epochs", "learning_rate", "disparity_weight", "w_edge", "sampling", "seed")
            overrides = {k: getattr(args, k) for k in keys if getattr(args, k) is not None}
            if args.edge is not None:
                overrides["edge"] = dataio.EDGE_ALIASES[args.edge]
            return cmd_refine(args.manifest, args.out_dir, overrides)
        if args.command == "eval":
            return cmd_eval(args.manifest, args.pred_dir, args.gt_dir, args.align_scale,
                            not args.unmasked, args.out)
        return cmd_losses(args.manifest, args.depth_dir, args.dump_masks, args.si_base, args.edge, args.out)
    except (UsageError, dataio.ManifestError, dataio.FormatError, MetricError) as exc:
        log.error("%s", exc)
        return CommandOutcome(EXIT_INVALID, summary=str(exc))
    except (RefinementError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return CommandOutcome(EXIT_RUNTIME, summary=str(exc))


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr)
    if argv is None:
        argv = sys.argv[1:]
    if "-v" in argv or "--verbose" in argv:
        logging.getLogger().setLevel(logging.DEBUG)
    outcome = run(argv)
    if outcome.exit_code == EXIT_OK:
        log.info("%s", outcome.summary)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())

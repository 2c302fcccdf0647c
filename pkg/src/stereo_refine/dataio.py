"""Readers and writers for flows, depth maps, masks, poses and run manifests.

Binary formats are little-endian unless the format says otherwise. Every
reader validates sizes before allocating, so truncated or fuzzed files raise
:class:`FormatError` instead of crashing.
"""

from __future__ import annotations

import configparser
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .edges import CONTRASTIVE, MULTISCALE, EdgeLossConfig
from .geometry import ORTHONORMAL_TOL, CameraIntrinsics, RigidTransform, StereoRig
from .refine import RefinerConfig, VideoBundle, build_pair_sets

log = logging.getLogger(__name__)

FLO_MAGIC = b"PIEH"
DEFAULT_PNG_SCALE = 1.0 / 256.0
# Rotation drift beyond this is reported; smaller drift is repaired silently.
REPAIR_REPORT_TOL = 1e-6
# Cap on decoded pixel count; protects against headers claiming huge images.
MAX_PIXELS = 1 << 26


class FormatError(ValueError):
    """A file does not follow its format. ``offset`` is the byte or line position."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at offset {offset})")
        self.offset = offset


class ManifestError(ValueError):
    """Manifest validation failed; ``problems`` lists every issue found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid manifest:\n  " + "\n  ".join(self.problems))


def _check_dims(width: int, height: int, offset: int):
    if width <= 0 or height <= 0:
        raise FormatError(f"non-positive dimensions {width}x{height}", offset)
    if width * height > MAX_PIXELS:
        raise FormatError(f"dimensions {width}x{height} exceed the supported size", offset)


# --- .flo ---------------------------------------------------------------------


def encode_flo(flow) -> bytes:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must have shape (H, W, 2), got {flow.shape}")
    h, w = flow.shape[:2]
    return FLO_MAGIC + struct.pack("<ii", w, h) + flow.astype("<f4").tobytes()


def decode_flo(data: bytes) -> np.ndarray:
    if len(data) < 4 or data[:4] != FLO_MAGIC:
        raise FormatError("bad .flo magic", 0)
    if len(data) < 12:
        raise FormatError("truncated .flo header", len(data))
    w, h = struct.unpack_from("<ii", data, 4)
    _check_dims(w, h, 4)
    need = 12 + 8 * w * h
    if len(data) < need:
        raise FormatError(f"truncated .flo payload: expected {need} bytes, got {len(data)}", len(data))
    if len(data) > need:
        raise FormatError("trailing bytes after .flo payload", need)
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2).astype(np.float32)


def write_flo(path, flow) -> None:
    Path(path).write_bytes(encode_flo(flow))


def read_flo(path) -> np.ndarray:
    return decode_flo(Path(path).read_bytes())


def _flo_shape(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(12)
    if head[:4] != FLO_MAGIC or len(head) < 12:
        raise FormatError("bad .flo header", 0)
    w, h = struct.unpack_from("<ii", head, 4)
    _check_dims(w, h, 4)
    return h, w


# --- PFM ----------------------------------------------------------------------


def encode_pfm(image, little_endian: bool = True) -> bytes:
    """Grayscale ("Pf") or three-channel ("PF") float32 map, rows stored bottom-up."""
    image = np.asarray(image)
    if image.ndim == 2:
        tag = b"Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM stores (H, W) or (H, W, 3) arrays, got {image.shape}")
    h, w = image.shape[:2]
    dtype = "<f4" if little_endian else ">f4"
    scale = b"-1.0" if little_endian else b"1.0"
    header = tag + b"\n" + f"{w} {h}".encode() + b"\n" + scale + b"\n"
    return header + np.ascontiguousarray(image[::-1]).astype(dtype).tobytes()


def _pfm_header(data: bytes):
    """Parse the three header tokens; return (channels, w, h, little_endian, data_offset)."""
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and pos - start < 32:
            pos += 1
        if pos == start or pos >= len(data):
            raise FormatError("truncated PFM header", pos)
        tokens.append((data[start:pos], start))
        if len(tokens) == 4:
            pos += 1  # single whitespace byte before the payload
    (tag, _), (w_tok, w_at), (h_tok, h_at), (s_tok, s_at) = tokens
    if tag not in (b"Pf", b"PF"):
        raise FormatError(f"bad PFM tag {tag[:8]!r}", 0)
    try:
        w, h = int(w_tok), int(h_tok)
    except ValueError:
        raise FormatError("PFM dimensions are not integers", w_at) from None
    _check_dims(w, h, w_at)
    try:
        scale = float(s_tok)
    except ValueError:
        raise FormatError("PFM scale is not a number", s_at) from None
    if scale == 0 or not math.isfinite(scale):
        raise FormatError("PFM scale must be finite and non-zero", s_at)
    return (1 if tag == b"Pf" else 3), w, h, scale < 0, pos


def decode_pfm(data: bytes) -> np.ndarray:
    channels, w, h, little, pos = _pfm_header(data)
    need = pos + 4 * channels * w * h
    if len(data) < need:
        raise FormatError(f"truncated PFM payload: expected {need} bytes, got {len(data)}", len(data))
    if len(data) > need:
        raise FormatError("trailing bytes after PFM payload", need)
    arr = np.frombuffer(data, dtype="<f4" if little else ">f4", offset=pos)
    shape = (h, w) if channels == 1 else (h, w, 3)
    return arr.reshape(shape)[::-1].astype(np.float32)


def write_pfm(path, image) -> None:
    Path(path).write_bytes(encode_pfm(image))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes())


def _pfm_shape(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(128)
    _, w, h, _, _ = _pfm_header(head + b" ")
    return h, w


# --- 16-bit PNG depth and 8-bit masks -----------------------------------------

_PNG_SIG = b"\x89PNG\r\n\x1a\n"


def _png_ihdr(data: bytes):
    if len(data) < 33 or data[:8] != _PNG_SIG or data[12:16] != b"IHDR":
        raise FormatError("not a PNG file", 0)
    w, h = struct.unpack_from(">II", data, 16)
    _check_dims(w, h, 16)
    return w, h, data[24], data[25]


def _decode_png(data: bytes, bit_depth: int) -> np.ndarray:
    w, h, depth, colour = _png_ihdr(data)
    if depth != bit_depth or colour != 0:
        raise FormatError(f"expected {bit_depth}-bit grayscale PNG, got bit depth {depth}, colour type {colour}", 24)
    try:
        with Image.open(io.BytesIO(data)) as img:
            arr = np.asarray(img)
    except Exception as exc:  # Pillow raises many types on corrupt streams
        raise FormatError(f"corrupt PNG stream: {exc}") from None
    if arr.shape != (h, w):
        raise FormatError(f"decoded PNG has shape {arr.shape}, header says {(h, w)}")
    return arr.astype(np.uint16 if bit_depth == 16 else np.uint8)


def encode_png16_depth(depth, scale: float = DEFAULT_PNG_SCALE) -> bytes:
    """Quantize ``depth / scale`` with round-half-up; invalid depths become 0."""
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    depth = np.asarray(depth, dtype=np.float64)
    good = np.isfinite(depth) & (depth > 0)
    raw = np.floor(np.where(good, depth, 0.0) / scale + 0.5)
    if raw.max(initial=0) > 65535:
        raise ValueError(f"depth {depth[good].max()} exceeds the 16-bit range at scale {scale}")
    buf = io.BytesIO()
    Image.fromarray(raw.astype(np.uint16)).save(buf, format="PNG")
    return buf.getvalue()


def decode_png16_depth(data: bytes, scale: float = DEFAULT_PNG_SCALE) -> np.ndarray:
    """Depth in metres; raw value 0 decodes to NaN (missing)."""
    raw = _decode_png(data, 16).astype(np.float64)
    return np.where(raw > 0, raw * scale, np.nan)


def write_png16_depth(path, depth, scale: float = DEFAULT_PNG_SCALE) -> None:
    Path(path).write_bytes(encode_png16_depth(depth, scale))


def read_png16_depth(path, scale: float = DEFAULT_PNG_SCALE) -> np.ndarray:
    return decode_png16_depth(Path(path).read_bytes(), scale)


def encode_mask(mask) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def decode_mask(data: bytes) -> np.ndarray:
    return _decode_png(data, 8) > 0


def write_mask(path, mask) -> None:
    Path(path).write_bytes(encode_mask(mask))


def read_mask(path) -> np.ndarray:
    return decode_mask(Path(path).read_bytes())


def _png_shape(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        w, h, _, _ = _png_ihdr(fh.read(33))
    return h, w


def read_depth(path, scale: float = DEFAULT_PNG_SCALE) -> np.ndarray:
    """Depth map from ``.pfm`` or 16-bit ``.png``, as float64."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        return read_png16_depth(path, scale)
    return read_pfm(path).astype(np.float64)


def write_depth(path, depth, scale: float = DEFAULT_PNG_SCALE) -> None:
    path = Path(path)
    if path.suffix.lower() == ".png":
        write_png16_depth(path, depth, scale)
    else:
        write_pfm(path, depth)


def probe_shape(path) -> tuple[int, int]:
    """(height, width) from a file header without decoding the payload."""
    suffix = Path(path).suffix.lower()
    if suffix == ".flo":
        return _flo_shape(path)
    if suffix == ".png":
        return _png_shape(path)
    return _pfm_shape(path)


# --- poses and intrinsics -----------------------------------------------------


def _nearest_rotation(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r


def parse_kitti_poses(text: str) -> tuple[list[RigidTransform], list[int]]:
    """Poses from KITTI trajectory text plus the 1-based lines whose rotation was repaired.

    Blank lines are skipped; any other line must hold 12 finite numbers, the
    row-major 3x4 world-from-camera matrix.
    """
    poses, repaired = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise FormatError(f"line {lineno}: expected 12 numbers, got {len(tokens)}", lineno)
        try:
            values = np.array([float(t) for t in tokens])
        except ValueError:
            raise FormatError(f"line {lineno}: non-numeric token", lineno) from None
        if not np.all(np.isfinite(values)):
            raise FormatError(f"line {lineno}: non-finite value", lineno)
        m = values.reshape(3, 4)
        rot = m[:, :3]
        if not np.linalg.det(rot) > 1e-9:
            raise FormatError(f"line {lineno}: rotation block is singular or a reflection", lineno)
        drift = max(np.max(np.abs(rot.T @ rot - np.eye(3))), abs(np.linalg.det(rot) - 1.0))
        if drift > ORTHONORMAL_TOL:
            rot = _nearest_rotation(rot)
            if drift > REPAIR_REPORT_TOL:
                repaired.append(lineno)
        poses.append(RigidTransform(rot, m[:, 3]))
    return poses, repaired


def read_kitti_poses(path) -> list[RigidTransform]:
    try:
        text = Path(path).read_bytes().decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("pose file is not UTF-8 text", exc.start) from None
    poses, repaired = parse_kitti_poses(text)
    if repaired:
        log.warning("%s: re-orthonormalized rotations on lines %s", path, repaired)
    return poses


def format_kitti_poses(poses) -> str:
    return "".join(" ".join(repr(float(x)) for x in p.matrix().ravel()) + "\n" for p in poses)


def write_kitti_poses(path, poses) -> None:
    Path(path).write_text(format_kitti_poses(poses), encoding="utf-8")


def format_intrinsics(intr: CameraIntrinsics) -> str:
    values = (intr.fx, intr.fy, intr.cx, intr.cy)
    return " ".join(repr(float(x)) for x in values) + f" {intr.width} {intr.height}\n"


def parse_intrinsics(text: str) -> CameraIntrinsics:
    """One line ``fx fy cx cy width height``."""
    tokens = text.split()
    if len(tokens) != 6:
        raise FormatError(f"intrinsics need 6 values (fx fy cx cy width height), got {len(tokens)}", 1)
    try:
        fx, fy, cx, cy = (float(t) for t in tokens[:4])
        width, height = int(tokens[4]), int(tokens[5])
    except ValueError:
        raise FormatError("intrinsics contain a malformed number", 1) from None
    try:
        return CameraIntrinsics(fx, fy, cx, cy, width, height)
    except ValueError as exc:
        raise FormatError(str(exc), 1) from None


def read_intrinsics(path) -> CameraIntrinsics:
    return parse_intrinsics(Path(path).read_text(encoding="utf-8"))


def write_intrinsics(path, intr: CameraIntrinsics) -> None:
    Path(path).write_text(format_intrinsics(intr), encoding="utf-8")


# --- tables and record streams -------------------------------------------------


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def format_table(rows, columns=None) -> str:
    """Whitespace-aligned text table; floats printed with 9 significant digits."""
    rows = list(rows)
    if columns is None:
        columns = list(rows[0]) if rows else []
    cells = [[str(c) for c in columns]] + [[_cell(r.get(c, "")) for c in columns] for r in rows]
    widths = [max(len(row[k]) for row in cells) for k in range(len(columns))]
    return "".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) + "\n" for row in cells)


def write_table(path, rows, columns=None) -> None:
    Path(path).write_text(format_table(rows, columns), encoding="utf-8")


def write_records(path, records) -> None:
    """One JSON object per line."""
    lines = (json.dumps(r, allow_nan=True) + "\n" for r in records)
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_records(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]


# --- manifests ------------------------------------------------------------------

EDGE_ALIASES = {"none": "none", "ms": MULTISCALE, MULTISCALE: MULTISCALE, CONTRASTIVE: CONTRASTIVE}

_SCHEMA = {
    "run": {"frames": True, "name": False},
    "camera": {"intrinsics": True, "baseline": True},
    "inputs": {
        "left_depths": True,
        "right_depths": False,
        "left_images": False,
        "right_images": False,
        "poses": True,
        "depth_scale": False,
    },
    "flows": {
        "lr_forward": False,
        "lr_backward": False,
        "temporal_forward": False,
        "temporal_backward": False,
        "lr_masks": False,
        "temporal_masks": False,
    },
    "refiner": {
        "epochs": False,
        "learning_rate": False,
        "disparity_weight": False,
        "w_edge": False,
        "edge": False,
        "sampling": False,
        "seed": False,
        "beta1": False,
        "beta2": False,
        "eps": False,
        "d_min": False,
        "d_max": False,
        "flow_threshold": False,
        "use_lr": False,
        "use_temporal": False,
    },
    "edges": {"si_base": False, "ratio_base": False, "scales": False, "one_sided": False},
}

_REFINER_KEYS = {
    "epochs": ("epochs", int),
    "learning_rate": ("learning_rate", float),
    "disparity_weight": ("disparity_weight", float),
    "w_edge": ("w_edge", float),
    "edge": ("edge", str),
    "sampling": ("sampling", str),
    "seed": ("seed", int),
    "beta1": ("beta1", float),
    "beta2": ("beta2", float),
    "eps": ("eps", float),
    "d_min": ("d_min", float),
    "d_max": ("d_max", float),
    "flow_threshold": ("flow_threshold", float),
    "use_lr": ("use_lr", "bool"),
    "use_temporal": ("use_temporal", "bool"),
}

_BOOLS = {"1": True, "true": True, "yes": True, "on": True, "0": False, "false": False, "no": False, "off": False}


def _parse_value(raw: str, kind):
    if kind == "bool":
        try:
            return _BOOLS[raw.strip().lower()]
        except KeyError:
            raise ValueError(f"not a boolean: {raw!r}") from None
    if kind is str:
        return raw.strip()
    return kind(raw.strip())


@dataclass
class RunManifest:
    """A fully validated run description; paths are absolute."""

    source: Path
    frames: int
    rig: StereoRig
    intrinsics_path: Path
    poses_path: Path
    left_depths: list[Path]
    right_depths: list[Path] | None
    left_images: list[Path] | None
    right_images: list[Path] | None
    lr_flows: list[tuple[Path, Path]]
    temporal_flows: dict[tuple[int, int], tuple[Path, Path]]
    lr_masks: list[Path] | None
    temporal_masks: dict[tuple[int, int], Path] | None
    depth_scale: float
    refiner: RefinerConfig
    name: str = ""
    raw: dict = field(default_factory=dict)


def _expand(template: str, root: Path, **idx) -> Path:
    return (root / template.format(**idx)).resolve()


def refiner_settings(section: dict, problems: list, base: RefinerConfig | None = None) -> dict:
    """Typed RefinerConfig keyword arguments from raw manifest strings."""
    out = {}
    for key, raw in section.items():
        attr, kind = _REFINER_KEYS[key]
        try:
            value = _parse_value(raw, kind)
        except ValueError:
            problems.append(f"[refiner] {key}: cannot parse {raw!r}")
            continue
        if key == "edge":
            if value not in EDGE_ALIASES:
                problems.append(f"[refiner] edge: must be one of none, ms, contrastive; got {value!r}")
                continue
            value = EDGE_ALIASES[value]
        out[attr] = value
    return out


def edge_settings(section: dict, problems: list) -> dict:
    out = {}
    for key, raw in section.items():
        try:
            if key == "scales":
                out[key] = tuple(int(s) for s in raw.replace(",", " ").split())
            elif key == "one_sided":
                out[key] = _parse_value(raw, "bool")
            else:
                out[key] = float(raw)
        except ValueError:
            problems.append(f"[edges] {key}: cannot parse {raw!r}")
    return out


def parse_ini(text: str, schema: dict, problems: list, required_sections=()) -> dict:
    """Sections of an INI document checked against ``schema`` (unknown or missing keys)."""
    cp = configparser.ConfigParser(interpolation=None, strict=True)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        problems.append(f"syntax error: {exc}".splitlines()[0])
        return {}
    data = {}
    for section in cp.sections():
        if section not in schema:
            problems.append(f"unknown section [{section}]")
            continue
        data[section] = {}
        for key, value in cp[section].items():
            if key in schema[section]:
                data[section][key] = value
            else:
                problems.append(f"unknown key {key!r} in [{section}]")
    for section, keys in schema.items():
        present = data.get(section, {})
        if section not in data and section not in required_sections:
            continue
        for key, required in keys.items():
            if required and key not in present:
                problems.append(f"missing required key {key!r} in [{section}]")
    return data


def read_manifest(path, overrides: dict | None = None) -> RunManifest:
    """Load and fully validate a run manifest.

    ``overrides`` holds RefinerConfig keyword arguments that replace manifest
    values before validation (so, for example, the temporal flow files
    required by the effective sampling mode are the ones checked).
    Raises :class:`ManifestError` listing every problem.
    """
    path = Path(path).resolve()
    problems: list[str] = []
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError([f"cannot read manifest {path}: {exc}"]) from None
    data = parse_ini(text, _SCHEMA, problems, required_sections=("run", "camera", "inputs"))
    root = path.parent
    run, cam, inp = data.get("run", {}), data.get("camera", {}), data.get("inputs", {})
    flows = data.get("flows", {})

    frames = None
    if "frames" in run:
        try:
            frames = int(run["frames"])
            if frames < 2:
                problems.append(f"[run] frames must be at least 2, got {frames}")
                frames = None
        except ValueError:
            problems.append(f"[run] frames: cannot parse {run['frames']!r}")

    settings = refiner_settings(data.get("refiner", {}), problems)
    edge_kw = edge_settings(data.get("edges", {}), problems)
    settings.update(overrides or {})
    cfg = None
    try:
        settings["edge_cfg"] = EdgeLossConfig(**edge_kw)
        cfg = RefinerConfig(**settings)
    except (ValueError, TypeError) as exc:
        problems.append(f"configuration: {exc}")

    rig = None
    intr = None
    intrinsics_path = (root / cam["intrinsics"]).resolve() if "intrinsics" in cam else None
    if intrinsics_path is not None:
        if not intrinsics_path.is_file():
            problems.append(f"missing file: intrinsics {intrinsics_path}")
        else:
            try:
                intr = read_intrinsics(intrinsics_path)
            except FormatError as exc:
                problems.append(f"intrinsics {intrinsics_path}: {exc}")
    if "baseline" in cam:
        try:
            baseline = float(cam["baseline"])
            if intr is not None:
                rig = StereoRig(baseline, intr)
        except ValueError as exc:
            problems.append(f"[camera] baseline: {exc}")

    def one_path(key, template, **idx):
        try:
            p = _expand(template, root, **idx)
        except (KeyError, IndexError, ValueError) as exc:
            problems.append(f"{key}: bad path template {template!r} ({exc})")
            return None
        if not p.is_file():
            problems.append(f"missing file: {key} {p}")
            return None
        if intr is not None:
            try:
                shape = probe_shape(p)
                if shape != intr.shape:
                    problems.append(f"{key} {p}: size {shape[1]}x{shape[0]} differs from camera {intr.width}x{intr.height}")
            except (FormatError, OSError) as exc:
                problems.append(f"{key} {p}: {exc}")
        return p

    def per_frame(section, key):
        template = section.get(key)
        if template is None or frames is None:
            return None
        return [one_path(key, template, i=i) for i in range(frames)]

    left_depths = per_frame(inp, "left_depths")
    right_depths = per_frame(inp, "right_depths")
    left_images = per_frame(inp, "left_images")
    right_images = per_frame(inp, "right_images")

    depth_scale = DEFAULT_PNG_SCALE
    if "depth_scale" in inp:
        try:
            depth_scale = float(inp["depth_scale"])
            if not depth_scale > 0:
                raise ValueError
        except ValueError:
            problems.append(f"[inputs] depth_scale must be a positive number, got {inp['depth_scale']!r}")

    poses_path = (root / inp["poses"]).resolve() if "poses" in inp else None
    if poses_path is not None:
        if not poses_path.is_file():
            problems.append(f"missing file: poses {poses_path}")
        else:
            try:
                n_poses = len(read_kitti_poses(poses_path))
                if frames is not None and n_poses != frames:
                    problems.append(f"poses {poses_path}: {n_poses} poses for {frames} frames")
            except (FormatError, OSError) as exc:
                problems.append(f"poses {poses_path}: {exc}")

    lr_flows, temporal_flows, lr_masks, temporal_masks = [], {}, None, None
    if cfg is not None and frames is not None:
        s_lr, s_t = build_pair_sets(frames, cfg.sampling)
        if cfg.use_lr:
            if "lr_forward" in flows and "lr_backward" in flows:
                lr_flows = [
                    (one_path("lr_forward", flows["lr_forward"], i=i, j=i),
                     one_path("lr_backward", flows["lr_backward"], i=i, j=i))
                    for i, _ in s_lr
                ]
                if right_depths is None:
                    problems.append("[inputs] right_depths is required when left-right flows are used")
                if "lr_masks" in flows:
                    lr_masks = [one_path("lr_masks", flows["lr_masks"], i=i, j=i) for i, _ in s_lr]
            elif "lr_forward" in flows or "lr_backward" in flows:
                problems.append("[flows] lr_forward and lr_backward must be given together")
        if cfg.use_temporal:
            if "temporal_forward" in flows and "temporal_backward" in flows:
                temporal_flows = {
                    (i, j): (one_path("temporal_forward", flows["temporal_forward"], i=i, j=j),
                             one_path("temporal_backward", flows["temporal_backward"], i=i, j=j))
                    for i, j in s_t
                }
                if "temporal_masks" in flows:
                    temporal_masks = {
                        (i, j): one_path("temporal_masks", flows["temporal_masks"], i=i, j=j) for i, j in s_t
                    }
            else:
                problems.append("[flows] temporal_forward and temporal_backward are required for temporal pairs")
        if not lr_flows and not temporal_flows:
            problems.append("no frame pairs: supply left-right or temporal flows")

    if problems:
        raise ManifestError(problems)
    return RunManifest(
        source=path,
        frames=frames,
        rig=rig,
        intrinsics_path=intrinsics_path,
        poses_path=poses_path,
        left_depths=left_depths,
        right_depths=right_depths,
        left_images=left_images,
        right_images=right_images,
        lr_flows=lr_flows,
        temporal_flows=temporal_flows,
        lr_masks=lr_masks,
        temporal_masks=temporal_masks,
        depth_scale=depth_scale,
        refiner=cfg,
        name=run.get("name", ""),
        raw=data,
    )


def _stack(paths, reader):
    return None if paths is None else np.stack([reader(p) for p in paths])


def load_bundle(m: RunManifest, left_depths=None, right_depths=None) -> VideoBundle:
    """Read every file referenced by a manifest into a :class:`VideoBundle`.

    ``left_depths``/``right_depths`` replace the manifest's initial depths.
    """
    read = lambda p: read_depth(p, m.depth_scale)  # noqa: E731
    left = _stack(m.left_depths, read) if left_depths is None else left_depths
    right = _stack(m.right_depths, read) if right_depths is None else right_depths
    to_img = lambda p: read_pfm(p).astype(np.float64)  # noqa: E731
    return VideoBundle(
        rig=m.rig,
        poses=read_kitti_poses(m.poses_path),
        left_depths=left,
        right_depths=right,
        lr_flows=[(read_flo(f).astype(np.float64), read_flo(b).astype(np.float64)) for f, b in m.lr_flows],
        temporal_flows={
            k: (read_flo(f).astype(np.float64), read_flo(b).astype(np.float64)) for k, (f, b) in m.temporal_flows.items()
        },
        lr_masks=None if m.lr_masks is None else [read_mask(p) for p in m.lr_masks],
        temporal_masks=None if m.temporal_masks is None else {k: read_mask(p) for k, p in m.temporal_masks.items()},
        left_images=_stack(m.left_images, to_img),
        right_images=_stack(m.right_images, to_img),
    )


def config_to_ini(cfg: RefinerConfig) -> str:
    """The effective refiner and edge configuration as manifest sections."""
    cp = configparser.ConfigParser(interpolation=None)
    cp["refiner"] = {key: _cell(getattr(cfg, attr)) for key, (attr, _) in _REFINER_KEYS.items()}
    e = cfg.edge_cfg
    cp["edges"] = {
        "si_base": _cell(e.si_base),
        "ratio_base": _cell(e.ratio_base),
        "scales": ", ".join(str(s) for s in e.scales),
        "one_sided": str(e.one_sided),
    }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()

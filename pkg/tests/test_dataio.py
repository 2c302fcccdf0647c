from __future__ import annotations

import io
import logging
import struct
import textwrap

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from stereo_refine.dataio import (
    DEFAULT_PNG_SCALE,
    FormatError,
    ManifestError,
    config_to_ini,
    decode_flo,
    decode_mask,
    decode_pfm,
    decode_png16_depth,
    encode_flo,
    encode_mask,
    encode_pfm,
    encode_png16_depth,
    format_intrinsics,
    format_kitti_poses,
    format_table,
    load_bundle,
    parse_intrinsics,
    parse_kitti_poses,
    probe_shape,
    read_depth,
    read_flo,
    read_kitti_poses,
    read_manifest,
    read_records,
    write_depth,
    write_flo,
    write_intrinsics,
    write_kitti_poses,
    write_mask,
    write_pfm,
    write_records,
)
from stereo_refine.geometry import CameraIntrinsics, RigidTransform, rotation_y
from stereo_refine.refine import RefinerConfig

finite32 = st.floats(-1e6, 1e6, width=32)


# --- .flo ---------------------------------------------------------------------


def test_flo_known_bytes():
    # magic, width 1, height 1, then 1.5 = 0x3FC00000 and -2.0 = 0xC0000000, all little-endian
    expected = bytes.fromhex("50494548" "01000000" "01000000" "0000c03f" "000000c0")
    data = encode_flo(np.array([[[1.5, -2.0]]]))
    assert len(data) == 20 and data == expected
    np.testing.assert_array_equal(decode_flo(expected), [[[1.5, -2.0]]])


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6), st.just(2)), elements=finite32))
def test_flo_round_trip(flow):
    data = encode_flo(flow)
    back = decode_flo(data)
    np.testing.assert_array_equal(back, flow)
    assert encode_flo(back) == data


def test_flo_rejections():
    good = encode_flo(np.zeros((2, 3, 2)))
    with pytest.raises(FormatError) as err:
        decode_flo(b"XXXX" + good[4:])
    assert err.value.offset == 0
    with pytest.raises(FormatError) as err:
        decode_flo(good[:-3])
    assert err.value.offset == len(good) - 3
    with pytest.raises(FormatError):
        decode_flo(good + b"\0")
    with pytest.raises(FormatError):
        decode_flo(b"PIEH" + struct.pack("<ii", 0, 4))
    with pytest.raises(ValueError):
        encode_flo(np.zeros((2, 2, 3)))


def test_flo_files(tmp_path):
    flow = np.random.default_rng(0).normal(size=(4, 5, 2)).astype(np.float32)
    write_flo(tmp_path / "a.flo", flow)
    np.testing.assert_array_equal(read_flo(tmp_path / "a.flo"), flow)
    assert probe_shape(tmp_path / "a.flo") == (4, 5)


# --- PFM ------------------------------------------------------------------------


def test_pfm_cross_endian_fixtures():
    # rows are stored bottom-up: the payload starts with the image's last row
    big = b"Pf\n2 2\n1.0\n" + struct.pack(">4f", 3.0, 4.0, 1.0, 2.5)
    little = b"Pf\n2 2\n-1.0\n" + struct.pack("<4f", 3.0, 4.0, 1.0, 2.5)
    expected = [[1.0, 2.5], [3.0, 4.0]]
    np.testing.assert_array_equal(decode_pfm(big), expected)
    np.testing.assert_array_equal(decode_pfm(little), expected)
    assert encode_pfm(np.array(expected)) == little
    assert encode_pfm(np.array(expected), little_endian=False) == big


def test_pfm_scale_magnitude_is_ignored_and_colour_is_supported():
    data = b"Pf\n1 1\n-0.5\n" + struct.pack("<f", 7.25)
    assert decode_pfm(data)[0, 0] == 7.25
    rgb = np.arange(12, dtype=np.float32).reshape(2, 2, 3)
    np.testing.assert_array_equal(decode_pfm(encode_pfm(rgb)), rgb)


@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=finite32), st.booleans())
def test_pfm_round_trip(img, little):
    data = encode_pfm(img, little)
    back = decode_pfm(data)
    np.testing.assert_array_equal(back, img)
    assert encode_pfm(back, little) == data


@pytest.mark.parametrize("data", [
    b"P5\n1 1\n-1.0\n" + b"\0" * 4,
    b"Pf\n0 1\n-1.0\n",
    b"Pf\n-2 1\n-1.0\n" + b"\0" * 8,
    b"Pf\nx 1\n-1.0\n" + b"\0" * 4,
    b"Pf\n1 1\n0.0\n" + b"\0" * 4,
    b"Pf\n1 1\nnan\n" + b"\0" * 4,
    b"Pf\n2 2\n-1.0\n" + b"\0" * 4,
    b"Pf\n1 1\n-1.0\n" + b"\0" * 5,
    b"Pf\n1 1",
])
def test_pfm_rejections(data):
    with pytest.raises(FormatError):
        decode_pfm(data)


# --- PNG16 depth and masks --------------------------------------------------------


def png_bytes(arr):
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return buf.getvalue()


def test_png16_examples():
    data = png_bytes(np.array([[5000, 0]], dtype=np.uint16))
    depth = decode_png16_depth(data, DEFAULT_PNG_SCALE)
    assert depth[0, 0] == 19.53125 and np.isnan(depth[0, 1])
    assert DEFAULT_PNG_SCALE == 1 / 256


def test_png16_rounds_half_up():
    s = 0.5
    raw = np.asarray(Image.open(io.BytesIO(encode_png16_depth(np.array([[1.25, 1.75, 0.0, np.nan]]), s))))
    assert raw.tolist() == [[3, 4, 0, 0]]
    with pytest.raises(ValueError):
        encode_png16_depth(np.array([[1e9]]))


@given(arrays(np.float64, (3, 4), elements=st.floats(0.001, 65.0)), st.sampled_from([1 / 256, 1 / 1000, 0.01]))
def test_png16_quantisation_bound(depth, scale):
    back = decode_png16_depth(encode_png16_depth(depth, scale), scale)
    ok = np.isfinite(back)
    assert np.all(np.abs(back[ok] - depth[ok]) <= scale / 2 + 1e-12)
    assert np.all(depth[~ok] < scale / 2)  # only values rounding to raw 0 are lost


def test_png_wrong_bit_depth():
    with pytest.raises(FormatError):
        decode_png16_depth(png_bytes(np.zeros((2, 2), np.uint8)))
    with pytest.raises(FormatError):
        decode_mask(png_bytes(np.zeros((2, 2), np.uint16)))


@given(arrays(bool, (3, 5)))
def test_mask_round_trip(mask):
    np.testing.assert_array_equal(decode_mask(encode_mask(mask)), mask)


def test_depth_dispatch_and_probe(tmp_path):
    d = np.random.default_rng(1).uniform(1, 20, (3, 4))
    write_depth(tmp_path / "d.pfm", d)
    write_depth(tmp_path / "d.png", d)
    np.testing.assert_array_equal(read_depth(tmp_path / "d.pfm"), d.astype(np.float32))
    assert np.abs(read_depth(tmp_path / "d.png") - d).max() <= DEFAULT_PNG_SCALE / 2
    write_mask(tmp_path / "m.png", d > 10)
    assert probe_shape(tmp_path / "d.pfm") == probe_shape(tmp_path / "d.png") == probe_shape(tmp_path / "m.png") == (3, 4)


# --- poses, intrinsics, tables --------------------------------------------------------


def test_kitti_examples():
    poses, repaired = parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1 0\n\n1 0 0 2.5 0 1 0 0 0 0 1 0\n")
    assert repaired == [] and len(poses) == 2
    assert poses[0].allclose(RigidTransform.identity(), atol=0)
    np.testing.assert_array_equal(poses[1].translation, [2.5, 0, 0])
    with pytest.raises(FormatError, match="line 2"):
        parse_kitti_poses("1 0 0 0 0 1 0 0 0 0 1 0\n1 0 0 0 0 1 0 0 0 0 1\n")
    for bad in ("1 0 0 0 0 1 0 0 0 0 x 0", "1 0 0 0 0 1 0 0 0 0 inf 0", "1 0 0 0 0 1 0 0 0 0 -1 0"):
        with pytest.raises(FormatError, match="line 1"):
            parse_kitti_poses(bad)


def test_kitti_repairs_drifting_rotations(tmp_path, caplog):
    def line(rot):
        return " ".join(repr(float(x)) for x in np.hstack([rot, [[1], [2], [3]]]).ravel())

    small = rotation_y(0.2) * (1 + 1e-8)
    large = rotation_y(0.2) + 1e-4
    poses, repaired = parse_kitti_poses(line(small) + "\n" + line(large) + "\n")
    assert repaired == [2]
    assert all(p.is_orthonormal() for p in poses)
    np.testing.assert_allclose(poses[0].rotation, rotation_y(0.2), atol=1e-7)
    (tmp_path / "p.txt").write_text(line(large) + "\n")
    with caplog.at_level(logging.WARNING):
        read_kitti_poses(tmp_path / "p.txt")
    assert "re-orthonormalized" in caplog.text


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(-100, 100), st.floats(-100, 100), st.floats(-100, 100)),
                min_size=1, max_size=5))
def test_kitti_round_trip(values):
    poses = [RigidTransform(rotation_y(a), (x, y, z)) for a, x, y, z in values]
    text = format_kitti_poses(poses)
    back, repaired = parse_kitti_poses(text)
    assert repaired == [] and format_kitti_poses(back) == text
    for p, q in zip(poses, back):
        np.testing.assert_array_equal(p.translation, q.translation)


def test_kitti_file_round_trip(tmp_path):
    poses = [RigidTransform(rotation_y(0.1 * i), (i, 0.5, -i)) for i in range(4)]
    write_kitti_poses(tmp_path / "poses.txt", poses)
    back = read_kitti_poses(tmp_path / "poses.txt")
    assert all(p.allclose(q, atol=0) for p, q in zip(poses, back))


def test_intrinsics_round_trip(tmp_path):
    intr = CameraIntrinsics(718.856, 718.856, 607.1928, 185.2157, 1241, 376)
    assert parse_intrinsics(format_intrinsics(intr)) == intr
    write_intrinsics(tmp_path / "intr.txt", intr)
    assert parse_intrinsics((tmp_path / "intr.txt").read_text()) == intr
    for bad in ("1 2 3", "1 1 0 0 a 4", "0 1 0 0 4 4"):
        with pytest.raises(FormatError):
            parse_intrinsics(bad)


def test_table_and_records(tmp_path):
    rows = [{"epoch": 0, "total": 1 / 3}, {"epoch": 1, "total": 2e-7}]
    text = format_table(rows)
    lines = text.splitlines()
    assert lines[0].split() == ["epoch", "total"] and lines[1].split() == ["0", "0.333333333"]
    assert float(lines[2].split()[1]) == pytest.approx(2e-7, rel=1e-9)
    write_records(tmp_path / "r.jsonl", rows)
    assert read_records(tmp_path / "r.jsonl") == rows


# --- manifests ------------------------------------------------------------------------


@pytest.fixture
def dataset(tmp_path):
    """Two frames of 4x5 data with temporal flows only."""
    intr = CameraIntrinsics(5.0, 5.0, 2.0, 1.5, 5, 4)
    write_intrinsics(tmp_path / "intr.txt", intr)
    write_kitti_poses(tmp_path / "poses.txt", [RigidTransform.identity(), RigidTransform.from_translation((0, 0, 1))])
    for i in range(2):
        write_pfm(tmp_path / f"d{i}.pfm", np.full((4, 5), 3.0 + i, np.float32))
    write_flo(tmp_path / "f_0_1.flo", np.zeros((4, 5, 2)))
    write_flo(tmp_path / "b_0_1.flo", np.zeros((4, 5, 2)))
    return tmp_path


MINIMAL = """\
[run]
frames = 2
[camera]
intrinsics = intr.txt
baseline = 0.5
[inputs]
left_depths = d{i}.pfm
poses = poses.txt
[flows]
temporal_forward = f_{i}_{j}.flo
temporal_backward = b_{i}_{j}.flo
"""


def write_manifest(root, text):
    (root / "run.ini").write_text(textwrap.dedent(text))
    return root / "run.ini"


def test_minimal_manifest_loads_with_defaults(dataset):
    m = read_manifest(write_manifest(dataset, MINIMAL))
    assert m.frames == 2 and m.refiner == RefinerConfig()
    assert m.rig.baseline == 0.5 and m.rig.intrinsics.shape == (4, 5)
    assert list(m.temporal_flows) == [(0, 1)] and m.lr_flows == [] and m.right_depths is None
    bundle = load_bundle(m)
    assert bundle.left_depths.shape == (2, 4, 5) and bundle.temporal_flows[(0, 1)][0].shape == (4, 5, 2)


def test_manifest_settings_and_overrides(dataset):
    text = MINIMAL + "[refiner]\nepochs = 7\nedge = ms\ndisparity_weight = 0.2\n[edges]\nscales = 1, 2\none_sided = no\n"
    m = read_manifest(write_manifest(dataset, text))
    cfg = m.refiner
    assert (cfg.epochs, cfg.edge, cfg.disparity_weight, cfg.edge_cfg.scales, cfg.edge_cfg.one_sided) == (
        7, "multiscale", 0.2, (1, 2), False)
    assert read_manifest(dataset / "run.ini", overrides={"epochs": 3}).refiner.epochs == 3
    round_trip = read_manifest(write_manifest(dataset, MINIMAL + config_to_ini(cfg)))
    assert round_trip.refiner == cfg


def test_misspelled_key_is_named(dataset):
    with pytest.raises(ManifestError) as err:
        read_manifest(write_manifest(dataset, MINIMAL + "[refiner]\nepoch = 5\n"))
    assert any("epoch" in p for p in err.value.problems)


def test_all_problems_are_reported_together(dataset):
    text = MINIMAL.replace("baseline = 0.5\n", "").replace("d{i}.pfm", "missing{i}.pfm") + "[refiner]\nlr = 1\n"
    with pytest.raises(ManifestError) as err:
        read_manifest(write_manifest(dataset, text))
    joined = "\n".join(err.value.problems)
    assert "baseline" in joined and "missing0.pfm" in joined and "missing1.pfm" in joined and "lr" in joined


def test_size_mismatch_rejected_before_compute(dataset):
    write_flo(dataset / "b_0_1.flo", np.zeros((4, 6, 2)))
    with pytest.raises(ManifestError, match="6x4 differs from camera 5x4"):
        read_manifest(write_manifest(dataset, MINIMAL))


def test_pose_count_and_pairs_are_checked(dataset):
    write_kitti_poses(dataset / "poses.txt", [RigidTransform.identity()])
    with pytest.raises(ManifestError, match="1 poses for 2 frames"):
        read_manifest(write_manifest(dataset, MINIMAL))
    write_kitti_poses(dataset / "poses.txt", [RigidTransform.identity()] * 2)
    no_flows = MINIMAL.split("[flows]")[0]
    with pytest.raises(ManifestError, match="temporal_forward"):
        read_manifest(write_manifest(dataset, no_flows))
    with pytest.raises(ManifestError, match="right_depths"):
        read_manifest(write_manifest(dataset, MINIMAL + "lr_forward = f_0_1.flo\nlr_backward = b_0_1.flo\n"))
    with pytest.raises(ManifestError, match=r"\[run\]"):
        read_manifest(write_manifest(dataset, MINIMAL.replace("[run]\nframes = 2\n", "")))


# --- fuzzing -----------------------------------------------------------------------


def _seed_files():
    rng = np.random.default_rng(0)
    return [
        (decode_flo, encode_flo(rng.normal(size=(3, 4, 2)))),
        (decode_pfm, encode_pfm(rng.normal(size=(3, 4)))),
        (decode_pfm, encode_pfm(rng.normal(size=(3, 4)), little_endian=False)),
        (decode_png16_depth, encode_png16_depth(rng.uniform(1, 50, (3, 4)))),
        (decode_mask, encode_mask(rng.random((3, 4)) > 0.5)),
        (lambda b: parse_kitti_poses(b.decode("utf-8", "replace")), format_kitti_poses([RigidTransform.identity()]).encode()),
        (lambda b: parse_intrinsics(b.decode("utf-8", "replace")), b"5.0 5.0 2.0 1.5 5 4\n"),
    ]


SEEDS = _seed_files()


def _must_not_crash(decode, data):
    try:
        decode(data)
    except FormatError:
        pass


@settings(max_examples=400, suppress_health_check=[HealthCheck.too_slow])
@given(st.sampled_from(range(len(SEEDS))), st.data())
def test_mutated_inputs_never_crash(k, data):
    decode, good = SEEDS[k]
    buf = bytearray(good)
    for _ in range(data.draw(st.integers(1, 6))):
        op = data.draw(st.sampled_from(["flip", "cut", "insert"]))
        pos = data.draw(st.integers(0, max(len(buf) - 1, 0)))
        if op == "flip" and buf:
            buf[pos] = data.draw(st.integers(0, 255))
        elif op == "cut":
            del buf[pos:]
        else:
            buf[pos:pos] = data.draw(st.binary(max_size=16))
    _must_not_crash(decode, bytes(buf))


@settings(max_examples=200)
@given(st.sampled_from(range(len(SEEDS))), st.binary(max_size=4096))
def test_random_bytes_never_crash(k, blob):
    decode, good = SEEDS[k]
    _must_not_crash(decode, blob)
    _must_not_crash(decode, good[:12] + blob)  # plausible header, garbage payload


@pytest.mark.parametrize("k", range(len(SEEDS)))
def test_one_mebibyte_input_is_rejected_cleanly(k):
    decode, good = SEEDS[k]
    blob = np.random.default_rng(k).integers(0, 256, 1 << 20, dtype=np.uint8).tobytes()
    _must_not_crash(decode, blob)
    _must_not_crash(decode, good[:16] + blob[16:])


@settings(max_examples=100, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.text(max_size=400))
def test_fuzzed_manifests_raise_manifest_errors(tmp_path, text):
    path = tmp_path / "fuzz.ini"
    path.write_text(text)
    with pytest.raises(ManifestError):
        read_manifest(path)

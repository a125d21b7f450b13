"""Volume/mask containers and the MIV1 on-disk format."""

import struct

import numpy as np
import pytest

from patchgmm.errors import FormatError, ParameterError, ShapeError, ValidationError
from patchgmm.volume import (
    ObservationMask,
    Volume,
    load_mask,
    load_volume,
    mask_from_weights,
    save_mask,
    save_volume,
)


def test_volume_stores_float32_fastest_first():
    data = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
    v = Volume(data, spacing=(0.5, 1.0, 2.0))
    assert v.data.dtype == np.float32
    assert v.dims == (2, 3, 4)
    assert v.spacing == (0.5, 1.0, 2.0)
    assert not v.data.flags.writeable


def test_volume_rejects_nan_and_bad_spacing():
    bad = np.zeros((2, 2, 2))
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValidationError):
        Volume(bad)
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))
    with pytest.raises(ValidationError):
        Volume(np.zeros((2, 2)))


def test_mask_rejects_all_missing():
    with pytest.raises(ValidationError):
        ObservationMask(np.zeros((3, 3, 3), dtype=bool))


def test_roundtrip_constant_volume(tmp_path):
    v = Volume(np.zeros((4, 4, 4)))
    p = tmp_path / "c.miv"
    save_volume(v, p)
    w = load_volume(p)
    assert w.dims == v.dims
    assert np.array_equal(w.data, v.data)


def test_roundtrip_single_voxel(tmp_path):
    v = Volume(np.full((1, 1, 1), 5.0))
    p = tmp_path / "one.miv"
    save_volume(v, p)
    assert load_volume(p).data[0, 0, 0] == 5.0


def test_roundtrip_preserves_anisotropic_spacing(tmp_path):
    # in-plane 0.85mm, 6mm slice separation
    v = Volume(np.zeros((3, 3, 3)), spacing=(0.85, 0.85, 6.0))
    p = tmp_path / "aniso.miv"
    save_volume(v, p)
    assert load_volume(p).spacing == (0.85, 0.85, 6.0)


def test_roundtrip_random_volume_byte_identical(tmp_path):
    rng = np.random.default_rng(20240811)
    v = Volume(rng.uniform(0, 1, size=(32, 32, 32)))
    p1 = tmp_path / "a.miv"
    p2 = tmp_path / "b.miv"
    save_volume(v, p1)
    save_volume(load_volume(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_file_layout_matches_documented_header(tmp_path):
    """Byte-level oracle: header struct plus fastest-first payload."""
    rng = np.random.default_rng(3)
    data = rng.uniform(0, 1, size=(2, 3, 4)).astype(np.float32)
    v = Volume(data, spacing=(1.0, 2.0, 3.0))
    p = tmp_path / "layout.miv"
    save_volume(v, p)
    raw = p.read_bytes()
    expect_header = struct.pack("<4s3I3dI", b"MIV1", 2, 3, 4, 1.0, 2.0, 3.0, 0)
    assert raw[: len(expect_header)] == expect_header
    # payload: axis 0 varies fastest
    assert raw[len(expect_header):] == data.ravel(order="F").tobytes()


def test_two_saves_identical_files(tmp_path):
    rng = np.random.default_rng(9)
    v = Volume(rng.uniform(0, 1, size=(5, 6, 7)))
    p1, p2 = tmp_path / "x1.miv", tmp_path / "x2.miv"
    save_volume(v, p1)
    save_volume(v, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_header_raises_format_error(tmp_path):
    p = tmp_path / "trunc.miv"
    p.write_bytes(b"MIV1\x02\x00")
    with pytest.raises(FormatError):
        load_volume(p)


def test_truncated_payload_raises_format_error(tmp_path):
    v = Volume(np.zeros((4, 4, 4)))
    p = tmp_path / "cut.miv"
    save_volume(v, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-8])
    with pytest.raises(FormatError):
        load_volume(p)


def test_bad_magic_raises_format_error(tmp_path):
    p = tmp_path / "bad.miv"
    p.write_bytes(b"XXXX" + b"\x00" * 60)
    with pytest.raises(FormatError):
        load_volume(p)


def test_nan_payload_rejected_on_load(tmp_path):
    p = tmp_path / "nan.miv"
    header = struct.pack("<4s3I3dI", b"MIV1", 1, 1, 2, 1.0, 1.0, 1.0, 0)
    payload = np.array([0.5, np.nan], dtype="<f4").tobytes()
    p.write_bytes(header + payload)
    with pytest.raises(ValidationError):
        load_volume(p)


def test_volume_loader_rejects_mask_file(tmp_path):
    m = ObservationMask(np.ones((2, 2, 2), dtype=bool))
    p = tmp_path / "m.mask.miv"
    save_mask(m, p)
    with pytest.raises(FormatError):
        load_volume(p)


def test_mask_roundtrip(tmp_path):
    rng = np.random.default_rng(77)
    flags = rng.uniform(size=(6, 5, 4)) < 0.4
    flags[0, 0, 0] = True
    m = ObservationMask(flags)
    p = tmp_path / "m.mask.miv"
    save_mask(m, p)
    back = load_mask(p)
    assert np.array_equal(back.flags, m.flags)
    assert back.observed_count == m.observed_count


class TestMaskFromWeights:
    def test_all_ones_always_observed(self):
        w = np.ones((3, 3, 3))
        g = np.zeros((3, 3, 3))
        m = mask_from_weights(w, g, low_thresh=0.5, high_thresh=1.0, gradient_cut=0.5)
        assert m.flags.all()

    def test_uniform_weight_flips_with_gradient(self):
        w = np.full((3, 3, 3), 0.6)
        g0 = np.zeros((3, 3, 3))
        m = mask_from_weights(w, g0, low_thresh=0.5, high_thresh=0.9, gradient_cut=1.0)
        assert m.flags.all()
        g1 = np.full((3, 3, 3), 2.0)
        with pytest.raises(ValidationError):
            # every voxel now needs 0.9 so nothing is observed
            mask_from_weights(w, g1, low_thresh=0.5, high_thresh=0.9, gradient_cut=1.0)

    def test_matches_scalar_rule(self):
        """Mixed-gradient case against a per-voxel loop."""
        rng = np.random.default_rng(123)
        w = rng.uniform(size=(4, 5, 6))
        g = rng.uniform(size=(4, 5, 6))
        lo, hi, cut = 0.3, 0.7, 0.5
        m = mask_from_weights(w, g, low_thresh=lo, high_thresh=hi, gradient_cut=cut)
        for i in range(4):
            for j in range(5):
                for k in range(6):
                    t = hi if g[i, j, k] > cut else lo
                    assert m.flags[i, j, k] == (w[i, j, k] >= t)

    def test_monotone_in_thresholds(self):
        rng = np.random.default_rng(5)
        w = rng.uniform(size=(5, 5, 5))
        g = rng.uniform(size=(5, 5, 5))
        base = mask_from_weights(w, g, low_thresh=0.2, high_thresh=0.5, gradient_cut=0.5)
        tighter = mask_from_weights(w, g, low_thresh=0.4, high_thresh=0.8, gradient_cut=0.5)
        # raising thresholds never turns a missing voxel observed
        assert not np.any(tighter.flags & ~base.flags)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mask_from_weights(np.ones((2, 2, 2)), np.zeros((3, 2, 2)))

    def test_bad_threshold_order(self):
        with pytest.raises(ParameterError):
            mask_from_weights(np.ones((2, 2, 2)), np.zeros((2, 2, 2)),
                              low_thresh=0.9, high_thresh=0.3)

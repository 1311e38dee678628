import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coldal import codec
from coldal.errors import (
    BoundsError, InvalidArgumentError, MagicMismatchError, TruncatedPayloadError, VersionMismatchError,
)
from coldal.volume import LabelMap, ProbMap, Volume3D, extract_patch, pad_to, window_normalize


def _vol(data, spacing=(1.0, 1.0, 1.0)):
    return Volume3D("v", np.asarray(data, dtype=np.float32), spacing)


class TestWindowNormalize:
    def test_midpoint_and_clip(self):
        v = _vol(np.array([125.0, 100.0, 90.0, 150.0, 400.0, 130.0]).reshape(1, 1, 6))
        out = window_normalize(v, 125, 50).data.ravel()
        np.testing.assert_allclose(out, [0.5, 0.0, 0.0, 1.0, 1.0, 0.6], atol=1e-7)

    def test_preserves_shape_and_spacing(self):
        v = _vol(np.zeros((2, 3, 4)), (1.5, 1.5, 2.0))
        out = window_normalize(v, 0, 10)
        assert out.shape == (2, 3, 4) and out.spacing == v.spacing

    @pytest.mark.parametrize("level,width", [(float("nan"), 10), (0, float("inf")), (0, 0), (0, -1)])
    def test_rejects_bad_window(self, level, width):
        with pytest.raises(InvalidArgumentError):
            window_normalize(_vol(np.zeros((1, 1, 1))), level, width)

    @given(st.lists(st.floats(-2000, 2000), min_size=2, max_size=30))
    def test_monotone(self, values):
        vals = np.sort(np.asarray(values, dtype=np.float32))
        out = window_normalize(_vol(vals.reshape(1, 1, -1)), 40, 400).data.ravel()
        assert np.all(np.diff(out) >= 0)

    def test_idempotent_on_unit_window(self, rng):
        v = _vol(rng.random((3, 3, 3)))
        np.testing.assert_allclose(window_normalize(v, 0.5, 1.0).data, v.data, atol=1e-7)


class TestPatchAndPad:
    def test_identity_crop(self, rng):
        v = _vol(rng.random((4, 5, 6)))
        p = extract_patch(v, None, (0, 0, 0), (4, 5, 6))
        assert np.array_equal(p.image, v.data)

    def test_linear_index_window(self):
        v = _vol(np.arange(64).reshape(4, 4, 4))
        p = extract_patch(v, None, (1, 1, 1), (2, 2, 2))
        expected = [21, 22, 25, 26, 37, 38, 41, 42]
        assert sorted(p.image.ravel().astype(int).tolist()) == expected

    def test_label_cut_identically(self, rng):
        v = _vol(rng.random((4, 4, 4)))
        lbl = LabelMap((rng.random((4, 4, 4)) > 0.5).astype(np.uint8), 2)
        p = extract_patch(v, lbl, (1, 0, 2), (2, 3, 2))
        assert np.array_equal(p.label, lbl.data[1:3, 0:3, 2:4])

    @pytest.mark.parametrize("origin,size", [((0, 0, 0), (5, 4, 4)), ((-1, 0, 0), (2, 2, 2)), ((3, 3, 3), (2, 2, 2))])
    def test_out_of_bounds(self, origin, size):
        with pytest.raises(BoundsError):
            extract_patch(_vol(np.zeros((4, 4, 4))), None, origin, size)

    def test_pad_same_size_unchanged(self, rng):
        v = _vol(rng.random((3, 3, 3)))
        assert pad_to(v, (3, 3, 3), 0.0) == v

    def test_pad_mass_conservation(self):
        out = pad_to(_vol(np.ones((2, 2, 2))), (4, 4, 4), 0.0)
        assert out.data.sum() == 8

    def test_pad_floor_bias(self):
        out = pad_to(_vol(np.ones((3, 3, 3))), (4, 4, 4), 0.0)
        assert out.data[:3, :3, :3].sum() == 27 and out.data.sum() == 27

    def test_pad_too_small(self):
        with pytest.raises(InvalidArgumentError):
            pad_to(_vol(np.ones((3, 3, 3))), (2, 4, 4), 0.0)

    def test_extract_inverts_pad(self, rng):
        v = _vol(rng.random((3, 5, 2)))
        padded = pad_to(v, (6, 6, 6), -1.0)
        p = extract_patch(padded, None, (1, 0, 2), (3, 5, 2))
        assert np.array_equal(p.image, v.data)


class TestProbMap:
    def test_rejects_unnormalised(self):
        with pytest.raises(InvalidArgumentError):
            ProbMap(np.full((2, 2, 2, 2), 0.7, dtype=np.float32))

    def test_argmax(self):
        data = np.zeros((3, 1, 1, 2), dtype=np.float32)
        data[2, 0, 0, 0] = 1
        data[1, 0, 0, 1] = 1
        assert ProbMap(data).argmax().data.ravel().tolist() == [2, 1]


def _random_prob(rng, c, shape):
    x = rng.random((c,) + shape).astype(np.float32)
    return ProbMap(x / x.sum(0, keepdims=True), validate=False)


class TestCodec:
    def test_header_layout(self):
        buf = codec.encode(_vol(np.zeros((2, 3, 4)), (1.5, 1.5, 2.0)))
        assert buf[:6] == bytes.fromhex("43414C334400")
        assert len(buf) == 6 + 2 + 1 + 4 + 12 + 12 + 2 * 3 * 4 * 4

    def test_roundtrip_all_kinds(self, rng, tmp_path):
        v = Volume3D("case_0001", rng.normal(size=(3, 4, 5)).astype(np.float32), (1.5, 1.5, 2.0))
        lbl = LabelMap(rng.integers(0, 3, (3, 4, 5)).astype(np.uint8), 3)
        pm = _random_prob(rng, 3, (3, 4, 5))
        for grid in (v, lbl, pm):
            buf = codec.encode(grid)
            back = codec.decode(buf, "case_0001")
            assert back == grid
            assert codec.encode(back) == buf
        codec.write_volume(tmp_path / "case_0001.cal3d", v)
        assert codec.read_volume(tmp_path / "case_0001.cal3d") == v

    @settings(max_examples=30, deadline=None)
    @given(st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)), st.integers(0, 2**31))
    def test_roundtrip_property(self, shape, seed):
        r = np.random.default_rng(seed)
        grid = Volume3D("x", r.normal(size=shape).astype(np.float32))
        assert codec.decode(codec.encode(grid), "x") == grid
        pm = _random_prob(r, 2, shape)
        assert codec.encode(codec.decode(codec.encode(pm))) == codec.encode(pm)

    def test_bad_magic(self):
        buf = bytearray(codec.encode(_vol(np.zeros((1, 1, 1)))))
        buf[0] = ord("X")
        with pytest.raises(MagicMismatchError):
            codec.decode(bytes(buf))

    def test_version_mismatch(self):
        buf = bytearray(codec.encode(_vol(np.zeros((1, 1, 1)))))
        buf[6] = 9
        with pytest.raises(VersionMismatchError):
            codec.decode(bytes(buf))

    def test_truncated_payload(self):
        buf = codec.encode(_vol(np.zeros((2, 2, 2))))
        with pytest.raises(TruncatedPayloadError):
            codec.decode(buf[:-1])
        with pytest.raises(TruncatedPayloadError):
            codec.decode(buf + b"\0")

    def test_errors_are_distinct(self):
        assert len({MagicMismatchError, VersionMismatchError, TruncatedPayloadError}) == 3
        assert not issubclass(MagicMismatchError, VersionMismatchError)

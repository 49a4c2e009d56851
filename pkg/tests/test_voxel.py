import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from cranio_synth import voxel as vx


def random_grid(rng, shape=(16, 16, 16), p=0.5):
    return (rng.random(shape) < p).astype(np.uint8)


grids = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: arrays(np.uint8, s, elements=st.integers(0, 1))
)


# -- binarize ------------------------------------------------------------------


def test_binarize_above_and_at_threshold():
    assert vx.binarize(np.full((4, 4, 4), 0.9)).all()
    assert vx.binarize(np.full((4, 4, 4), 0.5), 0.5).all()
    assert not vx.binarize(np.full((4, 4, 4), 0.4999)).any()


def test_binarize_matches_loop():
    rng = np.random.default_rng(0)
    v = rng.random((8, 8, 8))
    expected = np.zeros(v.shape, np.uint8)
    for idx in np.ndindex(v.shape):
        expected[idx] = 1 if v[idx] >= 0.3 else 0
    np.testing.assert_array_equal(vx.binarize(v, 0.3), expected)


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_binarize_rejects_non_finite(bad):
    v = np.zeros((2, 2, 2))
    v[1, 1, 1] = bad
    with pytest.raises(ValueError):
        vx.binarize(v)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1])
def test_binarize_threshold_domain(t):
    with pytest.raises(ValueError):
        vx.binarize(np.zeros((2, 2, 2)), t)


# -- boolean algebra -----------------------------------------------------------


def test_boolean_identities():
    rng = np.random.default_rng(1)
    a = random_grid(rng, (8, 8, 8))
    full = np.ones_like(a)
    assert not vx.grid_xor(a, a).any()
    np.testing.assert_array_equal(vx.grid_and(a, full), a)
    np.testing.assert_array_equal(vx.grid_or(a, np.zeros_like(a)), a)


@pytest.mark.parametrize(
    "fn,op",
    [
        (vx.grid_and, lambda x, y: x & y),
        (vx.grid_or, lambda x, y: x | y),
        (vx.grid_xor, lambda x, y: x ^ y),
        (vx.grid_subtract, lambda x, y: 1 if (x and not y) else 0),
    ],
)
def test_boolean_ops_match_loop(fn, op):
    rng = np.random.default_rng(2)
    a, b = random_grid(rng, (6, 7, 8)), random_grid(rng, (6, 7, 8))
    np.testing.assert_array_equal(fn(a, b), oracles.elementwise(op, a, b))


def test_shape_mismatch():
    with pytest.raises(vx.ShapeError):
        vx.grid_and(np.zeros((2, 2, 2), np.uint8), np.zeros((2, 2, 3), np.uint8))
    with pytest.raises(vx.ShapeError):
        vx.dice_coefficient(np.zeros((2, 2, 2), np.uint8), np.zeros((3, 2, 2), np.uint8))


def test_non_binary_rejected():
    with pytest.raises(ValueError):
        vx.as_grid(np.full((2, 2, 2), 2))


# -- separate_defect -----------------------------------------------------------


def test_separate_defect_cases():
    skull = np.zeros((8, 8, 8), np.uint8)
    skull[:4] = 1
    defect = np.zeros_like(skull)
    defect[5:] = 1
    np.testing.assert_array_equal(vx.separate_defect(defect, skull), defect)
    assert not vx.separate_defect(skull, skull).any()


def test_separate_defect_half_overlap():
    skull = np.zeros((8, 8, 8), np.uint8)
    defect = np.zeros_like(skull)
    skull[0:4, 0:4, 0:4] = 1
    defect[2:6, 0:4, 0:4] = 1
    out = vx.separate_defect(defect, skull)
    expected = oracles.elementwise(lambda i, s: 1 if (i and not s) else 0, defect, skull)
    np.testing.assert_array_equal(out, expected)
    assert out.sum() == 32


@given(st.data())
@settings(max_examples=60, deadline=None)
def test_separate_defect_properties(data):
    a = data.draw(grids)
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    out = vx.separate_defect(a, b)
    assert not (out & b).any()
    assert not (out & (1 - a)).any()


# -- dice ----------------------------------------------------------------------


def test_dice_closed_forms():
    a = np.zeros((4, 4, 4), np.uint8)
    b = np.zeros_like(a)
    assert vx.dice_coefficient(a, b) == 1.0
    a[0, :2, :4] = 1
    assert vx.dice_coefficient(a, a) == 1.0
    b[3] = 1
    assert vx.dice_coefficient(a, b) == 0.0
    b = np.zeros_like(a)
    b[0, 1:3, :4] = 1
    assert a.sum() == 8 and b.sum() == 8 and (a & b).sum() == 4
    assert vx.dice_coefficient(a, b) == 0.5


@given(st.data())
@settings(max_examples=60, deadline=None)
def test_dice_range_and_symmetry(data):
    a = data.draw(grids)
    b = data.draw(arrays(np.uint8, a.shape, elements=st.integers(0, 1)))
    d = vx.dice_coefficient(a, b)
    assert 0.0 <= d <= 1.0
    assert d == vx.dice_coefficient(b, a)


# -- components ----------------------------------------------------------------


def test_label_components_trivial():
    g = np.zeros((5, 5, 5), np.uint8)
    labels, sizes = vx.label_components(g)
    assert sizes.size == 0 and not labels.any()
    g[0, 0, 0] = g[4, 4, 4] = 1
    labels, sizes = vx.label_components(g)
    assert sorted(sizes.tolist()) == [1, 1]


@pytest.mark.parametrize("conn", [6, 18, 26])
def test_label_components_vs_flood_fill(conn):
    rng = np.random.default_rng(conn)
    g = random_grid(rng, p=0.3)
    labels, sizes = vx.label_components(g, conn)
    assert set(oracles.labels_to_sets(labels)) == set(oracles.flood_fill_components(g, conn))
    assert sizes.sum() == g.sum()
    assert set(np.unique(labels[g == 1])) == set(range(1, sizes.size + 1))


def test_connectivity_distinguishes_neighbourhoods():
    g = np.zeros((3, 3, 3), np.uint8)
    g[0, 0, 0] = g[1, 1, 0] = 1  # edge-adjacent
    assert vx.label_components(g, 6)[1].size == 2
    assert vx.label_components(g, 18)[1].size == 1
    g[1, 1, 0] = 0
    g[1, 1, 1] = 1  # corner-adjacent
    assert vx.label_components(g, 18)[1].size == 2
    assert vx.label_components(g, 26)[1].size == 1


def test_bad_connectivity():
    with pytest.raises(ValueError):
        vx.label_components(np.zeros((2, 2, 2), np.uint8), 8)


def test_remove_small_components_handcrafted():
    g = np.zeros((8, 8, 8), np.uint8)
    g[0, 0, :5] = 1
    g[4:8, 4:7, 3:8] = 1
    assert sorted(vx.label_components(g)[1].tolist()) == [5, 60]
    out = vx.remove_small_components(g, 10)
    np.testing.assert_array_equal(out, oracles.remove_small_oracle(g, 10))
    assert out.sum() == 60 and not out[0, 0].any()
    np.testing.assert_array_equal(vx.remove_small_components(g, 0), g)


def test_remove_small_components_idempotent_and_monotone():
    rng = np.random.default_rng(3)
    for _ in range(20):
        g = random_grid(rng, (10, 10, 10), p=0.25)
        once = vx.remove_small_components(g, 4)
        np.testing.assert_array_equal(vx.remove_small_components(once, 4), once)
        higher = vx.remove_small_components(g, 12)
        assert not (higher & (1 - once)).any()
        for size in vx.label_components(once)[1]:
            assert size >= 4


def test_default_min_voxels():
    assert vx.default_min_voxels((128, 128, 128)) == 1048
    assert vx.default_min_voxels((16, 16, 16)) == 2
    assert vx.default_min_voxels((4, 4, 4)) == 1


# -- resample ------------------------------------------------------------------


def test_resample_identity_and_round_trip():
    rng = np.random.default_rng(4)
    g = random_grid(rng, (6, 8, 10))
    np.testing.assert_array_equal(vx.resample(g, g.shape), g)
    up = vx.resample(g, (12, 16, 20))
    np.testing.assert_array_equal(vx.resample(up, g.shape), g)
    up3 = vx.resample(g, (18, 24, 30))
    np.testing.assert_array_equal(vx.resample(up3, g.shape), g)


def test_resample_sphere_shell_matches_oracle():
    c = 7.5
    z, y, x = np.mgrid[:16, :16, :16]
    r = np.sqrt((z - c) ** 2 + (y - c) ** 2 + (x - c) ** 2)
    shell = ((r <= 7) & (r >= 5)).astype(np.uint8)
    np.testing.assert_array_equal(vx.resample(shell, (8, 8, 8)), oracles.nearest_resample_loop(shell, (8, 8, 8)))
    np.testing.assert_array_equal(vx.resample(shell, (11, 7, 20)), oracles.nearest_resample_loop(shell, (11, 7, 20)))


@pytest.mark.parametrize("dims", [(0, 4, 4), (4, -1, 4), (4, 4)])
def test_resample_bad_dims(dims):
    with pytest.raises(ValueError):
        vx.resample(np.zeros((4, 4, 4), np.uint8), dims)


@given(grids, st.integers(1, 3))
@settings(max_examples=40, deadline=None)
def test_resample_integer_factor_round_trip(g, k):
    up = vx.resample(g, tuple(k * n for n in g.shape))
    assert set(np.unique(up)) <= {0, 1}
    np.testing.assert_array_equal(vx.resample(up, g.shape), g)


# -- VXG1 ----------------------------------------------------------------------


def test_vxg_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    g = random_grid(rng, (8, 8, 8))
    p = tmp_path / "g.vxg"
    vx.write_vxg(g, p)
    raw = p.read_bytes()
    assert raw[:4] == b"VXG1" and struct.unpack("<III", raw[4:16]) == (8, 8, 8)
    assert len(raw) == 16 + 512
    out = vx.read_vxg(p)
    np.testing.assert_array_equal(out, g)
    vx.write_vxg(out, tmp_path / "h.vxg")
    assert (tmp_path / "h.vxg").read_bytes() == raw


def test_vxg_layout_is_depth_major():
    g = np.zeros((2, 3, 4), np.uint8)
    g[1, 2, 3] = 1
    g[0, 0, 1] = 1
    buf = b"VXG1" + struct.pack("<III", 2, 3, 4)
    payload = bytearray(24)
    payload[1] = 1
    payload[1 * 12 + 2 * 4 + 3] = 1
    np.testing.assert_array_equal(vx.decode_vxg(buf + bytes(payload)), g)


def test_vxg_truncated():
    buf = b"VXG1" + struct.pack("<III", 2, 2, 2) + bytes(7)
    with pytest.raises(vx.VxgFormatError, match="truncated"):
        vx.decode_vxg(buf)


def test_vxg_bad_magic():
    with pytest.raises(vx.VxgFormatError, match="offset 0"):
        vx.decode_vxg(b"VXG2" + struct.pack("<III", 1, 1, 1) + b"\x00")


def test_vxg_domain_error_names_offset():
    buf = b"VXG1" + struct.pack("<III", 2, 2, 2) + bytes([0, 0, 0, 2, 0, 0, 0, 0])
    with pytest.raises(vx.VxgFormatError, match="0x02") as exc:
        vx.decode_vxg(buf)
    assert exc.value.offset == 19


@given(st.binary(max_size=40))
@settings(max_examples=200, deadline=None)
def test_vxg_fuzz_never_crashes(blob):
    try:
        g = vx.decode_vxg(blob)
    except vx.VxgFormatError:
        return
    assert g.ndim == 3

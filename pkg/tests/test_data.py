import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trsbench.data import (Dataset, generate_synthetic, iter_batches, load_idx, split,
                           two_moons_arcs, write_idx)


def test_noiseless_moons_lie_on_arcs():
    ds = generate_synthetic("two-moons", 200, noise=0.0, seed=3)
    # undo the rescale: raw x spans [-1, 2]; raw y spans [0.5 - s, s] with s the
    # largest sampled sine (t = pi/2 is not on an even grid of 100 points)
    s = np.sin(np.linspace(0.0, np.pi, 100)).max()
    raw = ds.inputs * np.array([3.0, 2 * s - 0.5]) + np.array([-1.0, 0.5 - s])
    upper = raw[ds.labels == 0]
    lower = raw[ds.labels == 1]
    np.testing.assert_allclose(np.hypot(upper[:, 0], upper[:, 1]), 1.0, atol=1e-12)
    assert (upper[:, 1] >= -1e-12).all()
    np.testing.assert_allclose(np.hypot(lower[:, 0] - 1.0, lower[:, 1] - 0.5), 1.0, atol=1e-12)
    assert (lower[:, 1] <= 0.5 + 1e-12).all()


def test_arc_generator_endpoints():
    up, lo = two_moons_arcs(3, 3)
    np.testing.assert_allclose(up[0], [1.0, 0.0])
    np.testing.assert_allclose(lo[-1], [2.0, 0.5], atol=1e-15)


@pytest.mark.parametrize("kind", ["two-moons", "gaussian-blobs"])
def test_balanced_classes(kind):
    ds = generate_synthetic(kind, 100, seed=1)
    assert np.bincount(ds.labels).tolist() == [50, 50]
    odd = generate_synthetic(kind, 101, seed=1)
    counts = np.bincount(odd.labels)
    assert abs(counts[0] - counts[1]) <= 1


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(["two-moons", "gaussian-blobs"]), st.integers(2, 300),
       st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_features_in_unit_square_and_deterministic(kind, n, noise, seed):
    a = generate_synthetic(kind, n, noise, seed)
    b = generate_synthetic(kind, n, noise, seed)
    assert a.inputs.shape == (n, 2)
    assert (a.inputs >= 0).all() and (a.inputs <= 1).all()
    assert a.inputs.tobytes() == b.inputs.tobytes()
    assert a.labels.tobytes() == b.labels.tobytes()


def test_synthetic_errors():
    with pytest.raises(ValueError):
        generate_synthetic("spirals", 10)
    with pytest.raises(ValueError):
        generate_synthetic("two-moons", 1)
    with pytest.raises(ValueError):
        generate_synthetic("two-moons", 10, noise=-0.1)


def test_dataset_validation():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ValueError):
        Dataset(np.array([[np.nan, 0.0]]), np.array([0]), 2)
    with pytest.raises(ValueError):
        Dataset(np.array([[2.0, 0.0]]), np.array([0]), 2, box=(0.0, 1.0))


def _write(tmp_path, images, labels):
    ip, lp = tmp_path / "img.idx", tmp_path / "lbl.idx"
    write_idx(images, labels, ip, lp)
    return ip, lp


def test_idx_all_white_image(tmp_path):
    ip, lp = _write(tmp_path, np.full((1, 2, 3), 255), [7])
    ds = load_idx(ip, lp)
    np.testing.assert_array_equal(ds.inputs, np.ones((1, 6)))
    assert ds.labels.tolist() == [7]
    np.testing.assert_array_equal(ds.box[0], np.zeros(6))
    np.testing.assert_array_equal(ds.box[1], np.ones(6))


def test_idx_byte_scaling(tmp_path):
    ip, lp = _write(tmp_path, np.full((1, 1, 1), 128), [0])
    assert load_idx(ip, lp).inputs[0, 0] == pytest.approx(0.50196, abs=1e-5)
    assert load_idx(ip, lp).inputs[0, 0] == 128 / 255


def test_idx_limit_and_order(tmp_path):
    imgs = np.arange(5 * 4, dtype=np.uint8).reshape(5, 2, 2)
    ip, lp = _write(tmp_path, imgs, [0, 1, 2, 3, 4])
    ds = load_idx(ip, lp, limit=3)
    assert len(ds) == 3 and ds.labels.tolist() == [0, 1, 2]
    np.testing.assert_array_equal(ds.inputs * 255, imgs[:3].reshape(3, 4))
    with pytest.raises(ValueError):
        load_idx(ip, lp, limit=0)


def test_idx_header_is_big_endian(tmp_path):
    ip, lp = _write(tmp_path, np.zeros((2, 3, 4)), [1, 1])
    raw = ip.read_bytes()
    assert raw[:16] == bytes.fromhex("00000803" "00000002" "00000003" "00000004")
    assert lp.read_bytes()[:8] == bytes.fromhex("00000801" "00000002")


def test_idx_errors(tmp_path):
    ip, lp = _write(tmp_path, np.zeros((2, 3, 3)), [1, 1])
    good_i, good_l = ip.read_bytes(), lp.read_bytes()
    ip.write_bytes(b"\x00\x00\x08\x01" + good_i[4:])
    with pytest.raises(ValueError, match="magic"):
        load_idx(ip, lp)
    ip.write_bytes(good_i[:-1])
    with pytest.raises(ValueError, match="truncated"):
        load_idx(ip, lp)
    ip.write_bytes(good_i)
    write_idx(np.zeros((3, 1, 1)), [0, 0, 0], tmp_path / "other.idx", lp)
    with pytest.raises(ValueError, match="count"):
        load_idx(ip, lp)
    lp.write_bytes(good_l[:-1])
    with pytest.raises(ValueError, match="truncated"):
        load_idx(ip, lp)


def test_split_disjoint_and_covering():
    ds = generate_synthetic("two-moons", 101, seed=0)
    tr, te = split(ds, 0.25, seed=5)
    assert len(tr) + len(te) == 101
    rows = {tuple(r) for r in tr.inputs} | {tuple(r) for r in te.inputs}
    assert len(rows) == 101
    assert not ({tuple(r) for r in tr.inputs} & {tuple(r) for r in te.inputs})


def test_batches_deterministic_and_ordered():
    ds = generate_synthetic("two-moons", 23, seed=0)
    plain = np.concatenate([x for x, _ in iter_batches(ds, 5)])
    np.testing.assert_array_equal(plain, ds.inputs)
    a = [y for _, y in iter_batches(ds, 5, np.random.default_rng(4))]
    b = [y for _, y in iter_batches(ds, 5, np.random.default_rng(4))]
    assert all(np.array_equal(p, q) for p, q in zip(a, b))
    assert sorted(np.concatenate(a).tolist()) == sorted(ds.labels.tolist())

import struct

import numpy as np
import pytest
from scipy import stats

from spgan.dataio import (
    Mode,
    SyntheticSpec,
    blobs8,
    format_synthetic_spec,
    load_dataset,
    load_idx,
    make_rng,
    make_synthetic,
    mode_centroids,
    parse_synthetic_spec,
    read_idx,
    sample_batch,
    write_idx,
    DatasetHandle,
)
from spgan.errors import ConfigError, ContractError, DimensionError, FormatError, ParameterError
from spgan.serialize import save_dataset


def idx_bytes(pixels, n=2, h=2, w=2):
    return struct.pack(">IIII", 0x00000803, n, h, w) + bytes(pixels)


def test_idx_rescale_endpoints(tmp_path):
    path = tmp_path / "x.idx"
    path.write_bytes(idx_bytes([0, 255, 51, 204, 255, 0, 127, 128]))
    ds = load_idx(path)
    assert ds.images.shape == (2, 1, 2, 2)
    assert ds.images[0, 0, 0, 0] == -1.0 and ds.images[0, 0, 0, 1] == 1.0
    assert ds.images[1, 0, 0, 0] == 1.0 and ds.images[1, 0, 0, 1] == -1.0


def test_hand_built_single_image(tmp_path):
    pixels = list(range(0, 240, 20))
    path = tmp_path / "one.idx"
    path.write_bytes(struct.pack(">IIII", 0x803, 1, 3, 4) + bytes(pixels))
    assert np.array_equal(read_idx(path), np.array(pixels, dtype=np.uint8).reshape(1, 3, 4))
    assert np.array_equal(load_idx(path).images[0, 0], np.array(pixels).reshape(3, 4) / 127.5 - 1.0)


def test_idx_writer_roundtrip(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, size=(3, 5, 4)).astype(np.uint8)
    write_idx(tmp_path / "a.idx", arr)
    write_idx(tmp_path / "l.idx", np.array([2, 0, 1], dtype=np.uint8))
    ds = load_idx(tmp_path / "a.idx", tmp_path / "l.idx")
    assert np.array_equal(read_idx(tmp_path / "a.idx"), arr)
    assert ds.labels.tolist() == [2, 0, 1]


@pytest.mark.parametrize(
    "raw, offset",
    [
        (b"\x00\x00", 0),
        (struct.pack(">I", 0x804) + b"\x00" * 12, 0),
        (struct.pack(">II", 0x803, 2), 8),
        (idx_bytes([1, 2, 3]), 19),
        (idx_bytes([0] * 9), 24),
    ],
    ids=["short", "magic", "header", "payload", "trailing"],
)
def test_idx_errors_carry_offsets(tmp_path, raw, offset):
    path = tmp_path / "bad.idx"
    path.write_bytes(raw)
    with pytest.raises(FormatError) as err:
        read_idx(path)
    assert err.value.offset == offset


def test_label_count_mismatch(tmp_path):
    (tmp_path / "x.idx").write_bytes(idx_bytes([0] * 8))
    write_idx(tmp_path / "l.idx", np.array([1, 2, 3], dtype=np.uint8))
    with pytest.raises(FormatError):
        load_idx(tmp_path / "x.idx", tmp_path / "l.idx")


def test_point_mass_mode():
    spec = SyntheticSpec(modes=(Mode(4, 6, 2.0, 1e-3),), image_side=9, samples_per_mode=5, noise_std=0.0)
    ds = make_synthetic(spec)
    expected = np.full((9, 9), -1.0)
    expected[4, 6] = 1.0
    assert all(np.array_equal(img[0], expected) for img in ds.images)
    noisy = make_synthetic(SyntheticSpec(modes=spec.modes, image_side=9, samples_per_mode=5))
    for img in noisy.images[:, 0]:
        assert np.argmax(img) == 4 * 9 + 6 and np.sum(img > 0) == 1


def test_synthetic_is_deterministic():
    a, b = make_synthetic(blobs8(seed=4, samples_per_mode=16)), make_synthetic(blobs8(seed=4, samples_per_mode=16))
    assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)
    assert a.images.tobytes() != make_synthetic(blobs8(seed=5, samples_per_mode=16)).images.tobytes()


def clipped_normal_moments(mu, s):
    """Mean and variance of clip(mu + s Z, -1, 1)."""
    a, b = (-1.0 - mu) / s, (1.0 - mu) / s
    Pa, Pb = stats.norm.cdf(a), stats.norm.cdf(b)
    pa, pb = stats.norm.pdf(a), stats.norm.pdf(b)
    mid = Pb - Pa
    m1 = -Pa + (1.0 - Pb) + mu * mid + s * (pa - pb)
    m2 = Pa + (1.0 - Pb) + mu**2 * mid + 2 * mu * s * (pa - pb) + s**2 * (mid + a * pa - b * pb)
    return m1, m2 - m1**2


def test_mode_centroids_match_clipped_normal_expectation():
    spec = blobs8(seed=11, samples_per_mode=400)
    ds = make_synthetic(spec)
    mu = mode_centroids(spec)
    mean, var = clipped_normal_moments(mu, spec.noise_std)
    n = spec.samples_per_mode
    for k in range(len(spec.modes)):
        emp = ds.images[ds.labels == k].mean(axis=0)
        # expected norm of the error is sqrt(sum(var) / n); allow three times that
        assert np.linalg.norm(emp - mean[k]) <= 3.0 * np.sqrt(var[k].sum() / n)


def test_blob_lattice():
    spec = blobs8()
    assert len(spec.modes) == 8
    assert {(m.row, m.col) for m in spec.modes} == {(r, c) for r in (3, 7, 11) for c in (3, 7, 11)} - {(7, 7)}
    ds = make_synthetic(spec)
    assert ds.images.min() >= -1.0 and ds.images.max() <= 1.0


def test_spec_validation():
    with pytest.raises(ParameterError):
        SyntheticSpec(modes=(Mode(20, 3),))
    with pytest.raises(ParameterError):
        SyntheticSpec(modes=(Mode(3, 3, 1.0, 0.0),))
    with pytest.raises(ParameterError):
        SyntheticSpec(modes=())


def test_spec_text_roundtrip(tmp_path):
    spec = SyntheticSpec(modes=(Mode(1, 2, 1.5, 0.7), Mode(3.5, 0, 2.0, 1.0)), image_side=5, seed=3)
    assert parse_synthetic_spec(format_synthetic_spec(spec)) == spec
    (tmp_path / "s.txt").write_text(format_synthetic_spec(spec))
    loaded = load_dataset(str(tmp_path / "s.txt"))
    assert loaded.spec == spec and len(loaded.data) == 512
    with pytest.raises(ConfigError):
        parse_synthetic_spec("colour = red\n")


def test_raw_dataset_container(tmp_path):
    imgs = np.random.default_rng(1).uniform(-1, 1, size=(4, 3, 5, 5))
    save_dataset(tmp_path / "d.spgdata", imgs, np.array([0, 1, 1, 0]))
    loaded = load_dataset(str(tmp_path / "d.spgdata"))
    assert np.array_equal(loaded.data.images, imgs) and loaded.data.labels.tolist() == [0, 1, 1, 0]
    with pytest.raises(FileNotFoundError):
        load_dataset(str(tmp_path / "missing"))


def test_handle_is_immutable():
    ds = DatasetHandle(np.zeros((2, 1, 3, 3)), [0, 1])
    with pytest.raises(ValueError):
        ds.images[0, 0, 0, 0] = 1.0
    with pytest.raises(DimensionError):
        DatasetHandle(np.zeros((2, 1, 3, 3)), [0])


def test_sample_batch_basics():
    ds = make_synthetic(blobs8(samples_per_mode=4))
    a = sample_batch(ds, 10, make_rng(3))
    assert np.array_equal(a, sample_batch(ds, 10, make_rng(3)))
    one = sample_batch(ds, 1, make_rng(4))
    assert any(np.array_equal(one[0], img) for img in ds.images)
    with pytest.raises(ParameterError):
        sample_batch(ds, 0, make_rng(0))
    with pytest.raises(ContractError):
        sample_batch(DatasetHandle(np.zeros((0, 1, 2, 2))), 1, make_rng(0))


def test_sample_batch_frequencies_are_uniform():
    n = 50
    ds = DatasetHandle(np.arange(n, dtype=np.float64).reshape(n, 1, 1, 1))
    draws = sample_batch(ds, 100_000, make_rng(12)).ravel().astype(int)
    counts = np.bincount(draws, minlength=n)
    expected = 100_000 / n
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    assert chi2 <= stats.chi2.ppf(0.99, n - 1)


def test_rng_is_philox():
    assert isinstance(make_rng(0).bit_generator, np.random.Philox)
    assert make_rng(7).integers(0, 2**62) == np.random.Generator(np.random.Philox(7)).integers(0, 2**62)

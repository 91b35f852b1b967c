import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spgan.errors import DimensionError, GeometryError
from spgan.gradcheck import check_function
from spgan.patches import PatchGeometry, assemble_image, extract_patches
from spgan.tensor import Tensor, backward

GEOMETRIES = [
    PatchGeometry(15, 15, 1, 3, 3),
    PatchGeometry(15, 15, 1, 3, 2),
    PatchGeometry(8, 8, 1, 3, 1),
    PatchGeometry(32, 32, 3, 3, 1),
    PatchGeometry(9, 7, 2, 3, 2),
    PatchGeometry(6, 6, 3, 6, 4),
    PatchGeometry(1, 3, 1, 1, 1, patch_w=2),
]


def scatter_mean(P, geom):
    """Pixel-by-pixel oracle: visit every patch element and average what lands on each pixel."""
    acc = np.zeros(geom.image_shape)
    cnt = np.zeros(geom.image_shape)
    for j in range(geom.grid_w):
        for i in range(geom.grid_h):
            col = P[:, j * geom.grid_h + i]
            for u in range(geom.patch):
                for v in range(geom.patch_w):
                    for c in range(geom.channels):
                        y, x = i * geom.stride + u, j * geom.stride + v
                        acc[c, y, x] += col[(u * geom.patch_w + v) * geom.channels + c]
                        cnt[c, y, x] += 1
    return acc / cnt


def test_full_scale_shape_counts():
    geom = PatchGeometry(32, 32, 3, 3, 1)
    P = extract_patches(np.zeros(geom.image_shape), geom)
    assert P.shape == (27, 900)


def test_single_patch_is_vectorized_image():
    rng = np.random.default_rng(0)
    img = rng.normal(size=(3, 5, 5))
    geom = PatchGeometry(5, 5, 3, 5, 7)
    P = extract_patches(img, geom)
    assert P.shape == (75, 1)
    assert np.array_equal(P[:, 0], img.transpose(1, 2, 0).ravel())


def test_disjoint_patches_permute_pixels():
    img = np.arange(16.0).reshape(1, 4, 4)
    P = extract_patches(img, PatchGeometry(4, 4, 1, 2, 2))
    assert P.shape == (4, 4)
    assert sorted(P.T.ravel().tolist()) == list(range(16))
    # column-major grid: second column is the patch below the first
    assert P[:, 0].tolist() == [0, 1, 4, 5]
    assert P[:, 1].tolist() == [8, 9, 12, 13]


def test_overlap_average_hand_case():
    a, b, c, d = 1.0, 2.0, 3.0, 5.0
    geom = PatchGeometry(1, 3, 1, 1, 1, patch_w=2)
    out = assemble_image(np.array([[a, c], [b, d]]), geom)
    assert out.tolist() == [[[a, (b + c) / 2, d]]]


@pytest.mark.parametrize("geom", GEOMETRIES, ids=str)
def test_roundtrip(geom):
    img = np.random.default_rng(1).normal(size=geom.image_shape)
    assert np.max(np.abs(assemble_image(extract_patches(img, geom), geom) - img)) <= 1e-12


@pytest.mark.parametrize("geom", GEOMETRIES, ids=str)
def test_assemble_matches_scatter_oracle(geom):
    P = np.random.default_rng(2).normal(size=(geom.patch_dim, geom.n_patches))
    assert np.max(np.abs(assemble_image(P, geom) - scatter_mean(P, geom))) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
       st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**31))
def test_assemble_is_linear(p, t, gh, gw, c, alpha, beta, seed):
    t = min(t, p)
    geom = PatchGeometry((gh - 1) * t + p, (gw - 1) * t + p, c, p, t)
    rng = np.random.default_rng(seed)
    P1, P2 = rng.normal(size=(2, geom.patch_dim, geom.n_patches))
    lhs = assemble_image(alpha * P1 + beta * P2, geom)
    rhs = alpha * assemble_image(P1, geom) + beta * assemble_image(P2, geom)
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


@pytest.mark.parametrize("geom", GEOMETRIES[:5], ids=str)
def test_assemble_gradient(geom):
    rng = np.random.default_rng(3)
    err = check_function(lambda P: assemble_image(P, geom), [rng.normal(size=(geom.patch_dim, geom.n_patches))], rng)
    assert err <= 1e-6


def test_tensor_inputs_stay_on_graph():
    geom = PatchGeometry(8, 8, 1, 3, 1)
    P = Tensor(np.ones((geom.patch_dim, geom.n_patches)), requires_grad=True)
    img = assemble_image(P, geom)
    assert isinstance(img, Tensor)
    g = backward(img.sum(), [P])[P]
    # each patch element receives 1 / coverage of its pixel; summed over the image total is H*W
    assert g.data.sum() == pytest.approx(64.0, rel=1e-12)


def test_non_tiling_geometry_rejected():
    with pytest.raises(GeometryError):
        PatchGeometry(16, 16, 1, 3, 3)
    with pytest.raises(GeometryError):
        PatchGeometry(7, 7, 1, 3, 4)  # gaps between patches
    assert issubclass(GeometryError, DimensionError)


def test_shape_mismatch():
    geom = PatchGeometry(15, 15, 1, 3, 3)
    with pytest.raises(DimensionError):
        extract_patches(np.zeros((1, 14, 15)), geom)
    with pytest.raises(DimensionError):
        assemble_image(np.zeros((9, 24)), geom)

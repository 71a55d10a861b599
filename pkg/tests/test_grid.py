"""Field algebra against independent oracles (scipy.ndimage for warps)."""

import numpy as np
import pytest
from scipy.ndimage import map_coordinates

from respmodel.errors import GridMismatch, InvalidDims, NonConvergence, ValidationError
from respmodel.grid import (
    DisplacementField,
    GridMeta,
    MaskVolume,
    ScalarVolume,
    compose_fields,
    invert_field,
    inversion_residual,
    resample_field,
    resample_volume,
    sample_trilinear,
    warp_image,
)

from conftest import smooth_field


def oracle_sample(values, meta, points):
    """Independent clamped trilinear sampler (scipy, order=1, nearest edge)."""
    idx = meta.world_to_index(points.reshape(-1, 3))
    coords = [idx[:, 2], idx[:, 1], idx[:, 0]]  # array axes are (z, y, x)
    return map_coordinates(values, coords, order=1, mode="nearest")


class TestGridMeta:
    def test_invariants(self):
        with pytest.raises(InvalidDims):
            GridMeta((1, 4, 4))
        with pytest.raises(ValidationError):
            GridMeta((4, 4, 4), (0.0, 1.0, 1.0))
        m = GridMeta((4, 5, 6), (1.0, 2.0, 3.0), (-1.0, 0.0, 1.0))
        assert m.n_vox == 120
        assert m.shape_zyx == (6, 5, 4)

    def test_world_index_round_trip(self):
        m = GridMeta((8, 8, 8), (1.5, 2.0, 2.5), (3.0, -2.0, 0.0))
        p = np.array([[4.5, 0.0, 10.0]])
        assert np.allclose(m.index_to_world(m.world_to_index(p)), p)

    def test_volume_validation(self):
        m = GridMeta((4, 4, 4))
        with pytest.raises(ValidationError):
            ScalarVolume(m, np.full(m.shape_zyx, np.nan))
        with pytest.raises(ValidationError):
            ScalarVolume(m, np.zeros((4, 4, 5)))
        with pytest.raises(ValidationError):
            MaskVolume(m, np.full(m.shape_zyx, 2))


class TestSampleTrilinear:
    def test_constant_everywhere(self, kernel_backend):
        m = GridMeta((5, 5, 5), (2.0, 2.0, 2.0))
        vol = ScalarVolume.full(m, 3.25)
        pts = np.array([[0.0, 0.0, 0.0], [3.3, 1.7, 5.9], [-10.0, 50.0, 4.0]])
        assert np.allclose(sample_trilinear(vol, pts), 3.25)

    def test_exact_at_nodes(self, kernel_backend):
        m = GridMeta((6, 5, 4), (1.0, 1.0, 1.0))
        pts = m.coordinate_grid()
        vol = ScalarVolume(m, pts[..., 0])  # value = x index
        p = np.array([3.0, 2.0, 1.0])
        assert sample_trilinear(vol, p) == 3.0

    def test_midpoint_alternating_x(self, kernel_backend):
        # 2x2x2 with values 0/1 alternating along x: midway -> 0.5 by the
        # closed-form trilinear weights.
        m = GridMeta((2, 2, 2), (1.0, 1.0, 1.0))
        vals = np.zeros((2, 2, 2))
        vals[:, :, 1] = 1.0
        vol = ScalarVolume(m, vals)
        assert sample_trilinear(vol, np.array([0.5, 0.0, 0.0])) == pytest.approx(0.5)

    def test_matches_oracle_random(self, kernel_backend):
        rng = np.random.default_rng(3)
        m = GridMeta((9, 8, 7), (1.5, 2.0, 1.0), (4.0, -3.0, 0.5))
        vol = ScalarVolume(m, rng.normal(size=m.shape_zyx))
        pts = rng.uniform(-5, 25, size=(200, 3))
        ours = sample_trilinear(vol, pts)
        assert np.allclose(ours, oracle_sample(vol.values, m, pts), atol=1e-12)


class TestWarpImage:
    def test_zero_field_bit_exact(self, kernel_backend):
        rng = np.random.default_rng(0)
        m = GridMeta((8, 8, 8))
        img = ScalarVolume(m, rng.normal(size=m.shape_zyx))
        out = warp_image(img, DisplacementField.zeros(m))
        assert np.array_equal(out.values, img.values)

    def test_constant_image(self, kernel_backend):
        m = GridMeta((8, 8, 8))
        img = ScalarVolume.full(m, 7.0)
        field = smooth_field(m, amplitude=3.0)
        assert np.allclose(warp_image(img, field).values, 7.0)

    def test_linear_ramp_constant_shift(self, kernel_backend):
        # out(x) = img(x + d) = x0 + d on the interior of a ramp f(x) = x0.
        m = GridMeta((10, 6, 6), (2.0, 2.0, 2.0))
        pts = m.coordinate_grid()
        img = ScalarVolume(m, pts[..., 0])
        d = 3.0
        out = warp_image(img, DisplacementField.constant(m, (d, 0.0, 0.0)))
        interior = pts[..., 0] < (m.origin[0] + m.extent[0] - m.spacing[0] - d)
        assert np.allclose(out.values[interior], pts[..., 0][interior] + d)

    def test_grid_mismatch(self):
        img = ScalarVolume.full(GridMeta((4, 4, 4)), 0.0)
        field = DisplacementField.zeros(GridMeta((4, 4, 5)))
        with pytest.raises(GridMismatch):
            warp_image(img, field)

    def test_matches_oracle(self, kernel_backend):
        rng = np.random.default_rng(7)
        m = GridMeta((12, 11, 10), (2.0, 1.5, 1.0))
        img = ScalarVolume(m, rng.normal(size=m.shape_zyx))
        field = smooth_field(m, amplitude=2.5, seed=5)
        out = warp_image(img, field)
        pts = m.coordinate_grid() + field.u
        expected = oracle_sample(img.values, m, pts).reshape(m.shape_zyx)
        assert np.allclose(out.values, expected, atol=1e-12)


class TestComposeFields:
    def test_identity_outer(self, kernel_backend, meta16):
        inner = smooth_field(meta16, 2.0, seed=1)
        out = compose_fields(DisplacementField.zeros(meta16), inner)
        assert np.allclose(out.u, inner.u)

    def test_constant_translations_add(self, kernel_backend, meta16):
        a = DisplacementField.constant(meta16, (1.0, -2.0, 0.5))
        b = DisplacementField.constant(meta16, (0.25, 1.0, -1.5))
        out = compose_fields(a, b)
        assert np.allclose(out.u, a.u + b.u)

    def test_brute_force_oracle(self, kernel_backend, meta16):
        # compare against dense evaluation of phi_a(phi_b(x)) at every voxel
        a = smooth_field(meta16, 2.0, seed=2)
        b = smooth_field(meta16, 2.0, seed=3)
        out = compose_fields(a, b)
        pts = meta16.coordinate_grid()
        phib = pts + b.u
        ua_at = np.stack(
            [oracle_sample(a.u[..., c], meta16, phib).reshape(meta16.shape_zyx)
             for c in range(3)],
            axis=-1,
        )
        expected = phib + ua_at - pts
        assert np.allclose(out.u, expected, atol=1e-12)

    def test_associativity_on_smooth_fields(self, meta32):
        fa = smooth_field(meta32, 1.5, seed=4)
        fb = smooth_field(meta32, 1.5, seed=5)
        fc = smooth_field(meta32, 1.5, seed=6)
        left = compose_fields(compose_fields(fa, fb), fc)
        right = compose_fields(fa, compose_fields(fb, fc))
        diff = np.sqrt(((left.u - right.u) ** 2).sum(axis=-1)).max()
        assert diff <= 1e-3


class TestInvertField:
    def test_zero_field(self, kernel_backend, meta16):
        inv = invert_field(DisplacementField.zeros(meta16))
        assert np.allclose(inv.u, 0.0)

    def test_constant_field(self, kernel_backend, meta16):
        f = DisplacementField.constant(meta16, (1.5, -0.5, 2.0))
        inv = invert_field(f)
        assert np.allclose(inv.u, -f.u)

    def test_sinusoidal_residual(self, meta32):
        f = smooth_field(meta32, 2.0, seed=8)
        inv = invert_field(f, tol=0.01, max_iter=50)
        assert inversion_residual(f, inv) < 0.1

    def test_non_convergence_raises(self, meta16):
        # violently non-diffeomorphic: 40 mm high-frequency displacements
        f = smooth_field(meta16, 40.0, seed=9)
        with pytest.raises(NonConvergence):
            invert_field(f, tol=1e-4, max_iter=3)


class TestResample:
    def test_identity_dims(self, kernel_backend):
        rng = np.random.default_rng(1)
        m = GridMeta((8, 8, 8), (2.0, 2.0, 2.0))
        vol = ScalarVolume(m, rng.normal(size=m.shape_zyx))
        out = resample_volume(vol, (8, 8, 8))
        assert out.meta == m
        assert np.array_equal(out.values, vol.values)

    def test_constant_any_dims(self, kernel_backend):
        vol = ScalarVolume.full(GridMeta((16, 16, 16), (1.0, 1.0, 1.0)), 2.5)
        out = resample_volume(vol, (5, 7, 9))
        assert np.allclose(out.values, 2.5)

    def test_ramp_downsample_doubles_spacing(self, kernel_backend):
        m = GridMeta((64, 8, 8), (1.0, 2.0, 2.0), (5.0, 0.0, 0.0))
        pts = m.coordinate_grid()
        vol = ScalarVolume(m, pts[..., 0])
        out = resample_volume(vol, (32, 8, 8))
        assert out.meta.spacing[0] == pytest.approx(2.0)
        assert out.meta.origin == m.origin
        # world-coordinate values at the shared (interior) sample points
        new_pts = out.meta.coordinate_grid()
        inside = new_pts[..., 0] <= pts[..., 0].max()
        assert np.allclose(out.values[inside], new_pts[..., 0][inside])

    def test_invalid_dims(self):
        vol = ScalarVolume.full(GridMeta((8, 8, 8)), 0.0)
        with pytest.raises(InvalidDims):
            resample_volume(vol, (1, 8, 8))

    def test_field_linear_preserved(self, kernel_backend):
        m = GridMeta((16, 16, 16), (2.0, 2.0, 2.0))
        pts = m.coordinate_grid()
        u = np.stack([0.1 * pts[..., 0], -0.05 * pts[..., 1], 0.02 * pts[..., 2]], axis=-1)
        f = DisplacementField(m, u)
        out = resample_field(f, (8, 8, 8))
        new_pts = out.meta.coordinate_grid()
        ok = np.ones(out.meta.shape_zyx, dtype=bool)
        for c in range(3):
            ok &= new_pts[..., c] <= pts[..., c].max()
        expected = np.stack(
            [0.1 * new_pts[..., 0], -0.05 * new_pts[..., 1], 0.02 * new_pts[..., 2]],
            axis=-1,
        )
        assert np.allclose(out.u[ok], expected[ok], atol=1e-12)

    def test_identity_field_any_dims(self, kernel_backend):
        f = DisplacementField.zeros(GridMeta((12, 12, 12)))
        out = resample_field(f, (7, 9, 11))
        assert np.allclose(out.u, 0.0)


def test_backends_agree_on_warp():
    from respmodel import _kernels

    rng = np.random.default_rng(11)
    m = GridMeta((10, 10, 10), (1.5, 2.0, 2.5))
    img = ScalarVolume(m, rng.normal(size=m.shape_zyx))
    field = smooth_field(m, 2.0, seed=12)
    results = {}
    for backend in _kernels.available_backends():
        prev = _kernels.use_backend(backend)
        try:
            results[backend] = warp_image(img, field).values
        finally:
            _kernels.use_backend(prev)
    vals = list(results.values())
    for other in vals[1:]:
        assert np.allclose(vals[0], other, atol=1e-9)

import math
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase

from scenes.gradcheck import finite_diff_gradient
from surfels.exceptions import InvalidArgument

from .field import VoxelSdfField, alpha_from_sdf, eikonal_residual, sdf_alpha, sdf_query, trilinear
from .io import level_set_points, load_grid, load_points_ply, save_grid, save_points_ply
from .volume import (
    PRODUCT_TRANSMITTANCE, RaySampleSet, composite_samples, depth_guided_samples, ray_entropy, volume_render_ray,
)


def random_field(seed, resolution=6):
    generator = torch.Generator().manual_seed(seed)
    field = VoxelSdfField(resolution, dtype=torch.float64)
    with torch.no_grad():
        field.sdf.copy_(torch.randn(field.sdf.shape, generator=generator, dtype=torch.float64))
        field.radiance.copy_(torch.randn(field.radiance.shape, generator=generator, dtype=torch.float64))
        field.confidence.copy_(torch.randn(field.confidence.shape, generator=generator, dtype=torch.float64))
    return field


def interior_points(field, count, seed):
    """Points at least 20% of a cell away from every cell face."""
    rng = np.random.default_rng(seed)
    cells = rng.integers(0, field.resolution - 1, size=(count, 3))
    frac = rng.uniform(0.2, 0.8, size=(count, 3))
    lo = field.bounds_min.double().numpy()
    return torch.as_tensor(lo + (cells + frac) * field.cell_size, dtype=torch.float64)


def scalar_composite(alphas, deltas, t, colors, confidences):
    """Independent per-sample loop with exp transmittance."""
    color = np.zeros(3)
    confidence = 0.0
    weight_sum = 0.0
    depth_sum = 0.0
    optical = 0.0
    for i in range(len(alphas)):
        T = math.exp(-optical)
        w = alphas[i] * T
        color += w * colors[i]
        confidence += w * confidences[i]
        weight_sum += w
        depth_sum += w * t[i]
        optical += alphas[i] * deltas[i]
    return color, confidence, depth_sum / max(weight_sum, 1e-8)


class SdfQueryTests(SimpleTestCase):
    """Tests for trilinear SDF queries"""

    def test_sphere_center(self):
        """Test the default sphere grid reads -r at the center within one cell"""
        field = VoxelSdfField(64, dtype=torch.float64)
        value, _ = sdf_query(field, [0.0, 0.0, 0.0])
        self.assertLess(abs(float(value) + 0.5), field.cell_size)

    def test_constant_grid(self):
        """Test a constant grid gives its value and zero gradient"""
        field = VoxelSdfField(8, dtype=torch.float64)
        with torch.no_grad():
            field.sdf.fill_(0.7)
        value, grad = sdf_query(field, interior_points(field, 20, 0))
        self.assertTrue(torch.allclose(value, torch.full_like(value, 0.7), atol=1e-15))
        self.assertTrue(bool((grad.abs() < 1e-12).all()))

    def test_gradient_matches_finite_differences(self):
        """Test the analytic spatial gradient agrees with central differences inside cells"""
        field = random_field(1, resolution=7)
        points = interior_points(field, 50, 1)
        _, grad = field.query(points)
        h = 1e-5
        for axis in range(3):
            offset = torch.zeros(3, dtype=torch.float64)
            offset[axis] = h
            numeric = (field.distance(points + offset) - field.distance(points - offset)) / (2 * h)
            self.assertTrue(torch.allclose(grad[:, axis], numeric.detach(), atol=1e-6))

    def test_outside_bounds_is_clamped(self):
        """Test queries beyond the box read the border value"""
        field = random_field(2)
        inside, _ = field.query(torch.tensor([1.0, 0.3, -0.2], dtype=torch.float64))
        outside, _ = field.query(torch.tensor([1.5, 0.3, -0.2], dtype=torch.float64))
        self.assertAlmostEqual(float(inside), float(outside), places=12)

    def test_continuous_across_cells(self):
        """Test the interpolant agrees on both sides of a cell face"""
        field = random_field(3)
        face = float(field.bounds_min[0]) + 2 * field.cell_size
        a = field.distance(torch.tensor([face - 1e-12, 0.1, 0.2], dtype=torch.float64))
        b = field.distance(torch.tensor([face + 1e-12, 0.1, 0.2], dtype=torch.float64))
        self.assertAlmostEqual(float(a), float(b), places=9)

    def test_channel_grid(self):
        """Test multi-channel grids interpolate per channel"""
        field = random_field(4)
        points = interior_points(field, 5, 4)
        rgb = trilinear(field.radiance, points, field.bounds_min, field.bounds_max)
        red = trilinear(field.radiance[..., 0], points, field.bounds_min, field.bounds_max)
        self.assertTrue(torch.allclose(rgb[:, 0], red, atol=1e-14))

    def test_rejects_bad_construction(self):
        """Test invalid resolutions and sharpness are rejected"""
        with self.assertRaises(InvalidArgument):
            VoxelSdfField(1)
        with self.assertRaises(InvalidArgument):
            VoxelSdfField(4, sharpness=0.0)


class SdfAlphaTests(SimpleTestCase):
    """Tests for the SDF-to-opacity conversion"""

    def test_equal_values(self):
        """Test equal consecutive distances give zero opacity"""
        alpha = sdf_alpha(torch.tensor(0.3, dtype=torch.float64), torch.tensor(0.3, dtype=torch.float64), 10.0)
        self.assertEqual(float(alpha), 0.0)

    def test_worked_value(self):
        """Test (0.1, -0.1, s=10) gives 0.6322"""
        alpha = sdf_alpha(torch.tensor(0.1, dtype=torch.float64), torch.tensor(-0.1, dtype=torch.float64), 10.0)
        self.assertAlmostEqual(float(alpha), 0.6322, delta=1e-4)

    def test_exiting_surface(self):
        """Test increasing distance along the ray gives zero opacity"""
        alpha = sdf_alpha(torch.tensor(-0.2, dtype=torch.float64), torch.tensor(0.1, dtype=torch.float64), 10.0)
        self.assertEqual(float(alpha), 0.0)

    def test_range_over_random_triples(self):
        """Test opacity lies in [0, 1) and is 0 whenever the distance does not drop"""
        generator = torch.Generator().manual_seed(0)
        count = 1_000_000
        s_i = torch.rand(count, generator=generator, dtype=torch.float64) * 2 - 1
        s_next = torch.rand(count, generator=generator, dtype=torch.float64) * 2 - 1
        sharpness = 0.1 + torch.rand(count, generator=generator, dtype=torch.float64) * 100
        alpha = sdf_alpha(s_i, s_next, sharpness)
        self.assertTrue(bool((alpha >= 0).all()))
        self.assertTrue(bool((alpha < 1).all()))
        self.assertTrue(bool((alpha[s_next >= s_i] == 0).all()))

    def test_field_alpha(self):
        """Test alpha_from_sdf reads the field at both sample points"""
        field = random_field(5)
        a, b = interior_points(field, 2, 5)
        expected = sdf_alpha(field.distance(a), field.distance(b), field.sharpness)
        self.assertEqual(float(alpha_from_sdf(field, a, b)), float(expected))


class CompositingTests(SimpleTestCase):
    """Tests for per-ray volume compositing"""

    def test_empty_ray(self):
        """Test all-zero opacities give zero colour, confidence and weights"""
        alphas = torch.zeros(1, 6, dtype=torch.float64)
        t = torch.linspace(1, 2, 6, dtype=torch.float64)[None]
        colors = torch.rand(1, 6, 3, dtype=torch.float64)
        color, normal, confidence, _, weights = composite_samples(
            alphas, torch.full_like(t, 0.2), t, colors, torch.rand(1, 6, 3, dtype=torch.float64),
            torch.rand(1, 6, dtype=torch.float64))
        self.assertEqual(float(color.abs().sum()), 0.0)
        self.assertEqual(float(confidence.abs().sum()), 0.0)
        self.assertEqual(float(weights.abs().sum()), 0.0)
        self.assertEqual(float(normal.abs().sum()), 0.0)

    def test_opaque_first_sample(self):
        """Test a fully opaque first sample returns its colour"""
        colors = torch.tensor([[[0.2, 0.4, 0.6], [0.9, 0.1, 0.3]]], dtype=torch.float64)
        t = torch.tensor([[1.0, 1.7]], dtype=torch.float64)
        for mode, second in (('exp', 0.0), (PRODUCT_TRANSMITTANCE, 0.6)):
            alphas = torch.tensor([[1.0, second]], dtype=torch.float64)
            color, *_ = composite_samples(alphas, torch.full_like(t, 0.7), t, colors, transmittance=mode)
            self.assertTrue(torch.allclose(color[0], colors[0, 0], atol=1e-15), mode)

    def test_matches_scalar_loop(self):
        """Test random 8-sample rays agree with a scalar compositing loop"""
        rng = np.random.default_rng(7)
        for _ in range(20):
            alphas = rng.uniform(0, 1, 8)
            t = np.sort(rng.uniform(1, 3, 8))
            deltas = rng.uniform(0.05, 0.3, 8)
            colors = rng.uniform(0, 1, (8, 3))
            confidences = rng.uniform(0, 1, 8)
            color, _, confidence, depth, weights = composite_samples(
                torch.as_tensor(alphas)[None], torch.as_tensor(deltas)[None], torch.as_tensor(t)[None],
                torch.as_tensor(colors)[None], confidences=torch.as_tensor(confidences)[None])
            ref_color, ref_confidence, ref_depth = scalar_composite(alphas, deltas, t, colors, confidences)
            np.testing.assert_allclose(color[0].numpy(), ref_color, atol=1e-9)
            self.assertAlmostEqual(float(confidence[0]), ref_confidence, delta=1e-9)
            self.assertAlmostEqual(float(depth[0]), ref_depth, delta=1e-9)
            self.assertTrue(bool((weights >= 0).all()))

    def test_field_render_is_finite(self):
        """Test rendering through a field gives unit normals and n−1 opacities padded with zero"""
        field = VoxelSdfField(16, dtype=torch.float64)
        origins = torch.tensor([[0.0, 0.0, 3.0]], dtype=torch.float64).expand(4, 3)
        directions = torch.tensor([[0.0, 0.0, -1.0], [0.05, 0.0, -1.0], [0.0, 0.05, -1.0], [0.1, 0.1, -1.0]],
                                  dtype=torch.float64)
        samples = depth_guided_samples(origins, directions, torch.zeros(4), 1.0, 5.0, 16, 16)
        out = volume_render_ray(field, samples)
        self.assertEqual(float(out.alphas[:, -1].abs().sum()), 0.0)
        lengths = torch.linalg.norm(out.normal, dim=-1)
        self.assertTrue(torch.allclose(lengths, torch.ones_like(lengths)))
        self.assertTrue(bool(((out.depth > 2.0) & (out.depth < 3.0)).all()))
        # the on-axis ray sees the sphere's front face
        self.assertGreater(float(out.normal[0, 2]), 0.9)


class EntropyTests(SimpleTestCase):
    """Tests for the per-ray entropy score"""

    def test_single_spike(self):
        """Test one nonzero opacity scores 1"""
        self.assertAlmostEqual(float(ray_entropy(torch.tensor([0.0, 0.4, 0.0, 0.0]))), 1.0, places=12)

    def test_uniform(self):
        """Test uniform opacities score 0"""
        self.assertAlmostEqual(float(ray_entropy(torch.full((8,), 0.3, dtype=torch.float64))), 0.0, places=12)

    def test_two_samples(self):
        """Test (0.75, 0.25) scores about 0.189"""
        value = float(ray_entropy(torch.tensor([0.75, 0.25], dtype=torch.float64)))
        expected = 1 - (-0.75 * math.log(0.75) - 0.25 * math.log(0.25)) / math.log(2)
        self.assertAlmostEqual(value, expected, places=12)
        self.assertAlmostEqual(value, 0.189, delta=1e-3)

    def test_empty_ray(self):
        """Test an all-zero ray scores 0"""
        self.assertEqual(float(ray_entropy(torch.zeros(5))), 0.0)

    def test_raw_entropy(self):
        """Test the unnormalized variant skips the ln n division"""
        alphas = torch.tensor([0.2, 0.3, 0.5], dtype=torch.float64)
        h = alphas / alphas.sum()
        expected = 1 + float((h * torch.log(h)).sum())
        self.assertAlmostEqual(float(ray_entropy(alphas, normalized=False)), expected, places=12)


class SamplingTests(SimpleTestCase):
    """Tests for depth-guided ray sampling"""

    def _rays(self, count=16, seed=0):
        generator = torch.Generator().manual_seed(seed)
        directions = torch.randn(count, 3, generator=generator, dtype=torch.float64)
        return torch.zeros(count, 3, dtype=torch.float64), directions

    def test_unguided_covers_range(self):
        """Test a zero guide gives uniform stratified samples over [near, far]"""
        origins, directions = self._rays()
        samples = depth_guided_samples(origins, directions, torch.zeros(16), 1.0, 3.0, n_coarse=8, n_fine=8)
        self.assertEqual(samples.count, 16)
        expected = 1.0 + 2.0 * (torch.arange(16, dtype=torch.float64) + 0.5) / 16
        self.assertTrue(torch.allclose(samples.t, expected.expand(16, 16), atol=1e-9))

    def test_fine_samples_in_band(self):
        """Test guided rays place at least n_fine samples inside the band"""
        origins, directions = self._rays()
        guide = torch.full((16,), 2.2, dtype=torch.float64)
        generator = torch.Generator().manual_seed(3)
        samples = depth_guided_samples(origins, directions, guide, 1.0, 3.0, n_coarse=8, n_fine=12,
                                       band=0.05, generator=generator)
        in_band = ((samples.t >= 2.15 - 1e-9) & (samples.t <= 2.25 + 1e-9)).sum(dim=1)
        self.assertTrue(bool((in_band >= 12).all()))

    def test_strictly_increasing(self):
        """Test merged samples are strictly increasing on random rays"""
        for seed in range(10):
            origins, directions = self._rays(32, seed)
            generator = torch.Generator().manual_seed(seed)
            guide = torch.rand(32, generator=generator, dtype=torch.float64) * 3.0
            guide[::4] = 0.0
            for dtype in (torch.float64, torch.float32):
                samples = depth_guided_samples(origins.to(dtype), directions.to(dtype), guide.to(dtype), 0.5, 3.0,
                                               n_coarse=16, n_fine=16, band=0.01, generator=generator)
                self.assertTrue(samples.is_increasing())

    def test_sample_set_validation(self):
        """Test a single-sample ray is rejected"""
        with self.assertRaises(InvalidArgument):
            RaySampleSet(torch.zeros(1, 3), torch.ones(1, 3), torch.ones(1, 1), torch.ones(1, 1))


class EikonalTests(SimpleTestCase):
    """Tests for the eikonal residual"""

    def test_plane(self):
        """Test an on-grid plane SDF has zero residual"""
        field = VoxelSdfField(9, dtype=torch.float64)
        with torch.no_grad():
            field.sdf.copy_(field.vertex_positions()[..., 0] - 0.1)
        self.assertLess(float(eikonal_residual(field, interior_points(field, 100, 0))), 1e-6)

    def test_constant(self):
        """Test a constant field has residual 1"""
        field = VoxelSdfField(5, dtype=torch.float64)
        with torch.no_grad():
            field.sdf.fill_(0.3)
        self.assertAlmostEqual(float(eikonal_residual(field, interior_points(field, 30, 1))), 1.0, places=12)

    def test_random_matches_recomputation(self):
        """Test a random field agrees with an explicit per-point recomputation"""
        field = random_field(6)
        points = interior_points(field, 40, 2)
        _, grad = field.query(points)
        expected = np.mean([(float(torch.linalg.norm(g)) - 1.0) ** 2 for g in grad])
        self.assertAlmostEqual(float(eikonal_residual(field, points)), expected, delta=1e-9)


class SdfGradientTests(SimpleTestCase):
    """Tests for gradients of the volume branch"""

    def _setup(self, seed):
        field = VoxelSdfField(5, dtype=torch.float64, sharpness=4.0)
        generator = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            field.sdf.add_(0.02 * torch.randn(field.sdf.shape, generator=generator, dtype=torch.float64))
            field.radiance.copy_(torch.randn(field.radiance.shape, generator=generator, dtype=torch.float64))
            field.confidence.copy_(torch.randn(field.confidence.shape, generator=generator, dtype=torch.float64))
        # rays stop short of the closest approach so distances fall monotonically
        directions = torch.tensor([[0.0, 0.0, -1.0], [0.08, 0.0, -1.0], [0.0, -0.06, -1.0]], dtype=torch.float64)
        origins = torch.tensor([0.0, 0.0, 3.0], dtype=torch.float64).expand(3, 3)
        samples = depth_guided_samples(origins, directions, torch.zeros(3), 2.0, 2.9, 6, 6)
        adjoints = [torch.randn(3, 3, generator=generator, dtype=torch.float64),
                    torch.randn(3, generator=generator, dtype=torch.float64),
                    torch.randn(3, 3, generator=generator, dtype=torch.float64),
                    torch.randn(3, generator=generator, dtype=torch.float64)]
        return field, samples, adjoints

    def _loss(self, field, samples, adjoints):
        out = volume_render_ray(field, samples)
        return ((out.color * adjoints[0]).sum() + (out.depth * adjoints[1]).sum()
                + (out.normal * adjoints[2]).sum() + (out.confidence * adjoints[3]).sum())

    def test_grid_and_sharpness_gradients(self):
        """Test analytic gradients w.r.t. grids and sharpness match central differences"""
        for seed in range(3):
            field, samples, adjoints = self._setup(seed)
            params = [field.sdf, field.radiance, field.confidence, field.log_sharpness]
            analytic = torch.autograd.grad(self._loss(field, samples, adjoints), params)
            numeric = finite_diff_gradient(lambda: self._loss(field, samples, adjoints), params).gradients
            for a, n in zip(analytic, numeric):
                bound = 1e-3 * torch.maximum(a.abs(), n.abs()) + 1e-6
                self.assertTrue(bool(((a - n).abs() <= bound).all()), f'max err {float((a - n).abs().max())}')


class GridFileTests(SimpleTestCase):
    """Tests for grid files and level-set samples"""

    def test_grid_round_trip(self):
        """Test a saved grid reloads with identical values, bounds and sharpness"""
        field = random_field(8).float()
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'field.sdf'
            save_grid(field, path)
            loaded = load_grid(path)
        self.assertTrue(torch.equal(loaded.sdf, field.sdf))
        self.assertTrue(torch.equal(loaded.bounds_min, field.bounds_min))
        self.assertAlmostEqual(float(loaded.sharpness), float(field.sharpness), places=5)

    def test_truncated_grid(self):
        """Test a truncated grid file is rejected"""
        field = random_field(9)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'field.sdf'
            save_grid(field, path)
            path.write_bytes(path.read_bytes()[:-5])
            with self.assertRaises(InvalidArgument):
                load_grid(path)

    def test_level_set_on_sphere(self):
        """Test sign-change samples of a sphere grid lie on the sphere"""
        field = VoxelSdfField(32, dtype=torch.float64)
        points = level_set_points(field)
        self.assertGreater(len(points), 100)
        radii = np.linalg.norm(points, axis=1)
        self.assertLess(float(np.abs(radii - 0.5).max()), field.cell_size)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'level.ply'
            save_points_ply(points, path)
            np.testing.assert_allclose(load_points_ply(path), points, atol=1e-6)

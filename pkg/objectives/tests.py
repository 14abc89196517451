import math

import numpy as np
import torch
from django.test import SimpleTestCase
from scipy.signal import correlate2d

from scenes.gradcheck import finite_diff_gradient
from surfels.cloud import SurfelCloud, inverse_sigmoid
from surfels.exceptions import InvalidArgument
from surfels.types import Camera, RenderedMaps

from .breakdown import LossBreakdown, LossWeights
from .confidence import appearance_score, confidence_gt, l_conf_g, l_conf_volume
from .geometry import l_geo, l_geo_adaptive
from .image import C1, C2, l_rad, ssim
from .normals import cosine_loss, depth_to_normal, normal_supervision, normalize
from .regularizers import curvature_loss, mask_loss, opacity_loss, regularizers


def reference_ssim(a, b):
    """SSIM through scipy's valid-mode correlation, one channel at a time."""
    coords = np.arange(11) - 5
    g = np.exp(-coords ** 2 / (2 * 1.5 ** 2))
    g /= g.sum()
    window = np.outer(g, g)
    values = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        filt = lambda img: correlate2d(img, window, mode='valid')
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx * mx
        syy = filt(y * y) - my * my
        sxy = filt(x * y) - mx * my
        values.append(((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx ** 2 + my ** 2 + C1) * (sxx + syy + C2)))
    return float(np.mean(values))


def random_normals(shape, seed):
    generator = torch.Generator().manual_seed(seed)
    return normalize(torch.randn(*shape, 3, generator=generator, dtype=torch.float64))


def flat_camera(size=16):
    return Camera.from_fov(60.0, size, size, torch.eye(4))


def assert_gradient_matches(test, loss_fn, tensor):
    tensor.requires_grad_(True)
    analytic, = torch.autograd.grad(loss_fn(), tensor)
    numeric = finite_diff_gradient(loss_fn, tensor).gradients[0]
    bound = 1e-3 * torch.maximum(analytic.abs(), numeric.abs()) + 1e-6
    test.assertTrue(bool(((analytic - numeric).abs() <= bound).all()),
                    f'max err {float((analytic - numeric).abs().max())}')


class PhotometricTests(SimpleTestCase):
    """Tests for SSIM and the radiance loss"""

    def setUp(self):
        generator = torch.Generator().manual_seed(0)
        self.a = torch.rand(16, 16, 3, generator=generator, dtype=torch.float64)
        self.b = torch.rand(16, 16, 3, generator=generator, dtype=torch.float64)

    def test_ssim_identity(self):
        """Test identical images have SSIM 1"""
        self.assertAlmostEqual(float(ssim(self.a, self.a)), 1.0, places=12)

    def test_ssim_constant_images(self):
        """Test constant 0 against constant 1 gives the stabilizer-limited value"""
        zeros = torch.zeros(12, 12, 3, dtype=torch.float64)
        value = float(ssim(zeros, torch.ones_like(zeros)))
        self.assertAlmostEqual(value, C1 / (1 + C1), delta=1e-12)

    def test_ssim_symmetric(self):
        """Test SSIM does not depend on argument order"""
        self.assertAlmostEqual(float(ssim(self.a, self.b)), float(ssim(self.b, self.a)), delta=1e-12)

    def test_ssim_matches_reference(self):
        """Test SSIM agrees with a scipy correlation reference"""
        self.assertAlmostEqual(float(ssim(self.a, self.b)), reference_ssim(self.a.numpy(), self.b.numpy()),
                               delta=1e-10)

    def test_ssim_rejects_small_images(self):
        """Test images smaller than the window are rejected"""
        with self.assertRaises(InvalidArgument):
            ssim(torch.zeros(8, 8, 3), torch.zeros(8, 8, 3))

    def test_radiance_identity(self):
        """Test identical images give zero radiance loss"""
        self.assertAlmostEqual(float(l_rad(self.a, self.a)), 0.0, places=12)

    def test_radiance_offset(self):
        """Test a uniform 0.1 offset gives 0.08 plus the SSIM term"""
        gt = 0.1 + 0.8 * self.a
        rendered = gt + 0.1
        expected = 0.8 * 0.1 + 0.2 * (1.0 - reference_ssim(rendered.numpy(), gt.numpy()))
        self.assertAlmostEqual(float(l_rad(rendered, gt)), expected, delta=1e-9)

    def test_radiance_shape_mismatch(self):
        """Test mismatched shapes are rejected"""
        with self.assertRaises(InvalidArgument):
            l_rad(self.a, self.a[:-1])

    def test_radiance_gradient(self):
        """Test the radiance loss gradient matches central differences"""
        rendered = self.a[:12, :12].clone()
        gt = self.b[:12, :12]
        assert_gradient_matches(self, lambda: l_rad(rendered, gt), rendered)


class NormalLossTests(SimpleTestCase):
    """Tests for cosine losses and depth normals"""

    def test_cosine_identity(self):
        """Test equal normals give zero loss"""
        n = random_normals((8, 8), 0)
        self.assertAlmostEqual(float(cosine_loss(n, n)), 0.0, places=12)

    def test_cosine_antiparallel(self):
        """Test opposite normals give 2"""
        n = random_normals((8, 8), 1)
        self.assertAlmostEqual(float(cosine_loss(n, -n)), 2.0, places=12)

    def test_cosine_orthogonal(self):
        """Test orthogonal normals give 1"""
        a = torch.zeros(4, 4, 3, dtype=torch.float64)
        b = torch.zeros_like(a)
        a[..., 0] = 1.0
        b[..., 1] = 1.0
        self.assertAlmostEqual(float(cosine_loss(a, b)), 1.0, places=12)

    def test_cosine_skips_zero_pixels(self):
        """Test zero-vector pixels are excluded from the mean"""
        a = random_normals((4, 4), 2)
        b = a.clone()
        b[0, 0] = 0.0
        a[1, 1] = -a[1, 1]
        self.assertAlmostEqual(float(cosine_loss(a, b)), 2.0 / 15.0, places=12)

    def test_cosine_gradient(self):
        """Test the cosine loss gradient matches central differences"""
        a = torch.randn(5, 5, 3, generator=torch.Generator().manual_seed(3), dtype=torch.float64)
        b = random_normals((5, 5), 4)
        assert_gradient_matches(self, lambda: cosine_loss(normalize(a), b), a)

    def test_fronto_plane(self):
        """Test constant depth gives (0, 0, -1) in the interior"""
        normals = depth_to_normal(torch.full((16, 16), 2.0, dtype=torch.float64), flat_camera())
        interior = normals[1:-1, 1:-1]
        expected = torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64).expand_as(interior)
        self.assertTrue(torch.allclose(interior, expected, atol=1e-12))

    def test_tilted_plane(self):
        """Test a tilted plane's depth normals match its analytic normal within 1 degree"""
        camera = flat_camera(24)
        n = torch.tensor([0.3, 0.2, -1.0], dtype=torch.float64)
        n = n / torch.linalg.norm(n)
        offset = float(n[2]) * 2.0
        rays = camera.camera_rays()
        depth = offset / (rays @ n)
        normals = depth_to_normal(depth, camera)[1:-1, 1:-1]
        cos = (normals @ n).clamp(max=1.0)
        self.assertLess(float(torch.rad2deg(torch.acos(cos)).max()), 1.0)

    def test_invalid_depth_neighbours(self):
        """Test pixels next to zero depth and border pixels get zero normals"""
        depth = torch.full((10, 10), 2.0, dtype=torch.float64)
        depth[5, 5] = 0.0
        normals = depth_to_normal(depth, flat_camera(10))
        for i, j in ((5, 5), (4, 5), (6, 5), (5, 4), (5, 6), (0, 3), (9, 9)):
            self.assertEqual(float(normals[i, j].abs().sum()), 0.0, (i, j))
        self.assertEqual(float(normals[2, 2, 2]), -1.0)

    def test_supervision_switch(self):
        """Test prior normals up to the switch and confidence-scaled volume normals after"""
        prior = random_normals((4, 4), 5)
        volume = random_normals((4, 4), 6)
        confidence = torch.ones(4, 4, dtype=torch.float64)
        self.assertIs(normal_supervision(15000, 15000, prior, volume, confidence), prior)
        after = normal_supervision(15001, 15000, prior, volume, confidence)
        self.assertTrue(torch.allclose(after, volume, atol=1e-12))
        confidence[2, 3] = 0.0
        after = normal_supervision(15001, 15000, prior, volume, confidence)
        self.assertEqual(float(after[2, 3].abs().sum()), 0.0)


class GeometryLossTests(SimpleTestCase):
    """Tests for the geometry and adaptive geometry losses"""

    def setUp(self):
        self.camera = flat_camera(12)
        generator = torch.Generator().manual_seed(7)
        self.depth = 2.0 + 0.2 * torch.rand(12, 12, generator=generator, dtype=torch.float64)
        self.rendered = random_normals((12, 12), 8)
        self.prior = random_normals((12, 12), 9)
        self.mask = torch.rand(12, 12, generator=generator) > 0.3
        self.confidence = torch.rand(12, 12, generator=generator, dtype=torch.float64)

    def test_identity(self):
        """Test zero loss when rendered, prior and depth normals agree"""
        depth_normal = depth_to_normal(self.depth, self.camera)
        loss = l_geo(depth_normal, self.depth, depth_normal, self.mask, 0.04, 0.01, self.camera)
        self.assertAlmostEqual(float(loss), 0.0, places=12)

    def test_zero_weights(self):
        """Test zero weights give zero loss"""
        self.assertEqual(float(l_geo(self.rendered, self.depth, self.prior, self.mask, 0.0, 0.0, self.camera)), 0.0)

    def test_weighted_sum(self):
        """Test the loss equals the hand-composed sum of cosine terms"""
        depth_normal = depth_to_normal(self.depth, self.camera)
        expected = (0.3 * cosine_loss(self.rendered, self.prior, self.mask)
                    + 0.7 * cosine_loss(self.rendered, depth_normal, self.mask))
        got = l_geo(self.rendered, self.depth, self.prior, self.mask, 0.3, 0.7, self.camera)
        self.assertAlmostEqual(float(got), float(expected), delta=1e-9)

    def test_adaptive_zero_confidence(self):
        """Test zero confidence reduces the adaptive loss to the plain one exactly"""
        zero = torch.zeros_like(self.confidence)
        plain = l_geo(self.rendered, self.depth, self.prior, self.mask, 0.04, 0.06, self.camera)
        adaptive = l_geo_adaptive(self.rendered, self.depth, self.prior, self.mask, zero, 0.04, 0.06, self.camera)
        self.assertEqual(float(adaptive), float(plain))

    def test_adaptive_full_confidence(self):
        """Test full confidence with prior equal to rendered doubles the plain loss"""
        one = torch.ones_like(self.confidence)
        plain = l_geo(self.rendered, self.depth, self.rendered, self.mask, 0.04, 0.06, self.camera)
        adaptive = l_geo_adaptive(self.rendered, self.depth, self.rendered, self.mask, one, 0.04, 0.06, self.camera)
        self.assertAlmostEqual(float(adaptive), 2.0 * float(plain), delta=1e-12)

    def test_adaptive_monotone_in_confidence(self):
        """Test raising confidence pointwise never lowers the adaptive loss"""
        generator = torch.Generator().manual_seed(10)
        for _ in range(20):
            low = torch.rand(12, 12, generator=generator, dtype=torch.float64)
            high = torch.clamp(low + torch.rand(12, 12, generator=generator, dtype=torch.float64) * 0.5, max=1.0)
            args = (self.rendered, self.depth, self.prior, self.mask)
            a = l_geo_adaptive(*args, low, 0.5, 1.0, self.camera)
            b = l_geo_adaptive(*args, high, 0.5, 1.0, self.camera)
            self.assertGreaterEqual(float(b), float(a) - 1e-15)

    def test_adaptive_gradient(self):
        """Test the adaptive loss gradient w.r.t. depth and confidence matches central differences"""
        depth = self.depth.clone()
        confidence = self.confidence.clone()
        loss = lambda: l_geo_adaptive(self.rendered, depth, self.prior, self.mask, confidence, 0.5, 1.0, self.camera)
        assert_gradient_matches(self, loss, depth)
        assert_gradient_matches(self, loss, confidence)


class ConfidenceTests(SimpleTestCase):
    """Tests for confidence targets and losses"""

    def test_targets(self):
        """Test the threshold examples"""
        self.assertEqual(float(confidence_gt(0.0001, 0.0002)), 1.0)
        self.assertEqual(float(confidence_gt(0.0003, 0.0002)), 0.0)
        self.assertEqual(float(confidence_gt(0.0001, 0.00005)), 0.0)

    def test_target_depends_only_on_comparisons(self):
        """Test the indicator equals the conjunction of the two threshold comparisons"""
        rng = np.random.default_rng(0)
        rad = rng.uniform(0, 4e-4, 1000)
        geo = rng.uniform(0, 2e-4, 1000)
        got = confidence_gt(rad, geo).numpy()
        expected = np.array([1.0 if (r < 2e-4 and g > 1e-4) else 0.0 for r, g in zip(rad, geo)])
        np.testing.assert_array_equal(got, expected)
        scaled = confidence_gt(rad * 0.5, geo * 0.5).numpy()
        same = (rad < 2e-4) == (rad * 0.5 < 2e-4)
        same &= (geo > 1e-4) == (geo * 0.5 > 1e-4)
        np.testing.assert_array_equal(scaled[same], got[same])

    def test_surfel_confidence_loss(self):
        """Test the per-surfel loss is the squared error over observed surfels"""
        confidence = torch.tensor([0.2, 0.9, 0.5], dtype=torch.float64)
        target = torch.tensor([1.0, 1.0, 0.0], dtype=torch.float64)
        observed = torch.tensor([True, True, False])
        self.assertAlmostEqual(float(l_conf_g(confidence, target, observed)), (0.64 + 0.01) / 2, places=12)

    def test_volume_perfect(self):
        """Test perfect colour with full confidence and concentrated rays gives zero loss"""
        color = torch.rand(10, 3, dtype=torch.float64)
        ones = torch.ones(10, dtype=torch.float64)
        self.assertEqual(float(l_conf_volume(ones, color, color, ones)), 0.0)

    def test_volume_matches_error(self):
        """Test confidence equal to the appearance score with no entropy weight gives zero loss"""
        generator = torch.Generator().manual_seed(1)
        vc = torch.rand(10, 3, generator=generator, dtype=torch.float64)
        gt = torch.rand(10, 3, generator=generator, dtype=torch.float64)
        entropy = torch.rand(10, generator=generator, dtype=torch.float64)
        score = appearance_score(vc, gt)
        self.assertAlmostEqual(float(l_conf_volume(score, vc, gt, entropy, lambda_h=0.0)), 0.0, places=14)

    def test_volume_matches_loop(self):
        """Test the batch loss equals a per-ray scalar loop"""
        rng = np.random.default_rng(2)
        f, vc, gt, h = rng.uniform(size=12), rng.uniform(size=(12, 3)), rng.uniform(size=(12, 3)), rng.uniform(size=12)
        expected = 0.0
        for i in range(12):
            e = 1.0 - sum(abs(vc[i, c] - gt[i, c]) for c in range(3)) / 3.0
            expected += (f[i] - e) ** 2 + 0.005 * (f[i] - h[i]) ** 2
        expected /= 12
        got = l_conf_volume(torch.as_tensor(f), torch.as_tensor(vc), torch.as_tensor(gt), torch.as_tensor(h))
        self.assertAlmostEqual(float(got), expected, delta=1e-9)

    def test_volume_gradient(self):
        """Test the volume confidence gradient matches central differences"""
        generator = torch.Generator().manual_seed(3)
        f = torch.rand(6, generator=generator, dtype=torch.float64)
        vc = torch.rand(6, 3, generator=generator, dtype=torch.float64)
        gt = torch.rand(6, 3, generator=generator, dtype=torch.float64)
        h = torch.rand(6, generator=generator, dtype=torch.float64)
        assert_gradient_matches(self, lambda: l_conf_volume(f, vc, gt, h), f)


class RegularizerTests(SimpleTestCase):
    """Tests for curvature, opacity and mask regularizers"""

    def test_constant_normals(self):
        """Test a constant normal map has zero curvature"""
        normal = torch.zeros(6, 6, 3, dtype=torch.float64)
        normal[..., 2] = -1.0
        self.assertEqual(float(curvature_loss(normal, torch.ones(6, 6, dtype=torch.bool))), 0.0)

    def test_binary_opacity(self):
        """Test opacities of exactly 0 and 1 give zero opacity loss"""
        self.assertEqual(float(opacity_loss(torch.tensor([0.0, 1.0, 1.0, 0.0]))), 0.0)

    def test_mask_identity(self):
        """Test a matching alpha mask gives zero mask loss"""
        mask = (torch.rand(5, 5) > 0.5).double()
        self.assertEqual(float(mask_loss(mask, mask)), 0.0)

    def test_curvature_gradient(self):
        """Test the curvature gradient matches central differences"""
        normal = torch.randn(5, 5, 3, generator=torch.Generator().manual_seed(4), dtype=torch.float64)
        covered = torch.ones(5, 5, dtype=torch.bool)
        covered[0, 0] = False
        assert_gradient_matches(self, lambda: curvature_loss(normal, covered), normal)

    def test_regularizers_for_view(self):
        """Test the view-level helper returns all three terms"""
        cloud = SurfelCloud.from_random(5, [-1, -1, -1], [1, 1, 1], torch.Generator().manual_seed(0), torch.float64)
        normal = torch.zeros(4, 4, 3, dtype=torch.float64)
        normal[..., 2] = -1.0
        alpha = torch.ones(4, 4, dtype=torch.float64)
        maps = RenderedMaps(color=torch.zeros(4, 4, 3), depth=torch.ones(4, 4), normal=normal,
                            confidence=torch.zeros(4, 4), alpha=alpha)
        curv, opac, mask = regularizers(cloud, maps, alpha)
        self.assertEqual(float(curv), 0.0)
        self.assertAlmostEqual(float(opac), 0.1 * 0.9, places=12)
        self.assertEqual(float(mask), 0.0)


class BreakdownTests(SimpleTestCase):
    """Tests for loss weights and breakdown rows"""

    def test_total_is_weighted_sum(self):
        """Test the total equals the weighted sum of terms"""
        breakdown = LossBreakdown()
        breakdown.add('l_rad', torch.tensor(0.3)).add('l_curv', torch.tensor(2.0), 0.005)
        breakdown.add('l_mask', torch.tensor(0.25), 0.01)
        self.assertAlmostEqual(float(breakdown.total), 0.3 + 0.01 + 0.0025, delta=1e-7)

    def test_row(self):
        """Test CSV rows carry every term column and the total"""
        row = LossBreakdown().add('l_rad', torch.tensor(0.5)).as_row(12)
        self.assertEqual(list(row), LossBreakdown.header())
        self.assertEqual(row['iteration'], 12)
        self.assertEqual(row['l_geo'], '')
        self.assertAlmostEqual(row['total'], 0.5)

    def test_unknown_term(self):
        """Test unknown term names are rejected"""
        with self.assertRaises(InvalidArgument):
            LossBreakdown().add('l_perceptual', torch.tensor(0.0))

    def test_weights_defaults(self):
        """Test the documented weight defaults"""
        weights = LossWeights()
        self.assertEqual((weights.ssim, weights.curv, weights.opac), (0.2, 0.005, 0.01))
        self.assertEqual((weights.vol, weights.conf, weights.entropy), (0.01, 0.005, 0.005))
        self.assertEqual((weights.zeta_rad, weights.zeta_geo), (2e-4, 1e-4))
        with self.assertRaises(InvalidArgument):
            LossWeights(curv=-1.0)

import math
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase

from .cloud import SurfelCloud
from .exceptions import InvalidArgument
from .ply import load_ply, ply_bytes, save_ply
from .sh import pad_coefficients, sh_coeff_count, sh_eval
from .transforms import axis_angle_quaternion, covariance, random_quaternions, surfel_normal
from .types import Camera, Surfel, Task


def _first_order_reference(coeffs, direction):
    """Direct evaluation of the order-1 real SH basis."""
    c0 = 0.5 / math.sqrt(math.pi)
    c1 = math.sqrt(3.0 / (4.0 * math.pi))
    x, y, z = direction
    basis = [c0, -c1 * y, c1 * z, -c1 * x]
    coeffs = np.asarray(coeffs).reshape(4, 3)
    return np.clip(sum(b * c for b, c in zip(basis, coeffs)) + 0.5, 0.0, 1.0)


class SphericalHarmonicsTests(SimpleTestCase):
    """Tests for SH coefficient counts and colour evaluation"""

    def test_coefficient_counts(self):
        """Test order 0..3 map to 3, 12, 27, 48 scalars"""
        self.assertEqual([sh_coeff_count(d) for d in range(4)], [3, 12, 27, 48])

    def test_order_out_of_range(self):
        """Test orders outside 0..3 are rejected"""
        for order in (-1, 4, 1.5):
            with self.assertRaises(InvalidArgument):
                sh_coeff_count(order)

    def test_zero_coefficients_are_mid_gray(self):
        """Test zero coefficients give 0.5 in every channel"""
        color = sh_eval(np.zeros(12), 1, [0.0, 0.6, 0.8])
        self.assertTrue(torch.allclose(color, torch.full((3,), 0.5, dtype=torch.float64)))

    def test_order_zero_is_view_independent(self):
        """Test order 0 gives the same colour from any direction"""
        coeffs = [0.3, -0.2, 0.1]
        a = sh_eval(coeffs, 0, [1.0, 0.0, 0.0])
        b = sh_eval(coeffs, 0, [0.0, -0.6, 0.8])
        self.assertTrue(torch.equal(a, b))

    def test_first_order_matches_direct_basis(self):
        """Test order 1 agrees with an independent basis evaluation for dir and -dir"""
        rng = np.random.default_rng(3)
        coeffs = rng.normal(scale=0.2, size=12)
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        for d in (direction, -direction):
            got = sh_eval(coeffs, 1, d).numpy()
            np.testing.assert_allclose(got, _first_order_reference(coeffs, d), atol=1e-12)

    def test_length_mismatch(self):
        """Test a coefficient list of the wrong length raises"""
        with self.assertRaises(InvalidArgument):
            sh_eval(np.zeros(5), 0, [0.0, 0.0, 1.0])

    def test_linear_before_clamping(self):
        """Test sh_eval - 0.5 is linear in the coefficients"""
        rng = np.random.default_rng(5)
        c1, c2 = rng.normal(scale=0.05, size=(2, 27))
        d = np.array([0.48, 0.6, 0.64])
        combined = sh_eval(2.0 * c1 - 0.5 * c2, 2, d) - 0.5
        expected = 2.0 * (sh_eval(c1, 2, d) - 0.5) - 0.5 * (sh_eval(c2, 2, d) - 0.5)
        self.assertTrue(torch.allclose(combined, expected, atol=1e-12))

    def test_zero_padding_keeps_colour(self):
        """Test padding coefficients to a higher order does not change the colour"""
        rng = np.random.default_rng(9)
        coeffs = rng.normal(scale=0.1, size=12)
        d = np.array([0.0, 0.6, -0.8])
        padded = pad_coefficients(coeffs, 1)[:9].reshape(-1)
        self.assertTrue(torch.allclose(sh_eval(coeffs, 1, d), sh_eval(padded, 2, d), atol=1e-12))


class CovarianceTests(SimpleTestCase):
    """Tests for flattened covariance and surfel normals"""

    def setUp(self):
        self.identity = torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=torch.float64)

    def test_identity_unit_scale(self):
        """Test identity rotation with unit scales gives diag(1, 1, 0)"""
        sigma = covariance(self.identity, torch.tensor([1.0, 1.0], dtype=torch.float64))
        self.assertTrue(torch.equal(sigma, torch.diag(torch.tensor([1.0, 1.0, 0.0], dtype=torch.float64))))

    def test_identity_anisotropic_scale(self):
        """Test S = (2, 3) gives diag(4, 9, 0)"""
        sigma = covariance(self.identity, torch.tensor([2.0, 3.0], dtype=torch.float64))
        self.assertTrue(torch.allclose(sigma, torch.diag(torch.tensor([4.0, 9.0, 0.0], dtype=torch.float64))))

    def test_normal_spans_null_space(self):
        """Test Σ·n = 0 and the eigenvalues are {S1², S2², 0}"""
        generator = torch.Generator().manual_seed(0)
        q = random_quaternions(20, generator, torch.float64)
        scale = torch.rand(20, 2, generator=generator, dtype=torch.float64) + 0.1
        sigma = covariance(q, scale)
        n = surfel_normal(q)
        self.assertLess(float((sigma @ n[..., None]).abs().max()), 1e-12)
        eigenvalues = torch.linalg.eigvalsh(sigma)
        expected = torch.sort(torch.cat([scale ** 2, torch.zeros(20, 1, dtype=torch.float64)], dim=1), dim=1).values
        self.assertTrue(torch.allclose(eigenvalues, expected, atol=1e-9))
        self.assertTrue(torch.allclose(sigma, sigma.transpose(-1, -2)))

    def test_identity_normal(self):
        """Test the identity rotation faces +z"""
        self.assertTrue(torch.equal(surfel_normal(self.identity), torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64)))

    def test_quarter_turn_about_x(self):
        """Test a 90 degree turn about x maps the normal to (0, -1, 0)"""
        n = surfel_normal(axis_angle_quaternion([1.0, 0.0, 0.0], math.pi / 2))
        self.assertTrue(torch.allclose(n, torch.tensor([0.0, -1.0, 0.0], dtype=torch.float64), atol=1e-12))

    def test_normals_are_unit(self):
        """Test any rotation gives a unit normal"""
        q = random_quaternions(50, torch.Generator().manual_seed(1), torch.float64)
        norms = torch.linalg.norm(surfel_normal(q), dim=-1)
        self.assertLess(float((norms - 1).abs().max()), 1e-12)


class SurfelTypeTests(SimpleTestCase):
    """Tests for Surfel and Camera validation"""

    def test_create_activates_values(self):
        """Test opacity and confidence round-trip through their logits"""
        s = Surfel.create([0, 0, 1], opacity=0.8, confidence=0.25, sh_order=1)
        self.assertAlmostEqual(s.opacity, 0.8)
        self.assertAlmostEqual(s.confidence, 0.25)
        self.assertEqual(s.sh.size, 12)
        self.assertEqual(s.task, Task.COMMON)

    def test_rejects_non_unit_quaternion(self):
        """Test a quaternion far from unit norm is rejected"""
        with self.assertRaises(InvalidArgument):
            Surfel.create([0, 0, 0], rotation=(2.0, 0.0, 0.0, 0.0))

    def test_rejects_nonpositive_scale(self):
        """Test zero scales are rejected"""
        with self.assertRaises(InvalidArgument):
            Surfel.create([0, 0, 0], scale=(0.0, 0.1))

    def test_rejects_inconsistent_sh_length(self):
        """Test an SH list that does not match the order is rejected"""
        with self.assertRaises(InvalidArgument):
            Surfel.create([0, 0, 0], sh=np.zeros(12), sh_order=0)

    def test_camera_rejects_bad_focal(self):
        """Test non-positive focal lengths are rejected"""
        with self.assertRaises(InvalidArgument):
            Camera(fx=0.0, fy=10.0, cx=8, cy=8, width=16, height=16, world_to_camera=torch.eye(4))

    def test_camera_rejects_non_orthonormal_rotation(self):
        """Test a scaled rotation block is rejected"""
        matrix = torch.eye(4)
        matrix[0, 0] = 1.01
        with self.assertRaises(InvalidArgument):
            Camera(fx=10.0, fy=10.0, cx=8, cy=8, width=16, height=16, world_to_camera=matrix)

    def test_look_at_places_target_on_axis(self):
        """Test the target lands on the optical axis in front of the camera"""
        w2c = Camera.look_at([0.0, 0.0, 3.0])
        camera = Camera(fx=10.0, fy=10.0, cx=8, cy=8, width=16, height=16, world_to_camera=w2c)
        target = camera.to_camera(torch.zeros(1, 3, dtype=torch.float64))[0]
        self.assertTrue(torch.allclose(target, torch.tensor([0.0, 0.0, 3.0], dtype=torch.float64), atol=1e-12))
        self.assertTrue(torch.allclose(camera.center, torch.tensor([0.0, 0.0, 3.0], dtype=torch.float64)))

    def test_camera_rays_have_unit_depth(self):
        """Test camera rays are scaled to z = 1"""
        camera = Camera.from_fov(60.0, 8, 6, torch.eye(4))
        rays = camera.camera_rays()
        self.assertEqual(tuple(rays.shape), (6, 8, 3))
        self.assertTrue(torch.equal(rays[..., 2], torch.ones(6, 8, dtype=torch.float64)))


class SurfelCloudTests(SimpleTestCase):
    """Tests for the batched surfel container"""

    def _cloud(self, count=6):
        generator = torch.Generator().manual_seed(4)
        return SurfelCloud.from_random(count, [-1, -1, -1], [1, 1, 1], generator=generator, dtype=torch.float64)

    def test_from_random_initial_values(self):
        """Test random init uses opacity 0.1, order 0 and Common tags"""
        cloud = self._cloud()
        self.assertEqual(len(cloud), 6)
        self.assertTrue(torch.allclose(cloud.get_opacity, torch.full((6,), 0.1, dtype=torch.float64)))
        self.assertTrue(torch.equal(cloud.sh_order, torch.zeros(6, dtype=torch.long)))
        self.assertTrue(bool(cloud.task_mask(Task.COMMON).all()))
        self.assertEqual(cloud.sh_scalar_count(), 18)

    def test_surfel_round_trip(self):
        """Test converting to Surfel values and back preserves attributes"""
        surfels = [
            Surfel.create([0.1, 0.2, 0.3], sh=np.arange(12) * 0.01, sh_order=1, task=Task.COLOR_ONLY),
            Surfel.create([0.0, 0.0, 1.0], opacity=0.9, task=Task.NORMAL_ONLY),
        ]
        cloud = SurfelCloud.from_surfels(surfels)
        back = cloud.to_surfels()
        np.testing.assert_allclose(back[0].sh, surfels[0].sh, atol=1e-12)
        self.assertEqual(back[1].task, Task.NORMAL_ONLY)
        self.assertAlmostEqual(back[1].opacity, 0.9)

    def test_prune_carries_optimizer_moments(self):
        """Test pruning keeps the Adam moments of the surviving surfels"""
        cloud = self._cloud()
        groups = [{'params': [p], 'lr': 0.01, 'name': name} for name, p in cloud.parameters().items()]
        cloud.optimizer = torch.optim.Adam(groups, eps=1e-15)
        cloud.get_xyz.sum().backward()
        cloud.optimizer.step()
        before = cloud.optimizer.state[cloud.get_xyz]['exp_avg'].clone()
        remove = torch.tensor([True, False, False, True, False, False])
        cloud.prune(remove)
        self.assertEqual(len(cloud), 4)
        state = cloud.optimizer.state[cloud.get_xyz]
        self.assertTrue(torch.equal(state['exp_avg'], before[~remove]))
        self.assertIs(cloud.optimizer.param_groups[0]['params'][0], cloud.get_xyz)

    def test_extend_appends_zero_moments(self):
        """Test appended surfels start with zero Adam moments"""
        cloud = self._cloud(3)
        groups = [{'params': [p], 'lr': 0.01, 'name': name} for name, p in cloud.parameters().items()]
        cloud.optimizer = torch.optim.Adam(groups, eps=1e-15)
        cloud.get_xyz.sum().backward()
        cloud.optimizer.step()
        new = {name: p.detach()[:1].clone() for name, p in cloud.parameters().items()}
        cloud.extend(new, sh_order=[0], task=[int(Task.COLOR_ONLY)])
        self.assertEqual(len(cloud), 4)
        self.assertEqual(int(cloud.task[-1]), int(Task.COLOR_ONLY))
        state = cloud.optimizer.state[cloud.get_xyz]
        self.assertTrue(torch.equal(state['exp_avg'][-1], torch.zeros(3, dtype=torch.float64)))

    def test_masked_sh_hides_unused_coefficients(self):
        """Test coefficients above a surfel's order are masked out"""
        cloud = self._cloud(2)
        with torch.no_grad():
            cloud.parameters()['sh'].fill_(1.0)
        cloud.sh_order[1] = 1
        sh = cloud.get_sh
        self.assertEqual(float(sh[0].abs().sum()), 3.0)
        self.assertEqual(float(sh[1].abs().sum()), 12.0)

    def test_ply_round_trip(self):
        """Test saving and loading a PLY restores tags, orders and coefficients"""
        cloud = self._cloud(5)
        cloud.sh_order[2] = 3
        cloud.task[4] = int(Task.NORMAL_ONLY)
        with torch.no_grad():
            cloud.parameters()['sh'].normal_(generator=torch.Generator().manual_seed(0))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'cloud.ply'
            save_ply(cloud, path)
            loaded = load_ply(path, dtype=torch.float64)
            self.assertEqual(path.stat().st_size, len(ply_bytes(cloud)))
        self.assertTrue(torch.equal(loaded.sh_order, cloud.sh_order))
        self.assertTrue(torch.equal(loaded.task, cloud.task))
        self.assertTrue(torch.allclose(loaded.get_sh, cloud.get_sh.float().double()))
        self.assertTrue(torch.allclose(loaded.get_xyz, cloud.get_xyz.float().double()))

import math
import tempfile
from pathlib import Path

import numpy as np
import torch
from django.test import SimpleTestCase

from surfels.cloud import SurfelCloud
from surfels.exceptions import ConfigError, InvalidArgument
from surfels.types import Surfel, Task

from .gradcheck import finite_diff_gradient
from .io import directory_checksum, load_normal_maps, load_scene, read_cameras, save_normal_maps, save_scene
from .metrics import angular_error, chamfer, extract_points, model_size, psnr, sphere_samples
from .oracle import CameraRing, NormalCorruption, SceneSpec, corrupt_normals, generate_scene, ring_cameras
from .serializers import spec_from_config, spec_to_config
from .shapes import Box, Material, Sphere, Union


def axis_spec(radius=1.0, size=33, **overrides):
    ring = CameraRing(count=1, radius=3.0, elevation=0.0, width=size, height=size, fov=40.0, near=0.1, far=10.0)
    return SceneSpec(shapes=(Sphere(radius=radius),), ring=ring, **overrides)


def scene_config():
    return {
        'seed': 3,
        'test_every': 4,
        'ring': {'count': 4, 'radius': 3.0, 'width': 16, 'height': 16},
        'shapes': [
            {'kind': 'sphere', 'center': [0.0, 0.0, 0.0], 'radius': 0.5, 'albedo': [0.8, 0.4, 0.2]},
            {'kind': 'box', 'center': [0.4, 0.0, 0.0], 'half_extents': [0.2, 0.2, 0.2], 'specular': 0.5},
        ],
    }


class GradCheckTests(SimpleTestCase):
    """Tests for the finite-difference oracle"""

    def test_quadratic(self):
        """Test x² at 3 gives 6"""
        x = torch.tensor([3.0], dtype=torch.float64)
        numeric = finite_diff_gradient(lambda: (x ** 2).sum(), x)
        self.assertTrue(numeric.ok)
        self.assertAlmostEqual(float(numeric.gradients[0][0]), 6.0, delta=1e-6)

    def test_linear_exact_for_any_step(self):
        """Test a linear functional gives the same gradient at two step sizes"""
        x = torch.tensor([0.5, -2.0], dtype=torch.float64)
        w = torch.tensor([1.5, -0.25], dtype=torch.float64)
        for rel in (1e-4, 1e-2):
            grad = finite_diff_gradient(lambda: (w * x).sum(), x, rel_step=rel).gradients[0]
            np.testing.assert_allclose(grad.numpy(), w.numpy(), rtol=1e-9)

    def test_restores_parameters(self):
        """Test perturbed values are restored"""
        x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
        finite_diff_gradient(lambda: (x ** 3).sum(), x)
        self.assertEqual(x.tolist(), [1.0, 2.0, 3.0])

    def test_non_finite_flagged(self):
        """Test a perturbation that makes the loss non-finite is flagged"""
        x = torch.tensor([0.0, 1.0], dtype=torch.float64)
        with self.assertLogs('scenes.gradcheck', level='WARNING'):
            numeric = finite_diff_gradient(lambda: torch.sqrt(x).sum(), x)
        self.assertFalse(numeric.ok)
        self.assertEqual(numeric.flagged, [(0, 0)])
        self.assertTrue(math.isnan(float(numeric.gradients[0][0])))
        self.assertAlmostEqual(float(numeric.gradients[0][1]), 0.5, delta=1e-6)


class ShapeTests(SimpleTestCase):
    """Tests for analytic shapes"""

    def test_sphere_distance(self):
        """Test sphere distances and outward gradients"""
        sphere = Sphere(center=(0.0, 0.0, 0.0), radius=0.5)
        p = torch.tensor([[0.0, 0.0, 2.0], [0.1, 0.0, 0.0]], dtype=torch.float64)
        np.testing.assert_allclose(sphere.distance(p).numpy(), [1.5, -0.4])
        np.testing.assert_allclose(sphere.gradient(p).numpy(), [[0, 0, 1], [1, 0, 0]])

    def test_box_distance(self):
        """Test box distances outside, on a corner diagonal and inside"""
        box = Box(half_extents=(1.0, 1.0, 1.0))
        p = torch.tensor([[2.0, 0.0, 0.0], [2.0, 2.0, 1.0], [0.0, 0.5, 0.0]], dtype=torch.float64)
        np.testing.assert_allclose(box.distance(p).numpy(), [1.0, math.sqrt(2.0), -0.5])
        np.testing.assert_allclose(box.gradient(p).numpy()[2], [0.0, 1.0, 0.0])

    def test_union_picks_closest(self):
        """Test a union takes the minimum and the closest member's gradient"""
        union = Union([Sphere(center=(-1.0, 0.0, 0.0), radius=0.5), Box(center=(1.0, 0.0, 0.0))])
        p = torch.tensor([[1.0, 0.0, 1.0]], dtype=torch.float64)
        self.assertEqual(union.closest(p).tolist(), [1])
        np.testing.assert_allclose(union.gradient(p).numpy(), [[0.0, 0.0, 1.0]])

    def test_surface_samples_lie_on_boundary(self):
        """Test union surface samples have zero distance"""
        union = Union([Sphere(radius=0.5), Box(center=(0.4, 0.0, 0.0), half_extents=(0.2, 0.2, 0.2))])
        points = union.surface_samples(2000, torch.Generator().manual_seed(0))
        self.assertGreater(points.shape[0], 1000)
        self.assertLess(float(union.distance(points).abs().max()), 1e-9)

    def test_invalid_shapes(self):
        """Test non-positive sizes are rejected"""
        with self.assertRaises(InvalidArgument):
            Sphere(radius=0.0)
        with self.assertRaises(InvalidArgument):
            Box(half_extents=(1.0, 0.0, 1.0))


class OracleTests(SimpleTestCase):
    """Tests for sphere-traced ground truth"""

    def test_center_pixel_of_unit_sphere(self):
        """Test the on-axis pixel sees normal (0, 0, 1) at depth distance − radius"""
        view = generate_scene(axis_spec()).views[0]
        self.assertTrue(bool(view.mask[16, 16]))
        np.testing.assert_allclose(view.normal[16, 16].numpy(), [0.0, 0.0, 1.0], atol=1e-6)
        self.assertAlmostEqual(float(view.depth[16, 16]), 2.0, delta=1e-6)

    def test_mask_grows_with_radius(self):
        """Test the hit count grows monotonically with sphere radius"""
        counts = [int(generate_scene(axis_spec(radius=r, size=24)).views[0].mask.sum()) for r in (0.3, 0.5, 0.7, 0.9)]
        self.assertEqual(counts, sorted(counts))
        self.assertLess(counts[0], counts[-1])

    def test_normals_are_unit_on_hits(self):
        """Test ground-truth normals have unit length on the mask and depth is positive"""
        spec = spec_from_config(scene_config())
        for view in generate_scene(spec).views:
            lengths = torch.linalg.norm(view.normal[view.mask], dim=-1)
            self.assertLess(float((lengths - 1.0).abs().max()), 1e-6)
            self.assertTrue(bool((view.depth[view.mask] > 0).all()))
            self.assertTrue(bool((view.depth[~view.mask] == 0).all()))

    def test_deterministic(self):
        """Test the same seed twice gives identical bundles"""
        spec = axis_spec(prior_noise=0.1, seed=7)
        a, b = generate_scene(spec).views[0], generate_scene(spec).views[0]
        for name in ('color', 'depth', 'normal', 'prior_normal'):
            self.assertTrue(torch.equal(getattr(a, name), getattr(b, name)))

    def test_specular_lobe_adds_highlight(self):
        """Test a specular material is never darker than its Lambertian counterpart"""
        plain = generate_scene(axis_spec(size=16)).views[0].color
        shiny = SceneSpec(shapes=(Sphere(radius=1.0, material=Material(specular=0.8, shininess=64.0)),),
                          ring=axis_spec(size=16).ring)
        shiny_color = generate_scene(shiny).views[0].color
        self.assertTrue(bool((shiny_color >= plain).all()))
        self.assertGreater(float((shiny_color - plain).max()), 0.0)

    def test_corruption_changes_only_region(self):
        """Test corrupting prior normals touches only the requested rectangle"""
        corruption = NormalCorruption(rows=(4, 12), cols=(10, 20), angle=45.0)
        view = generate_scene(axis_spec(corruption=corruption)).views[0]
        changed = (view.prior_normal != view.normal).any(dim=-1)
        region = torch.zeros_like(changed)
        region[4:12, 10:20] = True
        self.assertFalse(bool(changed[~region].any()))
        self.assertTrue(bool(changed[region & view.mask].all()))
        error = angular_error(view.prior_normal, view.normal, region & view.mask)
        self.assertGreater(error, 0.0)
        self.assertLessEqual(error, 45.0 + 1e-9)

    def test_corrupt_normals_helper(self):
        """Test rotating normals by 90° about x"""
        normals = torch.tensor([[[0.0, 0.0, 1.0]]], dtype=torch.float64)
        mask = torch.ones(1, 1, dtype=torch.bool)
        out = corrupt_normals(normals, mask, (0, 1), (0, 1), 90.0, torch.tensor([1.0, 0.0, 0.0]))
        np.testing.assert_allclose(out[0, 0].numpy(), [0.0, -1.0, 0.0], atol=1e-12)

    def test_ring_layout(self):
        """Test ring cameras sit at the ring radius and hold out every n-th view"""
        ring = CameraRing(count=6, radius=2.5, elevation=30.0, mirror_elevation=True, width=8, height=8)
        cameras = ring_cameras(ring)
        for camera in cameras:
            self.assertAlmostEqual(float(torch.linalg.norm(camera.center)), 2.5, places=9)
        self.assertGreater(float(cameras[0].center[1]), 0.0)
        self.assertLess(float(cameras[1].center[1]), 0.0)
        scene = generate_scene(SceneSpec(ring=ring, test_every=3))
        self.assertEqual([v.index for v in scene.test_views], [0, 3])
        self.assertEqual(len(scene.train_views), 4)


class SceneSerializerTests(SimpleTestCase):
    """Tests for scene config validation"""

    def test_valid_config(self):
        """Test a complete config builds a spec"""
        spec = spec_from_config(scene_config())
        self.assertEqual(len(spec.shapes), 2)
        self.assertEqual(spec.shapes[1].material.specular, 0.5)
        self.assertEqual(spec_from_config(spec_to_config(spec)), spec)

    def test_missing_field_is_named(self):
        """Test a missing ring field is reported by its path"""
        config = scene_config()
        del config['ring']['count']
        with self.assertRaises(ConfigError) as ctx:
            spec_from_config(config)
        self.assertEqual(ctx.exception.field, 'ring.count')

    def test_unknown_key_rejected(self):
        """Test keys the schema does not declare are rejected"""
        config = scene_config()
        config['shapes'][0]['colour'] = [1, 0, 0]
        with self.assertRaises(ConfigError) as ctx:
            spec_from_config(config)
        self.assertEqual(ctx.exception.field, 'shapes.0.colour')

    def test_sphere_needs_radius(self):
        """Test a sphere without a radius is rejected"""
        config = scene_config()
        del config['shapes'][0]['radius']
        with self.assertRaises(ConfigError) as ctx:
            spec_from_config(config)
        self.assertEqual(ctx.exception.field, 'shapes.0.radius')


class SceneFileTests(SimpleTestCase):
    """Tests for scene directories"""

    def test_save_and_load(self):
        """Test a saved scene reloads with its cameras and maps"""
        scene = generate_scene(spec_from_config(scene_config()))
        with tempfile.TemporaryDirectory() as tmp:
            save_scene(scene, tmp)
            self.assertEqual(len(list(Path(tmp).glob('*.png'))), 8)
            self.assertEqual(len(list(Path(tmp).glob('*.pfm'))), 12)
            loaded = load_scene(tmp)
        self.assertEqual(loaded.spec, scene.spec)
        self.assertEqual(len(loaded.views), 4)
        for a, b in zip(scene.views, loaded.views):
            self.assertTrue(torch.allclose(a.camera.world_to_camera, b.camera.world_to_camera, atol=0))
            self.assertTrue(torch.equal(a.mask, b.mask))
            np.testing.assert_allclose(b.depth.numpy(), a.depth.numpy(), rtol=1e-6)
            np.testing.assert_allclose(b.color.numpy(), a.color.numpy(), atol=0.5 / 255 + 1e-12)
            self.assertEqual(a.split, b.split)

    def test_directory_checksum_is_deterministic(self):
        """Test regenerating a scene gives the same directory checksum"""
        spec = spec_from_config(scene_config())
        with tempfile.TemporaryDirectory() as one, tempfile.TemporaryDirectory() as two:
            save_scene(generate_scene(spec), one)
            save_scene(generate_scene(spec), two)
            self.assertEqual(directory_checksum(one), directory_checksum(two))

    def test_camera_manifest(self):
        """Test the manifest lists intrinsics and a row-major 4×4 per camera"""
        scene = generate_scene(axis_spec(size=9))
        with tempfile.TemporaryDirectory() as tmp:
            save_scene(scene, tmp)
            ((index, split, camera),) = read_cameras(Path(tmp) / 'cameras.txt')
        self.assertEqual((index, split), (0, 'train'))
        self.assertEqual((camera.width, camera.height), (9, 9))
        self.assertTrue(torch.equal(camera.world_to_camera, scene.views[0].camera.world_to_camera))

    def test_missing_ground_truth(self):
        """Test a missing map file is an invalid argument"""
        scene = generate_scene(axis_spec(size=9))
        with tempfile.TemporaryDirectory() as tmp:
            save_scene(scene, tmp)
            (Path(tmp) / 'view_000_depth.pfm').unlink()
            with self.assertRaises(InvalidArgument):
                load_scene(tmp)
            with self.assertRaises(InvalidArgument):
                load_scene(Path(tmp) / 'nothing')

    def test_normal_map_directory(self):
        """Test external normal maps round-trip by view index"""
        maps = {0: torch.zeros(4, 5, 3, dtype=torch.float64), 2: torch.ones(4, 5, 3, dtype=torch.float64)}
        with tempfile.TemporaryDirectory() as tmp:
            save_normal_maps(maps, tmp)
            loaded = load_normal_maps(tmp, [0, 2])
            with self.assertRaises(InvalidArgument):
                load_normal_maps(tmp, [1])
        self.assertTrue(torch.equal(loaded[2], maps[2]))


class MetricTests(SimpleTestCase):
    """Tests for evaluation metrics"""

    def test_psnr(self):
        """Test PSNR sentinel, closed form and symmetry"""
        a = torch.full((4, 4, 3), 0.5, dtype=torch.float64)
        self.assertEqual(psnr(a, a), math.inf)
        self.assertAlmostEqual(psnr(a, a + 0.1), 20.0, places=9)
        b = torch.rand(4, 4, 3, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        self.assertEqual(psnr(a, b), psnr(b, a))
        with self.assertRaises(InvalidArgument):
            psnr(a, a[:2])

    def test_psnr_toy(self):
        """Test PSNR on a three-pixel image"""
        self.assertAlmostEqual(psnr([0.0, 0.5, 1.0], [0.1, 0.5, 0.8]), 10 * math.log10(3 / 0.05), places=9)

    def test_chamfer(self):
        """Test Chamfer identity, single pair and the brute-force loop"""
        a = np.random.default_rng(0).random((40, 3))
        self.assertEqual(chamfer(a, a), 0.0)
        self.assertAlmostEqual(chamfer([[0, 0, 0]], [[1, 0, 0]]), 1.0)
        b = np.random.default_rng(1).random((25, 3))
        a_to_b = np.mean([min(np.linalg.norm(p - q) for q in b) for p in a])
        b_to_a = np.mean([min(np.linalg.norm(q - p) for p in a) for q in b])
        self.assertAlmostEqual(chamfer(a, b), 0.5 * (a_to_b + b_to_a), delta=1e-9)
        with self.assertRaises(InvalidArgument):
            chamfer(np.zeros((0, 3)), b)

    def test_extract_points(self):
        """Test the opacity floor and the task filter"""
        surfels = [Surfel.create([i, 0.0, 0.0], opacity=0.9, task=task)
                   for i, task in enumerate((Task.COMMON, Task.COLOR_ONLY, Task.NORMAL_ONLY))]
        points = extract_points(surfels, opacity_floor=0.5)
        np.testing.assert_allclose(points[:, 0], [0.0, 2.0])
        dim = [Surfel.create([0.0, 0.0, 0.0], opacity=1e-6)]
        self.assertEqual(extract_points(dim, 0.01).shape, (0, 3))

    def test_model_size(self):
        """Test scalar counts per SH order"""
        one = SurfelCloud.from_surfels([Surfel.create([0.0, 0.0, 0.0])])
        size, scalars = model_size(one)
        self.assertEqual(scalars, 14)
        self.assertGreater(size, 0)
        one.set_sh_order(torch.tensor([1]))
        self.assertEqual(model_size(one)[1], 23)
        self.assertEqual(model_size([]), (0, 0))

    def test_angular_error(self):
        """Test the mean angle between normal maps"""
        a = torch.tensor([[[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]], dtype=torch.float64)
        b = torch.tensor([[[0.0, 0.0, 1.0], [0.0, 1.0, 0.0]]], dtype=torch.float64)
        self.assertAlmostEqual(angular_error(a, b), 45.0, places=9)
        self.assertAlmostEqual(angular_error(a, b, torch.tensor([[False, True]])), 90.0, places=9)

    def test_sphere_samples(self):
        """Test Fibonacci samples lie on the sphere"""
        points = sphere_samples((0.1, 0.0, -0.2), 0.5, 500)
        np.testing.assert_allclose(np.linalg.norm(points - [0.1, 0.0, -0.2], axis=1), 0.5)
        self.assertLess(chamfer(points, sphere_samples((0.1, 0.0, -0.2), 0.5, 800)), 0.05)

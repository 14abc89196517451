import math
from dataclasses import replace

import numpy as np
import torch
from django.test import SimpleTestCase, tag

from scenes.gradcheck import finite_diff_gradient
from surfels.cloud import SurfelCloud, inverse_sigmoid
from surfels.exceptions import PreconditionViolation
from surfels.sh import MAX_SH_BASIS, SH_C0
from surfels.transforms import axis_angle_quaternion, random_quaternions
from surfels.types import Camera, RenderMode, Surfel, Task

from .gradients import backward
from .projection import DEFAULT_SETTINGS, ProjectedSplat, pixel_depth, project_cloud, project_surfel, splat_alpha
from .rasterizer import COLOR_PASS, NORMAL_PASS, rasterize, render_maps

SMOOTH = replace(DEFAULT_SETTINGS, alpha_min=0.0)


def ring_camera(size=16, distance=3.0):
    return Camera.from_fov(60.0, size, size, Camera.look_at([0.3, 0.4, distance]))


def random_cloud(seed, count, with_tasks=False, max_order=1):
    generator = torch.Generator().manual_seed(seed)

    def uniform(lo, hi, *shape):
        return lo + (hi - lo) * torch.rand(*shape, generator=generator, dtype=torch.float64)

    sh = torch.zeros(count, MAX_SH_BASIS, 3, dtype=torch.float64)
    sh[:, :4] = uniform(-0.15, 0.15, count, 4, 3)
    task = torch.randint(0, 3, (count,), generator=generator) if with_tasks else None
    return SurfelCloud(
        uniform(-0.6, 0.6, count, 3),
        random_quaternions(count, generator, torch.float64),
        torch.log(uniform(0.05, 0.25, count, 2)),
        inverse_sigmoid(uniform(0.3, 0.8, count, 1)),
        sh,
        inverse_sigmoid(uniform(0.1, 0.9, count, 1)),
        sh_order=torch.randint(0, max_order + 1, (count,), generator=generator),
        task=task,
    )


def brute_force_maps(cloud, camera, mode=RenderMode.UNIFIED, settings=DEFAULT_SETTINGS):
    """Explicit per-pixel loop over globally depth-sorted fragments."""
    splats = project_cloud(cloud, camera, settings)
    to_list = lambda t: t.detach().tolist()
    mean, conic = to_list(splats.mean2d), to_list(splats.conic)
    opacity, color = to_list(splats.opacity), to_list(splats.color)
    normal, conf = to_list(splats.normal), to_list(splats.confidence)
    offset, view_depth = to_list(splats.plane_offset), to_list(splats.view_depth)
    visible, task = to_list(splats.visible), cloud.task.tolist()
    fx, fy, cx, cy = splats.intrinsics
    fragments = sorted((view_depth[i], i) for i in range(len(cloud)) if visible[i])

    def members(chain):
        if mode == RenderMode.UNIFIED:
            return [i for _, i in fragments]
        excluded = int(Task.NORMAL_ONLY) if chain == COLOR_PASS else int(Task.COLOR_ONLY)
        return [i for _, i in fragments if task[i] != excluded]

    def alpha_at(i, u, v):
        dx, dy = u - mean[i][0], v - mean[i][1]
        a, b, c = conic[i]
        alpha = min(opacity[i] * math.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy)), settings.alpha_max)
        return 0.0 if alpha < settings.alpha_min else alpha

    H, W = camera.height, camera.width
    out = {name: np.zeros(shape) for name, shape in
           (('color', (H, W, 3)), ('depth', (H, W)), ('normal', (H, W, 3)), ('confidence', (H, W)), ('alpha', (H, W)))}
    color_chain, normal_chain = members(COLOR_PASS), members(NORMAL_PASS)
    for row in range(H):
        for col in range(W):
            u, v = col + 0.5, row + 0.5
            ray = ((u - cx) / fx, (v - cy) / fy, 1.0)
            ray_len = math.sqrt(sum(r * r for r in ray))
            T, rgb, d = 1.0, [0.0, 0.0, 0.0], 0.0
            for i in color_chain:
                alpha = alpha_at(i, u, v)
                w = alpha * T
                rgb = [rgb[k] + w * color[i][k] for k in range(3)]
                denom = sum(normal[i][k] * ray[k] for k in range(3))
                depth = view_depth[i] if abs(denom) < settings.grazing_eps * ray_len else offset[i] / denom
                d += w * min(max(depth, camera.near), camera.far)
                T *= 1.0 - alpha
            coverage = 1.0 - T
            out['color'][row, col] = rgb
            out['alpha'][row, col] = coverage
            out['depth'][row, col] = d / coverage if coverage >= settings.coverage_eps else 0.0
            T, n, f = 1.0, np.zeros(3), 0.0
            for i in normal_chain:
                alpha = alpha_at(i, u, v)
                n += alpha * T * np.asarray(normal[i])
                f += alpha * T * conf[i]
                T *= 1.0 - alpha
            length = np.linalg.norm(n)
            out['confidence'][row, col] = f
            if 1.0 - T >= settings.coverage_eps and length > 0:
                out['normal'][row, col] = n / length
    return out


class ProjectionTests(SimpleTestCase):
    """Tests for surfel projection, alpha and depth payloads"""

    def setUp(self):
        self.camera = Camera.from_fov(90.0, 16, 16, torch.eye(4, dtype=torch.float64))

    def test_on_axis_covariance(self):
        """Test a fronto-parallel surfel on the optical axis projects to diag((f·s/z)² + 0.3)"""
        s, z = 0.2, 2.0
        splat = project_surfel(Surfel.create([0.0, 0.0, z], scale=(s, s)), self.camera)
        expected = (self.camera.fx * s / z) ** 2 + 0.3
        self.assertTrue(torch.allclose(splat.cov2d, torch.diag(torch.tensor([expected, expected], dtype=torch.float64))))
        self.assertTrue(torch.allclose(splat.mean2d, torch.tensor([8.0, 8.0], dtype=torch.float64)))

    def test_behind_camera_is_culled(self):
        """Test a surfel behind the camera is culled"""
        self.assertIsNone(project_surfel(Surfel.create([0.0, 0.0, -1.0]), self.camera))

    def test_off_screen_is_culled(self):
        """Test a surfel whose footprint misses the image is culled"""
        self.assertIsNone(project_surfel(Surfel.create([50.0, 0.0, 2.0], scale=(0.01, 0.01)), self.camera))

    def test_covariance_is_symmetric_positive(self):
        """Test every projected covariance is symmetric with positive determinant"""
        splats = project_cloud(random_cloud(0, 30), ring_camera())
        cov = splats.cov2d.detach()
        self.assertTrue(torch.equal(cov, cov.transpose(-1, -2)))
        self.assertTrue(bool((torch.linalg.det(cov) > 0).all()))

    def _unit_splat(self):
        return ProjectedSplat(index=0, mean2d=torch.tensor([4.5, 4.5], dtype=torch.float64),
                              cov2d=torch.eye(2, dtype=torch.float64), view_depth=2.0,
                              plane_normal=torch.tensor([0.0, 0.0, -1.0], dtype=torch.float64),
                              plane_offset=-2.0, intrinsics=(8.0, 8.0, 8.0, 8.0))

    def test_alpha_at_center(self):
        """Test alpha equals the opacity at the projected center"""
        self.assertAlmostEqual(splat_alpha(self._unit_splat(), 0.8, [4.5, 4.5]), 0.8)

    def test_alpha_one_pixel_off_center(self):
        """Test unit covariance, opacity 1, offset (1, 0) gives exp(-0.5)"""
        self.assertAlmostEqual(splat_alpha(self._unit_splat(), 1.0, [5.5, 4.5]), math.exp(-0.5), places=12)

    def test_alpha_zero_opacity(self):
        """Test zero opacity gives zero alpha"""
        self.assertEqual(splat_alpha(self._unit_splat(), 0.0, [4.5, 4.5]), 0.0)

    def test_alpha_is_clamped(self):
        """Test alpha never exceeds 0.999"""
        self.assertEqual(splat_alpha(self._unit_splat(), 1.0, [4.5, 4.5]), 0.999)

    def test_fronto_parallel_depth(self):
        """Test a fronto-parallel surfel at z = 2 has depth 2 at any pixel"""
        splat = project_surfel(Surfel.create([0.0, 0.0, 2.0]), self.camera)
        for pixel in ([8.0, 8.0], [3.5, 11.5], [0.5, 0.5]):
            self.assertAlmostEqual(pixel_depth(splat, pixel), 2.0, places=12)

    def test_tilted_plane_depth(self):
        """Test a 45 degree plane matches an independent ray-plane solve"""
        q = axis_angle_quaternion([0.0, 1.0, 0.0], math.pi / 4).numpy()
        center = np.array([0.1, -0.05, 2.0])
        splat = project_surfel(Surfel.create(center, rotation=q), self.camera)
        normal = np.array([math.sin(math.pi / 4), 0.0, math.cos(math.pi / 4)])
        for pixel in ([8.0, 8.0], [10.5, 6.5]):
            ray = np.array([(pixel[0] - 8.0) / self.camera.fx, (pixel[1] - 8.0) / self.camera.fy, 1.0])
            t = normal @ center / (normal @ ray)
            self.assertAlmostEqual(pixel_depth(splat, pixel), t * ray[2], delta=1e-9)

    def test_plane_depth_clamped_to_far_plane(self):
        """Test pixel_depth and the depth map agree when the plane runs past the far plane"""
        camera = Camera.from_fov(90.0, 16, 16, torch.eye(4, dtype=torch.float64), far=3.0)
        q = axis_angle_quaternion([0.0, 1.0, 0.0], math.pi / 3).numpy()
        surfel = Surfel.create([0.0, 0.0, 2.5], rotation=q, scale=(1e4, 1e4), opacity=0.99999)
        splat = project_surfel(surfel, camera)
        normal = np.array([math.sin(math.pi / 3), 0.0, math.cos(math.pi / 3)])
        maps = render_maps([surfel], camera)
        raw = []
        for row, col in ((8, 4), (8, 11)):
            pixel = [col + 0.5, row + 0.5]
            ray = np.array([(pixel[0] - 8.0) / camera.fx, (pixel[1] - 8.0) / camera.fy, 1.0])
            raw.append(normal @ np.array([0.0, 0.0, 2.5]) / (normal @ ray))
            expected = min(max(raw[-1], camera.near), camera.far)
            self.assertAlmostEqual(pixel_depth(splat, pixel), expected, delta=1e-9)
            self.assertAlmostEqual(float(maps.depth[row, col]), expected, delta=1e-6)
        self.assertGreater(max(raw), camera.far)

    def test_grazing_ray_falls_back(self):
        """Test a ray nearly parallel to the plane returns the view depth"""
        q = axis_angle_quaternion([0.0, 1.0, 0.0], math.pi / 2).numpy()
        splat = project_surfel(Surfel.create([0.0, 0.0, 2.0], rotation=q, scale=(0.5, 0.5)), self.camera)
        self.assertEqual(pixel_depth(splat, [8.0, 8.0]), splat.view_depth)


class CompositingTests(SimpleTestCase):
    """Tests for render_maps against hand values and a brute-force oracle"""

    def setUp(self):
        self.camera = Camera.from_fov(90.0, 16, 16, torch.eye(4, dtype=torch.float64))

    def _flat(self, z, opacity, sh_dc):
        return Surfel.create([0.0, 0.0, z], scale=(1e4, 1e4), opacity=opacity, sh=[sh_dc] * 3)

    def test_two_half_transparent_layers(self):
        """Test two full-screen splats with alpha 0.5 and white payload give 0.75"""
        maps = render_maps([self._flat(1.0, 0.5, 2.0), self._flat(2.0, 0.5, 2.0)], self.camera)
        self.assertTrue(torch.allclose(maps.color, torch.full((16, 16, 3), 0.75, dtype=torch.float64), atol=1e-6))
        self.assertTrue(torch.allclose(maps.alpha, torch.full((16, 16), 0.75, dtype=torch.float64), atol=1e-6))

    def test_single_opaque_splat(self):
        """Test one opaque splat returns its colour, alpha 0.999 and its plane depth"""
        gray = -0.2 / SH_C0
        maps = render_maps([self._flat(2.0, 0.99999, gray)], self.camera)
        self.assertTrue(torch.allclose(maps.color, torch.full((16, 16, 3), 0.3 * 0.999, dtype=torch.float64), atol=1e-6))
        self.assertTrue(torch.allclose(maps.alpha, torch.full((16, 16), 0.999, dtype=torch.float64), atol=1e-6))
        self.assertTrue(torch.allclose(maps.depth, torch.full((16, 16), 2.0, dtype=torch.float64), atol=1e-9))
        self.assertTrue(torch.allclose(maps.normal[..., 2], torch.full((16, 16), -1.0, dtype=torch.float64)))

    def test_empty_scene_is_background(self):
        """Test an empty surfel list renders background everywhere"""
        maps = render_maps([], self.camera)
        self.assertEqual(float(maps.color.abs().sum()), 0.0)
        self.assertEqual(float(maps.depth.abs().sum()), 0.0)
        self.assertEqual(float(maps.normal.abs().sum()), 0.0)

    def test_matches_brute_force(self):
        """Test tiled compositing equals the per-pixel oracle on 100 random scenes"""
        camera = ring_camera()
        for seed in range(100):
            cloud = random_cloud(seed, 1 + seed % 20)
            maps = render_maps(cloud, camera)
            oracle = brute_force_maps(cloud, camera)
            for name, expected in oracle.items():
                got = getattr(maps, name).detach().numpy()
                np.testing.assert_allclose(got, expected, atol=1e-6, err_msg=f'{name} (seed {seed})')

    def test_separate_mode_matches_brute_force(self):
        """Test separate-mode chains equal the per-pixel oracle with task filtering"""
        camera = ring_camera()
        for seed in range(10):
            cloud = random_cloud(100 + seed, 15, with_tasks=True)
            maps = render_maps(cloud, camera, RenderMode.SEPARATE)
            oracle = brute_force_maps(cloud, camera, RenderMode.SEPARATE)
            for name, expected in oracle.items():
                np.testing.assert_allclose(getattr(maps, name).detach().numpy(), expected, atol=1e-6, err_msg=name)

    def test_weights_and_alpha_bounded(self):
        """Test alpha mask and contribution weights stay inside [0, 1]"""
        result = rasterize(random_cloud(7, 20), ring_camera())
        self.assertTrue(bool(((result.maps.alpha >= 0) & (result.maps.alpha <= 1)).all()))
        for name in (COLOR_PASS, NORMAL_PASS):
            w = result.contributions[name]
            self.assertTrue(bool(((w >= 0) & (w <= 1)).all()))
            self.assertTrue(torch.equal(w > 0, result.touched[name] > 0))
        self.assertTrue(result.maps.is_finite())

    def test_permutation_invariance(self):
        """Test shuffling the surfel list leaves every map unchanged"""
        cloud = random_cloud(11, 20)
        perm = torch.randperm(20, generator=torch.Generator().manual_seed(0))
        a = render_maps(cloud, ring_camera())
        b = render_maps(cloud.subset(perm), ring_camera())
        for name in ('color', 'depth', 'normal', 'confidence', 'alpha'):
            self.assertTrue(torch.allclose(getattr(a, name), getattr(b, name), atol=1e-12), name)

    def test_unified_equals_separate_when_all_common(self):
        """Test an all-Common scene renders bit-identically in both modes"""
        cloud = random_cloud(12, 20)
        a = render_maps(cloud, ring_camera(), RenderMode.UNIFIED)
        b = render_maps(cloud, ring_camera(), RenderMode.SEPARATE)
        for name in ('color', 'depth', 'normal', 'confidence', 'alpha'):
            self.assertTrue(torch.equal(getattr(a, name), getattr(b, name)), name)

    def test_task_partition_is_exact(self):
        """Test removing NormalOnly keeps C and D, removing ColorOnly keeps N, bit for bit"""
        camera = ring_camera()
        for seed in range(5):
            cloud = random_cloud(200 + seed, 20, with_tasks=True)
            full = render_maps(cloud, camera, RenderMode.SEPARATE)
            no_normal_only = render_maps(cloud.subset(cloud.task != int(Task.NORMAL_ONLY)), camera, RenderMode.SEPARATE)
            no_color_only = render_maps(cloud.subset(cloud.task != int(Task.COLOR_ONLY)), camera, RenderMode.SEPARATE)
            self.assertTrue(torch.equal(full.color, no_normal_only.color))
            self.assertTrue(torch.equal(full.depth, no_normal_only.depth))
            self.assertTrue(torch.equal(full.normal, no_color_only.normal))


class BackwardTests(SimpleTestCase):
    """Tests for analytic gradients of the rasterizer"""

    def _upstream(self, seed, camera):
        generator = torch.Generator().manual_seed(seed)
        H, W = camera.height, camera.width
        return {
            'color': torch.randn(H, W, 3, generator=generator, dtype=torch.float64),
            'depth': torch.randn(H, W, generator=generator, dtype=torch.float64),
            'normal': torch.randn(H, W, 3, generator=generator, dtype=torch.float64),
            'confidence': torch.randn(H, W, generator=generator, dtype=torch.float64),
            'alpha': torch.randn(H, W, generator=generator, dtype=torch.float64),
        }

    def _check_finite_differences(self, seed, count=10):
        camera = ring_camera()
        cloud = random_cloud(seed, count)
        upstream = self._upstream(seed, camera)
        result = rasterize(cloud, camera, settings=SMOOTH)
        # depth and normal are normalised by coverage; keep their adjoints away from the cutoff
        solid = (result.maps.alpha.detach() > 1e-3).to(torch.float64)
        upstream['depth'] = upstream['depth'] * solid
        upstream['normal'] = upstream['normal'] * (result.maps.extras['normal_alpha'].detach() > 1e-3)[..., None]
        grads = backward(result, upstream)

        def loss():
            maps = rasterize(cloud, camera, settings=SMOOTH).maps
            return sum(float((getattr(maps, name) * adj).sum()) for name, adj in upstream.items())

        params = cloud.parameters()
        checked = {name: params[name] for name in ('xyz', 'rotation', 'scaling', 'opacity', 'confidence')}
        for name, tensor in checked.items():
            numeric = finite_diff_gradient(loss, tensor).gradients[0]
            analytic = getattr(grads, name)
            err = (analytic - numeric).abs()
            bound = 1e-3 * torch.maximum(analytic.abs(), numeric.abs()) + 1e-6
            self.assertTrue(bool((err <= bound).all()), f'{name}: max err {float(err.max())}')
        sh_view = params['sh']
        numeric = finite_diff_gradient(loss, sh_view).gradients[0][:, :4]
        analytic = grads.sh[:, :4]
        self.assertTrue(bool(((analytic - numeric).abs() <= 1e-3 * numeric.abs() + 1e-6).all()))

    def test_finite_differences(self):
        """Test analytic gradients match central differences on seeded 10-surfel scenes"""
        for seed in (0, 1, 2):
            self._check_finite_differences(seed)

    @tag('slow')
    def test_finite_differences_sweep(self):
        """Test the finite-difference agreement on ten seeded scenes"""
        for seed in range(10, 20):
            self._check_finite_differences(seed)

    def test_zero_upstream_gives_zero_gradients(self):
        """Test zero adjoints produce exactly zero gradients"""
        camera = ring_camera()
        cloud = random_cloud(3, 10)
        zeros = {name: torch.zeros_like(t) for name, t in self._upstream(0, camera).items()}
        grads = backward(rasterize(cloud, camera), zeros)
        for name, g in grads.as_dict().items():
            self.assertEqual(float(g.abs().sum()), 0.0, name)

    def test_uncovered_surfel_has_no_gradient(self):
        """Test a surfel behind the camera gets zero gradient and zero contribution"""
        camera = ring_camera()
        cloud = random_cloud(4, 5)
        with torch.no_grad():
            cloud.parameters()['xyz'][0] = torch.tensor([0.3, 0.4, 10.0], dtype=torch.float64)
        result = rasterize(cloud, camera)
        grads = backward(result, self._upstream(1, camera))
        self.assertEqual(float(grads.xyz[0].abs().sum()), 0.0)
        self.assertEqual(float(grads.opacity[0].abs().sum()), 0.0)
        self.assertEqual(float(result.contributions[COLOR_PASS][0]), 0.0)

    def test_stale_forward_is_rejected(self):
        """Test backward refuses a render whose surfels changed afterwards"""
        camera = ring_camera()
        cloud = random_cloud(5, 5)
        result = rasterize(cloud, camera)
        with torch.no_grad():
            cloud.parameters()['xyz'].add_(0.01)
        with self.assertRaises(PreconditionViolation):
            backward(result, self._upstream(0, camera))

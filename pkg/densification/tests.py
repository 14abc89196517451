from types import SimpleNamespace

import numpy as np
import torch
from django.test import SimpleTestCase

from splatting.gradients import SurfelGradients, task_gradients
from splatting.rasterizer import COLOR_PASS, NORMAL_PASS, rasterize
from surfels.cloud import SurfelCloud, inverse_sigmoid
from surfels.exceptions import InvalidArgument
from surfels.sh import MAX_SH_BASIS
from surfels.transforms import random_quaternions
from surfels.types import Camera, RenderMode, Surfel, Task

from .config import ManagementConfig
from .densify import CLONE, NONE, SEPARATE, SPLIT, decide, densify_decisions, densify_step
from .ledger import GradientLedger
from .pruning import lowest_fraction, prune_step
from .sh_growth import adaptive_sh_step, apply_fixed_order


def camera(size=16):
    return Camera.from_fov(60.0, size, size, Camera.look_at([0.2, 0.3, 3.0]))


def task_cloud(seed, count=24, tasks=None, order=1):
    generator = torch.Generator().manual_seed(seed)

    def uniform(lo, hi, *shape):
        return lo + (hi - lo) * torch.rand(*shape, generator=generator, dtype=torch.float64)

    sh = torch.zeros(count, MAX_SH_BASIS, 3, dtype=torch.float64)
    sh[:, :4] = uniform(-0.2, 0.2, count, 4, 3)
    if tasks is None:
        tasks = torch.randint(0, 3, (count,), generator=generator)
    return SurfelCloud(
        uniform(-0.6, 0.6, count, 3),
        random_quaternions(count, generator, torch.float64),
        torch.log(uniform(0.05, 0.2, count, 2)),
        inverse_sigmoid(uniform(0.3, 0.9, count, 1)),
        sh,
        inverse_sigmoid(uniform(0.2, 0.8, count, 1)),
        sh_order=torch.full((count,), order),
        task=tasks,
    )


def zero_gradients(count, dtype=torch.float64):
    z = lambda *shape: torch.zeros(count, *shape, dtype=dtype)
    return SurfelGradients(xyz=z(3), rotation=z(4), scaling=z(2), opacity=z(1), sh=z(MAX_SH_BASIS, 3),
                           confidence=z(1), normal=z(3))


def fake_view(cloud, color=None, normal=None, touched=None):
    count = len(cloud)
    color = torch.zeros(count, dtype=torch.float64) if color is None else torch.as_tensor(color, dtype=torch.float64)
    normal = torch.zeros(count, dtype=torch.float64) if normal is None else torch.as_tensor(normal, dtype=torch.float64)
    touched = torch.ones(count, dtype=torch.long) if touched is None else torch.as_tensor(touched)
    return SimpleNamespace(cloud=cloud, contributions={COLOR_PASS: color, NORMAL_PASS: normal},
                           touched={COLOR_PASS: touched, NORMAL_PASS: touched})


def single_surfel_cloud(task=Task.COMMON, scale=0.001):
    return SurfelCloud.from_surfels([Surfel.create([0.1, -0.2, 0.3], scale=(scale, scale * 0.5), opacity=0.7,
                                                   sh=np.full(12, 0.1), sh_order=1, task=task)])


class LedgerTests(SimpleTestCase):
    """Tests for the gradient ledger"""

    def test_contribution_single_view(self):
        """Test the per-view weight is passed through for one view"""
        cloud = single_surfel_cloud()
        ledger = GradientLedger(1)
        # αT of 0.5 and 0.25 over two touched pixels
        ledger.record_view(fake_view(cloud, color=[(0.5 + 0.25) / 2]), *[zero_gradients(1)] * 2,
                           torch.zeros(1, 2, dtype=torch.float64))
        self.assertAlmostEqual(float(ledger.contribution(COLOR_PASS)[0]), 0.375, places=12)

    def test_contribution_two_views(self):
        """Test contributions average over views"""
        cloud = single_surfel_cloud()
        ledger = GradientLedger(1)
        for w in (0.4, 0.2):
            ledger.record_view(fake_view(cloud, color=[w]), *[zero_gradients(1)] * 2, torch.zeros(1, 2))
        self.assertAlmostEqual(float(ledger.contribution(COLOR_PASS)[0]), 0.3, places=12)

    def test_contribution_without_fragments(self):
        """Test a surfel that never touched a pixel has zero contribution"""
        ledger = GradientLedger(3)
        self.assertEqual(ledger.contribution(NORMAL_PASS).tolist(), [0.0, 0.0, 0.0])

    def test_rendered_contribution(self):
        """Test a lone surfel's contribution is the mean alpha over the pixels it touches"""
        cloud = single_surfel_cloud(scale=0.2)
        result = rasterize(cloud, camera())
        alpha = result.maps.alpha.detach()
        expected = float(alpha[alpha > 0].mean())
        self.assertAlmostEqual(float(result.contributions[COLOR_PASS][0]), expected, places=12)
        ledger = GradientLedger(1)
        rad = result.maps.color.mean()
        task_gradients(result, rad, None, ledger=ledger)
        self.assertAlmostEqual(float(ledger.contribution(COLOR_PASS)[0]), expected, places=12)
        self.assertEqual(int(ledger.rad_count[0]), 1)
        self.assertGreater(float(ledger.sh_norm[0]), 0.0)

    def test_means_and_resets(self):
        """Test mean task gradients and independent resets"""
        cloud = single_surfel_cloud()
        ledger = GradientLedger(1)
        rad, geo = zero_gradients(1), zero_gradients(1)
        rad.xyz[0] = torch.tensor([2e-3, 0.0, 0.0])
        geo.rotation[0] = torch.tensor([0.0, 3e-4, 0.0, 4e-4])
        for _ in range(2):
            ledger.record_view(fake_view(cloud, color=[0.5]), rad, geo, torch.zeros(1, 2))
        self.assertTrue(torch.allclose(ledger.mean_rad()[0], torch.tensor([2e-3, 0.0, 0.0], dtype=torch.float64)))
        self.assertAlmostEqual(float(ledger.mean_geo_rotation_norm()[0]), 5e-4, places=15)
        ledger.reset_gradients()
        self.assertEqual(int(ledger.rad_count[0]), 0)
        self.assertAlmostEqual(float(ledger.contribution()[0]), 0.5)
        ledger.reset_contributions()
        self.assertEqual(float(ledger.contribution()[0]), 0.0)

    def test_untouched_views_skip_gradients(self):
        """Test views that miss a surfel leave its gradient sums alone"""
        cloud = single_surfel_cloud()
        ledger = GradientLedger(1)
        rad = zero_gradients(1)
        rad.xyz[0, 0] = 1.0
        ledger.record_view(fake_view(cloud, touched=[0]), rad, rad, torch.zeros(1, 2))
        self.assertEqual(float(ledger.rad_sum.abs().sum()), 0.0)
        self.assertEqual(int(ledger.weight_views[0]), 1)


def primed_ledger(cloud, g_rad, g_geo):
    ledger = GradientLedger(len(cloud))
    ledger.rad_sum[:] = torch.as_tensor(g_rad, dtype=torch.float64)
    ledger.geo_sum[:] = torch.as_tensor(g_geo, dtype=torch.float64)
    ledger.rad_count[:] = 1
    ledger.geo_count[:] = 1
    return ledger


class DensifyTests(SimpleTestCase):
    """Tests for clone, split and separate densification"""

    def setUp(self):
        self.config = ManagementConfig()

    def test_separate_opposing_gradients(self):
        """Test opposing task gradients separate a Common surfel into two task children"""
        cloud = single_surfel_cloud(scale=0.05)
        parent = cloud.surfel(0)
        ledger = primed_ledger(cloud, [1e-3, 0, 0], [-1e-3, 0, 0])
        events = densify_step(cloud, ledger, self.config, extent=1.0)
        self.assertEqual(events.as_dict(), {'cloned': 0, 'split': 0, 'separated': 1})
        self.assertEqual(len(cloud), 2)
        self.assertEqual(len(ledger), 2)
        color = cloud.surfel(int(torch.nonzero(cloud.task == int(Task.COLOR_ONLY))[0]))
        normal = cloud.surfel(int(torch.nonzero(cloud.task == int(Task.NORMAL_ONLY))[0]))
        self.assertLess(color.center[0], parent.center[0])
        self.assertGreater(normal.center[0], parent.center[0])
        np.testing.assert_allclose(color.sh, parent.sh)
        np.testing.assert_allclose(normal.rotation, parent.rotation)
        self.assertEqual(normal.sh_order, 0)
        step = 0.5 * float(np.mean(parent.scale)) * 1e-3 / 2e-3
        self.assertAlmostEqual(parent.center[0] - color.center[0], step, places=9)

    def test_agreeing_gradients_clone(self):
        """Test aligned task gradients clone a small Common surfel"""
        cloud = single_surfel_cloud(scale=0.001)
        ledger = primed_ledger(cloud, [1e-3, 0, 0], [1e-3, 0, 0])
        events = densify_step(cloud, ledger, self.config, extent=1.0)
        self.assertEqual((events.cloned, events.split, events.separated), (1, 0, 0))
        self.assertEqual(cloud.task.tolist(), [int(Task.COMMON)] * 2)

    def test_agreeing_gradients_split(self):
        """Test aligned task gradients split a large surfel into two smaller children"""
        cloud = single_surfel_cloud(scale=0.2)
        parent_scale = cloud.surfel(0).scale
        ledger = primed_ledger(cloud, [1e-3, 0, 0], [1e-3, 0, 0])
        events = densify_step(cloud, ledger, self.config, extent=1.0, generator=torch.Generator().manual_seed(0))
        self.assertEqual((events.cloned, events.split, events.separated), (0, 1, 0))
        self.assertEqual(len(cloud), 2)
        for i in range(2):
            np.testing.assert_allclose(cloud.surfel(i).scale, parent_scale / 1.6, rtol=1e-12)
            self.assertEqual(cloud.surfel(i).task, Task.COMMON)

    def test_below_threshold(self):
        """Test gradients below the threshold leave the cloud unchanged"""
        cloud = task_cloud(0, 10)
        before = cloud.state_dict()
        ledger = primed_ledger(cloud, [1e-5, 0, 0], [-1e-5, 0, 0])
        events = densify_step(cloud, ledger, self.config, extent=1.0)
        self.assertEqual(events.as_dict(), {'cloned': 0, 'split': 0, 'separated': 0})
        for name, tensor in cloud.state_dict().items():
            self.assertTrue(torch.equal(tensor, before[name]))

    def test_separate_disabled(self):
        """Test opposing gradients fall back to clone or split outside the separate window"""
        cloud = single_surfel_cloud(scale=0.001)
        ledger = primed_ledger(cloud, [1e-3, 0, 0], [-1e-3, 0, 0])
        events = densify_step(cloud, ledger, self.config, extent=1.0, allow_separate=False)
        self.assertEqual((events.cloned, events.separated), (1, 0))

    def test_task_surfels_use_own_gradient(self):
        """Test ColorOnly surfels ignore the geometry gradient and never separate"""
        cloud = single_surfel_cloud(task=Task.COLOR_ONLY)
        ledger = primed_ledger(cloud, [1e-5, 0, 0], [-1e-2, 0, 0])
        self.assertEqual(densify_step(cloud, ledger, self.config, extent=1.0).cloned, 0)
        ledger = primed_ledger(cloud, [1e-2, 0, 0], [-1e-2, 0, 0])
        events = densify_step(cloud, ledger, self.config, extent=1.0)
        self.assertEqual((events.cloned, events.separated), (1, 0))
        self.assertEqual(cloud.task.tolist(), [int(Task.COLOR_ONLY)] * 2)

    def test_surfel_budget(self):
        """Test densification never grows the cloud past the configured maximum"""
        cloud = task_cloud(1, 20)
        ledger = primed_ledger(cloud, [1e-2, 0, 0], [1e-2, 0, 0])
        config = ManagementConfig(max_surfels=25)
        densify_step(cloud, ledger, config, extent=1.0, generator=torch.Generator().manual_seed(0))
        self.assertLessEqual(len(cloud), 25)

    def test_decisions_match_reference(self):
        """Test the batched decision function matches the scalar reference on random entries"""
        rng = np.random.default_rng(0)
        count = 10_000
        magnitude = 10 ** rng.uniform(-5.5, -2.5, (count, 2))
        g_rad = rng.normal(size=(count, 3))
        g_rad *= (magnitude[:, 0] / np.linalg.norm(g_rad, axis=1))[:, None]
        g_geo = rng.normal(size=(count, 3))
        g_geo *= (magnitude[:, 1] / np.linalg.norm(g_geo, axis=1))[:, None]
        tasks = rng.integers(0, 3, count)
        scales = 10 ** rng.uniform(-3.5, -0.5, count)
        for allow in (True, False):
            codes, _ = densify_decisions(torch.as_tensor(g_rad), torch.as_tensor(g_geo), torch.as_tensor(tasks),
                                         torch.as_tensor(scales), 2.0, self.config, allow)
            expected = [decide(g_rad[i].tolist(), g_geo[i].tolist(), Task(int(tasks[i])), float(scales[i]), 2.0,
                               self.config, allow) for i in range(count)]
            self.assertEqual(codes.tolist(), expected)
            self.assertEqual(set(expected), {NONE, CLONE, SPLIT, SEPARATE} if allow else {NONE, CLONE, SPLIT})

    def test_optimizer_moments_follow(self):
        """Test Adam moments stay aligned with the surfels through densification"""
        cloud = task_cloud(2, 8, tasks=torch.zeros(8, dtype=torch.long))
        cloud.optimizer = torch.optim.Adam(
            [{'params': [p], 'lr': 1e-3, 'name': name} for name, p in cloud.parameters().items()], eps=1e-15)
        for p in cloud.parameters().values():
            p.grad = torch.ones_like(p)
        cloud.optimizer.step()
        ledger = primed_ledger(cloud, [1e-3, 0, 0], [-1e-3, 0, 0])
        densify_step(cloud, ledger, self.config, extent=1.0)
        self.assertEqual(len(cloud), 16)
        for group in cloud.optimizer.param_groups:
            param = group['params'][0]
            self.assertIs(param, cloud.parameters()[group['name']])
            self.assertEqual(cloud.optimizer.state[param]['exp_avg'].shape, param.shape)


class ShGrowthTests(SimpleTestCase):
    """Tests for adaptive SH orders"""

    def _run(self, order, k):
        cloud = task_cloud(3, 1, order=order)
        ledger = GradientLedger(1)
        ledger.sh_norm[0] = k
        promoted = adaptive_sh_step(cloud, ledger, ManagementConfig())
        return cloud, ledger, promoted

    def test_low_threshold(self):
        """Test K = 0.00015 promotes order 1 to 2"""
        cloud, ledger, promoted = self._run(1, 0.00015)
        self.assertEqual((promoted, int(cloud.sh_order[0])), (1, 2))
        self.assertEqual(float(ledger.sh_norm[0]), 0.0)

    def test_high_threshold(self):
        """Test K = 0.00015 keeps order 2"""
        cloud, _, promoted = self._run(2, 0.00015)
        self.assertEqual((promoted, int(cloud.sh_order[0])), (0, 2))

    def test_first_promotion(self):
        """Test K above 0.0001 promotes order 0 to 1"""
        cloud, _, promoted = self._run(0, 0.000101)
        self.assertEqual((promoted, int(cloud.sh_order[0])), (1, 1))

    def test_ceiling(self):
        """Test order 3 never grows"""
        cloud, _, promoted = self._run(3, 1.0)
        self.assertEqual((promoted, int(cloud.sh_order[0])), (0, 3))

    def test_new_coefficients_start_at_zero(self):
        """Test promotion zeroes the new slots and leaves the render unchanged"""
        cloud = task_cloud(4, 12, order=0)
        with torch.no_grad():
            cloud.parameters()['sh'][:, 1:] = 0.3
        view = camera()
        before = rasterize(cloud, view).maps.color.detach()
        ledger = GradientLedger(len(cloud))
        ledger.sh_norm[:] = 1.0
        self.assertEqual(adaptive_sh_step(cloud, ledger, ManagementConfig()), 12)
        self.assertEqual(float(cloud.parameters()['sh'][:, 1:4].abs().sum()), 0.0)
        self.assertTrue(torch.equal(rasterize(cloud, view).maps.color.detach(), before))
        self.assertEqual(cloud.sh_scalar_count(), 12 * 12)

    def test_fixed_order(self):
        """Test a fixed order disables growth"""
        cloud = task_cloud(5, 4, order=0)
        apply_fixed_order(cloud, 2)
        ledger = GradientLedger(4)
        ledger.sh_norm[:] = 1.0
        self.assertEqual(adaptive_sh_step(cloud, ledger, ManagementConfig(fixed_sh_order=2)), 0)
        self.assertEqual(cloud.sh_order.tolist(), [2] * 4)

    def test_config_validation(self):
        """Test invalid management settings are rejected"""
        with self.assertRaises(InvalidArgument):
            ManagementConfig(prune_percent=100)
        with self.assertRaises(InvalidArgument):
            ManagementConfig(fixed_sh_order=4)
        self.assertEqual(ManagementConfig().sh_threshold(1), 1e-4)
        self.assertEqual(ManagementConfig().sh_threshold(2), 2e-4)


class PruneTests(SimpleTestCase):
    """Tests for opacity and task-decoupled contribution pruning"""

    def _ledger(self, cloud, color, normal=None):
        ledger = GradientLedger(len(cloud))
        ledger.color_weight[:] = torch.as_tensor(color, dtype=torch.float64)
        if normal is not None:
            ledger.normal_weight[:] = torch.as_tensor(normal, dtype=torch.float64)
        ledger.weight_views[:] = 1
        return ledger

    def test_zero_fraction(self):
        """Test a zero prune fraction only removes low-opacity surfels"""
        cloud = task_cloud(6, 10)
        with torch.no_grad():
            cloud.parameters()['opacity'][3] = inverse_sigmoid(torch.tensor(0.001, dtype=torch.float64))
        events = prune_step(cloud, self._ledger(cloud, torch.rand(10)), ManagementConfig(prune_percent=0))
        self.assertEqual(events.as_dict(), {'opacity': 1, 'color': 0, 'normal': 0, 'coupled': 0, 'total': 1})
        self.assertEqual(len(cloud), 9)

    def test_lowest_color_surfel_removed(self):
        """Test pruning 10% of ten ColorOnly surfels removes the weakest and keeps the normal map bit-identical"""
        tasks = torch.tensor([int(Task.COLOR_ONLY)] * 10 + [int(Task.COMMON)] * 6 + [int(Task.NORMAL_ONLY)] * 6)
        cloud = task_cloud(7, 22, tasks=tasks)
        contributions = torch.linspace(0.5, 0.05, 22, dtype=torch.float64)
        weakest = cloud.surfel(9)
        view = camera()
        before = rasterize(cloud, view, RenderMode.SEPARATE).maps
        scalars = cloud.sh_scalar_count()
        events = prune_step(cloud, self._ledger(cloud, contributions, contributions), ManagementConfig())
        self.assertEqual((events.color, events.normal), (1, 0))
        self.assertEqual(len(cloud), 21)
        self.assertFalse(any(np.array_equal(s.center, weakest.center) for s in cloud.to_surfels()))
        after = rasterize(cloud, view, RenderMode.SEPARATE).maps
        self.assertTrue(torch.equal(after.normal, before.normal))
        self.assertTrue(torch.equal(after.confidence, before.confidence))
        self.assertEqual(cloud.sh_scalar_count(), scalars - 12)

    def test_all_below_floor(self):
        """Test a scene where every opacity is below the floor empties out"""
        cloud = task_cloud(8, 6)
        with torch.no_grad():
            cloud.parameters()['opacity'].fill_(-12.0)
        prune_step(cloud, self._ledger(cloud, torch.ones(6)), ManagementConfig())
        self.assertEqual(len(cloud), 0)

    def test_normal_pruning_keeps_colour(self):
        """Test pruning NormalOnly surfels leaves colour and depth bit-identical"""
        tasks = torch.tensor([int(Task.NORMAL_ONLY)] * 20 + [int(Task.COMMON)] * 4 + [int(Task.COLOR_ONLY)] * 4)
        cloud = task_cloud(9, 28, tasks=tasks)
        view = camera()
        before = rasterize(cloud, view, RenderMode.SEPARATE).maps
        contributions = torch.rand(28, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        events = prune_step(cloud, self._ledger(cloud, contributions, contributions), ManagementConfig())
        self.assertEqual(events.normal, 2)
        after = rasterize(cloud, view, RenderMode.SEPARATE).maps
        self.assertTrue(torch.equal(after.color, before.color))
        self.assertTrue(torch.equal(after.depth, before.depth))

    def test_coupled_mode(self):
        """Test unified rendering ranks every surfel together"""
        cloud = task_cloud(10, 20, tasks=torch.zeros(20, dtype=torch.long))
        contributions = torch.arange(20, dtype=torch.float64)
        events = prune_step(cloud, self._ledger(cloud, contributions), ManagementConfig(), mode=RenderMode.UNIFIED)
        self.assertEqual(events.coupled, 2)
        self.assertEqual(len(cloud), 18)

    def test_lowest_fraction_ties(self):
        """Test ties break by index and the count rounds down"""
        scores = torch.tensor([0.2, 0.1, 0.1, 0.3])
        picked = lowest_fraction(scores, torch.ones(4, dtype=torch.bool), 50)
        self.assertEqual(picked.tolist(), [1, 2])
        self.assertEqual(lowest_fraction(scores, torch.ones(4, dtype=torch.bool), 20).numel(), 0)

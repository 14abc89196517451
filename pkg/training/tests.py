import hashlib
import json
import math
import tempfile
from dataclasses import replace
from pathlib import Path
from unittest import mock

import torch
from django.conf import settings
from django.test import SimpleTestCase, tag

from densification.config import ManagementConfig
from objectives.breakdown import LossBreakdown, LossWeights
from objectives.normals import normalize
from scenes.oracle import CameraRing, SceneSpec, generate_scene
from scenes.shapes import Sphere
from surfels.cloud import SurfelCloud
from surfels.exceptions import CheckpointError, ConfigError, InvalidArgument, NonFiniteLoss
from surfels.types import Camera

from . import schedules, stages
from .checkpoint import FORMAT_VERSION, HEADER, MAGIC, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from .config import MANAGE, STAGE1, STAGE2, STAGE3, OptimizerConfig, OutputConfig, SdfConfig, StagePlan, TrainConfig
from .logs import EventLog, LossLog
from .optimizer import SkipCounter, optimizer_step, surfel_optimizer
from .pipeline import TrainingRun, restore_cloud
from .serializers import config_from_dict, load_config

GOLDEN = Path(__file__).parent / 'testdata' / 'config_golden.json'


def assert_same_document(test, actual, expected, path='config'):
    if isinstance(expected, dict):
        test.assertEqual(sorted(actual), sorted(expected), path)
        for key in expected:
            assert_same_document(test, actual[key], expected[key], f'{path}.{key}')
    elif isinstance(expected, list):
        test.assertEqual(len(actual), len(expected), path)
        for i, (a, e) in enumerate(zip(actual, expected)):
            assert_same_document(test, a, e, f'{path}[{i}]')
    elif isinstance(expected, float):
        test.assertTrue(math.isclose(actual, expected, rel_tol=1e-12), f'{path}: {actual} != {expected}')
    else:
        test.assertEqual(actual, expected, path)


def tiny_scene():
    ring = CameraRing(count=4, radius=3.0, width=16, height=16)
    return generate_scene(SceneSpec(shapes=(Sphere(radius=0.5),), ring=ring))


def tiny_config(**overrides):
    plan = StagePlan(stage1_iterations=6, stage2_iterations=4, stage3_iterations=4, manage_iterations=8,
                     densify_from=2, densify_until=8, separate_from=2, separate_until=4, prune_from=4, prune_until=8,
                     manage_lambda_n_from=4, warmup_densify_from=2, warmup_densify_until=4, core_sh_order=1)
    values = {
        'initial_surfels': 200,
        'stages': plan,
        'management': ManagementConfig(densify_interval=2, sh_interval=3, prune_interval=2),
        'sdf': SdfConfig(resolution=12, rays_per_step=32, n_coarse=8, n_fine=8, eikonal_points=32,
                         render_chunk=1024),
        'output': OutputConfig(log_every=1, checkpoint_every=2),
    }
    values.update(overrides)
    return TrainConfig(**values)


def context(config, scene, out_dir=None):
    return stages.StageContext(config=config, scene=scene, generator=torch.Generator().manual_seed(config.seed),
                               out_dir=Path(out_dir) if out_dir else None,
                               loss_log=LossLog(out_dir) if out_dir else None,
                               event_log=EventLog(out_dir) if out_dir else None)


class ConfigTests(SimpleTestCase):
    """Tests for the training configuration dataclasses"""

    def test_defaults_match_golden_dump(self):
        """Test every default constant against the recorded dump."""
        expected = json.loads(GOLDEN.read_text())
        actual = json.loads(json.dumps(TrainConfig().dump()))
        assert_same_document(self, actual, expected)

    def test_switch_iteration_is_warmup_length(self):
        self.assertEqual(StagePlan().switch_iteration, 15000)
        self.assertEqual(StagePlan().iterations(MANAGE), 15000)

    def test_window_outside_run_rejected(self):
        """Test that an event window reaching past its run is refused."""
        with self.assertRaises(InvalidArgument):
            StagePlan(prune_until=20000)
        with self.assertRaises(InvalidArgument):
            StagePlan(separate_from=9000, separate_until=8000)

    def test_scaled_plan_keeps_ratios(self):
        plan = StagePlan().scaled(0.1)
        self.assertEqual(plan.stage1_iterations, 1500)
        self.assertEqual(plan.stage2_iterations, 3000)
        self.assertEqual((plan.densify_from, plan.densify_until), (500, 1500))
        self.assertEqual((plan.prune_from, plan.prune_until), (1000, 1500))
        self.assertEqual(plan.core_sh_order, 3)

    def test_scaled_schedule_intervals(self):
        schedule = TrainConfig(scale=0.1).schedule
        self.assertEqual((schedule.densify_interval, schedule.sh_interval, schedule.prune_interval), (10, 75, 75))

    def test_tiny_scale_keeps_one_iteration(self):
        self.assertEqual(StagePlan().scaled(1e-6).stage1_iterations, 1)

    def test_unknown_dtype(self):
        with self.assertRaises(InvalidArgument):
            TrainConfig(dtype='float16')


class ConfigSerializerTests(SimpleTestCase):
    """Tests for reading training TOML files"""

    def test_empty_document_gives_defaults(self):
        self.assertEqual(config_from_dict({}), TrainConfig())

    def test_unknown_key_is_named(self):
        """Test that a misspelt key is reported with its dotted path."""
        with self.assertRaises(ConfigError) as ctx:
            config_from_dict({'stages': {'stage1_iteration': 10}})
        self.assertIn('stages.stage1_iteration', str(ctx.exception))

    def test_invalid_value_is_named(self):
        with self.assertRaises(ConfigError) as ctx:
            config_from_dict({'stages': {'stage1_iterations': 0}})
        self.assertIn('stage1_iterations', str(ctx.exception))

    def test_window_violation_names_section(self):
        with self.assertRaises(ConfigError) as ctx:
            config_from_dict({'stages': {'prune_until': 99999}})
        self.assertEqual(ctx.exception.field, 'stages')

    def test_sections_reach_dataclasses(self):
        config = config_from_dict({
            'seed': 7,
            'scene': {'path': 'outputs/scenes/sphere'},
            'confidence': {'enabled': False},
            'management': {'fixed_sh_order': 2},
            'optimizer': {'opacity_lr': 0.1},
        })
        self.assertEqual(config.seed, 7)
        self.assertEqual(config.scene_path, 'outputs/scenes/sphere')
        self.assertFalse(config.confidence)
        self.assertEqual(config.management.fixed_sh_order, 2)
        self.assertEqual(config.optimizer.opacity_lr, 0.1)
        self.assertEqual(config.optimizer.sh_lr, OptimizerConfig().sh_lr)

    def test_load_config_hashes_file_bytes(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.toml'
            path.write_text('seed = 3\n[stages]\nstage1_iterations = 100\n'
                            'warmup_densify_from = 10\nwarmup_densify_until = 50\n')
            config, digest = load_config(path)
            self.assertEqual(config.seed, 3)
            self.assertEqual(config.stages.stage1_iterations, 100)
            self.assertEqual(digest, hashlib.sha256(path.read_bytes()).hexdigest())

    def test_malformed_toml(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'broken.toml'
            path.write_text('[stages\nseed = ')
            with self.assertRaises(ConfigError):
                load_config(path)

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config('/nonexistent/run.toml')

    def test_desk_preset_loads(self):
        config, _ = load_config(Path(settings.SURFEL_PRESETS_DIR) / 'desk.toml')
        self.assertEqual(config.scale, 0.1)
        self.assertEqual(config.plan.stage1_iterations, 1500)


class ScheduleTests(SimpleTestCase):
    """Tests for weight schedules and event timing"""

    def setUp(self):
        self.plan = StagePlan()
        self.loss = LossWeights()
        self.management = ManagementConfig()

    def test_warmup_normal_weight_endpoints(self):
        self.assertAlmostEqual(schedules.warmup_weights(0, self.plan, self.loss)[0], 0.04)
        self.assertAlmostEqual(schedules.warmup_weights(15000, self.plan, self.loss)[0], 0.02)

    def test_warmup_depth_weight_midpoint(self):
        self.assertAlmostEqual(schedules.warmup_weights(7500, self.plan, self.loss)[1], 0.06)

    def test_refinement_weights_are_constant(self):
        self.assertEqual(schedules.refine_weights(1, self.plan, self.loss), (0.5, 1.0))
        self.assertEqual(schedules.refine_weights(15000, self.plan, self.loss), (0.5, 1.0))

    def test_management_normal_weight_switch(self):
        """Test that λ_n follows the warm-up line until the switch and is 1 from it on."""
        before = schedules.manage_weights(4999, self.plan, self.loss)[0]
        self.assertAlmostEqual(before, 0.04 - 0.02 * 4999 / 15000)
        self.assertEqual(schedules.manage_weights(5000, self.plan, self.loss)[0], 1.0)

    def test_prune_iterations(self):
        due = schedules.event_iterations(lambda i: schedules.prune_due(i, self.plan, self.management), 15000)
        self.assertEqual(due, [10500, 11250, 12000, 12750, 13500, 14250])

    def test_densify_iterations(self):
        due = schedules.event_iterations(lambda i: schedules.densify_due(i, self.plan, self.management), 15000)
        self.assertEqual((due[0], due[-1], len(due)), (5000, 14900, 100))

    def test_separation_window(self):
        self.assertFalse(schedules.separate_allowed(4999, self.plan))
        self.assertTrue(schedules.separate_allowed(5000, self.plan))
        self.assertTrue(schedules.separate_allowed(9999, self.plan))
        self.assertFalse(schedules.separate_allowed(10000, self.plan))

    def test_sh_growth_runs_all_along(self):
        due = schedules.event_iterations(lambda i: schedules.sh_due(i, self.management), 15000)
        self.assertEqual(len(due), 20)
        self.assertEqual(due[0], 750)

    def test_position_lr_decay(self):
        config = OptimizerConfig()
        self.assertAlmostEqual(schedules.position_lr(0, 100, config, 2.0), 3.2e-4)
        self.assertAlmostEqual(schedules.position_lr(100, 100, config, 2.0), 3.2e-6)

    def test_linear_clamps(self):
        self.assertEqual(schedules.linear(1.0, 3.0, -5, 10), 1.0)
        self.assertEqual(schedules.linear(1.0, 3.0, 50, 10), 3.0)


class OptimizerTests(SimpleTestCase):
    """Tests for the Adam step wrapper"""

    def scalar_adam(self, *values):
        params = [torch.nn.Parameter(torch.tensor([v], dtype=torch.float64)) for v in values]
        groups = [{'params': [p], 'lr': 0.1, 'name': f'p{i}'} for i, p in enumerate(params)]
        return params, torch.optim.Adam(groups, betas=(0.9, 0.999), eps=1e-15)

    def test_unit_gradient_moves_by_learning_rate(self):
        (p,), optimizer = self.scalar_adam(0.0)
        p.grad = torch.ones_like(p)
        optimizer_step(optimizer)
        self.assertAlmostEqual(float(p), -0.1, places=12)
        self.assertIsNone(p.grad)

    def test_zero_gradient_leaves_parameter(self):
        (p,), optimizer = self.scalar_adam(0.25)
        p.grad = torch.zeros_like(p)
        optimizer_step(optimizer)
        self.assertEqual(float(p), 0.25)

    def test_nonfinite_gradient_is_skipped(self):
        """Test that a NaN gradient drops only its own update and is counted."""
        (bad, good), optimizer = self.scalar_adam(1.0, 1.0)
        bad.grad = torch.tensor([float('nan')], dtype=torch.float64)
        good.grad = torch.ones_like(good)
        skipped = SkipCounter()
        dropped = optimizer_step(optimizer, skipped=skipped)
        self.assertEqual(dropped, ['p0'])
        self.assertEqual(float(bad), 1.0)
        self.assertAlmostEqual(float(good), 0.9, places=12)
        self.assertEqual(skipped.counts, {'p0': 1})
        self.assertEqual(skipped.total, 1)

    def test_quaternions_stay_unit(self):
        cloud = SurfelCloud.from_random(16, [-1.0] * 3, [1.0] * 3, generator=torch.Generator().manual_seed(0))
        optimizer = surfel_optimizer(cloud, OptimizerConfig(rotation_lr=0.5), extent=2.0)
        cloud.parameters()['rotation'].grad = torch.ones_like(cloud.parameters()['rotation'])
        optimizer_step(optimizer, cloud)
        norms = torch.linalg.norm(cloud.parameters()['rotation'].detach(), dim=-1)
        torch.testing.assert_close(norms, torch.ones_like(norms))

    def test_position_group_scaled_by_extent(self):
        cloud = SurfelCloud.from_random(4, [-1.0] * 3, [1.0] * 3, generator=torch.Generator().manual_seed(0))
        optimizer = surfel_optimizer(cloud, OptimizerConfig(), extent=2.0)
        rates = {group['name']: group['lr'] for group in optimizer.param_groups}
        self.assertAlmostEqual(rates['xyz'], 3.2e-4)
        self.assertEqual(set(rates), {'xyz', 'rotation', 'scaling', 'opacity', 'sh', 'confidence'})
        self.assertIs(cloud.optimizer, optimizer)


class CheckpointTests(SimpleTestCase):
    """Tests for checkpoint files"""

    def trained_state(self):
        cloud = SurfelCloud.from_random(8, [-1.0] * 3, [1.0] * 3, generator=torch.Generator().manual_seed(1))
        optimizer = surfel_optimizer(cloud, OptimizerConfig())
        for p in cloud.parameters().values():
            p.grad = torch.full_like(p, 0.5)
        optimizer_step(optimizer, cloud)
        generator = torch.Generator().manual_seed(5)
        return {'stage': STAGE1, 'iteration': 3, 'complete': False, 'seed': 0, 'generator': generator.get_state(),
                'skipped': {}, 'cloud': cloud.state_dict(), 'optimizer': optimizer.state_dict()}, cloud

    def test_save_load_save_is_byte_identical(self):
        state, _ = self.trained_state()
        with tempfile.TemporaryDirectory() as tmp:
            first = save_checkpoint(Path(tmp) / 'a.ckpt', state)
            second = save_checkpoint(Path(tmp) / 'b.ckpt', load_checkpoint(first))
            self.assertEqual(first.read_bytes(), second.read_bytes())

    def test_restored_cloud_is_bit_identical(self):
        state, cloud = self.trained_state()
        restored, ledger = restore_cloud(parse_checkpoint(checkpoint_bytes(state)), TrainConfig(), 1.0)
        for name, p in cloud.parameters().items():
            self.assertTrue(torch.equal(p.detach(), restored.parameters()[name].detach()), name)
        moments = restored.optimizer.state_dict()['state']
        self.assertTrue(torch.equal(moments[0]['exp_avg'], cloud.optimizer.state_dict()['state'][0]['exp_avg']))
        self.assertEqual(len(ledger), len(cloud))

    def test_bad_magic(self):
        data = bytearray(checkpoint_bytes({'stage': STAGE1}))
        data[:8] = b'NOTACKPT'
        with self.assertRaises(CheckpointError):
            parse_checkpoint(bytes(data))

    def test_truncated_file(self):
        data = checkpoint_bytes({'stage': STAGE1})
        with self.assertRaises(CheckpointError):
            parse_checkpoint(data[:HEADER.size - 4])
        with self.assertRaises(CheckpointError):
            parse_checkpoint(data[:-3])

    def test_version_mismatch(self):
        data = checkpoint_bytes({'stage': STAGE1})
        _, _, length, digest = HEADER.unpack(data[:HEADER.size])
        forged = HEADER.pack(MAGIC, FORMAT_VERSION + 1, length, digest) + data[HEADER.size:]
        with self.assertRaises(CheckpointError):
            parse_checkpoint(forged)

    def test_corrupted_payload(self):
        data = bytearray(checkpoint_bytes({'stage': STAGE1, 'iteration': 1}))
        data[-1] ^= 0xFF
        with self.assertRaises(CheckpointError):
            parse_checkpoint(bytes(data))


class LogTests(SimpleTestCase):
    """Tests for losses.csv and events.jsonl"""

    def test_loss_log_truncation(self):
        with tempfile.TemporaryDirectory() as tmp:
            log = LossLog(tmp)
            for stage, iteration in ((STAGE1, 1), (STAGE1, 2), (STAGE1, 3), (STAGE2, 1)):
                log.append(stage, iteration, LossBreakdown().add('l_rad', torch.tensor(0.5)))
            log.truncate_after(STAGE1, 2)
            self.assertEqual([(r['stage'], r['iteration']) for r in log.rows()], [(STAGE1, '1'), (STAGE1, '2')])
            self.assertEqual(log.rows()[0]['l_geo'], '')

    def test_event_log_truncation(self):
        with tempfile.TemporaryDirectory() as tmp:
            log = EventLog(tmp)
            log.append(MANAGE, 100, 'densify', cloned=3)
            log.append(MANAGE, 750, 'prune', surfels=10)
            log.truncate_after(MANAGE, 500)
            self.assertEqual(log.records(), [{'stage': MANAGE, 'iteration': 100, 'event': 'densify', 'cloned': 3}])


class StageTests(SimpleTestCase):
    """Tests for the individual training stages on a tiny scene"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.scene = tiny_scene()

    def test_camera_frame_rotation(self):
        """Test that a world normal facing the camera points along -z in its frame."""
        camera = Camera.from_fov(40.0, 4, 4, Camera.look_at([0.0, 0.0, 3.0]))
        world = torch.zeros(4, 4, 3, dtype=torch.float64)
        world[..., 2] = 1.0
        local = stages.to_camera_frame(world, camera, torch.float64)
        torch.testing.assert_close(local[..., 2], -torch.ones(4, 4, dtype=torch.float64))
        back = camera.directions_to_world(local)
        torch.testing.assert_close(back, world)

    def test_ray_range_brackets_scene(self):
        view = self.scene.views[0]
        near, far = stages.ray_range(view.camera, self.scene)
        distance = float(torch.linalg.norm(view.camera.center))
        self.assertLess(near, distance - 0.5)
        self.assertGreater(far, distance + 0.5)

    def test_stage3_leaves_field_unchanged(self):
        ctx = context(tiny_config(), self.scene)
        cloud, ledger = stages.run_stage1(ctx)
        cache = stages.cache_surfel_renders(ctx, cloud)
        field = stages.run_stage2(ctx, cache)
        volume = stages.render_volume_maps(ctx, field, cache)
        checksum = field.checksum()
        stages.run_stage3(ctx, cloud, field, volume, ledger)
        self.assertEqual(field.checksum(), checksum)
        self.assertFalse(any(p.requires_grad for p in field.parameters()))
        self.assertEqual(len(ctx.history[STAGE1]), 6)
        self.assertEqual(len(ctx.history[STAGE2]), 4)

    def test_disabled_confidence_uses_plain_volume_normals(self):
        """Test that without confidence the stage-3 target is the rotated volume normal."""
        ctx = context(tiny_config(confidence=False), self.scene)
        volume = {v.index: {'normal': v.normal, 'confidence': torch.zeros(v.mask.shape, dtype=torch.float64)}
                  for v in self.scene.views}
        targets = stages.volume_targets(ctx, volume, ctx.plan.switch_iteration + 1)
        for view in self.scene.train_views:
            expected = normalize(view.camera.directions_to_camera(view.normal.float()))
            torch.testing.assert_close(targets[view.index], expected)

    def test_zero_confidence_drops_target(self):
        ctx = context(tiny_config(), self.scene)
        volume = {v.index: {'normal': v.normal, 'confidence': torch.zeros(v.mask.shape, dtype=torch.float64)}
                  for v in self.scene.views}
        targets = stages.volume_targets(ctx, volume, ctx.plan.switch_iteration + 1)
        for target in targets.values():
            self.assertEqual(float(target.abs().sum()), 0.0)

    def test_management_events(self):
        """Test event timing of the management run and separation outside its window."""
        with tempfile.TemporaryDirectory() as tmp:
            ctx = context(tiny_config(), self.scene, tmp)
            normals = {v.index: v.normal for v in self.scene.views}
            cloud, _ = stages.run_management(ctx, normals)
            events = ctx.event_log.records()
        kinds = {}
        for record in events:
            kinds.setdefault(record['event'], []).append(record['iteration'])
        self.assertEqual(kinds['densify'], [2, 4, 6])
        self.assertEqual(kinds['prune'], [4, 6])
        self.assertEqual(kinds['sh'], [3, 6])
        late = [r for r in events if r['event'] == 'densify' and r['iteration'] >= 4]
        self.assertTrue(all(r['separated'] == 0 for r in late))
        last_sh = [r for r in events if r['event'] == 'sh'][-1]
        self.assertEqual(len(last_sh['orders']), 4)
        self.assertGreater(len(cloud), 0)
        for record in events:
            self.assertGreater(record['surfels'], 0, record)
            self.assertGreaterEqual(record['sh_scalars'], 3 * record['surfels'], record)
        self.assertEqual(events[-1]['surfels'], len(cloud))
        self.assertEqual(events[-1]['sh_scalars'], cloud.sh_scalar_count())

    def test_management_requires_every_view(self):
        ctx = context(tiny_config(), self.scene)
        with self.assertRaises(InvalidArgument):
            stages.run_management(ctx, {})

    def test_nonfinite_loss_aborts_with_snapshot(self):
        with tempfile.TemporaryDirectory() as tmp:
            ctx = context(tiny_config(), self.scene, tmp)
            nan = torch.tensor(float('nan'), requires_grad=True)
            with mock.patch('training.stages.l_rad', return_value=nan):
                with self.assertRaises(NonFiniteLoss) as raised:
                    stages.run_stage1(ctx)
            self.assertTrue(Path(raised.exception.snapshot_path).exists())


class PipelineTests(SimpleTestCase):
    """Tests for full runs and resuming"""

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.scene = tiny_scene()

    def test_management_alone_needs_normals(self):
        with self.assertRaises(InvalidArgument):
            TrainingRun(tiny_config(), self.scene, None, 'manage').run()

    def test_unknown_stage_set(self):
        with self.assertRaises(InvalidArgument):
            TrainingRun(tiny_config(), self.scene, None, 'everything')

    def interrupted_run(self, config, out_dir, stops):
        """Run 'all' into ``out_dir``, stopping once at each (stage, iteration) and resuming after."""

        class Interrupted(Exception):
            pass

        original = stages.StageContext.record
        for number, stop in enumerate(stops):
            def interrupting(ctx, stage, iteration, breakdown, stop=stop):
                if (stage, iteration) == stop:
                    raise Interrupted
                return original(ctx, stage, iteration, breakdown)

            with mock.patch.object(stages.StageContext, 'record', interrupting):
                with self.assertRaises(Interrupted):
                    TrainingRun(config, self.scene, out_dir, 'all', resume=number > 0).run()
        return TrainingRun(config, self.scene, out_dir, 'all', resume=True).run()

    @tag('slow')
    def test_resume_matches_uninterrupted_run(self):
        """Test that a run resumed inside any stage logs the same losses and ends with the same surfels."""
        config = tiny_config()
        interruptions = {
            'stage1': [(STAGE1, 5)],
            'stage2': [(STAGE2, 3)],
            'stage3': [(STAGE3, 3)],
            'manage': [(MANAGE, 5)],
            'stage2 then stage3': [(STAGE2, 3), (STAGE3, 1)],
        }
        with tempfile.TemporaryDirectory() as a:
            reference = TrainingRun(config, self.scene, a, 'all').run()
            for name, stops in interruptions.items():
                with self.subTest(name), tempfile.TemporaryDirectory() as b:
                    resumed = self.interrupted_run(config, b, stops)
                    self.assertEqual(LossLog(a).rows(), LossLog(b).rows())
                    self.assertEqual(EventLog(a).records(), EventLog(b).records())
                    for param, p in reference.cloud.parameters().items():
                        self.assertTrue(torch.equal(p.detach(), resumed.cloud.parameters()[param].detach()), param)
                    self.assertTrue((Path(b) / stages.CORE_NORMALS_DIR).is_dir())
                    self.assertEqual(sorted(reference.checkpoints), sorted(resumed.checkpoints))
                    for stage in (STAGE2, STAGE3):
                        saved = load_checkpoint(Path(b) / 'checkpoints' / f'{stage}.ckpt')
                        self.assertIn('cloud', saved, stage)
                        self.assertIn('optimizer', saved, stage)

    @tag('slow')
    def test_stage2_checkpoint_carries_surfels(self):
        """Test that a checkpoint written after resuming inside stage 2 still holds the surfel cloud."""
        config = tiny_config()
        with tempfile.TemporaryDirectory() as tmp:
            class Interrupted(Exception):
                pass

            original = stages.StageContext.record

            def interrupting(ctx, stage, iteration, breakdown):
                if (stage, iteration) == (STAGE2, 3):
                    raise Interrupted
                return original(ctx, stage, iteration, breakdown)

            with mock.patch.object(stages.StageContext, 'record', interrupting):
                with self.assertRaises(Interrupted):
                    TrainingRun(config, self.scene, tmp, 'core').run()
            TrainingRun(config, self.scene, tmp, 'core', resume=True).run()
            saved = load_checkpoint(Path(tmp) / 'checkpoints' / f'{STAGE2}.ckpt')
        self.assertIn('cloud', saved)
        restored, _ = restore_cloud(saved, config, 1.0)
        self.assertGreater(len(restored), 0)

    @tag('slow')
    def test_management_from_exported_normals(self):
        """Test that a management-only run picks up core normals left in the output directory."""
        config = tiny_config()
        with tempfile.TemporaryDirectory() as tmp:
            TrainingRun(config, self.scene, tmp, 'core').run()
            outcome = TrainingRun(config, self.scene, tmp, 'manage').run()
        self.assertEqual(len(outcome.history[MANAGE]), config.plan.manage_iterations)
        self.assertIsNone(outcome.field)

    def test_same_seed_same_losses(self):
        config = replace(tiny_config(), stages=replace(tiny_config().stages, core_sh_order=0))
        first = context(config, self.scene)
        second = context(config, self.scene)
        stages.run_stage1(first)
        stages.run_stage1(second)
        self.assertEqual(first.history, second.history)

    @tag('slow')
    def test_desk_warmup_reduces_colour_loss(self):
        """Test that a short warm-up on the sphere lowers the colour loss."""
        ring = CameraRing(count=8, radius=3.0, width=32, height=32)
        scene = generate_scene(SceneSpec(shapes=(Sphere(radius=0.5),), ring=ring))
        plan = replace(StagePlan().scaled(0.02), core_sh_order=0)
        config = TrainConfig(initial_surfels=1000, stages=plan, output=OutputConfig(log_every=1, checkpoint_every=0))
        with tempfile.TemporaryDirectory() as tmp:
            ctx = context(config, scene, tmp)
            stages.run_stage1(ctx)
            losses = [float(row['l_rad']) for row in ctx.loss_log.rows()]
        head, tail = losses[:20], losses[-20:]
        self.assertLess(sum(tail) / len(tail), sum(head) / len(head))

import csv
import hashlib
import json
import tempfile
from io import StringIO
from pathlib import Path

import torch
from django.core.management import call_command
from django.test import TestCase, override_settings, tag

from scenes.io import directory_checksum, load_scene, save_normal_maps
from surfels.cloud import SurfelCloud
from training.checkpoint import save_checkpoint

from .manifest import MANIFEST_FILE, fail_record, finish_record, read_manifest, start_record, write_manifest
from .models import RunRecord

SCENE_TOML = """\
seed = 2

[ring]
count = 4
radius = 3.0
width = 16
height = 16

[[shapes]]
kind = "sphere"
center = [0.0, 0.0, 0.0]
radius = 0.5
"""

TRAIN_TOML = """\
seed = 0
initial_surfels = 150

[stages]
stage1_iterations = 4
stage2_iterations = 3
stage3_iterations = 3
manage_iterations = 6
densify_from = 2
densify_until = 6
separate_from = 2
separate_until = 4
prune_from = 4
prune_until = 6
manage_lambda_n_from = 3
warmup_densify_from = 2
warmup_densify_until = 4
core_sh_order = 1

[management]
densify_interval = 2
sh_interval = 3
prune_interval = 2

[sdf]
resolution = 10
rays_per_step = 32
n_coarse = 8
n_fine = 8
eikonal_points = 32
render_chunk = 1024

[output]
log_every = 1
checkpoint_every = 2
"""


def write(directory, name, text):
    path = Path(directory) / name
    path.write_text(text)
    return path


def run(name, *args, **options):
    """call_command with captured streams; returns (stdout, stderr)."""
    stdout, stderr = StringIO(), StringIO()
    call_command(name, *args, stdout=stdout, stderr=stderr, threads=1, **options)
    return stdout.getvalue(), stderr.getvalue()


def run_failing(test, name, *args, **options):
    """Run a command expected to fail; returns (exit code, stderr)."""
    stderr = StringIO()
    with test.assertRaises(SystemExit) as raised:
        call_command(name, *args, stdout=StringIO(), stderr=stderr, threads=1, **options)
    return raised.exception.code, stderr.getvalue()


def metrics_document(psnr, chamfer=0.01, size=1000):
    return {'psnr': psnr, 'ssim': 0.9, 'chamfer': chamfer, 'size': {'bytes': size, 'scalars': size // 4},
            'per_view': {'index': [0], 'psnr': [psnr], 'ssim': [0.9], 'normal_error': [5.0]}}


class GenSceneCommandTests(TestCase):
    """Tests for the gen_scene command"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.config = write(self.root, 'scene.toml', SCENE_TOML)

    def tearDown(self):
        self.tmp.cleanup()

    def test_writes_view_bundles(self):
        out = self.root / 'scene'
        stdout, _ = run('gen_scene', config=str(self.config), out=str(out))
        self.assertEqual(len(list(out.glob('*.png'))), 8)
        self.assertEqual(len(list(out.glob('*.pfm'))), 12)
        self.assertTrue((out / 'cameras.txt').exists())
        self.assertIn('4 views', stdout)
        self.assertEqual(len(load_scene(out).views), 4)

    def test_same_seed_same_checksum(self):
        run('gen_scene', config=str(self.config), out=str(self.root / 'a'))
        run('gen_scene', config=str(self.config), out=str(self.root / 'b'))
        self.assertEqual(directory_checksum(self.root / 'a'), directory_checksum(self.root / 'b'))

    def test_records_run(self):
        out = self.root / 'scene'
        run('gen_scene', config=str(self.config), out=str(out))
        record = RunRecord.objects.get(command='gen_scene')
        self.assertEqual(record.status, 'COMPLETED')
        self.assertEqual(record.seed, 2)
        self.assertEqual(record.config_hash, hashlib.sha256(self.config.read_bytes()).hexdigest())
        manifest = read_manifest(out)
        self.assertEqual(manifest['command'], 'gen_scene')
        self.assertEqual(manifest['config_hash'], record.config_hash)
        self.assertEqual(manifest['scene_checksum'], directory_checksum(out))
        self.assertEqual(record.metrics['checksum'], manifest['scene_checksum'])

    def test_missing_field_is_named(self):
        """Test that a scene without a camera ring exits 2 naming the field."""
        config = write(self.root, 'bad.toml', SCENE_TOML.split('[ring]')[0] + '[[shapes]]\nkind = "sphere"\n')
        code, stderr = run_failing(self, 'gen_scene', config=str(config), out=str(self.root / 'bad'))
        self.assertEqual(code, 2)
        self.assertTrue(stderr.startswith('error:'))
        self.assertIn('ring', stderr)

    def test_unreadable_config(self):
        code, stderr = run_failing(self, 'gen_scene', config=str(self.root / 'none.toml'), out=str(self.root / 'x'))
        self.assertEqual(code, 2)
        self.assertIn('error:', stderr)


class TrainCommandTests(TestCase):
    """Tests for the train command"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.scene = self.root / 'scene'
        run('gen_scene', config=str(write(self.root, 'scene.toml', SCENE_TOML)), out=str(self.scene))

    def tearDown(self):
        self.tmp.cleanup()

    def test_invalid_key_fails_before_compute(self):
        config = write(self.root, 'bad.toml', TRAIN_TOML.replace('stage1_iterations', 'stage1_iteration'))
        out = self.root / 'run'
        code, stderr = run_failing(self, 'train', config=str(config), scene=str(self.scene), out=str(out))
        self.assertEqual(code, 2)
        self.assertIn('stages.stage1_iteration', stderr)
        self.assertFalse(out.exists())
        self.assertFalse(RunRecord.objects.filter(command='train').exists())

    def test_missing_scene(self):
        config = write(self.root, 'run.toml', TRAIN_TOML)
        code, stderr = run_failing(self, 'train', config=str(config), out=str(self.root / 'run'))
        self.assertEqual(code, 2)
        self.assertIn('scene', stderr)

    def test_management_alone_without_normals(self):
        config = write(self.root, 'run.toml', TRAIN_TOML)
        code, stderr = run_failing(self, 'train', config=str(config), scene=str(self.scene),
                                   out=str(self.root / 'run'), stages='manage')
        self.assertEqual(code, 2)
        self.assertEqual(RunRecord.objects.get(command='train').status, 'FAILED')

    @tag('slow')
    def test_core_run_outputs(self):
        config = write(self.root, 'run.toml', TRAIN_TOML)
        out = self.root / 'run'
        run('train', config=str(config), scene=str(self.scene), out=str(out), stages='core')
        for name in ('config.toml', 'model.ply', 'sdf.grid', 'sdf_points.ply', 'losses.csv', MANIFEST_FILE):
            self.assertTrue((out / name).exists(), name)
        for stage in ('stage1', 'stage2', 'stage3'):
            self.assertTrue((out / 'checkpoints' / f'{stage}.ckpt').exists(), stage)
        self.assertEqual(len(list((out / 'core_normals').glob('*.pfm'))), 4)
        record = RunRecord.objects.get(command='train')
        self.assertEqual(record.status, 'COMPLETED')
        self.assertEqual(record.config_hash, hashlib.sha256((out / 'config.toml').read_bytes()).hexdigest())
        self.assertEqual(read_manifest(out)['config_hash'], record.config_hash)

    @tag('slow')
    def test_management_with_external_normals(self):
        """Test that --stages manage trains from a provided normal directory."""
        scene = load_scene(self.scene)
        normals = save_normal_maps({v.index: v.normal for v in scene.views}, self.root / 'normals')
        config = write(self.root, 'run.toml', TRAIN_TOML)
        out = self.root / 'run'
        run('train', config=str(config), scene=str(self.scene), out=str(out), stages='manage',
            normals=str(normals), mode='unified')
        self.assertTrue((out / 'checkpoints' / 'manage.ckpt').exists())
        self.assertFalse((out / 'sdf.grid').exists())
        events = [json.loads(line) for line in (out / 'events.jsonl').read_text().splitlines()]
        self.assertEqual(sorted({e['event'] for e in events}), ['densify', 'prune', 'sh'])


class EvaluateCommandTests(TestCase):
    """Tests for the evaluate command"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)
        self.scene = self.root / 'scene'
        run('gen_scene', config=str(write(self.root, 'scene.toml', SCENE_TOML)), out=str(self.scene))
        cloud = SurfelCloud.from_random(64, [-0.5] * 3, [0.5] * 3, generator=torch.Generator().manual_seed(4))
        self.checkpoint = save_checkpoint(self.root / 'model.ckpt', {'cloud': cloud.state_dict(), 'seed': 0})

    def tearDown(self):
        self.tmp.cleanup()

    def evaluate(self, name, **options):
        out = self.root / name
        run('evaluate', checkpoint=str(self.checkpoint), scene=str(self.scene), out=str(out), opacity_floor=0.0,
            **options)
        return out

    def test_evaluation_is_deterministic(self):
        first = self.evaluate('eval_a')
        second = self.evaluate('eval_b')
        self.assertEqual((first / 'metrics.json').read_text(), (second / 'metrics.json').read_text())

    def test_metrics_schema(self):
        out = self.evaluate('eval')
        metrics = json.loads((out / 'metrics.json').read_text())
        self.assertEqual(set(metrics), {'psnr', 'ssim', 'chamfer', 'size', 'per_view'})
        self.assertEqual(set(metrics['size']), {'bytes', 'scalars'})
        self.assertEqual(metrics['per_view']['index'], [0, 1, 2, 3])
        self.assertEqual(len(metrics['per_view']['psnr']), 4)
        self.assertTrue(any((out / 'renders').iterdir()))
        self.assertEqual(RunRecord.objects.get(command='evaluate').status, 'COMPLETED')

    def test_unified_mode(self):
        out = self.evaluate('eval_unified', mode='unified')
        self.assertTrue((out / 'metrics.json').exists())

    def test_checkpoint_without_surfels(self):
        empty = save_checkpoint(self.root / 'field.ckpt', {'field': {}})
        code, stderr = run_failing(self, 'evaluate', checkpoint=str(empty), scene=str(self.scene),
                                   out=str(self.root / 'x'))
        self.assertEqual(code, 2)
        self.assertIn('no surfels', stderr)

    def test_corrupt_checkpoint(self):
        broken = self.root / 'broken.ckpt'
        broken.write_bytes(b'garbage')
        code, stderr = run_failing(self, 'evaluate', checkpoint=str(broken), scene=str(self.scene),
                                   out=str(self.root / 'x'))
        self.assertEqual(code, 3)
        self.assertTrue(stderr.startswith('error:'))


class ReportCommandTests(TestCase):
    """Tests for the report command"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def evaluated(self, name, psnr):
        directory = self.root / name
        directory.mkdir()
        write(directory, 'metrics.json', json.dumps(metrics_document(psnr)))
        return str(directory)

    def test_rows_sorted_by_run(self):
        runs = [self.evaluated('gamma', 30.0), self.evaluated('alpha', 28.0), self.evaluated('beta', 29.0)]
        run('report', *runs, out=str(self.root / 'report'))
        with (self.root / 'report' / 'report.csv').open(newline='') as handle:
            rows = list(csv.DictReader(handle))
        self.assertEqual([row['run'] for row in rows], ['alpha', 'beta', 'gamma'])
        self.assertEqual(float(rows[0]['psnr']), 28.0)
        plot = json.loads((self.root / 'report' / 'plot_data.json').read_text())
        self.assertEqual(len(plot), 3)
        self.assertAlmostEqual(plot[0]['size_mb'], 0.001)

    def test_malformed_directory_skipped(self):
        broken = self.root / 'broken'
        broken.mkdir()
        write(broken, 'metrics.json', '{"psnr": ')
        _, stderr = run('report', self.evaluated('good', 30.0), str(broken), out=str(self.root / 'report'))
        self.assertIn('warning: skipping', stderr)
        with (self.root / 'report' / 'report.csv').open(newline='') as handle:
            self.assertEqual(len(list(csv.DictReader(handle))), 1)

    def test_no_valid_run(self):
        code, stderr = run_failing(self, 'report', str(self.root / 'missing'), out=str(self.root / 'report'))
        self.assertEqual(code, 3)
        self.assertIn('no evaluated run', stderr)


@override_settings(SURFEL_VERSION='9.9.9')
class RunRecordTests(TestCase):
    """Tests for run records and manifests"""

    def test_lifecycle(self):
        with tempfile.TemporaryDirectory() as tmp:
            record = start_record('desk', 'train', tmp, config_hash='abc', seed=5)
            self.assertFalse(record.is_finished)
            self.assertEqual(record.version, '9.9.9')
            finish_record(record, {'psnr': float('inf'), 'loss': [1.0, float('nan')]})
            record.refresh_from_db()
            self.assertTrue(record.is_finished)
            self.assertEqual(record.metrics, {'psnr': 'inf', 'loss': [1.0, 'nan']})
            path = write_manifest(record, {'model': Path(tmp) / 'model.ply'})
            manifest = json.loads(path.read_text())
        self.assertEqual(manifest['seed'], 5)
        self.assertEqual(manifest['config_hash'], 'abc')
        self.assertTrue(manifest['outputs']['model'].endswith('model.ply'))
        self.assertNotIn('scene_checksum', manifest)

    def test_failure_is_recorded(self):
        record = start_record('desk', 'evaluate', '/tmp/desk')
        fail_record(record, ValueError('broken scene'))
        record.refresh_from_db()
        self.assertEqual(record.status, 'FAILED')
        self.assertEqual(record.error, 'broken scene')
        self.assertEqual(str(record), 'evaluate desk (FAILED)')

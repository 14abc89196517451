import dataclasses
import logging
from pathlib import Path

from django.conf import settings

from scenes.io import load_scene
from sdf.io import level_set_points, save_grid, save_points_ply
from surfels.exceptions import InvalidArgument, SurfelError
from surfels.ply import save_ply
from surfels.types import RenderMode
from training.checkpoint import atomic_write
from training.pipeline import STAGE_SETS, TrainingRun
from training.serializers import load_config

from runs.base import SurfelCommand
from runs.manifest import fail_record, finish_record, start_record, write_manifest

logger = logging.getLogger(__name__)

CONFIG_COPY = 'config.toml'


class Command(SurfelCommand):
    help = 'Train a surfel model: the CoRe stages, the management run, or both.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--config', required=True, help='Training TOML file.')
        parser.add_argument('--scene', help='Scene directory (default: scene.path from the config).')
        parser.add_argument('--out', help='Output directory (default: SURFEL_OUTPUT_ROOT/<config name>).')
        parser.add_argument('--seed', type=int, help='Override the config seed.')
        parser.add_argument('--stages', choices=sorted(STAGE_SETS), default='all')
        parser.add_argument('--mode', choices=[m.value for m in RenderMode], help='Override render_mode.')
        parser.add_argument('--normals', help='World-frame normal maps supervising the management run.')
        parser.add_argument('--resume', action='store_true', help='Continue from checkpoints/latest.ckpt.')

    def handle(self, *args, **options):
        config_path = Path(options['config'])
        config, config_hash = load_config(config_path)
        overrides = {}
        if options['seed'] is not None:
            overrides['seed'] = options['seed']
        if options['mode']:
            overrides['render_mode'] = options['mode']
        config = dataclasses.replace(config, **overrides)

        scene_dir = options['scene'] or config.scene_path
        if not scene_dir:
            raise InvalidArgument('no scene directory: pass --scene or set scene.path')
        scene = load_scene(scene_dir)
        if not scene.train_views:
            raise InvalidArgument(f'scene {scene_dir} has no training views')
        normals = options['normals']
        if normals and not Path(normals).is_dir():
            raise InvalidArgument(f'normal directory {normals} does not exist')

        out = Path(options['out']) if options['out'] else Path(settings.SURFEL_OUTPUT_ROOT) / config_path.stem
        out.mkdir(parents=True, exist_ok=True)
        atomic_write(out / CONFIG_COPY, config_path.read_bytes())

        record = start_record(out.name, 'train', out, config_hash=config_hash, seed=config.seed)
        try:
            outcome = TrainingRun(config, scene, out, options['stages'], normals, options['resume']).run()
        except SurfelError as exc:
            fail_record(record, exc)
            raise

        outputs = {'config': out / CONFIG_COPY, 'losses': out / 'losses.csv', 'events': out / 'events.jsonl'}
        outputs.update({f'checkpoint_{stage}': path for stage, path in outcome.checkpoints.items()})
        if outcome.cloud is not None:
            save_ply(outcome.cloud, out / 'model.ply')
            outputs['model'] = out / 'model.ply'
        if outcome.field is not None:
            save_grid(outcome.field, out / 'sdf.grid')
            save_points_ply(level_set_points(outcome.field), out / 'sdf_points.ply')
            outputs['sdf'] = out / 'sdf.grid'
            outputs['sdf_points'] = out / 'sdf_points.ply'
        if outcome.core_normals is not None:
            outputs['core_normals'] = out / 'core_normals'
        summary = {
            'surfels': len(outcome.cloud) if outcome.cloud is not None else 0,
            'skipped_updates': outcome.skipped,
            'final_loss': {stage: values[-1] for stage, values in outcome.history.items() if values},
        }
        finish_record(record, summary)
        write_manifest(record, outputs)
        self.stdout.write(f'trained {"/".join(outcome.stages)} into {out}: {summary["surfels"]} surfels')

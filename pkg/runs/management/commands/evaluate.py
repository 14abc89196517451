import json
import logging
from pathlib import Path

from scenes.io import load_scene
from surfels.cloud import SurfelCloud
from surfels.exceptions import InvalidArgument, SurfelError
from surfels.types import RenderMode
from training.checkpoint import atomic_write, load_checkpoint

from runs.base import SurfelCommand
from runs.evaluation import evaluate_cloud
from runs.manifest import fail_record, finish_record, start_record, write_manifest

logger = logging.getLogger(__name__)

METRICS_FILE = 'metrics.json'


class Command(SurfelCommand):
    help = 'Score a checkpoint against a scene: PSNR, SSIM, Chamfer distance and model size.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--checkpoint', required=True)
        parser.add_argument('--scene', required=True)
        parser.add_argument('--out', required=True, help='Directory for metrics.json and the rendered maps.')
        parser.add_argument('--mode', choices=[m.value for m in RenderMode], default=RenderMode.SEPARATE.value,
                            help='"unified" renders without task separation.')
        parser.add_argument('--opacity-floor', type=float, default=0.5)

    def handle(self, *args, **options):
        state = load_checkpoint(options['checkpoint'])
        if 'cloud' not in state:
            raise InvalidArgument(f'{options["checkpoint"]} holds no surfels')
        cloud = SurfelCloud.from_state_dict(state['cloud'])
        scene = load_scene(options['scene'])
        out = Path(options['out'])
        out.mkdir(parents=True, exist_ok=True)

        record = start_record(out.name, 'evaluate', out, seed=int(state.get('seed', 0)))
        try:
            metrics = evaluate_cloud(cloud, scene, RenderMode(options['mode']), export_dir=out / 'renders',
                                     opacity_floor=options['opacity_floor'])
        except SurfelError as exc:
            fail_record(record, exc)
            raise
        atomic_write(out / METRICS_FILE, (json.dumps(metrics, indent=2, sort_keys=True) + '\n').encode())
        finish_record(record, {key: metrics[key] for key in ('psnr', 'ssim', 'chamfer')})
        write_manifest(record, {'metrics': out / METRICS_FILE, 'renders': out / 'renders'})
        self.stdout.write(f'psnr {metrics["psnr"]:.3f}  ssim {metrics["ssim"]:.4f}  '
                          f'chamfer {metrics["chamfer"]:.5f}  bytes {metrics["size"]["bytes"]}')

import hashlib
from pathlib import Path

from scenes.io import directory_checksum, save_scene
from scenes.oracle import generate_scene
from scenes.serializers import spec_from_config
from training.serializers import read_toml

from runs.base import SurfelCommand
from runs.manifest import finish_record, start_record, write_manifest


class Command(SurfelCommand):
    help = 'Render a synthetic scene (ground-truth images, depth, normals, masks) into a directory.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('--config', required=True, help='Scene TOML file.')
        parser.add_argument('--out', required=True, help='Scene directory to write.')

    def handle(self, *args, **options):
        document, raw = read_toml(options['config'])
        spec = spec_from_config(document)
        out = Path(options['out'])
        scene = generate_scene(spec)
        save_scene(scene, out)
        checksum = directory_checksum(out)
        record = start_record(out.name, 'gen_scene', out, config_hash=hashlib.sha256(raw).hexdigest(), seed=spec.seed)
        finish_record(record, {'views': len(scene.views), 'checksum': checksum})
        write_manifest(record, {'scene': out}, scene_checksum=checksum)
        self.stdout.write(f'{len(scene.views)} views written to {out} (sha256 {checksum})')

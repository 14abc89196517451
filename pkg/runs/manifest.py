"""
Run manifests and the run-record lifecycle shared by the commands.
"""
import json
import logging
import math
from pathlib import Path

from django.conf import settings
from django.utils import timezone

from training.checkpoint import atomic_write

from .models import RunRecord
from .serializers import RunManifestSerializer

logger = logging.getLogger(__name__)

MANIFEST_FILE = 'manifest.json'


def start_record(name, command, output_dir, config_hash='', seed=0):
    return RunRecord.objects.create(
        name=name,
        command=command,
        output_dir=str(output_dir),
        config_hash=config_hash,
        seed=seed,
        version=settings.SURFEL_VERSION,
    )


def json_safe(value):
    """Non-finite floats become strings; the database only stores strict JSON."""
    if isinstance(value, float) and not math.isfinite(value):
        return str(value)
    if isinstance(value, dict):
        return {key: json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(item) for item in value]
    return value


def finish_record(record, metrics=None):
    record.status = 'COMPLETED'
    record.metrics = json_safe(metrics or {})
    record.finished_at = timezone.now()
    record.save()
    return record


def fail_record(record, error):
    record.status = 'FAILED'
    record.error = str(error)
    record.finished_at = timezone.now()
    record.save()
    return record


def write_manifest(record, outputs, scene_checksum=None):
    """Write ``manifest.json`` into the record's output directory atomically."""
    document = {
        'command': record.command,
        'config_hash': record.config_hash,
        'seed': record.seed,
        'version': record.version,
        'started_at': record.started_at,
        'finished_at': record.finished_at or timezone.now(),
        'outputs': {name: str(path) for name, path in outputs.items()},
    }
    if scene_checksum is not None:
        document['scene_checksum'] = scene_checksum
    manifest = RunManifestSerializer(document).data
    path = Path(record.output_dir) / MANIFEST_FILE
    atomic_write(path, (json.dumps(manifest, indent=2, sort_keys=True) + '\n').encode())
    logger.info('manifest written to %s', path)
    return path


def read_manifest(directory):
    return json.loads((Path(directory) / MANIFEST_FILE).read_text())

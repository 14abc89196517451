import csv
import json
import logging
from pathlib import Path

from surfels.exceptions import PreconditionViolation
from training.checkpoint import atomic_write

from runs.base import SurfelCommand
from runs.management.commands.evaluate import METRICS_FILE

logger = logging.getLogger(__name__)

REPORT_FILE = 'report.csv'
PLOT_FILE = 'plot_data.json'
COLUMNS = ('run', 'psnr', 'ssim', 'chamfer', 'bytes', 'scalars')


def read_metrics(directory):
    """One report row from an evaluated run directory, or None when the directory is unusable."""
    directory = Path(directory)
    try:
        metrics = json.loads((directory / METRICS_FILE).read_text())
        return {
            'run': directory.name,
            'psnr': float(metrics['psnr']),
            'ssim': float(metrics['ssim']),
            'chamfer': float(metrics['chamfer']),
            'bytes': int(metrics['size']['bytes']),
            'scalars': int(metrics['size']['scalars']),
        }
    except (OSError, ValueError, KeyError, TypeError) as exc:
        logger.debug('unusable run directory %s: %s', directory, exc)
        return None


class Command(SurfelCommand):
    help = 'Collect metrics of evaluated runs into one CSV plus quality-versus-size plot data.'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('runs', nargs='+', help='Evaluated run directories.')
        parser.add_argument('--out', required=True, help='Directory for report.csv and plot_data.json.')

    def handle(self, *args, **options):
        rows = []
        for directory in options['runs']:
            row = read_metrics(directory)
            if row is None:
                self.stderr.write(f'warning: skipping {directory}: no readable {METRICS_FILE}')
                continue
            rows.append(row)
        if not rows:
            raise PreconditionViolation('no evaluated run among the given directories')
        rows.sort(key=lambda row: row['run'])

        out = Path(options['out'])
        out.mkdir(parents=True, exist_ok=True)
        with (out / REPORT_FILE).open('w', newline='') as handle:
            writer = csv.DictWriter(handle, fieldnames=COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
        plot = [{'run': row['run'], 'size_mb': row['bytes'] / 1e6, 'psnr': row['psnr'], 'chamfer': row['chamfer']}
                for row in rows]
        atomic_write(out / PLOT_FILE, (json.dumps(plot, indent=2) + '\n').encode())
        self.stdout.write(f'{len(rows)} runs reported in {out / REPORT_FILE}')

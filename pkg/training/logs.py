"""
Run logs: ``losses.csv`` (one row per logged iteration) and ``events.jsonl``
(one management event per line).
"""
import csv
import json
from pathlib import Path

from objectives.breakdown import LossBreakdown

from .config import STAGE_ORDER

LOSSES_FILE = 'losses.csv'
EVENTS_FILE = 'events.jsonl'


def _position(stage, iteration):
    return STAGE_ORDER.index(stage), int(iteration)


class LossLog:
    """Append-only CSV of ``LossBreakdown`` rows tagged with their stage."""

    def __init__(self, directory):
        self.path = Path(directory) / LOSSES_FILE
        self.fieldnames = ['stage', *LossBreakdown.header()]

    def append(self, stage, iteration, breakdown):
        row = breakdown.as_row(iteration)
        row['stage'] = stage
        new = not self.path.exists()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open('a', newline='') as handle:
            writer = csv.DictWriter(handle, fieldnames=self.fieldnames)
            if new:
                writer.writeheader()
            writer.writerow(row)

    def rows(self):
        if not self.path.exists():
            return []
        with self.path.open(newline='') as handle:
            return list(csv.DictReader(handle))

    def truncate_after(self, stage, iteration):
        """Drop rows logged after (stage, iteration), as when resuming from a checkpoint."""
        limit = _position(stage, iteration)
        kept = [row for row in self.rows() if _position(row['stage'], row['iteration']) <= limit]
        with self.path.open('w', newline='') as handle:
            writer = csv.DictWriter(handle, fieldnames=self.fieldnames)
            writer.writeheader()
            writer.writerows(kept)


class EventLog:
    def __init__(self, directory):
        self.path = Path(directory) / EVENTS_FILE

    def append(self, stage, iteration, kind, **counts):
        record = {'stage': stage, 'iteration': iteration, 'event': kind, **counts}
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with self.path.open('a') as handle:
            handle.write(json.dumps(record, sort_keys=True) + '\n')

    def records(self):
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line.strip()]

    def truncate_after(self, stage, iteration):
        limit = _position(stage, iteration)
        kept = [r for r in self.records() if _position(r['stage'], r['iteration']) <= limit]
        self.path.write_text(''.join(json.dumps(r, sort_keys=True) + '\n' for r in kept))

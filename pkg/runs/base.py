"""
Shared behaviour of the batch commands: thread count and exit codes.

Validation failures exit with 2, every other engine error with 3; both write
a single ``error: <message>`` line to stderr.
"""
import logging

import torch
from django.conf import settings
from django.core.management.base import BaseCommand

from surfels.exceptions import ConfigError, InvalidArgument, SurfelError

logger = logging.getLogger(__name__)

EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


class SurfelCommand(BaseCommand):
    requires_migrations_checks = False

    def add_arguments(self, parser):
        parser.add_argument('--threads', type=int, default=None,
                            help='Worker threads for tensor math (default: SURFEL_THREADS).')

    def execute(self, *args, **options):
        threads = options.get('threads') or settings.SURFEL_THREADS
        torch.set_num_threads(max(1, int(threads)))
        try:
            return super().execute(*args, **options)
        except (ConfigError, InvalidArgument) as exc:
            self.fail(exc, EXIT_VALIDATION)
        except SurfelError as exc:
            self.fail(exc, EXIT_RUNTIME)

    def fail(self, exc, code):
        logger.debug('command failed', exc_info=exc)
        self.stderr.write(f'error: {exc}')
        raise SystemExit(code)

from dataclasses import dataclass
from typing import Optional

from surfels.exceptions import InvalidArgument


@dataclass(frozen=True)
class ManagementConfig:
    """Thresholds and intervals of densification, SH growth and pruning."""
    densify_grad_threshold: float = 2e-4
    densify_interval: int = 100
    percent_dense: float = 0.01
    split_divisor: float = 1.6
    clone_step: float = 1.0
    separate_step: float = 0.5
    sh_threshold_low: float = 1e-4
    sh_threshold_high: float = 2e-4
    sh_interval: int = 750
    fixed_sh_order: Optional[int] = None
    prune_percent: float = 10.0
    prune_interval: int = 750
    opacity_floor: float = 0.005
    max_surfels: int = 50000

    def __post_init__(self):
        for name in ('densify_grad_threshold', 'percent_dense', 'split_divisor', 'separate_step',
                     'sh_threshold_low', 'sh_threshold_high'):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f'{name} must be positive')
        if not 0 <= self.prune_percent < 100:
            raise InvalidArgument('prune_percent must lie in [0, 100)')
        if self.fixed_sh_order is not None and self.fixed_sh_order not in (0, 1, 2, 3):
            raise InvalidArgument('fixed_sh_order must be 0..3')
        for name in ('densify_interval', 'sh_interval', 'prune_interval', 'max_surfels'):
            if getattr(self, name) < 1:
                raise InvalidArgument(f'{name} must be at least 1')

    def sh_threshold(self, order):
        """Promotion threshold for a surfel currently at ``order``."""
        return self.sh_threshold_high if order >= 2 else self.sh_threshold_low

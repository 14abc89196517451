"""
Loss weights and the per-iteration loss breakdown written to ``losses.csv``.
"""
import math
from dataclasses import asdict, dataclass, field

import torch

from surfels.exceptions import InvalidArgument

TERM_NAMES = (
    'l_rad', 'l_geo', 'l_geo_adaptive', 'l_curv', 'l_opac', 'l_mask', 'l_conf_g',
    'l_vol_color', 'l_vol_normal', 'l_conf_v', 'eikonal',
)


@dataclass(frozen=True)
class LossWeights:
    """
    Every loss weight and supervision threshold.

    ``lambda_n_*``/``lambda_s_*`` are the linear warm-up schedules; the
    refinement and management values replace them in their stages.
    """
    ssim: float = 0.2
    curv: float = 0.005
    opac: float = 0.01
    mask: float = 0.01
    lambda_n_start: float = 0.04
    lambda_n_end: float = 0.02
    lambda_s_start: float = 0.01
    lambda_s_end: float = 0.11
    refine_lambda_n: float = 0.5
    refine_lambda_s: float = 1.0
    manage_lambda_n: float = 1.0
    vol: float = 0.01
    conf: float = 0.005
    entropy: float = 0.005
    zeta_rad: float = 2e-4
    zeta_geo: float = 1e-4
    eikonal: float = 0.1
    volume_color: float = 1.0
    conf_g: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0 or not math.isfinite(value):
                raise InvalidArgument(f'loss weight {name} must be finite and non-negative')


@dataclass
class LossBreakdown:
    """Named loss terms, their weights and the weighted total."""
    terms: dict = field(default_factory=dict)
    weights: dict = field(default_factory=dict)

    def add(self, name, value, weight=1.0):
        if name not in TERM_NAMES:
            raise InvalidArgument(f'unknown loss term {name!r}')
        self.terms[name] = value
        self.weights[name] = float(weight)
        return self

    @property
    def total(self):
        values = [self.weights[name] * self.terms[name] for name in self.terms]
        if not values:
            return torch.zeros(())
        return sum(values[1:], values[0])

    def is_finite(self):
        return all(math.isfinite(float(v)) for v in self.terms.values())

    def scalars(self):
        return {name: float(value) for name, value in self.terms.items()}

    def as_row(self, iteration):
        """CSV row: iteration, every known term (blank when absent), total."""
        row = {'iteration': iteration}
        for name in TERM_NAMES:
            row[name] = float(self.terms[name]) if name in self.terms else ''
        row['total'] = float(self.total)
        return row

    @staticmethod
    def header():
        return ['iteration', *TERM_NAMES, 'total']

"""
Training configuration.

A run is described by one TOML file; ``training.serializers`` validates it
and builds the frozen dataclasses below. ``TrainConfig.dump()`` lists every
default for audit.
"""
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Optional

import torch

from densification.config import ManagementConfig
from objectives.breakdown import LossWeights
from sdf.volume import EXP_TRANSMITTANCE, PRODUCT_TRANSMITTANCE
from splatting.projection import RenderSettings
from surfels.exceptions import InvalidArgument
from surfels.types import RenderMode

STAGE1 = 'stage1'
STAGE2 = 'stage2'
STAGE3 = 'stage3'
MANAGE = 'manage'
STAGE_ORDER = (STAGE1, STAGE2, STAGE3, MANAGE)
CORE_STAGES = (STAGE1, STAGE2, STAGE3)


@dataclass(frozen=True)
class StagePlan:
    """Iteration counts and event windows of the three CoRe stages and the management run."""
    stage1_iterations: int = 15000
    stage2_iterations: int = 30000
    stage3_iterations: int = 15000
    manage_iterations: int = 15000
    densify_from: int = 5000
    densify_until: int = 15000
    separate_from: int = 5000
    separate_until: int = 10000
    prune_from: int = 10000
    prune_until: int = 15000
    manage_lambda_n_from: int = 5000
    warmup_densify_from: int = 500
    warmup_densify_until: int = 7500
    core_sh_order: int = 3

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise InvalidArgument(f'{f.name} must not be negative')
        for name in ('stage1_iterations', 'stage2_iterations', 'stage3_iterations', 'manage_iterations'):
            if getattr(self, name) < 1:
                raise InvalidArgument(f'{name} must be at least 1')
        for lo, hi, run in (('densify_from', 'densify_until', 'manage_iterations'),
                            ('separate_from', 'separate_until', 'manage_iterations'),
                            ('prune_from', 'prune_until', 'manage_iterations'),
                            ('warmup_densify_from', 'warmup_densify_until', 'stage1_iterations')):
            if not getattr(self, lo) <= getattr(self, hi) <= getattr(self, run):
                raise InvalidArgument(f'window [{lo}, {hi}) must lie inside {run}')
        if self.manage_lambda_n_from > self.manage_iterations:
            raise InvalidArgument('manage_lambda_n_from must lie inside manage_iterations')
        if self.core_sh_order not in (0, 1, 2, 3):
            raise InvalidArgument('core_sh_order must be 0..3')

    @property
    def switch_iteration(self):
        """T_i: the last iteration supervised by prior normals."""
        return self.stage1_iterations

    def iterations(self, stage):
        return getattr(self, f'{stage}_iterations')

    def scaled(self, factor):
        """Every iteration constant multiplied by ``factor``; window ratios are preserved."""
        if factor <= 0:
            raise InvalidArgument('scale factor must be positive')
        values = {}
        for f in fields(self):
            if f.name == 'core_sh_order':
                continue
            value = getattr(self, f.name)
            values[f.name] = max(1, round(value * factor)) if f.name.endswith('_iterations') else round(value * factor)
        return replace(self, **values)


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam settings and per-group learning rates."""
    position_lr: float = 1.6e-4
    position_lr_final_factor: float = 0.01
    sh_lr: float = 2.5e-3
    opacity_lr: float = 5e-2
    scaling_lr: float = 5e-3
    rotation_lr: float = 1e-3
    confidence_lr: float = 1e-2
    sdf_grid_lr: float = 1e-2
    sharpness_lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not (value > 0 and math.isfinite(value)):
                raise InvalidArgument(f'{name} must be positive')
        if not (self.beta1 < 1 and self.beta2 < 1):
            raise InvalidArgument('Adam betas must be below 1')


@dataclass(frozen=True)
class SdfConfig:
    resolution: int = 64
    sharpness: float = 10.0
    init_radius: Optional[float] = None
    rays_per_step: int = 256
    n_coarse: int = 32
    n_fine: int = 32
    band: float = 0.05
    eikonal_points: int = 256
    transmittance: str = EXP_TRANSMITTANCE
    render_chunk: int = 4096

    def __post_init__(self):
        if self.resolution < 2:
            raise InvalidArgument('SDF grid resolution must be at least 2')
        if self.transmittance not in (EXP_TRANSMITTANCE, PRODUCT_TRANSMITTANCE):
            raise InvalidArgument(f'unknown transmittance {self.transmittance!r}')
        for name in ('rays_per_step', 'n_coarse', 'eikonal_points', 'render_chunk'):
            if getattr(self, name) < 1:
                raise InvalidArgument(f'{name} must be at least 1')


@dataclass(frozen=True)
class OutputConfig:
    log_every: int = 100
    checkpoint_every: int = 1000
    eval_opacity_floor: float = 0.5

    def __post_init__(self):
        if self.log_every < 1 or self.checkpoint_every < 0:
            raise InvalidArgument('log_every must be positive and checkpoint_every non-negative')


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    scale: float = 1.0
    initial_surfels: int = 5000
    confidence: bool = True
    render_mode: str = RenderMode.SEPARATE.value
    dtype: str = 'float32'
    scene_path: Optional[str] = None
    stages: StagePlan = field(default_factory=StagePlan)
    loss: LossWeights = field(default_factory=LossWeights)
    management: ManagementConfig = field(default_factory=ManagementConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    sdf: SdfConfig = field(default_factory=SdfConfig)
    render: RenderSettings = field(default_factory=RenderSettings)
    output: OutputConfig = field(default_factory=OutputConfig)

    def __post_init__(self):
        if self.initial_surfels < 1:
            raise InvalidArgument('initial_surfels must be at least 1')
        if self.dtype not in ('float32', 'float64'):
            raise InvalidArgument('dtype must be float32 or float64')
        RenderMode(self.render_mode)

    @property
    def plan(self):
        """Stage plan with the desk-scale factor applied."""
        return self.stages if self.scale == 1.0 else self.stages.scaled(self.scale)

    @property
    def schedule(self):
        """Management intervals with the desk-scale factor applied."""
        if self.scale == 1.0:
            return self.management
        m = self.management
        return replace(m, densify_interval=max(1, round(m.densify_interval * self.scale)),
                       sh_interval=max(1, round(m.sh_interval * self.scale)),
                       prune_interval=max(1, round(m.prune_interval * self.scale)))

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)

    def dump(self):
        """JSON-able dict of every constant, one table per section."""
        return {
            'seed': self.seed,
            'scale': self.scale,
            'initial_surfels': self.initial_surfels,
            'confidence': self.confidence,
            'render_mode': self.render_mode,
            'dtype': self.dtype,
            'scene': {'path': self.scene_path},
            'stages': asdict(self.stages),
            'loss': asdict(self.loss),
            'management': asdict(self.management),
            'optimizer': asdict(self.optimizer),
            'sdf': asdict(self.sdf),
            'render': asdict(self.render),
            'output': asdict(self.output),
        }

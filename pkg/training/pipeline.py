"""
Stage orchestration with resumable checkpoints.

``checkpoints/latest.ckpt`` always holds the most recent state; each finished
stage also leaves ``checkpoints/<stage>.ckpt``. Resuming reloads the latest
state, truncates the logs to it and continues where it stopped.
"""
import logging
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import torch

from densification.ledger import GradientLedger
from scenes.io import load_normal_maps
from surfels.cloud import SurfelCloud
from surfels.exceptions import CheckpointError, InvalidArgument

from . import stages
from .checkpoint import load_checkpoint
from .config import CORE_STAGES, MANAGE, STAGE1, STAGE2, STAGE3, STAGE_ORDER
from .logs import EventLog, LossLog
from .optimizer import field_optimizer, surfel_optimizer

logger = logging.getLogger(__name__)

STAGE_SETS = {
    'core': CORE_STAGES,
    'manage': (MANAGE,),
    'all': STAGE_ORDER,
}


@dataclass
class RunOutcome:
    stages: tuple
    cloud: SurfelCloud = None
    field: object = None
    core_normals: dict = None
    history: dict = dataclass_field(default_factory=dict)
    skipped: dict = dataclass_field(default_factory=dict)
    checkpoints: dict = dataclass_field(default_factory=dict)


def restore_cloud(state, config, extent):
    """Surfels, their Adam state and ledger from a checkpoint payload."""
    cloud = SurfelCloud.from_state_dict(state['cloud'])
    optimizer = surfel_optimizer(cloud, config.optimizer, extent)
    if state.get('optimizer') is not None:
        optimizer.load_state_dict(state['optimizer'])
    ledger = GradientLedger(len(cloud))
    if 'ledger' in state:
        ledger.load_state_dict(state['ledger'])
    return cloud, ledger


def restore_field(state, ctx):
    field_ = stages.build_field(ctx)
    field_.load_state_dict(state['field'])
    optimizer = None
    if state.get('field_optimizer') is not None:
        optimizer = field_optimizer(field_, ctx.config.optimizer)
        optimizer.load_state_dict(state['field_optimizer'])
    return field_, optimizer


def restore_volume(state):
    return {int(k): v for k, v in state.get('volume', {}).items()}


class TrainingRun:
    """
    One training command: the selected stages over one scene.

    ``normals_dir`` supplies world-frame normal maps for the management run
    when CoRe is not part of the run.
    """

    def __init__(self, config, scene, out_dir=None, stage_set='all', normals_dir=None, resume=False):
        if stage_set not in STAGE_SETS:
            raise InvalidArgument(f'unknown stage set {stage_set!r}; expected one of {sorted(STAGE_SETS)}')
        self.config = config
        self.scene = scene
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.stage_set = stage_set
        self.normals_dir = normals_dir
        self.resume = resume
        generator = torch.Generator().manual_seed(config.seed)
        self.ctx = stages.StageContext(
            config=config, scene=scene, generator=generator, out_dir=self.out_dir,
            loss_log=LossLog(self.out_dir) if self.out_dir else None,
            event_log=EventLog(self.out_dir) if self.out_dir else None,
        )

    @property
    def stages(self):
        return STAGE_SETS[self.stage_set]

    def _resume_point(self):
        """(stage, iteration, complete, payload) of the latest checkpoint, or None."""
        if not (self.resume and self.ctx.checkpoint_dir):
            return None
        path = self.ctx.checkpoint_dir / stages.LATEST
        if not path.exists():
            return None
        state = load_checkpoint(path)
        if state['stage'] not in self.stages:
            raise CheckpointError(f'{path} belongs to stage {state["stage"]}, not part of this run')
        if state.get('seed') != self.config.seed:
            raise CheckpointError(f'{path} was written with seed {state.get("seed")}, config has {self.config.seed}')
        self.ctx.generator.set_state(state['generator'])
        self.ctx.skipped.counts.update(state.get('skipped', {}))
        for log in (self.ctx.loss_log, self.ctx.event_log):
            log.truncate_after(state['stage'], state['iteration'])
        logger.info('resuming from %s %d (complete=%s)', state['stage'], state['iteration'], state['complete'])
        return state

    def _management_normals(self, core_normals):
        if core_normals is not None:
            return core_normals
        directory = self.normals_dir
        if directory is None and self.out_dir is not None:
            candidate = self.out_dir / stages.CORE_NORMALS_DIR
            directory = candidate if candidate.exists() else None
        if directory is None:
            raise InvalidArgument('the management run needs normal maps: run the CoRe stages or pass a normal directory')
        return load_normal_maps(directory, [v.index for v in self.scene.train_views])

    def run(self):
        ctx, config = self.ctx, self.config
        state = self._resume_point()
        order = self.stages
        first = 0
        start = 0
        cloud = ledger = field_ = field_opt = volume = core_normals = None
        if state is not None:
            first = order.index(state['stage'])
            start = state['iteration']
            if state['complete']:
                first, start = first + 1, 0
            if 'cloud' in state:
                cloud, ledger = restore_cloud(state, config, ctx.extent)
                ctx.state.update(cloud=cloud, ledger=ledger)
            if 'field' in state:
                field_, field_opt = restore_field(state, ctx)
            volume = restore_volume(state) or None
            if state['stage'] == STAGE3 and state['complete']:
                core_normals = stages.export_core_normals(ctx, cloud)

        outcome = RunOutcome(stages=order)
        cache = None
        for stage in order[first:]:
            if stage == STAGE1:
                cloud, ledger = stages.run_stage1(ctx, cloud, ledger, start)
            elif stage == STAGE2:
                cache = stages.cache_surfel_renders(ctx, cloud)
                field_ = stages.run_stage2(ctx, cache, field_, field_opt, start)
            elif stage == STAGE3:
                if volume is None:
                    cache = cache or stages.cache_surfel_renders(ctx, cloud)
                    volume = stages.render_volume_maps(ctx, field_, cache)
                cloud, ledger = stages.run_stage3(ctx, cloud, field_, volume, ledger, start)
                core_normals = stages.export_core_normals(ctx, cloud)
            else:
                normals = self._management_normals(core_normals)
                if start == 0:
                    cloud, ledger = None, None
                cloud, ledger = stages.run_management(ctx, normals, cloud, ledger, start)
            start = 0
            if ctx.checkpoint_dir is not None:
                outcome.checkpoints[stage] = ctx.checkpoint_dir / f'{stage}.ckpt'

        outcome.cloud = cloud
        outcome.field = field_
        outcome.core_normals = core_normals
        outcome.history = ctx.history
        outcome.skipped = dict(ctx.skipped.counts)
        return outcome

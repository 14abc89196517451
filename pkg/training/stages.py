"""
The three CoRe stages and the management run.

Supervising normals arrive in the world frame (scene files, exported CoRe
maps, SDF gradients) while the splat renderer and ``depth_to_normal`` work in
the camera frame; every target is rotated into the view's camera frame before
it meets a rendered normal map.
"""
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import torch

from densification.densify import densify_step
from densification.ledger import GradientLedger
from densification.pruning import prune_step
from densification.sh_growth import adaptive_sh_step, apply_fixed_order
from objectives.breakdown import LossBreakdown
from objectives.confidence import confidence_gt, l_conf_g, l_conf_volume
from objectives.geometry import l_geo, l_geo_adaptive
from objectives.image import l1_loss, l_rad
from objectives.normals import cosine_loss, depth_to_normal, normal_supervision, normalize
from objectives.regularizers import regularizers
from scenes.io import save_normal_maps
from sdf.field import VoxelSdfField, eikonal_residual
from sdf.volume import depth_guided_samples, ray_batch, ray_entropy, volume_render_ray
from splatting.gradients import task_gradients
from splatting.rasterizer import rasterize
from surfels.cloud import SurfelCloud
from surfels.exceptions import InvalidArgument, NonFiniteLoss, PreconditionViolation
from surfels.types import RenderMode

from . import schedules
from .checkpoint import save_checkpoint
from .config import MANAGE, STAGE1, STAGE2, STAGE3
from .optimizer import SkipCounter, field_optimizer, optimizer_step, set_group_lr, surfel_optimizer

logger = logging.getLogger(__name__)

CHECKPOINT_DIR = 'checkpoints'
LATEST = 'latest.ckpt'
DIAGNOSTIC = 'diagnostic.pt'
CORE_NORMALS_DIR = 'core_normals'


@dataclass
class StageContext:
    """Everything a stage reads besides the objects it trains."""
    config: object
    scene: object
    generator: torch.Generator
    out_dir: Optional[Path] = None
    loss_log: object = None
    event_log: object = None
    skipped: SkipCounter = field(default_factory=SkipCounter)
    history: dict = field(default_factory=dict)
    state: dict = field(default_factory=dict)

    @property
    def plan(self):
        return self.config.plan

    @property
    def schedule(self):
        return self.config.schedule

    @property
    def dtype(self):
        return self.config.torch_dtype

    @property
    def extent(self):
        return self.scene.extent

    @property
    def checkpoint_dir(self):
        return None if self.out_dir is None else Path(self.out_dir) / CHECKPOINT_DIR

    def views(self):
        views = self.scene.train_views
        if not views:
            raise InvalidArgument('scene has no training views')
        return views

    def pick_view(self, views):
        return views[int(torch.randint(len(views), (1,), generator=self.generator))]

    def record(self, stage, iteration, breakdown):
        total = float(breakdown.total)
        self.history.setdefault(stage, []).append(total)
        every = self.config.output.log_every
        if iteration % every == 0 or iteration == self.plan.iterations(stage):
            if self.loss_log is not None:
                self.loss_log.append(stage, iteration, breakdown)
            logger.info('%s %d/%d loss %.6f', stage, iteration, self.plan.iterations(stage), total)

    def event(self, stage, iteration, kind, **counts):
        logger.info('%s %d: %s %s', stage, iteration, kind, counts)
        if self.event_log is not None:
            self.event_log.append(stage, iteration, kind, **counts)

    def payload(self, stage, iteration, complete=False):
        """Checkpoint payload: the run's live objects plus the sampling state."""
        data = {'stage': stage, 'iteration': iteration, 'complete': complete, 'seed': self.config.seed,
                'generator': self.generator.get_state(), 'skipped': dict(self.skipped.counts)}
        cloud = self.state.get('cloud')
        if cloud is not None:
            data['cloud'] = cloud.state_dict()
            data['optimizer'] = cloud.optimizer.state_dict() if cloud.optimizer is not None else None
        if self.state.get('ledger') is not None:
            data['ledger'] = self.state['ledger'].state_dict()
        field_ = self.state.get('field')
        if field_ is not None:
            data['field'] = {k: v.detach().clone() for k, v in field_.state_dict().items()}
            if self.state.get('field_optimizer') is not None:
                data['field_optimizer'] = self.state['field_optimizer'].state_dict()
        if self.state.get('volume') is not None:
            data['volume'] = {str(k): dict(v) for k, v in self.state['volume'].items()}
        return data

    def save(self, stage, iteration, complete=False):
        directory = self.checkpoint_dir
        if directory is None:
            return None
        every = self.config.output.checkpoint_every
        if not complete and (every == 0 or iteration % every):
            return None
        payload = self.payload(stage, iteration, complete)
        path = save_checkpoint(directory / LATEST, payload)
        if complete:
            path = save_checkpoint(directory / f'{stage}.ckpt', payload)
        return path

    def abort(self, stage, iteration, breakdown):
        snapshot = None
        if self.checkpoint_dir is not None:
            self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
            snapshot = self.checkpoint_dir / DIAGNOSTIC
            cloud = self.state.get('cloud')
            torch.save({'stage': stage, 'iteration': iteration, 'losses': breakdown.scalars(),
                        'cloud': cloud.state_dict() if cloud is not None else None}, snapshot)
        raise NonFiniteLoss(f'{stage} iteration {iteration}: non-finite loss {breakdown.scalars()}', snapshot)


def to_camera_frame(normals, camera, dtype):
    """World-frame normal map rotated into ``camera``; zero vectors stay zero."""
    return normalize(camera.directions_to_camera(torch.as_tensor(normals).to(dtype)))


def ray_range(camera, scene):
    """Depth interval along which the scene box can be seen from ``camera``."""
    center = 0.5 * (scene.bounds_min + scene.bounds_max)
    distance = float(torch.linalg.norm(camera.center - center))
    near = max(camera.near, 0.8 * (distance - scene.extent))
    return near, distance + scene.extent


def initial_cloud(ctx, sh_order=0):
    cloud = SurfelCloud.from_random(ctx.config.initial_surfels, ctx.scene.bounds_min, ctx.scene.bounds_max,
                                    generator=ctx.generator, dtype=ctx.dtype)
    if sh_order:
        apply_fixed_order(cloud, sh_order)
    return cloud


def cloud_totals(cloud):
    return {'surfels': len(cloud), 'sh_scalars': cloud.sh_scalar_count()}


def _prepare(ctx, cloud, ledger):
    if cloud.optimizer is None:
        surfel_optimizer(cloud, ctx.config.optimizer, ctx.extent)
    if ledger is None:
        ledger = GradientLedger(len(cloud))
    ctx.state.update(cloud=cloud, ledger=ledger)
    return ledger


def surfel_step(ctx, stage, iteration, cloud, ledger, view, target, lambdas, mode, adaptive):
    """
    Render one view, evaluate the surfel loss and write gradients into ``.grad``.

    ``target`` is the supervising normal map in the view's camera frame.
    ``adaptive`` switches on the confidence-weighted geometry loss and the
    per-surfel confidence loss.
    """
    weights = ctx.config.loss
    camera = view.camera
    result = rasterize(cloud, camera, mode, ctx.config.render)
    maps = result.maps
    mask = view.mask
    lambda_n, lambda_s = lambdas
    target = target.to(maps.normal.dtype)

    breakdown = LossBreakdown()
    rad = l_rad(maps.color, view.color.to(maps.color.dtype), weights.ssim)
    breakdown.add('l_rad', rad)
    depth_normal = depth_to_normal(maps.depth, camera)
    if adaptive:
        geo = l_geo_adaptive(maps.normal, maps.depth, target, mask, maps.confidence, lambda_n, lambda_s,
                             camera, depth_normal)
        breakdown.add('l_geo_adaptive', geo)
    else:
        geo = l_geo(maps.normal, maps.depth, target, mask, lambda_n, lambda_s, camera, depth_normal)
        breakdown.add('l_geo', geo)

    curv, opac, silhouette = regularizers(cloud, maps, mask)
    breakdown.add('l_curv', curv, weights.curv)
    breakdown.add('l_opac', opac, weights.opac)
    breakdown.add('l_mask', silhouette, weights.mask)
    other = weights.curv * curv + weights.opac * opac + weights.mask * silhouette
    if adaptive:
        target_conf = confidence_gt(ledger.mean_rad_norm(), ledger.mean_geo_rotation_norm(),
                                    weights.zeta_rad, weights.zeta_geo)
        conf = l_conf_g(cloud.get_confidence, target_conf, ledger.observed())
        breakdown.add('l_conf_g', conf, weights.conf_g)
        other = other + weights.conf_g * conf

    if not breakdown.is_finite():
        ctx.abort(stage, iteration, breakdown)
    task_gradients(result, rad, geo, other, ledger)
    return breakdown


def _update_position_lr(ctx, cloud, iteration, total):
    set_group_lr(cloud.optimizer, 'xyz', schedules.position_lr(iteration, total, ctx.config.optimizer, ctx.extent))


def run_stage1(ctx, cloud=None, ledger=None, start=0):
    """
    Warm up the surfel branch against ground-truth colour and prior normals.

    Standard clone/split densification and opacity pruning run inside the
    warm-up window. Returns (cloud, ledger).
    """
    plan, schedule, config = ctx.plan, ctx.schedule, ctx.config
    if cloud is None:
        cloud = initial_cloud(ctx, plan.core_sh_order)
    ledger = _prepare(ctx, cloud, ledger)
    views = ctx.views()
    priors = {v.index: to_camera_frame(v.prior_normal, v.camera, ctx.dtype) for v in views}
    total = plan.stage1_iterations
    opacity_only = replace(schedule, prune_percent=0.0)

    for iteration in range(start + 1, total + 1):
        _update_position_lr(ctx, cloud, iteration, total)
        view = ctx.pick_view(views)
        breakdown = surfel_step(ctx, STAGE1, iteration, cloud, ledger, view, priors[view.index],
                                schedules.warmup_weights(iteration, plan, config.loss),
                                RenderMode.UNIFIED, adaptive=config.confidence)
        optimizer_step(cloud.optimizer, cloud, ctx.skipped)
        if schedules.warmup_densify_due(iteration, plan, schedule):
            grown = densify_step(cloud, ledger, schedule, ctx.extent, allow_separate=False, generator=ctx.generator)
            pruned = prune_step(cloud, ledger, opacity_only, RenderMode.UNIFIED)
            ctx.event(STAGE1, iteration, 'densify', cloned=grown.cloned, split=grown.split, pruned=pruned.opacity,
                      **cloud_totals(cloud))
        ctx.record(STAGE1, iteration, breakdown)
        ctx.save(STAGE1, iteration, complete=iteration == total)
    return cloud, ledger


@dataclass
class SurfelCache:
    """Stage-1 renders of one view: depth and world-frame normals."""
    depth: torch.Tensor
    normal: torch.Tensor


@torch.no_grad()
def cache_surfel_renders(ctx, cloud):
    """Per training view (D_g, N_g) from the warmed-up surfels."""
    cache = {}
    for view in ctx.views():
        maps = rasterize(cloud, view.camera, RenderMode.UNIFIED, ctx.config.render).maps
        cache[view.index] = SurfelCache(depth=maps.depth.detach(),
                                        normal=normalize(view.camera.directions_to_world(maps.normal.detach())))
    return cache


def build_field(ctx):
    sdf = ctx.config.sdf
    return VoxelSdfField(sdf.resolution, ctx.scene.bounds_min, ctx.scene.bounds_max, sdf.init_radius,
                         sdf.sharpness, ctx.dtype)


def field_step(ctx, iteration, field_, view, cache):
    """One batch of guided rays through the field; gradients written into ``.grad``."""
    sdf, weights = ctx.config.sdf, ctx.config.loss
    camera = view.camera
    dtype = field_.dtype
    flat = torch.randint(camera.height * camera.width, (sdf.rays_per_step,), generator=ctx.generator)
    pixels = torch.stack([flat // camera.width, flat % camera.width], dim=1)
    rows, cols = pixels[:, 0], pixels[:, 1]
    origins, directions = ray_batch(camera, pixels, dtype)
    near, far = ray_range(camera, ctx.scene)
    samples = depth_guided_samples(origins, directions, cache.depth[rows, cols].to(dtype), near, far,
                                   sdf.n_coarse, sdf.n_fine, sdf.band, ctx.generator)
    render = volume_render_ray(field_, samples, sdf.transmittance)
    gt = view.color[rows, cols].to(dtype)

    lo, hi = field_.bounds_min, field_.bounds_max
    points = lo + (hi - lo) * torch.rand(sdf.eikonal_points, 3, generator=ctx.generator, dtype=torch.float64).to(dtype)

    breakdown = LossBreakdown()
    breakdown.add('l_vol_color', l1_loss(render.color, gt), weights.volume_color)
    breakdown.add('eikonal', eikonal_residual(field_, points), weights.eikonal)
    breakdown.add('l_vol_normal', cosine_loss(render.normal, cache.normal[rows, cols].to(dtype), view.mask[rows, cols]),
                  weights.vol)
    if ctx.config.confidence:
        entropy = ray_entropy(render.alphas.detach())
        breakdown.add('l_conf_v', l_conf_volume(render.confidence, render.color, gt, entropy, weights.entropy),
                      weights.conf)
    if not breakdown.is_finite():
        ctx.abort(STAGE2, iteration, breakdown)
    breakdown.total.backward()
    return breakdown


def run_stage2(ctx, cache, field_=None, optimizer=None, start=0):
    """Fit the voxel SDF branch with D_g-guided sampling and N_g distillation; returns the field."""
    if field_ is None:
        field_ = build_field(ctx)
    if optimizer is None:
        optimizer = field_optimizer(field_, ctx.config.optimizer)
    ctx.state.update(field=field_, field_optimizer=optimizer)
    views = ctx.views()
    total = ctx.plan.stage2_iterations
    for iteration in range(start + 1, total + 1):
        view = ctx.pick_view(views)
        breakdown = field_step(ctx, iteration, field_, view, cache[view.index])
        optimizer_step(optimizer, skipped=ctx.skipped)
        ctx.record(STAGE2, iteration, breakdown)
        ctx.save(STAGE2, iteration, complete=iteration == total)
    return field_


@torch.no_grad()
def render_field_view(field_, camera, guide_depth, near, far, sdf_config):
    """Full-resolution volume maps of one view; normals stay in the world frame."""
    origins, directions = ray_batch(camera, None, field_.dtype)
    guide = guide_depth.reshape(-1).to(field_.dtype)
    parts = []
    for begin in range(0, directions.shape[0], sdf_config.render_chunk):
        end = begin + sdf_config.render_chunk
        samples = depth_guided_samples(origins[begin:end], directions[begin:end], guide[begin:end], near, far,
                                       sdf_config.n_coarse, sdf_config.n_fine, sdf_config.band)
        parts.append(volume_render_ray(field_, samples, sdf_config.transmittance))
    H, W = camera.height, camera.width
    return {
        'normal': torch.cat([p.normal for p in parts]).reshape(H, W, 3),
        'confidence': torch.cat([p.confidence for p in parts]).reshape(H, W),
        'color': torch.cat([p.color for p in parts]).reshape(H, W, 3),
        'depth': torch.cat([p.depth for p in parts]).reshape(H, W),
    }


def render_volume_maps(ctx, field_, cache):
    maps = {}
    for view in ctx.views():
        near, far = ray_range(view.camera, ctx.scene)
        maps[view.index] = render_field_view(field_, view.camera, cache[view.index].depth, near, far, ctx.config.sdf)
    return maps


def volume_targets(ctx, volume, iteration):
    """Stage-3 normal supervision per view, in the camera frame."""
    plan = ctx.plan
    targets = {}
    for view in ctx.views():
        entry = volume[view.index]
        normal = to_camera_frame(entry['normal'], view.camera, ctx.dtype)
        confidence = entry['confidence'].to(ctx.dtype)
        if not ctx.config.confidence:
            confidence = torch.ones_like(confidence)
        prior = to_camera_frame(view.prior_normal, view.camera, ctx.dtype)
        targets[view.index] = normal_supervision(iteration, plan.switch_iteration, prior, normal, confidence)
    return targets


def run_stage3(ctx, cloud, field_, volume, ledger=None, start=0):
    """Refine the surfels against F_v ⊙ N_v with the frozen field; the field must not change."""
    plan, config = ctx.plan, ctx.config
    field_.freeze()
    checksum = field_.checksum()
    ledger = _prepare(ctx, cloud, ledger)
    ctx.state.update(field=field_, field_optimizer=None, volume=volume)
    views = ctx.views()
    total = plan.stage3_iterations
    # every stage-3 iteration lies past the switch, so the targets are fixed
    targets = volume_targets(ctx, volume, plan.stage1_iterations + 1)
    weights = schedules.refine_weights(0, plan, config.loss)

    for iteration in range(start + 1, total + 1):
        _update_position_lr(ctx, cloud, iteration, total)
        view = ctx.pick_view(views)
        breakdown = surfel_step(ctx, STAGE3, iteration, cloud, ledger, view, targets[view.index], weights,
                                RenderMode.UNIFIED, adaptive=config.confidence)
        optimizer_step(cloud.optimizer, cloud, ctx.skipped)
        ctx.record(STAGE3, iteration, breakdown)
        ctx.save(STAGE3, iteration, complete=iteration == total)
    if field_.checksum() != checksum:
        raise PreconditionViolation('the SDF field changed during surfel refinement')
    return cloud, ledger


@torch.no_grad()
def core_normal_maps(ctx, cloud):
    """World-frame normal maps of every view rendered from the refined surfels."""
    maps = {}
    for view in ctx.scene.views:
        rendered = rasterize(cloud, view.camera, RenderMode.UNIFIED, ctx.config.render).maps
        maps[view.index] = normalize(view.camera.directions_to_world(rendered.normal.detach())).double()
    return maps


def export_core_normals(ctx, cloud):
    maps = core_normal_maps(ctx, cloud)
    if ctx.out_dir is not None:
        save_normal_maps(maps, Path(ctx.out_dir) / CORE_NORMALS_DIR)
    return maps


def run_management(ctx, normal_maps, cloud=None, ledger=None, start=0):
    """
    Train a fresh surfel model with densification, SH growth and pruning.

    ``normal_maps`` maps each training view index to a world-frame normal
    map (CoRe output or any external source). Returns (cloud, ledger).
    """
    plan, schedule, config = ctx.plan, ctx.schedule, ctx.config
    mode = RenderMode(config.render_mode)
    if cloud is None:
        cloud = initial_cloud(ctx)
        if schedule.fixed_sh_order is not None:
            apply_fixed_order(cloud, schedule.fixed_sh_order)
    ledger = _prepare(ctx, cloud, ledger)
    ctx.state.update(field=None, field_optimizer=None, volume=None)
    views = ctx.views()
    missing = [v.index for v in views if v.index not in normal_maps]
    if missing:
        raise InvalidArgument(f'no supervising normal map for views {missing}')
    targets = {v.index: to_camera_frame(normal_maps[v.index], v.camera, ctx.dtype) for v in views}
    total = plan.manage_iterations

    for iteration in range(start + 1, total + 1):
        _update_position_lr(ctx, cloud, iteration, total)
        view = ctx.pick_view(views)
        breakdown = surfel_step(ctx, MANAGE, iteration, cloud, ledger, view, targets[view.index],
                                schedules.manage_weights(iteration, plan, config.loss), mode, adaptive=False)
        optimizer_step(cloud.optimizer, cloud, ctx.skipped)

        if schedules.densify_due(iteration, plan, schedule):
            grown = densify_step(cloud, ledger, schedule, ctx.extent,
                                 allow_separate=schedules.separate_allowed(iteration, plan), generator=ctx.generator)
            ctx.event(MANAGE, iteration, 'densify', cloned=grown.cloned, split=grown.split,
                      separated=grown.separated, **cloud_totals(cloud))
        if schedules.prune_due(iteration, plan, schedule):
            pruned = prune_step(cloud, ledger, schedule, mode)
            ctx.event(MANAGE, iteration, 'prune', **pruned.as_dict(), **cloud_totals(cloud))
        if schedules.sh_due(iteration, schedule):
            promoted = adaptive_sh_step(cloud, ledger, schedule)
            histogram = torch.bincount(cloud.sh_order, minlength=4).tolist()
            ctx.event(MANAGE, iteration, 'sh', promoted=promoted, orders=histogram,
                      **cloud_totals(cloud))
        ctx.record(MANAGE, iteration, breakdown)
        ctx.save(MANAGE, iteration, complete=iteration == total)
    return cloud, ledger

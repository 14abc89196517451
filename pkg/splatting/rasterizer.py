"""
Tile-based front-to-back compositing of projected surfels.

In separate mode the colour chain (colour, depth, alpha mask) composites
only Common and ColorOnly surfels and the normal chain (normal, confidence)
only Common and NormalOnly surfels. Each chain works on an index subset of
the globally depth-sorted splats, so surfels outside a chain never touch
its arithmetic.
"""
import logging
import math
from dataclasses import dataclass, field

import torch

from surfels.cloud import SurfelCloud
from surfels.types import RenderedMaps, RenderMode, Task

from .projection import DEFAULT_SETTINGS, plane_depth, project_cloud

logger = logging.getLogger(__name__)

COLOR_PASS = 'color'
NORMAL_PASS = 'normal'


@dataclass
class RenderResult:
    maps: RenderedMaps
    splats: object
    contributions: dict
    touched: dict
    mode: str
    camera: object
    cloud: SurfelCloud
    versions: tuple = field(default=())

    def is_current(self):
        params = tuple(self.cloud.parameters().values())
        return len(params) == len(self.versions) and all(
            p is ref and p._version == version for p, (ref, version) in zip(params, self.versions)
        )


def pass_indices(cloud, visible, order, mode):
    """Depth-sorted surfel indices of the colour and normal chains."""
    sorted_visible = order[visible[order]]
    if RenderMode(mode) == RenderMode.UNIFIED:
        return sorted_visible, sorted_visible
    task = cloud.task[sorted_visible]
    color = sorted_visible[task != int(Task.NORMAL_ONLY)]
    normal = sorted_visible[task != int(Task.COLOR_ONLY)]
    return color, normal


def _tile_extents(splats, settings):
    """Half-widths of the region where a splat can exceed alpha_min."""
    opacity = splats.opacity.detach()
    if settings.alpha_min <= 0:
        inf = torch.full_like(opacity, math.inf)
        return inf, inf, torch.ones_like(opacity, dtype=torch.bool)
    ratio = torch.clamp(opacity / settings.alpha_min, min=1.0)
    radius2 = 2.0 * torch.log(ratio)
    cov = splats.cov2d.detach()
    ext_x = torch.sqrt(radius2 * cov[:, 0, 0]) + 1e-3
    ext_y = torch.sqrt(radius2 * cov[:, 1, 1]) + 1e-3
    return ext_x, ext_y, opacity >= settings.alpha_min


def _composite_weights(pix, splats, ids, settings):
    mean = splats.mean2d[ids]
    conic = splats.conic[ids]
    dx = pix[:, None, 0] - mean[None, :, 0]
    dy = pix[:, None, 1] - mean[None, :, 1]
    power = -0.5 * (conic[None, :, 0] * dx * dx + 2.0 * conic[None, :, 1] * dx * dy + conic[None, :, 2] * dy * dy)
    alpha = torch.clamp(splats.opacity[ids][None, :] * torch.exp(power), max=settings.alpha_max)
    alpha = torch.where(alpha < settings.alpha_min, torch.zeros_like(alpha), alpha)
    ones = torch.ones_like(alpha[:, :1])
    transmit = torch.cumprod(torch.cat([ones, 1.0 - alpha[:, :-1]], dim=1), dim=1)
    weights = alpha * transmit
    final_transmit = transmit[:, -1] * (1.0 - alpha[:, -1])
    return alpha, weights, final_transmit


def rasterize(cloud, camera, mode=RenderMode.UNIFIED, settings=DEFAULT_SETTINGS):
    """Render all maps for ``camera`` and report per-chain contribution weights."""
    if not isinstance(cloud, SurfelCloud):
        cloud = SurfelCloud.from_surfels(list(cloud))
    dtype = cloud.dtype
    H, W = camera.height, camera.width
    splats = project_cloud(cloud, camera, settings)
    count = len(cloud)

    order = torch.sort(splats.view_depth.detach(), stable=True).indices
    color_ids, normal_ids = pass_indices(cloud, splats.visible, order, mode)
    shared = color_ids.shape == normal_ids.shape and torch.equal(color_ids, normal_ids)
    ext_x, ext_y, reachable = _tile_extents(splats, settings)
    mx, my = splats.mean2d[:, 0].detach(), splats.mean2d[:, 1].detach()

    centers = camera.pixel_centers(dtype)
    rays = camera.camera_rays(dtype)

    color = torch.zeros(H, W, 3, dtype=dtype)
    depth_sum = torch.zeros(H, W, dtype=dtype)
    color_alpha = torch.zeros(H, W, dtype=dtype)
    normal_sum = torch.zeros(H, W, 3, dtype=dtype)
    confidence = torch.zeros(H, W, dtype=dtype)
    normal_alpha = torch.zeros(H, W, dtype=dtype)

    contribution = {COLOR_PASS: torch.zeros(count, dtype=dtype), NORMAL_PASS: torch.zeros(count, dtype=dtype)}
    touched = {COLOR_PASS: torch.zeros(count, dtype=torch.long), NORMAL_PASS: torch.zeros(count, dtype=torch.long)}

    ts = settings.tile_size
    for y0 in range(0, H, ts):
        y1 = min(y0 + ts, H)
        for x0 in range(0, W, ts):
            x1 = min(x0 + ts, W)
            pix = centers[y0:y1, x0:x1].reshape(-1, 2)
            tile_rays = rays[y0:y1, x0:x1].reshape(-1, 3)

            def in_tile(ids):
                keep = (reachable[ids]
                        & (mx[ids] + ext_x[ids] >= x0 + 0.5) & (mx[ids] - ext_x[ids] <= x1 - 0.5)
                        & (my[ids] + ext_y[ids] >= y0 + 0.5) & (my[ids] - ext_y[ids] <= y1 - 0.5))
                return ids[keep]

            c_ids = in_tile(color_ids)
            n_ids = c_ids if shared else in_tile(normal_ids)
            c_out = _composite_weights(pix, splats, c_ids, settings) if c_ids.numel() else None
            n_out = c_out if shared else (_composite_weights(pix, splats, n_ids, settings) if n_ids.numel() else None)

            if c_out is not None:
                alpha, weights, final_transmit = c_out
                per_pixel_depth = plane_depth(
                    tile_rays[:, None, :], splats.plane_normal[c_ids][None], splats.plane_offset[c_ids][None],
                    splats.view_depth[c_ids][None], splats.depth_range, settings.grazing_eps,
                )
                color[y0:y1, x0:x1] = (weights @ splats.color[c_ids]).reshape(y1 - y0, x1 - x0, 3)
                depth_sum[y0:y1, x0:x1] = (weights * per_pixel_depth).sum(dim=1).reshape(y1 - y0, x1 - x0)
                color_alpha[y0:y1, x0:x1] = (1.0 - final_transmit).reshape(y1 - y0, x1 - x0)
                contribution[COLOR_PASS].index_add_(0, c_ids, weights.detach().sum(dim=0))
                touched[COLOR_PASS].index_add_(0, c_ids, (alpha.detach() > 0).sum(dim=0))

            if n_out is not None:
                alpha, weights, final_transmit = n_out
                normal_sum[y0:y1, x0:x1] = (weights @ splats.normal[n_ids]).reshape(y1 - y0, x1 - x0, 3)
                confidence[y0:y1, x0:x1] = (weights * splats.confidence[n_ids][None]).sum(dim=1).reshape(y1 - y0, x1 - x0)
                normal_alpha[y0:y1, x0:x1] = (1.0 - final_transmit).reshape(y1 - y0, x1 - x0)
                contribution[NORMAL_PASS].index_add_(0, n_ids, weights.detach().sum(dim=0))
                touched[NORMAL_PASS].index_add_(0, n_ids, (alpha.detach() > 0).sum(dim=0))

    eps = settings.coverage_eps
    covered = color_alpha >= eps
    depth = torch.where(covered, depth_sum / torch.where(covered, color_alpha, torch.ones_like(color_alpha)),
                        torch.zeros_like(depth_sum))
    n_covered = normal_alpha >= eps
    normal = normal_sum / torch.where(n_covered, normal_alpha, torch.ones_like(normal_alpha))[..., None]
    length = torch.sqrt(normal[..., 0] ** 2 + normal[..., 1] ** 2 + normal[..., 2] ** 2)
    valid = n_covered & (length > 0)
    normal = torch.where(valid[..., None], normal / torch.where(valid, length, torch.ones_like(length))[..., None],
                         torch.zeros_like(normal))

    for name in (COLOR_PASS, NORMAL_PASS):
        hits = touched[name]
        contribution[name] = torch.where(hits > 0, contribution[name] / hits.clamp(min=1).to(dtype),
                                         torch.zeros_like(contribution[name]))

    maps = RenderedMaps(color=color, depth=depth, normal=normal, confidence=confidence, alpha=color_alpha,
                        extras={'normal_alpha': normal_alpha})
    versions = tuple((p, p._version) for p in cloud.parameters().values())
    return RenderResult(maps=maps, splats=splats, contributions=contribution, touched=touched,
                        mode=RenderMode(mode).value, camera=camera, cloud=cloud, versions=versions)


def render_maps(surfels, camera, mode=RenderMode.UNIFIED, settings=DEFAULT_SETTINGS):
    """Composite colour, depth, normal, confidence and alpha-mask images."""
    return rasterize(surfels, camera, mode, settings).maps

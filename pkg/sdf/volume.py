"""
Volume rendering along ray batches through a ``VoxelSdfField``.
"""
import logging
import math
from dataclasses import dataclass

import torch

from surfels.exceptions import InvalidArgument

from .field import sdf_alpha

logger = logging.getLogger(__name__)

EXP_TRANSMITTANCE = 'exp'
PRODUCT_TRANSMITTANCE = 'product'


@dataclass
class RaySampleSet:
    """Ray origins/directions [R, 3] with sample depths ``t`` [R, n] and intervals ``deltas`` [R, n]."""
    origins: torch.Tensor
    directions: torch.Tensor
    t: torch.Tensor
    deltas: torch.Tensor

    def __post_init__(self):
        if self.t.dim() != 2 or self.t.shape[1] < 2:
            raise InvalidArgument('a ray needs at least two samples')
        if self.deltas.shape != self.t.shape:
            raise InvalidArgument('intervals must match sample depths')

    @property
    def count(self):
        return self.t.shape[1]

    @property
    def positions(self):
        return self.origins[:, None, :] + self.t[..., None] * self.directions[:, None, :]

    def is_increasing(self):
        return bool((self.t[:, 1:] > self.t[:, :-1]).all())


@dataclass
class RayRender:
    color: torch.Tensor
    normal: torch.Tensor
    confidence: torch.Tensor
    depth: torch.Tensor
    weights: torch.Tensor
    alphas: torch.Tensor
    gradients: torch.Tensor


def _deltas(t):
    gaps = t[:, 1:] - t[:, :-1]
    return torch.cat([gaps, gaps[:, -1:]], dim=1)


def composite_samples(alphas, deltas, t, colors, normals=None, confidences=None,
                      transmittance=EXP_TRANSMITTANCE):
    """
    Composite per-sample values front to back.

    ``exp`` transmittance is T_i = exp(−Σ_{j<i} α_j δ_j); ``product`` is
    T_i = Π_{j<i} (1 − α_j). Returns colour, unit normal (zero where nothing
    accumulated), confidence, depth and the weights α_i T_i.
    """
    if transmittance == EXP_TRANSMITTANCE:
        optical = torch.cumsum(alphas * deltas, dim=1)
        T = torch.exp(-torch.cat([torch.zeros_like(optical[:, :1]), optical[:, :-1]], dim=1))
    elif transmittance == PRODUCT_TRANSMITTANCE:
        T = torch.cumprod(torch.cat([torch.ones_like(alphas[:, :1]), 1.0 - alphas[:, :-1]], dim=1), dim=1)
    else:
        raise InvalidArgument(f'unknown transmittance {transmittance!r}')
    weights = alphas * T
    color = (weights[..., None] * colors).sum(dim=1)
    total = weights.sum(dim=1)
    depth = (weights * t).sum(dim=1) / torch.clamp(total, min=1e-8)

    normal = torch.zeros_like(color)
    if normals is not None:
        raw = (weights[..., None] * normals).sum(dim=1)
        length2 = (raw * raw).sum(dim=-1)
        valid = length2 > 0
        length = torch.sqrt(torch.where(valid, length2, torch.ones_like(length2)))
        normal = torch.where(valid[..., None], raw / length[..., None], torch.zeros_like(raw))
    confidence = torch.zeros_like(total)
    if confidences is not None:
        confidence = (weights * confidences).sum(dim=1)
    return color, normal, confidence, depth, weights


def _unit(v):
    length2 = (v * v).sum(dim=-1, keepdim=True)
    valid = length2 > 0
    return torch.where(valid, v / torch.sqrt(torch.where(valid, length2, torch.ones_like(length2))),
                       torch.zeros_like(v))


def volume_render_ray(field, samples, transmittance=EXP_TRANSMITTANCE):
    """
    Render a batch of rays through ``field``.

    Consecutive samples give n − 1 opacities, the last sample gets α = 0.
    """
    x = samples.positions.to(field.dtype)
    value, grad = field.query(x)
    alphas = sdf_alpha(value[:, :-1], value[:, 1:], field.sharpness)
    alphas = torch.cat([alphas, torch.zeros_like(alphas[:, :1])], dim=1)
    colors = field.radiance_at(x)
    confidences = field.confidence_at(x)
    t = samples.t.to(field.dtype)
    color, normal, confidence, depth, weights = composite_samples(
        alphas, samples.deltas.to(field.dtype), t, colors, _unit(grad), confidences, transmittance,
    )
    return RayRender(color=color, normal=normal, confidence=confidence, depth=depth,
                     weights=weights, alphas=alphas, gradients=grad)


def ray_entropy(alphas, normalized=True):
    """
    Concentration score of each ray's opacities [R, n].

    h_j = α_j / Σα, H = 1 − Σ −h_j ln h_j (divided by ln n when ``normalized``).
    Rays with Σα = 0 score 0.
    """
    alphas = torch.as_tensor(alphas)
    if alphas.dim() == 1:
        return ray_entropy(alphas[None], normalized)[0]
    total = alphas.sum(dim=-1, keepdim=True)
    empty = total[..., 0] <= 0
    h = alphas / torch.where(total > 0, total, torch.ones_like(total))
    positive = h > 0
    log_h = torch.log(torch.where(positive, h, torch.ones_like(h)))
    entropy = -(torch.where(positive, h * log_h, torch.zeros_like(h))).sum(dim=-1)
    if normalized:
        entropy = entropy / math.log(alphas.shape[-1])
    return torch.where(empty, torch.zeros_like(entropy), 1.0 - entropy)


def _stratified(near, far, count, rays, generator, dtype):
    edges = torch.linspace(0.0, 1.0, count + 1, dtype=dtype)
    if generator is None:
        u = torch.full((rays, count), 0.5, dtype=dtype)
    else:
        u = torch.rand(rays, count, generator=generator, dtype=dtype)
    fractions = edges[:-1] + (edges[1:] - edges[:-1]) * u
    return near[:, None] + (far - near)[:, None] * fractions


def depth_guided_samples(origins, directions, guide_depth, near, far, n_coarse=32, n_fine=32,
                         band=0.05, generator=None):
    """
    Sample depths along rays, concentrating ``n_fine`` of them near a guide depth.

    Rays whose guide depth is 0 get ``n_coarse + n_fine`` stratified samples
    over [near, far]. Guided rays get ``n_coarse`` stratified samples over
    [near, far] and ``n_fine`` inside [D − band, D + band] (clipped to the
    range), merged and sorted. Without a generator every stratum is sampled
    at its midpoint.
    """
    directions = torch.as_tensor(directions)
    dtype = directions.dtype
    rays = directions.shape[0]
    origins = torch.as_tensor(origins, dtype=dtype).expand(rays, 3)
    guide = torch.as_tensor(guide_depth, dtype=dtype).reshape(rays)
    near_t = torch.full((rays,), float(near), dtype=dtype)
    far_t = torch.full((rays,), float(far), dtype=dtype)

    uniform = _stratified(near_t, far_t, n_coarse + n_fine, rays, generator, dtype)
    coarse = _stratified(near_t, far_t, n_coarse, rays, generator, dtype)
    lo = torch.clamp(guide - band, min=float(near), max=float(far))
    hi = torch.clamp(guide + band, min=float(near), max=float(far))
    fine = _stratified(lo, hi, n_fine, rays, generator, dtype)
    guided = torch.sort(torch.cat([coarse, fine], dim=1), dim=1).values

    t = torch.where((guide > 0)[:, None], guided, uniform)
    # strictly increasing: lift ties and duplicates by a tiny ramp
    step = 8.0 * torch.finfo(dtype).eps * max(abs(float(far)), 1.0)
    ramp = torch.arange(t.shape[1], dtype=dtype) * step
    t = torch.cummax(t - ramp, dim=1).values + ramp
    return RaySampleSet(origins=origins, directions=directions, t=t, deltas=_deltas(t))


def ray_batch(camera, pixels=None, dtype=torch.float32):
    """Origins and world directions (z-scaled, so t is view depth) for ``pixels`` [K, 2] (row, col) or all pixels."""
    origin, dirs = camera.world_rays(torch.float64)
    if pixels is None:
        dirs = dirs.reshape(-1, 3)
    else:
        pixels = torch.as_tensor(pixels, dtype=torch.long)
        dirs = dirs[pixels[:, 0], pixels[:, 1]]
    return origin.to(dtype).expand(dirs.shape[0], 3), dirs.to(dtype)

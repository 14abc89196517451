"""
Trainable voxel fields of the volume branch.

Signed distance, radiance and confidence live on dense grids sampled with
trilinear interpolation. Grid vertex (i, j, k) sits at
``lo + (i, j, k)·(hi − lo)/(R − 1)``; queries outside the box are clamped to
it and take their spatial gradient from the border cell.
"""
import hashlib
import logging
import math

import torch
from torch import nn

from surfels.exceptions import InvalidArgument

logger = logging.getLogger(__name__)

DEFAULT_SHARPNESS = 10.0


def _cell_coordinates(x, lo, hi, resolution):
    g = (x - lo) / (hi - lo) * (resolution - 1)
    g = torch.minimum(torch.maximum(g, torch.zeros_like(g)), torch.full_like(g, resolution - 1))
    base = torch.clamp(torch.floor(g).long(), 0, resolution - 2)
    return base, g - base.to(g.dtype)


def trilinear(grid, x, lo, hi, with_gradient=False):
    """
    Interpolate ``grid`` ([R, R, R] or [R, R, R, C]) at points ``x`` [..., 3].

    With ``with_gradient`` also returns the analytic spatial derivative
    [..., 3] (scalar grids) or [..., C, 3].
    """
    resolution = grid.shape[0]
    lo = lo.to(x.dtype)
    hi = hi.to(x.dtype)
    base, frac = _cell_coordinates(x.detach(), lo, hi, resolution)
    ix, iy, iz = base.unbind(-1)
    fx, fy, fz = frac.unbind(-1)
    if grid.dim() == 4:
        fx, fy, fz = fx[..., None], fy[..., None], fz[..., None]

    c000 = grid[ix, iy, iz]
    c100 = grid[ix + 1, iy, iz]
    c010 = grid[ix, iy + 1, iz]
    c110 = grid[ix + 1, iy + 1, iz]
    c001 = grid[ix, iy, iz + 1]
    c101 = grid[ix + 1, iy, iz + 1]
    c011 = grid[ix, iy + 1, iz + 1]
    c111 = grid[ix + 1, iy + 1, iz + 1]

    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    value = c0 * (1 - fz) + c1 * fz
    if not with_gradient:
        return value

    scale = (resolution - 1) / (hi - lo)
    dx = ((c100 - c000) * (1 - fy) * (1 - fz) + (c110 - c010) * fy * (1 - fz)
          + (c101 - c001) * (1 - fy) * fz + (c111 - c011) * fy * fz) * scale[0]
    dy = (c10 - c00) * (1 - fz) + (c11 - c01) * fz
    dy = dy * scale[1]
    dz = (c1 - c0) * scale[2]
    return value, torch.stack([dx, dy, dz], dim=-1)


def sphere_grid(resolution, lo, hi, radius, center=None, dtype=torch.float32):
    """Exact signed distance to a sphere sampled at every grid vertex."""
    lo = torch.as_tensor(lo, dtype=torch.float64)
    hi = torch.as_tensor(hi, dtype=torch.float64)
    if center is None:
        center = 0.5 * (lo + hi)
    axes = [torch.linspace(float(lo[a]), float(hi[a]), resolution, dtype=torch.float64) for a in range(3)]
    gx, gy, gz = torch.meshgrid(*axes, indexing='ij')
    points = torch.stack([gx, gy, gz], dim=-1)
    return (torch.linalg.norm(points - torch.as_tensor(center, dtype=torch.float64), dim=-1) - radius).to(dtype)


class VoxelSdfField(nn.Module):
    """
    Signed distance, radiance and confidence grids plus the sigmoid sharpness.

    Radiance is stored as logits (sigmoid on read) and confidence as logits on
    a grid of half the resolution. Sharpness is trained in log space.
    """

    def __init__(self, resolution=64, bounds_min=(-1.0, -1.0, -1.0), bounds_max=(1.0, 1.0, 1.0),
                 init_radius=None, sharpness=DEFAULT_SHARPNESS, dtype=torch.float32):
        super().__init__()
        if resolution < 2:
            raise InvalidArgument('grid resolution must be at least 2')
        if sharpness <= 0:
            raise InvalidArgument('sharpness must be positive')
        lo = torch.as_tensor(bounds_min, dtype=torch.float64)
        hi = torch.as_tensor(bounds_max, dtype=torch.float64)
        if not bool((hi > lo).all()):
            raise InvalidArgument('bounds_max must exceed bounds_min on every axis')
        self.resolution = int(resolution)
        self.register_buffer('bounds_min', lo.to(dtype))
        self.register_buffer('bounds_max', hi.to(dtype))
        if init_radius is None:
            init_radius = 0.5 * float(torch.min(hi - lo)) / 2.0
        self.sdf = nn.Parameter(sphere_grid(resolution, lo, hi, init_radius, dtype=dtype))
        self.radiance = nn.Parameter(torch.zeros(resolution, resolution, resolution, 3, dtype=dtype))
        half = max(2, resolution // 2)
        self.confidence = nn.Parameter(torch.zeros(half, half, half, dtype=dtype))
        self.log_sharpness = nn.Parameter(torch.tensor(math.log(sharpness), dtype=dtype))

    @property
    def sharpness(self):
        return torch.exp(self.log_sharpness)

    @property
    def cell_size(self):
        return float(torch.max(self.bounds_max - self.bounds_min)) / (self.resolution - 1)

    @property
    def dtype(self):
        return self.sdf.dtype

    def query(self, x):
        """Interpolated signed distance and its spatial gradient at ``x`` [..., 3]."""
        return trilinear(self.sdf, x, self.bounds_min, self.bounds_max, with_gradient=True)

    def distance(self, x):
        return trilinear(self.sdf, x, self.bounds_min, self.bounds_max)

    def radiance_at(self, x):
        return torch.sigmoid(trilinear(self.radiance, x, self.bounds_min, self.bounds_max))

    def confidence_at(self, x):
        return torch.sigmoid(trilinear(self.confidence, x, self.bounds_min, self.bounds_max))

    def vertex_positions(self):
        axes = [torch.linspace(float(self.bounds_min[a]), float(self.bounds_max[a]), self.resolution,
                               dtype=torch.float64) for a in range(3)]
        return torch.stack(torch.meshgrid(*axes, indexing='ij'), dim=-1)

    def checksum(self):
        """SHA-256 over every parameter's bytes."""
        digest = hashlib.sha256()
        for name, tensor in sorted(self.state_dict().items()):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def sdf_query(field, x):
    """(value, gradient) of the interpolated SDF at a single point or a batch."""
    x = torch.as_tensor(x, dtype=field.dtype)
    return field.query(x)


def sdf_alpha(s_i, s_next, sharpness):
    """
    Discrete opacity between two consecutive SDF samples.

    α = max((σ(s·S_i) − σ(s·S_{i+1})) / σ(s·S_i), 0), kept strictly below 1.
    """
    prev_cdf = torch.sigmoid(s_i * sharpness)
    next_cdf = torch.sigmoid(s_next * sharpness)
    alpha = (prev_cdf - next_cdf) / torch.clamp(prev_cdf, min=1e-12)
    ceiling = 1.0 - torch.finfo(alpha.dtype).eps
    return torch.clamp(alpha, min=0.0, max=ceiling)


def alpha_from_sdf(field, x_i, x_next):
    """Opacity of the segment [x_i, x_next] under the field's current SDF and sharpness."""
    return sdf_alpha(field.distance(torch.as_tensor(x_i, dtype=field.dtype)),
                     field.distance(torch.as_tensor(x_next, dtype=field.dtype)), field.sharpness)


def eikonal_residual(field, points):
    """Mean of (‖∇S(x)‖ − 1)² over ``points`` [..., 3]."""
    _, grad = field.query(torch.as_tensor(points, dtype=field.dtype))
    squared = (grad * grad).sum(dim=-1)
    nonzero = squared > 0
    norm = torch.where(nonzero, torch.sqrt(torch.where(nonzero, squared, torch.ones_like(squared))),
                       torch.zeros_like(squared))
    return ((norm - 1.0) ** 2).mean()

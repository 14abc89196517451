"""
Ground-truth generation for synthetic scenes.

Cameras sit on a ring around the origin and every pixel ray is sphere-traced
against the analytic union of shapes. The oracle returns colour, view depth,
world-space normal, hit mask and a prior normal map per view; the prior is
the ground-truth normal unless noise or a corrupted region is requested.
"""
import logging
import math
from dataclasses import dataclass, field

import torch

from surfels.exceptions import InvalidArgument
from surfels.transforms import axis_angle_quaternion, quaternion_to_matrix
from surfels.types import Camera

from .shapes import Sphere, Union

logger = logging.getLogger(__name__)

TRAIN = 'train'
TEST = 'test'


@dataclass(frozen=True)
class CameraRing:
    count: int = 8
    radius: float = 3.0
    elevation: float = 20.0
    mirror_elevation: bool = False
    width: int = 64
    height: int = 64
    fov: float = 40.0
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        if self.count < 1:
            raise InvalidArgument('a camera ring needs at least one camera')
        if self.width < 1 or self.height < 1:
            raise InvalidArgument('resolution must be positive')
        if not 0 < self.near < self.far:
            raise InvalidArgument('near/far planes must satisfy 0 < near < far')


@dataclass(frozen=True)
class NormalCorruption:
    """Rotate prior normals inside a pixel rectangle by a fixed angle about a seeded random axis."""
    rows: tuple = (0, 0)
    cols: tuple = (0, 0)
    angle: float = 60.0
    views: tuple = ()

    def applies_to(self, index):
        return not self.views or index in self.views


@dataclass(frozen=True)
class SceneSpec:
    shapes: tuple = (Sphere(),)
    ring: CameraRing = field(default_factory=CameraRing)
    light_direction: tuple = (0.3, 0.8, 0.5)
    ambient: float = 0.2
    seed: int = 0
    test_every: int = 0
    prior_noise: float = 0.0
    corruption: NormalCorruption = None
    max_steps: int = 256
    hit_epsilon: float = 1e-7

    def __post_init__(self):
        if not self.shapes:
            raise InvalidArgument('a scene needs at least one shape')
        if not 0.0 <= self.ambient <= 1.0:
            raise InvalidArgument('ambient term must lie in [0, 1]')

    @property
    def surface(self):
        return Union(self.shapes)

    def bounds(self, padding=0.1):
        lo, hi = self.surface.bounds()
        pad = padding * float(torch.max(hi - lo))
        return lo - pad, hi + pad


@dataclass
class SyntheticView:
    index: int
    camera: Camera
    color: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    mask: torch.Tensor
    prior_normal: torch.Tensor
    split: str = TRAIN


@dataclass
class SyntheticScene:
    spec: SceneSpec
    views: list
    bounds_min: torch.Tensor
    bounds_max: torch.Tensor

    @property
    def train_views(self):
        return [v for v in self.views if v.split == TRAIN]

    @property
    def test_views(self):
        return [v for v in self.views if v.split == TEST]

    @property
    def extent(self):
        """Half diagonal of the scene box, the length unit of the densification thresholds."""
        return 0.5 * float(torch.linalg.norm(self.bounds_max - self.bounds_min))


def ring_cameras(ring):
    """Cameras evenly spaced in azimuth, all looking at the origin with +y up."""
    cameras = []
    for k in range(ring.count):
        azimuth = 2.0 * math.pi * k / ring.count
        elevation = -ring.elevation if ring.mirror_elevation and k % 2 else ring.elevation
        elevation = math.radians(elevation)
        eye = (ring.radius * math.cos(elevation) * math.sin(azimuth),
               ring.radius * math.sin(elevation),
               ring.radius * math.cos(elevation) * math.cos(azimuth))
        cameras.append(Camera.from_fov(ring.fov, ring.width, ring.height, Camera.look_at(eye),
                                       near=ring.near, far=ring.far))
    return cameras


def sphere_trace(surface, origin, directions, near, far, max_steps=256, epsilon=1e-7):
    """
    March unit-direction rays until the surface distance drops below ``epsilon``.

    Returns the travelled distance and a hit mask; rays that leave [near, far]
    or run out of steps are misses.
    """
    t = torch.full(directions.shape[:-1], float(near), dtype=directions.dtype)
    active = torch.ones_like(t, dtype=torch.bool)
    hit = torch.zeros_like(active)
    for _ in range(max_steps):
        d = surface.distance(origin + t[..., None] * directions)
        landed = active & (d < epsilon)
        hit |= landed
        active &= ~landed
        t = torch.where(active, t + d, t)
        active &= t < far
        if not bool(active.any()):
            break
    return t, hit


def shade(normal, view_dir, light_dir, albedo, specular, shininess, ambient):
    """Lambertian term plus k_s·max(0, reflect·view)^n, clipped to [0, 1]."""
    n_dot_l = (normal * light_dir).sum(dim=-1, keepdim=True)
    diffuse = albedo * (ambient + (1.0 - ambient) * n_dot_l.clamp(min=0.0))
    reflected = 2.0 * n_dot_l * normal - light_dir
    lobe = (reflected * view_dir).sum(dim=-1, keepdim=True).clamp(min=0.0)
    highlight = specular * torch.pow(lobe, shininess)
    return (diffuse + highlight).clamp(0.0, 1.0)


def rotate_vectors(vectors, axis, angle):
    R = quaternion_to_matrix(axis_angle_quaternion(axis, angle).to(vectors.dtype))
    return vectors @ R.T


def corrupt_normals(normals, mask, rows, cols, angle_degrees, axis):
    """Copy of ``normals`` with hit pixels inside rows × cols rotated about ``axis``."""
    region = torch.zeros_like(mask)
    region[rows[0]:rows[1], cols[0]:cols[1]] = True
    region &= mask
    rotated = rotate_vectors(normals, axis, math.radians(angle_degrees))
    return torch.where(region[..., None], rotated, normals)


def _materials(spec, dtype):
    albedo = torch.tensor([s.material.albedo for s in spec.shapes], dtype=dtype)
    specular = torch.tensor([s.material.specular for s in spec.shapes], dtype=dtype)
    shininess = torch.tensor([s.material.shininess for s in spec.shapes], dtype=dtype)
    return albedo, specular, shininess


def render_view(spec, camera, dtype=torch.float64):
    """Sphere-traced colour, depth, normal and mask for one camera."""
    surface = spec.surface
    origin, rays = camera.world_rays(dtype)
    ray_length = torch.linalg.norm(rays, dim=-1)
    directions = rays / ray_length[..., None]
    distance, hit = sphere_trace(surface, origin, directions, camera.near * float(ray_length.min()),
                                 camera.far * float(ray_length.max()), spec.max_steps, spec.hit_epsilon)
    points = origin + distance[..., None] * directions
    normal = torch.where(hit[..., None], surface.gradient(points), torch.zeros_like(points))
    depth = torch.where(hit, distance / ray_length, torch.zeros_like(distance))

    albedo, specular, shininess = _materials(spec, dtype)
    material = surface.closest(points)
    light = torch.as_tensor(spec.light_direction, dtype=dtype)
    light = light / torch.linalg.norm(light)
    color = shade(normal, -directions, light, albedo[material], specular[material][..., None],
                  shininess[material][..., None], spec.ambient)
    color = torch.where(hit[..., None], color, torch.zeros_like(color))
    return color, depth, normal, hit


def generate_scene(spec):
    """Ground-truth bundles for every camera of ``spec``; deterministic given its seed."""
    generator = torch.Generator().manual_seed(int(spec.seed))
    views = []
    for index, camera in enumerate(ring_cameras(spec.ring)):
        color, depth, normal, mask = render_view(spec, camera)
        prior = normal
        if spec.prior_noise > 0:
            noise = spec.prior_noise * torch.randn(normal.shape, generator=generator, dtype=normal.dtype)
            noisy = normal + noise
            noisy = noisy / torch.linalg.norm(noisy, dim=-1, keepdim=True).clamp(min=1e-12)
            prior = torch.where(mask[..., None], noisy, normal)
        if spec.corruption is not None and spec.corruption.applies_to(index):
            axis = torch.randn(3, generator=generator, dtype=torch.float64)
            prior = corrupt_normals(prior, mask, spec.corruption.rows, spec.corruption.cols,
                                    spec.corruption.angle, axis / torch.linalg.norm(axis))
        split = TEST if spec.test_every and index % spec.test_every == 0 else TRAIN
        views.append(SyntheticView(index=index, camera=camera, color=color, depth=depth, normal=normal,
                                   mask=mask, prior_normal=prior, split=split))
        logger.debug('view %d: %d hit pixels', index, int(mask.sum()))
    lo, hi = spec.bounds()
    logger.info('generated %d views (%d held out)', len(views), sum(v.split == TEST for v in views))
    return SyntheticScene(spec=spec, views=views, bounds_min=lo, bounds_max=hi)

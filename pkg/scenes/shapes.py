"""
Analytic signed distance functions for the synthetic scenes.

Every shape returns exact distances and unit gradients for [..., 3] point
tensors. A union keeps the gradient and material of its closest member.
"""
from dataclasses import dataclass, field

import torch

from surfels.exceptions import InvalidArgument

SPHERE = 'sphere'
BOX = 'box'
SHAPE_KINDS = (SPHERE, BOX)


@dataclass(frozen=True)
class Material:
    """Lambertian albedo with an optional Phong-style specular lobe."""
    albedo: tuple = (0.7, 0.7, 0.7)
    specular: float = 0.0
    shininess: float = 32.0


@dataclass(frozen=True)
class Sphere:
    center: tuple = (0.0, 0.0, 0.0)
    radius: float = 0.5
    material: Material = field(default_factory=Material)

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidArgument('sphere radius must be positive')

    def distance(self, points):
        offset = points - torch.as_tensor(self.center, dtype=points.dtype)
        return torch.linalg.norm(offset, dim=-1) - self.radius

    def gradient(self, points):
        offset = points - torch.as_tensor(self.center, dtype=points.dtype)
        length = torch.linalg.norm(offset, dim=-1, keepdim=True)
        up = torch.zeros_like(offset)
        up[..., 2] = 1.0
        return torch.where(length > 0, offset / length.clamp(min=1e-300), up)

    def bounds(self):
        c = torch.as_tensor(self.center, dtype=torch.float64)
        return c - self.radius, c + self.radius

    def area(self):
        return 4.0 * torch.pi * self.radius ** 2

    def surface_samples(self, count, generator=None):
        dirs = torch.randn(count, 3, generator=generator, dtype=torch.float64)
        dirs = dirs / torch.linalg.norm(dirs, dim=-1, keepdim=True)
        return torch.as_tensor(self.center, dtype=torch.float64) + self.radius * dirs


@dataclass(frozen=True)
class Box:
    center: tuple = (0.0, 0.0, 0.0)
    half_extents: tuple = (0.25, 0.25, 0.25)
    material: Material = field(default_factory=Material)

    def __post_init__(self):
        if min(self.half_extents) <= 0:
            raise InvalidArgument('box half extents must be positive')

    def _local(self, points):
        offset = points - torch.as_tensor(self.center, dtype=points.dtype)
        return offset, offset.abs() - torch.as_tensor(self.half_extents, dtype=points.dtype)

    def distance(self, points):
        _, q = self._local(points)
        outside = torch.linalg.norm(q.clamp(min=0.0), dim=-1)
        inside = torch.max(q, dim=-1).values.clamp(max=0.0)
        return outside + inside

    def gradient(self, points):
        offset, q = self._local(points)
        sign = torch.where(offset < 0, -torch.ones_like(offset), torch.ones_like(offset))
        positive = q.clamp(min=0.0)
        length = torch.linalg.norm(positive, dim=-1, keepdim=True)
        outside = sign * positive / length.clamp(min=1e-300)
        axis = torch.argmax(q, dim=-1, keepdim=True)
        inside = sign * torch.zeros_like(q).scatter(-1, axis, 1.0)
        return torch.where(length > 0, outside, inside)

    def bounds(self):
        c = torch.as_tensor(self.center, dtype=torch.float64)
        h = torch.as_tensor(self.half_extents, dtype=torch.float64)
        return c - h, c + h

    def area(self):
        x, y, z = self.half_extents
        return 8.0 * (x * y + y * z + z * x)

    def surface_samples(self, count, generator=None):
        """Area-uniform samples on the six faces."""
        h = torch.as_tensor(self.half_extents, dtype=torch.float64)
        face_areas = torch.stack([h[1] * h[2], h[0] * h[2], h[0] * h[1]]).repeat_interleave(2)
        faces = torch.multinomial(face_areas, count, replacement=True, generator=generator)
        uv = 2.0 * torch.rand(count, 3, generator=generator, dtype=torch.float64) - 1.0
        points = uv * h
        axis = faces // 2
        side = 1.0 - 2.0 * (faces % 2).to(torch.float64)
        points[torch.arange(count), axis] = side * h[axis]
        return torch.as_tensor(self.center, dtype=torch.float64) + points


class Union:
    """Hard union of primitives; the closest member decides gradient and material."""

    def __init__(self, shapes):
        self.shapes = tuple(shapes)
        if not self.shapes:
            raise InvalidArgument('a scene needs at least one shape')

    def _all(self, points):
        return torch.stack([shape.distance(points) for shape in self.shapes], dim=-1)

    def closest(self, points):
        return torch.argmin(self._all(points), dim=-1)

    def distance(self, points):
        return torch.min(self._all(points), dim=-1).values

    def gradient(self, points):
        index = self.closest(points)
        grads = torch.stack([shape.gradient(points) for shape in self.shapes], dim=-2)
        return torch.gather(grads, -2, index[..., None, None].expand(*index.shape, 1, 3)).squeeze(-2)

    def bounds(self):
        lows, highs = zip(*(shape.bounds() for shape in self.shapes))
        return torch.stack(lows).min(dim=0).values, torch.stack(highs).max(dim=0).values

    def surface_samples(self, count, generator=None, tolerance=1e-9):
        """Samples on the union's boundary: member surfaces minus the parts buried in other members."""
        areas = torch.tensor([shape.area() for shape in self.shapes], dtype=torch.float64)
        picks = torch.multinomial(areas, count, replacement=True, generator=generator)
        parts = []
        for index, shape in enumerate(self.shapes):
            wanted = int((picks == index).sum())
            if wanted:
                parts.append(shape.surface_samples(wanted, generator))
        points = torch.cat(parts)
        return points[self.distance(points) >= -tolerance]


def build_shape(kind, material=None, **geometry):
    material = material or Material()
    if kind == SPHERE:
        return Sphere(center=tuple(geometry.get('center', (0.0, 0.0, 0.0))),
                      radius=float(geometry.get('radius', 0.5)), material=material)
    if kind == BOX:
        return Box(center=tuple(geometry.get('center', (0.0, 0.0, 0.0))),
                   half_extents=tuple(geometry.get('half_extents', (0.25, 0.25, 0.25))), material=material)
    raise InvalidArgument(f'unknown shape kind {kind!r}')

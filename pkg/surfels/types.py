"""
Value types shared by all apps: single surfels, pinhole cameras and rendered maps.
"""
from dataclasses import dataclass, field, fields

import numpy as np
import torch
from django.db import models

from .exceptions import InvalidArgument
from .sh import sh_coeff_count
from .transforms import surfel_normal


class Task(models.IntegerChoices):
    """Which rendering passes a surfel takes part in"""
    COMMON = 0, 'Common'
    COLOR_ONLY = 1, 'Color only'
    NORMAL_ONLY = 2, 'Normal only'


class RenderMode(models.TextChoices):
    UNIFIED = 'unified', 'Unified'
    SEPARATE = 'separate', 'Separate'


def _logit(p):
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    return float(np.log(p / (1.0 - p)))


def _sigmoid(x):
    return float(1.0 / (1.0 + np.exp(-x)))


@dataclass(frozen=True)
class Surfel:
    """A single flattened Gaussian with activated scale and pre-activation opacity/confidence."""
    center: np.ndarray
    rotation: np.ndarray
    scale: np.ndarray
    opacity_logit: float
    sh: np.ndarray
    sh_order: int = 0
    confidence_logit: float = 0.0
    task: Task = Task.COMMON

    def __post_init__(self):
        object.__setattr__(self, 'center', np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, 'rotation', np.asarray(self.rotation, dtype=np.float64).reshape(4))
        object.__setattr__(self, 'scale', np.asarray(self.scale, dtype=np.float64).reshape(2))
        object.__setattr__(self, 'sh', np.asarray(self.sh, dtype=np.float64).reshape(-1))
        object.__setattr__(self, 'task', Task(self.task))
        if abs(np.linalg.norm(self.rotation) - 1.0) > 1e-6:
            raise InvalidArgument('rotation quaternion must have unit norm')
        if np.any(self.scale <= 0):
            raise InvalidArgument('surfel scales must be positive')
        if self.sh.size != sh_coeff_count(self.sh_order):
            raise InvalidArgument(
                f'order {self.sh_order} needs {sh_coeff_count(self.sh_order)} SH scalars, got {self.sh.size}'
            )

    @classmethod
    def create(cls, center, rotation=(1.0, 0.0, 0.0, 0.0), scale=(0.1, 0.1), opacity=0.5,
               sh=None, sh_order=0, confidence=0.5, task=Task.COMMON):
        """Build from activated opacity and confidence values."""
        if sh is None:
            sh = np.zeros(sh_coeff_count(sh_order))
        return cls(center=center, rotation=rotation, scale=scale, opacity_logit=_logit(opacity),
                   sh=sh, sh_order=sh_order, confidence_logit=_logit(confidence), task=task)

    @property
    def opacity(self):
        return _sigmoid(self.opacity_logit)

    @property
    def confidence(self):
        return _sigmoid(self.confidence_logit)

    @property
    def normal(self):
        return surfel_normal(torch.as_tensor(self.rotation)).numpy()


@dataclass
class Camera:
    """
    Pinhole camera in OpenCV convention (x right, y down, z forward).

    Pixel (row i, column j) has its center at image coordinates (j + 0.5, i + 0.5).
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_camera: torch.Tensor
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        self.world_to_camera = torch.as_tensor(self.world_to_camera, dtype=torch.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgument('focal lengths must be positive')
        if self.width <= 0 or self.height <= 0:
            raise InvalidArgument('resolution must be positive')
        if not 0 < self.near < self.far:
            raise InvalidArgument('near/far planes must satisfy 0 < near < far')
        R = self.rotation
        if float(torch.max(torch.abs(R @ R.T - torch.eye(3, dtype=R.dtype)))) > 1e-6:
            raise InvalidArgument('world-to-camera rotation is not orthonormal')

    @classmethod
    def from_fov(cls, fov_degrees, width, height, world_to_camera, near=0.05, far=100.0):
        focal = 0.5 * width / np.tan(np.radians(fov_degrees) / 2)
        return cls(fx=float(focal), fy=float(focal), cx=width / 2, cy=height / 2,
                   width=width, height=height, world_to_camera=world_to_camera, near=near, far=far)

    @staticmethod
    def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
        """World-to-camera matrix for a camera at ``eye`` looking at ``target``."""
        eye = torch.as_tensor(eye, dtype=torch.float64)
        target = torch.as_tensor(target, dtype=torch.float64)
        up = torch.as_tensor(up, dtype=torch.float64)
        forward = target - eye
        forward = forward / torch.linalg.norm(forward)
        right = torch.linalg.cross(forward, up)
        if float(torch.linalg.norm(right)) < 1e-8:
            right = torch.linalg.cross(forward, torch.tensor([0.0, 0.0, 1.0], dtype=torch.float64))
        right = right / torch.linalg.norm(right)
        down = torch.linalg.cross(forward, right)
        R = torch.stack([right, down, forward])
        matrix = torch.eye(4, dtype=torch.float64)
        matrix[:3, :3] = R
        matrix[:3, 3] = -R @ eye
        return matrix

    @property
    def rotation(self):
        return self.world_to_camera[:3, :3]

    @property
    def translation(self):
        return self.world_to_camera[:3, 3]

    @property
    def center(self):
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def pixel_centers(self, dtype=torch.float64):
        """[H, W, 2] image coordinates (u, v) of every pixel center."""
        v, u = torch.meshgrid(
            torch.arange(self.height, dtype=dtype) + 0.5,
            torch.arange(self.width, dtype=dtype) + 0.5,
            indexing='ij',
        )
        return torch.stack([u, v], dim=-1)

    def camera_rays(self, dtype=torch.float64):
        """[H, W, 3] camera-frame ray directions scaled so their z component is 1."""
        uv = self.pixel_centers(dtype)
        x = (uv[..., 0] - self.cx) / self.fx
        y = (uv[..., 1] - self.cy) / self.fy
        return torch.stack([x, y, torch.ones_like(x)], dim=-1)

    def world_rays(self, dtype=torch.float64):
        """Ray origin [3] and [H, W, 3] world directions; the ray parameter equals view depth."""
        dirs = self.camera_rays(torch.float64) @ self.rotation
        return self.center.to(dtype), dirs.to(dtype)

    def to_camera(self, points):
        R = self.rotation.to(points.dtype)
        t = self.translation.to(points.dtype)
        return points @ R.T + t

    def directions_to_camera(self, directions):
        return directions @ self.rotation.to(directions.dtype).T

    def directions_to_world(self, directions):
        return directions @ self.rotation.to(directions.dtype)

    def intrinsics_row(self):
        return [self.fx, self.fy, self.cx, self.cy, self.width, self.height, self.near, self.far]


@dataclass
class RenderedMaps:
    """Per-view maps produced by either branch."""
    color: torch.Tensor
    depth: torch.Tensor
    normal: torch.Tensor
    confidence: torch.Tensor
    alpha: torch.Tensor
    extras: dict = field(default_factory=dict)

    def detach(self):
        return RenderedMaps(**{f.name: getattr(self, f.name).detach() for f in fields(self) if f.name != 'extras'})

    def is_finite(self):
        return all(bool(torch.isfinite(getattr(self, f.name)).all()) for f in fields(self) if f.name != 'extras')

"""
Evaluation metrics: PSNR, SSIM, Chamfer distance, normal error and model size.
"""
import math

import numpy as np
import torch
from scipy.spatial import cKDTree

from objectives.image import ssim
from surfels.cloud import SurfelCloud
from surfels.exceptions import InvalidArgument
from surfels.ply import ply_bytes
from surfels.types import Task

BASIC_SCALARS = 11

__all__ = ['psnr', 'ssim', 'chamfer', 'extract_points', 'model_size', 'angular_error', 'sphere_samples']


def psnr(a, b):
    """10·log10(1 / MSE) for images in [0, 1]; identical images give ``math.inf``."""
    a = torch.as_tensor(a, dtype=torch.float64)
    b = torch.as_tensor(b, dtype=torch.float64)
    if a.shape != b.shape:
        raise InvalidArgument(f'image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}')
    mse = float(torch.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _points(points, name):
    points = np.asarray(points.detach().cpu().numpy() if hasattr(points, 'detach') else points, dtype=np.float64)
    points = points.reshape(-1, 3)
    if points.shape[0] == 0:
        raise InvalidArgument(f'{name} point set is empty')
    return points


def chamfer(a, b):
    """Symmetric mean nearest-neighbour distance, 0.5·(mean_A d(a, B) + mean_B d(b, A))."""
    a, b = _points(a, 'first'), _points(b, 'second')
    a_to_b, _ = cKDTree(b).query(a, k=1)
    b_to_a, _ = cKDTree(a).query(b, k=1)
    return 0.5 * (float(np.mean(a_to_b)) + float(np.mean(b_to_a)))


def extract_points(surfels, opacity_floor=0.5):
    """Centers of normal-pass surfels (Common and NormalOnly) with opacity ≥ ``opacity_floor``."""
    cloud = surfels if isinstance(surfels, SurfelCloud) else SurfelCloud.from_surfels(list(surfels))
    keep = cloud.task_mask(Task.COMMON, Task.NORMAL_ONLY) & (cloud.get_opacity.detach() >= opacity_floor)
    return cloud.get_xyz.detach()[keep].double().numpy()


def model_size(surfels):
    """(serialized PLY bytes, scalar parameter count); the count is 11 + 3(d+1)² per surfel."""
    cloud = surfels if isinstance(surfels, SurfelCloud) else SurfelCloud.from_surfels(list(surfels))
    if len(cloud) == 0:
        return 0, 0
    scalars = BASIC_SCALARS * len(cloud) + cloud.sh_scalar_count()
    return len(ply_bytes(cloud)), scalars


def angular_error(normals, reference, mask=None):
    """Mean angle in degrees between unit normal maps over ``mask`` pixels."""
    normals = torch.as_tensor(normals, dtype=torch.float64)
    reference = torch.as_tensor(reference, dtype=torch.float64)
    if normals.shape != reference.shape:
        raise InvalidArgument('normal maps differ in shape')
    cosine = (normals * reference).sum(dim=-1).clamp(-1.0, 1.0)
    angles = torch.rad2deg(torch.acos(cosine))
    if mask is not None:
        angles = angles[torch.as_tensor(mask, dtype=torch.bool)]
    if angles.numel() == 0:
        return 0.0
    return float(angles.mean())


def sphere_samples(center, radius, count):
    """Fibonacci-lattice points on a sphere surface."""
    i = np.arange(count, dtype=np.float64) + 0.5
    polar = np.arccos(1.0 - 2.0 * i / count)
    azimuth = math.pi * (1.0 + math.sqrt(5.0)) * i
    unit = np.stack([np.cos(azimuth) * np.sin(polar), np.sin(azimuth) * np.sin(polar), np.cos(polar)], axis=1)
    return np.asarray(center, dtype=np.float64) + radius * unit

"""
SDF grid files and zero-level-set point samples.

Grid file layout (little-endian): magic ``SDFGRID1``, uint32 resolution,
6 float64 bounds (min xyz, max xyz), float64 sharpness, then R³ float32
signed distances in (x, y, z) index order.
"""
import logging
import struct

import numpy as np
import torch
from plyfile import PlyData, PlyElement

from surfels.exceptions import InvalidArgument

from .field import VoxelSdfField

logger = logging.getLogger(__name__)

GRID_MAGIC = b'SDFGRID1'
_HEADER = struct.Struct('<8sI6dd')


def save_grid(field, path):
    lo = field.bounds_min.detach().double().tolist()
    hi = field.bounds_max.detach().double().tolist()
    header = _HEADER.pack(GRID_MAGIC, field.resolution, *lo, *hi, float(field.sharpness))
    values = field.sdf.detach().cpu().numpy().astype('<f4')
    with open(path, 'wb') as handle:
        handle.write(header)
        handle.write(values.tobytes())


def load_grid(path, dtype=torch.float32):
    """Rebuild a field from a grid file; radiance and confidence grids start at their defaults."""
    with open(path, 'rb') as handle:
        data = handle.read()
    if len(data) < _HEADER.size:
        raise InvalidArgument(f'{path} is too short for an SDF grid header')
    magic, resolution, *rest = _HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise InvalidArgument(f'{path} is not an SDF grid file')
    lo, hi, sharpness = rest[:3], rest[3:6], rest[6]
    expected = resolution ** 3 * 4
    payload = data[_HEADER.size:]
    if len(payload) != expected:
        raise InvalidArgument(f'{path} holds {len(payload)} bytes of grid data, expected {expected}')
    field = VoxelSdfField(resolution, lo, hi, sharpness=sharpness, dtype=dtype)
    values = np.frombuffer(payload, dtype='<f4').reshape(resolution, resolution, resolution)
    with torch.no_grad():
        field.sdf.copy_(torch.as_tensor(values.copy(), dtype=dtype))
    return field


def level_set_points(field, level=0.0):
    """
    Points where the interpolated SDF crosses ``level`` along grid edges.

    Each edge whose endpoint values straddle the level contributes the
    linearly interpolated crossing.
    """
    values = field.sdf.detach().double().numpy() - level
    positions = field.vertex_positions().numpy()
    points = []
    for axis in range(3):
        head = [slice(None)] * 3
        tail = [slice(None)] * 3
        head[axis] = slice(None, -1)
        tail[axis] = slice(1, None)
        a, b = values[tuple(head)], values[tuple(tail)]
        crossing = (a < 0) != (b < 0)
        if not crossing.any():
            continue
        pa, pb = positions[tuple(head)][crossing], positions[tuple(tail)][crossing]
        va, vb = a[crossing], b[crossing]
        frac = (va / (va - vb))[:, None]
        points.append(pa + frac * (pb - pa))
    if not points:
        return np.zeros((0, 3))
    return np.concatenate(points, axis=0)


def save_points_ply(points, path):
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    vertex = np.empty(points.shape[0], dtype=[('x', 'f4'), ('y', 'f4'), ('z', 'f4')])
    vertex['x'], vertex['y'], vertex['z'] = points[:, 0], points[:, 1], points[:, 2]
    PlyData([PlyElement.describe(vertex, 'vertex')], text=False, byte_order='<').write(str(path))
    logger.info('wrote %d level-set points to %s', points.shape[0], path)


def load_points_ply(path):
    vertex = PlyData.read(str(path))['vertex']
    return np.stack([np.asarray(vertex[a], dtype=np.float64) for a in 'xyz'], axis=1)

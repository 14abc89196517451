"""
Image files: 8-bit PNG through Pillow and 32-bit PFM for float maps.
"""
from pathlib import Path

import numpy as np
from PIL import Image

from .exceptions import InvalidArgument


def _as_numpy(image):
    if hasattr(image, 'detach'):
        image = image.detach().cpu().numpy()
    return np.asarray(image)


def write_png(path, image):
    """Write an [H, W] or [H, W, 3] image with values in [0, 1]."""
    array = np.clip(_as_numpy(image).astype(np.float64), 0.0, 1.0)
    Image.fromarray(np.round(array * 255.0).astype(np.uint8)).save(str(path), format='PNG')


def read_png(path):
    with Image.open(str(path)) as image:
        return np.asarray(image, dtype=np.float64) / 255.0


def write_pfm(path, image):
    """Write an [H, W] or [H, W, 3] float map, little-endian, rows stored bottom-up."""
    array = _as_numpy(image).astype('<f4')
    if array.ndim == 2:
        header = b'Pf'
    elif array.ndim == 3 and array.shape[2] == 3:
        header = b'PF'
    else:
        raise InvalidArgument(f'PFM maps must be [H, W] or [H, W, 3], got {array.shape}')
    height, width = array.shape[:2]
    with open(path, 'wb') as handle:
        handle.write(header + b'\n')
        handle.write(f'{width} {height}\n'.encode('ascii'))
        handle.write(b'-1.0\n')
        handle.write(np.ascontiguousarray(array[::-1]).tobytes())


def read_pfm(path):
    data = Path(path).read_bytes()
    lines = data.split(b'\n', 3)
    if len(lines) < 4 or lines[0] not in (b'PF', b'Pf'):
        raise InvalidArgument(f'{path} is not a PFM file')
    channels = 3 if lines[0] == b'PF' else 1
    width, height = (int(v) for v in lines[1].split())
    scale = float(lines[2])
    dtype = '<f4' if scale < 0 else '>f4'
    expected = width * height * channels
    if len(lines[3]) < 4 * expected:
        raise InvalidArgument(f'{path} is truncated')
    array = np.frombuffer(lines[3], dtype=dtype, count=expected)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return array.reshape(shape)[::-1].astype(np.float64)

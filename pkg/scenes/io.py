"""
Scene directories on disk.

Layout::

    scene.json                 scene config and bounds
    cameras.txt                one camera per line: index split fx fy cx cy width height near far
                               followed by the row-major 4×4 world-to-camera matrix
    view_000_color.png         ground-truth colour
    view_000_mask.png          hit mask
    view_000_depth.pfm         view depth (0 off the mask)
    view_000_normal.pfm        world-space normal
    view_000_prior.pfm         normal prior used for supervision
"""
import hashlib
import json
import logging
from pathlib import Path

import numpy as np
import torch

from surfels.exceptions import InvalidArgument
from surfels.images import read_pfm, read_png, write_pfm, write_png
from surfels.types import Camera

from .oracle import SyntheticScene, SyntheticView
from .serializers import spec_from_config, spec_to_config

logger = logging.getLogger(__name__)

SCENE_FILE = 'scene.json'
CAMERAS_FILE = 'cameras.txt'
CAMERAS_HEADER = '# index split fx fy cx cy width height near far w2c[0,0] .. w2c[3,3]'


def view_stem(index):
    return f'view_{index:03d}'


def _camera_line(view):
    c = view.camera
    values = [view.index, view.split, repr(float(c.fx)), repr(float(c.fy)), repr(float(c.cx)), repr(float(c.cy)),
              c.width, c.height, repr(float(c.near)), repr(float(c.far))]
    values += [repr(float(v)) for v in c.world_to_camera.reshape(-1).tolist()]
    return ' '.join(str(v) for v in values)


def save_scene(scene, directory):
    """Write every view's bundle plus the camera manifest; returns the directory."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InvalidArgument(f'cannot create scene directory {directory}: {exc}') from exc
    document = {
        'spec': spec_to_config(scene.spec),
        'bounds_min': scene.bounds_min.tolist(),
        'bounds_max': scene.bounds_max.tolist(),
    }
    (directory / SCENE_FILE).write_text(json.dumps(document, indent=2, sort_keys=True) + '\n')
    lines = [CAMERAS_HEADER] + [_camera_line(view) for view in scene.views]
    (directory / CAMERAS_FILE).write_text('\n'.join(lines) + '\n')
    for view in scene.views:
        stem = view_stem(view.index)
        write_png(directory / f'{stem}_color.png', view.color)
        write_png(directory / f'{stem}_mask.png', view.mask.to(torch.float64))
        write_pfm(directory / f'{stem}_depth.pfm', view.depth)
        write_pfm(directory / f'{stem}_normal.pfm', view.normal)
        write_pfm(directory / f'{stem}_prior.pfm', view.prior_normal)
    logger.info('wrote %d views to %s', len(scene.views), directory)
    return directory


def read_cameras(path):
    cameras = []
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        parts = line.split()
        if len(parts) != 26:
            raise InvalidArgument(f'{path}:{number}: expected 26 fields, got {len(parts)}')
        matrix = torch.tensor([float(v) for v in parts[10:]], dtype=torch.float64).reshape(4, 4)
        camera = Camera(fx=float(parts[2]), fy=float(parts[3]), cx=float(parts[4]), cy=float(parts[5]),
                        width=int(parts[6]), height=int(parts[7]), world_to_camera=matrix,
                        near=float(parts[8]), far=float(parts[9]))
        cameras.append((int(parts[0]), parts[1], camera))
    return cameras


def _require(path):
    if not path.exists():
        raise InvalidArgument(f'missing ground truth file {path}')
    return path


def load_scene(directory):
    """Read a scene directory written by ``save_scene``."""
    directory = Path(directory)
    if not (directory / SCENE_FILE).exists():
        raise InvalidArgument(f'{directory} is not a scene directory (no {SCENE_FILE})')
    document = json.loads((directory / SCENE_FILE).read_text())
    spec = spec_from_config(document['spec'])
    views = []
    for index, split, camera in read_cameras(_require(directory / CAMERAS_FILE)):
        stem = view_stem(index)
        as_tensor = lambda a: torch.as_tensor(np.ascontiguousarray(a), dtype=torch.float64)
        mask = as_tensor(read_png(_require(directory / f'{stem}_mask.png'))) > 0.5
        views.append(SyntheticView(
            index=index,
            camera=camera,
            color=as_tensor(read_png(_require(directory / f'{stem}_color.png')))[..., :3],
            depth=as_tensor(read_pfm(_require(directory / f'{stem}_depth.pfm'))),
            normal=as_tensor(read_pfm(_require(directory / f'{stem}_normal.pfm'))),
            mask=mask,
            prior_normal=as_tensor(read_pfm(_require(directory / f'{stem}_prior.pfm'))),
            split=split,
        ))
    return SyntheticScene(spec=spec, views=views,
                          bounds_min=torch.tensor(document['bounds_min'], dtype=torch.float64),
                          bounds_max=torch.tensor(document['bounds_max'], dtype=torch.float64))


def load_normal_maps(directory, indices):
    """Per-view ``view_XXX_normal.pfm`` maps from an external normal directory."""
    directory = Path(directory)
    maps = {}
    for index in indices:
        path = _require(directory / f'{view_stem(index)}_normal.pfm')
        maps[index] = torch.as_tensor(np.ascontiguousarray(read_pfm(path)), dtype=torch.float64)
    return maps


def save_normal_maps(maps, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for index, normal in maps.items():
        write_pfm(directory / f'{view_stem(index)}_normal.pfm', normal)
    return directory


def directory_checksum(directory, exclude=('manifest.json',)):
    """SHA-256 over every file's relative path and bytes, in sorted order; run manifests are skipped."""
    directory = Path(directory)
    digest = hashlib.sha256()
    for path in sorted(p for p in directory.rglob('*') if p.is_file() and p.name not in exclude):
        digest.update(path.relative_to(directory).as_posix().encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()

"""
Scoring a trained surfel model against a scene's ground truth.
"""
import logging

import torch

from scenes.io import view_stem
from scenes.metrics import angular_error, chamfer, extract_points, model_size, psnr, ssim
from splatting.export import export_maps
from splatting.projection import DEFAULT_SETTINGS
from splatting.rasterizer import rasterize
from surfels.exceptions import InvalidArgument
from surfels.types import RenderMode

logger = logging.getLogger(__name__)

CHAMFER_SAMPLES = 20000
HEADLINE = ('psnr', 'ssim', 'chamfer', 'size')


def evaluation_views(scene):
    """Held-out views when the scene has any, otherwise every view."""
    return scene.test_views or scene.views


@torch.no_grad()
def evaluate_cloud(cloud, scene, mode=RenderMode.SEPARATE, settings=None, export_dir=None, opacity_floor=0.5,
                   chamfer_samples=CHAMFER_SAMPLES):
    """
    Metrics document of one model.

    Image metrics come from the evaluation views, the Chamfer distance from
    the surfel centers (normal pass, opacity ≥ ``opacity_floor``) against
    samples of the analytic surface.
    """
    settings = settings or DEFAULT_SETTINGS
    if len(cloud) == 0:
        raise InvalidArgument('the model has no surfels')
    per_view = {'index': [], 'psnr': [], 'ssim': [], 'normal_error': []}
    for view in evaluation_views(scene):
        maps = rasterize(cloud, view.camera, mode, settings).maps.detach()
        color = maps.color.double().clamp(0.0, 1.0)
        reference = view.camera.directions_to_camera(view.normal)
        per_view['index'].append(view.index)
        per_view['psnr'].append(psnr(color, view.color))
        per_view['ssim'].append(float(ssim(color, view.color)))
        per_view['normal_error'].append(angular_error(maps.normal.double(), reference,
                                                      view.mask & (maps.alpha.double() > 0.5)))
        if export_dir is not None:
            export_maps(maps, export_dir, view_stem(view.index))

    generator = torch.Generator().manual_seed(scene.spec.seed)
    truth = scene.spec.surface.surface_samples(chamfer_samples, generator)
    points = extract_points(cloud, opacity_floor)
    distance = chamfer(points, truth) if len(points) else float('inf')
    size_bytes, scalars = model_size(cloud)
    count = len(per_view['index'])
    document = {
        'psnr': sum(per_view['psnr']) / count,
        'ssim': sum(per_view['ssim']) / count,
        'chamfer': distance,
        'size': {'bytes': size_bytes, 'scalars': scalars},
        'per_view': per_view,
    }
    logger.info('evaluated %d views: psnr %.3f ssim %.4f chamfer %.5f', count, document['psnr'], document['ssim'],
                distance)
    return document

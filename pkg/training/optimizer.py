"""
Adam over named parameter groups.

Surfel groups are named after ``SurfelCloud.parameters()`` so prune/extend
surgery can find their moments; the field groups are ``grids`` and
``sharpness``.
"""
import logging

import torch

logger = logging.getLogger(__name__)


def _adam(groups, config):
    return torch.optim.Adam(groups, lr=0.0, betas=(config.beta1, config.beta2), eps=config.eps)


def surfel_optimizer(cloud, config, extent=1.0):
    """Adam over every surfel attribute; attaches itself to ``cloud``."""
    params = cloud.parameters()
    rates = {
        'xyz': config.position_lr * extent,
        'rotation': config.rotation_lr,
        'scaling': config.scaling_lr,
        'opacity': config.opacity_lr,
        'sh': config.sh_lr,
        'confidence': config.confidence_lr,
    }
    groups = [{'params': [params[name]], 'lr': lr, 'name': name} for name, lr in rates.items()]
    optimizer = _adam(groups, config)
    cloud.optimizer = optimizer
    return optimizer


def field_optimizer(field, config):
    grids = [field.sdf, field.radiance, field.confidence]
    return _adam([
        {'params': grids, 'lr': config.sdf_grid_lr, 'name': 'grids'},
        {'params': [field.log_sharpness], 'lr': config.sharpness_lr, 'name': 'sharpness'},
    ], config)


def set_group_lr(optimizer, name, lr):
    for group in optimizer.param_groups:
        if group['name'] == name:
            group['lr'] = lr
            return lr
    raise KeyError(name)


class SkipCounter:
    """Number of parameter updates dropped for non-finite gradients, per group."""

    def __init__(self):
        self.counts = {}

    def add(self, name):
        self.counts[name] = self.counts.get(name, 0) + 1

    @property
    def total(self):
        return sum(self.counts.values())


def optimizer_step(optimizer, cloud=None, skipped=None):
    """
    One Adam step.

    A parameter whose gradient holds NaN or ±inf is left out of this step
    (its moments stay untouched) and counted in ``skipped``. Surfel
    quaternions are renormalized afterwards. Gradients are cleared.
    """
    dropped = []
    for group in optimizer.param_groups:
        for p in group['params']:
            if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                dropped.append(group['name'])
                p.grad = None
    for name in dropped:
        logger.warning('skipping update of %s: non-finite gradient', name)
        if skipped is not None:
            skipped.add(name)
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    if cloud is not None:
        cloud.renormalize_rotations()
    return dropped

"""
Reverse mode of the rasterizer.

Gradients are taken with ``torch.autograd.grad`` against the graph a
``RenderResult`` recorded, either from per-map adjoint images or from loss
scalars. Radiance and geometry terms are differentiated separately so the
gradient ledger sees each task's position gradient on its own.
"""
import logging
from dataclasses import dataclass

import torch

from surfels.exceptions import PreconditionViolation

logger = logging.getLogger(__name__)

MAP_NAMES = ('color', 'depth', 'normal', 'confidence', 'alpha')


@dataclass
class SurfelGradients:
    """Per-surfel gradients w.r.t. the stored (pre-activation) attributes and the world normal."""
    xyz: torch.Tensor
    rotation: torch.Tensor
    scaling: torch.Tensor
    opacity: torch.Tensor
    sh: torch.Tensor
    confidence: torch.Tensor
    normal: torch.Tensor

    def __add__(self, other):
        return SurfelGradients(**{k: getattr(self, k) + getattr(other, k) for k in self.__dataclass_fields__})

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _inputs(result):
    params = result.cloud.parameters()
    return [params['xyz'], params['rotation'], params['scaling'], params['opacity'], params['sh'],
            params['confidence'], result.splats.normal_world, result.splats.mean2d]


def _grad(result, outputs, grad_outputs=None):
    inputs = _inputs(result)
    pairs = [(o, g) for o, g in zip(outputs, grad_outputs or [None] * len(outputs))
             if o is not None and o.requires_grad]
    if not pairs:
        grads = [None] * len(inputs)
    else:
        outs, adjoints = zip(*pairs)
        grads = torch.autograd.grad(outs, inputs, grad_outputs=list(adjoints) if grad_outputs else None,
                                    retain_graph=True, allow_unused=True)
    grads = [torch.zeros_like(x) if g is None else g for g, x in zip(grads, inputs)]
    surfel_grads = SurfelGradients(*grads[:7])
    return surfel_grads, grads[7]


def _check(result):
    if not result.is_current():
        raise PreconditionViolation('surfels changed since the forward render; re-render before backward')


def _map_adjoints(result, upstream):
    outputs, adjoints = [], []
    for name in MAP_NAMES:
        adjoint = (upstream or {}).get(name)
        if adjoint is None:
            continue
        rendered = getattr(result.maps, name)
        adjoint = torch.as_tensor(adjoint, dtype=rendered.dtype)
        if adjoint.shape != rendered.shape:
            raise PreconditionViolation(f'adjoint for {name} has shape {tuple(adjoint.shape)}, '
                                        f'render has {tuple(rendered.shape)}')
        outputs.append(rendered)
        adjoints.append(adjoint)
    return outputs, adjoints


def backward(result, upstream, geometry_upstream=None, ledger=None):
    """
    Gradients of ⟨upstream, maps⟩ (+ ⟨geometry_upstream, maps⟩) w.r.t. every surfel attribute.

    ``upstream`` holds the radiance adjoints, ``geometry_upstream`` the geometry
    adjoints, both keyed by map name. When a ledger is given, both task
    gradients and the view's contribution weights are recorded in it.
    """
    _check(result)
    rad, rad_screen = _grad(result, *_map_adjoints(result, upstream))
    geo, geo_screen = _grad(result, *_map_adjoints(result, geometry_upstream))
    if ledger is not None:
        ledger.record_view(result, rad, geo, rad_screen + geo_screen)
    return rad + geo


def task_gradients(result, radiance_loss, geometry_loss=None, other_loss=None, ledger=None):
    """
    Backpropagate loss groups one at a time and write their sum into ``.grad``.

    Returns the summed ``SurfelGradients``.
    """
    _check(result)
    rad, rad_screen = _grad(result, [radiance_loss])
    geo, geo_screen = _grad(result, [geometry_loss])
    total = rad + geo
    screen = rad_screen + geo_screen
    if other_loss is not None:
        rest, rest_screen = _grad(result, [other_loss])
        total = total + rest
        screen = screen + rest_screen
    if ledger is not None:
        ledger.record_view(result, rad, geo, screen)
    params = result.cloud.parameters()
    for name, p in params.items():
        g = getattr(total, name)
        p.grad = g.detach().clone() if p.grad is None else p.grad + g.detach()
    return total

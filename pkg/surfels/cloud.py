"""
Batched, trainable surfel container.

Parameters are stored pre-activation (log scale, opacity/confidence logits)
and SH coefficients as a zero-padded ``[N, 16, 3]`` block with a per-surfel
order. When an optimizer is attached, every structural change (prune,
extend) carries its Adam moments along.
"""
import logging

import numpy as np
import torch
from scipy.spatial import cKDTree
from torch import nn

from .exceptions import InvalidArgument
from .sh import MAX_SH_BASIS, basis_mask, pad_coefficients, sh_basis_count
from .transforms import covariance, quaternion_to_matrix, random_quaternions
from .types import Surfel, Task

logger = logging.getLogger(__name__)

PARAM_NAMES = ('xyz', 'rotation', 'scaling', 'opacity', 'sh', 'confidence')


def inverse_sigmoid(x):
    return torch.log(x / (1 - x))


class SurfelCloud:
    """All surfels of one model plus their task tags and SH orders."""

    def __init__(self, xyz, rotation, scaling, opacity, sh, confidence, sh_order=None, task=None):
        count = xyz.shape[0]
        self._xyz = nn.Parameter(xyz.detach().clone().reshape(count, 3))
        self._rotation = nn.Parameter(rotation.detach().clone().reshape(count, 4))
        self._scaling = nn.Parameter(scaling.detach().clone().reshape(count, 2))
        self._opacity = nn.Parameter(opacity.detach().clone().reshape(count, 1))
        self._sh = nn.Parameter(sh.detach().clone().reshape(count, MAX_SH_BASIS, 3))
        self._confidence = nn.Parameter(confidence.detach().clone().reshape(count, 1))
        if sh_order is None:
            sh_order = torch.zeros(count, dtype=torch.long)
        if task is None:
            task = torch.full((count,), int(Task.COMMON), dtype=torch.long)
        self.sh_order = torch.as_tensor(sh_order, dtype=torch.long).reshape(count).clone()
        self.task = torch.as_tensor(task, dtype=torch.long).reshape(count).clone()
        self.optimizer = None

    # construction

    @classmethod
    def empty(cls, dtype=torch.float32):
        z = lambda *shape: torch.zeros(0, *shape, dtype=dtype)
        return cls(z(3), z(4), z(2), z(1), z(MAX_SH_BASIS, 3), z(1))

    @classmethod
    def from_random(cls, count, bounds_min, bounds_max, generator=None, dtype=torch.float32,
                    initial_opacity=0.1, initial_confidence=0.5):
        """
        Uniform random centers inside an axis-aligned box with random orientations.

        Both in-plane scales start at the mean nearest-neighbour distance of the
        initial point set.
        """
        if count <= 0:
            raise InvalidArgument('initial surfel count must be positive')
        lo = torch.as_tensor(bounds_min, dtype=torch.float64)
        hi = torch.as_tensor(bounds_max, dtype=torch.float64)
        xyz = lo + (hi - lo) * torch.rand(count, 3, generator=generator, dtype=torch.float64)
        if count > 1:
            distances, _ = cKDTree(xyz.numpy()).query(xyz.numpy(), k=2)
            spacing = max(float(np.mean(distances[:, 1])), 1e-7)
        else:
            spacing = float(torch.min(hi - lo)) * 0.1
        scaling = torch.full((count, 2), np.log(spacing), dtype=torch.float64)
        opacity = inverse_sigmoid(torch.full((count, 1), initial_opacity, dtype=torch.float64))
        confidence = inverse_sigmoid(torch.full((count, 1), initial_confidence, dtype=torch.float64))
        return cls(
            xyz.to(dtype),
            random_quaternions(count, generator, dtype),
            scaling.to(dtype),
            opacity.to(dtype),
            torch.zeros(count, MAX_SH_BASIS, 3, dtype=dtype),
            confidence.to(dtype),
        )

    @classmethod
    def from_surfels(cls, surfels, dtype=torch.float64):
        if not surfels:
            return cls.empty(dtype)

        def stack(values):
            return torch.as_tensor(np.stack(values), dtype=dtype)

        return cls(
            stack([s.center for s in surfels]),
            stack([s.rotation for s in surfels]),
            stack([np.log(s.scale) for s in surfels]),
            stack([[s.opacity_logit] for s in surfels]),
            torch.stack([pad_coefficients(s.sh, s.sh_order) for s in surfels]).to(dtype),
            stack([[s.confidence_logit] for s in surfels]),
            sh_order=[s.sh_order for s in surfels],
            task=[int(s.task) for s in surfels],
        )

    def surfel(self, index):
        order = int(self.sh_order[index])
        count = sh_basis_count(order)
        rotation = self._rotation[index].detach().double()
        return Surfel(
            center=self._xyz[index].detach().double().numpy(),
            rotation=(rotation / torch.linalg.norm(rotation)).numpy(),
            scale=torch.exp(self._scaling[index].detach().double()).numpy(),
            opacity_logit=float(self._opacity[index, 0]),
            sh=self._sh[index, :count].detach().double().reshape(-1).numpy(),
            sh_order=order,
            confidence_logit=float(self._confidence[index, 0]),
            task=Task(int(self.task[index])),
        )

    def to_surfels(self):
        return [self.surfel(i) for i in range(len(self))]

    def subset(self, index):
        """Detached copy holding only the selected surfels (boolean mask or index tensor)."""
        return SurfelCloud(
            self._xyz[index], self._rotation[index], self._scaling[index],
            self._opacity[index], self._sh[index], self._confidence[index],
            sh_order=self.sh_order[index], task=self.task[index],
        )

    def copy(self):
        return self.subset(torch.arange(len(self)))

    # activated views

    def __len__(self):
        return self._xyz.shape[0]

    @property
    def dtype(self):
        return self._xyz.dtype

    @property
    def get_xyz(self):
        return self._xyz

    @property
    def get_rotation(self):
        return self._rotation / torch.linalg.norm(self._rotation, dim=-1, keepdim=True)

    @property
    def get_scaling(self):
        return torch.exp(self._scaling)

    @property
    def get_opacity(self):
        return torch.sigmoid(self._opacity)[:, 0]

    @property
    def get_confidence(self):
        return torch.sigmoid(self._confidence)[:, 0]

    @property
    def get_sh(self):
        """Padded coefficients with everything above each surfel's order masked out."""
        return self._sh * basis_mask(self.sh_order, dtype=self._sh.dtype)[..., None]

    @property
    def get_normal(self):
        return quaternion_to_matrix(self._rotation)[..., :, 2]

    @property
    def get_covariance(self):
        return covariance(self._rotation, self.get_scaling)

    def parameters(self):
        return {
            'xyz': self._xyz,
            'rotation': self._rotation,
            'scaling': self._scaling,
            'opacity': self._opacity,
            'sh': self._sh,
            'confidence': self._confidence,
        }

    def task_mask(self, *tasks):
        mask = torch.zeros(len(self), dtype=torch.bool)
        for task in tasks:
            mask |= self.task == int(task)
        return mask

    def sh_scalar_count(self):
        return int((3 * (self.sh_order + 1) ** 2).sum())

    # optimizer surgery

    def _set_parameters(self, tensors):
        self._xyz = tensors['xyz']
        self._rotation = tensors['rotation']
        self._scaling = tensors['scaling']
        self._opacity = tensors['opacity']
        self._sh = tensors['sh']
        self._confidence = tensors['confidence']

    def _prune_optimizer(self, mask):
        optimizable_tensors = {}
        params = self.parameters()
        if self.optimizer is None:
            return {name: nn.Parameter(p.detach()[mask].clone()) for name, p in params.items()}
        for group in self.optimizer.param_groups:
            name = group['name']
            if name not in params:
                continue
            stored_state = self.optimizer.state.get(group['params'][0], None)
            new_param = nn.Parameter(group['params'][0].detach()[mask].clone())
            if stored_state is not None:
                stored_state['exp_avg'] = stored_state['exp_avg'][mask]
                stored_state['exp_avg_sq'] = stored_state['exp_avg_sq'][mask]
                del self.optimizer.state[group['params'][0]]
                self.optimizer.state[new_param] = stored_state
            group['params'][0] = new_param
            optimizable_tensors[name] = new_param
        return optimizable_tensors

    def prune(self, remove_mask):
        """Drop every surfel flagged in ``remove_mask``."""
        keep = ~remove_mask
        self._set_parameters(self._prune_optimizer(keep))
        self.sh_order = self.sh_order[keep]
        self.task = self.task[keep]
        logger.debug('pruned %d surfels, %d remain', int(remove_mask.sum()), len(self))

    def cat_tensors_to_optimizer(self, tensors_dict):
        params = self.parameters()
        if self.optimizer is None:
            return {name: nn.Parameter(torch.cat((p.detach(), tensors_dict[name].detach()), dim=0))
                    for name, p in params.items()}
        optimizable_tensors = {}
        for group in self.optimizer.param_groups:
            name = group['name']
            if name not in params:
                continue
            extension_tensor = tensors_dict[name].detach()
            stored_state = self.optimizer.state.get(group['params'][0], None)
            new_param = nn.Parameter(torch.cat((group['params'][0].detach(), extension_tensor), dim=0))
            if stored_state is not None:
                stored_state['exp_avg'] = torch.cat((stored_state['exp_avg'], torch.zeros_like(extension_tensor)), dim=0)
                stored_state['exp_avg_sq'] = torch.cat(
                    (stored_state['exp_avg_sq'], torch.zeros_like(extension_tensor)), dim=0
                )
                del self.optimizer.state[group['params'][0]]
                self.optimizer.state[new_param] = stored_state
            group['params'][0] = new_param
            optimizable_tensors[name] = new_param
        return optimizable_tensors

    def extend(self, tensors_dict, sh_order, task):
        """Append new surfels given pre-activation tensors keyed like ``parameters()``."""
        self._set_parameters(self.cat_tensors_to_optimizer(tensors_dict))
        self.sh_order = torch.cat((self.sh_order, torch.as_tensor(sh_order, dtype=torch.long)))
        self.task = torch.cat((self.task, torch.as_tensor(task, dtype=torch.long)))

    @torch.no_grad()
    def zero_sh_slots(self, slots):
        """Zero SH coefficients (and their Adam moments) where ``slots`` [N, 16] is set."""
        mask = slots[..., None].to(self._sh.dtype)
        self._sh.data *= 1.0 - mask
        if self.optimizer is None:
            return
        state = self.optimizer.state.get(self._sh)
        if state:
            state['exp_avg'] *= 1.0 - mask
            state['exp_avg_sq'] *= 1.0 - mask

    def set_sh_order(self, orders):
        """Change SH orders; coefficients entering use start at zero."""
        orders = torch.as_tensor(orders, dtype=torch.long).expand(len(self)).clone()
        previous = basis_mask(self.sh_order, dtype=torch.float64) > 0
        current = basis_mask(orders, dtype=torch.float64) > 0
        self.zero_sh_slots(current & ~previous)
        self.sh_order = orders

    @torch.no_grad()
    def renormalize_rotations(self):
        self._rotation.data /= torch.linalg.norm(self._rotation.data, dim=-1, keepdim=True)

    def zero_grad(self):
        for p in self.parameters().values():
            p.grad = None

    # persistence

    def state_dict(self):
        state = {name: p.detach().clone() for name, p in self.parameters().items()}
        state['sh_order'] = self.sh_order.clone()
        state['task'] = self.task.clone()
        return state

    @classmethod
    def from_state_dict(cls, state):
        return cls(state['xyz'], state['rotation'], state['scaling'], state['opacity'],
                   state['sh'], state['confidence'], sh_order=state['sh_order'], task=state['task'])

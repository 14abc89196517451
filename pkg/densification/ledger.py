"""
Per-surfel gradient statistics between management events.

Three accumulator groups are kept and reset independently: task gradients
(densification), contribution weights (pruning) and SH gradient norms
(order growth).
"""
import logging

import torch

from splatting.rasterizer import COLOR_PASS, NORMAL_PASS
from surfels.sh import basis_mask

logger = logging.getLogger(__name__)

GRADIENT_FIELDS = ('rad_sum', 'geo_sum', 'rad_count', 'geo_count', 'rad_norm_sum', 'geo_rot_norm_sum',
                   'screen_norm_sum')
CONTRIBUTION_FIELDS = ('color_weight', 'normal_weight', 'weight_views')
SH_FIELDS = ('sh_norm',)
COUNT_FIELDS = ('rad_count', 'geo_count', 'weight_views')


def _norm(v):
    return torch.sqrt((v * v).sum(dim=-1))


class GradientLedger:
    """
    Accumulators fed by every backward pass.

    Task gradients are summed as vectors only over views where the surfel
    was touched; contribution weights are averaged over every view recorded
    since the surfel existed.
    """

    FIELDS = GRADIENT_FIELDS + CONTRIBUTION_FIELDS + SH_FIELDS

    def __init__(self, count, dtype=torch.float64):
        self.dtype = dtype
        for name in self.FIELDS:
            setattr(self, name, self._zeros(name, count))

    def _zeros(self, name, count):
        dtype = torch.long if name in COUNT_FIELDS else self.dtype
        shape = (count, 3) if name in ('rad_sum', 'geo_sum') else (count,)
        return torch.zeros(shape, dtype=dtype)

    def __len__(self):
        return self.rad_sum.shape[0]

    def _reset(self, names):
        for name in names:
            getattr(self, name).zero_()

    def reset_gradients(self):
        self._reset(GRADIENT_FIELDS)

    def reset_contributions(self):
        self._reset(CONTRIBUTION_FIELDS)

    def reset_sh(self):
        self._reset(SH_FIELDS)

    def reset(self, count=None):
        count = len(self) if count is None else count
        for name in self.FIELDS:
            setattr(self, name, self._zeros(name, count))

    def record_view(self, result, rad, geo, screen):
        """Add one rendered view's task gradients and contribution weights."""
        seen = (result.touched[COLOR_PASS] > 0) | (result.touched[NORMAL_PASS] > 0)
        cast = lambda t: t.detach().to(self.dtype)

        self.rad_sum[seen] += cast(rad.xyz)[seen]
        self.geo_sum[seen] += cast(geo.xyz)[seen]
        self.rad_count += seen.long()
        self.geo_count += seen.long()
        self.rad_norm_sum[seen] += _norm(cast(rad.xyz))[seen]
        self.geo_rot_norm_sum[seen] += _norm(cast(geo.rotation))[seen]
        self.screen_norm_sum[seen] += _norm(cast(screen))[seen]

        mask = basis_mask(result.cloud.sh_order, dtype=self.dtype)[..., None]
        sh_grad = cast(rad.sh) * mask
        self.sh_norm += torch.sqrt((sh_grad * sh_grad).sum(dim=(1, 2)))

        self.color_weight += cast(result.contributions[COLOR_PASS])
        self.normal_weight += cast(result.contributions[NORMAL_PASS])
        self.weight_views += 1

    def _mean(self, total, count):
        hit = count > 0
        denom = count.clamp(min=1).to(self.dtype)
        if total.dim() == 2:
            return torch.where(hit[:, None], total / denom[:, None], torch.zeros_like(total))
        return torch.where(hit, total / denom, torch.zeros_like(total))

    def mean_rad(self):
        return self._mean(self.rad_sum, self.rad_count)

    def mean_geo(self):
        return self._mean(self.geo_sum, self.geo_count)

    def mean_rad_norm(self):
        """Mean per-view ‖∂L_rad/∂p‖."""
        return self._mean(self.rad_norm_sum, self.rad_count)

    def mean_geo_rotation_norm(self):
        """Mean per-view ‖∂L_geo/∂R‖."""
        return self._mean(self.geo_rot_norm_sum, self.geo_count)

    def mean_screen_norm(self):
        return self._mean(self.screen_norm_sum, self.rad_count)

    def observed(self):
        return self.rad_count > 0

    def contribution(self, chain=COLOR_PASS):
        """Mean per-view contribution of each surfel to ``chain``; views it did not touch count as 0."""
        total = self.color_weight if chain == COLOR_PASS else self.normal_weight
        return self._mean(total, self.weight_views)

    def prune(self, remove_mask):
        keep = ~remove_mask
        for name in self.FIELDS:
            setattr(self, name, getattr(self, name)[keep])

    def extend(self, count):
        for name in self.FIELDS:
            setattr(self, name, torch.cat([getattr(self, name), self._zeros(name, count)]))

    def state_dict(self):
        return {name: getattr(self, name).clone() for name in self.FIELDS}

    def load_state_dict(self, state):
        for name in self.FIELDS:
            setattr(self, name, state[name].clone())

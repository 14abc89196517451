"""
Opacity-floor and contribution pruning.

Task-decoupled pruning ranks ColorOnly surfels by their colour-chain
contribution and NormalOnly surfels by their normal-chain contribution and
cuts the lowest fraction of each set independently. Common surfels are never
ranked. With unified rendering all surfels are ranked together instead.
"""
import logging
import math
from dataclasses import asdict, dataclass

import torch

from splatting.rasterizer import COLOR_PASS, NORMAL_PASS
from surfels.types import RenderMode, Task

logger = logging.getLogger(__name__)


@dataclass
class PruneEvents:
    opacity: int = 0
    color: int = 0
    normal: int = 0
    coupled: int = 0

    @property
    def total(self):
        return self.opacity + self.color + self.normal + self.coupled

    def as_dict(self):
        return {**asdict(self), 'total': self.total}


def lowest_fraction(scores, candidates, percent):
    """
    Indices of the lowest ``percent`` % of ``candidates`` by score.

    Ties break by surfel index; the count is floor(len · percent / 100).
    """
    candidates = torch.nonzero(candidates).flatten()
    cut = math.floor(candidates.numel() * percent / 100.0)
    if cut == 0:
        return candidates[:0]
    order = torch.sort(scores[candidates], stable=True).indices
    return candidates[order[:cut]]


def opacity_prune_mask(cloud, floor):
    return cloud.get_opacity.detach() < floor


def prune_step(cloud, ledger, config, mode=RenderMode.SEPARATE):
    """Remove low-opacity then low-contribution surfels in place; returns the removal counts."""
    events = PruneEvents()
    low_opacity = opacity_prune_mask(cloud, config.opacity_floor)
    events.opacity = int(low_opacity.sum())
    if events.opacity:
        cloud.prune(low_opacity)
        ledger.prune(low_opacity)

    remove = torch.zeros(len(cloud), dtype=torch.bool)
    if RenderMode(mode) == RenderMode.UNIFIED:
        everyone = torch.ones(len(cloud), dtype=torch.bool)
        cut = lowest_fraction(ledger.contribution(COLOR_PASS), everyone, config.prune_percent)
        remove[cut] = True
        events.coupled = cut.numel()
    else:
        color_cut = lowest_fraction(ledger.contribution(COLOR_PASS), cloud.task_mask(Task.COLOR_ONLY),
                                    config.prune_percent)
        normal_cut = lowest_fraction(ledger.contribution(NORMAL_PASS), cloud.task_mask(Task.NORMAL_ONLY),
                                     config.prune_percent)
        remove[color_cut] = True
        remove[normal_cut] = True
        events.color, events.normal = color_cut.numel(), normal_cut.numel()
    if bool(remove.any()):
        cloud.prune(remove)
        ledger.prune(remove)
    ledger.reset_contributions()
    logger.debug('prune: %s, %d surfels remain', events.as_dict(), len(cloud))
    return events

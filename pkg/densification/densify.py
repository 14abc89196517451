"""
Clone, split and separate densification.

A Common surfel whose mean radiance and geometry position gradients point
in opposing directions is separated into a ColorOnly child stepped along
−ḡ_rad and a NormalOnly child stepped along −ḡ_geo. Everything else above
the gradient threshold is cloned (small surfels) or split (large ones).
Task-specific surfels are driven by their own task gradient only.
"""
import logging
import math
from dataclasses import asdict, dataclass

import torch

from surfels.transforms import quaternion_to_matrix
from surfels.types import Task

logger = logging.getLogger(__name__)

NONE, CLONE, SPLIT, SEPARATE = 0, 1, 2, 3
DECISION_NAMES = {NONE: 'none', CLONE: 'clone', SPLIT: 'split', SEPARATE: 'separate'}


@dataclass
class DensifyEvents:
    cloned: int = 0
    split: int = 0
    separated: int = 0

    def as_dict(self):
        return asdict(self)


def _length(v):
    return torch.sqrt(v[..., 0] * v[..., 0] + v[..., 1] * v[..., 1] + v[..., 2] * v[..., 2])


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def decide(g_rad, g_geo, task, max_scale, extent, config, allow_separate=True):
    """Reference decision for one surfel from plain Python floats."""
    m_rad = math.sqrt(g_rad[0] * g_rad[0] + g_rad[1] * g_rad[1] + g_rad[2] * g_rad[2])
    m_geo = math.sqrt(g_geo[0] * g_geo[0] + g_geo[1] * g_geo[1] + g_geo[2] * g_geo[2])
    if task == Task.COMMON:
        magnitude = max(m_rad, m_geo)
    elif task == Task.COLOR_ONLY:
        magnitude = m_rad
    else:
        magnitude = m_geo
    if not magnitude > config.densify_grad_threshold:
        return NONE
    if task == Task.COMMON and allow_separate:
        if g_rad[0] * g_geo[0] + g_rad[1] * g_geo[1] + g_rad[2] * g_geo[2] < 0:
            return SEPARATE
    if max_scale > config.percent_dense * extent:
        return SPLIT
    return CLONE


def densify_decisions(g_rad, g_geo, task, max_scale, extent, config, allow_separate=True):
    """Vectorised ``decide``; returns (decision codes, gate magnitudes)."""
    m_rad = _length(g_rad)
    m_geo = _length(g_geo)
    magnitude = torch.where(task == int(Task.COMMON), torch.maximum(m_rad, m_geo),
                            torch.where(task == int(Task.COLOR_ONLY), m_rad, m_geo))
    active = magnitude > config.densify_grad_threshold
    large = max_scale > config.percent_dense * extent
    codes = torch.where(large, torch.full_like(task, SPLIT), torch.full_like(task, CLONE))
    if allow_separate:
        opposed = (task == int(Task.COMMON)) & (_dot(g_rad, g_geo) < 0)
        codes = torch.where(opposed, torch.full_like(task, SEPARATE), codes)
    codes = torch.where(active, codes, torch.full_like(task, NONE))
    return codes, magnitude


def _limit(codes, magnitude, budget):
    """Keep only the ``budget`` strongest candidates."""
    candidates = torch.nonzero(codes != NONE).flatten()
    if candidates.numel() <= budget:
        return codes
    codes = codes.clone()
    order = torch.sort(-magnitude[candidates], stable=True).indices
    codes[candidates[order[max(budget, 0):]]] = NONE
    return codes


def _take(params, index):
    return {name: p[index].clone() for name, p in params.items()}


def _cat(parts):
    names = parts[0][0].keys()
    tensors = {name: torch.cat([p[name] for p, _, _ in parts]) for name in names}
    orders = torch.cat([o for _, o, _ in parts])
    tasks = torch.cat([t for _, _, t in parts])
    return tensors, orders, tasks


def densify_step(cloud, ledger, config, extent, allow_separate=True, generator=None):
    """
    Apply one densification event to ``cloud`` in place and return the event counts.

    The ledger's gradient accumulators are reset afterwards; its rows follow
    the cloud's structural changes.
    """
    g_rad, g_geo = ledger.mean_rad(), ledger.mean_geo()
    params = {name: p.detach() for name, p in cloud.parameters().items()}
    dtype = cloud.dtype
    scale = cloud.get_scaling.detach()
    max_scale = torch.max(scale, dim=1).values.to(g_rad.dtype)
    codes, magnitude = densify_decisions(g_rad, g_geo, cloud.task, max_scale, extent, config, allow_separate)
    codes = _limit(codes, magnitude, config.max_surfels - len(cloud))
    clone_idx = torch.nonzero(codes == CLONE).flatten()
    split_idx = torch.nonzero(codes == SPLIT).flatten()
    sep_idx = torch.nonzero(codes == SEPARATE).flatten()
    events = DensifyEvents(cloned=clone_idx.numel(), split=split_idx.numel(), separated=sep_idx.numel())
    if not (clone_idx.numel() or split_idx.numel() or sep_idx.numel()):
        ledger.reset_gradients()
        return events

    task = cloud.task
    combined = torch.where((task == int(Task.COLOR_ONLY))[:, None], g_rad,
                           torch.where((task == int(Task.NORMAL_ONLY))[:, None], g_geo, g_rad + g_geo))
    parts = []

    if clone_idx.numel():
        clones = _take(params, clone_idx)
        clones['xyz'] = clones['xyz'] - (config.clone_step * combined[clone_idx]).to(dtype)
        parts.append((clones, cloud.sh_order[clone_idx], task[clone_idx]))

    if split_idx.numel():
        for _ in range(2):
            children = _take(params, split_idx)
            rot = quaternion_to_matrix(children['rotation'])
            local = torch.randn(split_idx.numel(), 2, generator=generator, dtype=torch.float64).to(dtype)
            local = local * scale[split_idx]
            children['xyz'] = children['xyz'] + rot[..., :, 0] * local[:, :1] + rot[..., :, 1] * local[:, 1:]
            children['scaling'] = children['scaling'] - math.log(config.split_divisor)
            parts.append((children, cloud.sh_order[split_idx], task[split_idx]))

    if sep_idx.numel():
        m_rad = _length(g_rad[sep_idx])
        m_geo = _length(g_geo[sep_idx])
        step = config.separate_step * scale[sep_idx].to(g_rad.dtype).mean(dim=1) / (m_rad + m_geo)
        color_child = _take(params, sep_idx)
        color_child['xyz'] = color_child['xyz'] - (step[:, None] * g_rad[sep_idx]).to(dtype)
        parts.append((color_child, cloud.sh_order[sep_idx],
                      torch.full((sep_idx.numel(),), int(Task.COLOR_ONLY), dtype=torch.long)))
        normal_child = _take(params, sep_idx)
        normal_child['xyz'] = normal_child['xyz'] - (step[:, None] * g_geo[sep_idx]).to(dtype)
        normal_child['sh'] = torch.zeros_like(normal_child['sh'])
        parts.append((normal_child, torch.zeros(sep_idx.numel(), dtype=torch.long),
                      torch.full((sep_idx.numel(),), int(Task.NORMAL_ONLY), dtype=torch.long)))

    count = len(cloud)
    tensors, orders, tasks = _cat(parts)
    cloud.extend(tensors, orders, tasks)
    ledger.extend(orders.numel())
    remove = torch.zeros(len(cloud), dtype=torch.bool)
    remove[split_idx] = True
    remove[sep_idx] = True
    if bool(remove.any()):
        cloud.prune(remove)
        ledger.prune(remove)
    ledger.reset_gradients()
    logger.debug('densify: %d cloned, %d split, %d separated (%d -> %d surfels)',
                 events.cloned, events.split, events.separated, count, len(cloud))
    return events


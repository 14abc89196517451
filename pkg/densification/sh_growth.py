"""
Per-surfel SH order growth.

Between events the ledger accumulates ‖∂L_rad/∂SH‖ over the coefficients
of each surfel's current order. A surfel whose sum exceeds the threshold of
its order moves up one order; the new coefficients start at zero so the
rendered colour is unchanged at the moment of growth.
"""
import logging

import torch

from surfels.sh import MAX_SH_ORDER

logger = logging.getLogger(__name__)


def promotion_mask(sh_norm, orders, config):
    thresholds = torch.where(orders >= 2, torch.full_like(sh_norm, config.sh_threshold_high),
                             torch.full_like(sh_norm, config.sh_threshold_low))
    return (sh_norm > thresholds) & (orders < MAX_SH_ORDER)


def adaptive_sh_step(cloud, ledger, config):
    """Promote qualifying surfels by one order, reset the accumulator and return the promotion count."""
    if config.fixed_sh_order is not None:
        ledger.reset_sh()
        return 0
    promote = promotion_mask(ledger.sh_norm, cloud.sh_order, config)
    promoted = int(promote.sum())
    if promoted:
        cloud.set_sh_order(cloud.sh_order + promote.long())
        logger.debug('promoted %d surfels; order histogram %s', promoted,
                     torch.bincount(cloud.sh_order, minlength=MAX_SH_ORDER + 1).tolist())
    ledger.reset_sh()
    return promoted


def apply_fixed_order(cloud, order):
    """Put every surfel at the same SH order (the fixed-degree ablation)."""
    cloud.set_sh_order(torch.full((len(cloud),), int(order), dtype=torch.long))

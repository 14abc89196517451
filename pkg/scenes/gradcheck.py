"""
Central finite differences, the oracle every analytic gradient is checked against.
"""
import logging
import math
from dataclasses import dataclass, field

import torch

logger = logging.getLogger(__name__)


@dataclass
class NumericGradients:
    gradients: list
    flagged: list = field(default_factory=list)

    @property
    def ok(self):
        return not self.flagged


def _step(value, rel_step, abs_step):
    return max(rel_step * abs(value), abs_step)


@torch.no_grad()
def finite_diff_gradient(loss_fn, params, rel_step=1e-4, abs_step=1e-6):
    """
    Numeric gradient of ``loss_fn()`` w.r.t. each tensor in ``params``.

    Every scalar is perturbed in place by ±h with h = max(rel_step·|x|, abs_step)
    and restored afterwards. Scalars whose perturbed loss is not finite get a
    NaN gradient and are listed in ``flagged`` as ``(param index, flat index)``.
    """
    if isinstance(params, torch.Tensor):
        params = [params]
    gradients, flagged = [], []
    for p_index, tensor in enumerate(params):
        data = tensor.data
        flat = data.view(-1)
        grad = torch.zeros(flat.numel(), dtype=torch.float64)
        for i in range(flat.numel()):
            original = flat[i].item()
            h = _step(original, rel_step, abs_step)
            flat[i] = original + h
            plus = float(loss_fn())
            flat[i] = original - h
            minus = float(loss_fn())
            flat[i] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                grad[i] = math.nan
                flagged.append((p_index, i))
                continue
            grad[i] = (plus - minus) / (2.0 * h)
        gradients.append(grad.reshape(data.shape).to(data.dtype))
    if flagged:
        logger.warning('%d parameters gave a non-finite loss under perturbation', len(flagged))
    return NumericGradients(gradients=gradients, flagged=flagged)

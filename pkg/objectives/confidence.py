"""
Confidence supervision for both branches.
"""
import torch

ZETA_RAD = 2e-4
ZETA_GEO = 1e-4


def confidence_gt(rad_grad_norm, geo_grad_norm, zeta_rad=ZETA_RAD, zeta_geo=ZETA_GEO):
    """1 where the radiance gradient is small and the geometry gradient large, else 0."""
    rad = torch.as_tensor(rad_grad_norm, dtype=torch.float64)
    geo = torch.as_tensor(geo_grad_norm, dtype=torch.float64)
    return ((rad < zeta_rad) & (geo > zeta_geo)).to(torch.float64)


def l_conf_g(confidence, target, observed=None):
    """Mean squared error between activated surfel confidences and their 0/1 targets."""
    target = torch.as_tensor(target, dtype=confidence.dtype)
    error = (confidence - target) ** 2
    if observed is None:
        return error.mean() if error.numel() else confidence.sum() * 0.0
    observed = torch.as_tensor(observed, dtype=torch.bool)
    count = observed.sum().clamp(min=1)
    return torch.where(observed, error, torch.zeros_like(error)).sum() / count.to(error.dtype)


def appearance_score(volume_color, gt_color):
    """E = 1 − channel-mean |C_v − C| per ray, in [0, 1]."""
    return 1.0 - torch.abs(volume_color - gt_color).mean(dim=-1)


def l_conf_volume(volume_confidence, volume_color, gt_color, entropy, lambda_h=0.005):
    """
    Mean over rays of (F_v − E)² + λ_H·(F_v − H)².

    E and H are targets: no gradient flows through them.
    """
    score = appearance_score(volume_color, torch.as_tensor(gt_color, dtype=volume_color.dtype)).detach()
    entropy = torch.as_tensor(entropy, dtype=volume_confidence.dtype).detach()
    return ((volume_confidence - score) ** 2 + lambda_h * (volume_confidence - entropy) ** 2).mean()

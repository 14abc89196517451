import torch


def curvature_loss(normal, covered):
    """Mean absolute difference between neighbouring normals where both pixels are covered."""
    covered = torch.as_tensor(covered, dtype=torch.bool)
    dx = torch.abs(normal[:, 1:] - normal[:, :-1]).sum(dim=-1)
    dy = torch.abs(normal[1:] - normal[:-1]).sum(dim=-1)
    mx = covered[:, 1:] & covered[:, :-1]
    my = covered[1:] & covered[:-1]
    total = torch.where(mx, dx, torch.zeros_like(dx)).sum() + torch.where(my, dy, torch.zeros_like(dy)).sum()
    count = (mx.sum() + my.sum()).clamp(min=1)
    return total / count.to(total.dtype)


def opacity_loss(opacity):
    """Mean o·(1 − o); zero when every opacity is 0 or 1."""
    if opacity.numel() == 0:
        return opacity.sum()
    return (opacity * (1.0 - opacity)).mean()


def mask_loss(alpha, gt_mask):
    return torch.abs(alpha - torch.as_tensor(gt_mask, dtype=alpha.dtype)).mean()


def regularizers(cloud, maps, gt_mask, coverage_threshold=0.5):
    """(l_curv, l_opac, l_mask) for one rendered view."""
    covered = maps.extras.get('normal_alpha', maps.alpha).detach() > coverage_threshold
    return (curvature_loss(maps.normal, covered),
            opacity_loss(cloud.get_opacity),
            mask_loss(maps.alpha, gt_mask))

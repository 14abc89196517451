"""
Photometric losses on [H, W, 3] (or [H, W]) images in [0, 1].
"""
import math

import torch
import torch.nn.functional as F

from surfels.exceptions import InvalidArgument

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _gaussian(window_size, sigma, dtype):
    gauss = torch.tensor([math.exp(-(x - window_size // 2) ** 2 / float(2 * sigma ** 2)) for x in range(window_size)],
                         dtype=dtype)
    return gauss / gauss.sum()


def create_window(window_size, channel, dtype=torch.float32):
    _1D_window = _gaussian(window_size, SSIM_SIGMA, dtype).unsqueeze(1)
    _2D_window = _1D_window.mm(_1D_window.t()).unsqueeze(0).unsqueeze(0)
    return _2D_window.expand(channel, 1, window_size, window_size).contiguous()


def _check_pair(a, b):
    if a.shape != b.shape:
        raise InvalidArgument(f'image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}')


def _as_batch(image):
    if image.dim() == 2:
        image = image[..., None]
    return image.permute(2, 0, 1)[None]


def ssim(a, b, window_size=SSIM_WINDOW):
    """
    Mean local SSIM over every channel.

    Uses an 11×11 Gaussian window (σ = 1.5) over valid positions only, so both
    images must be at least one window wide and tall.
    """
    a = torch.as_tensor(a)
    b = torch.as_tensor(b, dtype=a.dtype)
    _check_pair(a, b)
    if a.shape[0] < window_size or a.shape[1] < window_size:
        raise InvalidArgument(f'images must be at least {window_size}×{window_size} for SSIM')
    img1, img2 = _as_batch(a), _as_batch(b)
    channel = img1.shape[1]
    window = create_window(window_size, channel, a.dtype)

    mu1 = F.conv2d(img1, window, groups=channel)
    mu2 = F.conv2d(img2, window, groups=channel)
    mu1_sq = mu1.pow(2)
    mu2_sq = mu2.pow(2)
    mu1_mu2 = mu1 * mu2
    sigma1_sq = F.conv2d(img1 * img1, window, groups=channel) - mu1_sq
    sigma2_sq = F.conv2d(img2 * img2, window, groups=channel) - mu2_sq
    sigma12 = F.conv2d(img1 * img2, window, groups=channel) - mu1_mu2

    ssim_map = ((2 * mu1_mu2 + C1) * (2 * sigma12 + C2)) / ((mu1_sq + mu2_sq + C1) * (sigma1_sq + sigma2_sq + C2))
    return ssim_map.mean()


def l1_loss(a, b):
    return torch.abs(a - b).mean()


def l_rad(rendered, gt, lambda_ssim=0.2):
    """(1 − λ)·L1 + λ·(1 − SSIM)."""
    gt = torch.as_tensor(gt, dtype=rendered.dtype)
    _check_pair(rendered, gt)
    return (1.0 - lambda_ssim) * l1_loss(rendered, gt) + lambda_ssim * (1.0 - ssim(rendered, gt))

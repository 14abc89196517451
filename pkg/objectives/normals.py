"""
Normal-map comparisons and depth-derived normals.

Normal maps are [H, W, 3] in the camera frame; zero vectors mark pixels
without a normal and never enter a loss.
"""
import torch


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def _nonzero(normals):
    return _dot(normals, normals) > 0


def normalize(vectors):
    """Unit vectors; zero vectors stay zero."""
    length2 = _dot(vectors, vectors)
    valid = length2 > 0
    length = torch.sqrt(torch.where(valid, length2, torch.ones_like(length2)))
    return torch.where(valid[..., None], vectors / length[..., None], torch.zeros_like(vectors))


def cosine_loss(a, b, mask=None, weight=None):
    """
    Mean of ``weight``·(1 − a·b) over masked pixels where both normals are nonzero.

    Returns 0 when no pixel qualifies.
    """
    valid = _nonzero(a) & _nonzero(b)
    if mask is not None:
        mask = torch.as_tensor(mask)
        valid = valid & (mask if mask.dtype == torch.bool else mask > 0.5)
    term = 1.0 - _dot(a, b)
    if weight is not None:
        term = term * weight
    count = valid.sum()
    total = torch.where(valid, term, torch.zeros_like(term)).sum()
    return total / count.clamp(min=1).to(total.dtype)


def depth_to_normal(depth, camera):
    """
    Camera-frame normals of a depth map.

    Pixels are back-projected along z-scaled rays, tangents are central
    differences, and the normal is their normalized cross product facing the
    camera. Border pixels and pixels next to invalid (zero) depth get a zero
    normal.
    """
    rays = camera.camera_rays(depth.dtype)
    points = rays * depth[..., None]
    valid = depth > 0
    normal = torch.zeros_like(points)
    if depth.shape[0] < 3 or depth.shape[1] < 3:
        return normal
    dx = points[1:-1, 2:] - points[1:-1, :-2]
    dy = points[2:, 1:-1] - points[:-2, 1:-1]
    raw = torch.linalg.cross(dx, dy, dim=-1)
    center = points[1:-1, 1:-1]
    facing = torch.where(_dot(raw, center) > 0, -torch.ones_like(raw[..., 0]), torch.ones_like(raw[..., 0]))
    interior = normalize(raw * facing[..., None])
    ok = (valid[1:-1, 1:-1] & valid[1:-1, 2:] & valid[1:-1, :-2] & valid[2:, 1:-1] & valid[:-2, 1:-1])
    interior = torch.where(ok[..., None], interior, torch.zeros_like(interior))
    return torch.nn.functional.pad(interior.permute(2, 0, 1), (1, 1, 1, 1)).permute(1, 2, 0)


def normal_supervision(iteration, switch_iteration, prior_normals, volume_normals, volume_confidence):
    """
    Normal map supervising the surfel branch at ``iteration``.

    Up to and including ``switch_iteration`` the prior normals are used;
    afterwards the volume normals scaled by their confidence and renormalized,
    so zero-confidence pixels drop out.
    """
    if iteration <= switch_iteration:
        return prior_normals
    return normalize(volume_normals * volume_confidence[..., None])

"""
Rotation and covariance helpers for flattened Gaussians.

Quaternions are stored (w, x, y, z). Every function accepts a single value
or a leading batch dimension.
"""
import torch


def quaternion_to_matrix(q):
    """[..., 4] quaternions -> [..., 3, 3] rotation matrices (inputs are normalized first)."""
    w, x, y, z = q.unbind(-1)
    norm = torch.sqrt(w * w + x * x + y * y + z * z)
    w, x, y, z = w / norm, x / norm, y / norm, z / norm
    rows = (
        torch.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], dim=-1),
        torch.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], dim=-1),
        torch.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], dim=-1),
    )
    return torch.stack(rows, dim=-2)


def surfel_normal(q):
    """Normal of a surfel: the third column of its rotation matrix."""
    return quaternion_to_matrix(q)[..., :, 2]


def covariance(q, scale):
    """
    Σ = R S Sᵀ Rᵀ with the third scale fixed to zero.

    Written as s₁² t₁t₁ᵀ + s₂² t₂t₂ᵀ over the two in-plane axes with
    elementwise products only, so a surfel's result never depends on the batch it sits in.
    """
    R = quaternion_to_matrix(q)
    t1, t2 = R[..., :, 0], R[..., :, 1]
    s2 = scale * scale
    return (s2[..., 0, None, None] * t1[..., :, None] * t1[..., None, :]
            + s2[..., 1, None, None] * t2[..., :, None] * t2[..., None, :])


def random_quaternions(count, generator=None, dtype=torch.float32):
    """Uniformly distributed unit quaternions."""
    q = torch.randn(count, 4, generator=generator, dtype=torch.float64)
    q = q / torch.linalg.norm(q, dim=-1, keepdim=True)
    return q.to(dtype)


def axis_angle_quaternion(axis, angle):
    axis = torch.as_tensor(axis, dtype=torch.float64)
    axis = axis / torch.linalg.norm(axis)
    half = torch.as_tensor(angle, dtype=torch.float64) / 2
    return torch.cat([torch.cos(half).reshape(1), torch.sin(half) * axis])

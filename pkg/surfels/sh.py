"""
Real spherical harmonics up to order 3.

Coefficients are laid out basis-major, channel-minor: a flat list of
3·(order+1)² scalars reshapes to ``[(order+1)², 3]``. Colors follow the
splatting convention ``clamp(Σ h·Y + 0.5, 0, 1)``.
"""
import torch

from .exceptions import InvalidArgument

MAX_SH_ORDER = 3
MAX_SH_BASIS = (MAX_SH_ORDER + 1) ** 2

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

COLOR_OFFSET = 0.5


def sh_basis_count(order):
    return (order + 1) ** 2


def sh_coeff_count(order):
    """Number of scalars an order-``order`` RGB expansion stores."""
    if isinstance(order, bool) or not isinstance(order, int) or not 0 <= order <= MAX_SH_ORDER:
        raise InvalidArgument(f'SH order must be an integer in 0..{MAX_SH_ORDER}, got {order!r}')
    return 3 * sh_basis_count(order)


def sh_basis(dirs):
    """
    Evaluate all 16 real SH basis functions.

    dirs: [..., 3] unit vectors. Returns [..., 16].
    """
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    return torch.stack([
        torch.full_like(x, SH_C0),
        -SH_C1 * y,
        SH_C1 * z,
        -SH_C1 * x,
        SH_C2[0] * xy,
        SH_C2[1] * yz,
        SH_C2[2] * (2.0 * zz - xx - yy),
        SH_C2[3] * xz,
        SH_C2[4] * (xx - yy),
        SH_C3[0] * y * (3 * xx - yy),
        SH_C3[1] * xy * z,
        SH_C3[2] * y * (4 * zz - xx - yy),
        SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy),
        SH_C3[4] * x * (4 * zz - xx - yy),
        SH_C3[5] * z * (xx - yy),
        SH_C3[6] * x * (xx - 3 * yy),
    ], dim=-1)


def basis_mask(orders, dtype=torch.float32):
    """[N] integer orders -> [N, 16] mask of the active basis functions."""
    index = torch.arange(MAX_SH_BASIS, device=orders.device)
    return (index[None, :] < ((orders[:, None] + 1) ** 2)).to(dtype)


def eval_sh(sh, orders, dirs):
    """
    Batched color evaluation for padded coefficient blocks.

    sh: [N, 16, 3] padded coefficients, orders: [N] integer orders,
    dirs: [N, 3] unit viewing directions. Returns [N, 3] in [0, 1].
    Coefficients above a surfel's order never contribute, so their gradient is zero.
    """
    basis = sh_basis(dirs) * basis_mask(orders, dtype=dirs.dtype)
    raw = sh[:, 0] * basis[:, 0:1]
    for k in range(1, MAX_SH_BASIS):
        raw = raw + sh[:, k] * basis[:, k:k + 1]
    return torch.clamp(raw + COLOR_OFFSET, 0.0, 1.0)


def sh_eval(coeffs, order, direction):
    """Color of a single coefficient list seen along ``direction``."""
    coeffs = torch.as_tensor(coeffs, dtype=torch.float64)
    direction = torch.as_tensor(direction, dtype=coeffs.dtype)
    expected = sh_coeff_count(order)
    if coeffs.numel() != expected:
        raise InvalidArgument(
            f'order {order} needs {expected} coefficients, got {coeffs.numel()}'
        )
    if abs(float(torch.linalg.norm(direction)) - 1.0) > 1e-6:
        raise InvalidArgument('direction must have unit norm')
    count = sh_basis_count(order)
    basis = sh_basis(direction)[:count]
    raw = (coeffs.reshape(count, 3) * basis[:, None]).sum(dim=0)
    return torch.clamp(raw + COLOR_OFFSET, 0.0, 1.0)


def pad_coefficients(coeffs, order):
    """Flat coefficient list -> [16, 3] block padded with zeros."""
    coeffs = torch.as_tensor(coeffs, dtype=torch.float64)
    count = sh_basis_count(order)
    block = torch.zeros(MAX_SH_BASIS, 3, dtype=coeffs.dtype)
    block[:count] = coeffs.reshape(count, 3)
    return block

"""
Screen-space projection of flattened Gaussians.

Every per-surfel quantity is written with elementwise tensor arithmetic
only, so a surfel's projected values do not depend on which other surfels
share the batch.
"""
from dataclasses import dataclass

import torch

from surfels.cloud import SurfelCloud
from surfels.sh import eval_sh
from surfels.transforms import quaternion_to_matrix


@dataclass(frozen=True)
class RenderSettings:
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.999
    dilation: float = 0.3
    coverage_eps: float = 1e-5
    grazing_eps: float = 1e-4
    footprint_sigma: float = 3.0
    tile_size: int = 16


DEFAULT_SETTINGS = RenderSettings()


@dataclass
class ProjectedSplat:
    """One surfel after projection into a camera."""
    index: int
    mean2d: torch.Tensor
    cov2d: torch.Tensor
    view_depth: float
    plane_normal: torch.Tensor
    plane_offset: float
    intrinsics: tuple
    depth_range: tuple = (0.0, float('inf'))

    @property
    def conic(self):
        return torch.linalg.inv(self.cov2d)


@dataclass
class ProjectedSplats:
    """Batched projection of a whole cloud; ``visible`` marks surfels that survived culling."""
    mean2d: torch.Tensor
    cov2d: torch.Tensor
    conic: torch.Tensor
    view_depth: torch.Tensor
    plane_normal: torch.Tensor
    plane_offset: torch.Tensor
    opacity: torch.Tensor
    color: torch.Tensor
    normal: torch.Tensor
    normal_world: torch.Tensor
    confidence: torch.Tensor
    visible: torch.Tensor
    intrinsics: tuple
    depth_range: tuple = (0.0, float('inf'))

    def __len__(self):
        return self.mean2d.shape[0]

    def splat(self, index):
        return ProjectedSplat(
            index=int(index),
            mean2d=self.mean2d[index].detach(),
            cov2d=self.cov2d[index].detach(),
            view_depth=float(self.view_depth[index]),
            plane_normal=self.plane_normal[index].detach(),
            plane_offset=float(self.plane_offset[index]),
            intrinsics=self.intrinsics,
            depth_range=self.depth_range,
        )


def _rotate(R, v):
    """R @ v for a fixed 3×3 matrix and a batch of vectors, written out per component."""
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    return torch.stack([R[i, 0] * x + R[i, 1] * y + R[i, 2] * z for i in range(3)], dim=-1)


def _dot(a, b):
    return a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1] + a[..., 2] * b[..., 2]


def project_cloud(cloud, camera, settings=DEFAULT_SETTINGS):
    """
    Project every surfel of ``cloud`` into ``camera``.

    cov2d = J·W·Σ·Wᵀ·Jᵀ + dilation·I, evaluated as Σᵢ sᵢ²(J uᵢ)(J uᵢ)ᵀ over the
    camera-frame tangent axes uᵢ. Surfels behind the near plane, beyond the far
    plane or whose footprint misses the image are marked invisible.
    """
    dtype = cloud.dtype
    R = camera.rotation.to(dtype)
    t = camera.translation.to(dtype)
    fx, fy, cx, cy = camera.fx, camera.fy, camera.cx, camera.cy

    xyz = cloud.get_xyz
    p_cam = _rotate(R, xyz) + t
    z_raw = p_cam[:, 2]
    in_depth = (z_raw > camera.near) & (z_raw < camera.far)
    z = torch.where(in_depth, z_raw, torch.ones_like(z_raw))
    x, y = p_cam[:, 0], p_cam[:, 1]

    rot = quaternion_to_matrix(cloud.parameters()['rotation'])
    scale = cloud.get_scaling
    u1 = _rotate(R, rot[..., :, 0])
    u2 = _rotate(R, rot[..., :, 1])
    normal_world = rot[..., :, 2]
    n_cam = _rotate(R, normal_world)

    def jacobian(u):
        return (fx / z * u[:, 0] - fx * x / (z * z) * u[:, 2],
                fy / z * u[:, 1] - fy * y / (z * z) * u[:, 2])

    a1x, a1y = jacobian(u1)
    a2x, a2y = jacobian(u2)
    s1, s2 = scale[:, 0] * scale[:, 0], scale[:, 1] * scale[:, 1]
    cxx = s1 * a1x * a1x + s2 * a2x * a2x + settings.dilation
    cxy = s1 * a1x * a1y + s2 * a2x * a2y
    cyy = s1 * a1y * a1y + s2 * a2y * a2y + settings.dilation
    cov2d = torch.stack([torch.stack([cxx, cxy], -1), torch.stack([cxy, cyy], -1)], -2)
    det = cxx * cyy - cxy * cxy
    conic = torch.stack([cyy / det, -cxy / det, cxx / det], dim=-1)

    mean2d = torch.stack([fx * x / z + cx, fy * y / z + cy], dim=-1)

    # face the camera (camera center is the origin of the camera frame)
    facing = torch.where(_dot(n_cam, p_cam) > 0, -torch.ones_like(z), torch.ones_like(z))
    n_cam = n_cam * facing[:, None]
    plane_offset = _dot(n_cam, p_cam)

    k = settings.footprint_sigma
    ext_x = k * torch.sqrt(cxx.detach())
    ext_y = k * torch.sqrt(cyy.detach())
    mx, my = mean2d[:, 0].detach(), mean2d[:, 1].detach()
    on_screen = (mx + ext_x > 0) & (mx - ext_x < camera.width) & (my + ext_y > 0) & (my - ext_y < camera.height)
    visible = in_depth & on_screen

    center = camera.center.to(dtype)
    view_dir = xyz - center
    view_len = torch.sqrt(_dot(view_dir, view_dir))
    view_dir = view_dir / view_len[:, None]
    color = eval_sh(cloud.parameters()['sh'], cloud.sh_order, view_dir)

    return ProjectedSplats(
        mean2d=mean2d,
        cov2d=cov2d,
        conic=conic,
        view_depth=z,
        plane_normal=n_cam,
        plane_offset=plane_offset,
        opacity=cloud.get_opacity,
        color=color,
        normal=n_cam,
        normal_world=normal_world,
        confidence=cloud.get_confidence,
        visible=visible,
        intrinsics=(fx, fy, cx, cy),
        depth_range=(camera.near, camera.far),
    )


def project_surfel(surfel, camera, settings=DEFAULT_SETTINGS):
    """Project a single Surfel; returns ``None`` when it is culled."""
    splats = project_cloud(SurfelCloud.from_surfels([surfel]), camera, settings)
    if not bool(splats.visible[0]):
        return None
    return splats.splat(0)


def plane_depth(rays, normal, offset, view_depth, depth_range, grazing_eps=DEFAULT_SETTINGS.grazing_eps):
    """
    Depth where camera rays (z = 1 scaled) meet surfel planes ``n·X = offset``.

    Rays nearly parallel to the plane fall back to the surfel's view depth.
    Depths are clamped to ``depth_range``, the camera's (near, far).
    Broadcasts over leading dimensions.
    """
    denom = _dot(rays, normal)
    ray_len = torch.sqrt(_dot(rays, rays))
    grazing = denom.abs() < grazing_eps * ray_len
    safe = torch.where(grazing, torch.ones_like(denom), denom)
    depth = torch.where(grazing, view_depth.expand_as(denom), offset / safe)
    return torch.clamp(depth, *depth_range)


def _pixel_ray(pixel, intrinsics, dtype=torch.float64):
    fx, fy, cx, cy = intrinsics
    pixel = torch.as_tensor(pixel, dtype=dtype)
    return torch.stack([(pixel[0] - cx) / fx, (pixel[1] - cy) / fy, torch.ones((), dtype=dtype)])


def pixel_depth(splat, pixel, settings=DEFAULT_SETTINGS):
    """Depth of ``splat``'s plane along the camera ray through ``pixel`` (image coordinates)."""
    ray = _pixel_ray(pixel, splat.intrinsics, splat.plane_normal.dtype)
    depth = plane_depth(ray, splat.plane_normal, torch.as_tensor(splat.plane_offset, dtype=ray.dtype),
                        torch.as_tensor(splat.view_depth, dtype=ray.dtype), splat.depth_range, settings.grazing_eps)
    return float(depth)


def splat_alpha(splat, opacity, pixel, settings=DEFAULT_SETTINGS):
    """Opacity-weighted footprint at ``pixel``; values below ``alpha_min`` are discarded."""
    d = torch.as_tensor(pixel, dtype=splat.mean2d.dtype) - splat.mean2d
    power = -0.5 * (d @ splat.conic @ d)
    alpha = min(float(opacity) * float(torch.exp(power)), settings.alpha_max)
    if alpha < settings.alpha_min:
        return 0.0
    return alpha

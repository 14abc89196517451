"""
Geometry losses tying rendered surfel normals to prior normals and to their own depth.
"""
from .normals import cosine_loss, depth_to_normal


def l_geo(rendered_normal, rendered_depth, prior_normal, mask, lambda_n, lambda_s, camera, depth_normal=None):
    """λ_n·cos(N_g, N) + λ_s·cos(N_g, F(D_g)) over masked pixels."""
    if depth_normal is None:
        depth_normal = depth_to_normal(rendered_depth, camera)
    return (lambda_n * cosine_loss(rendered_normal, prior_normal, mask)
            + lambda_s * cosine_loss(rendered_normal, depth_normal, mask))


def l_geo_adaptive(rendered_normal, rendered_depth, prior_normal, mask, confidence, lambda_n, lambda_s, camera,
                   depth_normal=None):
    """
    ``l_geo`` plus a confidence-weighted second pass.

    The extra term weights λ_n·cos(N_g, N) + λ_s·cos(N, F(D_g)) by the rendered
    surfel confidence F_g per pixel; note it compares the prior N, not N_g,
    against the depth normals.
    """
    if depth_normal is None:
        depth_normal = depth_to_normal(rendered_depth, camera)
    base = l_geo(rendered_normal, rendered_depth, prior_normal, mask, lambda_n, lambda_s, camera, depth_normal)
    weighted = (lambda_n * cosine_loss(rendered_normal, prior_normal, mask, weight=confidence)
                + lambda_s * cosine_loss(prior_normal, depth_normal, mask, weight=confidence))
    return base + weighted

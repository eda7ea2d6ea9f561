"""Differentiable splat rasterizer.

Splats are projected to screen-space Gaussians with the first-order
(EWA) approximation ``cov2d = J cov_cam J^T``, sorted front to back by camera
depth of their centres, and alpha-composited per pixel::

    alpha_i = min(opacity_i * exp(-0.5 d^T cov2d^-1 d), ALPHA_MAX)
    rgb     = sum_i c_i alpha_i T_i,        T_i = prod_{j<i} (1 - alpha_j)
    sil     = sum_i alpha_i T_i
    depth   = sum_i z_i alpha_i T_i / max(sil, DEPTH_EPS)

Contributions with ``alpha_i < ALPHA_CUT`` are skipped. :func:`render`
visits only the pixels inside each splat's alpha-cut radius, then
composites the surviving (pixel, splat) pairs with segmented scans, so it
reproduces :func:`render_reference` while doing work proportional to the
splats' footprints. Gradients are
analytic; pose gradients are taken with respect to the tangent update used by
:meth:`gosm.core.Pose.retract`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import CameraIntrinsics, Frame, Pose, SplatMap, quat_rotmat_jacobian, quat_to_rotmat
from .errors import DegenerateLossError

ALPHA_CUT = 1.0 / 255.0
ALPHA_MAX = 0.999
DEPTH_EPS = 1e-6
NEAR_PLANE = 0.01

_E = np.array([  # generators of so(3): _E[k] = hat(e_k)
    [[0, 0, 0], [0, 0, -1], [0, 1, 0]],
    [[0, 0, 1], [0, 0, 0], [-1, 0, 0]],
    [[0, -1, 0], [1, 0, 0], [0, 0, 0]],
], dtype=float)


@dataclass
class RenderOutput:
    rgb: NDArray
    depth: NDArray
    silhouette: NDArray


@dataclass
class SplatGradients:
    means: NDArray
    scales: NDArray
    quats: NDArray
    colors: NDArray
    opacities: NDArray

    @classmethod
    def zeros(cls, n: int) -> SplatGradients:
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n))

    def __iadd__(self, other: SplatGradients) -> SplatGradients:
        for name in ("means", "scales", "quats", "colors", "opacities"):
            getattr(self, name).__iadd__(getattr(other, name))
        return self

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, n))) for n in ("means", "scales", "quats", "colors", "opacities"))


@dataclass
class RenderGradients:
    d_pose: NDArray
    d_splats: SplatGradients | None


@dataclass
class LossWeights:
    """Weights and masks of the masked L1 objective.

    ``visibility`` is the silhouette a pixel must exceed for its color and
    depth residuals to count. ``coverage`` weights a hinge penalty
    ``max(0, coverage_target - silhouette)`` over every pixel with valid
    target depth; tracking leaves it at zero.
    """

    color: float = 0.5
    depth: float = 1.0
    visibility: float = 0.99
    coverage: float = 0.0
    coverage_target: float = 0.99

    def __post_init__(self):
        if min(self.color, self.depth, self.coverage) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.color == 0 and self.depth == 0 and self.coverage == 0:
            raise ValueError("at least one loss weight must be positive")


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

@dataclass
class _Projected:
    idx: NDArray        # (M,) map indices, front to back
    p: NDArray          # (M, 3) camera-space centres
    J: NDArray          # (M, 2, 3)
    cov_c: NDArray      # (M, 3, 3)
    conic: NDArray      # (M, 3) a, b, c of the inverse 2D covariance
    mean2d: NDArray     # (M, 2)
    radius: NDArray     # (M,) screen radius beyond which alpha < ALPHA_CUT
    opacity: NDArray
    color: NDArray
    rot_q: NDArray      # (M, 3, 3) splat rotation
    qhat: NDArray       # (M, 4) normalised quaternion
    qnorm: NDArray      # (M,)
    scale: NDArray      # (M, 3)


def _project_splats(m: SplatMap, pose: Pose, K: CameraIntrinsics) -> _Projected:
    R, t = pose.rotation, pose.translation
    p_all = (m.means - t) @ R
    keep = (p_all[:, 2] > NEAR_PLANE) & (m.opacities >= ALPHA_CUT)
    idx = np.flatnonzero(keep)
    p = p_all[idx]
    idx = idx[np.lexsort((idx, p[:, 2]))]
    p = p_all[idx]

    qnorm = np.linalg.norm(m.quats[idx], axis=1)
    qhat = m.quats[idx] / qnorm[:, None]
    rot_q = quat_to_rotmat(qhat)
    scale = m.scales[idx]
    Mf = rot_q * scale[:, None, :]
    cov_w = Mf @ np.swapaxes(Mf, 1, 2)
    cov_c = R.T @ cov_w @ R

    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    J = np.zeros((len(idx), 2, 3))
    J[:, 0, 0] = K.fx / z
    J[:, 0, 2] = -K.fx * x / z ** 2
    J[:, 1, 1] = K.fy / z
    J[:, 1, 2] = -K.fy * y / z ** 2
    cov2 = J @ cov_c @ np.swapaxes(J, 1, 2)
    s00, s01, s11 = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = s00 * s11 - s01 * s01
    conic = np.stack([s11 / det, -s01 / det, s00 / det], axis=1)
    mean2d = np.stack([K.fx * x / z + K.cx, K.fy * y / z + K.cy], axis=1)

    half_tr = 0.5 * (s00 + s11)
    lam_max = half_tr + np.sqrt(np.maximum(half_tr ** 2 - det, 0.0))
    op = m.opacities[idx]
    radius = np.sqrt(2.0 * np.log(np.maximum(op / ALPHA_CUT, 1.0)) * lam_max)
    return _Projected(idx, p, J, cov_c, conic, mean2d, radius, op, m.colors[idx],
                      rot_q, qhat, qnorm, scale)


# --------------------------------------------------------------------------
# sparse compositing
# --------------------------------------------------------------------------

@dataclass
class _Pairs:
    """Every (pixel, splat) pair with alpha >= ALPHA_CUT, grouped by pixel front to back."""

    pixel: NDArray      # flat pixel index
    rank: NDArray       # position into the _Projected arrays
    start: NDArray      # index of the first pair of the same pixel
    dx: NDArray
    dy: NDArray
    g: NDArray
    a_raw: NDArray
    alpha: NDArray
    T: NDArray
    w: NDArray


def _footprints(proj: _Projected, K: CameraIntrinsics):
    """Pixel/splat pairs inside each splat's alpha-cut square, splat-major.

    Returns the per-splat pair counts alongside, so per-splat values can be
    expanded with ``np.repeat`` instead of gathered.
    """
    mx, my, r = proj.mean2d[:, 0], proj.mean2d[:, 1], proj.radius
    u0 = np.maximum(np.ceil(mx - r), 0).astype(np.int32)
    u1 = np.minimum(np.floor(mx + r), K.width - 1).astype(np.int32)
    v0 = np.maximum(np.ceil(my - r), 0).astype(np.int32)
    v1 = np.minimum(np.floor(my + r), K.height - 1).astype(np.int32)
    nu = np.maximum(u1 - u0 + 1, 0)
    nv = np.maximum(v1 - v0 + 1, 0)
    counts = nu * nv
    local = np.arange(int(counts.sum()), dtype=np.int32) - np.repeat((np.cumsum(counts) - counts).astype(np.int32), counts)
    v_off, u_off = np.divmod(local, np.repeat(np.maximum(nu, 1), counts))
    return counts, np.repeat(u0, counts) + u_off, np.repeat(v0, counts) + v_off


def _composite(proj: _Projected, K: CameraIntrinsics, need_grad: bool = True) -> _Pairs:
    counts, u, v = _footprints(proj, K)
    dx = u - np.repeat(proj.mean2d[:, 0], counts)
    dy = v - np.repeat(proj.mean2d[:, 1], counts)
    con = proj.conic
    power = (np.repeat(con[:, 0], counts) * dx * dx + 2.0 * np.repeat(con[:, 1], counts) * dx * dy
             + np.repeat(con[:, 2], counts) * dy * dy)
    g = np.exp(np.minimum(-0.5 * power, 0.0))
    a_raw = np.repeat(proj.opacity, counts) * g
    keep = np.flatnonzero(a_raw >= ALPHA_CUT)
    pixel = v[keep] * K.width + u[keep]
    # pairs are splat-major, so a stable sort by pixel keeps front-to-back
    # order; 16-bit keys let numpy use a radix sort
    key = pixel.astype(np.uint16) if K.height * K.width <= 1 << 16 else pixel
    perm = np.argsort(key, kind="stable")
    order = keep[perm]
    pixel = pixel[perm].astype(np.int64)
    rank = np.repeat(np.arange(len(counts), dtype=np.int32), counts)[order]
    a_raw = a_raw[order]
    if need_grad:
        dx, dy, g = dx[order], dy[order], g[order]
    else:
        dx = dy = g = None
    alpha = np.minimum(a_raw, ALPHA_MAX)

    n = len(pixel)
    first = np.ones(n, dtype=bool)
    first[1:] = pixel[1:] != pixel[:-1]
    start = np.maximum.accumulate(np.where(first, np.arange(n), 0)) if n else np.zeros(0, dtype=np.int64)
    log_keep = np.log1p(-alpha)
    excl = np.cumsum(log_keep) - log_keep
    T = np.exp(excl - excl[start])
    return _Pairs(pixel, rank, start, dx, dy, g, a_raw, alpha, T, alpha * T)


def _assemble(K: CameraIntrinsics, proj: _Projected, pr: _Pairs):
    npx = K.height * K.width
    sil = np.bincount(pr.pixel, pr.w, minlength=npx)
    rgb = np.stack([np.bincount(pr.pixel, pr.w * proj.color[pr.rank, k], minlength=npx) for k in range(3)], axis=1)
    dacc = np.bincount(pr.pixel, pr.w * proj.p[pr.rank, 2], minlength=npx)
    return rgb.reshape(K.height, K.width, 3), sil.reshape(K.height, K.width), dacc.reshape(K.height, K.width)


def _backward(proj: _Projected, pr: _Pairs, Gc: NDArray, GD: NDArray, GS: NDArray) -> dict:
    """Per-splat partials of the loss w.r.t. opacity, 2D mean, conic, colour and depth."""
    M = len(proj.idx)
    Gc, GD, GS = Gc.reshape(-1, 3), GD.reshape(-1), GS.reshape(-1)
    gc = Gc[pr.pixel]
    gd = GD[pr.pixel]
    col = proj.color[pr.rank]
    z = proj.p[pr.rank, 2]
    h = (gc * col).sum(axis=1) + gd * z + GS[pr.pixel]
    hw = h * pr.w
    incl = np.cumsum(hw)
    before = incl[pr.start] - hw[pr.start]
    total = np.bincount(pr.pixel, hw, minlength=len(GD))[pr.pixel]
    suffix = total - (incl - before)
    dalpha = np.where(pr.a_raw < ALPHA_MAX, h * pr.T - suffix / (1.0 - pr.alpha), 0.0)
    dpow = dalpha * pr.a_raw
    a, b, c = proj.conic[pr.rank, 0], proj.conic[pr.rank, 1], proj.conic[pr.rank, 2]
    dx, dy = pr.dx, pr.dy

    def acc(weights):
        return np.bincount(pr.rank, weights, minlength=M)

    return {
        "opacity": acc(dalpha * pr.g),
        "mean2d": np.stack([acc(dpow * (a * dx + b * dy)), acc(dpow * (b * dx + c * dy))], axis=1),
        "conic": np.stack([acc(dpow * (-0.5 * dx * dx)), acc(dpow * (-dx * dy)), acc(dpow * (-0.5 * dy * dy))], axis=1),
        "color": np.stack([acc(pr.w * gc[:, k]) for k in range(3)], axis=1),
        "z": acc(pr.w * gd),
    }


def _render_internal(m: SplatMap, pose: Pose, K: CameraIntrinsics, need_grad: bool = False):
    proj = _project_splats(m, pose, K)
    pairs = _composite(proj, K, need_grad)
    rgb, sil, dacc = _assemble(K, proj, pairs)
    depth = dacc / np.maximum(sil, DEPTH_EPS)
    return proj, pairs, RenderOutput(rgb, depth, sil), dacc


def render(m: SplatMap, pose: Pose, intrinsics: CameraIntrinsics) -> RenderOutput:
    """Render RGB, depth and silhouette images of ``m`` seen from ``pose``."""
    return _render_internal(m, pose, intrinsics)[2]


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------

def _chain_to_params(proj: _Projected, pose: Pose, K: CameraIntrinsics, acc: dict, want_splats: bool):
    R = pose.rotation
    A = np.empty((len(proj.idx), 2, 2))
    A[:, 0, 0], A[:, 0, 1], A[:, 1, 0], A[:, 1, 1] = (proj.conic[:, 0], proj.conic[:, 1],
                                                      proj.conic[:, 1], proj.conic[:, 2])
    dA = np.empty_like(A)
    dA[:, 0, 0] = acc["conic"][:, 0]
    dA[:, 0, 1] = dA[:, 1, 0] = 0.5 * acc["conic"][:, 1]
    dA[:, 1, 1] = acc["conic"][:, 2]
    dcov2 = -A @ dA @ A
    J, Jt = proj.J, np.swapaxes(proj.J, 1, 2)
    dcov_c = Jt @ dcov2 @ J
    dJ = 2.0 * dcov2 @ J @ proj.cov_c

    x, y, z = proj.p[:, 0], proj.p[:, 1], proj.p[:, 2]
    dp = np.einsum("mij,mi->mj", J, acc["mean2d"])
    dp[:, 0] += dJ[:, 0, 2] * (-K.fx / z ** 2)
    dp[:, 1] += dJ[:, 1, 2] * (-K.fy / z ** 2)
    dp[:, 2] += (dJ[:, 0, 0] * (-K.fx / z ** 2) + dJ[:, 0, 2] * (2 * K.fx * x / z ** 3)
                 + dJ[:, 1, 1] * (-K.fy / z ** 2) + dJ[:, 1, 2] * (2 * K.fy * y / z ** 3)
                 + acc["z"])

    d_omega = np.cross(dp, proj.p).sum(axis=0)
    # d cov_c / d omega_k = -E_k cov_c + cov_c E_k
    comm = dcov_c @ proj.cov_c - proj.cov_c @ dcov_c
    d_omega += np.einsum("mij,kji->k", comm, _E)
    d_tau = -R @ dp.sum(axis=0)
    d_pose = np.concatenate([d_omega, d_tau])

    if not want_splats:
        return d_pose, None
    d_means = dp @ R.T
    dcov_w = R @ dcov_c @ R.T
    Mf = proj.rot_q * proj.scale[:, None, :]
    dM = 2.0 * dcov_w @ Mf
    d_scales = (dM * proj.rot_q).sum(axis=1)
    dRq = dM * proj.scale[:, None, :]
    dqhat = np.einsum("mkij,mij->mk", quat_rotmat_jacobian(proj.qhat), dRq)
    d_quats = (dqhat - proj.qhat * (proj.qhat * dqhat).sum(axis=1, keepdims=True)) / proj.qnorm[:, None]
    return d_pose, SplatGradients(d_means, d_scales, d_quats, acc["color"], acc["opacity"])


def _masked_l1(out: RenderOutput, dacc: NDArray, target_rgb: NDArray, target_depth: NDArray,
               weights: LossWeights, pixel_mask: NDArray | None = None):
    """Loss value and its gradients w.r.t. composited rgb, depth accumulator and silhouette."""
    sil = out.silhouette
    valid = target_depth > 0
    mask = valid & (sil > weights.visibility if pixel_mask is None else pixel_mask)
    n_mask = int(mask.sum())
    n_valid = int(valid.sum())
    use_cov = weights.coverage > 0 and n_valid > 0
    use_l1 = n_mask > 0 and (weights.color > 0 or weights.depth > 0)
    if not use_l1 and not use_cov:
        raise DegenerateLossError("no pixel passes the visibility and valid-depth mask")

    H, W = sil.shape
    Gc = np.zeros((H, W, 3))
    Gdepth = np.zeros((H, W))
    GS = np.zeros((H, W))
    loss = 0.0
    if use_l1:
        r_rgb = out.rgb - target_rgb
        r_d = out.depth - target_depth
        loss += weights.color * np.abs(r_rgb[mask]).sum() / (3 * n_mask)
        loss += weights.depth * np.abs(r_d[mask]).sum() / n_mask
        Gc[mask] = weights.color * np.sign(r_rgb[mask]) / (3 * n_mask)
        Gdepth[mask] = weights.depth * np.sign(r_d[mask]) / n_mask
    if use_cov:
        short = valid & (sil < weights.coverage_target)
        loss += weights.coverage * (weights.coverage_target - sil[short]).sum() / n_valid
        GS[short] -= weights.coverage / n_valid
    denom = np.maximum(sil, DEPTH_EPS)
    GD = Gdepth / denom
    GS -= np.where(sil > DEPTH_EPS, Gdepth * dacc / denom ** 2, 0.0)
    return float(loss), Gc, GD, GS, n_mask


def render_with_gradients(m: SplatMap, pose: Pose, intrinsics: CameraIntrinsics, target,
                          loss_weights: LossWeights | None = None, splat_gradients: bool = True,
                          pixel_mask: NDArray | None = None):
    """Masked L1 loss of the render against ``target`` and its analytic gradients.

    ``target`` is a :class:`~gosm.core.Frame` or an ``(rgb, depth)`` pair.
    ``pixel_mask`` replaces the rendered-silhouette visibility test with a
    fixed boolean image (valid target depth is still required).
    Returns ``(loss, RenderGradients)``; ``d_splats`` is ``None`` when
    ``splat_gradients`` is false.
    """
    weights = loss_weights or LossWeights()
    if isinstance(target, Frame):
        t_rgb, t_depth = target.rgb, target.depth
    else:
        t_rgb, t_depth = target
    if t_depth.shape != intrinsics.shape:
        raise ValueError(f"target shape {t_depth.shape} does not match intrinsics {intrinsics.shape}")

    proj, pairs, out, dacc = _render_internal(m, pose, intrinsics, need_grad=True)
    loss, Gc, GD, GS, _ = _masked_l1(out, dacc, t_rgb, t_depth, weights, pixel_mask)
    acc = _backward(proj, pairs, Gc, GD, GS)
    d_pose, vis_grads = _chain_to_params(proj, pose, intrinsics, acc, splat_gradients)
    if vis_grads is None:
        return loss, RenderGradients(d_pose, None)
    full = SplatGradients.zeros(len(m))
    full.means[proj.idx] = vis_grads.means
    full.scales[proj.idx] = vis_grads.scales
    full.quats[proj.idx] = vis_grads.quats
    full.colors[proj.idx] = vis_grads.colors
    full.opacities[proj.idx] = vis_grads.opacities
    return loss, RenderGradients(d_pose, full)


def masked_l1_loss(m: SplatMap, pose: Pose, intrinsics: CameraIntrinsics, target,
                   loss_weights: LossWeights | None = None, pixel_mask: NDArray | None = None) -> float:
    """Loss of :func:`render_with_gradients` without the backward pass."""
    weights = loss_weights or LossWeights()
    if isinstance(target, Frame):
        t_rgb, t_depth = target.rgb, target.depth
    else:
        t_rgb, t_depth = target
    _, _, out, dacc = _render_internal(m, pose, intrinsics)
    return _masked_l1(out, dacc, t_rgb, t_depth, weights, pixel_mask)[0]


# --------------------------------------------------------------------------
# reference
# --------------------------------------------------------------------------

def render_reference(m: SplatMap, pose: Pose, intrinsics: CameraIntrinsics) -> RenderOutput:
    """Brute-force renderer: every pixel visits every splat, no tiling or culling."""
    K = intrinsics
    H, W = K.height, K.width
    rgb = np.zeros((H, W, 3))
    depth = np.zeros((H, W))
    sil = np.zeros((H, W))

    means2d, inv2d, zs, ops, cols = [], [], [], [], []
    for i in range(len(m)):
        q = m.quats[i] / np.linalg.norm(m.quats[i])
        Rq = quat_to_rotmat(q)
        cov = Rq @ np.diag(m.scales[i] ** 2) @ Rq.T
        pc = pose.rotation.T @ (m.means[i] - pose.translation)
        if pc[2] <= NEAR_PLANE:
            continue
        J = np.array([[K.fx / pc[2], 0.0, -K.fx * pc[0] / pc[2] ** 2],
                      [0.0, K.fy / pc[2], -K.fy * pc[1] / pc[2] ** 2]])
        cov2 = J @ (pose.rotation.T @ cov @ pose.rotation) @ J.T
        means2d.append([K.fx * pc[0] / pc[2] + K.cx, K.fy * pc[1] / pc[2] + K.cy])
        inv2d.append(np.linalg.inv(cov2))
        zs.append(pc[2])
        ops.append(m.opacities[i])
        cols.append(m.colors[i])
    if not zs:
        return RenderOutput(rgb, depth, sil)

    order = np.argsort(np.asarray(zs), kind="stable")
    means2d = np.asarray(means2d)[order]
    inv2d = np.asarray(inv2d)[order]
    zs = np.asarray(zs)[order]
    ops = np.asarray(ops)[order]
    cols = np.asarray(cols)[order]
    for v in range(H):
        for u in range(W):
            d = np.array([u, v], dtype=float) - means2d
            q = np.einsum("ni,nij,nj->n", d, inv2d, d)
            alpha = np.minimum(ops * np.exp(-0.5 * q), ALPHA_MAX)
            alpha[alpha < ALPHA_CUT] = 0.0
            trans = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
            wts = alpha * trans
            rgb[v, u] = wts @ cols
            sil[v, u] = wts.sum()
            depth[v, u] = (wts @ zs) / max(sil[v, u], DEPTH_EPS)
    return RenderOutput(rgb, depth, sil)

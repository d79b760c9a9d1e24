"""Training objectives.

Every per-sample loss takes batched Tensors (leading axis B) and returns a
``(B,)`` Tensor; :func:`loss_total` reduces them with the taxon and
annotation gating used during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .camera import project_tensor
from .numkernel import Tensor, constant, log_softmax, make_node, matmul, sigmoid, where_mask


@dataclass
class Loss3DWeights:
    lambda_beta: float = 0.01
    lambda_theta: float = 0.2
    lambda_alpha: float = 0.04  # birds only; quadrupeds use 0

    def alpha_weight(self, taxon: str) -> float:
        return self.lambda_alpha if taxon == "avian" else 0.0


@dataclass
class Loss2DWeights:
    lambda_M: float = 2.0


@dataclass
class SmalPriorWeights:
    lambda_beta: float = 0.5


@dataclass
class AvesPriorWeights:
    lambda_beta: float = 0.5
    lambda_theta: float = 1.0


@dataclass
class LossWeights:
    lambda_3d: float = 0.05
    lambda_2d: float = 0.01
    lambda_smal_prior: float = 0.001
    lambda_con: float = 0.0005
    lambda_aves_prior: float = 0.002
    loss3d: Loss3DWeights = field(default_factory=Loss3DWeights)
    loss2d: Loss2DWeights = field(default_factory=Loss2DWeights)
    smal_prior: SmalPriorWeights = field(default_factory=SmalPriorWeights)
    aves_prior: AvesPriorWeights = field(default_factory=AvesPriorWeights)
    tau: float = 0.07
    mask_sharpness: float = 50.0  # per pixel

    def __post_init__(self):
        scalars = [self.lambda_3d, self.lambda_2d, self.lambda_smal_prior, self.lambda_con,
                   self.lambda_aves_prior, self.loss3d.lambda_beta, self.loss3d.lambda_theta,
                   self.loss3d.lambda_alpha, self.loss2d.lambda_M, self.smal_prior.lambda_beta,
                   self.aves_prior.lambda_beta, self.aves_prior.lambda_theta]
        if min(scalars) < 0:
            raise ValueError("loss weights must be nonnegative")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass
class PriorDistribution:
    """Gaussian shape/pose prior (quadruped) or mean pose/bone prior (avian)."""

    mu_beta: np.ndarray | None = None
    Sigma_beta: np.ndarray | None = None
    mu_theta: np.ndarray | None = None
    Sigma_theta: np.ndarray | None = None
    theta_bar: np.ndarray | None = None
    alpha_bar: np.ndarray | None = None
    prec_beta: np.ndarray | None = field(default=None, init=False, repr=False)
    prec_theta: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        for name in ("Sigma_beta", "Sigma_theta"):
            cov = getattr(self, name)
            if cov is None:
                continue
            cov = np.asarray(cov, dtype=np.float64)
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError(f"{name} must be a symmetric square matrix")
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"{name} is not positive definite") from exc
            inv_chol = np.linalg.inv(chol)
            prec = inv_chol.T @ inv_chol
            setattr(self, name, cov)
            setattr(self, "prec_beta" if name == "Sigma_beta" else "prec_theta", 0.5 * (prec + prec.T))


# ---------------------------------------------------------------------------
# contrastive


def loss_con(z: Tensor, family_labels, tau: float) -> Tensor:
    """Supervised contrastive loss over a batch of unit feature vectors.

    Anchors without a same-label partner contribute nothing.  The
    denominator runs over every other sample in the batch.
    """
    labels = np.asarray(family_labels)
    b = z.shape[0]
    if b < 2:
        raise ValueError("contrastive loss needs at least two samples")
    if len(labels) != b:
        raise ValueError("one label per feature row is required")
    norms = np.linalg.norm(z.data, axis=1)
    if np.abs(norms - 1.0).max() > 1e-6:
        raise ValueError("feature rows must be unit length")
    sim = matmul(z, z.T) * (1.0 / tau)
    eye = np.eye(b, dtype=bool)
    sim = where_mask(eye, constant(np.full((b, b), -1e300)), sim)
    logp = log_softmax(sim, axis=1)
    pos = (labels[:, None] == labels[None, :]) & ~eye
    counts = pos.sum(axis=1)
    coef = np.where(counts > 0, -1.0 / np.maximum(counts, 1), 0.0)
    picked = where_mask(pos, logp, 0.0)
    return (picked.sum(axis=1) * coef).sum()


# ---------------------------------------------------------------------------
# 3D / 2D supervision


def loss_3d(beta_hat: Tensor, theta_hat: Tensor, kp3d_hat: Tensor, beta, theta, kp3d,
            weights: LossWeights, taxon: str, alpha_hat: Tensor | None = None, alpha=None) -> Tensor:
    """Per-sample parameter and 3D keypoint loss, shape ``(B,)``."""
    if beta is None or theta is None or kp3d is None:
        raise ValueError("3D loss needs ground-truth parameters and 3D keypoints")
    w = weights.loss3d
    b = beta_hat.shape[0]
    db = beta_hat - beta
    dt = (theta_hat - theta).reshape(b, -1)
    dk = (kp3d_hat - kp3d).abs().sum(axis=-1).mean(axis=-1)
    total = (db * db).sum(axis=1) * w.lambda_beta + (dt * dt).sum(axis=1) * w.lambda_theta + dk
    lam_alpha = w.alpha_weight(taxon)
    if lam_alpha > 0:
        if alpha_hat is None or alpha is None:
            raise ValueError("avian 3D loss needs predicted and ground-truth alpha")
        total = total + (alpha_hat - alpha).abs().sum(axis=1) * lam_alpha
    return total


def normalized_pixels(uv, resolution):
    """Map pixel coordinates to [-1, 1] over the image extent."""
    h, w = resolution
    scale = np.array([2.0 / w, 2.0 / h])
    return uv * scale - 1.0


def _face_pixels(v: np.ndarray, faces: np.ndarray, resolution, margin: float):
    """(sample, face, pixel) triples for pixels near each face's bounding box."""
    h, w = resolution
    b, nf = v.shape[0], len(faces)
    tri = v[:, faces]                                    # (B, F, 3, 2)
    ok = np.isfinite(tri).all(axis=(2, 3))[..., None]    # non-finite triangles cover nothing
    lo = np.where(ok, np.floor(tri.min(axis=2) - 0.5 - margin), 0.0)
    hi = np.where(ok, np.ceil(tri.max(axis=2) - 0.5 + margin), -1.0)
    x0 = np.clip(lo[..., 0], 0, w).astype(np.int64)
    x1 = np.clip(hi[..., 0] + 1, 0, w).astype(np.int64)
    y0 = np.clip(lo[..., 1], 0, h).astype(np.int64)
    y1 = np.clip(hi[..., 1] + 1, 0, h).astype(np.int64)
    bw, bh = (x1 - x0).reshape(-1), (y1 - y0).reshape(-1)
    bw = np.where(bh > 0, bw, 0)
    n = bw * np.maximum(bh, 0)
    owner = np.repeat(np.arange(b * nf), n)
    local = np.arange(owner.size) - np.repeat(np.cumsum(n) - n, n)
    width = bw[owner]
    xs = x0.reshape(-1)[owner] + local % np.maximum(width, 1)
    ys = y0.reshape(-1)[owner] + local // np.maximum(width, 1)
    return owner // nf, owner % nf, ys * w + xs


def soft_silhouette(verts2d: Tensor, faces: np.ndarray, resolution, sharpness: float = 50.0) -> Tensor:
    """Differentiable coverage map ``(B, H, W)`` of projected triangles.

    Each pixel centre gets a signed distance ``d`` in pixels to the triangle
    coverage: inside a triangle it is the distance to its nearest edge line,
    outside it is minus the Euclidean distance to the triangle.  The union
    takes the max over triangles and the pixel value is
    ``sigmoid(sharpness * d)``.  Pixels farther than ``max(1, 40 / sharpness)``
    px from every triangle's bounding box are set to exactly 0 (their true
    value is below ``sigmoid(-40)``).
    """
    h, w = resolution
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    v = verts2d.data
    b, hw = v.shape[0], h * w
    margin = max(1.0, 40.0 / sharpness)
    ia, ib = faces, np.roll(faces, -1, axis=1)   # edge k runs faces[:, k] -> faces[:, k+1]

    a = v[:, ia]                                  # (B, F, 3, 2)
    e = v[:, ib] - a
    length = np.sqrt((e ** 2).sum(-1))
    area = e[..., 0, 0] * e[..., 1, 1] - e[..., 0, 1] * e[..., 1, 0]
    signs = np.sign(area)
    good = (area != 0) & (length > 0).all(-1)

    scores = np.full(b * hw, -np.inf)
    # how each score depends on the vertices: the edge line (a, b) or the
    # distance to a single vertex (b = -1)
    dep_a = np.zeros(b * hw, np.int64)
    dep_b = np.zeros(b * hw, np.int64)
    dep_sign = np.zeros(b * hw)
    if len(faces):
        smp, fc, pix = _face_pixels(v, faces, resolution, margin)
        keep = good[smp, fc]
        smp, fc, pix = smp[keep], fc[keep], pix[keep]
        rows = np.arange(len(pix))
        fid = smp * len(faces) + fc
        ax, ay = a[..., 0].reshape(-1, 3)[fid], a[..., 1].reshape(-1, 3)[fid]   # (N, 3)
        ex, ey = e[..., 0].reshape(-1, 3)[fid], e[..., 1].reshape(-1, 3)[fid]
        inv_l2 = (1.0 / length ** 2).reshape(-1, 3)[fid]
        sg = signs.reshape(-1)[fid]
        qx = (pix % w + 0.5)[:, None] - ax
        qy = (pix // w + 0.5)[:, None] - ay
        cross = ex * qy - ey * qx
        line = cross * (sg[:, None] / length.reshape(-1, 3)[fid])
        t = np.clip((qx * ex + qy * ey) * inv_l2, 0.0, 1.0)
        rx, ry = qx - t * ex, qy - t * ey
        seg2 = rx * rx + ry * ry
        inside = (line >= 0).all(1)
        k_in = line.argmin(1)
        k_out = seg2.argmin(1)
        k = np.where(inside, k_in, k_out)
        d = np.where(inside, line[rows, k_in], -np.sqrt(seg2[rows, k_out]))
        t_k = t[rows, k]
        fa, fb = ia[fc, k], ib[fc, k]
        vert_only = ~inside & ((t_k <= 0.0) | (t_k >= 1.0))
        da = np.where(vert_only & (t_k >= 1.0), fb, fa)
        db = np.where(vert_only, -1, fb)
        flat = smp * hw + pix
        np.maximum.at(scores, flat, d)
        winners = np.nonzero(d == scores[flat])[0]
        owner = np.empty(b * hw, np.int64)
        owner[flat[winners]] = winners          # ties: the last pair wins, deterministically
        uniq = np.unique(flat[winners])
        pick = owner[uniq]
        dep_a[uniq], dep_b[uniq] = da[pick], db[pick]
        dep_sign[uniq] = sg[pick]
    scores = scores.reshape(b, hw)
    m = 1.0 / (1.0 + np.exp(-np.clip(sharpness * scores, -700, 700)))
    out = m.reshape(b, h, w)
    nv = v.shape[1]

    def back(g):
        gs = (g.reshape(b, -1) * sharpness * m * (1.0 - m)).reshape(-1)
        live = np.isfinite(scores.reshape(-1)) & (gs != 0)
        idx = np.nonzero(live)[0]
        flat_grad = np.zeros((b * nv, 2))
        if idx.size == 0:
            return (flat_grad.reshape(v.shape),)
        s, pix = idx // hw, idx % hw
        gsel = gs[idx]
        p = np.stack([pix % w + 0.5, pix // w + 0.5], -1)
        va, vb = dep_a[idx], dep_b[idx]
        pa = v[s, va]

        vo = vb < 0                      # score = -|p - v|
        if vo.any():
            diff = p[vo] - pa[vo]
            r = np.sqrt((diff ** 2).sum(-1))
            np.add.at(flat_grad, s[vo] * nv + va[vo], gsel[vo, None] * diff / r[:, None])

        ln = ~vo                          # score = sign * cross(e, p - a) / |e|
        if ln.any():
            s2, a2, b2 = s[ln], va[ln], vb[ln]
            pa2, pb2 = pa[ln], v[s2, b2]
            ed = pb2 - pa2
            qx, qy = p[ln, 0] - pa2[:, 0], p[ln, 1] - pa2[:, 1]
            L = np.sqrt((ed ** 2).sum(-1))
            c = ed[:, 0] * qy - ed[:, 1] * qx
            sg = dep_sign[idx][ln] * gsel[ln]
            dc_db = np.stack([qy, -qx], -1)
            dc_da = np.stack([-qy + ed[:, 1], qx - ed[:, 0]], -1)
            dl_db = ed / L[:, None]
            gb = sg[:, None] * (dc_db / L[:, None] - (c / L ** 2)[:, None] * dl_db)
            ga = sg[:, None] * (dc_da / L[:, None] + (c / L ** 2)[:, None] * dl_db)
            np.add.at(flat_grad, s2 * nv + a2, ga)
            np.add.at(flat_grad, s2 * nv + b2, gb)
        return (flat_grad.reshape(v.shape),)

    return make_node(out, (verts2d,), back)


def loss_2d(kp3d_hat: Tensor, cam_t_hat: Tensor, focal: float, principal, kp2d, visibility,
            soft_mask: Tensor | None, gt_mask, weights: LossWeights, resolution) -> Tensor:
    """Per-sample reprojection + silhouette loss, shape ``(B,)``.

    The keypoint term is the L1 distance in normalised image coordinates,
    averaged over visible keypoints (0 when none are visible).  The mask
    term is the mean squared pixel difference scaled by ``lambda_M``.
    """
    vis = np.asarray(visibility, dtype=np.float64)
    uv = project_tensor(kp3d_hat, cam_t_hat, focal, principal)
    diff = (normalized_pixels(uv, resolution) - normalized_pixels(np.asarray(kp2d, float), resolution)).abs()
    per_kp = diff.sum(axis=-1) * vis
    count = vis.sum(axis=1)
    kp_term = per_kp.sum(axis=1) * (1.0 / np.maximum(count, 1.0))
    if soft_mask is None:
        return kp_term
    gt = np.asarray(gt_mask, dtype=np.float64)
    if gt.shape != soft_mask.shape:
        raise ValueError(f"mask shapes differ: {soft_mask.shape} vs {gt.shape}")
    dm = soft_mask - gt
    mask_term = (dm * dm).reshape(dm.shape[0], -1).mean(axis=1)
    return kp_term + mask_term * weights.loss2d.lambda_M


# ---------------------------------------------------------------------------
# priors


def loss_smal_prior(beta_hat: Tensor, theta_hat: Tensor, prior: PriorDistribution,
                    weights: LossWeights) -> Tensor:
    """Mahalanobis shape and pose prior, shape ``(B,)``."""
    if prior.prec_beta is None or prior.prec_theta is None:
        raise ValueError("quadruped prior needs shape and pose covariances")
    b = beta_hat.shape[0]
    db = beta_hat - prior.mu_beta
    dt = theta_hat.reshape(b, -1) - np.asarray(prior.mu_theta).reshape(-1)
    mb = (matmul(db, prior.prec_beta) * db).sum(axis=1)
    mt = (matmul(dt, prior.prec_theta) * dt).sum(axis=1)
    return mb * weights.smal_prior.lambda_beta + mt


def loss_aves_prior(beta_hat: Tensor, theta_hat: Tensor, alpha_hat: Tensor | None,
                    prior: PriorDistribution, weights: LossWeights) -> Tensor:
    """Shape shrinkage plus mean pose and mean bone prior, shape ``(B,)``."""
    if alpha_hat is None:
        raise ValueError("avian prior needs predicted bone scales")
    w = weights.aves_prior
    b = beta_hat.shape[0]
    dt = (theta_hat - prior.theta_bar).reshape(b, -1)
    da = alpha_hat - prior.alpha_bar
    return ((beta_hat * beta_hat).sum(axis=1) * w.lambda_beta
            + (dt * dt).sum(axis=1) * w.lambda_theta
            + (da * da).sum(axis=1))


# ---------------------------------------------------------------------------
# total


@dataclass
class SampleTerms:
    """Per-sample loss components of one taxon group within a batch."""

    taxon: str
    l2d: Tensor
    prior: Tensor
    has_3d: np.ndarray
    l3d: Tensor | None = None


def loss_total(groups: list[SampleTerms], l_con: Tensor | None, weights: LossWeights,
               batch_size: int) -> Tensor:
    """Weighted total, averaged over the samples of the batch.

    The 3D term only counts for samples with 3D annotations; the quadruped
    prior only for quadrupeds and the avian prior only for birds.  The
    contrastive term is a batch-level quantity added once.
    """
    total = constant(0.0)
    for g in groups:
        per = g.l2d * weights.lambda_2d
        lam_prior = weights.lambda_smal_prior if g.taxon == "quadruped" else weights.lambda_aves_prior
        per = per + g.prior * lam_prior
        has = np.asarray(g.has_3d, dtype=bool)
        if g.l3d is not None and has.any():
            per = per + where_mask(has, g.l3d, 0.0) * weights.lambda_3d
        total = total + per.sum()
    total = total * (1.0 / batch_size)
    if l_con is not None:
        total = total + l_con * weights.lambda_con
    return total


__all__ = [
    "LossWeights", "Loss3DWeights", "Loss2DWeights", "SmalPriorWeights", "AvesPriorWeights",
    "PriorDistribution", "SampleTerms", "loss_con", "loss_3d", "loss_2d", "soft_silhouette",
    "loss_smal_prior", "loss_aves_prior", "loss_total", "normalized_pixels",
]

"""ViT encoder with taxon-partitioned feed-forward layers, decoder and heads.

The second feed-forward layer of every encoder block is split in two: a
taxon-shared projection that every sample goes through, and one
taxon-specific projection per taxon that only samples of that taxon use.
Their outputs are concatenated (shared features first) back to the
embedding width.

Parameters live in a flat ``dict[str, np.ndarray]`` (the network state).
The forward functions take the same mapping with values wrapped as
:class:`Tensor` so gradients can flow to them.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy.stats import truncnorm

from .bodymodel import TAXA
from .numkernel import Tensor, concat, constant, gelu, layer_norm, matmul, normalize, softmax


@dataclass
class HeadSpec:
    n_betas: int
    n_joints: int
    n_bones: int = 0


@dataclass
class NetworkConfig:
    image: tuple[int, int, int] = (64, 64, 2)
    patch: int = 16
    embed_dim: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    ffn_hidden: int = 64
    shared_dim: int = 24
    specific_dim: int = 8
    decoder_dim: int = 32
    decoder_blocks: int = 1
    decoder_heads: int = 4
    head_hidden: int = 64
    feature_dim: int = 16
    n_taxa: int = 2
    heads: dict[str, HeadSpec] = field(default_factory=dict)
    cam_depth_init: float = 6.0
    init_std: float = 0.02

    def __post_init__(self):
        self.image = tuple(int(x) for x in self.image)
        self.heads = {k: v if isinstance(v, HeadSpec) else HeadSpec(**v) for k, v in self.heads.items()}
        h, w, _ = self.image
        if h % self.patch or w % self.patch:
            raise ValueError("image size must be divisible by the patch size")
        if self.shared_dim + self.specific_dim != self.embed_dim:
            raise ValueError("shared_dim + specific_dim must equal embed_dim")
        if self.embed_dim % self.n_heads or self.decoder_dim % self.decoder_heads:
            raise ValueError("attention widths must divide evenly into heads")
        if not 1 <= self.n_taxa <= len(TAXA):
            raise ValueError("n_taxa out of range")
        for taxon in self.heads:
            if taxon not in self.taxa:
                raise ValueError(f"head for unconfigured taxon {taxon!r}")

    @property
    def taxa(self) -> tuple[str, ...]:
        return TAXA[: self.n_taxa]

    @property
    def n_patches(self) -> int:
        h, w, _ = self.image
        return (h // self.patch) * (w // self.patch)

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    def to_dict(self) -> dict:
        return asdict(self)


def taxon_index(taxon) -> int:
    if isinstance(taxon, str):
        if taxon not in TAXA:
            raise ValueError(f"unknown taxon {taxon!r}")
        return TAXA.index(taxon)
    return int(taxon)


# ---------------------------------------------------------------------------
# state


def init_state(config: NetworkConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Truncated-normal projections, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    std = config.init_std

    def tn(*shape):
        return truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)

    D, H = config.embed_dim, config.ffn_hidden
    Dd = config.decoder_dim
    h, w, c = config.image
    p = config.patch
    s: dict[str, np.ndarray] = {}
    s["patch.w"] = tn(p * p * c, D)
    s["patch.b"] = np.zeros(D)
    s["pos_embed"] = tn(config.n_tokens, D)
    s["cls_token"] = tn(1, D)
    for i in range(config.n_blocks):
        pre = f"blocks.{i}."
        s[pre + "ln1.w"], s[pre + "ln1.b"] = np.ones(D), np.zeros(D)
        # no key bias: softmax is invariant to it
        s[pre + "attn.qkv.w"] = tn(D, 3 * D)
        s[pre + "attn.q.b"], s[pre + "attn.v.b"] = np.zeros(D), np.zeros(D)
        s[pre + "attn.proj.w"], s[pre + "attn.proj.b"] = tn(D, D), np.zeros(D)
        s[pre + "ln2.w"], s[pre + "ln2.b"] = np.ones(D), np.zeros(D)
        s[pre + "fc1.w"], s[pre + "fc1.b"] = tn(D, H), np.zeros(H)
        s[pre + "fc2_shared.w"], s[pre + "fc2_shared.b"] = tn(H, config.shared_dim), np.zeros(config.shared_dim)
        for taxon in config.taxa:
            s[pre + f"fc2_specific.{taxon}.w"] = tn(H, config.specific_dim)
            s[pre + f"fc2_specific.{taxon}.b"] = np.zeros(config.specific_dim)
    s["dec.query"] = tn(1, Dd)
    for i in range(config.decoder_blocks):
        pre = f"dec.{i}."
        s[pre + "ln_q.w"], s[pre + "ln_q.b"] = np.ones(Dd), np.zeros(Dd)
        s[pre + "ln_kv.w"], s[pre + "ln_kv.b"] = np.ones(D), np.zeros(D)
        s[pre + "q.w"], s[pre + "q.b"] = tn(Dd, Dd), np.zeros(Dd)
        s[pre + "kv.w"], s[pre + "v.b"] = tn(D, 2 * Dd), np.zeros(Dd)
        s[pre + "proj.w"], s[pre + "proj.b"] = tn(Dd, Dd), np.zeros(Dd)
        s[pre + "ln2.w"], s[pre + "ln2.b"] = np.ones(Dd), np.zeros(Dd)
        s[pre + "fc1.w"], s[pre + "fc1.b"] = tn(Dd, 2 * Dd), np.zeros(2 * Dd)
        s[pre + "fc2.w"], s[pre + "fc2.b"] = tn(2 * Dd, Dd), np.zeros(Dd)
    s["dec.ln_out.w"], s["dec.ln_out.b"] = np.ones(Dd), np.zeros(Dd)
    s["dec.out.w"], s["dec.out.b"] = tn(Dd, Dd), np.zeros(Dd)
    Hh = config.head_hidden
    for taxon, spec in config.heads.items():
        pre = f"heads.{taxon}."
        s[pre + "fc1.w"], s[pre + "fc1.b"] = tn(Dd, Hh), np.zeros(Hh)
        s[pre + "beta.w"], s[pre + "beta.b"] = tn(Hh, spec.n_betas), np.zeros(spec.n_betas)
        s[pre + "theta.w"], s[pre + "theta.b"] = tn(Hh, spec.n_joints * 3), np.zeros(spec.n_joints * 3)
        if spec.n_bones:
            s[pre + "alpha.w"], s[pre + "alpha.b"] = tn(Hh, spec.n_bones), np.zeros(spec.n_bones)
        s[pre + "cam.w"] = tn(Hh, 3)
        s[pre + "cam.b"] = np.array([0.0, 0.0, np.log(config.cam_depth_init)])
    s["predictor.fc1.w"], s["predictor.fc1.b"] = tn(D, Hh), np.zeros(Hh)
    s["predictor.fc2.w"], s["predictor.fc2.b"] = tn(Hh, config.feature_dim), np.zeros(config.feature_dim)
    return s


def as_tensors(state: Mapping[str, np.ndarray], requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in state.items()}


def _p(params, name) -> Tensor:
    v = params[name]
    return v if isinstance(v, Tensor) else constant(v)


def _linear(x: Tensor, params, name: str) -> Tensor:
    return matmul(x, _p(params, name + ".w")) + _p(params, name + ".b")


def _ln(x: Tensor, params, name: str) -> Tensor:
    return layer_norm(x, _p(params, name + ".w"), _p(params, name + ".b"))


# ---------------------------------------------------------------------------
# encoder


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """``(B, H, W, C)`` -> ``(B, N, p*p*C)`` non-overlapping patches, row-major."""
    b, h, w, c = images.shape
    x = images.reshape(b, h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 1, 3, 2, 4, 5).reshape(b, (h // patch) * (w // patch), patch * patch * c)


def patch_embed(images, params, config: NetworkConfig) -> Tensor:
    """Token matrix ``(B, N + 1, D)`` with the class token at index 0."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        images = images[None]
    if images.shape[1:] != tuple(config.image):
        raise ValueError(f"image shape {images.shape[1:]} does not match config {config.image}")
    b = images.shape[0]
    tokens = matmul(constant(patchify(images, config.patch)), _p(params, "patch.w")) + _p(params, "patch.b")
    cls = _p(params, "cls_token").reshape(1, 1, -1) + np.zeros((b, 1, 1))
    return concat([cls, tokens], axis=1) + _p(params, "pos_embed")


def _group_indices(taxa: np.ndarray, config: NetworkConfig):
    groups = []
    for t in np.unique(taxa):
        if t < 0 or t >= config.n_taxa:
            raise ValueError(f"taxon index {t} not configured")
        groups.append((int(t), np.nonzero(taxa == t)[0]))
    return groups


def moe_ffn(hidden: Tensor, taxa, params, block: int, config: NetworkConfig) -> Tensor:
    """Second feed-forward layer: shared features then the taxon's own expert.

    ``hidden`` is ``(B, T, ffn_hidden)`` after the first layer and GELU;
    ``taxa`` is one taxon index per sample.  Returns ``(B, T, D)``.
    """
    taxa = np.broadcast_to(np.asarray([taxon_index(t) for t in np.atleast_1d(taxa)]), (hidden.shape[0],))
    pre = f"blocks.{block}."
    shared = _linear(hidden, params, pre + "fc2_shared")
    groups = _group_indices(taxa, config)
    if len(groups) == 1:
        t, _ = groups[0]
        specific = _linear(hidden, params, pre + f"fc2_specific.{TAXA[t]}")
    else:
        parts, order = [], []
        for t, idx in groups:
            parts.append(_linear(hidden.take(idx, axis=0), params, pre + f"fc2_specific.{TAXA[t]}"))
            order.append(idx)
        inverse = np.argsort(np.concatenate(order))
        specific = concat(parts, axis=0).take(inverse, axis=0)
    return concat([shared, specific], axis=-1)


def _self_attention(x: Tensor, params, pre: str, n_heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // n_heads
    bias = concat([_p(params, pre + "q.b"), constant(np.zeros(d)), _p(params, pre + "v.b")], axis=0)
    qkv = (matmul(x, _p(params, pre + "qkv.w")) + bias).reshape(b, t, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    att = softmax(matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
    out = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return _linear(out, params, pre + "proj")


def encoder_forward(images, taxa, params, config: NetworkConfig):
    """Patch tokens ``(B, N, D)`` and class feature ``(B, D)``."""
    x = patch_embed(images, params, config)
    b = x.shape[0]
    taxa = np.broadcast_to(np.asarray([taxon_index(t) for t in np.atleast_1d(taxa)]), (b,))
    for i in range(config.n_blocks):
        pre = f"blocks.{i}."
        x = x + _self_attention(_ln(x, params, pre + "ln1"), params, pre + "attn.", config.n_heads)
        hidden = gelu(_linear(_ln(x, params, pre + "ln2"), params, pre + "fc1"))
        x = x + moe_ffn(hidden, taxa, params, i, config)
    return x[:, 1:], x[:, 0]


# ---------------------------------------------------------------------------
# decoder and heads


def decoder_forward(F: Tensor, params, config: NetworkConfig) -> Tensor:
    """A single learned query cross-attends to the patch tokens; returns ``(B, decoder_dim)``."""
    b, n, _ = F.shape
    Dd, nh = config.decoder_dim, config.decoder_heads
    dh = Dd // nh
    q = _p(params, "dec.query").reshape(1, 1, Dd) + np.zeros((b, 1, 1))
    for i in range(config.decoder_blocks):
        pre = f"dec.{i}."
        qq = _linear(_ln(q, params, pre + "ln_q"), params, pre + "q").reshape(b, 1, nh, dh).transpose(0, 2, 1, 3)
        kv_bias = concat([constant(np.zeros(Dd)), _p(params, pre + "v.b")], axis=0)
        kv = (matmul(_ln(F, params, pre + "ln_kv"), _p(params, pre + "kv.w")) + kv_bias).reshape(b, n, 2, nh, dh)
        kv = kv.transpose(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        att = softmax(matmul(qq, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
        out = matmul(att, v).transpose(0, 2, 1, 3).reshape(b, 1, Dd)
        q = q + _linear(out, params, pre + "proj")
        h = gelu(_linear(_ln(q, params, pre + "ln2"), params, pre + "fc1"))
        q = q + _linear(h, params, pre + "fc2")
    return _linear(_ln(q, params, "dec.ln_out"), params, "dec.out").reshape(b, Dd)


@dataclass
class PredictedParams:
    beta: Tensor
    theta: Tensor
    cam_t: Tensor
    z: Tensor
    alpha: Tensor | None = None


def heads_forward(f: Tensor, class_feature: Tensor, taxon, params, config: NetworkConfig) -> PredictedParams:
    """Regress body and camera parameters for one taxon group, plus family features."""
    t = TAXA[taxon_index(taxon)]
    if t not in config.heads:
        raise ValueError(f"no regression head for taxon {t!r}")
    spec = config.heads[t]
    b = f.shape[0]
    pre = f"heads.{t}."
    h = gelu(_linear(f, params, pre + "fc1"))
    beta = _linear(h, params, pre + "beta")
    theta = _linear(h, params, pre + "theta").reshape(b, spec.n_joints, 3)
    alpha = _linear(h, params, pre + "alpha") if spec.n_bones else None
    cam = _linear(h, params, pre + "cam")
    cam_t = concat([cam[:, 0:2], cam[:, 2:3].exp()], axis=1)
    z = predictor_forward(class_feature, params)
    return PredictedParams(beta=beta, theta=theta, cam_t=cam_t, z=z, alpha=alpha)


def predictor_forward(class_feature: Tensor, params) -> Tensor:
    h = gelu(_linear(class_feature, params, "predictor.fc1"))
    return normalize(_linear(h, params, "predictor.fc2"), axis=-1)


def network_forward(images, taxa, params, config: NetworkConfig):
    """Full forward for a batch that may mix taxa.

    Returns ``(groups, z)`` where ``groups`` maps taxon name to
    ``(sample indices, PredictedParams)`` and ``z`` is the ``(B, d)`` family
    feature matrix in batch order.
    """
    images = np.asarray(images, dtype=np.float64)
    taxa = np.asarray([taxon_index(t) for t in np.atleast_1d(taxa)])
    F, cls = encoder_forward(images, taxa, params, config)
    f = decoder_forward(F, params, config)
    z = predictor_forward(cls, params)
    groups = {}
    for t, idx in _group_indices(np.broadcast_to(taxa, (F.shape[0],)), config):
        if len(idx) == F.shape[0]:
            pred = heads_forward(f, cls, t, params, config)
        else:
            pred = heads_forward(f.take(idx, axis=0), cls.take(idx, axis=0), t, params, config)
        groups[TAXA[t]] = (idx, pred)
    return groups, z

"""Procedural synthetic dataset factory.

Each record is produced by sampling body and camera parameters, rendering
the posed mesh into a mask and a depth map, projecting the keypoints and
flagging their visibility against the depth buffer.  A simulated
segmentation (a morphologically perturbed copy of the mask) drives the
IoU cycle-consistency filter.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .bodymodel import TAXA, BodyParams, ModelTemplate, build_toy_template, model_forward
from .camera import CameraSpec, keypoint_visibility, mask_iou, project, rasterize
from .formats import decode_blobs, encode_blobs, load_manifest, save_manifest, write_pgm
from .losses import PriorDistribution


@dataclass
class TemplateConfig:
    n_joints: int = 6
    n_betas: int = 4
    n_vertices: int = 40
    seed: int = 0


@dataclass
class GenConfig:
    counts: dict[str, int] = field(default_factory=lambda: {"quadruped": 100, "avian": 100})
    beta_sigma: float = 0.3
    theta_sigma: float = 0.3
    alpha_range: tuple[float, float] = (-0.5, 3.5)
    rotation_range: tuple[float, float] = (-np.pi, np.pi)
    box_lo: tuple[float, float, float] = (-0.5, -0.5, 4.0)
    box_hi: tuple[float, float, float] = (0.5, 0.5, 8.0)
    iou_threshold: float = 0.85
    image_size: tuple[int, int] = (64, 64)
    families_per_taxon: int = 4
    family_spread: float = 1.0
    perturb_radius: int = 2
    perturb_ops: tuple[str, ...] = ("dilate", "erode")
    attempts_per_record: int = 20
    seed: int = 0
    name: str = "toy"
    template: TemplateConfig = field(default_factory=TemplateConfig)

    def __post_init__(self):
        if isinstance(self.template, dict):
            self.template = TemplateConfig(**self.template)
        self.image_size = tuple(int(x) for x in self.image_size)
        self.alpha_range = tuple(float(x) for x in self.alpha_range)
        self.rotation_range = tuple(float(x) for x in self.rotation_range)
        self.box_lo = tuple(float(x) for x in self.box_lo)
        self.box_hi = tuple(float(x) for x in self.box_hi)
        self.perturb_ops = tuple(self.perturb_ops)
        if not 0 < self.iou_threshold <= 1:
            raise ValueError("iou_threshold must lie in (0, 1]")
        if any(t not in TAXA for t in self.counts):
            raise ValueError(f"unknown taxon in counts: {list(self.counts)}")
        if any(lo >= hi for lo, hi in zip(self.box_lo, self.box_hi)) or self.box_lo[2] <= 0:
            raise ValueError("position box must be non-empty and in front of the camera")
        if any(op not in ("dilate", "erode") for op in self.perturb_ops):
            raise ValueError("perturb_ops may only contain 'dilate' and 'erode'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GenConfig":
        return cls(**d)


@dataclass
class SampleRecord:
    image: np.ndarray          # (H, W, 2): mask, normalised depth
    taxon: str
    family_label: int
    params: BodyParams
    camera: CameraSpec
    keypoints3d: np.ndarray
    keypoints2d: np.ndarray
    visibility: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    has_3d: bool = True
    seed: tuple = ()
    degenerate: bool = False

    @property
    def taxon_index(self) -> int:
        return TAXA.index(self.taxon)


def toy_templates(config: GenConfig) -> dict[str, ModelTemplate]:
    tc = config.template
    return {t: build_toy_template(t, tc.n_joints, tc.n_betas, tc.n_vertices, tc.seed) for t in TAXA}


def family_centers(config: GenConfig, taxon: str, n_betas: int) -> np.ndarray:
    """Fixed shape-space centres, one per synthetic family."""
    rng = np.random.default_rng([config.seed, 7919, TAXA.index(taxon), n_betas])
    return rng.normal(0.0, config.family_spread, size=(config.families_per_taxon, n_betas))


def family_label(config: GenConfig, taxon: str, local: int) -> int:
    """Global family label: quadruped families first, then avian."""
    return TAXA.index(taxon) * config.families_per_taxon + local


def canonical_axis_angle(v: np.ndarray) -> np.ndarray:
    """Same rotation with angle folded into [0, pi]."""
    angle = np.linalg.norm(v)
    if angle == 0:
        return v.copy()
    axis = v / angle
    angle = np.mod(angle, 2 * np.pi)
    if angle > np.pi:
        axis, angle = -axis, 2 * np.pi - angle
    return axis * angle


def sample_body_params(rng: np.random.Generator, taxon: str, config: GenConfig,
                       template: ModelTemplate):
    """Draw ``(BodyParams, CameraSpec, family_label)`` for one record."""
    nb, nj = template.n_betas, template.n_joints
    centers = family_centers(config, taxon, nb)
    local = int(rng.integers(len(centers)))
    beta = centers[local] + config.beta_sigma * rng.normal(size=nb)
    theta = np.zeros((nj, 3))
    for j in range(1, nj):
        row = config.theta_sigma * rng.normal(size=3)
        while np.linalg.norm(row) >= np.pi:
            row = config.theta_sigma * rng.normal(size=3)
        theta[j] = row
    theta[0] = canonical_axis_angle(rng.uniform(*config.rotation_range, size=3))
    alpha = rng.uniform(*config.alpha_range, size=template.n_bones) if taxon == "avian" else None
    position = rng.uniform(config.box_lo, config.box_hi)
    params = BodyParams(beta=beta, theta=theta, gamma=np.zeros(3), alpha=alpha)
    camera = CameraSpec.default(config.image_size, translation=position)
    return params, camera, family_label(config, taxon, local)


def image_channels(buffers, config: GenConfig) -> np.ndarray:
    """Stack mask and depth normalised over the position box depth range."""
    near, far = config.box_lo[2], config.box_hi[2]
    depth = np.where(buffers.mask > 0, (buffers.depth - near) / (far - near), 0.0)
    return np.stack([buffers.mask.astype(np.float64), np.clip(depth, 0.0, 1.0)], axis=-1)


def synthesize_sample(params: BodyParams, camera: CameraSpec, template: ModelTemplate,
                      config: GenConfig, family: int = -1, seed: tuple = ()) -> SampleRecord:
    mesh = model_forward(template, params)
    buffers = rasterize(mesh.vertices, template.faces, camera)
    kp2d, _ = project(mesh.keypoints3d, camera)
    vis = keypoint_visibility(mesh.keypoints3d, camera, buffers)
    return SampleRecord(
        image=image_channels(buffers, config),
        taxon=template.taxon,
        family_label=family,
        params=params,
        camera=camera,
        keypoints3d=mesh.keypoints3d,
        keypoints2d=kp2d,
        visibility=vis,
        mask=buffers.mask,
        depth=buffers.depth,
        seed=tuple(seed),
        degenerate=not buffers.mask.any(),
    )


def perturb_mask(mask: np.ndarray, rng: np.random.Generator, config: GenConfig) -> np.ndarray:
    """Simulated segmentation: random dilation or erosion of up to ``perturb_radius`` px."""
    radius = int(rng.integers(config.perturb_radius + 1))
    op = config.perturb_ops[int(rng.integers(len(config.perturb_ops)))]
    m = np.asarray(mask).astype(bool)
    if radius == 0:
        return m.astype(np.uint8)
    fn = ndimage.binary_dilation if op == "dilate" else ndimage.binary_erosion
    return fn(m, iterations=radius).astype(np.uint8)


def cycle_consistency_filter(record: SampleRecord, perturbed_mask: np.ndarray, iou_threshold: float) -> bool:
    """Keep iff the simulated segmentation overlaps the rendered mask enough."""
    if record.degenerate:
        return False
    return mask_iou(record.mask, perturbed_mask) >= iou_threshold


# ---------------------------------------------------------------------------
# dataset assembly


def generate_records(config: GenConfig, templates: dict[str, ModelTemplate] | None = None):
    """Generate and filter records; returns ``(records, stats)``.

    Record ``i`` of taxon ``t`` is a pure function of ``(seed, t, i)``, so
    the result does not depend on generation order.
    """
    templates = templates or toy_templates(config)
    records, stats = [], {}
    for taxon, want in config.counts.items():
        tpl = templates[taxon]
        kept = attempts = degenerate = 0
        ious = []
        limit = max(want * config.attempts_per_record, want)
        while kept < want and attempts < limit:
            seed = (config.seed, TAXA.index(taxon), attempts)
            rng = np.random.default_rng(seed)
            attempts += 1
            params, camera, fam = sample_body_params(rng, taxon, config, tpl)
            rec = synthesize_sample(params, camera, tpl, config, fam, seed)
            if rec.degenerate:
                degenerate += 1
                continue
            seg = perturb_mask(rec.mask, rng, config)
            ious.append(mask_iou(rec.mask, seg))
            if cycle_consistency_filter(rec, seg, config.iou_threshold):
                records.append(rec)
                kept += 1
        if kept < want:
            raise RuntimeError(f"only {kept} of {want} {taxon} records passed the filter "
                               f"after {attempts} attempts")
        stats[taxon] = {"kept": kept, "attempts": attempts, "degenerate": degenerate,
                        "dropped_iou": attempts - kept - degenerate,
                        "mean_iou": float(np.mean(ious)) if ious else None}
    return records, stats


def drop_rate(ious, iou_threshold: float) -> float:
    ious = np.asarray(ious, float)
    return float(np.mean(ious < iou_threshold)) if ious.size else 0.0


def record_tensors(rec: SampleRecord) -> dict[str, np.ndarray]:
    out = {
        "image": rec.image.astype(np.float32),
        "mask": rec.mask,
        "depth": rec.depth,
        "beta": rec.params.beta,
        "theta": rec.params.theta,
        "gamma": rec.params.gamma,
        "cam_t": rec.camera.translation,
        "cam_focal": np.array([rec.camera.focal]),
        "cam_principal": rec.camera.principal,
        "keypoints3d": rec.keypoints3d,
        "keypoints2d": rec.keypoints2d,
        "visibility": rec.visibility,
    }
    if rec.params.alpha is not None:
        out["alpha"] = rec.params.alpha
    return out


def record_from_tensors(t: dict, meta: dict) -> SampleRecord:
    h, w = t["mask"].shape
    camera = CameraSpec(float(t["cam_focal"][0]), t["cam_principal"], t["cam_t"], (h, w))
    params = BodyParams(beta=t["beta"], theta=t["theta"], gamma=t["gamma"], alpha=t.get("alpha"))
    return SampleRecord(
        image=t["image"].astype(np.float64), taxon=meta["taxon"], family_label=int(meta["family"]),
        params=params, camera=camera, keypoints3d=t["keypoints3d"], keypoints2d=t["keypoints2d"],
        visibility=t["visibility"], mask=t["mask"], depth=t["depth"], has_3d=bool(meta["has_3d"]),
        seed=tuple(meta.get("seed", ())), degenerate=bool(meta.get("degenerate", False)))


def build_dataset(config: GenConfig, templates: dict[str, ModelTemplate] | None = None,
                  out_dir=None, write_masks: bool = False):
    """Generate, filter and (optionally) write shards plus a manifest.

    One shard per taxon.  Returns ``(manifest, records)``.
    """
    records, stats = generate_records(config, templates)
    families: dict[str, int] = {}
    for r in records:
        families[str(r.family_label)] = families.get(str(r.family_label), 0) + 1
    manifest = {"name": config.name, "config": config.to_dict(), "stats": stats,
                "family_counts": families, "records": []}
    if out_dir is None:
        return manifest, records
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for taxon in config.counts:
            shard = f"{config.name}_{taxon}.bin"
            chunks, offset = [], 0
            for i, r in enumerate(records):
                if r.taxon != taxon:
                    continue
                blob = encode_blobs(record_tensors(r))
                manifest["records"].append({
                    "shard": shard, "offset": offset, "length": len(blob), "taxon": taxon,
                    "family": r.family_label, "has_3d": r.has_3d, "degenerate": r.degenerate,
                    "seed": list(r.seed)})
                if write_masks:
                    write_pgm(out / f"{config.name}_{i:05d}_mask.pgm", r.mask)
                chunks.append(blob)
                offset += len(blob)
            (out / shard).write_bytes(b"".join(chunks))
        save_manifest(out / "manifest.json", manifest)
    except OSError as exc:
        raise OSError(f"failed writing dataset to {exc.filename or out}: {exc.strerror}") from exc
    return manifest, records


def load_dataset(path) -> tuple[dict, list[SampleRecord]]:
    path = Path(path)
    mpath = path / "manifest.json" if path.is_dir() else path
    manifest = load_manifest(mpath)
    cache: dict[str, bytes] = {}
    records = []
    for meta in manifest["records"]:
        if meta["shard"] not in cache:
            cache[meta["shard"]] = (mpath.parent / meta["shard"]).read_bytes()
        buf = cache[meta["shard"]]
        tensors = decode_blobs(buf, meta["offset"], meta["offset"] + meta["length"])
        records.append(record_from_tensors(tensors, meta))
    return manifest, records


def toy_priors(config: GenConfig, templates: dict[str, ModelTemplate]) -> dict[str, PriorDistribution]:
    """Priors matching the sampling distribution of the generator."""
    out = {}
    for taxon, tpl in templates.items():
        centers = family_centers(config, taxon, tpl.n_betas)
        if taxon == "quadruped":
            cov_b = np.cov(centers.T, bias=True).reshape(tpl.n_betas, tpl.n_betas)
            cov_b = cov_b + config.beta_sigma ** 2 * np.eye(tpl.n_betas)
            lo, hi = config.rotation_range
            var_t = np.full((tpl.n_joints, 3), config.theta_sigma ** 2)
            var_t[0] = (hi - lo) ** 2 / 12.0
            out[taxon] = PriorDistribution(mu_beta=centers.mean(0), Sigma_beta=cov_b,
                                           mu_theta=np.zeros(tpl.n_joints * 3),
                                           Sigma_theta=np.diag(var_t.reshape(-1)))
        else:
            out[taxon] = PriorDistribution(theta_bar=np.zeros((tpl.n_joints, 3)),
                                           alpha_bar=np.full(tpl.n_bones, 0.5 * sum(config.alpha_range)))
    return out


def mark_2d_only(records: list[SampleRecord]) -> list[SampleRecord]:
    """Copies of the records with 3D annotations withheld."""
    from dataclasses import replace
    return [replace(r, has_3d=False) for r in records]

"""Two-stage training loop, weighted dataset sampling, AdamW and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .bodymodel import TAXA, BodyParams, ModelTemplate, forward_tensors, model_forward
from .camera import project, project_tensor
from .datagen import SampleRecord
from .formats import load_checkpoint, save_checkpoint, template_from_tensors, template_tensors
from .losses import (LossWeights, PriorDistribution, SampleTerms, loss_2d, loss_3d, loss_aves_prior, loss_con,
                     loss_smal_prior, loss_total, soft_silhouette)
from .metrics import MetricsReport, evaluate_samples
from .network import HeadSpec, NetworkConfig, as_tensors, init_state, network_forward

log = logging.getLogger(__name__)

# reference schedules at full scale; the toy defaults below are what runs
FULL_SCALE_STEPS = {"animer_stage1": 2_000_000, "animer_stage2": 240_000, "animer_plus": 1_400_000}
FULL_SCALE_BASE_LR = 1.25e-6


@dataclass
class TrainConfig:
    stage1_steps: int = 1000
    stage2_steps: int = 1000
    base_lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    batch_size: int = 16
    dataset_weights: dict[str, float] = field(default_factory=dict)
    seed: int = 0
    checkpoint_every: int = 0
    reset_moments_stage2: bool = False
    loss: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = _loss_weights_from_dict(self.loss)
        self.betas = tuple(self.betas)
        if self.stage1_steps <= 0 or self.stage2_steps <= 0:
            raise ValueError("step counts must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2 for the contrastive term")
        if any(w < 0 for w in self.dataset_weights.values()):
            raise ValueError("dataset weights must be nonnegative")
        if self.dataset_weights and not any(w > 0 for w in self.dataset_weights.values()):
            raise ValueError("at least one dataset weight must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _loss_weights_from_dict(d: dict) -> LossWeights:
    from .losses import AvesPriorWeights, Loss2DWeights, Loss3DWeights, SmalPriorWeights
    d = dict(d)
    nested = {"loss3d": Loss3DWeights, "loss2d": Loss2DWeights, "smal_prior": SmalPriorWeights,
              "aves_prior": AvesPriorWeights}
    for k, cls in nested.items():
        if isinstance(d.get(k), dict):
            d[k] = cls(**d[k])
    return LossWeights(**d)


@dataclass
class Dataset:
    name: str
    records: list[SampleRecord]

    @property
    def has_3d(self) -> bool:
        return any(r.has_3d for r in self.records)


@dataclass
class ModelSetup:
    """Everything the forward pass and the losses need besides the weights."""

    network: NetworkConfig
    templates: dict[str, ModelTemplate]
    priors: dict[str, PriorDistribution]

    @classmethod
    def for_templates(cls, templates, priors, image=(64, 64, 2), **net_kw) -> "ModelSetup":
        heads = {t: HeadSpec(tpl.n_betas, tpl.n_joints, tpl.n_bones if t == "avian" else 0)
                 for t, tpl in templates.items()}
        return cls(NetworkConfig(image=tuple(image), heads=heads, **net_kw), dict(templates), dict(priors))


# ---------------------------------------------------------------------------
# sampling


def stage_probabilities(datasets: list[Dataset], weights: dict[str, float], stage: int) -> np.ndarray:
    missing = [d.name for d in datasets if d.name not in weights]
    if missing:
        raise ValueError(f"no sampling weight for datasets {missing}")
    w = np.array([float(weights[d.name]) for d in datasets])
    if stage == 1:
        w = w * np.array([d.has_3d for d in datasets], dtype=float)
    elif stage != 2:
        raise ValueError("stage must be 1 or 2")
    if not (w > 0).any():
        raise ValueError("all effective dataset weights are zero")
    return w / w.sum()


def weighted_sample_stream(datasets: list[Dataset], weights: dict[str, float], stage: int,
                           rng: np.random.Generator):
    """Endless stream of ``(dataset_index, record)`` draws.

    Stage 1 only draws from datasets that carry 3D annotations.
    """
    cdf = _stage_cdf(datasets, weights, stage)
    while True:
        yield draw_record(datasets, cdf, rng)


def _stage_cdf(datasets, weights, stage) -> np.ndarray:
    cdf = np.cumsum(stage_probabilities(datasets, weights, stage))
    cdf[-1] = 1.0
    return cdf


def draw_record(datasets: list[Dataset], cdf: np.ndarray, rng: np.random.Generator):
    """One ``(dataset_index, record)`` draw: a dataset by weight, then a record uniformly."""
    d = int(np.searchsorted(cdf, rng.random(), side="right"))
    recs = datasets[d].records
    return d, recs[int(rng.integers(len(recs)))]


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, state: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in state.items()}, {k: np.zeros_like(a) for k, a in state.items()})


def optimizer_step(state: dict[str, np.ndarray], grads: dict[str, np.ndarray], moments: AdamState,
                   lr: float, config: TrainConfig) -> bool:
    """One AdamW update in place.  Returns False (and changes nothing) on a non-finite gradient."""
    if any(not np.isfinite(g).all() for g in grads.values()):
        log.warning("non-finite gradient at optimizer step %d; step skipped", moments.t + 1)
        return False
    b1, b2 = config.betas
    moments.t += 1
    c1 = 1.0 - b1 ** moments.t
    c2 = 1.0 - b2 ** moments.t
    for k, p in state.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        m = moments.m[k]
        v = moments.v[k]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p *= 1.0 - lr * config.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return True


def lr_at_step(step: int, total_steps: int, base_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return base_lr * (1.0 - step / total_steps)


# ---------------------------------------------------------------------------
# batches and the loss


@dataclass
class Batch:
    images: np.ndarray
    taxa: np.ndarray
    records: list[SampleRecord]

    @classmethod
    def from_records(cls, records: list[SampleRecord]) -> "Batch":
        return cls(np.stack([r.image for r in records]), np.array([r.taxon_index for r in records]), records)


def _gt(records, attr):
    return np.stack([getattr(r, attr) for r in records])


def batch_loss(params, batch: Batch, setup: ModelSetup, weights: LossWeights):
    """Total training loss of one batch as a scalar Tensor, plus its parts."""
    groups, z = network_forward(batch.images, batch.taxa, params, setup.network)
    terms, parts = [], {}
    for taxon, (idx, pred) in groups.items():
        tpl = setup.templates[taxon]
        recs = [batch.records[i] for i in idx]
        cam0 = recs[0].camera
        out = forward_tensors(tpl, pred.beta, pred.theta, np.zeros((len(idx), 3)), pred.alpha)
        kp2d = np.nan_to_num(_gt(recs, "keypoints2d"))
        vis = _gt(recs, "visibility")
        verts2d = project_tensor(out["vertices"], pred.cam_t, cam0.focal, cam0.principal)
        soft = soft_silhouette(verts2d, tpl.faces, cam0.resolution, weights.mask_sharpness)
        l2d = loss_2d(out["keypoints3d"], pred.cam_t, cam0.focal, cam0.principal, kp2d, vis, soft,
                      _gt(recs, "mask"), weights, cam0.resolution)
        has = np.array([r.has_3d for r in recs])
        l3d = None
        if has.any():
            beta = np.stack([r.params.beta for r in recs])
            theta = np.stack([r.params.theta for r in recs])
            alpha = np.stack([r.params.alpha for r in recs]) if taxon == "avian" else None
            l3d = loss_3d(pred.beta, pred.theta, out["keypoints3d"], beta, theta, _gt(recs, "keypoints3d"),
                          weights, taxon, pred.alpha, alpha)
        prior = setup.priors[taxon]
        if taxon == "quadruped":
            lp = loss_smal_prior(pred.beta, pred.theta, prior, weights)
        else:
            lp = loss_aves_prior(pred.beta, pred.theta, pred.alpha, prior, weights)
        terms.append(SampleTerms(taxon, l2d, lp, has, l3d))
        parts[taxon] = {"l2d": float(l2d.data.mean()), "prior": float(lp.data.mean()),
                        "l3d": None if l3d is None else float(l3d.data[has].mean())}
    labels = np.array([r.family_label for r in batch.records])
    lcon = loss_con(z, labels, weights.tau)
    parts["con"] = float(lcon.data)
    return loss_total(terms, lcon, weights, len(batch.records)), parts


# ---------------------------------------------------------------------------
# training state and checkpoints


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    moments: AdamState
    rng: np.random.Generator
    stage: int = 1
    step: int = 0                  # steps completed within the current stage
    losses: list[float] = field(default_factory=list)


def new_train_state(setup: ModelSetup, config: TrainConfig) -> TrainState:
    params = init_state(setup.network, seed=config.seed)
    return TrainState(params, AdamState.zeros_like(params), np.random.default_rng([config.seed, 1]))


def checkpoint_payload(ts: TrainState, setup: ModelSetup, config: TrainConfig):
    meta = {
        "stage": ts.stage, "step": ts.step, "adam_t": ts.moments.t,
        "rng": ts.rng.bit_generator.state, "losses": ts.losses,
        "train_config": config.to_dict(), "network_config": setup.network.to_dict(),
        "taxa": list(setup.templates),
    }
    tensors = {f"param/{k}": v for k, v in ts.params.items()}
    tensors.update({f"adam_m/{k}": v for k, v in ts.moments.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in ts.moments.v.items()})
    for taxon, tpl in setup.templates.items():
        tensors.update(template_tensors(tpl, f"template/{taxon}/"))
    for taxon, prior in setup.priors.items():
        for k in ("mu_beta", "Sigma_beta", "mu_theta", "Sigma_theta", "theta_bar", "alpha_bar"):
            val = getattr(prior, k)
            if val is not None:
                tensors[f"prior/{taxon}/{k}"] = np.asarray(val, dtype=np.float64)
    return meta, tensors


def save_train_state(path, ts: TrainState, setup: ModelSetup, config: TrainConfig) -> None:
    save_checkpoint(path, *checkpoint_payload(ts, setup, config))


def load_train_state(path):
    """Return ``(TrainState, ModelSetup, TrainConfig)`` from a checkpoint file."""
    meta, tensors = load_checkpoint(path)

    def group(prefix):
        return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}

    templates = {t: template_from_tensors(tensors, f"template/{t}/") for t in meta["taxa"]}
    priors = {}
    for t in meta["taxa"]:
        fields = {k.split("/")[-1]: v for k, v in group(f"prior/{t}/").items()}
        priors[t] = PriorDistribution(**fields)
    setup = ModelSetup(NetworkConfig(**meta["network_config"]), templates, priors)
    config = TrainConfig(**meta["train_config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    moments = AdamState(group("adam_m/"), group("adam_v/"), meta["adam_t"])
    ts = TrainState(group("param/"), moments, rng, meta["stage"], meta["step"], list(meta["losses"]))
    return ts, setup, config


class DivergenceError(RuntimeError):
    pass


def run_stage(ts: TrainState, setup: ModelSetup, datasets: list[Dataset], config: TrainConfig, stage: int,
              checkpoint_dir=None, max_steps: int | None = None, on_step=None) -> TrainState:
    """Train one stage (or continue it) and return the updated state.

    Entering stage 2 from a finished stage 1 restarts the LR schedule; the
    Adam moments carry over unless ``reset_moments_stage2`` is set.
    ``max_steps`` stops early (for interrupted-run tests); resuming from the
    saved state continues the same trajectory.
    """
    total = config.stage1_steps if stage == 1 else config.stage2_steps
    if ts.stage != stage:
        if stage == 2 and ts.stage == 1:
            ts.stage, ts.step = 2, 0
            if config.reset_moments_stage2:
                ts.moments = AdamState.zeros_like(ts.params)
        else:
            raise ValueError(f"cannot go from stage {ts.stage} to stage {stage}")
    weights = dict(config.dataset_weights) or {d.name: 1.0 for d in datasets}
    cdf = _stage_cdf(datasets, weights, stage)
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    last_good = None
    end = total if max_steps is None else min(total, ts.step + max_steps)
    while ts.step < end:
        recs = [draw_record(datasets, cdf, ts.rng)[1] for _ in range(config.batch_size)]
        params = as_tensors(ts.params, requires_grad=True)
        loss, parts = batch_loss(params, Batch.from_records(recs), setup, config.loss)
        value = float(loss.data)
        if not math.isfinite(value):
            if ckdir is not None and last_good is not None:
                save_checkpoint(ckdir / "last_good.ck", *last_good)
            raise DivergenceError(f"non-finite loss at stage {stage} step {ts.step}")
        loss.backward()
        grads = {k: t.grad for k, t in params.items() if t.grad is not None}
        optimizer_step(ts.params, grads, ts.moments, lr_at_step(ts.step, total, config.base_lr), config)
        ts.step += 1
        ts.losses.append(value)
        if on_step is not None:
            on_step(ts, value, parts)
        if ckdir is not None and config.checkpoint_every and ts.step % config.checkpoint_every == 0:
            last_good = checkpoint_payload(ts, setup, config)
            save_checkpoint(ckdir / f"stage{stage}_step{ts.step:07d}.ck", *last_good)
    return ts


# ---------------------------------------------------------------------------
# inference and evaluation


def predict(params: dict[str, np.ndarray], setup: ModelSetup, records: list[SampleRecord], batch_size: int = 32):
    """Per-record predictions: body params, camera translation, mesh and 2D keypoints."""
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        batch = Batch.from_records(chunk)
        groups, _ = network_forward(batch.images, batch.taxa, params, setup.network)
        slots: list = [None] * len(chunk)
        for taxon, (idx, pred) in groups.items():
            tpl = setup.templates[taxon]
            for j, i in enumerate(idx):
                bp = BodyParams(beta=pred.beta.data[j].copy(), theta=pred.theta.data[j].copy(), gamma=np.zeros(3),
                                alpha=None if pred.alpha is None else pred.alpha.data[j].copy())
                mesh = model_forward(tpl, bp)
                cam = chunk[i].camera
                kp2d, _ = project(mesh.keypoints3d + pred.cam_t.data[j], _camera_at_origin(cam))
                slots[i] = {"params": bp, "cam_t": pred.cam_t.data[j].copy(), "mesh": mesh, "kp2d": kp2d}
        out.extend(slots)
    return out


def _camera_at_origin(cam):
    from .camera import CameraSpec
    return CameraSpec(cam.focal, cam.principal, np.zeros(3), cam.resolution)


def ground_truth_sample(rec: SampleRecord, template: ModelTemplate) -> dict:
    mesh = model_forward(template, rec.params)
    return {
        "gt_kp3d": rec.keypoints3d if rec.has_3d else None,
        "gt_verts": mesh.vertices if rec.has_3d else None,
        "gt_kp2d": rec.keypoints2d, "visibility": rec.visibility, "mask": rec.mask,
        "hth_pair": template.head_tail,
    }


def evaluate_predictions(records: list[SampleRecord], preds: list[dict], templates) -> MetricsReport:
    samples = []
    for rec, pred in zip(records, preds):
        s = ground_truth_sample(rec, templates[rec.taxon])
        s.update(pred_kp3d=pred["mesh"].keypoints3d, pred_verts=pred["mesh"].vertices,
                 pred_kp2d=pred["kp2d"])
        samples.append(s)
    return evaluate_samples(samples)


def evaluate_model(params: dict[str, np.ndarray], setup: ModelSetup, records: list[SampleRecord]) -> MetricsReport:
    """Metrics of the network on ``records`` (all taxa pooled)."""
    return evaluate_predictions(records, predict(params, setup, records), setup.templates)


def evaluate_by_taxon(params, setup: ModelSetup, records) -> dict[str, MetricsReport]:
    return {t: evaluate_model(params, setup, [r for r in records if r.taxon == t])
            for t in TAXA if any(r.taxon == t for r in records)}


def oracle_predictions(records: list[SampleRecord], templates) -> list[dict]:
    """Ground truth dressed up as predictions (metric sanity checks)."""
    out = []
    for r in records:
        mesh = model_forward(templates[r.taxon], r.params)
        out.append({"params": r.params, "cam_t": r.camera.translation, "mesh": mesh,
                    "kp2d": project(mesh.keypoints3d, r.camera)[0]})
    return out


def moving_average(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, float)
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window


def loss_trace_json(losses) -> str:
    return json.dumps([float(x) for x in losses])

"""Evaluation metrics: Procrustes-aligned errors, PCK, AUC and Chamfer."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

AUC_GRID = np.round(np.arange(1, 101) * 0.01, 2)
PCK_THRESHOLDS = (0.1, 0.15)


@dataclass
class Alignment:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return self.scale * points @ self.rotation.T + self.translation


def procrustes_align(X: np.ndarray, Y: np.ndarray) -> Alignment:
    """Similarity transform ``(s, R, t)`` minimising ``||s R X + t - Y||``.

    Umeyama's closed form: SVD of the cross-covariance with a sign flip on
    the smallest singular direction when the rotation would be a
    reflection.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("procrustes_align needs two n x 3 arrays of equal shape")
    if X.shape[0] < 3:
        raise ValueError("need at least 3 points")
    mx, my = X.mean(0), Y.mean(0)
    xc, yc = X - mx, Y - my
    var_x = (xc ** 2).sum()
    if var_x <= 1e-24 * max(1.0, (X ** 2).sum()):
        raise ValueError("degenerate point set: zero variance")
    cov = yc.T @ xc
    U, S, Vt = np.linalg.svd(cov)
    d = np.ones(3)
    if np.linalg.det(U @ Vt) < 0:
        d[-1] = -1.0
    R = U @ np.diag(d) @ Vt
    s = (S * d).sum() / var_x
    t = my - s * R @ mx
    return Alignment(float(s), R, t)


def pa_point_error(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance after similarity alignment of ``pred`` onto ``gt``."""
    al = procrustes_align(pred, gt)
    return float(np.linalg.norm(al.apply(np.asarray(pred, float)) - gt, axis=1).mean())


def pck(pred2d, gt2d, visibility, norm: str = "silhouette_area", mask=None, hth_pair=None,
        threshold: float = 0.1):
    """Fraction of visible keypoints within the threshold, or ``None``.

    ``norm="silhouette_area"`` scales ``threshold`` by the square root of the
    mask area; ``norm="hth"`` uses half the 2D head-to-tail distance and
    ignores ``threshold``.  Returns ``None`` when the sample cannot be scored
    (no visible keypoint, empty mask, coincident head and tail).
    """
    pred2d, gt2d = np.asarray(pred2d, float), np.asarray(gt2d, float)
    vis = np.asarray(visibility).astype(bool)
    if not vis.any():
        return None
    dist = np.linalg.norm(pred2d - gt2d, axis=1)[vis]
    if norm == "silhouette_area":
        area = np.count_nonzero(mask)
        if area == 0:
            return None
        limit = threshold * np.sqrt(area)
    elif norm == "hth":
        head, tail = hth_pair
        span = np.linalg.norm(gt2d[head] - gt2d[tail])
        if span == 0:
            return None
        limit = 0.5 * span
    else:
        raise ValueError(f"unknown normalisation {norm!r}")
    return float(np.mean(dist <= limit))


def auc_from_pck(distances, normalizers, grid=AUC_GRID) -> float:
    """Mean PCK over a threshold grid for normalised keypoint distances.

    ``distances`` and ``normalizers`` are flat arrays over all scored
    keypoints; a keypoint counts at threshold ``t`` when
    ``distance <= t * normalizer``.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty threshold grid")
    d = np.asarray(distances, float).reshape(-1)
    n = np.asarray(normalizers, float).reshape(-1)
    if d.size == 0:
        raise ValueError("no keypoints to score")
    curve = [(d <= t * n).mean() for t in grid]
    return float(np.mean(curve))


def chamfer(a: np.ndarray, b: np.ndarray) -> float:
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(da.mean() + db.mean())


def _icp_similarity(src: np.ndarray, dst: np.ndarray, iterations: int = 20) -> np.ndarray:
    """Align ``src`` onto ``dst`` without correspondences."""
    cur = src - src.mean(0)
    scale = np.sqrt((dst - dst.mean(0)).var(0).sum() / max(cur.var(0).sum(), 1e-300))
    cur = cur * scale + dst.mean(0)
    tree = cKDTree(dst)
    for _ in range(iterations):
        _, idx = tree.query(cur)
        try:
            al = procrustes_align(cur, dst[idx])
        except ValueError:
            break
        cur = al.apply(cur)
    return cur


def chamfer_pa(pred_points: np.ndarray, gt_points: np.ndarray, iterations: int = 20) -> float:
    """Symmetric Chamfer distance after Procrustes alignment of pred onto gt.

    Equal-size inputs are taken as corresponding vertex sets; otherwise the
    alignment is found by iterating nearest-neighbour matching.
    """
    pred = np.asarray(pred_points, float)
    gt = np.asarray(gt_points, float)
    if len(pred) < 3 or len(gt) < 3:
        raise ValueError("chamfer_pa needs at least 3 points per cloud")
    if np.ptp(pred, axis=0).max() == 0 or np.ptp(gt, axis=0).max() == 0:
        raise ValueError("degenerate point cloud")
    if pred.shape == gt.shape:
        aligned = procrustes_align(pred, gt).apply(pred)
    else:
        aligned = _icp_similarity(pred, gt, iterations)
    return chamfer(aligned, gt)


@dataclass
class MetricsReport:
    pa_mpjpe: float | None = None
    pa_mpvpe: float | None = None
    pck: dict[str, float | None] = field(default_factory=dict)
    auc: float | None = None
    pa_cd: float | None = None
    counts: dict[str, int] = field(default_factory=dict)

    def flat(self) -> dict[str, float | int | None]:
        out = {"pa_mpjpe_mm": self.pa_mpjpe, "pa_mpvpe_mm": self.pa_mpvpe}
        out.update({f"pck@{k}": v for k, v in self.pck.items()})
        out["auc"] = self.auc
        out["pa_cd_mm"] = self.pa_cd
        out.update({f"n_{k}": v for k, v in self.counts.items()})
        return out

    def to_table(self) -> str:
        rows = []
        for k, v in self.flat().items():
            if v is None:
                rows.append(f"{k:<16s} absent")
            elif isinstance(v, int):
                rows.append(f"{k:<16s} {v}")
            else:
                rows.append(f"{k:<16s} {v:.4f}")
        return "\n".join(rows)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _mean(values):
    return float(np.mean(values)) if len(values) else None


def evaluate_samples(samples) -> MetricsReport:
    """Aggregate metrics over per-sample prediction/ground-truth pairs.

    Each sample is a mapping with ``pred_kp3d``, ``gt_kp3d``, ``pred_verts``,
    ``gt_verts``, ``pred_kp2d``, ``gt_kp2d``, ``visibility``, ``mask`` and
    ``hth_pair``.  Missing entries leave the dependent metric absent.
    3D errors are reported in millimetres.
    """
    mpjpe, mpvpe, cd = [], [], []
    pck_vals = {f"{t:g}": [] for t in PCK_THRESHOLDS}
    pck_vals["hth"] = []
    auc_d, auc_n = [], []
    skipped = 0
    for s in samples:
        if s.get("gt_kp3d") is not None:
            mpjpe.append(1000.0 * pa_point_error(s["pred_kp3d"], s["gt_kp3d"]))
        if s.get("gt_verts") is not None:
            mpvpe.append(1000.0 * pa_point_error(s["pred_verts"], s["gt_verts"]))
            cd.append(1000.0 * chamfer_pa(s["pred_verts"], s["gt_verts"]))
        if s.get("gt_kp2d") is None:
            continue
        vis = np.asarray(s["visibility"]).astype(bool)
        scored = False
        for t in PCK_THRESHOLDS:
            v = pck(s["pred_kp2d"], s["gt_kp2d"], vis, "silhouette_area", mask=s["mask"], threshold=t)
            if v is not None:
                pck_vals[f"{t:g}"].append(v)
                scored = True
        v = pck(s["pred_kp2d"], s["gt_kp2d"], vis, "hth", hth_pair=s["hth_pair"])
        if v is not None:
            pck_vals["hth"].append(v)
        if scored:
            dist = np.linalg.norm(np.asarray(s["pred_kp2d"]) - s["gt_kp2d"], axis=1)[vis]
            auc_d.append(dist)
            auc_n.append(np.full(dist.shape, np.sqrt(np.count_nonzero(s["mask"]))))
        else:
            skipped += 1
    return MetricsReport(
        pa_mpjpe=_mean(mpjpe),
        pa_mpvpe=_mean(mpvpe),
        pck={k: _mean(v) for k, v in pck_vals.items()},
        auc=auc_from_pck(np.concatenate(auc_d), np.concatenate(auc_n)) if auc_d else None,
        pa_cd=_mean(cd),
        counts={"samples": len(samples), "pa_mpjpe": len(mpjpe), "pck": len(pck_vals["0.1"]),
                "pck_skipped": skipped},
    )

"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` (the summary lines appear at
the end of the session) or directly with ``python tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from animer.bodymodel import BodyParams, build_toy_template, forward_tensors, model_forward, rest_shape
from animer.camera import CameraSpec, keypoint_visibility, project, project_tensor, rasterize
from animer.datagen import (GenConfig, SampleRecord, build_dataset, cycle_consistency_filter, drop_rate,
                            mark_2d_only, perturb_mask, sample_body_params, synthesize_sample, toy_priors,
                            toy_templates)
from animer.losses import (LossWeights, PriorDistribution, SampleTerms, loss_2d, loss_3d, loss_aves_prior, loss_con,
                           loss_smal_prior, loss_total, soft_silhouette)
from animer.metrics import procrustes_align, pa_point_error
from animer.network import HeadSpec, NetworkConfig, init_state, moe_ffn, network_forward
from animer.numkernel import DiffGraph, constant, grad_check, normalize
from netcheck import conditioned_point, network_objective
from animer.trainer import (Dataset, ModelSetup, TrainConfig, evaluate_by_taxon, evaluate_predictions,
                            load_train_state, moving_average, new_train_state, oracle_predictions, run_stage,
                            save_train_state, weighted_sample_stream)


@pytest.fixture
def verdict(record_property):
    """Attach the criterion's one-line result to the test report, then assert."""

    def emit(criterion: str, ok: bool, detail: str):
        record_property("acceptance", f"{criterion}: {'PASS' if ok else 'FAIL'} ({detail})")
        assert ok, f"{criterion}: {detail}"

    return emit


# -- 1 ------------------------------------------------------------------------


def _gradient_graphs():
    rng = np.random.default_rng(0)
    w = LossWeights()
    quad = build_toy_template("quadruped", 6, 4, 40, seed=0)
    bird = build_toy_template("avian", 6, 4, 40, seed=0)
    graphs = {}

    labels = np.array([0, 1, 0, 2, 1, 0])
    graphs["loss_con"] = DiffGraph(lambda x: loss_con(normalize(x, axis=1), labels, 0.5),
                                   {"x": rng.normal(size=(6, 8))})

    gt = dict(beta=rng.normal(size=(3, 4)), theta=rng.normal(scale=0.3, size=(3, 6, 3)),
              kp3d=rng.normal(size=(3, 8, 3)), alpha=rng.uniform(-0.5, 3.5, size=(3, 5)))
    graphs["loss_3d"] = DiffGraph(
        lambda b, t, k, a: loss_3d(b, t, k, gt["beta"], gt["theta"], gt["kp3d"], w, "avian", a, gt["alpha"]).sum(),
        {"b": rng.normal(size=(3, 4)), "t": rng.normal(scale=0.3, size=(3, 6, 3)),
         "k": rng.normal(size=(3, 8, 3)), "a": rng.uniform(-0.5, 3.5, size=(3, 5))})

    # keypoint reprojection plus a soft silhouette rendered from posed vertices
    mesh = model_forward(quad, BodyParams(np.zeros(4), rng.normal(scale=0.3, size=(6, 3)), np.zeros(3)))
    cam = CameraSpec.default((64, 64), translation=[0.0, 0.0, 5.0])
    gt_mask = rasterize(mesh.vertices + [0.05, 0.0, 0.0], quad.faces, cam).mask[None]
    vis = np.array([[1, 1, 0, 1, 1, 1, 0, 1]])
    kp2d = project(mesh.keypoints3d + 0.03, cam)[0][None]

    def l2d(v, k, t):
        soft = soft_silhouette(project_tensor(v, t, cam.focal, cam.principal), quad.faces, (64, 64), 5.0)
        return loss_2d(k, t, cam.focal, cam.principal, kp2d, vis, soft, gt_mask, w, (64, 64)).sum()

    graphs["loss_2d"] = DiffGraph(l2d, {"v": mesh.vertices[None], "k": mesh.keypoints3d[None],
                                        "t": np.array([[0.02, -0.01, 5.0]])})

    a = rng.normal(size=(4, 4))
    b = rng.normal(size=(18, 18))
    prior = PriorDistribution(mu_beta=rng.normal(size=4), Sigma_beta=a @ a.T + np.eye(4),
                              mu_theta=rng.normal(size=18), Sigma_theta=b @ b.T + np.eye(18))
    graphs["loss_smal_prior"] = DiffGraph(lambda b, t: loss_smal_prior(b, t, prior, w).sum(),
                                          {"b": rng.normal(size=(2, 4)), "t": rng.normal(size=(2, 6, 3))})
    aprior = PriorDistribution(theta_bar=rng.normal(size=(6, 3)), alpha_bar=np.full(5, 1.5))
    graphs["loss_aves_prior"] = DiffGraph(lambda b, t, a: loss_aves_prior(b, t, a, aprior, w).sum(),
                                          {"b": rng.normal(size=(2, 4)), "t": rng.normal(size=(2, 6, 3)),
                                           "a": rng.normal(size=(2, 5))})

    def total(l2q, prq, l3q, l2a, pra, l3a, lc):
        groups = [SampleTerms("quadruped", l2q, prq, np.array([True, False]), l3q),
                  SampleTerms("avian", l2a, pra, np.array([True]), l3a)]
        return loss_total(groups, lc, w, 3)

    graphs["loss_total"] = DiffGraph(total, {k: rng.random(size=n) for k, n in
                                             [("l2q", 2), ("prq", 2), ("l3q", 2), ("l2a", 1), ("pra", 1),
                                              ("l3a", 1), ("lc", ())]})

    for tpl in (quad, bird):
        cv, ck = rng.normal(size=(2, 40, 3)), rng.normal(size=(2, 8, 3))

        def body(beta, theta, gamma, alpha=None, tpl=tpl, cv=cv, ck=ck):
            out = forward_tensors(tpl, beta, theta, gamma, alpha)
            return (out["vertices"] * cv).sum() + (out["keypoints3d"] * ck).sum()

        leaves = {"beta": rng.normal(size=(2, 4)), "theta": rng.normal(scale=0.5, size=(2, 6, 3)),
                  "gamma": rng.normal(size=(2, 3))}
        if tpl.taxon == "avian":
            leaves["alpha"] = rng.uniform(-0.5, 3.5, size=(2, 5))
        graphs[f"model_forward[{tpl.taxon}]"] = DiffGraph(body, leaves)

    cp = rng.normal(size=(2, 7, 2))
    graphs["project"] = DiffGraph(lambda p, t: (project_tensor(p, t, 128.0, [32.0, 32.0]) * cp).sum(),
                                  {"p": rng.normal(size=(2, 7, 3)), "t": rng.normal(size=(2, 3)) + [0, 0, 6.0]})

    cfg = NetworkConfig(heads={"quadruped": HeadSpec(4, 6), "avian": HeadSpec(4, 6, 5)})
    assert (cfg.embed_dim, cfg.n_blocks, cfg.n_tokens) == (32, 2, 17)
    graphs["network"] = (DiffGraph(network_objective(cfg), conditioned_point(init_state(cfg, seed=0))), 4)
    return graphs


def test_c1_gradient_integrity(verdict):
    start = time.perf_counter()
    worst, failures = 0.0, []
    for name, g in _gradient_graphs().items():
        g, probes = g if isinstance(g, tuple) else (g, None)
        report = grad_check(g, step=1e-6, max_probes=probes, seed=1)
        worst = max(worst, report.max_error)
        if not report.passed(1e-4):
            failures.append(f"{name}={report.max_error:.2e}")
    elapsed = time.perf_counter() - start
    ok = not failures and elapsed <= 60.0
    verdict("C1 gradient integrity", ok,
            f"max rel err {worst:.2e}, {elapsed:.1f} s" + (f", failing: {failures}" if failures else ""))


# -- 2 ------------------------------------------------------------------------


def test_c2_procrustes_recovery(verdict):
    rng = np.random.default_rng(2)
    worst = worst_param = 0.0
    for _ in range(100):
        X = rng.normal(size=(30, 3))
        s, R, t = rng.uniform(0.2, 5.0), Rotation.random(random_state=rng).as_matrix(), rng.normal(size=3) * 3
        Y = s * X @ R.T + t
        al = procrustes_align(X, Y)
        worst = max(worst, pa_point_error(X, Y))
        worst_param = max(worst_param, abs(al.scale - s), np.abs(al.rotation - R).max(),
                          np.abs(al.translation - t).max())
    verdict("C2 Procrustes recovery", worst <= 1e-8 and worst_param <= 1e-8,
            f"max pa error {worst:.1e}, max (s,R,t) deviation {worst_param:.1e}")


# -- 3 ------------------------------------------------------------------------


def test_c3_moe_contracts(verdict):
    rng = np.random.default_rng(3)
    big = NetworkConfig(image=(256, 192, 3), patch=16, embed_dim=1280, shared_dim=960, specific_dim=320,
                        n_heads=16, ffn_hidden=5120, n_blocks=1)
    state = {"blocks.0.fc2_shared.w": rng.normal(size=(5120, 960)) * 0.01, "blocks.0.fc2_shared.b": rng.normal(size=960),
             "blocks.0.fc2_specific.quadruped.w": rng.normal(size=(5120, 320)) * 0.01,
             "blocks.0.fc2_specific.quadruped.b": rng.normal(size=320)}
    hidden = rng.normal(size=(1, big.n_tokens, 5120))
    out = moe_ffn(constant(hidden), [0], state, 0, big).data[0]
    shared = hidden[0] @ state["blocks.0.fc2_shared.w"] + state["blocks.0.fc2_shared.b"]
    spec = hidden[0] @ state["blocks.0.fc2_specific.quadruped.w"] + state["blocks.0.fc2_specific.quadruped.b"]
    shape_ok = (big.n_tokens == 193 and shared.shape == (193, 960) and spec.shape == (193, 320)
                and out.shape == (193, 1280) and np.array_equal(out, np.concatenate([shared, spec], axis=1)))

    cfg = NetworkConfig(heads={"quadruped": HeadSpec(4, 6), "avian": HeadSpec(4, 6, 5)})
    base = init_state(cfg, seed=3)
    changed_bits = 0
    for i in range(20):
        img = rng.random((4, 64, 64, 2))
        taxa = rng.permutation([0, 0, 1, 1])
        perturbed = {k: v + rng.normal(size=v.shape) if (".avian." in k or k.startswith("heads.avian.")) else v
                     for k, v in base.items()}
        g0, z0 = network_forward(img, taxa, base, cfg)
        g1, z1 = network_forward(img, taxa, perturbed, cfg)
        q0, q1 = g0["quadruped"][1], g1["quadruped"][1]
        for name in ("beta", "theta", "cam_t"):
            changed_bits += int(np.count_nonzero(getattr(q0, name).data.view(np.uint64)
                                                 != getattr(q1, name).data.view(np.uint64)))
        qi = g0["quadruped"][0]
        changed_bits += int(np.count_nonzero(z0.data[qi].view(np.uint64) != z1.data[qi].view(np.uint64)))
    verdict("C3 MoE contracts", shape_ok and changed_bits == 0,
            f"193x960 + 193x320 = {out.shape[0]}x{out.shape[1]}, "
            f"quadruped words changed by avian perturbation: {changed_bits}")


# -- 4 ------------------------------------------------------------------------


def _con_double_loop(z, labels, tau):
    total = 0.0
    for i in range(len(z)):
        pos = [p for p in range(len(z)) if p != i and labels[p] == labels[i]]
        if not pos:
            continue
        denom = sum(np.exp(z[i] @ z[a] / tau) for a in range(len(z)) if a != i)
        total += -sum(np.log(np.exp(z[i] @ z[p] / tau) / denom) for p in pos) / len(pos)
    return total


def test_c4_contrastive_oracle(verdict):
    rng = np.random.default_rng(4)
    err = perm_err = 0.0
    for _ in range(50):
        b, d = int(rng.integers(2, 9)), int(rng.integers(2, 17))
        z = rng.normal(size=(b, d))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        labels = rng.integers(0, 3, size=b)
        tau = rng.uniform(0.05, 1.0)
        val = float(loss_con(constant(z), labels, tau).data)
        err = max(err, abs(val - _con_double_loop(z, labels, tau)))
        p = rng.permutation(b)
        perm_err = max(perm_err, abs(val - float(loss_con(constant(z[p]), labels[p], tau).data)))
    z = rng.normal(size=(6, 5))
    distinct = float(loss_con(constant(z / np.linalg.norm(z, axis=1, keepdims=True)), np.arange(6), 0.07).data)
    verdict("C4 contrastive oracle", err <= 1e-12 and perm_err <= 1e-12 and distinct == 0.0,
            f"oracle err {err:.1e}, permutation err {perm_err:.1e}, distinct labels -> {distinct}")


# -- 5 ------------------------------------------------------------------------


def test_c5_lbs_rigidity(verdict):
    rng = np.random.default_rng(5)
    equi = ident = bone = 0.0
    for i in range(20):
        taxon = ("quadruped", "avian")[i % 2]
        nj = int(rng.integers(4, 9))
        tpl = build_toy_template(taxon, nj, int(rng.integers(1, 6)), int(rng.integers(4 * nj, 8 * nj)), seed=100 + i)
        alpha = rng.uniform(-0.5, 3.5, tpl.n_bones) if taxon == "avian" else None
        p = BodyParams(rng.normal(size=tpl.n_betas), rng.normal(scale=0.4, size=(nj, 3)), rng.normal(size=3), alpha)
        base = model_forward(tpl, p)
        R = Rotation.random(random_state=rng)
        theta = p.theta.copy()
        theta[0] = (R * Rotation.from_rotvec(p.theta[0])).as_rotvec()
        rot = model_forward(tpl, BodyParams(p.beta, theta, p.gamma, alpha))
        root = base.joints[0]
        equi = max(equi, np.abs(rot.vertices - ((base.vertices - root) @ R.as_matrix().T + root)).max())

        zero = model_forward(tpl, BodyParams(p.beta, np.zeros((nj, 3)), np.zeros(3), alpha))
        rv, _ = rest_shape(tpl, p.beta[None], None if alpha is None else alpha[None])
        ident = max(ident, np.abs(zero.vertices - rv.data[0]).max())

        if taxon == "avian":
            rest = tpl.rest_joints()
            for b in range(tpl.n_bones):
                a = np.zeros(tpl.n_bones)
                a[b] = rng.uniform(-0.5, 3.5)
                out = model_forward(tpl, BodyParams(np.zeros(tpl.n_betas), np.zeros((nj, 3)), np.zeros(3), a))
                for j in range(1, nj):
                    q = tpl.parents[j]
                    ratio = np.linalg.norm(out.joints[j] - out.joints[q]) / np.linalg.norm(rest[j] - rest[q])
                    bone = max(bone, abs(ratio - ((1 + a[b]) if j - 1 == b else 1.0)))
    verdict("C5 LBS rigidity", max(equi, ident, bone) <= 1e-9,
            f"equivariance {equi:.1e}, zero-pose identity {ident:.1e}, bone-scale factor {bone:.1e}")


# -- 6 ------------------------------------------------------------------------


def _ray_depth(pixel, vertices, faces, camera):
    """Nearest surface depth along the ray through a pixel centre (Moller-Trumbore)."""
    f, (cx, cy) = camera.focal, camera.principal
    d = np.array([(pixel[0] + 0.5 - cx) / f, (pixel[1] + 0.5 - cy) / f, 1.0])
    tri = vertices[faces] + camera.translation
    e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    h = np.cross(np.broadcast_to(d, e2.shape), e2)
    a = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(a) > 1e-15
    inv = np.where(ok, 1.0 / np.where(ok, a, 1.0), 0.0)
    s = -tri[:, 0]
    u = inv * np.einsum("ij,ij->i", s, h)
    q = np.cross(s, e1)
    v = inv * (q @ d)
    t = inv * np.einsum("ij,ij->i", e2, q)
    hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > 0)
    return t[hit].min() if hit.any() else np.inf


def _visibility_oracle(kp, vertices, faces, camera):
    h, w = camera.resolution
    flags = []
    for k in kp:
        cam_pt = k + camera.translation
        if cam_pt[2] <= 0:
            flags.append(0)
            continue
        u = camera.focal * cam_pt[0] / cam_pt[2] + camera.principal[0]
        v = camera.focal * cam_pt[1] / cam_pt[2] + camera.principal[1]
        c, r = int(np.floor(u)), int(np.floor(v))
        if not (0 <= c < w and 0 <= r < h):
            flags.append(0)
            continue
        flags.append(int(cam_pt[2] <= _ray_depth((c, r), vertices, faces, camera) + 1e-4))
    return np.array(flags, np.uint8)


def test_c6_visibility_audit(verdict):
    cfg = GenConfig()
    templates = toy_templates(cfg)
    rng = np.random.default_rng(6)
    mismatches = occlusion_cases = occlusion_fail = visible = total = 0
    for i in range(200):
        tpl = templates[("quadruped", "avian")[i % 2]]
        params, cam, fam = sample_body_params(rng, tpl.taxon, cfg, tpl)
        rec = synthesize_sample(params, cam, tpl, cfg, fam)
        verts = model_forward(tpl, params).vertices
        oracle = _visibility_oracle(rec.keypoints3d, verts, tpl.faces, cam)
        mismatches += int(np.count_nonzero(oracle != rec.visibility))
        visible += int(rec.visibility.sum())
        total += len(oracle)
        # push every keypoint that lands on the silhouette 5 cm behind the surface along its ray
        buffers = rasterize(verts, tpl.faces, cam)
        for k in rec.keypoints3d:
            cam_pt = k + cam.translation
            uv, valid = project(k[None], cam)
            c, r = np.floor(uv[0]).astype(int) if valid[0] else (-1, -1)
            if not (0 <= c < 64 and 0 <= r < 64) or not rec.mask[r, c]:
                continue
            behind = cam_pt * (rec.depth[r, c] + 0.05) / cam_pt[2] - cam.translation
            occlusion_cases += 1
            occlusion_fail += int(keypoint_visibility(behind[None], cam, buffers)[0] != 0)
    verdict("C6 visibility audit", mismatches == 0 and occlusion_fail == 0 and occlusion_cases > 0,
            f"{mismatches} flag mismatches over {total} keypoints ({visible} visible); "
            f"{occlusion_fail} of {occlusion_cases} occluded cases flagged visible")


# -- 7 ------------------------------------------------------------------------

TABLE_WEIGHTS = {"Animal3D": (1.0, True), "CtrlAni3D": (0.6, True), "Animal Pose": (0.15, False),
                 "AwA-Pose": (0.15, False), "Zebra Synthetic": (0.05, True), "Stanford Extra": (0.15, False),
                 "APT-36K": (0.15, False), "CtrlAVES3D": (0.45, True), "CUB": (0.45, False)}


def _placeholder(has_3d):
    return SampleRecord(image=None, taxon="quadruped", family_label=0, params=None, camera=None, keypoints3d=None,
                        keypoints2d=None, visibility=None, mask=None, depth=None, has_3d=has_3d)


def test_c7_sampler_fidelity(verdict):
    datasets = [Dataset(name, [_placeholder(has3d) for _ in range(3)]) for name, (_, has3d) in TABLE_WEIGHTS.items()]
    weights = {name: w for name, (w, _) in TABLE_WEIGHTS.items()}
    stream = weighted_sample_stream(datasets, weights, 2, np.random.default_rng(7))
    counts = np.bincount([next(stream)[0] for _ in range(100_000)], minlength=9)
    target = np.array(list(weights.values())) / sum(weights.values())
    dev = np.abs(counts / 100_000 - target).max()
    s1 = weighted_sample_stream(datasets, weights, 1, np.random.default_rng(8))
    leaked = sum(not rec.has_3d for _, rec in (next(s1) for _ in range(10_000)))
    verdict("C7 sampler fidelity", dev <= 0.02 and leaked == 0,
            f"max |freq - weight| {dev:.4f} over 1e5 draws; {leaked} 2D-only draws in 1e4 stage-1 draws")


# -- 8 ------------------------------------------------------------------------


def test_c8_loss_weight_defaults(verdict):
    w = LossWeights()
    got = (w.lambda_3d, w.lambda_2d, w.lambda_smal_prior, w.lambda_con, w.lambda_aves_prior,
           w.loss3d.lambda_beta, w.loss3d.lambda_theta, w.loss3d.alpha_weight("avian"),
           w.loss3d.alpha_weight("quadruped"), w.loss2d.lambda_M, w.smal_prior.lambda_beta,
           w.aves_prior.lambda_theta)
    want = (0.05, 0.01, 0.001, 0.0005, 0.002, 0.01, 0.2, 0.04, 0.0, 2.0, 0.5, 1.0)
    verdict("C8 loss-weight defaults", got == want and w.aves_prior.lambda_beta == 0.5, f"{got}")


# -- 9 ------------------------------------------------------------------------


def test_c9_metric_sanity(verdict):
    cfg = GenConfig(counts={"quadruped": 20, "avian": 20}, seed=9)
    templates = toy_templates(cfg)
    _, recs = build_dataset(cfg, templates)
    rep = evaluate_predictions(recs, oracle_predictions(recs, templates), templates)
    zeros = max(rep.pa_mpjpe, rep.pa_mpvpe, rep.pa_cd)
    pcks = [rep.pck[k] for k in ("0.1", "0.15", "hth")]
    verdict("C9 metric sanity", zeros <= 1e-9 and all(p == 1.0 for p in pcks) and rep.auc >= 0.99,
            f"PA errors <= {zeros:.1e} mm, PCK {pcks}, AUC {rep.auc:.4f}")


# -- 10 -----------------------------------------------------------------------

# toy protocol: 256 + 256 training records, 64 + 64 held out from a separate seed
CONVERGENCE = dict(train_seed=0, heldout_seed=1, n_train=256, n_heldout=64, n_2d_only=64, steps=1000,
                   network={}, train={})


def convergence_run():
    gen = GenConfig(counts={"quadruped": CONVERGENCE["n_train"], "avian": CONVERGENCE["n_train"]},
                    seed=CONVERGENCE["train_seed"])
    templates = toy_templates(gen)
    _, recs = build_dataset(gen, templates)
    held_cfg = GenConfig(counts={"quadruped": CONVERGENCE["n_heldout"], "avian": CONVERGENCE["n_heldout"]},
                         seed=CONVERGENCE["heldout_seed"])
    _, held = build_dataset(held_cfg, templates)
    k = CONVERGENCE["n_train"] - CONVERGENCE["n_2d_only"]
    datasets = []
    for taxon in ("quadruped", "avian"):
        group = [r for r in recs if r.taxon == taxon]
        datasets.append(Dataset(f"{taxon}_3d", group[:k]))
        if CONVERGENCE["n_2d_only"]:
            datasets.append(Dataset(f"{taxon}_2d", mark_2d_only(group[k:])))
    setup = ModelSetup.for_templates(templates, toy_priors(gen, templates), **CONVERGENCE["network"])
    config = TrainConfig(stage1_steps=CONVERGENCE["steps"], stage2_steps=CONVERGENCE["steps"], batch_size=16,
                         dataset_weights={d.name: 1.0 for d in datasets}, seed=0, **CONVERGENCE["train"])
    ts = new_train_state(setup, config)
    before = {t: r.pa_mpjpe for t, r in evaluate_by_taxon(ts.params, setup, held).items()}
    start = time.perf_counter()
    run_stage(ts, setup, datasets, config, 1)
    run_stage(ts, setup, datasets, config, 2)
    elapsed = time.perf_counter() - start
    after = {t: r.pa_mpjpe for t, r in evaluate_by_taxon(ts.params, setup, held).items()}
    return ts, before, after, elapsed


@pytest.mark.slow
def test_c10_toy_convergence(verdict):
    ts, before, after, elapsed = convergence_run()
    ma = moving_average(ts.losses, 10)
    ratio = ma[-1] / ma[0]
    gains = {t: 1.0 - after[t] / before[t] for t in before}
    ok = (elapsed <= 900 and np.isfinite(ts.losses).all() and ratio <= 0.5 and all(g >= 0.30 for g in gains.values()))
    verdict("C10 toy convergence", ok,
            f"{elapsed:.0f} s, final/step-10 loss {ratio:.3f}, held-out PA-MPJPE "
            + ", ".join(f"{t} {before[t]:.1f}->{after[t]:.1f} mm ({100 * gains[t]:.1f}%)" for t in before))


# -- 11 -----------------------------------------------------------------------


def test_c11_reproducibility(verdict, tmp_path):
    gen = GenConfig(counts={"quadruped": 16, "avian": 16}, seed=11)
    templates = toy_templates(gen)
    _, recs = build_dataset(gen, templates)
    datasets = [Dataset("q", [r for r in recs if r.taxon == "quadruped"][:12]),
                Dataset("q2d", mark_2d_only([r for r in recs if r.taxon == "quadruped"][12:])),
                Dataset("a", [r for r in recs if r.taxon == "avian"])]
    setup = ModelSetup.for_templates(templates, toy_priors(gen, templates))
    config = TrainConfig(stage1_steps=12, stage2_steps=8, batch_size=8, seed=4,
                         dataset_weights={"q": 1.0, "q2d": 0.5, "a": 1.0})

    def full(path):
        ts = new_train_state(setup, config)
        run_stage(ts, setup, datasets, config, 1)
        run_stage(ts, setup, datasets, config, 2)
        save_train_state(path, ts, setup, config)
        return path.read_bytes()

    a, b = full(tmp_path / "a.ck"), full(tmp_path / "b.ck")
    resumed_equal = []
    for stage, k in ((1, 5), (2, 3)):
        ts = new_train_state(setup, config)
        if stage == 2:
            run_stage(ts, setup, datasets, config, 1)
        run_stage(ts, setup, datasets, config, stage, max_steps=k)
        save_train_state(tmp_path / "mid.ck", ts, setup, config)
        ts, _, _ = load_train_state(tmp_path / "mid.ck")
        if stage == 1:
            run_stage(ts, setup, datasets, config, 1)
        run_stage(ts, setup, datasets, config, 2)
        save_train_state(tmp_path / "r.ck", ts, setup, config)
        resumed_equal.append((tmp_path / "r.ck").read_bytes() == a)
    verdict("C11 reproducibility", a == b and all(resumed_equal),
            f"repeat runs identical: {a == b}; resume mid-stage-1 / mid-stage-2 identical: {resumed_equal}")


# -- 12 -----------------------------------------------------------------------


def test_c12_filter_behavior(verdict):
    cfg = GenConfig()
    templates = toy_templates(cfg)
    rng = np.random.default_rng(12)
    corpus = []
    for i in range(80):
        tpl = templates[("quadruped", "avian")[i % 2]]
        params, cam, fam = sample_body_params(rng, tpl.taxon, cfg, tpl)
        rec = synthesize_sample(params, cam, tpl, cfg, fam)
        corpus.append((rec, perturb_mask(rec.mask, rng, cfg)))
    thresholds = np.round(np.linspace(0.05, 1.0, 20), 2)
    rates = [np.mean([not cycle_consistency_filter(r, m, t) for r, m in corpus]) for t in thresholds]
    monotone = all(a <= b for a, b in zip(rates, rates[1:]))

    mask = np.zeros((16, 16), np.uint8)
    mask[4:12, 2:10] = 1
    shifted = np.zeros_like(mask)
    shifted[4:12, 6:14] = 1
    rect = _placeholder(True)
    rect.mask = mask
    drop_05 = not cycle_consistency_filter(rect, shifted, 0.5)
    keep_03 = cycle_consistency_filter(rect, shifted, 0.3)
    verdict("C12 filter behavior", monotone and drop_05 and keep_03 and drop_rate([1 / 3], 0.5) == 1.0,
            f"drop rates {rates[0]:.2f}..{rates[-1]:.2f} monotone={monotone}; "
            f"IoU 1/3 dropped at 0.5: {drop_05}, kept at 0.3: {keep_03}")


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))

"""Train on a generated toy corpus and compare held-out PA-MPJPE before and after.

The defaults match the end-to-end acceptance run (256 samples per taxon,
1000 steps per stage); pass smaller values for a quick look.
"""

import argparse
import time

import numpy as np

from animer.datagen import GenConfig, build_dataset, mark_2d_only, toy_priors, toy_templates
from animer.trainer import Dataset, ModelSetup, TrainConfig, evaluate_by_taxon, moving_average, new_train_state, \
    run_stage


def pa_by_taxon(params, setup, records):
    return {t: r.pa_mpjpe for t, r in evaluate_by_taxon(params, setup, records).items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-train", type=int, default=256)
    ap.add_argument("--n-2d-only", type=int, default=64, help="per taxon, taken from the training samples")
    ap.add_argument("--n-heldout", type=int, default=64)
    ap.add_argument("--steps", type=int, default=1000, help="per stage")
    ap.add_argument("--lr", type=float, default=1e-3)
    args = ap.parse_args()

    gen = GenConfig(counts={"quadruped": args.n_train, "avian": args.n_train}, seed=0)
    templates = toy_templates(gen)
    _, recs = build_dataset(gen, templates)
    _, held = build_dataset(GenConfig(counts={"quadruped": args.n_heldout, "avian": args.n_heldout}, seed=1),
                            templates)
    datasets = []
    for taxon in templates:
        group = [r for r in recs if r.taxon == taxon]
        k = len(group) - args.n_2d_only
        datasets.append(Dataset(f"{taxon}_3d", group[:k]))
        if args.n_2d_only:
            datasets.append(Dataset(f"{taxon}_2d", mark_2d_only(group[k:])))

    setup = ModelSetup.for_templates(templates, toy_priors(gen, templates))
    config = TrainConfig(stage1_steps=args.steps, stage2_steps=args.steps, base_lr=args.lr,
                         dataset_weights={d.name: 1.0 for d in datasets})
    ts = new_train_state(setup, config)
    before = pa_by_taxon(ts.params, setup, held)
    start = time.perf_counter()
    for stage in (1, 2):
        run_stage(ts, setup, datasets, config, stage)
        print(f"stage {stage} done after {time.perf_counter() - start:.0f} s, "
              f"loss {np.mean(ts.losses[-10:]):.4f}")
    after = pa_by_taxon(ts.params, setup, held)
    ma = moving_average(ts.losses)
    print(f"final / step-10 loss: {ma[-1] / ma[0]:.3f}")
    for t in before:
        gain = 100 * (1 - after[t] / before[t])
        print(f"{t:10s} PA-MPJPE {before[t]:6.1f} -> {after[t]:6.1f} mm ({gain:+.1f}%)")


if __name__ == "__main__":
    main()

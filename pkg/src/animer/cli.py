"""Command-line entry points.

    animer gen-data   --config gen.json --out data/ --seed 1
    animer train      --stage 1 --data data/ --out ck/ [--config train.json]
    animer train      --stage 2 --data data/ --out ck/ --resume
    animer eval       --checkpoint ck/final --data data/test [--format json]
    animer infer      --checkpoint ck/final --data data/test --index 0 [--out mesh.obj]
    animer export-obj --data data/ --index 0 --out mesh.obj

Exit status: 0 on success, 1 on a usage error, 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .datagen import GenConfig, build_dataset, load_dataset, toy_priors, toy_templates
from .formats import FormatError, export_obj, read_blobs, template_from_tensors, template_tensors, write_blobs
from .network import as_tensors
from .trainer import (Dataset, ModelSetup, TrainConfig, evaluate_model, load_train_state, new_train_state, predict,
                      run_stage, save_train_state)
from .bodymodel import TAXA, model_forward

log = logging.getLogger("animer")

NETWORK_KEYS = ("patch", "embed_dim", "n_blocks", "n_heads", "ffn_hidden", "shared_dim", "specific_dim",
                "decoder_dim", "decoder_blocks", "decoder_heads", "head_hidden", "feature_dim", "cam_depth_init",
                "init_std")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RuntimeError(f"cannot read config {path}: {exc}") from exc


def _checkpoint_path(p) -> Path:
    p = Path(p)
    if p.is_dir():
        p = p / "latest.ck"
    if not p.exists() and p.with_suffix(".ck").exists():
        p = p.with_suffix(".ck")
    if not p.exists():
        raise FileNotFoundError(f"checkpoint not found: {p}")
    return p


def _load_data(path):
    path = Path(path)
    manifest, records = load_dataset(path)
    tpl_file = (path if path.is_dir() else path.parent) / "templates.bin"
    if tpl_file.exists():
        blobs = read_blobs(tpl_file)
        templates = {t: template_from_tensors(blobs, f"{t}/") for t in TAXA if f"{t}/taxon" in blobs}
    else:
        templates = toy_templates(GenConfig.from_dict(manifest["config"]))
    return manifest, records, templates


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    cfg = _read_json(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    config = GenConfig.from_dict(cfg)
    templates = toy_templates(config)
    templates = {t: templates[t] for t in config.counts}
    out = Path(args.out)
    manifest, records = build_dataset(config, templates, out, write_masks=args.masks)
    blobs = {}
    for t, tpl in templates.items():
        blobs.update(template_tensors(tpl, f"{t}/"))
    write_blobs(out / "templates.bin", blobs)
    for taxon, st in manifest["stats"].items():
        print(f"{taxon}: kept {st['kept']} of {st['attempts']} "
              f"(iou drops {st['dropped_iou']}, degenerate {st['degenerate']})")
    print(f"wrote {len(records)} records to {out}")
    return 0


def _datasets(manifest, records) -> list[Dataset]:
    groups: dict[str, list] = {}
    for r in records:
        name = f"{manifest['name']}_{r.taxon}" + ("" if r.has_3d else "_2d")
        groups.setdefault(name, []).append(r)
    return [Dataset(k, v) for k, v in sorted(groups.items())]


def cmd_train(args) -> int:
    out = Path(args.out)
    raw = _read_json(args.config)
    net_kw = {k: raw.pop(k) for k in NETWORK_KEYS if k in raw}
    manifest, records, templates = _load_data(args.data)
    datasets = _datasets(manifest, records)
    if args.resume is not None:
        ts, setup, config = load_train_state(_checkpoint_path(args.resume or out))
        if raw:
            config = TrainConfig(**{**config.to_dict(), **raw})
    else:
        if args.stage != 1:
            raise UsageError("stage 2 needs --resume with a stage-1 checkpoint")
        if args.seed is not None:
            raw["seed"] = args.seed
        config = TrainConfig(**raw)
        gen = GenConfig.from_dict(manifest["config"])
        h, w = gen.image_size
        setup = ModelSetup.for_templates(templates, toy_priors(gen, templates), image=(h, w, 2), **net_kw)
        ts = new_train_state(setup, config)
    if not config.dataset_weights:
        config.dataset_weights = {d.name: 1.0 for d in datasets}
    total = config.stage1_steps if args.stage == 1 else config.stage2_steps

    def report(state, value, parts):
        if state.step % max(1, total // 20) == 0 or state.step == total:
            print(f"stage {state.stage} step {state.step}/{total} loss {value:.6f}", flush=True)

    run_stage(ts, setup, datasets, config, args.stage, checkpoint_dir=out, on_step=report)
    save_train_state(out / f"stage{args.stage}.ck", ts, setup, config)
    save_train_state(out / "latest.ck", ts, setup, config)
    if args.stage == 2:
        save_train_state(out / "final.ck", ts, setup, config)
    (out / f"stage{args.stage}_losses.json").write_text(json.dumps(ts.losses))
    print(f"saved checkpoint to {out / f'stage{args.stage}.ck'}")
    return 0


def cmd_eval(args) -> int:
    ck = _checkpoint_path(args.checkpoint)
    ts, setup, _ = load_train_state(ck)
    _, records, _ = _load_data(args.data)
    report = evaluate_model(as_tensors(ts.params), setup, records)
    text = report.to_json() if args.format == "json" else report.to_table()
    print(text)
    out = Path(args.out) if args.out else ck.with_name(ck.stem + "_metrics.json")
    out.write_text(report.to_json())
    return 0


def cmd_infer(args) -> int:
    ts, setup, _ = load_train_state(_checkpoint_path(args.checkpoint))
    _, records, _ = _load_data(args.data)
    if not 0 <= args.index < len(records):
        raise IndexError(f"record index {args.index} out of range (0..{len(records) - 1})")
    rec = records[args.index]
    pred = predict(as_tensors(ts.params), setup, [rec])[0]
    p = pred["params"]
    result = {"taxon": rec.taxon, "beta": p.beta.tolist(), "theta": p.theta.tolist(),
              "alpha": None if p.alpha is None else p.alpha.tolist(), "cam_t": pred["cam_t"].tolist(),
              "keypoints2d": pred["kp2d"].tolist()}
    print(json.dumps(result, indent=None if args.format == "json" else 1))
    if args.out:
        export_obj(pred["mesh"].vertices, setup.templates[rec.taxon].faces, args.out)
    return 0


def cmd_export_obj(args) -> int:
    if args.data:
        _, records, templates = _load_data(args.data)
        if not 0 <= args.index < len(records):
            raise IndexError(f"record index {args.index} out of range (0..{len(records) - 1})")
        rec = records[args.index]
        tpl = templates[rec.taxon]
        verts = model_forward(tpl, rec.params).vertices
    else:
        config = GenConfig.from_dict(_read_json(args.config))
        tpl = toy_templates(config)[args.taxon]
        verts = tpl.rest_vertices
    export_obj(verts, tpl.faces, args.out)
    print(f"wrote {len(verts)} vertices, {len(tpl.faces)} faces to {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="animer", description="Toy-scale animal mesh recovery pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--masks", action="store_true", help="also write PGM masks")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--stage", type=int, choices=(1, 2), default=1)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", nargs="?", const="", default=None,
                   help="checkpoint to resume from (default: OUT/latest.ck)")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--format", choices=("table", "json"), default="table")
    e.add_argument("--out")
    e.add_argument("--seed", type=int)
    e.set_defaults(fn=cmd_eval)

    i = sub.add_parser("infer", help="predict one record")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--out", help="write the predicted mesh as OBJ")
    i.add_argument("--format", choices=("table", "json"), default="table")
    i.add_argument("--seed", type=int)
    i.set_defaults(fn=cmd_infer)

    x = sub.add_parser("export-obj", help="write a ground-truth or rest mesh as OBJ")
    x.add_argument("--data")
    x.add_argument("--index", type=int, default=0)
    x.add_argument("--config")
    x.add_argument("--taxon", choices=TAXA, default="quadruped")
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int)
    x.set_defaults(fn=cmd_export_obj)
    return p


def thread_cap() -> int | None:
    raw = os.environ.get("ANIMER_THREADS")
    if raw is None:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ANIMER_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"ANIMER_THREADS must be a positive integer, got {raw!r}")
    return n


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        thread_cap()
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:      # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "seed", None) is not None:
        np.random.seed(args.seed % 2 ** 32)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"animer: error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, FormatError, IndexError, KeyError) as exc:
        print(f"animer: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run_command())

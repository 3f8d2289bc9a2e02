"""Command line entry points: synth, train, predict, eval, pseudocolor."""
from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .errors import CellSegError, ConfigError
from .metrics import MetricReport, mean_iou, peseg, pooled_seg
from .microcellseg import ModelConfig, build_model, load_weights, param_count, read_metadata, save_weights
from .postproc import MODES, PostprocConfig, instances_from_masks
from .pseudocolor import gray_replicate_slice, pseudocolor_slice
from .train import INPUT_MODES, RunConfig, build_dataset, predict_volume, train_loop
from .volumestore import SynthParams, gen_synthetic, read_rvf, write_ppm, write_rvf


class CliError(Exception):
    pass


def _load_json(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return data


def _run_config(args, keys) -> RunConfig:
    """RunConfig from ``--config`` with explicitly given flags on top."""
    base = _load_json(args.config) if getattr(args, "config", None) else {}
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            base[key] = val
    return RunConfig.from_dict(base).validate()


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        p = SynthParams(shape=tuple(args.shape), cells=args.cells, falloff=args.falloff, noise=args.noise,
                        semi_axes_min=tuple(args.semi_axes_min), semi_axes_max=tuple(args.semi_axes_max),
                        seed=args.seed + i, touching=args.touching)
        vol, lab = gen_synthetic(p)
        write_rvf(vol, out / f"volume_{i:03d}.rvf")
        write_rvf(lab, out / f"labels_{i:03d}.rvf")
    return 0


def _pairs(paths) -> list[tuple[Path, Path]]:
    """(volume, labels) file pairs from directories or explicit volume files."""
    pairs = []
    for entry in paths:
        entry = Path(entry)
        vols = sorted(entry.glob("volume_*.rvf")) if entry.is_dir() else [entry]
        for v in vols:
            lab = v.with_name(v.name.replace("volume_", "labels_", 1))
            if lab == v or not lab.exists():
                raise CliError(f"no label file next to {v} (expected {lab.name})")
            pairs.append((v, lab))
    if not pairs:
        raise ConfigError("no training volumes found")
    return pairs


TRAIN_KEYS = ("task", "input_mode", "epochs", "batch_size", "lr", "seed", "input_size", "decoder_filters",
              "val_fraction", "data", "out", "plateau_patience", "plateau_factor", "min_lr")


def cmd_train(args) -> int:
    cfg = _run_config(args, TRAIN_KEYS)
    if not cfg.out:
        raise ConfigError("train needs --out")
    pairs = _pairs(cfg.data)
    volumes = [read_rvf(v) for v, _ in pairs]
    labels = [read_rvf(l) for _, l in pairs]
    order = np.random.default_rng(cfg.seed).permutation(len(pairs))
    n_val = int(round(cfg.val_fraction * len(pairs)))
    if len(pairs) - n_val < 1:
        raise ConfigError("not enough volumes left for training")
    val_idx, train_idx = sorted(order[:n_val]), sorted(order[n_val:])

    def ds(idx):
        return build_dataset([volumes[i] for i in idx], [labels[i] for i in idx], cfg.task, cfg.input_mode,
                             cfg.input_size)

    train = ds(train_idx)
    val = ds(val_idx) if val_idx else None
    model = build_model(ModelConfig(input_size=cfg.input_size, decoder_filters=cfg.decoder_filters,
                                    task=cfg.task), seed=cfg.seed)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    fd, tmp_hist = tempfile.mkstemp(dir=out, prefix=".history.")
    os.close(fd)
    try:
        result = train_loop(model, train, cfg, val=val, history_path=tmp_hist)
        save_weights(model, out / "model.ecs", extra={"input_mode": cfg.input_mode, "task": cfg.task,
                                                      "best_epoch": result.best_epoch, "run": cfg.to_dict()})
        os.replace(tmp_hist, out / "history.jsonl")
    finally:
        if os.path.exists(tmp_hist):
            os.unlink(tmp_hist)
    return 0


def _load_model(path):
    path = Path(path)
    if not path.exists():
        raise CliError(f"{path}: no such file")
    return load_weights(path), read_metadata(path)


def cmd_predict(args) -> int:
    base = _load_json(args.config) if args.config else {}
    mode = args.postproc or base.get("postproc", "none")
    if mode not in MODES:
        raise ConfigError(f"unknown post-processing mode {mode!r}")
    if mode == "marker-watershed" and not args.centers_model:
        raise ConfigError("marker-watershed needs --centers-model")
    volume = read_rvf(args.input)
    model, meta = _load_model(args.model)
    input_mode = meta.get("input_mode", "pseudocolor")
    kw = dict(patch_size=args.patch_size, min_overlap=args.min_overlap)
    prob = predict_volume(model, volume, input_mode, **kw)
    heat = None
    if mode == "marker-watershed":
        centers, cmeta = _load_model(args.centers_model)
        heat = predict_volume(centers, volume, cmeta.get("input_mode", "pseudocolor"), **kw)
    labels = instances_from_masks(prob, PostprocConfig(mode=mode), heatmap=heat)
    write_rvf(labels.astype(np.uint32), args.output)
    if args.prob_output:
        write_rvf(prob, args.prob_output)
    return 0


def cmd_eval(args) -> int:
    if len(args.pred) != len(args.ref):
        raise CliError("--pred and --ref need the same number of files")
    pairs = [(read_rvf(r), read_rvf(p)) for p, r in zip(args.pred, args.ref)]
    for ref, pred in pairs:
        if ref.shape != pred.shape:
            raise CliError(f"shape mismatch: reference {ref.shape} vs prediction {pred.shape}")
    ref_fg = np.concatenate([r.ravel() > 0 for r, _ in pairs])
    pred_fg = np.concatenate([p.ravel() > 0 for _, p in pairs])
    seg = pooled_seg(pairs)
    n = args.params
    if n is None and args.model:
        n = param_count(_load_model(args.model)[0]).total
    report = MetricReport(mean_iou=mean_iou(pred_fg, ref_fg), seg=seg,
                          peseg=None if n is None else peseg(seg, n), n_params=n)
    print(report.to_json())
    return 0


def cmd_pseudocolor(args) -> int:
    vol = read_rvf(args.input)
    img = pseudocolor_slice(vol, args.z) if args.mode == "pseudocolor" else gray_replicate_slice(vol, args.z)
    write_ppm(img, args.out)
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cellseg", description="Slice-wise 3D cell segmentation tools.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic volumes and labels")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shape", type=int, nargs=3, default=[8, 96, 96], metavar=("Z", "Y", "X"))
    p.add_argument("--cells", type=int, default=3)
    p.add_argument("--semi-axes-min", type=float, nargs=3, default=[2.0, 9.0, 9.0], metavar=("Z", "Y", "X"))
    p.add_argument("--semi-axes-max", type=float, nargs=3, default=[3.5, 16.0, 16.0], metavar=("Z", "Y", "X"))
    p.add_argument("--falloff", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--touching", action="store_true", help="place exactly two touching cells")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a mask or centers model")
    p.add_argument("--config")
    p.add_argument("--data", nargs="+", help="directories with volume_*/labels_* pairs, or volume files")
    p.add_argument("--out")
    p.add_argument("--task", choices=("mask", "centers"))
    p.add_argument("--input-mode", choices=INPUT_MODES)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--plateau-factor", type=float)
    p.add_argument("--plateau-patience", type=int)
    p.add_argument("--min-lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--input-size", type=int)
    p.add_argument("--decoder-filters", type=int, nargs=4)
    p.add_argument("--val-fraction", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment a volume into instance labels")
    p.add_argument("--config")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--postproc", choices=MODES)
    p.add_argument("--centers-model")
    p.add_argument("--patch-size", type=int)
    p.add_argument("--min-overlap", type=int, default=0)
    p.add_argument("--prob-output", help="also write the probability volume")
    p.add_argument("--seed", type=int, default=0, help="accepted for uniformity; prediction is deterministic")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="MeanIoU, SEG and PESEG as JSON")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--ref", nargs="+", required=True)
    p.add_argument("--params", type=int, help="parameter count N for PESEG")
    p.add_argument("--model", help="take N from this weight file instead")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pseudocolor", help="write a pseudocolor preview of one slice")
    p.add_argument("--input", required=True)
    p.add_argument("--z", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=INPUT_MODES, default="pseudocolor")
    p.set_defaults(func=cmd_pseudocolor)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CellSegError, CliError, OSError, ValueError, KeyError, IndexError) as exc:
        print(f"cellseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

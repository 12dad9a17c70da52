"""Command-line entry point.

Every subcommand reads the run configuration given by ``--config``
(defaults apply to missing fields), then applies any overriding flags.
Artifacts go under the output directory with fixed names, so a chain of
commands sharing one config needs no other flags::

    edgeseg synth    --config run.json
    edgeseg train    --config run.json
    edgeseg prune    --config run.json
    edgeseg finetune --config run.json
    edgeseg quantize --config run.json
    edgeseg eval     --config run.json --model out/quantized.uwnt

Exit status: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .weightfile import atomic_write

log = logging.getLogger("edgeseg")

MODEL = "model.uwnt"
PRUNED = "pruned.uwnt"
FINETUNED = "finetuned.uwnt"
QUANTIZED = "quantized.uwnt"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_json(path: Path, obj) -> None:
    atomic_write(path, (json.dumps(obj, indent=1, sort_keys=True) + "\n").encode())


def _out(cfg) -> Path:
    return Path(cfg["paths"]["out"])


def _data(cfg) -> Path:
    return Path(cfg["paths"]["data"])


def _load_samples(cfg, split: str):
    from .dataio import DatasetManifest

    scanned = not (_data(cfg) / "manifest.json").exists()
    m = DatasetManifest.load(_data(cfg))
    if scanned:
        # a bare images/ + masks/ directory: polarity comes from the run config
        m.polarity = cfg["data"]["polarity"]
    if split != "all" and not m.split:
        from .dataio import split_dataset
        split_dataset(m, cfg["data"]["split_fraction"], cfg["seed"], cfg["data"]["split_by"])
        m.save()
    return m.samples(split, cfg["data"]["width"], cfg["data"]["height"])


def _fit(model, cfg, log_path: Path, ckpt: Path, finetune: bool):
    from .trainer import fit, jsonl_sink
    from .weightfile import save_weights

    samples = _load_samples(cfg, "train")
    tc = C.train_config(cfg, finetune=finetune)
    log_path.parent.mkdir(parents=True, exist_ok=True)
    sink = jsonl_sink(log_path)
    try:
        records = fit(model, samples, tc, progress=lambda r: (sink(r), log.info("epoch %s", r)))
    finally:
        sink.close()
    save_weights(model, ckpt)
    return records


# --- subcommands ------------------------------------------------------------

def cmd_synth(cfg, args):
    from .dataio import synth_dataset, write_dataset

    d = cfg["data"]
    samples = synth_dataset(cfg["seed"], d["n"], d["width"], d["height"])
    m = write_dataset(_data(cfg), samples, d["split_fraction"], cfg["seed"])
    counts = {s: sum(1 for v in m.split.values() if v == s) for s in ("train", "test")}
    print(json.dumps({"root": str(_data(cfg)), "items": len(m.items), **counts}))


def cmd_train(cfg, args):
    from .unet import build

    model = build(C.unet_config(cfg))
    recs = _fit(model, cfg, _out(cfg) / "train_log.jsonl", _out(cfg) / MODEL, finetune=False)
    print(json.dumps({"model": str(_out(cfg) / MODEL), "epochs": len(recs),
                      "best_val_f1": max((r["val_f1"] for r in recs), default=None)}))


def cmd_prune(cfg, args):
    from .pruner import apply_prune, plan_prune
    from .unet import summarize
    from .weightfile import load_weights, save_weights

    src = Path(args.model) if args.model else _out(cfg) / MODEL
    model = load_weights(src)
    per_layer = cfg["prune"]["per_layer"]
    ratio = {l.name: per_layer.get(l.name, cfg["prune"]["ratio"])
             for l in model.conv_layers() if l.kind != "output-conv"}
    plan = plan_prune(model, ratio)
    pruned = apply_prune(model, plan)
    save_weights(pruned, _out(cfg) / PRUNED)
    atomic_write(_out(cfg) / "prune_plan.json", plan.to_json().encode())
    hw = (cfg["data"]["height"], cfg["data"]["width"])
    before, after = summarize(model, hw), summarize(pruned, hw)
    summary = {"param_count_before": before["param_count"], "param_count_after": after["param_count"],
               "param_ratio": after["param_count"] / before["param_count"],
               "macs_before": before["macs"], "macs_after": after["macs"]}
    _write_json(_out(cfg) / "prune_summary.json", summary)
    print(json.dumps(summary))


def cmd_finetune(cfg, args):
    from .weightfile import load_weights

    src = Path(args.model) if args.model else _out(cfg) / PRUNED
    model = load_weights(src)
    recs = _fit(model, cfg, _out(cfg) / "finetune_log.jsonl", _out(cfg) / FINETUNED, finetune=True)
    print(json.dumps({"model": str(_out(cfg) / FINETUNED), "epochs": len(recs)}))


def cmd_quantize(cfg, args):
    from .quantizer import calibrate, fold_batchnorm, quant_error_report, quantize_model, save_qmodel
    from .weightfile import load_weights

    src = Path(args.model) if args.model else _out(cfg) / FINETUNED
    folded = fold_batchnorm(load_weights(src))
    q = cfg["quant"]
    images = [s.image for s in _load_samples(cfg, q["calibration_split"])][: q["max_calibration_images"]]
    profile = calibrate(folded, images)
    qm = quantize_model(folded, profile, q["f_offset"])
    save_qmodel(qm, _out(cfg) / QUANTIZED)
    report = quant_error_report(folded, qm, images)
    report["act_bits"] = qm.act_bits
    _write_json(_out(cfg) / "quant_report.json", report)
    print(json.dumps({"model": str(_out(cfg) / QUANTIZED),
                      "mask_disagreement": report["mask_disagreement"]}))


def _predictor(path):
    from .quantizer import QModel, load_any, qpredict
    from .unet import predict_mask

    model = load_any(path)
    if isinstance(model, QModel):
        return model, lambda x: qpredict(model, x)
    return model, lambda x: predict_mask(model, x)


def cmd_infer(cfg, args):
    from .dataio import load_image, resize_bilinear, save_mask, save_overlay

    _, predict = _predictor(args.model)
    src = Path(args.input)
    files = sorted(p for p in src.iterdir() if p.suffix.lower() in (".pgm", ".png")) if src.is_dir() else [src]
    if not files:
        raise FileNotFoundError(f"no images under {src}")
    out = Path(args.out) if args.out else _out(cfg) / "infer"
    w, h = cfg["data"]["width"], cfg["data"]["height"]
    for f in files:
        img = load_image(f)
        if img.shape != (h, w):
            img = resize_bilinear(img, w, h)
        mask = predict(img[None, None])[0]
        save_mask(out / "masks" / f"{f.stem}.pgm", mask)
        save_overlay(out / "overlays" / f"{f.stem}.ppm", img, mask)
    print(json.dumps({"images": len(files), "out": str(out)}))


def cmd_eval(cfg, args):
    from .metrics import evaluate_dataset

    path = Path(args.model) if args.model else _out(cfg) / QUANTIZED
    model, _ = _predictor(path)
    samples = _load_samples(cfg, args.split)
    rep = evaluate_dataset(model, samples)
    doc = {"model": path.name, "split": args.split, **rep.to_dict()}
    dest = Path(args.report) if args.report else _out(cfg) / f"eval_{path.stem}_{args.split}.json"
    _write_json(dest, doc)
    mean = rep.mean
    print(json.dumps({"model": path.name, "split": args.split, "images": len(rep.per_image),
                      "mcc": mean["mcc"], "f1": mean["f1"], "hafiane": mean["haf"]}))


def cmd_bench(cfg, args):
    from .dataio import encode_pgm, quantize_u8, synth_dataset
    from .pipeline import PipelineConfig, bench_inference, format_table
    from .quantizer import QModel

    path = Path(args.model) if args.model else _out(cfg) / QUANTIZED
    model, _ = _predictor(path)
    if not isinstance(model, QModel):
        raise UsageError("bench needs a quantized model (run quantize first)")
    p = cfg["pipeline"]
    w, h = cfg["data"]["width"], cfg["data"]["height"]
    frames = [encode_pgm(quantize_u8(s.image)) for s in synth_dataset(cfg["seed"] + 1, 16, w, h)]
    pc = PipelineConfig(capacity=p["capacity"], workers={"infer": p["infer_workers"]},
                        frames=p["frames"], warmup=p["warmup"])
    report = bench_inference(model, frames, pc, w, h, mode=args.mode)
    dest = Path(args.report) if args.report else _out(cfg) / "bench.json"
    _write_json(dest, report)
    print(format_table(report))


def cmd_inspect(cfg, args):
    from .quantizer import QModel

    path = Path(args.model) if args.model else _out(cfg) / MODEL
    model, _ = _predictor(path)
    hw = (cfg["data"]["height"], cfg["data"]["width"])
    if isinstance(model, QModel):
        info = {"format": "qmodel", "config": model.config.to_dict(), "act_bits": model.act_bits,
                "param_count": int(sum(v.size for v in model.weights.values())
                                   + sum(v.size for v in model.biases.values()))}
    else:
        from .unet import summarize
        info = {"format": "unet-float", "config": model.config.to_dict(), **summarize(model, hw)}
    print(json.dumps(info, indent=1))


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "prune": cmd_prune, "finetune": cmd_finetune,
    "quantize": cmd_quantize, "infer": cmd_infer, "bench": cmd_bench, "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="edgeseg", description="Train, prune, quantize and benchmark a fire-segmentation U-Net.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--data", help="dataset directory")
        sp.add_argument("--out", help="output directory")
        return sp

    s = common(sub.add_parser("synth", help="generate a synthetic dataset"))
    s.add_argument("--n", type=int)
    s.add_argument("--width", type=int)
    s.add_argument("--height", type=int)

    s = common(sub.add_parser("train", help="train a float model"))
    s.add_argument("--epochs", type=int)

    s = common(sub.add_parser("prune", help="L1 filter pruning"))
    s.add_argument("--model")
    s.add_argument("--ratio", type=float)

    s = common(sub.add_parser("finetune", help="retrain a pruned model"))
    s.add_argument("--model")
    s.add_argument("--epochs", type=int)

    s = common(sub.add_parser("quantize", help="fold, calibrate and quantize to 8 bits"))
    s.add_argument("--model")

    s = common(sub.add_parser("infer", help="write masks and overlays for images"))
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True, help="image file or directory")

    s = common(sub.add_parser("bench", help="single vs pipelined throughput"))
    s.add_argument("--model")
    s.add_argument("--frames", type=int)
    s.add_argument("--mode", choices=("single", "pipelined", "both"), default="both")
    s.add_argument("--capacity", type=int)
    s.add_argument("--workers", type=int, help="inference workers")
    s.add_argument("--report")

    s = common(sub.add_parser("eval", help="MCC / F1 / Hafiane report"))
    s.add_argument("--model")
    s.add_argument("--split", choices=("train", "test", "all"), default="test")
    s.add_argument("--report")

    s = common(sub.add_parser("inspect", help="summarize a weight file"))
    s.add_argument("--model")
    return p


def _apply_flags(cfg: dict, args) -> dict:
    over: dict = {}
    if args.seed is not None:
        over["seed"] = args.seed
    paths = {k: getattr(args, k) for k in ("data", "out") if getattr(args, k, None)}
    if args.command == "synth" and args.out and not args.data:
        paths = {"data": args.out}
    if paths:
        over["paths"] = paths
    data = {k: getattr(args, k) for k in ("n", "width", "height") if getattr(args, k, None) is not None}
    if data:
        over["data"] = data
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        over["finetune" if args.command == "finetune" else "train"] = {"epochs": epochs}
    if getattr(args, "ratio", None) is not None:
        over["prune"] = {"ratio": args.ratio}
    pipe = {}
    for flag, key in (("frames", "frames"), ("capacity", "capacity"), ("workers", "infer_workers")):
        if getattr(args, flag, None) is not None:
            pipe[key] = getattr(args, flag)
    if pipe:
        over["pipeline"] = pipe
    cfg = C.merge(cfg, over)
    C.validate(cfg)
    return cfg


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _apply_flags(C.load(args.config), args)
        COMMANDS[args.command](cfg, args)
    except (UsageError, C.ConfigValidationError) as e:
        print(f"edgeseg {args.command}: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - report any runtime failure as exit 2
        log.debug("failure", exc_info=True)
        print(f"edgeseg {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())

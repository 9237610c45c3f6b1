"""Command-line entry points: generate data, train, project, sample, eval, serve.

Every numeric output is produced by the same library calls the service
uses, so CLI results are byte-identical to API responses for equal seeds.
Exit codes: 1 usage or validation error, 2 I/O error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import data as datamod
from .errors import BiasLensError, CheckpointError, NonFiniteError, TrainingDivergedError
from .imaging import pixels_to_png, png_to_pixels
from .metrics import build_report
from .service import compute_service_report, create_app
from .training import (
    Checkpoint,
    TrainConfig,
    load_checkpoint,
    reconstruction_mse,
    save_checkpoint,
    train_autoencoder,
    train_cinn,
    write_trace_csv,
)
from .transfer import Pipeline


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="bias-lens", description="Dataset bias disentanglement toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset family")
    p.add_argument("--spec", help="family spec JSON (list of dataset specs)")
    p.add_argument("--preset", choices=["default"], help="use the built-in default family")
    p.add_argument("--count", type=int, default=2000, help="samples per dataset for --preset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-ae", help="train the union autoencoder")
    p.add_argument("--data", required=True, help="family directory (with manifest.json)")
    p.add_argument("--out", required=True, help="checkpoint path (.blens)")
    p.add_argument("--config", help="TrainConfig JSON")
    p.add_argument("--seed", type=int, help="override config seed")

    p = sub.add_parser("train-flow", help="train the conditional flow on an AE checkpoint")
    p.add_argument("--ckpt", required=True, help="stage-one checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="TrainConfig JSON (defaults to the checkpoint's)")
    p.add_argument("--seed", type=int, help="override config seed")

    p = sub.add_parser("project", help="project an image from one dataset onto another")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="infile", required=True, help="input PNG")
    p.add_argument("--from", dest="src", required=True, help="source dataset name or id")
    p.add_argument("--to", dest="tgt", required=True, help="target dataset name or id")
    p.add_argument("--out", required=True, help="output PNG")

    p = sub.add_parser("sample", help="sample new images from a dataset's model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--count", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for sample_###.png")

    p = sub.add_parser("eval", help="compute the bias report on held-out data")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="report JSON path (a *_distances.csv is written next to it)")
    p.add_argument("--seed", type=int, help="override config seed for probes")

    p = sub.add_parser("serve", help="serve the model over HTTP")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", help="family directory; report then matches `eval` exactly")
    p.add_argument("--addr", default="127.0.0.1:8000", help="bind address (BIASLENS_ADDR overrides)")
    p.add_argument("--ui", help="static frontend directory to mount at /")
    p.add_argument("--skip-report", action="store_true", help="compute /api/report lazily instead of at startup")
    return parser


def _resolve_label(name: str):
    return int(name) if name.lstrip("-").isdigit() else name


def _load_config(args) -> TrainConfig:
    if getattr(args, "config", None):
        cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    else:
        cfg = TrainConfig()
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    return cfg


def _family_specs(args) -> list[datamod.DatasetSpec]:
    if bool(args.spec) == bool(args.preset):
        raise _UsageError("gen needs exactly one of --spec or --preset")
    if args.preset:
        return datamod.default_family(args.count)
    raw = json.loads(Path(args.spec).read_text())
    entries = raw["datasets"] if isinstance(raw, dict) else raw
    specs = []
    for i, entry in enumerate(entries):
        entry = dict(entry)
        entry.setdefault("id", i)
        specs.append(datamod.DatasetSpec.from_dict(entry))
    return specs


def _load_split(data_dir: str, cfg: TrainConfig):
    specs, union = datamod.load_family(data_dir)
    train, val = datamod.split(union, cfg.split_ratio, cfg.seed)
    manifest = json.loads((Path(data_dir) / "manifest.json").read_text())
    return specs, train, val, manifest


def _cmd_gen(args) -> int:
    specs = _family_specs(args)
    manifest = datamod.generate_family(specs, args.out, args.seed)
    print(f"wrote {manifest}")
    return 0


def _cmd_train_ae(args) -> int:
    cfg = _load_config(args).with_overrides(data_dir=args.data)
    specs, train, val, manifest = _load_split(args.data, cfg)
    ae, stats, trace = train_autoencoder(cfg, train)
    val_mse = reconstruction_mse(ae, val.pixels)
    ckpt = Checkpoint(
        config=cfg, registry=specs, ae=ae, stats=stats, flow=None,
        metrics={"ae_train_mse": trace[-1], "ae_val_mse": val_mse, "data_seed": manifest["seed"]},
    )
    save_checkpoint(args.out, ckpt)
    write_trace_csv(str(args.out) + ".ae-trace.csv", trace)
    print(f"autoencoder trained: train MSE {trace[-1]:.5f}, val MSE {val_mse:.5f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_train_flow(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    cfg = ckpt.config
    if args.config:
        cfg = TrainConfig.from_dict(json.loads(Path(args.config).read_text()))
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    specs, train, val, manifest = _load_split(args.data, cfg)
    flow, trace = train_cinn(cfg, train, ckpt.ae, ckpt.stats, n_datasets=len(specs))
    metrics = dict(ckpt.metrics)
    metrics.update({"flow_initial_nll": trace[0], "flow_final_nll": trace[-1], "data_seed": manifest["seed"]})
    out = Checkpoint(config=cfg, registry=specs, ae=ckpt.ae, stats=ckpt.stats, flow=flow, metrics=metrics)
    save_checkpoint(args.out, out)
    write_trace_csv(str(args.out) + ".flow-trace.csv", trace)
    print(f"flow trained: NLL {trace[0]:.3f} -> {trace[-1]:.3f}")
    print(f"wrote {args.out}")
    return 0


def _cmd_project(args) -> int:
    pipeline = Pipeline(load_checkpoint(args.ckpt))
    pixels = png_to_pixels(Path(args.infile).read_bytes())
    out = pipeline.project(pixels, _resolve_label(args.src), _resolve_label(args.tgt))[0]
    Path(args.out).write_bytes(pixels_to_png(out))
    print(f"wrote {args.out}")
    return 0


def _cmd_sample(args) -> int:
    pipeline = Pipeline(load_checkpoint(args.ckpt))
    pixels = pipeline.sample(_resolve_label(args.dataset), args.count, args.seed)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(pixels.shape[0]):
        (out_dir / f"sample_{i:03d}.png").write_bytes(pixels_to_png(pixels[i]))
    print(f"wrote {pixels.shape[0]} samples to {out_dir}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    pipeline = Pipeline(ckpt)
    cfg = ckpt.config if args.seed is None else ckpt.config.with_overrides(seed=args.seed)
    specs, union = datamod.load_family(args.data)
    _, val = datamod.split(union, cfg.split_ratio, cfg.seed)
    report = build_report(pipeline, val, seed=cfg.seed)
    out = Path(args.out)
    out.write_text(report.to_json())
    csv_path = out.with_name(out.stem + "_distances.csv")
    csv_path.write_text(report.distance_csv())
    print(f"wrote {out} and {csv_path}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    pipeline = Pipeline(load_checkpoint(args.ckpt))
    report = None
    if not args.skip_report:
        report = compute_service_report(pipeline, args.data)
    app = create_app(pipeline, report=report, data_dir=args.data, ui_dir=args.ui)
    addr = os.environ.get("BIASLENS_ADDR", args.addr)
    host, _, port = addr.partition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8000))
    return 0


_COMMANDS = {
    "gen": _cmd_gen,
    "train-ae": _cmd_train_ae,
    "train-flow": _cmd_train_flow,
    "project": _cmd_project,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "serve": _cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"bias-lens: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"bias-lens: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, TrainingDivergedError) as exc:
        print(f"bias-lens: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, json.JSONDecodeError, CheckpointError) as exc:
        print(f"bias-lens: I/O error: {exc}", file=sys.stderr)
        return 2
    except BiasLensError as exc:
        print(f"bias-lens: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""``nodulenet`` command line.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Failures also print one JSON line ``{"error": ..., "message": ..., "exit_code": ...}``
on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import architectures as arch
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .data import generate_synthetic, load_dataset, make_folds, prepare_dataset, write_dataset
from .data.storage import read_index
from .data.synthetic import DIMS, resolve_dims
from .errors import ConfigurationError, NoduleNetError
from .metrics import ScoredSample, evaluate, write_report, write_roc_csv, write_roc_svg
from .train import cross_validate, pretrain, score_dataset


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _emit_error(kind: str, message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def _say(msg: str) -> None:
    print(msg, flush=True)


# -- commands ---------------------------------------------------------------
def cmd_synth(args) -> int:
    pairs = generate_synthetic(args.n, args.malignant_frac, args.seed, args.dims, args.spike_contrast, args.id_prefix)
    ids = [p.nodule_id for p in pairs]
    folds = make_folds(ids, args.k, args.seed, args.validation_fraction) if args.k and args.k <= len(ids) else None
    write_dataset(args.out, pairs, folds=folds, source=f"synthetic seed={args.seed} dims={args.dims}")
    counts = read_index(args.out)["class_counts"]
    _say(json.dumps({"out": str(args.out), "count": len(pairs), "class_counts": counts}))
    return 0


def cmd_prep(args) -> int:
    small, large = resolve_dims(args.dims)
    summary = prepare_dataset(args.annotations, args.volumes, args.out, args.k, args.seed,
                              args.validation_fraction, small, large)
    _say(json.dumps(summary, indent=2))
    return 0


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig(dataset=args.dataset or "")
    if args.dataset:
        cfg = replace(cfg, dataset=args.dataset)
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    if not cfg.dataset:
        raise ConfigurationError("no dataset given (use --config or --dataset)")
    k, fraction = args.k_folds, args.validation_fraction
    if not args.config and Path(cfg.dataset, "index.json").exists():
        # without a config file, fold settings default to those stored by synth/prep
        stored = read_index(cfg.dataset).get("folds") or {}
        k = stored.get("k") if k is None else k
        fraction = stored.get("validation_fraction") if fraction is None else fraction
    return cfg.with_train(arch_kind=args.arch, width_scale=args.width_scale, max_epochs=args.epochs, seed=args.seed,
                          k_folds=k, validation_fraction=fraction)


def _progress(fold: int, row: dict) -> None:
    _say(f"fold {fold} epoch {row['epoch']}: train_loss={row['train_loss']:.4f} "
         f"val_loss={row['val_loss']:.4f} val_acc={row['val_acc']:.3f}")


def _write_cv_outputs(cfg: RunConfig, result, label: str) -> None:
    write_report(cfg.output("report", "report.json"), result.pooled,
                 {"config": cfg.to_json(), "folds": [r.to_json() for r in result.fold_reports]})
    write_roc_csv(cfg.output("roc_csv", "roc.csv"), result.pooled)
    write_roc_svg(cfg.output("roc_svg", "roc.svg"), {label: result.pooled})
    for i, rep in enumerate(result.fold_reports):
        _say(f"fold {i}: {rep.summary_line()}")
    _say(f"pooled: {result.pooled.summary_line()}")


def cmd_train(args) -> int:
    cfg = _run_config(args)
    data = load_dataset(cfg.dataset)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hook = None if args.quiet else _progress
    if args.pretrain:
        fit = pretrain(cfg.train, data, cfg.pretrain_validation_fraction, out / "pretrain_log.csv",
                       None if hook is None else (lambda row: hook(0, row)))
        path = save_checkpoint(out / "pretrained.ckpt", fit.checkpoint)
        _say(f"pretrained checkpoint (best epoch {fit.best_epoch}) written to {path}")
        return 0
    result = cross_validate(cfg.train, data, out_dir=out, on_epoch=hook)
    _write_cv_outputs(cfg, result, cfg.train.arch_kind)
    return 0


def cmd_transfer(args) -> int:
    cfg = _run_config(args)
    base_path = args.base or cfg.base_checkpoint
    if not base_path:
        raise ConfigurationError("transfer needs a base checkpoint (--base or base_checkpoint)")
    base = load_checkpoint(base_path)
    data = load_dataset(cfg.dataset)
    epochs = args.transfer_epochs or cfg.transfer_epochs
    result = cross_validate(cfg.train, data, out_dir=cfg.out_dir, base=base,
                            transfer_epochs=epochs, on_epoch=None if args.quiet else _progress)
    _write_cv_outputs(cfg, result, f"{cfg.train.arch_kind} (transfer)")
    return 0


def _read_scores(path) -> list[ScoredSample]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"nodule_id", "score", "label"} <= set(reader.fieldnames):
            raise ConfigurationError(f"{path}: scores CSV needs columns nodule_id,score,label")
        rows = []
        for n, row in enumerate(reader, start=1):
            try:
                rows.append(ScoredSample(row["nodule_id"], float(row["score"]), int(row["label"])))
            except ValueError:
                raise ConfigurationError(f"{path}: row {n} has a non-numeric score or label") from None
    return rows


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.scores):
        raise ConfigurationError("eval needs exactly one of --checkpoint or --scores")
    if args.scores:
        samples = _read_scores(args.scores)
        label = Path(args.scores).stem
    else:
        if not args.dataset:
            raise ConfigurationError("--checkpoint needs --dataset")
        graph = load_checkpoint(args.checkpoint).build_graph()
        samples = score_dataset(graph, load_dataset(args.dataset))
        label = graph.arch_kind
    report = evaluate(samples, args.threshold)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(out / "report.json", report, {"scores": [s.__dict__ for s in samples]})
    write_roc_csv(out / "roc.csv", report)
    write_roc_svg(out / "roc.svg", {label: report})
    _say(report.summary_line())
    return 0


def _summary_rows(kind: str, width, dims) -> dict:
    small, large = resolve_dims(dims)
    graph = arch.build(kind, width, small_shape=small, large_shape=large)
    total, per_layer = arch.count_parameters(graph)
    layers = []
    for name, layer in graph.named_layers():
        desc = layer.describe()
        layers.append({"name": name, **desc, "parameters": per_layer.get(name, 0)})
    doc = {"arch": kind, "width_scale": str(graph.width_scale), "dims": dims if isinstance(dims, str) else None,
           "total_parameters": total, "paper_millions": arch.PAPER_PARAMETER_MILLIONS[kind], "layers": layers}
    if kind in ("densenet", "modensenet"):
        doc["note"] = (f"the published {arch.PAPER_PARAMETER_MILLIONS[kind]}M figure is diagnostic only; "
                       "transition widths are not fully specified, so this total is not expected to match")
    return doc


def cmd_summary(args) -> int:
    kinds = arch.ARCH_KINDS if args.arch == "all" else (args.arch,)
    docs = [_summary_rows(k, args.width_scale, args.dims) for k in kinds]
    if args.json:
        _say(json.dumps(docs if args.arch == "all" else docs[0], indent=2))
        return 0
    for doc in docs:
        _say(f"{doc['arch']}  width_scale={doc['width_scale']}  total={doc['total_parameters']:,}  "
             f"(published: {doc['paper_millions']}M)")
        if "note" in doc:
            _say(f"  note: {doc['note']}")
        if args.layers:
            for row in doc["layers"]:
                shape = ", ".join(f"{k}={v}" for k, v in row.items() if k not in ("name", "type", "parameters"))
                _say(f"  {row['name']:<32} {row['type']:<11} {shape:<40} {row['parameters']:>12,}")
    return 0


# -- parser -----------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nodulenet", description="Two-pathway 3D CNNs for nodule classification.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic prepared dataset")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--n", type=int, default=200, help="number of nodules (default 200)")
    s.add_argument("--malignant-frac", type=float, default=0.5, help="fraction of malignant nodules (default 0.5)")
    s.add_argument("--seed", type=int, default=0, help="generator and fold seed (default 0)")
    s.add_argument("--dims", choices=sorted(DIMS), default="small", help="patch size preset (default small)")
    s.add_argument("--spike-contrast", type=float, default=1.0, help="malignant spike contrast (default 1.0)")
    s.add_argument("--id-prefix", default="syn", help="nodule id prefix (default syn)")
    s.add_argument("--k", type=int, default=3, help="folds stored in the index (default 3; 0 for none)")
    s.add_argument("--validation-fraction", type=float, default=0.05, help="validation share of non-test ids")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prep", help="label, filter and crop annotated volumes")
    s.add_argument("--annotations", required=True, help="CSV nodule_id,scan_id,x,y,z,g1,...")
    s.add_argument("--volumes", required=True, help="directory of <scan>.raw + <scan>.json volumes")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--dims", choices=sorted(DIMS), default="paper", help="patch size preset (default paper)")
    s.add_argument("--k", type=int, default=5, help="number of folds (default 5)")
    s.add_argument("--seed", type=int, default=0, help="fold seed (default 0)")
    s.add_argument("--validation-fraction", type=float, default=0.025, help="validation share (default 0.025)")
    s.set_defaults(func=cmd_prep)

    for name, func, text in (("train", cmd_train, "cross-validated training (or --pretrain)"),
                             ("transfer", cmd_transfer, "retrain the final layer of a pretrained network")):
        s = sub.add_parser(name, help=text)
        s.add_argument("--config", help="run config JSON")
        s.add_argument("--dataset", help="prepared dataset directory (overrides config)")
        s.add_argument("--out", help="output directory (overrides config)")
        s.add_argument("--arch", choices=arch.ARCH_KINDS, help="architecture (overrides config)")
        s.add_argument("--width-scale", help="channel multiplier such as 1/8 (overrides config)")
        s.add_argument("--epochs", type=int, help="max training epochs (overrides config)")
        s.add_argument("--seed", type=int, help="seed (overrides config)")
        s.add_argument("--k-folds", type=int, help="cross-validation folds (overrides config and dataset index)")
        s.add_argument("--validation-fraction", type=float,
                       help="validation share of non-test ids (overrides config and dataset index)")
        s.add_argument("--quiet", action="store_true", help="no per-epoch progress")
        if name == "train":
            s.add_argument("--pretrain", action="store_true",
                           help="one full-data run with a random validation holdout; writes pretrained.ckpt")
        else:
            s.add_argument("--base", help="pretrained checkpoint (overrides config)")
            s.add_argument("--transfer-epochs", type=int, help="retraining epochs (default 20)")
        s.set_defaults(func=func)

    s = sub.add_parser("eval", help="score a dataset and write report/ROC")
    s.add_argument("--checkpoint", help="checkpoint to evaluate")
    s.add_argument("--dataset", help="prepared dataset directory")
    s.add_argument("--scores", help="CSV nodule_id,score,label to evaluate instead of a checkpoint")
    s.add_argument("--threshold", type=float, default=0.5, help="decision threshold (default 0.5)")
    s.add_argument("--out", required=True, help="output directory for report.json, roc.csv, roc.svg")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("summary", help="parameter counts per architecture")
    s.add_argument("--arch", default="all", choices=("all",) + arch.ARCH_KINDS, help="architecture or all")
    s.add_argument("--width-scale", default="1", help="channel multiplier (default 1)")
    s.add_argument("--dims", choices=sorted(DIMS), default="paper", help="patch size preset (default paper)")
    s.add_argument("--layers", action="store_true", help="print the per-layer table")
    s.add_argument("--json", action="store_true", help="machine-readable output")
    s.set_defaults(func=cmd_summary)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        return _emit_error("UsageError", str(exc), 2)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        return _emit_error(type(exc).__name__, str(exc), 2)
    except NoduleNetError as exc:
        return _emit_error(type(exc).__name__, str(exc), 1)
    except OSError as exc:
        return _emit_error(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())

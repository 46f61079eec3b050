"""``realm`` command line entry point.

Subcommands: annotate, train, ablate, eval, plot, map, dataset, smoke-data.
Every subcommand that takes ``--out`` writes ``run_config.json`` there with
the fully resolved arguments, so a run can be repeated from its outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 compute error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__, kernels
from .errors import (BackendError, ConfigurationError, InvalidInputError, RealmError, SchemaError,
                     TrainingAborted)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_COMPUTE = 0, 2, 3, 4

log = logging.getLogger("realm")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _load_config_file(path) -> dict:
    import yaml

    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}") from exc
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")
    return {k.replace("-", "_"): v for k, v in data.items()}


def _prepare_out(out) -> Path:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_run_config(out: Path, args: argparse.Namespace):
    resolved = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    resolved["realm_version"] = __version__
    resolved["kernel_backend"] = kernels.BACKEND
    with open(out / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)


# annotate ----------------------------------------------------------------


def cmd_annotate(args) -> int:
    from .annotator import PartialAnnotationFailure, PromptTemplate, ProviderConfig, annotate_manifest
    from .dataset import load_manifest, save_manifest

    manifest = load_manifest(args.manifest)
    stub = {}
    if args.stub_responses:
        with open(args.stub_responses, encoding="utf-8") as fh:
            stub = json.load(fh)
    cfg = ProviderConfig(
        name=args.provider, endpoint=args.endpoint, model=args.model, api_key_env=args.api_key_env,
        cache_dir=args.cache_dir, concurrency=args.concurrency, max_attempts=args.max_attempts,
        stub_responses=stub,
    )
    out = Path(args.out) if args.out else Path(args.manifest).with_suffix(".annotated.jsonl")
    try:
        updated = annotate_manifest(manifest, cfg, PromptTemplate(version=args.template_version),
                                    force=args.force)
    except PartialAnnotationFailure as exc:
        save_manifest(_rebase(exc.manifest, out), out)
        print(f"{len(exc.failures)} record(s) failed:", file=sys.stderr)
        for rid, err in sorted(exc.failures.items()):
            print(f"  {rid}\t{err}", file=sys.stderr)
        return EXIT_DATA
    save_manifest(_rebase(updated, out), out)
    print(f"annotated {len(updated)} records -> {out}")
    return EXIT_OK


def _rebase(manifest, out: Path):
    """Rewrite relative image refs so they still resolve from the output location."""
    import os
    from dataclasses import replace

    if manifest.base_dir is None or out.parent.resolve() == Path(manifest.base_dir).resolve():
        return manifest
    recs = []
    for r in manifest.records:
        p = Path(r.image_ref)
        if not p.is_absolute():
            p = Path(os.path.relpath(Path(manifest.base_dir) / p, out.parent))
        recs.append(replace(r, image_ref=str(p)))
    return manifest.with_records(recs)


# train / ablate / eval ---------------------------------------------------


def _model_config(args):
    from .core import FusionRegressorConfig

    if args.encoders == "smoke":
        cfg = FusionRegressorConfig.smoke()
    else:
        cfg = FusionRegressorConfig(image_weights=args.image_weights, text_encoder=args.text_model)
    if args.freeze_encoders:
        cfg.finetune_encoders = False
    if args.image_size:
        cfg.image_size = args.image_size
    return cfg


def _train_config(args):
    from .core import AugmentationPolicy, TrainConfig

    return TrainConfig(
        learning_rate=args.lr, weight_decay=args.weight_decay, epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed,
        normalize_mos=args.normalize_mos if args.normalize_mos is not None else args.encoders == "smoke",
        augmentation=AugmentationPolicy(hflip=not args.no_augment, random_resized_crop=not args.no_augment),
    )


def _splits(args, manifest):
    from .dataset import carve_validation, split_from_ids, split_holdout, split_kfold

    if args.kfold:
        folds = split_kfold(manifest, args.kfold, args.seed, args.test_count, args.val_count)
        return [(f"fold{i}", f.train, f.test, f.val) for i, f in enumerate(folds)]
    if args.split_ids:
        ids = [line.strip() for line in Path(args.split_ids).read_text().splitlines() if line.strip()]
        train, test = split_from_ids(manifest, ids)
    else:
        train, test = split_holdout(manifest, args.test_count or 90, seed=args.seed)
    carved = carve_validation(train, args.val_count, args.seed)
    return [("holdout", carved.train, test, carved.val)]


def _fit_and_report(args, manifest, mode, out: Path, tag: str):
    from .core import build_model, save_checkpoint, train
    from .metrics import evaluate

    rows = []
    for name, tr, te, va in _splits(args, manifest):
        model = build_model(_model_config(args), seed=args.seed)
        tcfg = _train_config(args)
        model, hist = train(model, tr, va, tcfg, mode=mode, base_dir=manifest.base_dir,
                            log_path=out / f"history_{tag}_{name}.jsonl")
        save_checkpoint(out / f"checkpoint_{tag}_{name}.pt", model, tcfg, seed=args.seed, mode=mode)
        report = evaluate_records(model, te, mode, name, manifest.base_dir)
        report.model = tag
        report.write(out / f"report_{tag}_{name}.jsonl")
        rows.append(report)
    return rows


def evaluate_records(model, records, mode, split, base_dir):
    from .core import predict_batch
    from .metrics import EvalReport

    preds = predict_batch(model, records, mode, base_dir=base_dir)
    return EvalReport.from_predictions(split, [r.id for r in records], [r.mos for r in records], preds,
                                       model=str(mode))


def cmd_train(args) -> int:
    from .core import AblationMode
    from .dataset import load_manifest

    out = _prepare_out(args.out)
    _write_run_config(out, args)
    manifest = load_manifest(args.manifest)
    mode = AblationMode.parse(args.mode)
    reports = _fit_and_report(args, manifest, mode, out, mode.value)
    for r in reports:
        print(r.summary_line())
    if len(reports) > 1:
        import numpy as np

        print(f"mean over {len(reports)} folds: SROCC={np.mean([r.srocc for r in reports]):.4f} "
              f"PLCC={np.mean([r.plcc for r in reports]):.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    import numpy as np

    from .core import ABLATION_LABELS, AblationMode
    from .dataset import load_manifest
    from .metrics import format_table

    out = _prepare_out(args.out)
    _write_run_config(out, args)
    manifest = load_manifest(args.manifest)
    table = []
    with open(out / "ablation.jsonl", "w", encoding="utf-8") as fh:
        for mode in (AblationMode.IMAGE_ONLY, AblationMode.TEXT_ONLY, AblationMode.JOINT):
            reports = _fit_and_report(args, manifest, mode, out, mode.value)
            s = float(np.mean([r.srocc for r in reports]))
            p = float(np.mean([r.plcc for r in reports]))
            table.append((ABLATION_LABELS[mode], s, p))
            fh.write(json.dumps({"mode": mode.value, "srocc": s, "plcc": p, "folds": len(reports)}) + "\n")
    text = format_table(table, title="Ablation (test split)")
    (out / "ablation.txt").write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .core import load_checkpoint
    from .dataset import load_manifest, split_from_ids

    model, blob = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.manifest)
    records = manifest.records
    if args.ids:
        ids = [line.strip() for line in Path(args.ids).read_text().splitlines() if line.strip()]
        records = split_from_ids(manifest, ids)[1]
    mode = args.mode or blob.get("mode", "joint")
    out = _prepare_out(args.out)
    _write_run_config(out, args)
    report = evaluate_records(model, records, mode, args.split_name, manifest.base_dir)
    report.model = args.label or Path(args.checkpoint).stem
    report.write(out / "report.jsonl")
    (out / "summary.txt").write_text(report.summary_line() + "\n", encoding="utf-8")
    print(report.summary_line())
    return EXIT_OK


def cmd_plot(args) -> int:
    from .metrics import EvalReport
    from .plotting import scatter_plot

    paths = [Path(p) / "report.jsonl" if Path(p).is_dir() else Path(p) for p in args.report]
    reports = [EvalReport.read(p) for p in paths]
    labels = args.label if args.label else None
    if labels and len(labels) != len(reports):
        raise ConfigurationError("give one --label per --report")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    scatter_plot(reports, args.out, labels)
    print(f"wrote {args.out}")
    return EXIT_OK


# map ---------------------------------------------------------------------


def _backend(args):
    from .embedding import get_backend

    cfg = {"name": args.backend}
    if args.backend_config:
        cfg.update(_load_config_file(args.backend_config))
    if args.model_path:
        cfg["model_path"] = args.model_path
    return get_backend(cfg)


def cmd_map(args) -> int:
    from PIL import Image

    from .dream import DreamConfig, compute_realness_map, render_heatmap, save_grid, save_heatmap

    if bool(args.image) == bool(args.from_manifest):
        raise ConfigurationError("give either --image with --text, or --from-manifest")
    if args.image and not args.text:
        raise ConfigurationError("--image needs --text")
    config = DreamConfig(windows=tuple(args.windows), stride=args.stride, fusion=args.fusion)
    backend = _backend(args)
    out = _prepare_out(args.out)
    _write_run_config(out, args)

    if args.image:
        jobs = [(Path(args.image).stem, Path(args.image), args.text)]
    else:
        from .dataset import load_manifest

        manifest = load_manifest(args.from_manifest)
        jobs = [(r.id, manifest.image_path(r), r.description) for r in manifest.records if r.description]
        skipped = len(manifest.records) - len(jobs)
        if skipped:
            print(f"skipping {skipped} record(s) without a description", file=sys.stderr)

    failures = []
    for name, path, text in jobs:
        try:
            with Image.open(path) as im:
                image = im.convert("RGB")
            rmap = compute_realness_map(image, text, backend, config, workers=args.workers)
            save_grid(out / f"{name}.grid", rmap.final_grid, rmap.scales_used, text)
            save_heatmap(out / f"{name}_heatmap.png", render_heatmap(rmap, image, alpha=args.alpha).overlay)
        except (OSError, InvalidInputError) as exc:
            failures.append((name, str(path), f"data: {exc}"))
        except (BackendError, ConfigurationError) as exc:
            failures.append((name, str(path), f"backend: {exc}"))
    if failures:
        print(f"{len(failures)}/{len(jobs)} image(s) failed:", file=sys.stderr)
        for name, path, err in failures:
            print(f"  {name}\t{path}\t{err}", file=sys.stderr)
        return EXIT_DATA
    print(f"wrote {2 * len(jobs)} files to {out}")
    return EXIT_OK


# dataset -----------------------------------------------------------------


def cmd_dataset_validate(args) -> int:
    from .dataset import load_manifest

    manifest = load_manifest(args.manifest, strict=args.strict)
    print(f"{args.manifest}: {len(manifest)} valid records")
    return EXIT_OK


def cmd_dataset_split(args) -> int:
    from .dataset import load_manifest, save_manifest

    manifest = load_manifest(args.manifest)
    out = _prepare_out(args.out)
    _write_run_config(out, args)
    if args.kind == "holdout":
        args.kfold = None
    else:
        args.kfold = args.k
    for name, tr, te, va in _splits(args, manifest):
        for part, recs in (("train", tr), ("test", te), ("val", va)):
            if recs:
                save_manifest(_rebase(manifest.with_records(recs), out / "x"), out / f"{name}_{part}.jsonl")
        print(f"{name}: train={len(tr)} test={len(te)} val={len(va)}")
    return EXIT_OK


def cmd_smoke_data(args) -> int:
    from .synthetic import make_smoke_dataset

    path = make_smoke_dataset(args.out, n=args.n, size=args.size, seed=args.seed)
    print(f"wrote {path}")
    return EXIT_OK


# parser ------------------------------------------------------------------


def _add_training_args(p):
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--encoders", choices=["full", "smoke"], default="full",
                   help="full: ResNet-50 + BERT-base; smoke: tiny frozen CPU encoders")
    p.add_argument("--image-weights", default=None, help="local ResNet-50 state_dict")
    p.add_argument("--text-model", default="bert-base-uncased")
    p.add_argument("--image-size", type=int, default=None)
    p.add_argument("--freeze-encoders", action="store_true")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=0.01)
    p.add_argument("--normalize-mos", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--no-augment", action="store_true")
    p.add_argument("--test-count", type=int, default=None)
    p.add_argument("--val-count", type=int, default=0)
    p.add_argument("--kfold", type=int, default=None, help="k-fold protocol instead of holdout")
    p.add_argument("--split-ids", default=None, help="file of test ids, one per line")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="realm", description=__doc__.split("\n")[0])
    parser.add_argument("--config", default=None, help="YAML/JSON file of flag defaults")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", help="VLM inconsistency descriptions for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--provider", default="stub", choices=["stub", "openai"])
    p.add_argument("--concurrency", type=int, default=4)
    p.add_argument("--force", action="store_true", help="re-annotate records that have a verdict")
    p.add_argument("--out", default=None)
    p.add_argument("--cache-dir", default=".realm_cache")
    p.add_argument("--stub-responses", default=None, help="JSON map content-hash -> reply")
    p.add_argument("--endpoint", default="https://api.openai.com/v1/chat/completions")
    p.add_argument("--model", default="gpt-4.1")
    p.add_argument("--api-key-env", default="OPENAI_API_KEY")
    p.add_argument("--max-attempts", type=int, default=3)
    p.add_argument("--template-version", default="v1")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("train", help="train the realness regressor")
    _add_training_args(p)
    p.add_argument("--mode", default="joint", choices=["joint", "image_only", "text_only"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train all three input modes and tabulate")
    _add_training_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default=None, choices=["joint", "image_only", "text_only"])
    p.add_argument("--ids", default=None, help="restrict to these ids (one per line)")
    p.add_argument("--split-name", default="test")
    p.add_argument("--label", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("plot", help="scatter of predictions vs MOS from eval reports")
    p.add_argument("--report", action="append", required=True)
    p.add_argument("--label", action="append", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("map", help="dense realness maps")
    p.add_argument("--image", default=None)
    p.add_argument("--text", default=None)
    p.add_argument("--from-manifest", default=None)
    p.add_argument("--windows", type=_int_list, default=[128, 64, 32])
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--fusion", choices=["max", "min"], default="max")
    p.add_argument("--backend", choices=["clip", "mock"], default="clip")
    p.add_argument("--backend-config", default=None, help="YAML/JSON backend config")
    p.add_argument("--model-path", default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("dataset", help="manifest utilities")
    dsub = p.add_subparsers(dest="dataset_command", required=True)
    q = dsub.add_parser("validate")
    q.add_argument("manifest")
    q.add_argument("--strict", action="store_true", help="missing image files are errors")
    q.set_defaults(func=cmd_dataset_validate)
    q = dsub.add_parser("split")
    q.add_argument("manifest")
    q.add_argument("--kind", choices=["holdout", "kfold"], default="holdout")
    q.add_argument("--test-count", type=int, default=None)
    q.add_argument("--val-count", type=int, default=0)
    q.add_argument("--k", type=int, default=5)
    q.add_argument("--split-ids", default=None)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_dataset_split)

    p = sub.add_parser("smoke-data", help="write a synthetic image/text/MOS set")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_smoke_data)
    return parser


def _parse(parser, argv):
    args = parser.parse_args(argv)
    if args.config:
        defaults = _load_config_file(args.config)
        # explicit flags still win: config values only replace parser defaults
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in parser._actions} | {a.dest for a in sub._actions}
        unknown = set(defaults) - known
        if unknown:
            raise ConfigurationError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        sub.set_defaults(**{k: v for k, v in defaults.items() if k in {a.dest for a in sub._actions}})
        parser.set_defaults(**{k: v for k, v in defaults.items() if k in {a.dest for a in parser._actions}})
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _parse(parser, argv)
    except ConfigurationError as exc:
        print(f"realm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"realm: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SchemaError, InvalidInputError, OSError) as exc:
        print(f"realm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingAborted as exc:
        print(f"realm: training aborted: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    except (BackendError, RealmError, RuntimeError) as exc:
        print(f"realm: compute error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE


if __name__ == "__main__":
    sys.exit(main())

"""mbr-reid command line: synth, train, embed, eval, audit.

Exit codes: 0 success, 1 validation error (or failed audit), 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from .config import ConfigError, RunConfig, load_config

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("mbr_reid")


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


# ---------------------------------------------------------------------------
# helpers


def _spec_for(cfg: RunConfig, train_manifest=None):
    from .model.presets import LAI_SUFFIX, get_preset

    arch = cfg.architecture
    n_cams = cfg.data.n_cams
    n_views = cfg.data.n_views
    if arch.preset.endswith(LAI_SUFFIX) and train_manifest is not None:
        n_cams = n_cams or train_manifest.n_cameras
        n_views = n_views or max(train_manifest.n_views, 1)
    return get_preset(arch.preset, n_cams, n_views, backbone=arch.backbone, heads=arch.heads)


def _run_dir(cfg: RunConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(cfg.output_dir) / f"{stamp}_{cfg.architecture.preset}"
    path, n = base, 1
    while path.exists():
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    path.mkdir(parents=True)
    return path


def _evaluate(model, root: str, layout: str, cfg_eval, out: Path | None) -> dict:
    from .data.manifest import load_manifest
    from .evaluator import extract_embeddings, rank_and_score

    query = load_manifest(root, layout, "query")
    gallery = load_manifest(root, layout, "gallery")
    q = extract_embeddings(model, query, cfg_eval.use_lai, cfg_eval.batch_size)
    g = extract_embeddings(model, gallery, cfg_eval.use_lai, cfg_eval.batch_size)
    result = rank_and_score(q, g, cross_camera=cfg_eval.cross_camera).to_dict()
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(result, indent=2) + "\n")
    return result


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    from .data.synth import synth_dataset

    m = synth_dataset(args.out, args.ids, args.cams, args.views, args.imgs, seed=args.seed)
    print(json.dumps({"root": str(args.out), **{k: len(v) for k, v in m.items()}}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .data.manifest import load_manifest
    from .data.sampler import PKBatchSpec
    from .model.network import build_model
    from .trainer import run_training

    cfg = load_config(args.config, args.set)
    root = cfg.data_root()
    pretrained = cfg.pretrained_source()
    sampler = PKBatchSpec(cfg.data.P, cfg.data.K, cfg.seed)
    train = load_manifest(root, cfg.data.layout, "train")
    spec = _spec_for(cfg, train)

    if args.resume:
        run_dir = Path(args.resume).resolve().parent.parent
    else:
        run_dir = _run_dir(cfg)
    cfg.dump(run_dir / "config.json")
    model = build_model(spec, pretrained=pretrained, n_classes=train.n_classes, seed=cfg.seed)
    result = run_training(
        model,
        train,
        cfg.train,
        cfg.loss,
        sampler,
        out_dir=run_dir,
        augmentation=cfg.data.augment,
        seed=cfg.seed,
        resume=args.resume,
        deterministic=cfg.deterministic,
        workers=cfg.data.workers,
        on_epoch=lambda e, loss: print(f"epoch {e:4d}  loss {loss:.4f}", flush=True),
    )
    summary = {"run_dir": str(run_dir), "checkpoint": str(result.last_checkpoint)}
    if cfg.eval.after_training:
        summary["eval"] = _evaluate(model, root, cfg.data.layout, cfg.eval, run_dir / "eval.json")
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def _eval_config(args) -> RunConfig:
    overrides = list(args.set)
    if getattr(args, "no_cross_camera", False):
        overrides.append("eval.cross_camera=false")
    return load_config(args.config, overrides)


def cmd_embed(args) -> int:
    from .data.manifest import load_manifest
    from .evaluator import extract_embeddings
    from .trainer import model_from_checkpoint

    cfg = _eval_config(args)
    model = model_from_checkpoint(args.checkpoint)
    manifest = load_manifest(cfg.data_root(), cfg.data.layout, args.split)
    emb = extract_embeddings(model, manifest, cfg.eval.use_lai, cfg.eval.batch_size)
    path, sidecar = emb.save(args.out)
    print(json.dumps({"embeddings": str(path), "labels": str(sidecar), "rows": len(emb), "dim": emb.dim}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluator import EmbeddingMatrix, rank_and_score
    from .trainer import model_from_checkpoint

    cfg = _eval_config(args)
    out = Path(args.out) if args.out else None
    if args.query_emb or args.gallery_emb:
        if not (args.query_emb and args.gallery_emb):
            raise ValidationError("--query-emb and --gallery-emb must be given together")
        q = EmbeddingMatrix.load(args.query_emb)
        g = EmbeddingMatrix.load(args.gallery_emb)
        if q.dim != g.dim:
            raise ValidationError(f"query dim {q.dim} != gallery dim {g.dim}")
        result = rank_and_score(q, g, cross_camera=cfg.eval.cross_camera).to_dict()
        if out is not None:
            out.write_text(json.dumps(result, indent=2) + "\n")
    else:
        if not args.checkpoint:
            raise ValidationError("eval needs --checkpoint or --query-emb/--gallery-emb")
        model = model_from_checkpoint(args.checkpoint)
        result = _evaluate(model, cfg.data_root(), cfg.data.layout, cfg.eval, out)
    print(json.dumps(result, indent=2))
    return EXIT_OK


def cmd_audit(args) -> int:
    from .auditor import audit_all, expected_row, table_presets
    from .model.presets import LAI_SUFFIX, get_preset

    names = args.presets or ["all"]
    if names != ["all"]:
        for n in names:
            get_preset(n.removesuffix(LAI_SUFFIX))  # raises UnknownPresetError
            try:
                expected_row(n)
            except KeyError as exc:
                raise ValidationError(f"{exc.args[0]}; rows exist for {', '.join(table_presets())}") from exc
    report = audit_all("all" if names == ["all"] else names, backbone=args.backbone)
    print(report.to_table())
    if args.json:
        Path(args.json).write_text(report.to_json() + "\n")
    return EXIT_OK if report.passed else EXIT_VALIDATION


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mbr-reid", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="render the synthetic fixture dataset")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--ids", type=int, default=10)
    s.add_argument("--cams", type=int, default=4)
    s.add_argument("--views", type=int, default=2)
    s.add_argument("--imgs", type=int, default=8, help="train images per identity")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    def config_args(sp):
        sp.add_argument("--config", type=Path, help="JSON run config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. train.epochs=5")

    t = sub.add_parser("train", help="train a preset")
    config_args(t)
    t.add_argument("--resume", type=Path, help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("embed", help="write f_g embeddings of one split")
    config_args(e)
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--split", choices=("train", "query", "gallery"), default="query")
    e.add_argument("--out", type=Path, required=True)
    e.set_defaults(func=cmd_embed)

    v = sub.add_parser("eval", help="score query against gallery")
    config_args(v)
    v.add_argument("--checkpoint", type=Path)
    v.add_argument("--query-emb", type=Path)
    v.add_argument("--gallery-emb", type=Path)
    v.add_argument("--no-cross-camera", action="store_true", help="keep same-id same-camera gallery entries")
    v.add_argument("--out", type=Path, help="write the JSON result here")
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("audit", help="check params, MACs and dims against the expected table")
    a.add_argument("presets", nargs="*", help='preset names or "all"')
    a.add_argument("--backbone", default="resnet50_ibn_a", choices=("resnet50_ibn_a", "resnet50"))
    a.add_argument("--json", type=Path, help="also write the report as JSON")
    a.set_defaults(func=cmd_audit)
    return p


def main(argv: list[str] | None = None) -> int:
    from .data.manifest import ManifestError
    from .model.presets import UnknownPresetError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UnknownPresetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - report and map to the runtime exit code
        log.debug("command failed", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

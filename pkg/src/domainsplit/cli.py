"""Command-line entry points for each pipeline stage.

Exit status: 0 on success, 1 on a runtime failure, 2 on a usage or configuration error.
Every artifact written here carries the config hash and root seed in its header.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import ExperimentConfig, dump_config, from_dict, load_config, parse_scalar
from .datagen import save_dataset
from .diagnostics import class_domain_means, domain_overlap_score, export_embeddings, most_activating_features, write_heatmap_csv
from .encoder import encode_dataset, load_checkpoint, load_encoder
from .errors import ConfigError, DomainSplitError
from .evaluation import probe_encoder, split_dataset
from .experiments import build_data, probe_battery, probe_settings
from .trainer import METRICS_FORMAT, Trainer, read_metrics

SPLITS = ("train", "test", "unseen")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _header(cfg: ExperimentConfig, **extra) -> dict:
    return {"config_hash": cfg.hash(), "seed": cfg.seed, **extra}


def _parse_sets(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = parse_scalar(value)
    return out


def _config(args) -> tuple[ExperimentConfig, dict]:
    overrides = _parse_sets(args.set)
    if getattr(args, "out", None):
        overrides["output_dir"] = str(args.out)
    return load_config(args.config, overrides), overrides


def _checkpoint_config(path) -> tuple[dict, ExperimentConfig]:
    payload = load_checkpoint(path)
    return payload, from_dict(json.loads(payload["config"]))


def _output_dir(args, fallback: Path) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else fallback
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# -- subcommands -------------------------------------------------------------------------


def cmd_generate_data(args) -> int:
    cfg, overrides = _config(args)
    out = Path(cfg.output_dir) / "data"
    out.mkdir(parents=True, exist_ok=True)
    data = build_data(cfg)
    manifest = {**_header(cfg, overrides=overrides), "splits": {}}
    for name in SPLITS:
        ds = getattr(data, name)
        path = save_dataset(ds, out / f"{name}.mdds")
        manifest["splits"][name] = {"path": path.name, "n": len(ds), "recipe_hash": ds.recipe_hash(), "domains": ds.domain_names}
        print(f"{name:>6}: {len(ds)} samples, domains {ds.domain_names} -> {path}")
    _write_json(out / "manifest.json", manifest)
    return 0


def cmd_pretrain(args) -> int:
    cfg, overrides = _config(args)
    out = Path(cfg.output_dir)
    data = build_data(cfg)
    if args.resume:
        trainer = Trainer.from_checkpoint(out / "last.pt", data.train, out)
    else:
        trainer = Trainer(cfg, data.train, out)
    trainer.header_extra = {"overrides": overrides}
    probe_fn = (lambda tr: probe_battery(tr, data, cfg.eval.probes)) if cfg.train.probe_every else None
    trainer.fit(probe_fn, resume=args.resume)
    dump_config(trainer.cfg, out / "config.yaml")
    print(f"trained {trainer.epoch} epochs ({trainer.step} steps) -> {out / 'final.pt'}")
    return 0


def cmd_probe(args) -> int:
    payload, cfg = _checkpoint_config(args.checkpoint)
    out = _output_dir(args, Path(args.checkpoint).parent)
    encoder, spec = load_encoder(payload)
    data = build_data(cfg)
    settings = probe_settings(cfg)
    if args.split == "unseen-domain":
        train, test = split_dataset(data.unseen, cfg.eval.unseen_fraction_train, settings.seed)
    else:
        train, test = data.train, data.test
    res = probe_encoder(encoder, spec.k, train, test, args.target, args.slice, args.split, settings)
    path = out / f"probe_{args.target}_{args.slice}_{args.split}.csv"
    with open(path, "w", newline="") as fh:
        for key, value in _header(cfg, checkpoint=str(args.checkpoint)).items():
            fh.write(f"# {key}: {value}\n")
        w = csv.writer(fh)
        w.writerow(["target", "slice", "split", "domain", "top1", "n"])
        for name, v in res.per_domain.items():
            w.writerow([res.target, res.slice, res.split, name, f"{v['top1']:.4f}", v["n"]])
        w.writerow([res.target, res.slice, res.split, "all", f"{res.top1:.4f}", res.n])
    metrics = Path(args.checkpoint).parent / "metrics.jsonl"
    if metrics.exists():
        with open(metrics, "a") as fh:
            fh.write(json.dumps(res.to_record(), sort_keys=True) + "\n")
    print(f"{res.target}/{res.slice} ({res.split}): top1 {res.top1:.2f} on {res.n} samples -> {path}")
    return 0


def cmd_analyze(args) -> int:
    payload, cfg = _checkpoint_config(args.checkpoint)
    out = _output_dir(args, Path(args.checkpoint).parent)
    encoder, spec = load_encoder(payload)
    ds = getattr(build_data(cfg), args.split)
    reps = encode_dataset(encoder, ds.images).double().numpy()
    report = class_domain_means(reps, ds.class_labels, ds.domain_labels, k=spec.k)
    threshold = args.threshold if args.threshold is not None else cfg.eval.deviation_threshold
    header = _header(cfg, checkpoint=str(args.checkpoint), split=args.split, deviation_threshold=threshold)
    indices = most_activating_features(report, threshold)
    heatmap = write_heatmap_csv(report, out / f"heatmap_{args.split}.csv", indices, header)
    overlap = {s: domain_overlap_score(report, s, threshold) for s in ("full", "prefix", "remainder")}
    summary = {
        **header,
        "domains": [ds.domain_names[d] for d in report.domains],
        "activating_features": indices.tolist(),
        "activating_in_prefix": int((indices < spec.k).sum()),
        "overlap": overlap,
    }
    _write_json(out / f"analysis_{args.split}.json", summary)
    print(f"{len(indices)} activating features ({summary['activating_in_prefix']} in prefix) -> {heatmap}")
    print("cross-domain overlap: " + ", ".join(f"{k} {v:.3f}" for k, v in overlap.items()))
    return 0


def cmd_cluster_report(args) -> int:
    run = Path(args.run)
    records = read_metrics(run / "metrics.jsonl")
    head = records[0] if records and records[0].get("format") == METRICS_FORMAT else {}
    rounds = [r for r in records if r.get("kind") == "cluster"]
    if not rounds:
        print(f"{run}: no clustering rounds recorded (labeled-mode run?)")
    out = _output_dir(args, run)
    with open(out / "cluster_report.jsonl", "w") as fh:
        fh.write(json.dumps({"kind": "header", "config_hash": head.get("config_hash"), "seed": head.get("seed")}) + "\n")
        for r in rounds:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    print(f"{'round':>5} {'epoch':>5} {'epsilon':>10} {'inliers':>8} {'accuracy':>8}  sizes")
    for r in rounds:
        acc = r.get("accuracy")
        print(
            f"{r['round']:>5} {r['epoch']:>5} {r['epsilon']:>10.6g} {r['inlier_fraction']:>8.3f} "
            f"{'-' if acc is None else f'{acc:.3f}':>8}  {r['cluster_sizes']}{'  aborted' if r.get('aborted') else ''}"
        )
    return 0


def cmd_export_embeddings(args) -> int:
    payload, cfg = _checkpoint_config(args.checkpoint)
    out = _output_dir(args, Path(args.checkpoint).parent)
    encoder, spec = load_encoder(payload)
    ds = getattr(build_data(cfg), args.split)
    reps = encode_dataset(encoder, ds.images).numpy()
    path = export_embeddings(
        reps,
        ds.class_labels,
        ds.domain_labels,
        out / f"embeddings_{args.split}_{args.slice}.csv",
        slice=args.slice,
        k=spec.k,
        header={**_header(cfg), "domains": ",".join(ds.domain_names)},
    )
    print(f"{len(ds)} rows -> {path}")
    return 0


# -- parser ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="domainsplit", description="Domain-disentangled self-supervised pretraining at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", type=Path, help="YAML or JSON experiment config (defaults if omitted)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a field, e.g. train.epochs=5")
        return sp

    def with_checkpoint(sp):
        sp.add_argument("--checkpoint", type=Path, required=True)
        sp.add_argument("--out", type=Path, help="output directory (default: the checkpoint's run directory)")
        return sp

    sp = with_config(sub.add_parser("generate-data", help="materialize train/test/unseen datasets"))
    sp.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    sp.set_defaults(func=cmd_generate_data)

    sp = with_config(sub.add_parser("pretrain", help="train an encoder; writes checkpoints and metrics.jsonl"))
    sp.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    sp.add_argument("--resume", action="store_true", help="continue from last.pt in the output directory")
    sp.set_defaults(func=cmd_pretrain)

    sp = with_checkpoint(sub.add_parser("probe", help="linear probe on a frozen slice"))
    sp.add_argument("--target", choices=("class", "domain"), default="class")
    sp.add_argument("--slice", choices=("full", "prefix", "remainder"), default="full")
    sp.add_argument("--split", choices=("train-domain", "unseen-domain"), default="train-domain")
    sp.set_defaults(func=cmd_probe)

    sp = with_checkpoint(sub.add_parser("analyze", help="activating-feature heatmap and cross-domain overlap"))
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--threshold", type=float, help="deviation threshold in standard deviations")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("cluster-report", help="per-round epsilon, inlier fraction and accuracy of a run")
    sp.add_argument("--run", type=Path, required=True, help="run directory containing metrics.jsonl")
    sp.add_argument("--out", type=Path, help="output directory (default: the run directory)")
    sp.set_defaults(func=cmd_cluster_report)

    sp = with_checkpoint(sub.add_parser("export-embeddings", help="columnar CSV of representations"))
    sp.add_argument("--split", choices=SPLITS, default="test")
    sp.add_argument("--slice", choices=("full", "prefix", "remainder"), default="full")
    sp.set_defaults(func=cmd_export_embeddings)
    return p


def run_command(argv: list[str] | None = None) -> int:
    """Parse ``argv`` and run the subcommand; returns the exit status instead of exiting."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 2
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (DomainSplitError, OSError, RuntimeError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main(argv: list[str] | None = None):
    sys.exit(run_command(argv))


if __name__ == "__main__":
    main()

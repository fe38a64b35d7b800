"""Command-line entry point: ``dac <command> [options]``.

Commands: gen-synth, adapt, embed, eval, retrieve, merge-lora.
Exit codes: 0 success, 1 runtime or data failure, 2 usage or config error.
A ``--config`` JSON file overrides flags, which override defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from dac_retrieval import dataio, encoder as enc, training
from dac_retrieval.errors import ConfigError, DacError, UsageError
from dac_retrieval.fusion import FusionConfig, default_alpha
from dac_retrieval.numcore import ACTIVATIONS, Rng
from dac_retrieval.pipeline import embed_objects
from dac_retrieval.retrieval import evaluate, rank

log = logging.getLogger("dac")

OUT_ENV = "DAC_OUT_DIR"
BACKBONE_FILE = "backbone.dacf"
ADAPTER_FILE = "adapters.dacf"
REPORT_FILE = "train_report.json"
MERGE_TOLERANCE = 1e-8


def _out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_ENV)
    if not out:
        raise UsageError(f"--out is required (or set {OUT_ENV})")
    return Path(out)


def _write_json(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# --- gen-synth ---------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    cfg = dataio.SynthConfig(
        seen=args.seen, unseen=args.unseen, items_per_class=args.items, views=args.views, dim=args.dim,
        noise=args.noise, shift=args.shift, text_noise=args.text_noise, feature_scale=args.feature_scale,
        seed=args.seed, name=args.name,
    )
    hashes = dataio.gen_synthetic(cfg, _out_dir(args))
    for fname, digest in sorted(hashes.items()):
        print(f"{digest}  {fname}")
    return 0


# --- adapt -------------------------------------------------------------------


def _train_config(args) -> training.TrainConfig:
    return training.TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, tau=args.tau, rank=args.rank,
        gamma=args.gamma, dropout_p=args.dropout, seed=args.seed, lora_mode=args.lora_mode,
        renorm_g=args.renorm_g,
    )


def _base_towers(args, in_dim: int):
    if getattr(args, "backbone", None):
        return dataio.load_backbone(args.backbone)
    return list(enc.make_synthetic_backbone(in_dim, out_dim=args.out_dim, seed=args.backbone_seed))


def _adapt(args, manifest_path):
    cfg = _train_config(args)
    print("adapt: " + " ".join(f"{k}={v}" for k, v in asdict(cfg).items()))
    _, ds = dataio.load_manifest(manifest_path)
    vt, tt = _base_towers(args, ds.train[0].views.shape[1])
    vt, tt, report = training.train(ds, cfg, vt, tt)
    return ds, vt, tt, report


def cmd_adapt(args) -> int:
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    ds, vt, tt, report = _adapt(args, args.manifest)
    dataio.save_backbone(out / BACKBONE_FILE, [enc.strip_adapters(vt), enc.strip_adapters(tt)])
    dataio.save_adapters(out / ADAPTER_FILE, [vt, tt])
    _write_json(out / REPORT_FILE, {**report.as_dict(), "seen_labels": ds.seen_labels})
    if report.epoch_loss:
        print(f"epoch loss {report.epoch_loss[0]:.4f} -> {report.epoch_loss[-1]:.4f}, {report.n_updates} updates")
    print(f"{dataio.sha256_file(out / ADAPTER_FILE)}  {ADAPTER_FILE}")
    return 0


# --- embed -------------------------------------------------------------------


def _fusion_config(args) -> FusionConfig:
    alpha = args.alpha
    if alpha is None:
        dataset_tag, _, backbone_tag = (args.profile or "").partition(":")
        alpha = default_alpha(dataset_tag, backbone_tag)
    return FusionConfig(alpha=alpha, scheme=args.fusion, act=args.act, post_norm=args.post_norm)


def _run_towers(args, in_dim: int):
    """Towers for embedding: a trained run directory, or the bare backbone with --zero-shot."""
    run = Path(args.run) if args.run else None
    if args.zero_shot:
        if run and (run / BACKBONE_FILE).exists():
            return dataio.load_backbone(run / BACKBONE_FILE)
        return _base_towers(args, in_dim)
    if run is None or not (run / ADAPTER_FILE).exists() or not (run / BACKBONE_FILE).exists():
        raise UsageError("adapter state not found; pass --run DIR from `dac adapt` or use --zero-shot")
    return dataio.load_adapters(run / ADAPTER_FILE, dataio.load_backbone(run / BACKBONE_FILE))


def cmd_embed(args) -> int:
    fcfg = _fusion_config(args)
    _, ds = dataio.load_manifest(args.manifest)
    vt, tt = _run_towers(args, ds.train[0].views.shape[1])
    groups = {"query": embed_objects(vt, tt, ds.query, fcfg), "target": embed_objects(vt, tt, ds.target, fcfg)}
    out = Path(args.out) if args.out else Path(os.environ.get(OUT_ENV, ".")) / "descriptors.dacf"
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"dataset": ds.name, "seen_labels": ds.seen_labels, "fusion": asdict(fcfg)}
    dataio.save_descriptors(out, groups, meta)
    dim = groups["query"][0].h.shape[0] if groups["query"] else 0
    print(f"alpha={fcfg.alpha} fusion={fcfg.scheme} act={fcfg.act} dim={dim}")
    print(f"{dataio.sha256_file(out)}  {out.name}")
    return 0


# --- eval / retrieve ---------------------------------------------------------


def _check_disjoint(seen, query, target) -> list[str]:
    overlap = sorted(set(seen) & ({d.label for d in query} | {d.label for d in target}))
    return [f"labels shared between training and retrieval splits: {overlap}"] if overlap else []


def _load_eval_groups(args):
    if args.descriptors:
        groups, meta = dataio.load_descriptors(args.descriptors)
        return groups["query"], groups["target"], meta.get("seen_labels", [])
    if not args.eval_manifest:
        raise UsageError("pass --descriptors FILE, or --eval-manifest with --run or --train-manifest")
    fcfg = _fusion_config(args)
    _, eval_ds = dataio.load_manifest(args.eval_manifest)
    if args.run:
        args.zero_shot = False
        vt, tt = _run_towers(args, eval_ds.query[0].views.shape[1])
        report_path = Path(args.run) / REPORT_FILE
        seen = json.loads(report_path.read_text()).get("seen_labels", []) if report_path.exists() else []
    elif args.train_manifest:
        train_ds, vt, tt, _ = _adapt(args, args.train_manifest)
        seen = train_ds.seen_labels
    else:
        raise UsageError("--eval-manifest needs --run DIR or --train-manifest")
    return embed_objects(vt, tt, eval_ds.query, fcfg), embed_objects(vt, tt, eval_ds.target, fcfg), seen


def cmd_eval(args) -> int:
    query, target, seen = _load_eval_groups(args)
    problems = _check_disjoint(seen, query, target)
    if problems:
        print("open-set split violated:\n  " + "\n  ".join(problems), file=sys.stderr)
        return 1
    report = evaluate(query, target, args.ndcg_cutoff)
    print("mAP/NDCG/ANMRR")
    print(report.row())
    if report.excluded:
        print(f"excluded queries without relevant targets: {len(report.excluded)}")
    if args.out:
        _write_json(Path(args.out), report.as_dict())
    if args.per_query_csv:
        with open(args.per_query_csv, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["query", "AP", "NDCG", "NMRR"])
            writer.writeheader()
            writer.writerows(report.per_query)
    return 0


def cmd_retrieve(args) -> int:
    groups, _ = dataio.load_descriptors(args.descriptors)
    results = []
    for q in groups["query"]:
        ranked = rank(q, groups["target"])
        top = slice(0, args.top_k)
        results.append({
            "query": q.id, "label": q.label, "ids": ranked.ids[top],
            "scores": [float(s) for s in ranked.scores[top]],
            "relevant": [bool(r) for r in ranked.relevance[top]],
        })
    if args.out:
        _write_json(Path(args.out), results)
    else:
        for r in results:
            print(r["query"], " ".join(r["ids"]))
    return 0


# --- merge-lora --------------------------------------------------------------


def cmd_merge_lora(args) -> int:
    run = Path(args.run)
    if not (run / ADAPTER_FILE).exists() or not (run / BACKBONE_FILE).exists():
        raise UsageError(f"no {ADAPTER_FILE}/{BACKBONE_FILE} in {run}")
    adapted = dataio.load_adapters(run / ADAPTER_FILE, dataio.load_backbone(run / BACKBONE_FILE))
    merged = [enc.merge_tower(t) for t in adapted]

    rng = Rng(args.seed)
    worst = 0.0
    for a, m in zip(adapted, merged):
        probes = rng.normal((args.probes, a.in_dim))
        probes *= args.probe_scale
        ya, _ = enc.encode(a, probes)
        ym, _ = enc.encode(m, probes)
        dev = np.max(np.abs(ym - ya) / (np.abs(ya) + 1.0))
        print(f"{a.name}: {len(a.adapters())} adapters merged, max relative deviation {dev:.3e} over {args.probes} probes")
        worst = max(worst, float(dev))
    out = Path(args.out) if args.out else run / "merged_backbone.dacf"
    dataio.save_backbone(out, merged)
    if worst > MERGE_TOLERANCE:
        print(f"merge self-check failed: {worst:.3e} > {MERGE_TOLERANCE:.0e}", file=sys.stderr)
        return 1
    print(f"{dataio.sha256_file(out)}  {out.name}")
    return 0


# --- parser ------------------------------------------------------------------


def _add_train_args(p):
    d = training.TrainConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--rank", type=int, default=d.rank)
    p.add_argument("--gamma", type=float, default=d.gamma)
    p.add_argument("--dropout", type=float, default=d.dropout_p)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--lora-mode", choices=training.LORA_MODES, default=d.lora_mode)
    p.add_argument("--renorm-g", action="store_true", help="L2-normalize pooled embeddings before the loss")


def _add_backbone_args(p):
    p.add_argument("--backbone", help="backbone container; a seeded synthetic backbone otherwise")
    p.add_argument("--backbone-seed", type=int, default=0)
    p.add_argument("--out-dim", type=int, default=16, help="embedding dim of the synthetic backbone")


def _add_fusion_args(p):
    p.add_argument("--alpha", type=float, help="fusion weight in [0, 1]; default from --profile")
    p.add_argument("--profile", help="DATASET:BACKBONE tag pair selecting a tuned alpha, e.g. OS-MN40-core:L/14")
    p.add_argument("--fusion", choices=("add", "concat"), default="add")
    p.add_argument("--act", choices=ACTIVATIONS, default="tanh")
    p.add_argument("--post-norm", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dac", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("--config", help="JSON file whose keys override command-line flags")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="write a synthetic open-set dataset")
    s = dataio.SynthConfig()
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=s.seed)
    p.add_argument("--seen", type=int, default=s.seen)
    p.add_argument("--unseen", type=int, default=s.unseen)
    p.add_argument("--items", type=int, default=s.items_per_class)
    p.add_argument("--views", type=int, default=s.views)
    p.add_argument("--dim", type=int, default=s.dim)
    p.add_argument("--noise", type=float, default=s.noise)
    p.add_argument("--shift", type=float, default=s.shift)
    p.add_argument("--text-noise", type=float, default=s.text_noise)
    p.add_argument("--feature-scale", type=float, default=s.feature_scale)
    p.add_argument("--name", default=s.name)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("adapt", help="train adapters on the manifest's train split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")
    _add_backbone_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("embed", help="write fused descriptors for query and target splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run", help="output directory of `dac adapt`")
    p.add_argument("--zero-shot", action="store_true", help="use the frozen backbone without adapters")
    p.add_argument("--out", help="descriptor container path")
    _add_backbone_args(p)
    _add_fusion_args(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("eval", help="score query descriptors against the target gallery")
    p.add_argument("--descriptors")
    p.add_argument("--eval-manifest", help="embed and evaluate this manifest directly")
    p.add_argument("--train-manifest", help="adapt on this manifest first (cross-dataset transfer)")
    p.add_argument("--run")
    p.add_argument("--ndcg-cutoff", type=int)
    p.add_argument("--out", help="MetricsReport JSON path")
    p.add_argument("--per-query-csv")
    _add_backbone_args(p)
    _add_fusion_args(p)
    _add_train_args(p)
    p.set_defaults(func=cmd_eval, zero_shot=False)

    p = sub.add_parser("retrieve", help="ranked gallery ids for every query")
    p.add_argument("--descriptors", required=True)
    p.add_argument("--top-k", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(func=cmd_retrieve)

    p = sub.add_parser("merge-lora", help="fold adapters into the backbone and self-check")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.add_argument("--probes", type=int, default=500)
    p.add_argument("--probe-scale", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_merge_lora)
    return parser


def _apply_config(args):
    data = json.loads(Path(args.config).read_text())
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    for key, value in data.items():
        dest = key.replace("-", "_")
        if dest in ("command", "func"):
            continue
        if not hasattr(args, dest):
            raise ConfigError(f"unknown config key {key!r} for `{args.command}`")
        setattr(args, dest, value)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            _apply_config(args)
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"dac {args.command}: {exc}", file=sys.stderr)
        return 2
    except (DacError, OSError) as exc:
        print(f"dac {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

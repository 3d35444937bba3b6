"""Command-line entry point for the whole pipeline.

Subcommands: gen-data, train-match, train-cst, eval, finb, bench, complete.
Each run writes a manifest (command, config, seed, timestamps) into the
output directory before doing work and finalizes it after. Existing output
files are never overwritten unless --force is given. Config files are flat
JSON dicts whose keys mirror the config dataclasses; command-line flags
override config values, which override defaults.

Set SETCOMPLETE_LOG=debug|info|warning to control verbosity and
SETCOMPLETE_NUMBA=0|1 to pin the kernel backend.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .data import (
    GenConfig,
    generate_dataset,
    items_in,
    read_jsonl,
    split_outfits,
    triples_for,
    write_catalog_jsonl,
    write_jsonl,
)
from .evaluation import (
    MetricsReport,
    diversity_histogram,
    finb_eval,
    recall_at_k,
    category_accuracy,
    smd,
    target_histogram,
    timing_benchmark,
)
from .matching import MatchConfig
from .model import SlotInit, build_variant, complete_features, st_sequential_complete
from .retrieval import AnnConfig, RetrievalIndex, build_index
from .sets import FeatureSet
from .training import (
    TrainConfig,
    load_cst_checkpoint,
    load_match_checkpoint,
    save_cst_checkpoint,
    save_match_checkpoint,
    train_cst,
    train_matching,
    write_log_csv,
)
from .evaluation import top1_ids

log = logging.getLogger("setcomplete")


def _setup_logging() -> None:
    level = os.environ.get("SETCOMPLETE_LOG", "warning").lower()
    numeric = {"debug": logging.DEBUG, "info": logging.INFO, "warning": logging.WARNING,
               "error": logging.ERROR}.get(level, logging.WARNING)
    logging.basicConfig(level=numeric, format="%(levelname)s %(name)s: %(message)s")


@dataclass
class RunManifest:
    command: str
    out_dir: str
    seed: int | None
    config_path: str | None
    argv: list[str]
    version: str = __version__
    started_at: str = ""
    finished_at: str | None = None
    status: str = "running"

    def write(self) -> None:
        path = Path(self.out_dir) / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _start_manifest(args, command: str) -> RunManifest:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        command=command,
        out_dir=str(out_dir),
        seed=getattr(args, "seed", None),
        config_path=getattr(args, "config", None),
        argv=sys.argv[1:],
        started_at=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
    )
    manifest.write()
    return manifest


def _finish_manifest(manifest: RunManifest, status: str = "done") -> None:
    manifest.finished_at = time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime())
    manifest.status = status
    manifest.write()


def _guard_outputs(args, *names: str) -> Path:
    out_dir = Path(args.out)
    clashes = [str(out_dir / n) for n in names if (out_dir / n).exists()]
    if clashes and not args.force:
        raise FileExistsError(f"refusing to overwrite {', '.join(clashes)} (use --force)")
    return out_dir


def _load_config(args, cls):
    """Build a config dataclass from defaults, config file, then CLI flags."""
    values: dict = {}
    if getattr(args, "config", None):
        raw = json.loads(Path(args.config).read_text(encoding="utf-8"))
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
        values.update(raw)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "variant", None) is not None and "variant" in {f.name for f in dataclasses.fields(cls)}:
        values["variant"] = args.variant
    return cls(**values)


def _read_data(path: str):
    catalog, outfits = read_jsonl(path)
    if catalog is None:
        raise ValueError(f"{path}: no outfits found")
    return catalog, outfits


# -- subcommand handlers ----------------------------------------------------------


def cmd_gen_data(args) -> int:
    config = _load_config(args, GenConfig)
    out_dir = _guard_outputs(args, "outfits.jsonl", "catalog.jsonl")
    manifest = _start_manifest(args, "gen-data")
    catalog, outfits = generate_dataset(config)
    write_jsonl(out_dir / "outfits.jsonl", catalog, outfits)
    write_catalog_jsonl(out_dir / "catalog.jsonl", catalog)
    _finish_manifest(manifest)
    print(f"wrote {len(outfits)} outfits over {len(catalog)} items to {out_dir}")
    return 0


def cmd_train_match(args) -> int:
    config = _load_config(args, MatchConfig)
    out_dir = _guard_outputs(args, "scorer.ckpt", "match_log.csv", "finb_report.json")
    manifest = _start_manifest(args, "train-match")
    catalog, outfits = _read_data(args.data)
    params, history, finb = train_matching(
        catalog, outfits, config, log=lambda row: log.info("match epoch %s loss %.4f", row["epoch"], row["loss"])
    )
    save_match_checkpoint(out_dir / "scorer.ckpt", params, extra={"epochs": config.epochs})
    with open(out_dir / "match_log.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,loss\n")
        for row in history:
            fh.write(f"{row['epoch']},{row['loss']}\n")
    (out_dir / "finb_report.json").write_text(json.dumps(finb, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    _finish_manifest(manifest)
    print(f"scorer FINB accuracy {finb['accuracy']:.3f} (n={finb['n']}) -> {out_dir / 'scorer.ckpt'}")
    return 0


def cmd_train_cst(args) -> int:
    config = _load_config(args, TrainConfig)
    catalog, outfits = _read_data(args.data)
    config.categories = max(config.categories, int(catalog.categories.max()) + 1)
    ckpt_name = f"cst_{config.variant}.ckpt"
    out_dir = _guard_outputs(args, ckpt_name, "train_log.csv")
    scorer = None
    if args.scorer:
        scorer, _ = load_match_checkpoint(args.scorer)
    manifest = _start_manifest(args, "train-cst")
    params, history = train_cst(
        catalog, outfits, scorer, config,
        log=lambda row: log.info("epoch %s total %.4f val_recall %.3f", row["epoch"], row["total"], row["val_recall"]),
    )
    best_epoch = int(np.argmax([r["val_recall"] for r in history])) if history else -1
    save_cst_checkpoint(out_dir / ckpt_name, params, extra={"best_epoch": best_epoch, "seed": config.seed})
    write_log_csv(out_dir / "train_log.csv", history)
    _finish_manifest(manifest)
    last = history[-1] if history else {}
    print(f"trained {config.variant}: val recall {last.get('val_recall', 0.0):.3f} -> {out_dir / ckpt_name}")
    return 0


def _load_index_or_build(args, catalog, outfits) -> RetrievalIndex:
    if args.index:
        return RetrievalIndex.load(args.index)
    test = split_outfits(outfits)["test"]
    return build_index(catalog, item_ids=items_in(test))


def cmd_eval(args) -> int:
    out_dir = _guard_outputs(args, "metrics.json", "metrics.csv")
    manifest = _start_manifest(args, "eval")
    catalog, outfits = _read_data(args.data)
    params, meta = load_cst_checkpoint(args.checkpoint)
    index = _load_index_or_build(args, catalog, outfits)
    test = [o for o in split_outfits(outfits)["test"] if len(o.item_ids) >= 2]
    triples = triples_for(test, catalog, seed=args.seed or 0)
    seed = args.seed or 0

    block: dict = {
        "recall@32": {"mean": recall_at_k(params, triples, index, k=32, slot_seed=seed), "n": len(triples)},
        "accuracy": {"mean": category_accuracy(params, triples, index, slot_seed=seed), "n": len(triples)},
        "diversity": diversity_histogram(params, triples, index, slot_seed=seed),
        "diversity_truth": target_histogram(triples),
    }
    if args.scorer:
        scorer, _ = load_match_checkpoint(args.scorer)
        block["smd"] = smd(params, triples, scorer, index=index, slot_seed=seed)
        block["smd_raw"] = smd(params, triples, scorer, index=None, slot_seed=seed)
    report = MetricsReport(seed=seed, variants={params.variant: block})
    report.save(out_dir)
    _finish_manifest(manifest)
    print(
        f"{params.variant}: recall@32 {block['recall@32']['mean']:.3f}, "
        f"accuracy {block['accuracy']['mean']:.3f} (n={len(triples)})"
    )
    return 0


def cmd_finb(args) -> int:
    out_dir = _guard_outputs(args, "finb.json", "finb.csv")
    manifest = _start_manifest(args, "finb")
    catalog, outfits = _read_data(args.data)
    test = split_outfits(outfits)["test"]
    seed = args.seed or 0
    results: dict[str, dict] = {}
    if args.scorer:
        scorer, _ = load_match_checkpoint(args.scorer)
        results["scorer"] = finb_eval(scorer, test, catalog, seed=seed, selector="scorer")
    if args.checkpoint:
        params, _ = load_cst_checkpoint(args.checkpoint)
        results[params.variant] = finb_eval(params, test, catalog, seed=seed, selector="cst")
    if not results:
        raise ValueError("provide --scorer and/or --checkpoint")
    report = MetricsReport(seed=seed, variants={k: {"finb": v} for k, v in results.items()})
    report.save(out_dir, stem="finb")
    _finish_manifest(manifest)
    for name, res in results.items():
        print(f"{name}: FINB accuracy {res['accuracy']:.3f} (CI {res['ci_low']:.3f}-{res['ci_high']:.3f}, n={res['n']})")
    return 0


def cmd_bench(args) -> int:
    out_dir = _guard_outputs(args, "bench.json", "bench.csv")
    manifest = _start_manifest(args, "bench")
    seed = args.seed or 0
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else [1000, 5000]
    gen = GenConfig(catalog_size=max(sizes), outfits=64, seed=seed)
    catalog, outfits = generate_dataset(gen)
    rng = np.random.default_rng(seed)
    x = FeatureSet(catalog.features_of(outfits[0].item_ids[:5]))
    labels_pool = sorted(set(int(c) for c in catalog.categories))
    models = {
        "cst": build_variant("CR", seed=seed),
        "st": build_variant("st", seed=seed),
    }
    indexes = [
        build_index(catalog, item_ids=[int(i) for i in rng.choice(catalog.ids, size=n, replace=False)])
        for n in sizes
    ]
    backends = ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else [])
    rows = []
    previous = kernels.get_backend()
    try:
        for backend in backends:
            kernels.set_backend(backend)
            for row in timing_benchmark(models, indexes, x, labels_pool, repeats=args.repeats):
                row["backend"] = backend
                rows.append(row)
    finally:
        kernels.set_backend(previous)
    (out_dir / "bench.json").write_text(json.dumps(rows, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    import csv as _csv

    with open(out_dir / "bench.csv", "w", newline="", encoding="utf-8") as fh:
        writer = _csv.DictWriter(fh, fieldnames=sorted(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    _finish_manifest(manifest)
    for backend in backends:
        sub = [r for r in rows if r["backend"] == backend and r["model"] == "cst"]
        med = np.median([r["median_seconds"] for r in sub])
        print(f"{backend}: cst median completion {med * 1e3:.2f} ms over {len(sub)} settings")
    return 0


def cmd_complete(args) -> int:
    catalog, outfits = _read_data(args.data)
    _, query_outfits = read_jsonl(args.query)
    if len(query_outfits) != 1:
        raise ValueError("the query file must hold exactly one outfit line")
    query_catalog, _ = read_jsonl(args.query)
    params, _ = load_cst_checkpoint(args.checkpoint)
    if args.index:
        index = RetrievalIndex.load(args.index)
    else:
        index = build_index(catalog)
    labels = [int(v) for v in args.labels.split(",") if v.strip() != ""]
    if not labels:
        raise ValueError("provide at least one category label")
    x = FeatureSet(
        query_catalog.features_of(query_outfits[0].item_ids),
        element_ids=np.asarray(query_outfits[0].item_ids, dtype=np.int64),
    )
    if params.variant == "st":
        ids = st_sequential_complete(x, labels, params, index)
    else:
        yhat = complete_features(x, labels, params, SlotInit(mode="gaussian", seed=args.seed or 0))
        ids = [int(i) for i in top1_ids(index, yhat.features)]
    print(",".join(str(i) for i in ids))
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="setcomplete",
        description="Set completion: synthetic data, training, retrieval and evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=out_required, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    common(p)
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train-match", help="pretrain the compatibility scorer")
    common(p)
    p.add_argument("--data", required=True, help="outfits JSONL file")
    p.set_defaults(handler=cmd_train_match)

    p = sub.add_parser("train-cst", help="train a completion variant")
    common(p)
    p.add_argument("--data", required=True, help="outfits JSONL file")
    p.add_argument("--variant", choices=["CR", "Cx", "xR", "xx", "sa", "st"], default=None)
    p.add_argument("--scorer", help="frozen scorer checkpoint (required for CR/xR)")
    p.set_defaults(handler=cmd_train_cst)

    p = sub.add_parser("eval", help="retrieval metrics on the test split")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="model checkpoint")
    p.add_argument("--scorer", help="scorer checkpoint for score-difference metrics")
    p.add_argument("--index", help="prebuilt index file (default: exact index over test items)")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("finb", help="fill-in-the-N-blank evaluation")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", help="model checkpoint (similarity-sum selection)")
    p.add_argument("--scorer", help="scorer checkpoint (score selection)")
    p.set_defaults(handler=cmd_finb)

    p = sub.add_parser("bench", help="timing benchmark across backends and index sizes")
    common(p)
    p.add_argument("--sizes", help="comma-separated index sizes (default 1000,5000)")
    p.add_argument("--repeats", type=int, default=30)
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("complete", help="complete a query outfit for given labels")
    p.add_argument("--data", required=True, help="outfits JSONL file providing the item database")
    p.add_argument("--query", required=True, help="JSONL file with exactly one query outfit")
    p.add_argument("--labels", required=True, help="comma-separated category ids to fill")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", help="prebuilt index file")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=cmd_complete)

    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        log.debug("traceback", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

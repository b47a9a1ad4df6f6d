"""Command-line entry point: ``relmp {train,evaluate,split,stats,explain,census}``."""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .analysis import ExplanationError, diagonal_dominance, context_importance, extract_explanations, path_census, \
    stats_report
from .kg import ParseError, load_dataset, make_inductive_split, write_split_manifest
from .metrics import evaluate, known_relations, write_metrics_json, write_ranks_csv
from .model import ConfigError, ModelConfig, RelationModel
from .params import NumericalError, load_checkpoint, save_checkpoint
from .train import TrainConfig, train

log = logging.getLogger("relmp")

DATA_ROOT_ENV = "RELMP_DATA_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# (context hops, max path length) per benchmark
DATASET_DEFAULTS = {
    "fb15k": (2, 2),
    "fb15k-237": (2, 3),
    "wn18": (3, 3),
    "wn18rr": (3, 4),
    "nell995": (2, 3),
    "ddb14": (3, 4),
}
FALLBACK_DEFAULTS = (2, 3)


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def resolve_dataset_dir(name_or_path: str) -> Path:
    p = Path(name_or_path)
    if p.is_dir():
        return p
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute() and (Path(root) / p).is_dir():
        return Path(root) / p
    raise DataError(f"dataset directory not found: {name_or_path}"
                    + ("" if root else f" (set {DATA_ROOT_ENV} to resolve bare names)"))


def _load(name_or_path):
    try:
        return load_dataset(resolve_dataset_dir(name_or_path))
    except (FileNotFoundError, ParseError) as exc:
        raise DataError(str(exc)) from exc


def dataset_defaults(name: str) -> tuple[tuple[int, int], bool]:
    key = name.lower()
    if key in DATASET_DEFAULTS:
        return DATASET_DEFAULTS[key], True
    return FALLBACK_DEFAULTS, False


def _thread_limit(args):
    threads = 1 if args.deterministic else args.threads
    if threads is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def _add_common(p):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None, help="BLAS threads (default: all available)")
    p.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible run")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="relmp", description="Relation prediction with relational context and paths.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write checkpoint, curves and test metrics")
    p.add_argument("--dataset", required=True, help=f"dataset directory or name under ${DATA_ROOT_ENV}")
    p.add_argument("--use-context", type=_bool, default=True)
    p.add_argument("--use-path", type=_bool, default=True)
    p.add_argument("--hops", type=int, default=None)
    p.add_argument("--max-path-len", type=int, default=None)
    p.add_argument("--dim", type=int, default=64, help="hidden width of context layers and RNN")
    p.add_argument("--context-aggregator", choices=["mean", "concat", "cross"], default="concat")
    p.add_argument("--path-type", choices=["embedding", "rnn"], default="embedding")
    p.add_argument("--path-aggregator", choices=["mean", "attention"], default="attention")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.005)
    p.add_argument("--l2", type=float, default=1e-7)
    p.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    p.add_argument("--inductive-ratio", type=float, default=None)
    p.add_argument("--features", default=None, help=".npy table of initial relation features (|R| x d)")
    p.add_argument("--output-dir", default=None)
    p.add_argument("--cache-dir", default=None, help="path cache directory (default: <output-dir>/cache)")
    p.add_argument("--filtered", action="store_true", help="also mask other known relations of a pair")
    _add_common(p)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=["valid", "test"], default="test")
    p.add_argument("--filtered", action="store_true")
    p.add_argument("--output", default=None, help="metrics JSON path (default: stdout)")
    p.add_argument("--ranks-csv", default=None)
    p.add_argument("--features", default=None)
    p.add_argument("--cache-dir", default=None)
    _add_common(p)

    p = sub.add_parser("split", help="write an inductive split manifest")
    p.add_argument("--dataset", required=True)
    p.add_argument("--ratio", type=float, required=True)
    p.add_argument("--output", default=None)
    _add_common(p)

    p = sub.add_parser("stats", help="degree statistics, message-passing costs and line-graph degree")
    p.add_argument("--dataset", required=True)
    p.add_argument("--output", default=None)
    _add_common(p)

    p = sub.add_parser("explain", help="top contexts and paths per relation from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--output", default=None, help="CSV path (default: stdout)")
    p.add_argument("--features", default=None)
    _add_common(p)

    p = sub.add_parser("census", help="fraction of possible relation sequences that occur as paths")
    p.add_argument("--dataset", required=True)
    p.add_argument("--len", dest="length", type=int, required=True)
    p.add_argument("--all-splits", action="store_true", help="count over train+valid+test edges")
    _add_common(p)
    return parser


def _emit_json(doc, path=None):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _load_features(path):
    if path is None:
        return None
    try:
        return np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read features {path}: {exc}") from exc


def cmd_train(args) -> int:
    ds = _load(args.dataset)
    (hops, plen), known_name = dataset_defaults(ds.name)
    applied = {}
    if args.hops is None:
        args.hops = hops
        applied["hops"] = hops
    if args.max_path_len is None:
        args.max_path_len = plen
        applied["max_path_len"] = plen
    if applied and not known_name:
        log.warning("no stored defaults for dataset %r; using hops=%d, max path length=%d", ds.name, hops, plen)
    mcfg = ModelConfig(use_context=args.use_context, use_path=args.use_path, hops=args.hops,
                       max_path_len=args.max_path_len, hidden_dim=args.dim,
                       context_aggregator=args.context_aggregator, path_type=args.path_type,
                       path_aggregator=args.path_aggregator, seed=args.seed).validate()
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, l2=args.l2, dtype=args.dtype)
    features = _load_features(args.features)
    resolved = {"dataset": str(resolve_dataset_dir(args.dataset)), "dataset_name": ds.name,
                "dataset_fingerprint": ds.fingerprint(), "model": mcfg.to_dict(), "train": asdict(tcfg),
                "inductive_ratio": args.inductive_ratio, "filtered": args.filtered, "features": args.features,
                "defaults_applied": applied, "seed": args.seed, "deterministic": args.deterministic}
    run_hash = hashlib.sha256(json.dumps(resolved, sort_keys=True).encode()).hexdigest()[:12]
    out = Path(args.output_dir) if args.output_dir else Path("runs") / f"{ds.name}-{mcfg.name}-{run_hash}"
    out.mkdir(parents=True, exist_ok=True)
    cache = Path(args.cache_dir) if args.cache_dir else out / "cache"
    _emit_json(resolved, out / "config.json")
    log.info("resolved config: %s", json.dumps(resolved, sort_keys=True))

    graph, train_triples, eval_graph = ds.graph, ds.train, ds.graph
    if args.inductive_ratio is not None:
        split = make_inductive_split(ds.graph, ds.test, args.inductive_ratio, args.seed)
        write_split_manifest(split, out / "split.json")
        graph, train_triples = split.train_graph, ds.train[split.kept_edges]
        log.info("inductive split: %d entities removed, %d of %d training triples kept",
                 len(split.removed_entities), len(train_triples), len(ds.train))
    with _thread_limit(args):
        result = train(graph, train_triples, ds.valid, mcfg, tcfg, valid_graph=eval_graph, cache_dir=cache,
                       features=features)
        known = known_relations(ds.train, ds.valid, ds.test) if args.filtered else None
        test = evaluate(result.model, eval_graph, ds.test, known=known, cache_dir=cache)

    manifest = result.model.manifest()
    manifest.update({"seed": args.seed, "epoch": result.best_epoch, "relations": ds.relations,
                     "valid_mrr": None if result.best_valid is None else result.best_valid.mrr,
                     "config": resolved})
    save_checkpoint(out / "checkpoint", result.model.store, manifest)
    with open(out / "curves.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "mean_ce", "l2_penalty", "total", "valid_mrr", "valid_hit1", "valid_hit3"])
        for r in result.history:
            w.writerow([r.epoch, r.mean_ce, r.l2_penalty, r.total, r.valid_mrr, r.valid_hit1, r.valid_hit3])
    extra = {"split": "test", "filtered": args.filtered, "n_parameters": result.model.n_parameters(),
             "best_epoch": result.best_epoch, "epochs_run": len(result.history),
             "best_valid_mrr": None if result.best_valid is None else result.best_valid.mrr,
             "last_valid_mrr": None if result.last_valid is None else result.last_valid.mrr}
    write_metrics_json(out / "metrics.json", test, mcfg.config_hash(), extra)
    write_ranks_csv(out / "test_ranks.csv", ds.test, test)
    print(json.dumps({**test.to_dict(mcfg.config_hash()), "output_dir": str(out)}, sort_keys=True))
    return EXIT_OK


def _load_model(path, features=None) -> tuple[RelationModel, dict]:
    try:
        store, doc = load_checkpoint(path, dtype=np.float32)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise DataError(str(exc)) from exc
    return RelationModel.from_checkpoint(store, doc, features=features), doc


def cmd_evaluate(args) -> int:
    model, doc = _load_model(args.checkpoint, _load_features(args.features))
    ds = _load(args.dataset)
    if model.n_relations != ds.n_relations:
        raise DataError(f"checkpoint has {model.n_relations} relations but dataset {ds.name} has {ds.n_relations}")
    triples = ds.split(args.split)
    known = known_relations(ds.train, ds.valid, ds.test) if args.filtered else None
    with _thread_limit(args):
        report = evaluate(model, ds.graph, triples, known=known, cache_dir=args.cache_dir)
    doc_out = report.to_dict(model.config.config_hash())
    doc_out.update({"split": args.split, "filtered": args.filtered})
    _emit_json(doc_out, args.output)
    if args.ranks_csv:
        write_ranks_csv(args.ranks_csv, triples, report)
    return EXIT_OK


def cmd_split(args) -> int:
    ds = _load(args.dataset)
    split = make_inductive_split(ds.graph, ds.test, args.ratio, args.seed)
    if args.output:
        write_split_manifest(split, args.output)
    else:
        _emit_json(split.manifest())
    log.info("removed %d entities; %d of %d training edges kept", len(split.removed_entities),
             len(split.kept_edges), ds.graph.n_edges)
    return EXIT_OK


def cmd_stats(args) -> int:
    ds = _load(args.dataset)
    _emit_json(stats_report(ds.graph), args.output)
    return EXIT_OK


def cmd_explain(args) -> int:
    model, doc = _load_model(args.checkpoint, _load_features(args.features))
    names = doc.get("relations")
    use_ctx = model.config.use_context and model.config.hops == 1 and model.config.context_aggregator != "cross"
    if model.config.use_context and not use_ctx:
        log.warning("context importances need a 1-hop mean or concat context model; exporting paths only")
    if not use_ctx and not model.config.use_path:
        raise ExplanationError("nothing to explain: context importances unavailable and no path branch")
    table = extract_explanations(model, args.k, context=use_ctx, paths=model.config.use_path)
    if use_ctx:
        dom = diagonal_dominance(context_importance(model))
        log.info("diagonal dominance: %d of %d relations", dom, model.n_relations)
    if args.output:
        table.write_csv(args.output, names)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["target_relation", "kind", "item", "weight", "rank"])
        w.writerows(table.rows(names))
    return EXIT_OK


def cmd_census(args) -> int:
    ds = _load(args.dataset)
    graph = ds.graph
    if args.all_splits:
        from .kg import KnowledgeGraph
        graph = KnowledgeGraph(np.concatenate([ds.train, ds.valid, ds.test]), ds.n_entities, ds.n_relations)
    frac = path_census(graph, args.length)
    _emit_json({"length": args.length, "n_relations": ds.n_relations, "occupied_fraction": frac})
    return EXIT_OK


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "split": cmd_split, "stats": cmd_stats,
            "explain": cmd_explain, "census": cmd_census}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ExplanationError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except (DataError, ParseError, FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        log.error("%s", exc)
        return EXIT_NUMERIC
    except (ValueError, OverflowError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: generate / index / train / eval / infer.

Every run directory is self-describing: it holds the exact config that
produced it (``config.ini``) and a ``run.json`` naming its kind, registry
name, dataset and parent run.  Exit codes: 0 success, 1 usage error,
2 data validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .autograd import no_grad
from .biencoder import BiEncoder, DenseIndex, encode_articles, stage1_train
from .bm25 import Bm25Params, InvertedIndex, index_corpus
from .checkpoint import (ArtifactError, load_checkpoint, load_embeddings, prefixed,
                         save_checkpoint, save_embeddings, unprefixed, write_records)
from .config import ConfigFileError, ExperimentConfig
from .corpus import CorpusError, load_dataset, write_corpus, write_split
from .distill import KD_MODES, SCHEDULES, STAGE2_GRAPH_MODES, ConfigError, Stage2Trainer
from .experiments import (bm25_retriever, dense_retriever, stage1_encoder_config,
                          variant_name)
from .metrics import ReportError, compare_reports, evaluate
from .optim import NumericalError
from .synthetic import generate_synthetic

log = logging.getLogger("sarlab")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ---------------------------------------------------------------------------
# configuration plumbing


def _ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid k list {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError("k values must be positive integers")
    return ks


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for item in getattr(args, "set", None) or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        lhs, value = item.split("=", 1)
        section, key = lhs.split(".", 1)
        cfg.set(section, key, value)
    if getattr(args, "seed", None) is not None:
        cfg.run = dataclasses.replace(cfg.run, seed=args.seed)
    if getattr(args, "data", None):
        cfg.paths = dataclasses.replace(cfg.paths, data=args.data)
    return cfg


def _read_run(run_dir: Path) -> dict:
    meta = run_dir / "run.json"
    if not meta.is_file():
        raise DataError(f"{run_dir} is not a run directory (no run.json)")
    return json.loads(meta.read_text(encoding="utf-8"))


def _write_run(run_dir: Path, cfg: ExperimentConfig, meta: dict) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.ini")
    (run_dir / "run.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n",
                                      encoding="utf-8")


def _dataset(path: str):
    d = Path(path)
    if not (d / "articles.jsonl").is_file():
        raise DataError(f"no dataset at {d} (articles.jsonl missing)")
    return load_dataset(d)


def _load_model(run_dir: Path, cfg: ExperimentConfig, vocab_size: int, prefix: str = "") -> BiEncoder:
    tensors, _ = load_checkpoint(run_dir / "checkpoint.npz")
    model = BiEncoder(cfg.encoder, vocab_size, np.random.default_rng(0))
    try:
        model.load_state_dict(unprefixed(prefix, tensors) if prefix else tensors)
    except (KeyError, ValueError) as exc:
        raise ArtifactError(f"checkpoint in {run_dir} does not fit the configured encoder: {exc}")
    model.eval()
    return model


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg = _load_config(args)
    spec = cfg.data
    overrides = {"n_topics": args.topics, "articles_per_topic": args.articles_per_topic,
                 "noise_rate": args.noise, "n_val": args.val, "n_test": args.test}
    spec = dataclasses.replace(spec, **{k: v for k, v in overrides.items() if v is not None})
    if args.queries is not None:
        n_train = args.queries - spec.n_val - spec.n_test
        if n_train < 1:
            raise UsageError(f"--queries {args.queries} leaves no training queries after "
                             f"{spec.n_val} validation and {spec.n_test} test queries")
        spec = dataclasses.replace(spec, n_train=n_train)
    elif args.train is not None:
        spec = dataclasses.replace(spec, n_train=args.train)
    corpus, queries, split = generate_synthetic(spec, seed=cfg.run.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, queries, out / "articles.jsonl", out / "queries.jsonl")
    write_split(split, out / "split.json")
    cfg.data = spec
    cfg.paths = dataclasses.replace(cfg.paths, data=str(out))
    cfg.save(out / "config.ini")
    print(f"wrote {len(corpus)} articles, {len(queries)} queries "
          f"({len(split.train)} train / {len(split.validation)} validation / "
          f"{len(split.test)} test), {len(corpus.units)} structural units, "
          f"vocabulary {len(corpus.vocab)} to {out}")
    return EXIT_OK


def cmd_index(args) -> int:
    cfg = _load_config(args)
    corpus, _, _ = _dataset(cfg.paths.data)
    index = index_corpus(corpus, Bm25Params(args.k1, args.b))
    out = Path(args.out)
    _write_run(out, cfg, {"kind": "bm25", "name": "bm25", "data": cfg.paths.data})
    index.save(out / "index.json")
    print(f"indexed {index.n_docs} articles, {len(index.df)} terms -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    return _train_stage1(args) if args.stage == 1 else _train_stage2(args)


def _train_stage1(args) -> int:
    for flag in ("kd_mode", "graph", "schedule", "source"):
        if getattr(args, flag) is not None:
            raise UsageError(f"--{flag.replace('_', '-')} only applies to --stage 2")
    cfg = _load_config(args)
    name = "be-flat" if args.flat else "be"
    cfg.encoder = stage1_encoder_config(name, cfg.encoder)
    corpus, queries, split = _dataset(cfg.paths.data)
    res = stage1_train(corpus, split.select(queries, "train"), split.select(queries, "validation"),
                       cfg.encoder, cfg.stage1, seed=cfg.run.seed)
    out = Path(args.out)
    _write_run(out, cfg, {"kind": "stage1", "name": name, "data": cfg.paths.data,
                          "best_epoch": res.best_epoch})
    save_checkpoint(out / "checkpoint.npz", res.model.state_dict(),
                    {"kind": "stage1", "name": name})
    save_embeddings(out / "embeddings.tsv", corpus.article_ids, encode_articles(res.model, corpus))
    write_records(out / "curve.jsonl", res.curve)
    write_records(out / "history.jsonl", res.history)
    print(f"stage 1 ({name}) best epoch {res.best_epoch} -> {out}")
    return EXIT_OK


def _train_stage2(args) -> int:
    if args.source is None:
        raise UsageError("--stage 2 needs --from <stage-1 run directory>")
    source = Path(args.source)
    if not (source / "checkpoint.npz").is_file() or not (source / "run.json").is_file():
        raise DataError(f"missing stage-1 artifacts in {source}")
    parent = _read_run(source)
    if parent.get("kind") != "stage1":
        raise DataError(f"{source} is a {parent.get('kind')} run, not a stage-1 run")
    parent_cfg = ExperimentConfig.load(source / "config.ini")
    cfg = _load_config(args)
    cfg.encoder = parent_cfg.encoder
    if not getattr(args, "data", None):
        cfg.paths = dataclasses.replace(cfg.paths, data=parent["data"])
    switches = {"kd_mode": args.kd_mode, "graph_mode": args.graph, "schedule": args.schedule}
    cfg.stage2 = dataclasses.replace(cfg.stage2, **{k: v for k, v in switches.items() if v})
    cfg.stage2.validate()
    corpus, queries, split = _dataset(cfg.paths.data)
    model = _load_model(source, cfg, len(corpus.vocab))
    trainer = Stage2Trainer(corpus, split.select(queries, "train"),
                            split.select(queries, "validation"), model, cfg.stage2,
                            seed=cfg.run.seed)
    res = trainer.train()
    name = variant_name(cfg.stage2)
    out = Path(args.out)
    _write_run(out, cfg, {"kind": "stage2", "name": name, "data": cfg.paths.data,
                          "from": str(source), "best_epoch": res.best_epoch,
                          "kd_clamped": res.kd_clamped})
    tensors = prefixed("model.", res.model.state_dict())
    if res.gat is not None:
        tensors.update(prefixed("gat.", res.gat.state_dict()))
    save_checkpoint(out / "checkpoint.npz", tensors, {"kind": "stage2", "name": name})
    save_embeddings(out / "embeddings.tsv", corpus.article_ids, res.article_matrix)
    write_records(out / "curve.jsonl", res.curve)
    write_records(out / "history.jsonl", res.history)
    if trainer.graph is not None:
        (out / "graph").mkdir(exist_ok=True)
        trainer.graph.export(out / "graph" / "nodes.jsonl", out / "graph" / "edges.jsonl")
    print(f"stage 2 ({name}) best epoch {res.best_epoch} -> {out}")
    return EXIT_OK


def _retriever(run: str, data_override: str | None):
    """``(name, data dir, retriever)`` for a run directory or the literal ``bm25``."""
    run_dir = Path(run)
    if run == "bm25" and not run_dir.exists():
        if not data_override:
            raise UsageError("--runs bm25 needs --data")
        corpus, queries, split = _dataset(data_override)
        return "bm25", data_override, bm25_retriever(index_corpus(corpus)), (corpus, queries, split)
    if not run_dir.is_dir():
        raise DataError(f"unknown run directory {run}")
    meta = _read_run(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.ini")
    data = data_override or meta["data"]
    corpus, queries, split = _dataset(data)
    kind = meta["kind"]
    if kind == "bm25":
        rank = bm25_retriever(InvertedIndex.load(run_dir / "index.json"))
    elif kind == "stage1":
        model = _load_model(run_dir, cfg, len(corpus.vocab))
        ids, matrix = load_embeddings(run_dir / "embeddings.tsv")
        rank = dense_retriever(model, corpus, matrix if ids == corpus.article_ids else None)
    elif kind == "stage2":
        model = _load_model(run_dir, cfg, len(corpus.vocab), prefix="model.")
        ids, matrix = load_embeddings(run_dir / "embeddings.tsv")
        if ids != corpus.article_ids:
            raise DataError(f"embeddings in {run_dir} do not match the corpus at {data}")
        rank = dense_retriever(model, corpus, matrix)
    else:
        raise DataError(f"{run_dir}: unknown run kind {kind!r}")
    return meta["name"], data, rank, (corpus, queries, split)


def cmd_eval(args) -> int:
    reports = []
    seen: dict[str, int] = {}
    for run in args.runs:
        name, _, rank, (_, queries, split) = _retriever(run, args.data)
        seen[name] = seen.get(name, 0) + 1
        label = name if seen[name] == 1 else f"{name}#{seen[name]}"
        report = evaluate(label, {label: rank}, split.select(queries, args.split), args.k,
                          args.split)
        reports.append(report)
        run_dir = Path(run)
        if run_dir.is_dir():
            (run_dir / f"report-{args.split}.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
    if len(reports) > 1:
        table = compare_reports(reports).table()
    else:
        r = reports[0]
        table = "".join(f"{r.config}  {m}{'@' + str(k) if k else ''}  {v:.4f}\n"
                        for m, k, v in r.values())
    sys.stdout.write(table)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.jsonl").write_text("".join(r.to_jsonl() for r in reports), encoding="utf-8")
        (out / "table.txt").write_text(table, encoding="utf-8")
        write_records(out / "per_query.jsonl",
                      ({"config": r.config, **rec} for r in reports for rec in r.per_query_records()))
    if any(r.has_nan() for r in reports):
        print("error: a metric is NaN", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_infer(args) -> int:
    run_dir = Path(args.run)
    meta = _read_run(run_dir)
    if meta["kind"] not in ("stage1", "stage2"):
        raise DataError(f"infer needs a dense run, {run_dir} is {meta['kind']!r}")
    cfg = ExperimentConfig.load(run_dir / "config.ini")
    corpus, _, _ = _dataset(args.data or meta["data"])
    model = _load_model(run_dir, cfg, len(corpus.vocab),
                        prefix="model." if meta["kind"] == "stage2" else "")
    ids, matrix = load_embeddings(run_dir / "embeddings.tsv")
    index = DenseIndex(ids, matrix)
    with no_grad():
        q = model.encode_query(corpus.vocab.encode(args.text)).data
    for rank, (aid, score) in enumerate(index.search(q, args.k), start=1):
        print(f"{rank}\t{aid}\t{score:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sarlab", description="Statutory article retrieval experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="experiment config file (sectioned key/value)")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
        sp.add_argument("--seed", type=int, help="seed for every random choice of the command")
        if data:
            sp.add_argument("--data", help="dataset directory")

    g = sub.add_parser("generate", help="write a synthetic dataset")
    common(g, data=False)
    g.add_argument("--topics", type=int)
    g.add_argument("--articles-per-topic", type=int)
    g.add_argument("--queries", type=int, help="total queries; validation/test sizes kept")
    g.add_argument("--train", type=int)
    g.add_argument("--val", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    i = sub.add_parser("index", help="build and store a BM25 index run")
    common(i)
    i.add_argument("--k1", type=float, default=Bm25Params.k1)
    i.add_argument("--b", type=float, default=Bm25Params.b)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_index)

    t = sub.add_parser("train", help="train stage 1 (bi-encoder) or stage 2 (graph + distillation)")
    common(t)
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--flat", action="store_true", help="stage 1: single-chunk article encoder")
    t.add_argument("--from", dest="source", help="stage 2: stage-1 run directory")
    t.add_argument("--kd-mode", choices=KD_MODES)
    t.add_argument("--graph", choices=STAGE2_GRAPH_MODES)
    t.add_argument("--schedule", choices=SCHEDULES)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate run directories and compare them")
    e.add_argument("--runs", nargs="+", required=True)
    e.add_argument("--split", default="test", choices=("train", "validation", "test"))
    e.add_argument("--k", type=_ks, default=(5, 10, 20))
    e.add_argument("--data", help="evaluate against this dataset instead of each run's own")
    e.add_argument("--out", help="directory for report.jsonl, table.txt and per_query.jsonl")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("infer", help="rank articles for a free-text query")
    f.add_argument("--run", required=True)
    f.add_argument("--text", required=True)
    f.add_argument("--k", type=int, default=10)
    f.add_argument("--data")
    f.set_defaults(func=cmd_infer)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ConfigFileError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CorpusError, ArtifactError, ReportError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())

"""Command line entry point: ``coh <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .evaluation import FilterList, apply_filter, run_leakage_check, write_metrics_csv, write_per_query
from .llm import Gateway
from .pipeline import CoHConfig, ConfigError, RunStore, config_keys, config_from_pairs, load_config
from .scoring import GraphScoreTable
from .tkg import dump_dataset


def _flag(key: str) -> str:
    return "--" + key.replace(".", "-").replace("_", "-")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    for key in config_keys():
        p.add_argument(_flag(key), dest="cfg:" + key, metavar="VALUE", help=argparse.SUPPRESS)


def _config(args, base: CoHConfig | None = None) -> CoHConfig:
    """Base config (defaults or a run's snapshot), then --config, then flags."""
    cfg = base or CoHConfig()
    if args.config:
        cfg = load_config(args.config, cfg)
    pairs = []
    for item in args.set:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        pairs.append((key, value))
    for name, value in vars(args).items():
        if name.startswith("cfg:") and value is not None:
            pairs.append((name[4:], value))
    return config_from_pairs(pairs, cfg)


def _gateway(cfg: CoHConfig, data: pipeline.Dataset, log_path: Path | None) -> Gateway:
    return Gateway.from_config(cfg.backend, cfg.generation, vocab=data.vocab, kg=data.kg,
                               max_in_flight=cfg.max_in_flight, log_path=log_path)


def _queries(args, data: pipeline.Dataset):
    queries = data.queries
    if getattr(args, "filter", None):
        queries = apply_filter(queries, FilterList.read(args.filter), data.kg)
    if getattr(args, "limit", None):
        queries = queries[: args.limit]
    return queries


def cmd_prepare(args) -> int:
    cfg = _config(args)
    data = pipeline.load_workspace(args.data, cfg.time_granularity)
    stats = {
        "dataset": data.name,
        "entities": data.vocab.num_entities,
        "relations": data.vocab.num_relations,
        "train": int((data.kg.split == 0).sum() // 2),
        "valid": int((data.kg.split == 1).sum() // 2),
        "test": int((data.kg.split == 2).sum() // 2),
        "queries": len(data.queries),
        "time_origin": data.kg.time_origin,
        "input_sha256": data.input_hash,
    }
    print(json.dumps(stats, indent=2))
    if args.out:
        out = Path(args.out)
        dump_dataset(data.kg, data.vocab, out)
        with (out / "queries.jsonl").open("w", encoding="utf-8") as fh:
            for q in data.queries:
                fh.write(json.dumps(q.to_dict(), sort_keys=True) + "\n")
        (out / "stats.json").write_text(json.dumps(stats, indent=2) + "\n")
    return 0


def _run(args, cfg: CoHConfig, variant: str) -> int:
    data = pipeline.load_workspace(args.data, cfg.time_granularity)
    store = RunStore(args.out)
    store.dir.mkdir(parents=True, exist_ok=True)
    if store.transcripts_path.exists():
        store.transcripts_path.unlink()
    gateway = _gateway(cfg, data, store.transcripts_path)
    graph = GraphScoreTable.read_tsv(args.graph) if args.graph else None
    queries = _queries(args, data)
    records = pipeline.run_coh(data.kg, data.vocab, queries, cfg, gateway, data.verbalizer(cfg), graph)
    records = store.write(records, cfg, data.name, data.input_hash, variant)
    result, dump = pipeline.score_records(
        records, data.vocab.num_entities, cfg.fusion, graph,
        pipeline.seeded_permuter(cfg.seed) if cfg.shuffle_answers else None,
    )
    write_per_query(dump, store.dir / "per_query.jsonl")
    row = result.row(run_id=store.dir.name, dataset=data.name, variant=variant,
                     alpha=cfg.fusion.alpha, w=cfg.fusion.w)
    write_metrics_csv([row], store.dir / "metrics.csv")
    print(json.dumps(row))
    return 0


def cmd_run_coh(args) -> int:
    return _run(args, _config(args), "coh")


def cmd_ablate(args) -> int:
    cfg = pipeline.ablate(args.kind, _config(args))
    if args.kind != "no_is":
        return _run(args, cfg, f"coh_{args.kind}")
    # no_is only changes scoring: re-score the base run's cached records
    if not args.base_run:
        raise ConfigError("no_is re-scores an existing run; pass --base-run")
    base = RunStore(args.base_run)
    records = base.read()
    data = pipeline.load_workspace(args.data, cfg.time_granularity)
    graph = GraphScoreTable.read_tsv(args.graph) if args.graph else None
    result, dump = pipeline.score_records(records, data.vocab.num_entities, cfg.fusion, graph,
                                          pipeline.seeded_permuter(cfg.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_per_query(dump, out / "per_query.jsonl")
    row = result.row(run_id=out.name, dataset=data.name, variant="coh_no_is",
                     alpha=cfg.fusion.alpha, w=cfg.fusion.w)
    write_metrics_csv([row], out / "metrics.csv")
    print(json.dumps(row))
    return 0


def _num_entities(args, store: RunStore, cfg: CoHConfig) -> int:
    if args.num_entities:
        return args.num_entities
    if args.data:
        return pipeline.load_workspace(args.data, cfg.time_granularity).vocab.num_entities
    raise ConfigError("pass --data or --num-entities")


def cmd_fuse_eval(args) -> int:
    store = RunStore(args.run)
    records = store.read()
    cfg = _config(args, store.config())
    graph = GraphScoreTable.read_tsv(args.graph) if args.graph else None
    permuter = pipeline.seeded_permuter(cfg.seed) if cfg.shuffle_answers else None
    result, dump = pipeline.score_records(records, _num_entities(args, store, cfg), cfg.fusion, graph, permuter)
    manifest = store.manifest()
    row = result.row(run_id=store.dir.name, dataset=manifest.get("dataset", ""),
                     variant=args.variant or manifest.get("variant", ""),
                     alpha=cfg.fusion.alpha, w=cfg.fusion.w)
    write_metrics_csv([row], args.metrics or store.dir / "fused_metrics.csv")
    write_per_query(dump, args.per_query or store.dir / "fused_per_query.jsonl")
    print(json.dumps(row))
    return 0


def cmd_sweep(args) -> int:
    store = RunStore(args.run)
    records = store.read()
    cfg = _config(args, store.config())
    graph = GraphScoreTable.read_tsv(args.graph) if args.graph else None
    values = [float(v) for v in args.values.split(",")]
    manifest = store.manifest()
    rows = pipeline.sweep(
        args.param, values, records, _num_entities(args, store, cfg), cfg.fusion, graph,
        pipeline.seeded_permuter(cfg.seed) if cfg.shuffle_answers else None,
        meta={"run_id": store.dir.name, "dataset": manifest.get("dataset", ""),
              "variant": manifest.get("variant", "")},
    )
    write_metrics_csv(rows, args.out)
    print(Path(args.out).read_text(), end="")
    return 0


def cmd_leakage_check(args) -> int:
    cfg = _config(args)
    data = pipeline.load_workspace(args.data, cfg.time_granularity)
    calendar = data.calendar(cfg)
    if calendar is None:
        raise ConfigError("leakage check needs calendar dates; set calendar_start")
    gateway = _gateway(cfg, data, Path(args.log) if args.log else None)
    outcome = run_leakage_check(data.kg, data.verbalizer(cfg), gateway, calendar)
    outcome.filter.write(args.out)
    total = len(outcome.answers) + len(outcome.unchecked)
    print(json.dumps({
        "checked": len(outcome.answers),
        "unchecked": len(outcome.unchecked),
        "known": len(outcome.filter.facts),
        "known_ratio": len(outcome.filter.facts) / total if total else 0.0,
    }))
    return 0


def cmd_explain(args) -> int:
    store = RunStore(args.run)
    records = store.read()
    cfg = _config(args, store.config())
    data = pipeline.load_workspace(args.data, cfg.time_granularity)
    record = next((r for r in records if r.query.index == args.query_index), None)
    gateway = _gateway(cfg, data, None)
    text = pipeline.explain(record, data.kg, gateway, data.verbalizer(cfg))
    store.rewrite(records)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="coh", description="Chain-of-history TKG forecasting")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="load, validate and summarize a dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_prepare)

    for name, func in (("run-coh", cmd_run_coh), ("ablate", cmd_ablate)):
        p = sub.add_parser(name, help="run the prompting loop" if name == "run-coh" else "run an ablation")
        if name == "ablate":
            p.add_argument("--kind", required=True, choices=pipeline.ABLATIONS)
            p.add_argument("--base-run", help="cached run to re-score (no_is)")
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--graph", help="graph score TSV: query_index, entity_id, score")
        p.add_argument("--filter", help="leakage filter list")
        p.add_argument("--limit", type=int, help="only the first N queries")
        _add_config_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("fuse-eval", help="fuse cached answers with graph scores and evaluate")
    p.add_argument("--run", required=True)
    p.add_argument("--graph")
    p.add_argument("--data")
    p.add_argument("--num-entities", type=int)
    p.add_argument("--metrics")
    p.add_argument("--per-query")
    p.add_argument("--variant")
    _add_config_flags(p)
    p.set_defaults(func=cmd_fuse_eval)

    p = sub.add_parser("sweep", help="re-score a cached run over alpha or w values")
    p.add_argument("--run", required=True)
    p.add_argument("--param", required=True, choices=("alpha", "w"))
    p.add_argument("--values", default="0.1,0.3,0.5,0.7,0.9")
    p.add_argument("--graph")
    p.add_argument("--data")
    p.add_argument("--num-entities", type=int)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("leakage-check", help="ask the model whether it already knows each test fact")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="filter list to write")
    p.add_argument("--log", help="transcript log path")
    _add_config_flags(p)
    p.set_defaults(func=cmd_leakage_check)

    p = sub.add_parser("explain", help="ask for explanations of one query's answers")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--query-index", type=int, required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_explain)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, pipeline.MissingCacheError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

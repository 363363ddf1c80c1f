"""The k-step chain-of-history loop, the cached-record store and the re-scoring phase.

Prompting (expensive) and scoring (cheap) are separate: ``run_coh`` emits
one ``RunRecord`` per query, records are cached as JSONL, and
``score_records`` / ``sweep`` re-rank from the cache without touching the
gateway.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import hashlib
import json
import logging
import typing
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

from .evaluation import EvalResult, compute_metrics
from .history import HistoryChain, HistoryRef, extend_chains, first_order_histories
from .llm import BackendConfig, Gateway, GatewayError, GenerationParams
from .parsing import (
    EmptyAnswerError,
    EmptySelectionError,
    RankedAnswers,
    parse_id_selection,
    parse_ranked_answers,
)
from .scoring import FusionConfig, GraphScoreTable, build_llm_scores, fuse
from .tkg import SPLITS, Query, TemporalKG, Vocabulary, augment_reversed, load_dataset_dir, queries_from_test
from .verbalize import Calendar, TimeStyle, Verbalizer, load_phrases, load_templates

logger = logging.getLogger(__name__)

ABLATIONS = ("no_lr", "no_is", "anonymize")


class ConfigError(ValueError):
    pass


class MissingCacheError(FileNotFoundError):
    pass


@dataclass
class CoHConfig:
    k: int = 2
    n: int = 30
    first_order_limit: int = 100
    per_chain_cap: int = 3
    time_style: str = "ordinal_day"
    anonymize: bool = False
    # "llm" or "recency"; recency is the no_lr ablation
    step1_selection: str = "llm"
    # seeded permutation of answer positions before scoring (no_is ablation)
    shuffle_answers: bool = False
    seed: int = 0
    max_in_flight: int = 4
    history_splits: tuple[str, ...] = SPLITS
    fuzzy_match: bool = False
    templates: str | None = None
    time_granularity: int = 1
    calendar_start: str | None = None
    backend: BackendConfig = field(default_factory=BackendConfig)
    generation: GenerationParams = field(default_factory=GenerationParams)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def __post_init__(self) -> None:
        if self.k < 2:
            raise ConfigError("k must be >= 2")
        if self.n < 1:
            raise ConfigError("n must be >= 1")
        if self.first_order_limit < self.n:
            raise ConfigError("first_order_limit must be >= n")
        if self.per_chain_cap < 1:
            raise ConfigError("per_chain_cap must be >= 1")
        if self.step1_selection not in ("llm", "recency"):
            raise ConfigError("step1_selection must be 'llm' or 'recency'")
        if not set(self.history_splits) <= set(SPLITS):
            raise ConfigError(f"history_splits must be drawn from {SPLITS}")
        TimeStyle(self.time_style)


_NESTED = {"backend": BackendConfig, "generation": GenerationParams, "fusion": FusionConfig}


def _coerce(raw: str, hint) -> object:
    args = typing.get_args(hint)
    if type(None) in args:
        if raw.lower() in ("", "none", "null"):
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        if raw.lower() in ("true", "yes", "1", "on"):
            return True
        if raw.lower() in ("false", "no", "0", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if typing.get_origin(hint) is tuple:
        return tuple(x.strip() for x in raw.split(",") if x.strip())
    return raw


def _format(value: object) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    return str(value)


def config_keys() -> list[str]:
    keys = [f.name for f in dataclasses.fields(CoHConfig) if f.name not in _NESTED]
    for prefix, cls in _NESTED.items():
        keys += [f"{prefix}.{f.name}" for f in dataclasses.fields(cls)]
    return keys


def config_from_pairs(pairs: Iterable[tuple[str, str]], base: CoHConfig | None = None) -> CoHConfig:
    """Apply ``key = value`` overrides; unknown keys are rejected."""
    base = base or CoHConfig()
    top: dict[str, object] = {}
    nested: dict[str, dict[str, object]] = {p: {} for p in _NESTED}
    top_hints = typing.get_type_hints(CoHConfig)
    for key, raw in pairs:
        key, raw = key.strip(), raw.strip()
        prefix, dot, name = key.partition(".")
        try:
            if dot and prefix in _NESTED:
                hints = typing.get_type_hints(_NESTED[prefix])
                if name not in hints:
                    raise ConfigError(f"unknown config key {key!r}")
                nested[prefix][name] = _coerce(raw, hints[name])
            elif not dot and key in top_hints and key not in _NESTED:
                top[key] = _coerce(raw, top_hints[key])
            else:
                raise ConfigError(f"unknown config key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"bad value for {key!r}: {exc}") from None
    try:
        for prefix, values in nested.items():
            if values:
                current = dataclasses.asdict(getattr(base, prefix))
                if prefix == "backend" and values.get("kind", current["kind"]) != current["kind"]:
                    current = {}
                top[prefix] = _NESTED[prefix](**{**current, **values})
        return dataclasses.replace(base, **top)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str, base: CoHConfig | None = None) -> CoHConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        pairs.append((key, value))
    return config_from_pairs(pairs, base)


def load_config(path: str | Path, base: CoHConfig | None = None) -> CoHConfig:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), base)


def config_to_text(config: CoHConfig) -> str:
    lines = []
    for f in dataclasses.fields(config):
        if f.name in _NESTED:
            continue
        lines.append(f"{f.name} = {_format(getattr(config, f.name))}")
    for prefix in _NESTED:
        sub = getattr(config, prefix)
        for f in dataclasses.fields(sub):
            value = getattr(sub, f.name)
            if prefix == "backend" and value is None:
                continue
            lines.append(f"{prefix}.{f.name} = {_format(value)}")
    return "\n".join(lines) + "\n"


def ablate(kind: str, config: CoHConfig) -> CoHConfig:
    """Derived configuration for one ablation."""
    if kind == "no_lr":
        return dataclasses.replace(config, step1_selection="recency")
    if kind == "no_is":
        return dataclasses.replace(config, shuffle_answers=True)
    if kind == "anonymize":
        return dataclasses.replace(config, anonymize=True)
    raise ConfigError(f"unknown ablation {kind!r}; expected one of {ABLATIONS}")


@dataclass
class StepTrace:
    step: int
    offered: list[list[int]]
    selected: list[int]
    fallback: str | None = None
    dropped: list[list[str]] = field(default_factory=list)


@dataclass
class RunRecord:
    query: Query
    steps: list[StepTrace] = field(default_factory=list)
    final_chains: list[list[int]] = field(default_factory=list)
    answers: RankedAnswers = field(default_factory=RankedAnswers)
    answer_error: str | None = None
    rank: int | None = None
    explanation: str | None = None

    def to_dict(self) -> dict:
        return {
            "query": self.query.to_dict(),
            "steps": [dataclasses.asdict(s) for s in self.steps],
            "final_chains": self.final_chains,
            "answers": self.answers.to_dict(),
            "answer_error": self.answer_error,
            "rank": self.rank,
            "explanation": self.explanation,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            Query.from_dict(d["query"]),
            [StepTrace(**s) for s in d.get("steps", [])],
            d.get("final_chains", []),
            RankedAnswers.from_dict(d.get("answers", {})),
            d.get("answer_error"),
            d.get("rank"),
            d.get("explanation"),
        )


@dataclass
class Dataset:
    kg: TemporalKG
    vocab: Vocabulary
    queries: list[Query]
    phrases: dict[int, str] = field(default_factory=dict)
    leakage_phrases: dict[int, str] = field(default_factory=dict)
    date_origin: dt.date | None = None
    name: str = ""
    input_hash: str = ""

    def verbalizer(self, config: CoHConfig) -> Verbalizer:
        return Verbalizer(
            self.kg,
            self.vocab,
            TimeStyle(config.time_style, self.kg.time_origin),
            config.anonymize,
            self.phrases,
            self.leakage_phrases,
            load_templates(config.templates),
        )

    def calendar(self, config: CoHConfig) -> Calendar | None:
        if config.calendar_start:
            return Calendar(dt.date.fromisoformat(config.calendar_start), self.kg.time_origin)
        if self.date_origin is not None:
            return Calendar(self.date_origin, 0)
        return None


def hash_files(paths: Iterable[Path]) -> str:
    h = hashlib.sha256()
    for p in sorted(paths):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def load_workspace(directory: str | Path, time_granularity: int = 1) -> Dataset:
    """Load a dataset directory, add reversed relations and derive test queries.

    Optional overlays in the directory: ``reversed_relations.txt``,
    ``relation_phrases.txt`` and ``leakage_phrases.txt``.
    """
    d = Path(directory)
    kg, vocab, report = load_dataset_dir(d, time_granularity)
    kg, vocab = augment_reversed(kg, vocab)
    phrases = load_phrases(d / "relation_phrases.txt" if (d / "relation_phrases.txt").exists() else None)
    leak = load_phrases(d / "leakage_phrases.txt" if (d / "leakage_phrases.txt").exists() else None)
    files = [p for p in d.iterdir() if p.is_file() and p.suffix == ".txt"]
    return Dataset(kg, vocab, queries_from_test(kg), phrases, leak, report.date_origin, d.name, hash_files(files))


class CoHRunner:
    """Runs the chain-of-history loop for one dataset and configuration."""

    def __init__(self, kg: TemporalKG, vocab: Vocabulary, config: CoHConfig, gateway: Gateway,
                 verbalizer: Verbalizer) -> None:
        self.kg = kg
        self.vocab = vocab
        self.config = config
        self.gateway = gateway
        self.verbalizer = verbalizer

    def _select(self, chains, query, step) -> StepTrace:
        cfg = self.config
        items = chains
        if step == 1:
            items = [HistoryRef(c.links[0], i) for i, c in enumerate(chains)]
        bundle = self.verbalizer.select_prompt(items, query, cfg.n, step)
        recency = list(range(min(cfg.n, len(chains))))
        offered = [list(c.links) for c in chains]
        if step == 1 and cfg.step1_selection == "recency":
            return StepTrace(step, offered, recency, "recency selection (no_lr)")
        try:
            reply, _ = self.gateway.complete(bundle)
            sel = parse_id_selection(reply, bundle, cfg.n)
        except (GatewayError, EmptySelectionError) as exc:
            logger.info("query %d step %d: falling back to recency (%s)", query.index, step, exc)
            return StepTrace(step, offered, recency, f"recency fallback: {exc}")
        return StepTrace(step, offered, sel.local_ids, None, [list(d) for d in sel.dropped])

    def run_query(self, query: Query) -> RunRecord:
        cfg = self.config
        refs = first_order_histories(self.kg, query, cfg.first_order_limit, cfg.history_splits)
        record = RunRecord(query)
        if not refs:
            record.answer_error = "no first-order history"
            return record
        chains = [HistoryChain((r.quad_index,)) for r in refs]
        for step in range(1, cfg.k):
            trace = self._select(chains, query, step)
            record.steps.append(trace)
            selected = [chains[i] for i in trace.selected]
            chains = extend_chains(self.kg, selected, cfg.per_chain_cap, cfg.history_splits)
        record.final_chains = [list(c.links) for c in chains]
        bundle = self.verbalizer.answer_prompt(chains, query)
        try:
            reply, _ = self.gateway.complete(bundle)
            record.answers = parse_ranked_answers(reply, self.vocab, cfg.anonymize, cfg.fuzzy_match)
        except (GatewayError, EmptyAnswerError) as exc:
            record.answer_error = str(exc)
        for surface, reason in record.answers.dropped:
            logger.debug("query %d: dropped answer %r (%s)", query.index, surface, reason)
        return record

    def run(self, queries: Sequence[Query], graph: GraphScoreTable | None = None) -> Iterator[RunRecord]:
        """Records in query order; queries run concurrently up to the in-flight limit."""

        def one(query: Query) -> RunRecord:
            try:
                rec = self.run_query(query)
            except Exception as exc:  # per-query failure must not stop the run
                logger.exception("query %d failed", query.index)
                rec = RunRecord(query, answer_error=f"{type(exc).__name__}: {exc}")
            rec.rank = rank_record(rec, self.vocab.num_entities, self.config, graph)
            return rec

        workers = max(1, self.config.max_in_flight)
        if workers == 1:
            yield from map(one, queries)
            return
        with ThreadPoolExecutor(max_workers=workers) as pool:
            yield from pool.map(one, queries)


def run_coh(kg: TemporalKG, vocab: Vocabulary, queries: Sequence[Query], config: CoHConfig,
            gateway: Gateway, verbalizer: Verbalizer, graph: GraphScoreTable | None = None) -> Iterator[RunRecord]:
    return CoHRunner(kg, vocab, config, gateway, verbalizer).run(queries, graph)


Permuter = Callable[[int, int], Sequence[int]]


def seeded_permuter(seed: int) -> Permuter:
    def permute(query_index: int, length: int) -> Sequence[int]:
        return np.random.default_rng([seed, query_index]).permutation(length).tolist()

    return permute


def permute_answers(answers: RankedAnswers, perm: Sequence[int]) -> RankedAnswers:
    """Entry i moves to position perm[i] + 1."""
    moved = [dataclasses.replace(e, position=int(perm[i]) + 1) for i, e in enumerate(answers.entries)]
    moved.sort(key=lambda e: e.position)
    return RankedAnswers(moved, answers.dropped)


def _llm_scores(record: RunRecord, num_entities: int, fusion: FusionConfig,
                permuter: Permuter | None) -> dict[int, float]:
    answers = record.answers
    if permuter is not None and answers.entries:
        answers = permute_answers(answers, permuter(record.query.index, len(answers.entries)))
    return build_llm_scores(answers, fusion.alpha, num_entities)


def rank_record(record: RunRecord, num_entities: int, config: CoHConfig,
                graph: GraphScoreTable | None = None, fusion: FusionConfig | None = None,
                permuter: Permuter | None = None) -> int:
    fusion = fusion or config.fusion
    if permuter is None and config.shuffle_answers:
        permuter = seeded_permuter(config.seed)
    llm = _llm_scores(record, num_entities, fusion, permuter)
    ranking = fuse(llm, graph.row(record.query.index) if graph else None, fusion, num_entities)
    return ranking.rank_of(record.query.ground_truth)


def score_records(
    records: Sequence[RunRecord],
    num_entities: int,
    fusion: FusionConfig,
    graph: GraphScoreTable | None = None,
    permuter: Permuter | None = None,
    top_k: int = 10,
) -> tuple[EvalResult, list[dict]]:
    """Re-rank cached records under a fusion setting; no LLM calls."""
    ranks, ids, dump = [], [], []
    for rec in records:
        llm = _llm_scores(rec, num_entities, fusion, permuter)
        ranking = fuse(llm, graph.row(rec.query.index) if graph else None, fusion, num_entities)
        rank = ranking.rank_of(rec.query.ground_truth)
        ranks.append(rank)
        ids.append(rec.query.index)
        dump.append({"query": rec.query.to_dict(), "rank": rank, "top": ranking.top(top_k)})
    return compute_metrics(ranks, ids), dump


def sweep(
    param: str,
    values: Sequence[float],
    records: Sequence[RunRecord] | None,
    num_entities: int,
    base: FusionConfig,
    graph: GraphScoreTable | None = None,
    permuter: Permuter | None = None,
    meta: dict | None = None,
) -> list[dict]:
    """One metrics row per value of ``alpha`` or ``w``, re-scored from cached records."""
    if param not in ("alpha", "w"):
        raise ConfigError(f"can only sweep alpha or w, not {param!r}")
    if records is None:
        raise MissingCacheError("no cached run records; run run-coh first")
    rows = []
    for value in values:
        fusion = dataclasses.replace(base, **{param: value})
        result, _ = score_records(records, num_entities, fusion, graph, permuter)
        rows.append(result.row(alpha=fusion.alpha, w=fusion.w, **(meta or {})))
    return rows


def explain(record: RunRecord | None, kg: TemporalKG, gateway: Gateway, verbalizer: Verbalizer) -> str:
    """Ask for per-answer explanations over the record's final chains; stored on the record."""
    if record is None:
        raise MissingCacheError("no completed trace for this query; run run-coh first")
    chains = [HistoryChain(tuple(links)) for links in record.final_chains]
    bundle = verbalizer.explanation_prompt(chains, record.query)
    reply, _ = gateway.complete(bundle)
    record.explanation = reply
    return reply


class RunStore:
    """Directory holding ``records.jsonl``, ``manifest.json`` and ``transcripts.jsonl``."""

    def __init__(self, directory: str | Path) -> None:
        self.dir = Path(directory)

    @property
    def records_path(self) -> Path:
        return self.dir / "records.jsonl"

    @property
    def manifest_path(self) -> Path:
        return self.dir / "manifest.json"

    @property
    def transcripts_path(self) -> Path:
        return self.dir / "transcripts.jsonl"

    def write(self, records: Iterable[RunRecord], config: CoHConfig, dataset: str = "",
              input_hash: str = "", variant: str = "coh") -> list[RunRecord]:
        self.dir.mkdir(parents=True, exist_ok=True)
        out = []
        with self.records_path.open("w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
                out.append(rec)
        manifest = {
            "dataset": dataset,
            "variant": variant,
            "config": config_to_text(config),
            "input_sha256": input_hash,
            "n_records": len(out),
            "records_sha256": hashlib.sha256(self.records_path.read_bytes()).hexdigest(),
        }
        self.manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return out

    def manifest(self) -> dict:
        if not self.manifest_path.exists():
            raise MissingCacheError(f"{self.manifest_path} not found; run run-coh first")
        return json.loads(self.manifest_path.read_text(encoding="utf-8"))

    def config(self) -> CoHConfig:
        return parse_config_text(self.manifest()["config"])

    def read(self) -> list[RunRecord]:
        if not self.records_path.exists():
            raise MissingCacheError(f"{self.records_path} not found; run run-coh first")
        with self.records_path.open(encoding="utf-8") as fh:
            return [RunRecord.from_dict(json.loads(line)) for line in fh if line.strip()]

    def rewrite(self, records: Sequence[RunRecord]) -> None:
        with self.records_path.open("w", encoding="utf-8") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")


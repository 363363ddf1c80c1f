"""Raw-setting MRR / Hits@k, leakage filtering and report writers."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .llm import Gateway, GatewayError
from .scoring import FusedRanking
from .tkg import Quadruple, Query, TemporalKG
from .verbalize import Calendar, Verbalizer

logger = logging.getLogger(__name__)

HITS_AT = (1, 3, 10)
METRIC_COLUMNS = ("run_id", "dataset", "variant", "alpha", "w", "mrr", "hits1", "hits3", "hits10", "n_queries")


@dataclass
class EvalResult:
    mrr: float
    hits: dict[int, float]
    per_query_ranks: list[tuple[int, int]]
    query_count: int

    def row(self, **meta) -> dict:
        out = {k: meta.get(k, "") for k in ("run_id", "dataset", "variant", "alpha", "w")}
        out.update(
            mrr=self.mrr,
            hits1=self.hits[1],
            hits3=self.hits[3],
            hits10=self.hits[10],
            n_queries=self.query_count,
        )
        return out


def rank_of_truth(ranking: FusedRanking, query: Query) -> int:
    return ranking.rank_of(query.ground_truth)


def compute_metrics(ranks: Sequence[int], query_ids: Sequence[int] | None = None) -> EvalResult:
    if not len(ranks):
        raise ValueError("no ranks to evaluate")
    if query_ids is None:
        query_ids = range(len(ranks))
    n = len(ranks)
    mrr = sum(1.0 / r for r in ranks) / n
    hits = {k: sum(1 for r in ranks if r <= k) / n for k in HITS_AT}
    return EvalResult(mrr, hits, list(zip(query_ids, ranks)), n)


FactId = tuple[int, int, int, int]


def fact_id(q: Quadruple) -> str:
    return f"{q.subject}\t{q.relation}\t{q.object}\t{q.time}"


@dataclass
class FilterList:
    facts: set[FactId] = field(default_factory=set)

    def write(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for f in sorted(self.facts):
                fh.write(fact_id(Quadruple(*f)) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "FilterList":
        facts = set()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    facts.add(tuple(int(x) for x in line.split()[:4]))
        return cls(facts)


@dataclass
class LeakageOutcome:
    filter: FilterList
    answers: dict[FactId, str]
    unchecked: list[FactId]


def classify_reply(reply: str) -> str:
    words = reply.strip().split()
    first = words[0].strip(".,!:;\"'").lower() if words else ""
    if first in ("yes", "no"):
        return first
    logger.warning("leakage reply %r is neither yes nor no; counting it as no", reply[:60])
    return "no"


def run_leakage_check(
    kg: TemporalKG,
    verbalizer: Verbalizer,
    gateway: Gateway,
    calendar: Calendar,
) -> LeakageOutcome:
    """Ask whether each original test fact is already known; "yes" facts are filtered."""
    tests = [q for q in kg.quads("test") if q.relation < kg.num_relations]
    bundles = [verbalizer.leakage_prompt(q, calendar.date(q.time)) for q in tests]
    results = gateway.complete_batch(bundles)
    known, answers, unchecked = set(), {}, []
    for quad, result in zip(tests, results):
        key = tuple(quad)
        if isinstance(result, GatewayError):
            logger.warning("leakage check failed for %s: %s", key, result)
            unchecked.append(key)
            continue
        reply, _ = result
        answers[key] = classify_reply(reply)
        if answers[key] == "yes":
            known.add(key)
    return LeakageOutcome(FilterList(known), answers, unchecked)


def apply_filter(queries: Iterable[Query], filt: FilterList, kg: TemporalKG | None = None) -> list[Query]:
    """Drop every query (forward and reversed) derived from a filtered fact."""
    if kg is not None and filt.facts:
        test = {tuple(q) for q in kg.quads("test")}
        stray = filt.facts - test
        if stray:
            raise ValueError(f"filter holds {len(stray)} facts outside the test split, e.g. {min(stray)}")
    return [q for q in queries if q.fact is None or tuple(q.fact) not in filt.facts]


def write_metrics_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k, "")) for k in METRIC_COLUMNS})


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def write_per_query(dump: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in dump:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

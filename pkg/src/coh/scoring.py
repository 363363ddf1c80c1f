"""Answer-position scores, graph-score normalization and linear fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .parsing import RankedAnswers

NORMALIZATIONS = ("none", "minmax", "softmax")


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.3
    w: float = 0.35
    graph_normalization: str = "minmax"

    def __post_init__(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= self.w <= 1.0:
            raise ValueError("w must lie in [0, 1]")
        if self.graph_normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown graph normalization {self.graph_normalization!r}")


def position_to_score(position: int, alpha: float) -> float:
    """1 / (1 + exp(alpha * position))."""
    if position < 1:
        raise ValueError("positions are 1-based")
    x = alpha * position
    if x > 0:
        e = math.exp(-x)
        return e / (1.0 + e)
    return 1.0 / (1.0 + math.exp(x))


def build_llm_scores(answers: RankedAnswers, alpha: float, num_entities: int) -> dict[int, float]:
    """Sparse map entity -> score; entities not listed score 0 implicitly."""
    scores: dict[int, float] = {}
    for entry in answers.entries:
        if entry.entity is None:
            continue
        if not 0 <= entry.entity < num_entities:
            raise FusionError(f"answer entity {entry.entity} outside the entity space")
        scores[entry.entity] = position_to_score(entry.position, alpha)
    return scores


def dense(scores: Mapping[int, float], num_entities: int) -> np.ndarray:
    vec = np.zeros(num_entities, dtype=np.float64)
    for eid, value in scores.items():
        if not 0 <= eid < num_entities:
            raise FusionError(f"entity {eid} outside the entity space of size {num_entities}")
        vec[eid] = value
    return vec


def normalize_scores(scores: Mapping[int, float], mode: str) -> dict[int, float]:
    """Normalize one query's (possibly sparse) graph scores over the entries present."""
    if mode == "none" or not scores:
        return dict(scores)
    keys = list(scores)
    values = np.array([scores[k] for k in keys], dtype=np.float64)
    if mode == "minmax":
        lo, hi = values.min(), values.max()
        out = np.full_like(values, 0.5) if hi == lo else (values - lo) / (hi - lo)
    elif mode == "softmax":
        e = np.exp(values - values.max())
        out = e / e.sum()
    else:
        raise ValueError(f"unknown graph normalization {mode!r}")
    return dict(zip(keys, out.tolist()))


@dataclass
class GraphScoreTable:
    """Per-query graph-model scores keyed by query index; sparse rows allowed."""

    scores: dict[int, dict[int, float]] = field(default_factory=dict)

    def row(self, query_index: int) -> dict[int, float]:
        return self.scores.get(query_index, {})

    @classmethod
    def read_tsv(cls, path: str | Path) -> "GraphScoreTable":
        table: dict[int, dict[int, float]] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise FusionError(f"{path}:{lineno}: expected query_index<TAB>entity_id<TAB>score")
                q, e, s = int(parts[0]), int(parts[1]), float(parts[2])
                row = table.setdefault(q, {})
                if e in row:
                    raise FusionError(f"{path}:{lineno}: second score for query {q}, entity {e}")
                row[e] = s
        return cls(table)

    def write_tsv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for q in sorted(self.scores):
                for e in sorted(self.scores[q]):
                    fh.write(f"{q}\t{e}\t{self.scores[q][e]!r}\n")


def normalize_graph(table: GraphScoreTable, mode: str) -> GraphScoreTable:
    return GraphScoreTable({q: normalize_scores(row, mode) for q, row in table.scores.items()})


def total_order(scores: np.ndarray) -> np.ndarray:
    """Entity ids by score descending, id ascending on ties."""
    ids = np.arange(len(scores))
    return np.lexsort((ids, -scores))


@dataclass
class FusedRanking:
    scores: np.ndarray

    @property
    def order(self) -> np.ndarray:
        return total_order(self.scores)

    def top(self, k: int = 10) -> list[tuple[int, float]]:
        return [(int(e), float(self.scores[e])) for e in self.order[:k]]

    def rank_of(self, entity: int) -> int:
        """1-based rank of ``entity`` under the (score desc, id asc) order."""
        s = self.scores[entity]
        ahead = np.count_nonzero(self.scores > s) + np.count_nonzero(self.scores[:entity] == s)
        return int(ahead) + 1


def fuse(
    llm: Mapping[int, float],
    graph: Mapping[int, float] | None,
    config: FusionConfig,
    num_entities: int,
) -> FusedRanking:
    """w * graph + (1 - w) * llm over all entities; graph scores normalized first."""
    llm_vec = dense(llm, num_entities)
    graph_vec = dense(normalize_scores(graph or {}, config.graph_normalization), num_entities)
    return FusedRanking(config.w * graph_vec + (1.0 - config.w) * llm_vec)

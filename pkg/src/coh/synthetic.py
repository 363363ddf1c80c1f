"""Seeded toy temporal graphs and graph-score tables for tests and desk-scale runs."""

from __future__ import annotations

import numpy as np

from .scoring import GraphScoreTable
from .tkg import SPLIT_CODE, TemporalKG, Vocabulary


def toy_vocab(num_entities: int, num_relations: int) -> Vocabulary:
    return Vocabulary(
        {i: f"Entity_{i}" for i in range(num_entities)},
        {i: f"Relation_{i}" for i in range(num_relations)},
    )


def random_tkg(
    rng: np.random.Generator,
    num_entities: int = 30,
    num_relations: int = 5,
    num_facts: int = 150,
    num_ticks: int = 40,
    test_ticks: int = 5,
) -> tuple[TemporalKG, Vocabulary]:
    """Unique random facts; the last ``test_ticks`` ticks form the test split.

    Tick 0 is always present so day labels start at "1st day".
    """
    seen: set[tuple[int, int, int, int]] = set()
    facts = []
    while len(facts) < num_facts:
        t = 0 if not facts else int(rng.integers(0, num_ticks))
        q = (int(rng.integers(num_entities)), int(rng.integers(num_relations)), int(rng.integers(num_entities)), t)
        if q not in seen:
            seen.add(q)
            facts.append(q)
    cut = num_ticks - test_ticks
    valid_cut = cut - max(1, test_ticks // 2)
    tags = [
        SPLIT_CODE["test"] if t >= cut else SPLIT_CODE["valid"] if t >= valid_cut else SPLIT_CODE["train"]
        for *_, t in facts
    ]
    kg = TemporalKG(np.array(facts, dtype=np.int64), np.array(tags), num_relations)
    return kg, toy_vocab(num_entities, num_relations)


def random_graph_table(
    rng: np.random.Generator,
    num_queries: int,
    num_entities: int,
    top_k: int | None = None,
) -> GraphScoreTable:
    """Random scores per query; ``top_k`` keeps only that many entries per row."""
    table = {}
    for q in range(num_queries):
        scores = rng.normal(size=num_entities)
        keep = np.arange(num_entities) if top_k is None else np.argsort(-scores)[:top_k]
        table[q] = {int(e): float(scores[e]) for e in keep}
    return GraphScoreTable(table)

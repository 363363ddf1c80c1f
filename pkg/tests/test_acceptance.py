"""The eight acceptance checks, each timed and reported as one PASS/FAIL line."""

import contextlib
import dataclasses
import datetime as dt
import math
import time

import numpy as np
import pytest

import oracles
from conftest import NIGERIA_STEP1_IDS
from coh.evaluation import compute_metrics, write_metrics_csv
from coh.history import HistoryChain, extend_chains, first_order_histories, is_monotone
from coh.llm import BackendConfig, Gateway
from coh.parsing import AnswerEntry, RankedAnswers
from coh.pipeline import (
    CoHConfig,
    Dataset,
    RunRecord,
    ablate,
    run_coh,
    score_records,
    seeded_permuter,
    sweep,
)
from coh.scoring import FusionConfig, GraphScoreTable, fuse, position_to_score, total_order
from coh.synthetic import random_graph_table, random_tkg
from coh.tkg import Quadruple, Query, Vocabulary, augment_reversed, normalize_surface, queries_from_test
from coh.verbalize import Calendar, Verbalizer, format_time


@contextlib.contextmanager
def criterion(capsys, number, title, budget):
    start = time.perf_counter()
    verdict, detail = "FAIL", ""
    try:
        yield
        elapsed = time.perf_counter() - start
        verdict = "PASS" if elapsed < budget else "FAIL"
        detail = f"{elapsed:.2f}s (budget {budget:g}s)"
        assert elapsed < budget, f"criterion {number} took {elapsed:.2f}s, budget {budget}s"
    except BaseException as exc:
        detail = detail or f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        raise
    finally:
        with capsys.disabled():
            print(f"\n[{verdict}] criterion {number}: {title} -- {detail}")


def direct_score(position, alpha):
    return 1.0 / (1.0 + math.exp(alpha * position))


# 1 / (1 + exp(0.3 p)) at 50 digits, frozen
EQ1_FIXTURE = {1: 0.4255574831883410128479287, 2: 0.3543436937742045470908894}


def test_c1_position_score(capsys):
    with criterion(capsys, 1, "position score fixture and monotone decrease", 1.0):
        for pos, expected in EQ1_FIXTURE.items():
            got = position_to_score(pos, 0.3)
            assert abs(got - expected) <= 1e-12
            assert abs(got - direct_score(pos, 0.3)) <= 1e-12
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            pos = int(rng.integers(1, 200))
            alpha = float(rng.uniform(0.01, 3.0))
            a, b = position_to_score(pos, alpha), position_to_score(pos + 1, alpha)
            assert 0.0 <= b < a < 0.5


def random_fusion_case(seed=11, num_queries=500, num_entities=200):
    """Random answer lists (LLM side) and dense graph rows for a toy entity space."""
    rng = np.random.default_rng(seed)
    records, graph = [], {}
    for qi in range(num_queries):
        length = int(rng.integers(1, 31))
        listed = rng.choice(num_entities, size=length, replace=False).tolist()
        truth = int(rng.integers(num_entities))
        entries = [AnswerEntry(f"Entity_{e}", int(e), i + 1, i + 1) for i, e in enumerate(listed)]
        query = Query(int(rng.integers(num_entities)), 0, truth, 100, qi)
        records.append(RunRecord(query, answers=RankedAnswers(entries)))
        # coarse values so ties occur and the tie-break is exercised
        graph[qi] = {e: float(v) for e, v in enumerate(rng.integers(0, 25, size=num_entities) / 4.0)}
    return records, GraphScoreTable(graph)


def endpoint_orders(record, graph_row, num_entities, alpha=0.3):
    """Independent argsorts of the LLM vector and the min-max normalized graph vector."""
    llm = [0.0] * num_entities
    for e in record.answers.entries:
        llm[e.entity] = direct_score(e.position, alpha)
    lo, hi = min(graph_row.values()), max(graph_row.values())
    g = [0.0] * num_entities
    for e, v in graph_row.items():
        g[e] = 0.5 if hi == lo else (v - lo) / (hi - lo)
    return oracles.argsort_desc(llm), oracles.argsort_desc(g)


def test_c2_fusion_endpoints(capsys):
    with criterion(capsys, 2, "fusion endpoints w=0 and w=1 reproduce the pure orders", 5.0):
        n = 200
        records, graph = random_fusion_case(num_entities=n)
        for rec in records:
            row = graph.row(rec.query.index)
            llm = {e.entity: position_to_score(e.position, 0.3) for e in rec.answers.entries}
            llm_order, graph_order = endpoint_orders(rec, row, n)
            assert total_order(fuse(llm, row, FusionConfig(w=0.0), n).scores).tolist() == llm_order
            assert total_order(fuse(llm, row, FusionConfig(w=1.0), n).scores).tolist() == graph_order


def test_c3_chain_oracle(capsys):
    with criterion(capsys, 3, "history enumeration matches brute force on 100 random graphs", 30.0):
        rng = np.random.default_rng(77)
        for _ in range(100):
            ents = int(rng.integers(5, 51))
            kg, vocab = random_tkg(rng, num_entities=ents, num_relations=int(rng.integers(1, 6)),
                                   num_facts=int(rng.integers(20, 101)), num_ticks=int(rng.integers(5, 30)),
                                   test_ticks=2)
            kg, _ = augment_reversed(kg, vocab)  # <= 200 facts after mirroring
            assert len(kg) <= 200
            facts = kg.facts.tolist()
            for query in queries_from_test(kg):
                for limit in (1, 5, 100):
                    refs = first_order_histories(kg, query, limit)
                    expected_first = oracles.first_order(facts, query.subject, query.time, limit)
                    assert [r.quad_index for r in refs] == expected_first
                for cap in (1, 2, 3):
                    chains = [HistoryChain((i,)) for i in expected_first]
                    expected = [((i,), True) for i in expected_first]
                    for _ in range(2):
                        chains = extend_chains(kg, chains, cap)
                        expected = oracles.extend(facts, expected, cap)
                        assert [(c.links, c.extended) for c in chains] == expected
                        assert all(is_monotone(kg, c, query) for c in chains)


def oracle_dataset():
    kg, vocab = random_tkg(np.random.default_rng(5), num_entities=200, num_relations=8, num_facts=4000,
                           num_ticks=50, test_ticks=13)
    kg, vocab = augment_reversed(kg, vocab)
    queries = queries_from_test(kg)[:2000]
    return Dataset(kg, vocab, queries)


def run_oracle(data, p, answer_count=1, seed=0):
    cfg = CoHConfig(n=10, first_order_limit=20, max_in_flight=1,
                    backend=BackendConfig.oracle(p, seed=seed, answer_count=answer_count),
                    fusion=FusionConfig(w=0.0))
    gw = Gateway.from_config(cfg.backend, vocab=data.vocab, max_in_flight=1)
    return cfg, list(run_coh(data.kg, data.vocab, data.queries, cfg, gw, data.verbalizer(cfg)))


def test_c4_metric_oracle(capsys):
    with criterion(capsys, 4, "oracle p=0.7 Hits@1 within 4 sigma; p=1 gives MRR 1", 20.0):
        data = oracle_dataset()
        assert len(data.queries) == 2000
        cfg, records = run_oracle(data, 0.7)
        assert all(not r.answer_error for r in records), "every query needs history for this check"
        result, _ = score_records(records, data.vocab.num_entities, cfg.fusion)
        assert result.query_count == 2000
        assert abs(result.hits[1] - 0.7) <= 4 * math.sqrt(0.21 / 2000)
        cfg, records = run_oracle(data, 1.0)
        assert score_records(records, data.vocab.num_entities, cfg.fusion)[0].mrr == 1.0


def test_c5_worked_example_replay(capsys, nigeria, replay_config):
    with criterion(capsys, 5, "worked-example replay: step-1 ids verbatim, truth at position and rank 3", 1.0):
        gw = Gateway.from_config(replay_config.backend, max_in_flight=1)
        fwd = next(run_coh(nigeria.kg, nigeria.vocab, nigeria.queries[:1], replay_config, gw,
                           nigeria.verbalizer(replay_config)))
        assert fwd.steps[0].selected == NIGERIA_STEP1_IDS and fwd.steps[0].fallback is None
        truth = nigeria.vocab.surface_index[normalize_surface("Member_of_the_Judiciary_(Nigeria)")]
        assert fwd.query.ground_truth == truth
        assert [e.position for e in fwd.answers.entries if e.entity == truth] == [3]
        assert replay_config.fusion.alpha == 0.3 and replay_config.fusion.w == 0.0
        assert fwd.rank == 3


def test_c6_shuffle_ablation(capsys):
    with criterion(capsys, 6, "no_is: identity permutation bit-identical, seeded shuffle lowers MRR", 10.0):
        data = oracle_dataset()
        data = dataclasses.replace(data, queries=data.queries[:500])
        cfg, records = run_oracle(data, 1.0, answer_count=5)
        n = data.vocab.num_entities
        base, base_dump = score_records(records, n, cfg.fusion)
        identity, identity_dump = score_records(records, n, cfg.fusion, permuter=lambda q, k: list(range(k)))
        assert (base.mrr, base.hits, base.per_query_ranks) == (identity.mrr, identity.hits, identity.per_query_ranks)
        assert base_dump == identity_dump
        no_is = ablate("no_is", cfg)
        assert no_is.shuffle_answers
        shuffled, _ = score_records(records, n, no_is.fusion, permuter=seeded_permuter(no_is.seed))
        assert base.mrr == 1.0
        assert shuffled.mrr < base.mrr


def test_c7_sweep(capsys, tmp_path):
    with criterion(capsys, 7, "alpha sweep deterministic with zero gateway calls; w endpoints agree", 10.0):
        # cached records produced through a counted gateway
        data = oracle_dataset()
        data = dataclasses.replace(data, queries=data.queries[:300])
        cfg = CoHConfig(n=10, first_order_limit=20, max_in_flight=1,
                        backend=BackendConfig.oracle(0.7, seed=3, answer_count=8))
        gw = Gateway.from_config(cfg.backend, vocab=data.vocab, max_in_flight=1)
        cached = list(run_coh(data.kg, data.vocab, data.queries, cfg, gw, data.verbalizer(cfg)))
        calls_after_run = gw.calls
        assert calls_after_run > 0
        toy_graph = random_graph_table(np.random.default_rng(8), len(data.queries), data.vocab.num_entities)
        paths = [tmp_path / "a.csv", tmp_path / "b.csv"]
        for path in paths:
            rows = sweep("alpha", [0.1, 0.3, 0.5, 0.7, 0.9], cached, data.vocab.num_entities,
                         FusionConfig(w=0.35), toy_graph, meta={"run_id": "toy", "dataset": "toy", "variant": "coh"})
            assert [r["alpha"] for r in rows] == [0.1, 0.3, 0.5, 0.7, 0.9]
            write_metrics_csv(rows, path)
        assert paths[0].read_bytes() == paths[1].read_bytes()
        assert len(paths[0].read_text().splitlines()) == 6
        assert gw.calls == calls_after_run

        # endpoints of a w sweep over the fusion case of criterion 2
        n = 200
        records, graph = random_fusion_case(num_entities=n)
        ends = sweep("w", [0.0, 1.0], records, n, FusionConfig(alpha=0.3), graph)
        llm_ranks, graph_ranks = [], []
        for rec in records:
            llm_order, graph_order = endpoint_orders(rec, graph.row(rec.query.index), n)
            llm_ranks.append(llm_order.index(rec.query.ground_truth) + 1)
            graph_ranks.append(graph_order.index(rec.query.ground_truth) + 1)
        for row, ranks in zip(ends, (llm_ranks, graph_ranks)):
            expected = compute_metrics(ranks)
            assert row["mrr"] == expected.mrr
            assert [row["hits1"], row["hits3"], row["hits10"]] == [expected.hits[k] for k in (1, 3, 10)]


def test_c8_verbalization(capsys, nigeria, replay_config):
    opening = (
        'There is a given text consisting of multiple historical events in the form of '
        '"{id}:[{subject} {relation} {object} {time}];". And there is a query in the form of: '
        '"{subject} {relation} {whom} time}?" If you must infer several {object} that you think may be '
        'the answer to the given query based on the given historical events, what important historical '
        'events do you base your predictions on? Please list the top 30 most important histories and '
        'output their {id}.'
    )
    with criterion(capsys, 8, "day labels, step-1 opening line and leakage example are byte-exact", 1.0):
        assert format_time(152) == "153rd day"
        q = nigeria.queries[0]
        assert format_time(q.time - nigeria.kg.time_origin) == "340th day"
        refs = first_order_histories(nigeria.kg, q, 100)
        bundle = nigeria.verbalizer(replay_config).select_prompt(refs, q, 30)
        assert bundle.text.split("\n", 1)[0] == opening
        assert "on the 340th day?" in bundle.text

        vocab = Vocabulary({0: "United_Arab_Emirates", 1: "Qatar"}, {0: "Reduce_or_break_diplomatic_relations"})
        v = Verbalizer(None, vocab, leakage_phrases={0: "reduced or broke diplomatic relations with"})
        when = Calendar(dt.date(2014, 1, 1)).date(337)
        assert v.leakage_prompt(Quadruple(0, 0, 1, 337), when).text == (
            "Do you know the fact that United Arab Emirates reduced or broke diplomatic relations with Qatar "
            "on 2014-12-04?"
        )


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))

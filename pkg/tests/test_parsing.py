import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coh.parsing import (
    EmptyAnswerError,
    EmptySelectionError,
    RankedAnswers,
    parse_id_selection,
    parse_ranked_answers,
    render_answers,
    resolve_surface,
)
from coh.synthetic import toy_vocab
from coh.tkg import Vocabulary
from coh.verbalize import PromptBundle

WORKED_REPLY = """Possible answers:
1. Citizen_(Nigeria)
2. Education_(Nigeria)
3. Member_of_the_Judiciary_(Nigeria)
4. Barack_Obama
5. Xi_Jinping
6. Boko_Haram
7. Head_of_Government_(Nigeria)
8. Court_Judge_(Nigeria)"""


def select_bundle(k=20):
    return PromptBundle("...", "select_first_order", id_map={i: i for i in range(k)})


def test_selection_reads_integers_in_order():
    sel = parse_id_selection("0, 1, 2, 5, 7", select_bundle(), 30)
    assert sel.local_ids == [0, 1, 2, 5, 7] and sel.dropped == []


def test_selection_drops_duplicates_and_unknown():
    sel = parse_id_selection("3, 3, 999", select_bundle(), 30)
    assert sel.local_ids == [3]
    assert sel.dropped == [("3", "duplicate"), ("999", "out of range")]


def test_selection_accepts_prose():
    assert parse_id_selection("I pick 2 and 4.", select_bundle(), 30).local_ids == [2, 4]


def test_selection_truncates_to_n():
    sel = parse_id_selection(", ".join(map(str, range(10))), select_bundle(), 3)
    assert sel.local_ids == [0, 1, 2]
    assert [reason for _, reason in sel.dropped] == ["beyond n"] * 7


def test_selection_ignores_echoed_fact_text():
    reply = "4:[A, Threaten, B, on the 12th day]\n7:[C, Accuse, D, on the 3rd day]"
    assert parse_id_selection(reply, select_bundle(), 30).local_ids == [4, 7]


def test_selection_empty_raises():
    with pytest.raises(EmptySelectionError):
        parse_id_selection("none of these", select_bundle(), 30)
    with pytest.raises(EmptySelectionError):
        parse_id_selection("999", select_bundle(), 30)


def test_selection_rejects_answer_bundle():
    with pytest.raises(ValueError):
        parse_id_selection("1", PromptBundle("x", "answer"), 30)


def test_worked_example_reply(nigeria):
    out = parse_ranked_answers(WORKED_REPLY, nigeria.vocab)
    names = [nigeria.vocab.entity(e.entity) for e in out.entries]
    assert names[2] == "Member_of_the_Judiciary_(Nigeria)"
    assert [e.position for e in out.entries] == list(range(1, 9))
    assert out.dropped == []


def test_case_folded_match():
    vocab = Vocabulary({0: "Thailand", 1: "Cambodia"}, {0: "R"})
    out = parse_ranked_answers("1. thailand\n2. CAMBODIA", vocab)
    assert [e.entity for e in out.entries] == [0, 1]


def test_unresolved_surface_keeps_slot_and_is_reported():
    vocab = Vocabulary({0: "Citizen_(North_Korea)", 1: "Japan"}, {0: "R"})
    out = parse_ranked_answers("1. citizen_(Nerth_Kerea)\n2. Japan", vocab)
    assert out.entries[0].entity is None
    assert out.entries[1].entity == 1 and out.entries[1].position == 2
    assert out.dropped == [("citizen_(Nerth_Kerea)", "unresolved")]
    fuzzy = parse_ranked_answers("1. citizen_(Nerth_Kerea)\n2. Japan", vocab, fuzzy=True)
    assert fuzzy.entries[0].entity == 0 and fuzzy.dropped == []


def test_fuzzy_requires_unique_match():
    vocab = Vocabulary({0: "Mali", 1: "Bali"}, {0: "R"})
    assert resolve_surface("Dali", vocab, fuzzy=True) is None
    assert resolve_surface("Malii", vocab, fuzzy=True) == 0


def test_duplicates_keep_first_occurrence():
    vocab = Vocabulary({0: "Thailand", 1: "Japan"}, {0: "R"})
    out = parse_ranked_answers("1. Thailand\n2. thailand\n3. Japan", vocab)
    assert [(e.entity, e.position) for e in out.entries] == [(0, 1), (1, 2)]
    assert out.dropped == [("thailand", "duplicate")]


def test_stops_at_explanation():
    vocab = Vocabulary({0: "Thailand", 1: "Japan"}, {0: "R"})
    out = parse_ranked_answers("1. Thailand\nExplanation:\n1. Japan is close", vocab)
    assert [e.entity for e in out.entries] == [0]


def test_anonymized_ids():
    vocab = toy_vocab(10, 2)
    out = parse_ranked_answers("1. 7\n2. 3\n3. 42", vocab, anonymized=True)
    assert [e.entity for e in out.entries] == [7, 3, None]


def test_empty_answers_raise():
    vocab = toy_vocab(3, 1)
    with pytest.raises(EmptyAnswerError):
        parse_ranked_answers("", vocab)
    with pytest.raises(EmptyAnswerError):
        parse_ranked_answers("I am not sure.", vocab)


@settings(max_examples=80, deadline=None)
@given(st.lists(st.integers(0, 29), min_size=1, max_size=30, unique=True))
def test_render_parse_round_trip(ids):
    vocab = toy_vocab(30, 2)
    reply = "Possible answers:\n" + "\n".join(f"{i + 1}. {vocab.entity(e)}" for i, e in enumerate(ids))
    parsed = parse_ranked_answers(reply, vocab)
    assert [e.entity for e in parsed.entries] == ids
    assert render_answers(parsed) == reply
    assert RankedAnswers.from_dict(parsed.to_dict()) == parsed

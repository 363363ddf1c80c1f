"""Render facts, history chains and queries as prompt text."""

from __future__ import annotations

import datetime as dt
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence, Union

from .history import HistoryChain, HistoryRef
from .tkg import Quadruple, Query, TemporalKG, Vocabulary, read_overlay

STEP_KINDS = ("select_first_order", "select_chain", "answer", "leakage", "explain")
SELECT_KINDS = ("select_first_order", "select_chain")

PLACEHOLDERS = (
    "n",
    "query_subject",
    "query_relation",
    "query_time",
    "history_block",
    "fact_subject",
    "fact_relation",
    "fact_object",
    "fact_date",
)
_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(PLACEHOLDERS) + r")\}")
ID_LINE_RE = re.compile(r"^(\d+):\[", re.MULTILINE)


class PromptError(ValueError):
    pass


def ordinal(k: int) -> str:
    if 10 <= k % 100 <= 13:
        return f"{k}th"
    return f"{k}{({1: 'st', 2: 'nd', 3: 'rd'}).get(k % 10, 'th')}"


@dataclass(frozen=True)
class TimeStyle:
    """``ordinal_day`` gives "153rd day"; ``anonymized_integer`` gives "153 day"."""

    mode: str = "ordinal_day"
    origin: int = 0

    def __post_init__(self) -> None:
        if self.mode not in ("ordinal_day", "anonymized_integer"):
            raise ValueError(f"unknown time style {self.mode!r}")


def format_time(tick: int, style: TimeStyle = TimeStyle()) -> str:
    if tick < style.origin:
        raise ValueError(f"tick {tick} precedes the time origin {style.origin}")
    day = tick - style.origin + 1
    if style.mode == "ordinal_day":
        return f"{ordinal(day)} day"
    return f"{day} day"


def render_template(template: str, **values: object) -> str:
    def sub(m: re.Match) -> str:
        key = m.group(1)
        return str(values[key]) if key in values else m.group(0)

    return _PLACEHOLDER_RE.sub(sub, template)


def load_templates(directory: str | Path | None = None) -> dict[str, str]:
    """Default templates, overridden by any ``<step_kind>.txt`` in ``directory``."""
    out = {}
    pkg = resources.files("coh") / "templates"
    for kind in STEP_KINDS:
        text = (pkg / f"{kind}.txt").read_text(encoding="utf-8")
        if directory is not None:
            custom = Path(directory) / f"{kind}.txt"
            if custom.exists():
                text = custom.read_text(encoding="utf-8")
        out[kind] = text[:-1] if text.endswith("\n") else text
    return out


Item = Union[HistoryRef, HistoryChain]


@dataclass
class PromptBundle:
    text: str
    step_kind: str
    id_map: dict[int, Item] = field(default_factory=dict)
    query: Query | None = None
    n: int | None = None
    chains: tuple[HistoryChain, ...] = ()
    fact: Quadruple | None = None


@dataclass
class Verbalizer:
    """Renders prompts for one dataset.

    ``phrases`` maps (augmented) relation ids to a surface carrying its
    preposition, e.g. "Sign agreement with"; ``leakage_phrases`` does the
    same for the calendar-dated leakage question.
    """

    kg: TemporalKG
    vocab: Vocabulary
    style: TimeStyle = TimeStyle()
    anonymize: bool = False
    phrases: Mapping[int, str] = field(default_factory=dict)
    leakage_phrases: Mapping[int, str] = field(default_factory=dict)
    templates: Mapping[str, str] = field(default_factory=load_templates)

    def entity(self, eid: int) -> str:
        name = self.vocab.entity(eid)
        return str(eid) if self.anonymize else name

    def relation(self, rid: int) -> str:
        name = self.vocab.relation(rid)
        if self.anonymize:
            return str(rid)
        return self.phrases.get(rid, name)

    def time(self, tick: int) -> str:
        return format_time(tick, self.style)

    def fact(self, quad: Quadruple) -> str:
        s, r, o, t = quad
        return f"{self.entity(s)} {self.relation(r)} {self.entity(o)} on the {self.time(t)}"

    def fact_fields(self, quad: Quadruple) -> str:
        s, r, o, t = quad
        return f"{self.entity(s)}, {self.relation(r)}, {self.entity(o)}, on the {self.time(t)}"

    def _query_values(self, query: Query) -> dict[str, str]:
        return {
            "query_subject": self.entity(query.subject),
            "query_relation": self.relation(query.relation),
            "query_time": self.time(query.time),
        }

    def select_prompt(self, items: Sequence[Item], query: Query, n: int, step_index: int = 1) -> PromptBundle:
        if not items:
            raise PromptError("nothing to select from")
        if n < 1:
            raise PromptError("n must be >= 1")
        lines = []
        id_map: dict[int, Item] = {}
        for local_id, item in enumerate(items):
            if isinstance(item, HistoryRef):
                body = self.fact(self.kg.quad(item.quad_index))
            else:
                body = ", ".join(self.fact(q) for q in item.quads(self.kg))
            lines.append(f"{local_id}:[{body}];")
            id_map[local_id] = item
        kind = "select_first_order" if step_index == 1 else "select_chain"
        text = render_template(
            self.templates[kind], n=n, history_block="\n".join(lines), **self._query_values(query)
        )
        return PromptBundle(text, kind, id_map, query, n)

    def _chain_block(self, chains: Sequence[HistoryChain]) -> str:
        return "\n".join(
            " ".join(self.fact_fields(q) + ";" for q in chain.quads(self.kg)) for chain in chains
        )

    def answer_prompt(self, chains: Sequence[HistoryChain], query: Query) -> PromptBundle:
        if not chains:
            raise PromptError("no history chains to answer from")
        text = render_template(
            self.templates["answer"], history_block=self._chain_block(chains), **self._query_values(query)
        )
        return PromptBundle(text, "answer", {}, query, None, tuple(chains))

    def explanation_prompt(self, chains: Sequence[HistoryChain], query: Query) -> PromptBundle:
        if not chains:
            raise PromptError("no history chains to explain from")
        text = render_template(
            self.templates["explain"], history_block=self._chain_block(chains), **self._query_values(query)
        )
        return PromptBundle(text, "explain", {}, query, None, tuple(chains))

    def leakage_prompt(self, quad: Quadruple, raw_date: dt.date | None) -> PromptBundle:
        if raw_date is None:
            raise PromptError(f"no calendar date for tick {quad.time}")
        s, r, o, _ = quad
        relation = self.leakage_phrases.get(r, self.vocab.relation(r).replace("_", " "))
        text = render_template(
            self.templates["leakage"],
            fact_subject=self.vocab.entity(s).replace("_", " "),
            fact_relation=relation,
            fact_object=self.vocab.entity(o).replace("_", " "),
            fact_date=raw_date.isoformat(),
        )
        return PromptBundle(text, "leakage", {}, None, None, (), quad)


def bundle_ids(text: str) -> set[int]:
    """Local ids rendered as ``{id}:[`` at line start."""
    return {int(m) for m in ID_LINE_RE.findall(text)}


@dataclass(frozen=True)
class Calendar:
    """Maps ticks back to calendar dates: ``start`` is the date of ``origin``."""

    start: dt.date
    origin: int = 0

    def date(self, tick: int) -> dt.date:
        return self.start + dt.timedelta(days=tick - self.origin)


def load_phrases(path: str | Path | None) -> dict[int, str]:
    return read_overlay(path) if path else {}

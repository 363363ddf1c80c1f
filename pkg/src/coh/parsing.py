"""Parse LLM replies: id selections for the pruning steps, ranked entities for the answer step."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping

from .tkg import Vocabulary, normalize_surface
from .verbalize import SELECT_KINDS, PromptBundle


class EmptySelectionError(ValueError):
    pass


class EmptyAnswerError(ValueError):
    pass


@dataclass
class IdSelection:
    local_ids: list[int]
    dropped: list[tuple[str, str]] = field(default_factory=list)


@dataclass(frozen=True)
class AnswerEntry:
    surface: str
    entity: int | None  # None when the surface did not resolve
    serial: int
    position: int


@dataclass
class RankedAnswers:
    entries: list[AnswerEntry] = field(default_factory=list)
    dropped: list[tuple[str, str]] = field(default_factory=list)

    def resolved(self) -> list[AnswerEntry]:
        return [e for e in self.entries if e.entity is not None]

    def to_dict(self) -> dict:
        return {
            "entries": [[e.surface, e.entity, e.serial, e.position] for e in self.entries],
            "dropped": [list(d) for d in self.dropped],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RankedAnswers":
        return cls(
            [AnswerEntry(s, e, serial, pos) for s, e, serial, pos in d.get("entries", [])],
            [tuple(x) for x in d.get("dropped", [])],
        )


_BRACKETED = re.compile(r"\[[^\]]*\]")


def parse_id_selection(reply: str, bundle: PromptBundle, n: int) -> IdSelection:
    """Integer tokens in reply order, restricted to the bundle's ids, first ``n`` kept.

    Echoed ``id:[fact]`` lines are tolerated: bracketed fact text is ignored
    so day numbers inside it are not read as ids.
    """
    if bundle.step_kind not in SELECT_KINDS:
        raise ValueError(f"cannot read an id selection from a {bundle.step_kind} bundle")
    text = _BRACKETED.sub(" ", reply)
    ids: list[int] = []
    dropped: list[tuple[str, str]] = []
    for token in re.findall(r"\d+", text):
        i = int(token)
        if i not in bundle.id_map:
            dropped.append((token, "out of range"))
        elif i in ids:
            dropped.append((token, "duplicate"))
        elif len(ids) >= n:
            dropped.append((token, "beyond n"))
        else:
            ids.append(i)
    if not ids:
        raise EmptySelectionError(f"no valid ids in reply {reply[:80]!r}")
    return IdSelection(ids, dropped)


_ANSWER_LINE = re.compile(r"^\s*(?:[-*]\s*)?(\d+)\s*[.):]\s*(.+?)\s*$")


def _edit_distance(a: str, b: str, bound: int) -> int:
    if abs(len(a) - len(b)) > bound:
        return bound + 1
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i] + [0] * len(b)
        for j, cb in enumerate(b, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb))
        if min(cur) > bound:
            return bound + 1
        prev = cur
    return prev[-1]


def resolve_surface(surface: str, vocab: Vocabulary, anonymized: bool = False,
                    fuzzy: bool = False, max_edits: int = 2) -> int | None:
    if anonymized:
        token = surface.strip().rstrip(".")
        if token.isdigit() and int(token) in vocab.entity_names:
            return int(token)
        return None
    key = normalize_surface(surface)
    hit = vocab.surface_index.get(key)
    if hit is not None or not fuzzy:
        return hit
    dist = {eid: _edit_distance(key, name, max_edits) for name, eid in vocab.surface_index.items()}
    best = min(dist.values(), default=max_edits + 1)
    if best > max_edits:
        return None
    nearest = [eid for eid, d in dist.items() if d == best]
    return nearest[0] if len(nearest) == 1 else None


def parse_ranked_answers(reply: str, vocab: Vocabulary, anonymized: bool = False,
                         fuzzy: bool = False) -> RankedAnswers:
    """Numbered ``N. surface`` lines, resolved and deduplicated, positions 1..len.

    Unresolved surfaces keep their slot (the model's ordering is preserved)
    but are also listed in ``dropped`` since they cannot be scored.  The
    parse stops at an ``Explanation`` header.
    """
    if not reply or not reply.strip():
        raise EmptyAnswerError("empty reply")
    entries: list[AnswerEntry] = []
    dropped: list[tuple[str, str]] = []
    seen_ids: set[int] = set()
    seen_unresolved: set[str] = set()
    matched_any = False
    for line in reply.splitlines():
        if line.strip().lower().startswith("explanation"):
            break
        m = _ANSWER_LINE.match(line)
        if not m:
            continue
        matched_any = True
        serial, surface = int(m.group(1)), m.group(2).strip().strip('"').strip()
        eid = resolve_surface(surface, vocab, anonymized, fuzzy)
        if eid is None:
            key = normalize_surface(surface)
            if key in seen_unresolved:
                dropped.append((surface, "duplicate"))
                continue
            seen_unresolved.add(key)
            dropped.append((surface, "unresolved"))
        elif eid in seen_ids:
            dropped.append((surface, "duplicate"))
            continue
        else:
            seen_ids.add(eid)
        entries.append(AnswerEntry(surface, eid, serial, len(entries) + 1))
    if not matched_any:
        raise EmptyAnswerError(f"no numbered answer lines in reply {reply[:80]!r}")
    return RankedAnswers(entries, dropped)


def render_answers(answers: RankedAnswers) -> str:
    """Inverse of ``parse_ranked_answers`` for well-formed entries."""
    return "Possible answers:\n" + "\n".join(f"{e.serial}. {e.surface}" for e in answers.entries)

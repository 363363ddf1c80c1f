"""Temporal knowledge graph store, vocabularies and query derivation.

Quadruple files follow the usual ICEWS distribution layout: one fact per
line, ``s r o t`` as whitespace separated integers (extra columns ignored).
The time column may also hold ``YYYY-MM-DD`` dates, which are converted to
day offsets from the earliest date in the dataset.
"""

from __future__ import annotations

import datetime as dt
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

SPLITS = ("train", "valid", "test")
SPLIT_CODE = {name: i for i, name in enumerate(SPLITS)}

INVERSE_PREFIX = "[inverse] "


class DatasetError(ValueError):
    """Malformed or inconsistent dataset input."""


class Quadruple(NamedTuple):
    subject: int
    relation: int
    object: int
    time: int


_PUNCT_RE = re.compile(r"[()\[\]\"'`*]")
_SPACE_RE = re.compile(r"\s+")


def normalize_surface(text: str) -> str:
    """Canonical form used to match entity surfaces.

    Case-folded, underscores read as spaces, parentheses/quotes/asterisks
    removed, whitespace collapsed, trailing periods stripped.
    """
    text = text.replace("_", " ")
    text = _PUNCT_RE.sub(" ", text)
    text = _SPACE_RE.sub(" ", text).strip().rstrip(".,;:").strip()
    return text.casefold()


@dataclass
class Vocabulary:
    entity_names: dict[int, str]
    relation_names: dict[int, str]
    reversed_relation_names: dict[int, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        _check_dense(self.entity_names, "entity")
        _check_dense(self.relation_names, "relation")
        seen: dict[str, int] = {}
        for eid, name in self.entity_names.items():
            key = normalize_surface(name)
            if key in seen:
                raise DatasetError(
                    f"entities {seen[key]} and {eid} share the normalized surface {key!r}"
                )
            seen[key] = eid
        for rid in self.reversed_relation_names:
            if rid not in self.relation_names:
                raise DatasetError(f"reversed-name overlay names unknown relation id {rid}")

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        """Number of original (non-reversed) relations."""
        return len(self.relation_names)

    def entity(self, eid: int) -> str:
        try:
            return self.entity_names[eid]
        except KeyError:
            raise DatasetError(f"unknown entity id {eid}") from None

    def relation(self, rid: int) -> str:
        """Surface of a relation id in the augmented space."""
        base = self.num_relations
        if 0 <= rid < base:
            return self.relation_names[rid]
        if base <= rid < 2 * base:
            orig = rid - base
            if orig in self.reversed_relation_names:
                return self.reversed_relation_names[orig]
            return INVERSE_PREFIX + self.relation_names[orig]
        raise DatasetError(f"unknown relation id {rid}")

    @cached_property
    def surface_index(self) -> dict[str, int]:
        return {normalize_surface(name): eid for eid, name in self.entity_names.items()}


def _check_dense(names: dict[int, str], what: str) -> None:
    if sorted(names) != list(range(len(names))):
        raise DatasetError(f"{what} ids must be dense integers starting at 0")


@dataclass(frozen=True)
class Query:
    subject: int
    relation: int
    ground_truth: int
    time: int
    direction: str = "forward"
    index: int = 0
    # original test fact the query was derived from
    fact: Quadruple | None = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "subject": self.subject,
            "relation": self.relation,
            "ground_truth": self.ground_truth,
            "time": self.time,
            "direction": self.direction,
            "fact": list(self.fact) if self.fact is not None else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Query":
        fact = d.get("fact")
        return cls(
            subject=d["subject"],
            relation=d["relation"],
            ground_truth=d["ground_truth"],
            time=d["time"],
            direction=d.get("direction", "forward"),
            index=d.get("index", 0),
            fact=Quadruple(*fact) if fact is not None else None,
        )


class TemporalKG:
    """Immutable, time-sorted store of quadruples with split tags.

    ``facts`` is an ``(N, 4)`` int64 array ordered by (time, subject,
    relation, object, split).  Index positions into it are stable and are
    what history references point at.
    """

    def __init__(
        self,
        facts: np.ndarray,
        split: np.ndarray,
        num_relations: int,
        augmented: bool = False,
    ) -> None:
        facts = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
        split = np.asarray(split, dtype=np.int8).reshape(-1)
        if len(facts) != len(split):
            raise DatasetError("facts and split tags differ in length")
        order = np.lexsort((split, facts[:, 2], facts[:, 1], facts[:, 0], facts[:, 3]))
        self.facts = facts[order]
        self.split = split[order]
        self.facts.setflags(write=False)
        self.split.setflags(write=False)
        self.num_relations = num_relations
        self.augmented = augmented
        self._subject_cache: dict[frozenset[int], dict[int, np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.facts)

    def quad(self, index: int) -> Quadruple:
        s, r, o, t = (int(x) for x in self.facts[index])
        return Quadruple(s, r, o, t)

    def quads(self, split: str | None = None) -> list[Quadruple]:
        rows = self.facts if split is None else self.facts[self.split == SPLIT_CODE[split]]
        return [Quadruple(*map(int, row)) for row in rows]

    @property
    def times(self) -> np.ndarray:
        return self.facts[:, 3]

    @property
    def time_origin(self) -> int:
        return int(self.times.min()) if len(self) else 0

    def count(self, split: str) -> int:
        return int(np.count_nonzero(self.split == SPLIT_CODE[split]))

    def facts_before(self, t: int, splits: Iterable[str] | None = None) -> np.ndarray:
        """Store indices of facts with time < t (optionally limited to splits)."""
        stop = int(np.searchsorted(self.times, t, side="left"))
        idx = np.arange(stop)
        if splits is not None:
            codes = [SPLIT_CODE[s] for s in splits]
            idx = idx[np.isin(self.split[:stop], codes)]
        return idx

    def subject_positions(self, splits: Iterable[str] | None = None) -> dict[int, np.ndarray]:
        """Map subject -> store indices in store (time ascending) order."""
        codes = frozenset(SPLIT_CODE[s] for s in (splits or SPLITS))
        cached = self._subject_cache.get(codes)
        if cached is not None:
            return cached
        mask = np.isin(self.split, sorted(codes))
        idx = np.flatnonzero(mask)
        subjects = self.facts[idx, 0]
        order = np.argsort(subjects, kind="stable")
        idx, subjects = idx[order], subjects[order]
        bounds = np.flatnonzero(np.diff(subjects)) + 1
        groups = np.split(idx, bounds)
        table = {int(self.facts[g[0], 0]): g for g in groups if len(g)}
        for g in table.values():
            g.setflags(write=False)
        self._subject_cache[codes] = table
        return table


def _parse_time(token: str, lineno: int, path: Path) -> int | dt.date:
    try:
        return int(token)
    except ValueError:
        pass
    try:
        return dt.date.fromisoformat(token)
    except ValueError:
        raise DatasetError(f"{path}:{lineno}: time field {token!r} is neither int nor date") from None


def read_quadruples(path: str | Path) -> list[tuple[int, int, int, int | dt.date]]:
    path = Path(path)
    rows = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) < 4:
                raise DatasetError(f"{path}:{lineno}: expected at least 4 fields, got {len(parts)}")
            try:
                s, r, o = int(parts[0]), int(parts[1]), int(parts[2])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-integer id field") from None
            rows.append((s, r, o, _parse_time(parts[3], lineno, path)))
    return rows


def read_mapping(path: str | Path) -> dict[int, str]:
    """Read ``name<TAB>id`` lines."""
    path = Path(path)
    out: dict[int, str] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            name, sep, idx = line.rpartition("\t")
            if not sep:
                raise DatasetError(f"{path}:{lineno}: expected 'name<TAB>id'")
            try:
                key = int(idx)
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: id {idx!r} is not an integer") from None
            if key in out:
                raise DatasetError(f"{path}:{lineno}: id {key} defined twice")
            out[key] = name
    return out


def read_overlay(path: str | Path) -> dict[int, str]:
    """Read ``relation_id<TAB>text`` lines."""
    path = Path(path)
    out: dict[int, str] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n\r")
            if not line.strip():
                continue
            idx, sep, text = line.partition("\t")
            if not sep:
                raise DatasetError(f"{path}:{lineno}: expected 'relation_id<TAB>text'")
            try:
                out[int(idx)] = text
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: id {idx!r} is not an integer") from None
    return out


@dataclass
class LoadReport:
    counts: dict[str, int]
    date_origin: dt.date | None = None


def load_dataset(
    train_path: str | Path,
    valid_path: str | Path,
    test_path: str | Path,
    entity_map_path: str | Path,
    relation_map_path: str | Path,
    reversed_names_path: str | Path | None = None,
    time_granularity: int = 1,
) -> tuple[TemporalKG, Vocabulary, LoadReport]:
    """Load and validate the three splits plus vocabularies.

    ``time_granularity`` divides integer timestamps (e.g. 24 for hour-stamped
    ICEWS18 exports) so that ticks are days.
    """
    vocab = Vocabulary(
        read_mapping(entity_map_path),
        read_mapping(relation_map_path),
        read_overlay(reversed_names_path) if reversed_names_path else {},
    )
    raw = {}
    for name, path in zip(SPLITS, (train_path, valid_path, test_path)):
        rows = read_quadruples(path)
        if not rows:
            raise DatasetError(f"empty split: {name} ({path})")
        raw[name] = rows

    all_times = [row[3] for rows in raw.values() for row in rows]
    kinds = {type(t) for t in all_times}
    if len(kinds) > 1:
        raise DatasetError("time column mixes integers and dates")
    date_origin = None
    if dt.date in kinds:
        date_origin = min(all_times)

    facts, tags = [], []
    for name, rows in raw.items():
        seen = set()
        for s, r, o, t in rows:
            if date_origin is not None:
                t = (t - date_origin).days
            else:
                if t < 0:
                    raise DatasetError(f"negative timestamp {t} in {name}")
                t = t // time_granularity
            if s not in vocab.entity_names:
                raise DatasetError(f"unknown entity id {s} in {name}")
            if o not in vocab.entity_names:
                raise DatasetError(f"unknown entity id {o} in {name}")
            if r not in vocab.relation_names:
                raise DatasetError(f"unknown relation id {r} in {name}")
            q = (s, r, o, t)
            if q in seen:
                raise DatasetError(f"duplicate quadruple {q} in {name}")
            seen.add(q)
            facts.append(q)
            tags.append(SPLIT_CODE[name])

    kg = TemporalKG(np.array(facts, dtype=np.int64), np.array(tags), vocab.num_relations)
    report = LoadReport({name: len(rows) for name, rows in raw.items()}, date_origin)
    return kg, vocab, report


def load_dataset_dir(directory: str | Path, time_granularity: int = 1):
    """Load a directory holding train/valid/test.txt, entity2id.txt, relation2id.txt."""
    d = Path(directory)
    reversed_path = d / "reversed_relations.txt"
    return load_dataset(
        d / "train.txt",
        d / "valid.txt",
        d / "test.txt",
        d / "entity2id.txt",
        d / "relation2id.txt",
        reversed_path if reversed_path.exists() else None,
        time_granularity=time_granularity,
    )


def dump_dataset(kg: TemporalKG, vocab: Vocabulary, directory: str | Path) -> None:
    """Write the original (non-mirror) facts and vocabularies in canonical form."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    original = kg.facts[:, 1] < kg.num_relations
    for name in SPLITS:
        rows = kg.facts[original & (kg.split == SPLIT_CODE[name])]
        lines = "".join(f"{s}\t{r}\t{o}\t{t}\n" for s, r, o, t in rows.tolist())
        (d / f"{name}.txt").write_text(lines, encoding="utf-8")
    for fname, names in (("entity2id.txt", vocab.entity_names), ("relation2id.txt", vocab.relation_names)):
        text = "".join(f"{names[i]}\t{i}\n" for i in sorted(names))
        (d / fname).write_text(text, encoding="utf-8")
    if vocab.reversed_relation_names:
        text = "".join(
            f"{i}\t{vocab.reversed_relation_names[i]}\n" for i in sorted(vocab.reversed_relation_names)
        )
        (d / "reversed_relations.txt").write_text(text, encoding="utf-8")


def augment_reversed(kg: TemporalKG, vocab: Vocabulary) -> tuple[TemporalKG, Vocabulary]:
    """Add the mirror (o, r + |R|, s, t) of every fact."""
    if kg.augmented:
        raise DatasetError("knowledge graph is already augmented with reversed relations")
    base = kg.num_relations
    mirror = kg.facts[:, [2, 1, 0, 3]].copy()
    mirror[:, 1] += base
    facts = np.concatenate([kg.facts, mirror])
    split = np.concatenate([kg.split, kg.split])
    return TemporalKG(facts, split, base, augmented=True), vocab


def reverse_quad(q: Quadruple, num_relations: int) -> Quadruple:
    """Mirror a fact; applying it twice gives the original back."""
    r = (q.relation + num_relations) % (2 * num_relations)
    return Quadruple(q.object, r, q.subject, q.time)


def queries_from_test(kg: TemporalKG) -> list[Query]:
    """Forward queries for every test fact (store order), then all reversed ones."""
    if not kg.augmented:
        raise DatasetError("derive queries from an augmented graph")
    base = kg.num_relations
    tests = [q for q in kg.quads("test") if q.relation < base]
    out = [
        Query(q.subject, q.relation, q.object, q.time, "forward", i, q)
        for i, q in enumerate(tests)
    ]
    offset = len(out)
    out += [
        Query(q.object, q.relation + base, q.subject, q.time, "reversed", offset + i, q)
        for i, q in enumerate(tests)
    ]
    return out


def build_kg(
    facts: Sequence[tuple[int, int, int, int]],
    num_relations: int,
    splits: Sequence[str] | None = None,
) -> TemporalKG:
    """Convenience constructor for in-memory graphs (tests, toy runs)."""
    tags = [SPLIT_CODE[s] for s in splits] if splits is not None else [0] * len(facts)
    return TemporalKG(np.array(facts, dtype=np.int64).reshape(-1, 4), np.array(tags), num_relations)

"""First-order history retrieval and chain extension over a TemporalKG."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .tkg import Quadruple, Query, TemporalKG


class ChainOrderError(ValueError):
    pass


@dataclass(frozen=True)
class HistoryRef:
    quad_index: int
    local_id: int


@dataclass(frozen=True)
class HistoryChain:
    """Store indices of the chain's links, first-order link first.

    ``extended`` is False when the last extension round found nothing to
    append; such chains are carried forward unchanged.
    """

    links: tuple[int, ...]
    extended: bool = True

    @property
    def order(self) -> int:
        return len(self.links)

    @property
    def tail(self) -> int:
        return self.links[-1]

    def quads(self, kg: TemporalKG) -> list[Quadruple]:
        return [kg.quad(i) for i in self.links]


def _newest_first(kg: TemporalKG, positions: np.ndarray, before: int) -> np.ndarray:
    # positions are in store order, so time is non-decreasing along them
    times = kg.times[positions]
    stop = int(np.searchsorted(times, before, side="left"))
    cand = positions[:stop]
    if not len(cand):
        return cand
    # time descending, store order ascending within a tick
    order = np.lexsort((cand, -kg.times[cand]))
    return cand[order]


def first_order_histories(
    kg: TemporalKG,
    query: Query,
    limit: int,
    splits: Iterable[str] | None = None,
) -> list[HistoryRef]:
    if limit < 1:
        raise ValueError("limit must be >= 1")
    positions = kg.subject_positions(splits).get(query.subject)
    if positions is None:
        return []
    picked = _newest_first(kg, positions, query.time)[:limit]
    return [HistoryRef(int(idx), i) for i, idx in enumerate(picked)]


def extend_chains(
    kg: TemporalKG,
    chains: Sequence[HistoryChain],
    per_chain_cap: int = 3,
    splits: Iterable[str] | None = None,
) -> list[HistoryChain]:
    """Append up to ``per_chain_cap`` strictly-earlier facts to each chain.

    Chains already flagged as unextended are passed through; the equal-order
    precondition applies to the remaining ones.
    """
    if per_chain_cap < 1:
        raise ValueError("per_chain_cap must be >= 1")
    live_orders = {c.order for c in chains if c.extended}
    if len(live_orders) > 1:
        raise ChainOrderError(f"chains of mixed order {sorted(live_orders)}")
    index = kg.subject_positions(splits)
    out: list[HistoryChain] = []
    for chain in chains:
        if not chain.extended:
            out.append(chain)
            continue
        tail = kg.facts[chain.tail]
        positions = index.get(int(tail[2]))
        cand = _newest_first(kg, positions, int(tail[3]))[:per_chain_cap] if positions is not None else []
        if len(cand) == 0:
            out.append(HistoryChain(chain.links, extended=False))
            continue
        out.extend(HistoryChain(chain.links + (int(c),)) for c in cand)
    return out


def is_monotone(kg: TemporalKG, chain: HistoryChain, query: Query) -> bool:
    """Rooted at the query subject, subject/object linked, strictly decreasing in time."""
    quads = chain.quads(kg)
    if not quads or quads[0].subject != query.subject or quads[0].time >= query.time:
        return False
    for prev, cur in zip(quads, quads[1:]):
        if cur.subject != prev.object or cur.time >= prev.time:
            return False
    return True

"""Rule-based conversation simulation over observed (user, item) interactions.

The system asks about the attribute whose presence splits the current
candidate set most evenly (maximum binary entropy) and recommends with
probability ``10 / max(|V|, 10)`` each turn.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Catalog, ConversationRecord, InteractionLog

RECOMMEND = "RECOMMEND"
MAX_ASKS = 15


@dataclass
class SessionState:
    target: int
    oracle: frozenset
    candidates: np.ndarray  # boolean mask over internal item ids
    confirmed: list[int] = field(default_factory=list)
    rejected: set[int] = field(default_factory=set)
    turns: int = 0
    asks: int = 0
    done: bool = False
    # (action, |V| at decision time, target still in V afterwards) per turn
    trace: list[tuple] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(self.candidates.sum())


class Simulator:
    """Holds the catalog's item/attribute membership matrix for fast filtering."""

    def __init__(self, catalog: Catalog, reject_filters: bool = False, max_asks: int = MAX_ASKS):
        self.catalog = catalog
        self.member = catalog.attribute_matrix()
        self.reject_filters = reject_filters
        self.max_asks = max_asks

    def start(self, target: int, rng: np.random.Generator) -> SessionState:
        oracle = self.catalog.attrs_of(target)
        candidates = np.zeros(len(self.member), dtype=bool)
        candidates[self.catalog.item_ids] = True
        state = SessionState(target, frozenset(oracle), candidates)
        first = int(oracle[rng.integers(len(oracle))])
        self._confirm(state, first)
        return state

    def _confirm(self, state: SessionState, a: int) -> None:
        state.confirmed.append(a)
        state.candidates &= self.member[:, a]

    def step(self, state: SessionState, rng: np.random.Generator):
        """Advance one turn; returns ``RECOMMEND`` or ``("ASK", attribute)``."""
        if state.done:
            raise ValueError("session already finished")
        size = state.size
        state.turns += 1
        recommend = rng.random() < recommend_probability(size)
        question = None if recommend else choose_question(state, self.member)
        if recommend or question is None or state.asks >= self.max_asks:
            state.done = True
            state.trace.append((RECOMMEND, size, bool(state.candidates[state.target])))
            return RECOMMEND
        state.asks += 1
        if question in state.oracle:
            self._confirm(state, question)
        else:
            state.rejected.add(question)
            if self.reject_filters:
                state.candidates &= ~self.member[:, question]
        state.trace.append((("ASK", question), size, bool(state.candidates[state.target])))
        return ("ASK", question)

    def run(self, target: int, rng: np.random.Generator) -> SessionState:
        state = self.start(target, rng)
        while not state.done:
            self.step(state, rng)
        return state


def recommend_probability(n_candidates: int) -> float:
    return 10.0 / max(n_candidates, 10)


def binary_entropy(p: float) -> float:
    """Entropy in bits of a Bernoulli(p), with 0 log 0 = 0."""
    if p <= 0.0 or p >= 1.0:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def attribute_entropy(a: int, candidates: np.ndarray, member: np.ndarray) -> float:
    """Entropy of 'candidate has attribute a' over the candidate set."""
    n = int(candidates.sum())
    if n == 0:
        raise ValueError("empty candidate set")
    return binary_entropy(int(member[candidates, a].sum()) / n)


def choose_question(state: SessionState, member: np.ndarray) -> int | None:
    """Max-entropy unasked attribute (smallest id on ties); None if nothing is informative."""
    cand = state.candidates
    n = int(cand.sum())
    if n == 0:
        return None
    counts = member[cand].sum(axis=0).astype(np.int64)
    # entropy is increasing in min(c, n - c), which compares exactly in integers
    split = np.minimum(counts, n - counts)
    split[0] = -1
    for a in state.confirmed:
        split[a] = -1
    for a in state.rejected:
        split[a] = -1
    best = int(np.argmax(split))
    return best if split[best] > 0 else None


def simulate_dataset(log: InteractionLog, catalog: Catalog, seed: int = 0,
                     reject_filters: bool = False, max_asks: int = MAX_ASKS,
                     keep_states: bool = False):
    """One conversation record per interaction, each with its own derived RNG stream.

    Returns the records, plus the session states when ``keep_states`` is set.
    """
    sim = Simulator(catalog, reject_filters, max_asks)
    records, states = [], []
    for u, items in enumerate(log.items):
        for pos, target in enumerate(items):
            state = sim.run(target, np.random.default_rng([seed, u, pos]))
            records.append(ConversationRecord(u, tuple(state.confirmed), target, pos))
            if keep_states:
                states.append(state)
    return (records, states) if keep_states else records

"""Tying states, action vectors and the packed Q-output layout.

A tying state ``s`` maps every layer to the lowest-index layer whose
parameters it shares, so ``s[i] <= i`` and ``s[s[i]] == s[i]``.  An action
vector ``a`` only requires ``a[i] <= i``; it may point at any member of the
group rather than the representative.  Both are plain tuples of ints so they
serialize as JSON arrays without conversion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

TyingState = tuple[int, ...]
ActionVector = tuple[int, ...]


class TyingError(ValueError):
    """Raised for malformed action vectors or non-canonical states."""


@dataclass(frozen=True)
class EventDiff:
    tied_events: tuple[int, ...]
    untied_events: tuple[int, ...]

    @property
    def tied_count(self) -> int:
        return len(self.tied_events)

    @property
    def untied_count(self) -> int:
        return len(self.untied_events)

    def __bool__(self) -> bool:
        return bool(self.tied_events or self.untied_events)


def validate_action(a: Sequence[int]) -> ActionVector:
    a = tuple(int(x) for x in a)
    if not a:
        raise TyingError("action vector must have at least one entry")
    for i, j in enumerate(a):
        if j < 0 or j > i:
            raise TyingError(f"entry {i} is {j}, expected a value in [0, {i}]")
    return a


def validate_state(s: Sequence[int]) -> TyingState:
    s = validate_action(s)
    for i, j in enumerate(s):
        if s[j] != j:
            raise TyingError(
                f"state is not canonical: layer {i} points to {j}, but s[{j}] == {s[j]}"
            )
    return s


def is_canonical(s: Sequence[int]) -> bool:
    try:
        validate_state(s)
    except TyingError:
        return False
    return True


def canonicalize(a: Sequence[int]) -> TyingState:
    """Resolve an action vector into its canonical tying state.

    Evaluated in ascending layer order, so ``s[a[i]]`` is already final when
    layer ``i`` is visited.
    """
    a = validate_action(a)
    s: list[int] = []
    for i, j in enumerate(a):
        s.append(i if j == i else s[j])
    return tuple(s)


def groups(s: Sequence[int]) -> list[tuple[int, ...]]:
    """Partition of the layers, ordered by representative."""
    s = validate_state(s)
    members: dict[int, list[int]] = {}
    for i, rep in enumerate(s):
        members.setdefault(rep, []).append(i)
    return [tuple(members[rep]) for rep in sorted(members)]


def count_independent(s: Sequence[int]) -> int:
    s = validate_state(s)
    return sum(1 for i, rep in enumerate(s) if rep == i)


def diff_events(s: Sequence[int], s_next: Sequence[int]) -> EventDiff:
    """Classify the layers whose state entry changed.

    A change into ``s_next[i] == i`` is an untie; any other change is a tie.
    """
    s = validate_state(s)
    s_next = validate_state(s_next)
    if len(s) != len(s_next):
        raise TyingError(f"length mismatch: {len(s)} vs {len(s_next)}")
    tied, untied = [], []
    for i, (old, new) in enumerate(zip(s, s_next)):
        if old == new:
            continue
        (untied if new == i else tied).append(i)
    return EventDiff(tuple(tied), tuple(untied))


def uniform_random_action(n_layers: int, rng: np.random.Generator) -> ActionVector:
    """Draw each ``a[i]`` independently and uniformly from ``0..i``."""
    if n_layers < 1:
        raise TyingError("n_layers must be >= 1")
    return tuple(int(rng.integers(0, i + 1)) for i in range(n_layers))


def all_independent(n_layers: int) -> TyingState:
    return tuple(range(n_layers))


def all_tied(n_layers: int) -> TyingState:
    return (0,) * n_layers


# Packed layout: row i (layers 1..L-1) holds i + 1 choices, rows stored back to back.

def packed_size(n_layers: int) -> int:
    return (n_layers + 2) * (n_layers - 1) // 2


def flat_offset(layer: int, choice: int) -> int:
    if layer < 1:
        raise TyingError(f"layer must be >= 1, got {layer}")
    if not 0 <= choice <= layer:
        raise TyingError(f"choice {choice} out of range for layer {layer}")
    return (layer - 1) * (layer + 2) // 2 + choice


def unpack(offset: int, n_layers: int) -> tuple[int, int]:
    """Inverse of :func:`flat_offset`; returns ``(layer, choice)``."""
    if not 0 <= offset < packed_size(n_layers):
        raise TyingError(
            f"offset {offset} out of range [0, {packed_size(n_layers)}) for L={n_layers}"
        )
    layer = 1
    while flat_offset(layer, layer) < offset:
        layer += 1
    return layer, offset - flat_offset(layer, 0)


def row_slices(n_layers: int) -> list[slice]:
    """Slice of the packed vector holding the choices of each layer 1..L-1."""
    return [
        slice(flat_offset(i, 0), flat_offset(i, i) + 1) for i in range(1, n_layers)
    ]

"""Fixed tying patterns, trajectory replay and trainer variants for ablations.

Patterns use 0-based layer indices.  For an even ``L`` with ``h = L // 2``:

* ``cycle``      ties layer ``h + i`` to layer ``i``
* ``cycle_rev``  ties layer ``L - 1 - i`` to layer ``i`` (the 1-based "i to L-i")
* ``sequence``   ties layer ``2i + 1`` to layer ``2i``

for ``i`` in ``0..h-1``.  A smaller vanilla model is plain ``conventional``
mode with fewer layers, and "final architecture from scratch" is
``fixed_pattern`` with ``pattern="fixed_custom"`` and the finished run's state.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .config import RunConfig
from .tying import TyingError, TyingState, canonicalize, validate_state


class ReplayError(ValueError):
    pass


@dataclass(frozen=True)
class PatternSpec:
    kind: str
    n_layers: int
    custom: tuple[int, ...] | None = None


def pattern_state(spec: PatternSpec) -> TyingState:
    L = spec.n_layers
    if spec.kind == "fixed_custom":
        if spec.custom is None:
            raise TyingError("fixed_custom pattern needs a state")
        s = validate_state(spec.custom)
        if len(s) != L:
            raise TyingError(f"custom state has {len(s)} entries, expected {L}")
        return s
    if spec.kind not in ("cycle", "cycle_rev", "sequence"):
        raise TyingError(f"unknown pattern {spec.kind!r}")
    if L < 2 or L % 2:
        raise TyingError(f"pattern {spec.kind!r} needs an even number of layers, got {L}")
    h = L // 2
    a = list(range(L))
    for i in range(h):
        if spec.kind == "cycle":
            a[h + i] = i
        elif spec.kind == "cycle_rev":
            a[L - 1 - i] = i
        else:
            a[2 * i + 1] = 2 * i
    return canonicalize(a)


def validate_permutation(perm: Sequence[int], n_layers: int) -> tuple[int, ...]:
    perm = tuple(int(p) for p in perm)
    if len(perm) != n_layers:
        raise ReplayError(
            f"permutation has length {len(perm)} but the model has {n_layers} layers"
        )
    if sorted(perm) != list(range(n_layers)):
        raise ReplayError(f"{list(perm)} is not a permutation of 0..{n_layers - 1}")
    return perm


def permute_state(s: Sequence[int], perm: Sequence[int]) -> TyingState:
    """Move every group ``G`` of ``s`` to ``perm(G)`` and relabel by minimum index."""
    s = validate_state(s)
    perm = validate_permutation(perm, len(s))
    label = [0] * len(s)
    for i, rep in enumerate(s):
        label[perm[i]] = rep
    first: dict[int, int] = {}
    for j, lab in enumerate(label):
        first.setdefault(lab, j)
    return tuple(first[lab] for lab in label)


def load_trajectory(path: str | Path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "trajectory.jsonl"
    if not path.is_file():
        raise ReplayError(f"trajectory file not found: {path}")
    records = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    if not records:
        raise ReplayError(f"trajectory {path} is empty")
    return records


def replay_schedule(records: Sequence[dict], n_layers: int,
                    permutation: Sequence[int] | None = None) -> dict[int, TyingState]:
    """Map trainer step -> state to apply, from a recorded trajectory."""
    schedule: dict[int, TyingState] = {}
    for rec in records:
        s = tuple(rec["s"])
        if len(s) != n_layers:
            raise ReplayError(
                f"trajectory state has {len(s)} layers but the model has {n_layers}"
            )
        s = validate_state(s)
        schedule[int(rec["step"])] = permute_state(s, permutation) if permutation else s
    return schedule


def no_tie_mode(cfg: RunConfig, flag: bool = True) -> RunConfig:
    """Replicate weights at transitions but keep every layer's own storage."""
    return dataclasses.replace(cfg, trainer=dataclasses.replace(cfg.trainer, no_tie=flag)).validate()


def all_trainable_init(cfg: RunConfig, flag: bool = True) -> RunConfig:
    """Skip the initial freeze: every layer trains from step 0."""
    return dataclasses.replace(
        cfg, trainer=dataclasses.replace(cfg.trainer, all_trainable_init=flag)
    ).validate()


def replay_mode(cfg: RunConfig, trajectory: str | Path,
                permutation: Sequence[int] | None = None) -> RunConfig:
    if permutation is not None:
        validate_permutation(permutation, cfg.model.n_layers)
    trainer = dataclasses.replace(
        cfg.trainer, mode="replay", replay_trajectory=str(trajectory),
        permutation=list(permutation) if permutation is not None else None,
    )
    return dataclasses.replace(cfg, trainer=trainer).validate()


def fixed_pattern_mode(cfg: RunConfig, kind: str,
                       custom: Sequence[int] | None = None) -> RunConfig:
    trainer = dataclasses.replace(
        cfg.trainer, mode="fixed_pattern", pattern=kind,
        custom_state=list(custom) if custom is not None else None,
    )
    return dataclasses.replace(cfg, trainer=trainer).validate()

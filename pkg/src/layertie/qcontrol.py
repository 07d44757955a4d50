"""Q-function approximator and epsilon-greedy controller over tying actions.

The network maps the normalized state ``s[1:] / (L - 1)`` to one packed
vector holding, for every layer ``i >= 1``, a Q-value for each of its
``i + 1`` choices.  The value of a joint action is the sum of the chosen
per-layer entries, so greedy selection and the max over joint actions both
decompose row by row.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .model import AdamConfig, ParamSet, adam_update
from .tying import (
    ActionVector,
    TyingState,
    flat_offset,
    packed_size,
    row_slices,
    uniform_random_action,
    validate_action,
    validate_state,
)

log = logging.getLogger(__name__)


class ControllerError(ValueError):
    pass


class ControllerStepError(RuntimeError):
    """A controller update that had to be skipped (non-finite reward or gradient)."""


@dataclass
class ControllerConfig:
    gamma: float = 0.99
    epsilon: float = 1.0
    epsilon_decay: float = 0.95
    epsilon_floor: float = 0.1
    learning_rate: float = 1e-3
    hidden: int = 128
    seed: int = 0
    reward: str = "neg_ppl"  # or "neg_log_ppl"

    def validate(self) -> "ControllerConfig":
        if not 0.0 <= self.gamma < 1.0:
            raise ControllerError(f"controller.gamma must lie in [0, 1), got {self.gamma}")
        if not 0.0 <= self.epsilon_floor <= self.epsilon <= 1.0:
            raise ControllerError(
                "controller epsilon values must satisfy 0 <= epsilon_floor <= epsilon <= 1, "
                f"got floor={self.epsilon_floor} epsilon={self.epsilon}"
            )
        if not 0.0 < self.epsilon_decay < 1.0:
            raise ControllerError(
                f"controller.epsilon_decay must lie in (0, 1), got {self.epsilon_decay}"
            )
        if self.learning_rate <= 0:
            raise ControllerError("controller.learning_rate must be positive")
        if self.hidden < 1:
            raise ControllerError("controller.hidden must be >= 1")
        if self.reward not in ("neg_ppl", "neg_log_ppl"):
            raise ControllerError(
                f"controller.reward must be 'neg_ppl' or 'neg_log_ppl', got {self.reward!r}"
            )
        return self


class QNet:
    """One-hidden-layer ReLU MLP, double precision, with its own Adam state."""

    def __init__(self, n_layers: int, hidden: int = 128, seed: int = 0):
        if n_layers < 2:
            raise ControllerError("the controller needs at least two layers")
        self.n_layers = n_layers
        self.hidden = hidden
        self.seed = seed
        self.updates = 0
        rng = np.random.default_rng(seed)
        n_in, n_out = n_layers - 1, packed_size(n_layers)

        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return torch.from_numpy(rng.uniform(-bound, bound, size=shape)).requires_grad_(True)

        self.params = ParamSet({
            "w1": uniform((hidden, n_in), n_in),
            "b1": uniform((hidden,), n_in),
            "w2": uniform((n_out, hidden), hidden),
            "b2": uniform((n_out,), hidden),
        })

    @property
    def input_dim(self) -> int:
        return self.n_layers - 1

    @property
    def output_dim(self) -> int:
        return packed_size(self.n_layers)

    def encode(self, s: Sequence[int]) -> torch.Tensor:
        s = validate_state(s)
        if len(s) != self.n_layers:
            raise ControllerError(f"state has {len(s)} entries, QNet expects {self.n_layers}")
        return torch.tensor(s[1:], dtype=torch.float64) / (self.n_layers - 1)

    def output(self, s: Sequence[int]) -> torch.Tensor:
        p = self.params.tensors
        h = torch.relu(p["w1"] @ self.encode(s) + p["b1"])
        return p["w2"] @ h + p["b2"]


def q_forward(net: QNet, s: Sequence[int]) -> np.ndarray:
    with torch.no_grad():
        return net.output(s).numpy().copy()


def _offsets(a: ActionVector) -> list[int]:
    return [flat_offset(i, a[i]) for i in range(1, len(a))]


def value_of(qout: np.ndarray, a: Sequence[int]) -> float:
    a = validate_action(a)
    if len(qout) != packed_size(len(a)):
        raise ControllerError(f"Q output has {len(qout)} entries, action implies {packed_size(len(a))}")
    return float(sum(qout[o] for o in _offsets(a)))


def greedy_from_output(qout: np.ndarray, n_layers: int) -> ActionVector:
    # np.argmax returns the first maximal index, i.e. the lowest choice wins ties
    return (0,) + tuple(int(np.argmax(qout[sl])) for sl in row_slices(n_layers))


def max_from_output(qout: np.ndarray, n_layers: int) -> float:
    return float(sum(qout[sl].max() for sl in row_slices(n_layers)))


def q_value(net: QNet, s: Sequence[int], a: Sequence[int]) -> float:
    a = validate_action(a)
    if len(a) != net.n_layers:
        raise ControllerError(f"action has {len(a)} entries, QNet expects {net.n_layers}")
    return value_of(q_forward(net, s), a)


def greedy_action(net: QNet, s: Sequence[int]) -> ActionVector:
    return greedy_from_output(q_forward(net, s), net.n_layers)


def max_q(net: QNet, s: Sequence[int]) -> float:
    return max_from_output(q_forward(net, s), net.n_layers)


def policy(net: QNet, s: Sequence[int], cfg: ControllerConfig,
           rng: np.random.Generator) -> ActionVector:
    """Uniform random action with probability epsilon, greedy otherwise."""
    if rng.random() < cfg.epsilon:
        return uniform_random_action(net.n_layers, rng)
    return greedy_action(net, s)


def bellman_target(r_step: float, cfg: ControllerConfig, net: QNet,
                   s_next: Sequence[int]) -> float:
    """``r_step + gamma * max_a Q(s_next, a)`` with the live network."""
    if not math.isfinite(r_step):
        raise ControllerStepError(f"non-finite reward {r_step}")
    return r_step + cfg.gamma * max_q(net, s_next)


def q_loss(net: QNet, s: Sequence[int], a: Sequence[int], target: float) -> torch.Tensor:
    a = validate_action(a)
    out = net.output(s)
    pred = out[_offsets(a)].sum()
    return (pred - target) ** 2


def q_update(net: QNet, s: TyingState, a: ActionVector, target: float,
             lr: float = 1e-3) -> float:
    """One Adam step on the squared error of ``Q(s, a)`` against ``target``.

    Returns the loss before the step.  A non-finite gradient skips the step.
    """
    loss = q_loss(net, s, a, target)
    names = list(net.params.tensors)
    grads = torch.autograd.grad(loss, [net.params.tensors[n] for n in names])
    if not all(torch.isfinite(g).all() for g in grads):
        log.warning("non-finite controller gradient; update skipped")
        return float(loss.detach())
    adam_update(net.params, dict(zip(names, grads)), AdamConfig(lr=lr))
    net.updates += 1
    return float(loss.detach())


def decay_epsilon(cfg: ControllerConfig) -> ControllerConfig:
    return dataclasses.replace(cfg, epsilon=max(cfg.epsilon * cfg.epsilon_decay, cfg.epsilon_floor))


def save_qnet(net: QNet, stem: str | Path, step: int) -> Path:
    """JSON header plus a flat little-endian float64 payload (w1, b1, w2, b2)."""
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    names = list(net.params.tensors)
    header = {
        "n_layers": net.n_layers,
        "input_dim": net.input_dim,
        "hidden": net.hidden,
        "output_dim": net.output_dim,
        "seed": net.seed,
        "step": int(step),
        "updates": net.updates,
        "order": names,
        "shapes": {n: list(net.params.tensors[n].shape) for n in names},
    }
    payload = b"".join(
        net.params.tensors[n].detach().numpy().astype("<f8").tobytes() for n in names
    )
    stem.with_suffix(".bin").write_bytes(payload)
    stem.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True) + "\n")
    return stem.with_suffix(".json")


def load_qnet(path: str | Path) -> QNet:
    stem = Path(path).with_suffix("")
    header = json.loads(stem.with_suffix(".json").read_text())
    net = QNet(header["n_layers"], header["hidden"], header["seed"])
    flat = np.frombuffer(stem.with_suffix(".bin").read_bytes(), dtype="<f8")
    pos = 0
    for n in header["order"]:
        shape = header["shapes"][n]
        size = int(np.prod(shape))
        net.params.tensors[n] = torch.from_numpy(
            flat[pos:pos + size].astype(np.float64).reshape(shape)
        ).requires_grad_(True)
        pos += size
    net.params = ParamSet(net.params.tensors)
    net.updates = header["updates"]
    return net

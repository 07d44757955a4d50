"""Training loop with periodic tying decisions.

Every step trains the transformer on one sampled batch.  After every
``controller_period`` completed steps the tying state is revisited: in
``dynamic`` mode the Q-controller picks an action, the store moves to the
new state, a fresh batch scores it and the controller regresses towards the
Bellman target.  ``replay`` applies recorded states at their recorded steps;
``conventional`` and ``fixed_pattern`` keep one static architecture and only
log a record at each boundary.

Record steps count completed optimizer steps, so with ``K`` steps and period
``k`` there are exactly ``K // k`` records, at steps ``k, 2k, ...``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import ablations
from .config import RunConfig
from .data import Batch, Corpus, DataError, sample_batch, validation_batches, write_split_sidecar
from .model import (
    AdamConfig,
    ModelConfig,
    ParameterStore,
    TrainingStepError,
    apply_state,
    cross_entropy,
    init_conventional,
    init_model,
    init_with_state,
    layer_param_count,
    loss_and_grads,
    optimizer_step,
    perplexity,
    ppl_from_ce,
    save_checkpoint,
    shared_param_count,
    trainable_param_count,
)
from .qcontrol import (
    ControllerConfig,
    ControllerStepError,
    QNet,
    bellman_target,
    decay_epsilon,
    policy,
    q_update,
    q_value,
    save_qnet,
)
from .tying import TyingState, canonicalize, count_independent

log = logging.getLogger(__name__)

TRAJECTORY_FIELDS = (
    "step", "s", "a", "reward", "predicted_q", "bellman_target", "q_loss", "epsilon",
    "tied_count", "untied_count", "independent_layers", "trainable_params", "train_ppl",
)


@dataclass
class TrajectoryRecord:
    step: int
    s: list[int]
    a: list[int]
    reward: float | None
    predicted_q: float | None
    bellman_target: float | None
    q_loss: float | None
    epsilon: float | None
    tied_count: int
    untied_count: int
    independent_layers: int
    trainable_params: int
    train_ppl: float
    wall_time: float = field(default=0.0, compare=False)

    def to_json(self) -> str:
        # wall_time is kept out of the log so identical seeds give identical bytes
        return json.dumps({k: getattr(self, k) for k in TRAJECTORY_FIELDS})


@dataclass
class RunResult:
    summary: dict
    trajectory: list[TrajectoryRecord]
    evals: list[dict]
    store: ParameterStore
    qnet: QNet | None
    run_dir: Path | None


def reward(store: ParameterStore, batch: Batch, kind: str = "neg_ppl",
           ceiling: float = 1e6) -> float:
    """Negative perplexity (default) or negative cross-entropy of ``batch``."""
    if kind == "neg_log_ppl":
        with torch.no_grad():
            return -float(cross_entropy(store, batch.inputs, batch.targets))
    return -perplexity(store, batch, ceiling)


def evaluate(store: ParameterStore, corpus: Corpus, batch_size: int, context_length: int,
             max_batches: int | None = None, ceiling: float = 1e6) -> float:
    """Mean perplexity over the validation batches; the store is not modified."""
    ppls = [perplexity(store, b, ceiling)
            for b in validation_batches(corpus, batch_size, context_length, max_batches)]
    if not ppls:
        raise DataError("validation split is empty")
    return float(np.mean(ppls))


def expected_trainable_params(cfg: ModelConfig, s: Sequence[int], share_storage: bool = True) -> int:
    groups = count_independent(s) if share_storage else cfg.n_layers
    return groups * layer_param_count(cfg) + shared_param_count(cfg)


def run_summary(trajectory: Sequence[TrajectoryRecord], best_val_ppl: float | None = None,
                n_layers: int | None = None) -> dict:
    if not trajectory:
        raise ValueError("run_summary needs a non-empty trajectory")
    ind = [r.independent_layers for r in trajectory]
    params = [r.trainable_params for r in trajectory]
    out = {
        "records": len(trajectory),
        "controller_invocations": sum(r.epsilon is not None for r in trajectory),
        "mean_independent_layers": float(np.mean(ind)),
        "final_independent_layers": ind[-1],
        "mean_trainable_params": float(np.mean(params)),
        "final_trainable_params": params[-1],
        "total_tied_events": sum(r.tied_count for r in trajectory),
        "total_untied_events": sum(r.untied_count for r in trajectory),
        "final_state": list(trajectory[-1].s),
        "best_val_ppl": best_val_ppl,
    }
    if n_layers is not None:
        out["n_layers"] = n_layers
    return out


class _Sinks:
    """Append-only run directory writer; a no-op when no directory is given."""

    def __init__(self, run_dir: Path | None):
        self.run_dir = run_dir
        if run_dir is None:
            return
        run_dir.mkdir(parents=True, exist_ok=True)
        for name in ("trajectory.jsonl", "evals.jsonl", "timing.jsonl"):
            (run_dir / name).write_text("")

    def _append(self, name: str, line: str) -> None:
        if self.run_dir is not None:
            with open(self.run_dir / name, "a") as fh:
                fh.write(line + "\n")

    def record(self, rec: TrajectoryRecord) -> None:
        self._append("trajectory.jsonl", rec.to_json())
        self._append("timing.jsonl", json.dumps({"step": rec.step, "wall_time": rec.wall_time}))

    def eval(self, entry: dict) -> None:
        self._append("evals.jsonl", json.dumps(entry))

    def checkpoint(self, store: ParameterStore, name: str, step: int, extra: dict | None = None):
        if self.run_dir is not None:
            save_checkpoint(store, self.run_dir / "checkpoints" / name, step, extra)

    def json(self, name: str, obj: dict) -> None:
        if self.run_dir is not None:
            (self.run_dir / name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _initial_store(cfg: RunConfig) -> ParameterStore:
    t = cfg.trainer
    if t.mode == "conventional":
        return init_conventional(cfg.model)
    if t.mode == "fixed_pattern":
        spec = ablations.PatternSpec(
            t.pattern, cfg.model.n_layers,
            tuple(t.custom_state) if t.custom_state is not None else None,
        )
        return init_with_state(cfg.model, ablations.pattern_state(spec))
    return init_model(cfg.model, frozen_init=not t.all_trainable_init, share_storage=not t.no_tie)


Observer = Callable[[str, int, ParameterStore], None]


def train(cfg: RunConfig, corpus: Corpus, run_dir: str | Path | None = None,
          progress: bool = False, observer: Observer | None = None) -> RunResult:
    """Run one training job.

    ``observer(event, step, store)`` is called after every optimizer step
    (``"optimizer"``) and after every change of tying state (``"tying"``).
    """
    cfg.validate()
    t, mcfg = cfg.trainer, cfg.model
    ccfg: ControllerConfig = cfg.controller
    L, k, C = mcfg.n_layers, t.controller_period, mcfg.context_length
    sinks = _Sinks(Path(run_dir) if run_dir is not None else None)
    sinks.json("config.json", cfg.to_dict())
    if sinks.run_dir is not None:
        write_split_sidecar(corpus, sinks.run_dir / "split.json")

    data_ss, ctrl_ss, reward_ss = np.random.SeedSequence(t.seed).spawn(3)
    data_rng = np.random.default_rng(data_ss)
    ctrl_rng = np.random.default_rng(ctrl_ss)
    reward_rng = np.random.default_rng(reward_ss)

    store = _initial_store(cfg)
    adam = AdamConfig(lr=t.lr)
    net = QNet(L, ccfg.hidden, ccfg.seed) if t.mode == "dynamic" else None
    schedule: dict[int, TyingState] = {}
    if t.mode == "replay":
        schedule = ablations.replay_schedule(
            ablations.load_trajectory(t.replay_trajectory), L, t.permutation
        )

    steps_per_epoch = max(1, corpus.split // (t.batch_size * C))
    eval_every = t.eval_every or steps_per_epoch
    s: TyingState = store.tying
    first = t.mode in ("dynamic", "replay")
    trajectory: list[TrajectoryRecord] = []
    evals: list[dict] = []
    best_ppl, best_step = math.inf, None
    t0 = time.perf_counter()

    for step in range(1, t.steps + 1):
        batch = sample_batch(corpus, t.batch_size, C, data_rng)
        try:
            loss, grads = loss_and_grads(store, batch)
        except TrainingStepError as exc:
            raise TrainingStepError(f"step {step}: {exc}") from exc
        optimizer_step(store, grads, adam)
        if observer is not None:
            observer("optimizer", step, store)
        train_ppl = ppl_from_ce(loss, t.ppl_ceiling)

        rec = None
        if t.mode == "dynamic" and step % k == 0:
            eps = ccfg.epsilon
            a = policy(net, s, ccfg, ctrl_rng)
            s_next = canonicalize(a)
            diff = apply_state(store, s, s_next,
                               first_transition=first and not t.literal_first_transition)
            first = False
            rb = sample_batch(corpus, t.batch_size, C, reward_rng)
            r_step = reward(store, rb, ccfg.reward, t.ppl_ceiling)
            predicted = q_value(net, s, a)
            try:
                target = bellman_target(r_step, ccfg, net, s_next)
                qloss = q_update(net, s, a, target, ccfg.learning_rate)
            except ControllerStepError as exc:
                log.warning("step %d: controller update skipped: %s", step, exc)
                target, qloss = None, None
            rec = TrajectoryRecord(
                step, list(s_next), list(a), r_step, predicted, target, qloss, eps,
                diff.tied_count, diff.untied_count, count_independent(s_next),
                trainable_param_count(store), train_ppl,
            )
            s = s_next
            ccfg = decay_epsilon(ccfg)
        elif t.mode == "replay" and step in schedule:
            s_next = schedule[step]
            diff = apply_state(store, s, s_next,
                               first_transition=first and not t.literal_first_transition)
            first = False
            rec = TrajectoryRecord(
                step, list(s_next), list(s_next), None, None, None, None, None,
                diff.tied_count, diff.untied_count, count_independent(s_next),
                trainable_param_count(store), train_ppl,
            )
            s = s_next
        elif t.mode in ("conventional", "fixed_pattern") and step % k == 0:
            rec = TrajectoryRecord(
                step, list(s), list(s), None, None, None, None, None, 0, 0,
                count_independent(s), trainable_param_count(store), train_ppl,
            )

        if rec is not None:
            if observer is not None and t.mode in ("dynamic", "replay"):
                observer("tying", step, store)
            rec.wall_time = time.perf_counter() - t0
            trajectory.append(rec)
            sinks.record(rec)
            if progress:
                log.info("step %d s=%s ppl=%.2f eps=%s", step, rec.s, train_ppl, rec.epsilon)

        if step % eval_every == 0 or step == t.steps:
            val = evaluate(store, corpus, t.batch_size, C, t.max_eval_batches, t.ppl_ceiling)
            entry = {"step": step, "val_ppl": val, "state": list(s)}
            evals.append(entry)
            sinks.eval(entry)
            if val < best_ppl:
                best_ppl, best_step = val, step
                sinks.checkpoint(store, "best", step, {"val_ppl": val})
            if progress:
                log.info("step %d val_ppl=%.3f", step, val)

    sinks.checkpoint(store, "final", t.steps, {"val_ppl": evals[-1]["val_ppl"]})
    if net is not None and sinks.run_dir is not None:
        save_qnet(net, sinks.run_dir / "checkpoints" / "qnet", t.steps)

    summary = run_summary(trajectory, best_ppl, L) if trajectory else {
        "records": 0, "controller_invocations": 0, "best_val_ppl": best_ppl,
        "final_state": list(s), "n_layers": L,
    }
    summary.update({
        "mode": t.mode,
        "steps": t.steps,
        "best_val_step": best_step,
        "final_val_ppl": evals[-1]["val_ppl"],
        "final_block_params": trainable_param_count(store) - shared_param_count(mcfg),
        "layer_param_count": layer_param_count(mcfg),
        "wall_time": time.perf_counter() - t0,
    })
    sinks.json("summary.json", summary)
    return RunResult(summary, trajectory, evals, store, net, sinks.run_dir)

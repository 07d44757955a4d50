"""Decoder-only transformer with a tying-aware parameter store.

Every stack position ``i`` reads its weights from ``store.slots[i]``, a
:class:`ParamSet`.  Tied layers hold a reference to the *same* ParamSet, so
they are bit-identical by construction and autograd accumulates the
gradients of all stack positions into the shared tensors.  Untying clones
the tensors and starts fresh Adam moments.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .tying import EventDiff, TyingState, all_independent, all_tied, diff_events, validate_state

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1

# Order fixes the flattening used by checkpoints, layer_bytes and reports.
LAYER_PARAM_NAMES = (
    "ln1.weight", "ln1.bias",
    "attn.q.weight", "attn.q.bias",
    "attn.k.weight", "attn.k.bias",
    "attn.v.weight", "attn.v.bias",
    "attn.out.weight", "attn.out.bias",
    "ln2.weight", "ln2.bias",
    "ffn.up.weight", "ffn.up.bias",
    "ffn.down.weight", "ffn.down.bias",
)


class ModelError(ValueError):
    pass


class TrainingStepError(RuntimeError):
    """Non-finite loss or similar numerical failure during a training step."""


class StaleGradientError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 6
    d_model: int = 128
    n_heads: int = 4
    d_ffn: int = 512
    vocab_size: int = 256
    context_length: int = 64
    seed: int = 0
    tie_embedding_to_head: bool = False
    init_std: float = 0.02
    dtype: str = "float32"

    def validate(self) -> "ModelConfig":
        for name in ("n_layers", "d_model", "n_heads", "d_ffn", "vocab_size", "context_length"):
            if getattr(self, name) < 1:
                raise ModelError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ModelError(
                f"model.d_model ({self.d_model}) must be divisible by model.n_heads ({self.n_heads})"
            )
        if self.dtype not in ("float32", "float64"):
            raise ModelError(f"model.dtype must be float32 or float64, got {self.dtype!r}")
        return self

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def layer_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, f = cfg.d_model, cfg.d_ffn
    return {
        "ln1.weight": (d,), "ln1.bias": (d,),
        "attn.q.weight": (d, d), "attn.q.bias": (d,),
        "attn.k.weight": (d, d), "attn.k.bias": (d,),
        "attn.v.weight": (d, d), "attn.v.bias": (d,),
        "attn.out.weight": (d, d), "attn.out.bias": (d,),
        "ln2.weight": (d,), "ln2.bias": (d,),
        "ffn.up.weight": (f, d), "ffn.up.bias": (f,),
        "ffn.down.weight": (d, f), "ffn.down.bias": (d,),
    }


def shared_param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {
        "tok_emb": (cfg.vocab_size, cfg.d_model),
        "pos_emb": (cfg.context_length, cfg.d_model),
        "ln_f.weight": (cfg.d_model,),
        "ln_f.bias": (cfg.d_model,),
    }
    if not cfg.tie_embedding_to_head:
        shapes["head.weight"] = (cfg.vocab_size, cfg.d_model)
    return shapes


def layer_param_count(cfg: ModelConfig) -> int:
    """Analytic size of one layer parameter set."""
    d, f = cfg.d_model, cfg.d_ffn
    return 4 * (d * d + d) + (d * f + f) + (f * d + d) + 2 * (2 * d)


def shared_param_count(cfg: ModelConfig) -> int:
    d, v = cfg.d_model, cfg.vocab_size
    head = 0 if cfg.tie_embedding_to_head else v * d
    return v * d + cfg.context_length * d + 2 * d + head


class ParamSet:
    """Named tensors plus their Adam state.

    The moments live with the tensors so that aliasing a ParamSet also
    shares its optimizer state, and cloning one starts from zero moments.
    """

    def __init__(self, tensors: dict[str, torch.Tensor]):
        self.tensors = tensors
        self.exp_avg = {k: torch.zeros_like(t) for k, t in tensors.items()}
        self.exp_avg_sq = {k: torch.zeros_like(t) for k, t in tensors.items()}
        self.steps = 0

    def clone(self) -> "ParamSet":
        return ParamSet(
            {k: t.detach().clone().requires_grad_(True) for k, t in self.tensors.items()}
        )

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def to_bytes(self) -> bytes:
        return b"".join(self.tensors[k].detach().numpy().tobytes() for k in self.tensors)

    def reset_moments(self) -> None:
        for k in self.tensors:
            self.exp_avg[k].zero_()
            self.exp_avg_sq[k].zero_()
        self.steps = 0


def _init_tensors(shapes: dict[str, tuple[int, ...]], cfg: ModelConfig, gen: torch.Generator):
    out = {}
    for name, shape in shapes.items():
        if name.startswith("ln") and name.endswith("weight"):
            t = torch.ones(shape, dtype=cfg.torch_dtype)
        elif name.endswith("bias"):
            t = torch.zeros(shape, dtype=cfg.torch_dtype)
        else:
            t = torch.randn(shape, generator=gen, dtype=cfg.torch_dtype) * cfg.init_std
        out[name] = t.requires_grad_(True)
    return out


class ParameterStore:
    """All model parameters, the tying bookkeeping and the freeze flags.

    ``slots[i]`` is the ParamSet used at stack position ``i``.  ``tying`` is
    the canonical state the controller believes in; after the first
    transition (forced mode) ``slots[i] is slots[tying[i]]`` for every layer.
    """

    def __init__(self, cfg: ModelConfig, slots: list[ParamSet], shared: ParamSet,
                 tying: TyingState, frozen: list[bool], share_storage: bool = True):
        self.cfg = cfg
        self.slots = slots
        self.shared = shared
        self.tying = tuple(tying)
        self.frozen = list(frozen)
        self.share_storage = share_storage
        self.version = 0

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    def storage_index(self) -> list[int]:
        """For each layer, the lowest layer index sharing its ParamSet."""
        first: dict[int, int] = {}
        out = []
        for i, ps in enumerate(self.slots):
            out.append(first.setdefault(id(ps), i))
        return out

    @property
    def group_params(self) -> dict[int, ParamSet]:
        idx = self.storage_index()
        return {i: self.slots[i] for i in range(self.n_layers) if idx[i] == i}

    def trainable_sets(self) -> list[ParamSet]:
        """Distinct block ParamSets used by at least one unfrozen layer, by storage order."""
        seen, out = set(), []
        for ps, frozen in zip(self.slots, self.frozen):
            if not frozen and id(ps) not in seen:
                seen.add(id(ps))
                out.append(ps)
        return out

    def trainable_layer_sets(self) -> int:
        return len(self.trainable_sets())

    def layer_bytes(self, i: int) -> bytes:
        return self.slots[i].to_bytes()

    def head_weight(self) -> torch.Tensor:
        if self.cfg.tie_embedding_to_head:
            return self.shared.tensors["tok_emb"]
        return self.shared.tensors["head.weight"]


def init_model(cfg: ModelConfig, *, frozen_init: bool = True,
               share_storage: bool = True) -> ParameterStore:
    """Fresh store: independent random layers, all-zero tying bookkeeping.

    With ``frozen_init`` only layer 0 trains until the first transition.
    """
    cfg.validate()
    gen = torch.Generator().manual_seed(cfg.seed)
    shared = ParamSet(_init_tensors(shared_param_shapes(cfg), cfg, gen))
    shapes = layer_param_shapes(cfg)
    slots = [ParamSet(_init_tensors(shapes, cfg, gen)) for _ in range(cfg.n_layers)]
    frozen = [frozen_init and i > 0 for i in range(cfg.n_layers)]
    return ParameterStore(cfg, slots, shared, all_tied(cfg.n_layers), frozen, share_storage)


def init_conventional(cfg: ModelConfig) -> ParameterStore:
    store = init_model(cfg, frozen_init=False)
    store.tying = all_independent(cfg.n_layers)
    return store


def init_with_state(cfg: ModelConfig, state: Sequence[int]) -> ParameterStore:
    """Static architecture: layers tied per ``state`` from step 0, all trainable."""
    s = validate_state(state)
    if len(s) != cfg.n_layers:
        raise ModelError(f"state has {len(s)} entries, model has {cfg.n_layers} layers")
    store = init_model(cfg, frozen_init=False)
    store.slots = [store.slots[rep] for rep in s]
    store.tying = s
    return store


def apply_state(store: ParameterStore, s_old: Sequence[int], s_new: Sequence[int],
                first_transition: bool = False) -> EventDiff:
    """Move the store from tying ``s_old`` to ``s_new``.

    Layers are visited in ascending order, so a tie target ``s_new[i] < i``
    already holds its final storage.  With ``first_transition`` every layer is
    first aligned to layer 0 (the all-zero bookkeeping state) before the
    changes are applied, and all layers are unfrozen afterwards.
    """
    s_old = validate_state(s_old)
    s_new = validate_state(s_new)
    L = store.n_layers
    if len(s_old) != L or len(s_new) != L:
        raise ModelError(f"state length must be {L}, got {len(s_old)} and {len(s_new)}")
    events = diff_events(s_old, s_new)
    changed = False

    if first_transition:
        if any(s_old):
            raise ModelError("first transition expects the all-zero state")
        root = store.slots[0]
        for i in range(1, L):
            store.slots[i] = root if store.share_storage else root.clone()
        store.frozen = [False] * L
        changed = True

    for i in range(L):
        if s_new[i] == s_old[i]:
            continue
        changed = True
        if s_new[i] == i:
            if store.share_storage:
                store.slots[i] = store.slots[i].clone()
            else:
                store.slots[i].reset_moments()
        else:
            src = store.slots[s_new[i]]
            store.slots[i] = src if store.share_storage else src.clone()
        store.frozen[i] = False

    store.tying = s_new
    if changed:
        store.version += 1
    return events


def _check_inputs(store: ParameterStore, inputs: torch.Tensor) -> torch.Tensor:
    inputs = torch.as_tensor(inputs, dtype=torch.long)
    if inputs.dim() != 2:
        raise ModelError(f"inputs must be (batch, time), got shape {tuple(inputs.shape)}")
    if inputs.shape[1] > store.cfg.context_length:
        raise ModelError(
            f"sequence length {inputs.shape[1]} exceeds context_length {store.cfg.context_length}"
        )
    if inputs.numel() and (int(inputs.min()) < 0 or int(inputs.max()) >= store.cfg.vocab_size):
        raise ModelError(f"token ids must lie in [0, {store.cfg.vocab_size})")
    return inputs


def block_forward(p: dict[str, torch.Tensor], x: torch.Tensor, n_heads: int) -> torch.Tensor:
    """Pre-LN residual block: causal self-attention then a GELU feed-forward."""
    B, T, d = x.shape
    hd = d // n_heads
    h = F.layer_norm(x, (d,), p["ln1.weight"], p["ln1.bias"])

    def heads(w, b):
        return F.linear(h, p[w], p[b]).view(B, T, n_heads, hd).transpose(1, 2)

    q = heads("attn.q.weight", "attn.q.bias")
    k = heads("attn.k.weight", "attn.k.bias")
    v = heads("attn.v.weight", "attn.v.bias")
    att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
    causal = torch.ones(T, T, dtype=torch.bool).tril()
    att = att.masked_fill(~causal, float("-inf")).softmax(dim=-1)
    y = (att @ v).transpose(1, 2).reshape(B, T, d)
    x = x + F.linear(y, p["attn.out.weight"], p["attn.out.bias"])
    h = F.layer_norm(x, (d,), p["ln2.weight"], p["ln2.bias"])
    h = F.gelu(F.linear(h, p["ffn.up.weight"], p["ffn.up.bias"]))
    return x + F.linear(h, p["ffn.down.weight"], p["ffn.down.bias"])


def forward(store: ParameterStore, inputs) -> torch.Tensor:
    """Logits of shape (batch, time, vocab)."""
    inputs = _check_inputs(store, inputs)
    sh = store.shared.tensors
    T = inputs.shape[1]
    x = sh["tok_emb"][inputs] + sh["pos_emb"][:T]
    for ps in store.slots:
        x = block_forward(ps.tensors, x, store.cfg.n_heads)
    x = F.layer_norm(x, (store.cfg.d_model,), sh["ln_f.weight"], sh["ln_f.bias"])
    return F.linear(x, store.head_weight())


def cross_entropy(store: ParameterStore, inputs, targets) -> torch.Tensor:
    logits = forward(store, inputs)
    targets = torch.as_tensor(targets, dtype=torch.long)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))


@dataclass
class Gradients:
    """Gradients for the trainable ParamSets of one store version."""

    version: int
    entries: list[tuple[ParamSet, dict[str, torch.Tensor]]] = field(default_factory=list)

    def flat(self) -> torch.Tensor:
        return torch.cat([g.reshape(-1) for _, gs in self.entries for g in gs.values()])


def loss_and_grads(store: ParameterStore, batch) -> tuple[float, Gradients]:
    """Mean token cross-entropy and gradients w.r.t. every trainable ParamSet.

    Frozen sets get no entry.  A ParamSet shared by several layers appears
    once, carrying the sum over its stack positions.
    """
    sets = [store.shared] + store.trainable_sets()
    loss = cross_entropy(store, batch.inputs, batch.targets)
    if not torch.isfinite(loss):
        raise TrainingStepError(
            f"non-finite loss {float(loss)} (tying={list(store.tying)}, version={store.version})"
        )
    flat = [t for ps in sets for t in ps.tensors.values()]
    grads = torch.autograd.grad(loss, flat, allow_unused=True)
    out = Gradients(store.version)
    it = iter(grads)
    for ps in sets:
        gs = {}
        for name, t in ps.tensors.items():
            g = next(it)
            gs[name] = torch.zeros_like(t) if g is None else g
        out.entries.append((ps, gs))
    return float(loss.detach()), out


@dataclass
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_update(ps: ParamSet, grads: dict[str, torch.Tensor], opt: AdamConfig) -> None:
    ps.steps += 1
    bc1 = 1.0 - opt.beta1 ** ps.steps
    bc2 = 1.0 - opt.beta2 ** ps.steps
    with torch.no_grad():
        for name, g in grads.items():
            m, v = ps.exp_avg[name], ps.exp_avg_sq[name]
            m.mul_(opt.beta1).add_(g, alpha=1.0 - opt.beta1)
            v.mul_(opt.beta2).addcmul_(g, g, value=1.0 - opt.beta2)
            denom = (v / bc2).sqrt_().add_(opt.eps)
            ps.tensors[name].addcdiv_(m, denom, value=-opt.lr / bc1)


def optimizer_step(store: ParameterStore, grads: Gradients, opt: AdamConfig | float) -> None:
    """One Adam update per ParamSet (not per stack position)."""
    if not isinstance(opt, AdamConfig):
        opt = AdamConfig(lr=float(opt))
    if grads.version != store.version:
        raise StaleGradientError(
            f"gradients computed for store version {grads.version}, store is at {store.version}"
        )
    allowed = {id(store.shared)} | {id(ps) for ps in store.trainable_sets()}
    for ps, gs in grads.entries:
        if id(ps) not in allowed:
            raise StaleGradientError("gradient entry refers to a frozen or detached parameter set")
        adam_update(ps, gs, opt)


def perplexity(store: ParameterStore, batch, ceiling: float = 1e6) -> float:
    with torch.no_grad():
        ce = float(cross_entropy(store, batch.inputs, batch.targets))
    return ppl_from_ce(ce, ceiling)


def ppl_from_ce(ce: float, ceiling: float = 1e6) -> float:
    if not math.isfinite(ce) or ce > math.log(ceiling):
        log.warning("perplexity overflow (cross-entropy %s); clamped to %g", ce, ceiling)
        return float(ceiling)
    return math.exp(ce)


def trainable_param_count(store: ParameterStore) -> int:
    return sum(ps.numel() for ps in store.trainable_sets()) + store.shared.numel()


def block_param_count(store: ParameterStore) -> int:
    return sum(ps.numel() for ps in store.trainable_sets())


# Checkpoints: <stem>.json manifest + <stem>.bin raw little-endian payload.

def _payload_dtype(cfg: ModelConfig) -> np.dtype:
    return np.dtype("<f8" if cfg.dtype == "float64" else "<f4")


def save_checkpoint(store: ParameterStore, stem: str | Path, step: int,
                    extra: dict | None = None) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    idx = store.storage_index()
    np_dtype = _payload_dtype(store.cfg)
    entries, chunks, offset = [], [], 0

    def add(section: str, ps: ParamSet):
        nonlocal offset
        for name, t in ps.tensors.items():
            raw = t.detach().numpy().astype(np_dtype).tobytes()
            entries.append({"section": section, "name": name, "shape": list(t.shape),
                            "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)

    for rep in sorted(set(idx)):
        add(f"group.{rep}", store.slots[rep])
    add("shared", store.shared)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "config": asdict(store.cfg),
        "step": int(step),
        "tying": list(store.tying),
        "storage": idx,
        "frozen": list(store.frozen),
        "share_storage": store.share_storage,
        "dtype": store.cfg.dtype,
        "tensors": entries,
    }
    if extra:
        manifest["extra"] = extra
    stem.with_suffix(".bin").write_bytes(b"".join(chunks))
    stem.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return stem.with_suffix(".json")


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict]:
    path = Path(path)
    stem = path.with_suffix("")
    manifest = json.loads(stem.with_suffix(".json").read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"unsupported checkpoint format {manifest.get('format')!r}")
    cfg = ModelConfig(**manifest["config"]).validate()
    payload = stem.with_suffix(".bin").read_bytes()
    np_dtype = _payload_dtype(cfg)
    sections: dict[str, dict[str, torch.Tensor]] = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(payload, dtype=np_dtype, count=e["nbytes"] // np_dtype.itemsize,
                            offset=e["offset"]).reshape(e["shape"])
        t = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="))).requires_grad_(True)
        sections.setdefault(e["section"], {})[e["name"]] = t
    groups = {int(k.split(".")[1]): ParamSet(v) for k, v in sections.items() if k.startswith("group.")}
    slots = [groups[j] for j in manifest["storage"]]
    store = ParameterStore(cfg, slots, ParamSet(sections["shared"]), tuple(manifest["tying"]),
                           manifest["frozen"], manifest.get("share_storage", True))
    return store, manifest


import math

import numpy as np
import pytest
import torch

from layertie.data import Batch
from layertie.model import (
    AdamConfig,
    ModelConfig,
    ModelError,
    ParamSet,
    StaleGradientError,
    adam_update,
    apply_state,
    block_param_count,
    forward,
    init_conventional,
    init_model,
    init_with_state,
    layer_param_count,
    load_checkpoint,
    loss_and_grads,
    optimizer_step,
    perplexity,
    save_checkpoint,
    shared_param_count,
    trainable_param_count,
)
from layertie.trainer import expected_trainable_params
from layertie.tying import canonicalize, count_independent, groups, uniform_random_action

from oracles import central_difference, rel_error


def store_bytes(store):
    return [store.layer_bytes(i) for i in range(store.n_layers)], store.shared.to_bytes()


def random_batch(cfg, b=2, t=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    w = torch.randint(0, cfg.vocab_size, (b, t + 1), generator=g)
    return Batch(w[:, :-1], w[:, 1:])


def test_init_only_layer_zero_trains(tiny_cfg):
    store = init_model(tiny_cfg)
    assert store.trainable_layer_sets() == 1
    assert len(store.trainable_sets()) == 1
    assert store.tying == (0, 0)
    assert store.frozen == [False, True]


def test_init_deterministic(tiny_cfg):
    assert store_bytes(init_model(tiny_cfg)) == store_bytes(init_model(tiny_cfg))


def test_init_rejects_bad_config():
    with pytest.raises(ModelError):
        init_model(ModelConfig(d_model=10, n_heads=4))


def test_frozen_layers_unchanged_by_training(tiny_cfg):
    cfg = ModelConfig(**{**tiny_cfg.__dict__, "n_layers": 3})
    store = init_model(cfg)
    frozen_before = [store.layer_bytes(i) for i in (1, 2)]
    layer0 = store.layer_bytes(0)
    for step in range(100):
        _, g = loss_and_grads(store, random_batch(cfg, seed=step))
        optimizer_step(store, g, 1e-3)
    assert [store.layer_bytes(i) for i in (1, 2)] == frozen_before
    assert store.layer_bytes(0) != layer0


def test_tie_aliases_storage(tiny_cfg):
    store = init_conventional(tiny_cfg)
    ev = apply_state(store, (0, 1), (0, 0))
    assert ev.tied_events == (1,)
    assert store.slots[1] is store.slots[0]
    x = torch.randn(2, 5, tiny_cfg.d_model, dtype=torch.float64)
    from layertie.model import block_forward

    assert torch.equal(block_forward(store.slots[0].tensors, x, 2),
                       block_forward(store.slots[1].tensors, x, 2))


def test_untie_copies_then_drifts(tiny_cfg):
    store = init_model(tiny_cfg)
    apply_state(store, (0, 0), (0, 0), first_transition=True)
    assert store.slots[1] is store.slots[0]
    ev = apply_state(store, (0, 0), (0, 1))
    assert ev.untied_events == (1,)
    assert store.slots[1] is not store.slots[0]
    assert store.layer_bytes(0) == store.layer_bytes(1)
    assert store.slots[1].steps == 0
    for step in range(5):
        _, g = loss_and_grads(store, random_batch(tiny_cfg, seed=step))
        optimizer_step(store, g, 1e-3)
    assert store.layer_bytes(0) != store.layer_bytes(1)


def test_apply_same_state_is_noop(tiny_cfg):
    store = init_conventional(tiny_cfg)
    apply_state(store, (0, 1), (0, 0))
    before = store_bytes(store)
    version = store.version
    batch = random_batch(tiny_cfg)
    out = forward(store, batch.inputs)
    ev = apply_state(store, (0, 0), (0, 0))
    assert not ev
    assert store.version == version
    assert store_bytes(store) == before
    assert torch.equal(forward(store, batch.inputs), out)


def test_first_transition_aligns_to_layer_zero():
    cfg = ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ffn=32, vocab_size=16,
                      context_length=8, dtype="float64")
    store = init_model(cfg)
    layer0 = store.layer_bytes(0)
    ev = apply_state(store, (0, 0, 0, 0), (0, 1, 1, 0), first_transition=True)
    assert ev.untied_events == (1,) and ev.tied_events == (2,)
    assert store.frozen == [False] * 4
    assert all(store.layer_bytes(i) == layer0 for i in range(4))
    assert store.slots[3] is store.slots[0]
    assert store.slots[2] is store.slots[1] and store.slots[1] is not store.slots[0]


def test_literal_first_transition_leaves_unchanged_layers_frozen():
    cfg = ModelConfig(n_layers=3, d_model=16, n_heads=2, d_ffn=32, vocab_size=16,
                      context_length=8, dtype="float64")
    store = init_model(cfg)
    own2 = store.layer_bytes(2)
    apply_state(store, (0, 0, 0), (0, 1, 0), first_transition=False)
    assert store.frozen == [False, False, True]
    assert store.layer_bytes(2) == own2


def test_forward_shape_and_errors(tiny_cfg):
    store = init_model(tiny_cfg)
    assert forward(store, torch.zeros(2, 8, dtype=torch.long)).shape == (2, 8, 16)
    with pytest.raises(ModelError):
        forward(store, torch.zeros(1, 9, dtype=torch.long))
    with pytest.raises(ModelError):
        forward(store, torch.full((1, 3), 16))


def test_causality(tiny_cfg):
    store = init_conventional(tiny_cfg)
    x = random_batch(tiny_cfg, b=1, t=8).inputs
    base = forward(store, x)
    for t in range(8):
        y = x.clone()
        y[0, t] = (y[0, t] + 1) % tiny_cfg.vocab_size
        out = forward(store, y)
        assert torch.equal(out[0, :t], base[0, :t])
        assert not torch.equal(out[0, t:], base[0, t:])


def test_tied_stack_equals_repeated_single_layer():
    cfg = ModelConfig(n_layers=3, d_model=16, n_heads=2, d_ffn=32, vocab_size=16,
                      context_length=8, dtype="float64")
    store = init_with_state(cfg, (0, 0, 0))
    one = init_model(ModelConfig(**{**cfg.__dict__, "n_layers": 1}))
    one.shared = store.shared
    one.slots = [store.slots[0]]
    x = random_batch(cfg).inputs
    from layertie.model import block_forward
    import torch.nn.functional as F

    sh = store.shared.tensors
    h = sh["tok_emb"][x] + sh["pos_emb"][: x.shape[1]]
    for _ in range(3):
        h = block_forward(one.slots[0].tensors, h, cfg.n_heads)
    h = F.layer_norm(h, (16,), sh["ln_f.weight"], sh["ln_f.bias"])
    assert torch.equal(F.linear(h, sh["head.weight"]), forward(store, x))


def test_uniform_logits_loss_is_log_vocab(tiny_cfg):
    store = init_model(tiny_cfg)
    with torch.no_grad():
        store.shared.tensors["head.weight"].zero_()
    loss, _ = loss_and_grads(store, random_batch(tiny_cfg))
    assert loss == pytest.approx(math.log(16), abs=1e-12)


def _grad_check(store, batch):
    loss, grads = loss_and_grads(store, batch)
    worst = 0.0
    for ps, gs in grads.entries:
        for name, g in gs.items():
            arr = ps.tensors[name].detach().numpy()

            def f():
                with torch.no_grad():
                    from layertie.model import cross_entropy

                    return float(cross_entropy(store, batch.inputs, batch.targets))

            fd = central_difference(f, arr)
            if np.abs(fd).max() < 1e-9 and g.abs().max() < 1e-9:
                # key biases shift every score of a row equally: true gradient is zero
                continue
            err = rel_error(g.numpy(), fd)
            worst = max(worst, err)
            assert err < 1e-4, (name, err)
    return worst


def test_gradients_tied_model_match_finite_differences(tiny_cfg, tiny_batch):
    store = init_model(tiny_cfg)
    apply_state(store, (0, 0), (0, 0), first_transition=True)
    assert len(store.trainable_sets()) == 1
    _grad_check(store, tiny_batch)


def test_gradients_with_frozen_layers(tiny_cfg, tiny_batch):
    store = init_model(tiny_cfg)
    _, grads = loss_and_grads(store, tiny_batch)
    assert all(ps is not store.slots[1] for ps, _ in grads.entries)
    _grad_check(store, tiny_batch)


def test_tied_gradient_is_sum_of_untied(tiny_cfg, tiny_batch):
    tied = init_model(tiny_cfg)
    apply_state(tied, (0, 0), (0, 0), first_transition=True)
    untied = init_model(tiny_cfg)
    apply_state(untied, (0, 0), (0, 1), first_transition=True)
    assert untied.layer_bytes(0) == untied.layer_bytes(1) == tied.layer_bytes(0)
    _, gt = loss_and_grads(tied, tiny_batch)
    _, gu = loss_and_grads(untied, tiny_batch)
    shared_t = dict(gt.entries[1][1])
    l0, l1 = gu.entries[1][1], gu.entries[2][1]
    for name in shared_t:
        assert torch.allclose(shared_t[name], l0[name] + l1[name], rtol=1e-10, atol=1e-13)


def test_zero_gradients_leave_parameters(tiny_cfg, tiny_batch):
    store = init_conventional(tiny_cfg)
    before = store_bytes(store)
    _, g = loss_and_grads(store, tiny_batch)
    for _, gs in g.entries:
        for v in gs.values():
            v.zero_()
    optimizer_step(store, g, 1e-3)
    assert store_bytes(store) == before


def test_tied_layers_stay_identical(tiny_cfg):
    cfg = ModelConfig(**{**tiny_cfg.__dict__, "n_layers": 4})
    store = init_with_state(cfg, (0, 1, 0, 1))
    for step in range(20):
        _, g = loss_and_grads(store, random_batch(cfg, seed=step))
        optimizer_step(store, g, 1e-2)
        assert store.layer_bytes(0) == store.layer_bytes(2)
        assert store.layer_bytes(1) == store.layer_bytes(3)


def test_adam_quadratic_convergence():
    ps = ParamSet({"x": torch.tensor([1.0], dtype=torch.float64)})
    losses = []
    for _ in range(2000):
        x = ps.tensors["x"]
        losses.append(float(x.detach() ** 2))
        adam_update(ps, {"x": 2 * x.detach()}, AdamConfig(lr=1e-2))
    assert min(losses) < 1e-8
    assert losses[-1] < 1e-8


def test_stale_gradients_rejected(tiny_cfg, tiny_batch):
    store = init_conventional(tiny_cfg)
    _, g = loss_and_grads(store, tiny_batch)
    apply_state(store, (0, 1), (0, 0))
    with pytest.raises(StaleGradientError):
        optimizer_step(store, g, 1e-3)


def test_perplexity_uniform_is_vocab():
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ffn=32, vocab_size=256,
                      context_length=8, dtype="float64")
    store = init_model(cfg)
    with torch.no_grad():
        store.shared.tensors["head.weight"].zero_()
    assert perplexity(store, random_batch(cfg)) == pytest.approx(256.0, rel=1e-12)


def test_perplexity_perfect_prediction(tiny_cfg):
    store = init_model(tiny_cfg)
    b = torch.zeros(tiny_cfg.d_model, dtype=torch.float64)
    b[0] = 1.0
    with torch.no_grad():
        store.shared.tensors["ln_f.weight"].zero_()
        store.shared.tensors["ln_f.bias"].copy_(b)
        head = store.shared.tensors["head.weight"]
        head.zero_()
        head[3, 0] = 200.0
    tokens = torch.full((2, 6), 3)
    assert perplexity(store, Batch(tokens, tokens)) == 1.0


def test_perplexity_is_exp_of_loss(tiny_cfg, tiny_batch):
    store = init_model(tiny_cfg)
    loss, _ = loss_and_grads(store, tiny_batch)
    assert perplexity(store, tiny_batch) == math.exp(loss)


def test_perplexity_clamped(tiny_cfg, tiny_batch):
    store = init_model(tiny_cfg)
    with torch.no_grad():
        store.shared.tensors["head.weight"].mul_(1e4)
    assert perplexity(store, tiny_batch, ceiling=100.0) == 100.0


def test_param_count_example():
    cfg = ModelConfig(n_layers=4, d_model=64, n_heads=4, d_ffn=256, context_length=16)
    assert layer_param_count(cfg) == 49_984
    store = init_conventional(cfg)
    assert block_param_count(store) == 199_936
    assert sum(t.numel() for t in store.slots[0].tensors.values()) == 49_984
    apply_state(store, (0, 1, 2, 3), (0, 0, 0, 0))
    assert block_param_count(store) == 49_984
    assert trainable_param_count(store) == 49_984 + shared_param_count(cfg)


def test_param_count_formula_matches_iteration():
    cfg = ModelConfig(n_layers=6, d_model=16, n_heads=2, d_ffn=32, vocab_size=32,
                      context_length=8)
    rng = np.random.default_rng(0)
    store = init_model(cfg)
    s = (0,) * 6
    first = True
    for _ in range(50):
        s_new = canonicalize(uniform_random_action(6, rng))
        apply_state(store, s, s_new, first_transition=first)
        first = False
        s = s_new
        assert trainable_param_count(store) == expected_trainable_params(cfg, s)
        assert trainable_param_count(store) == (
            count_independent(s) * layer_param_count(cfg) + shared_param_count(cfg)
        )
        # tied groups are bit-identical
        for g in groups(s):
            assert len({store.layer_bytes(i) for i in g}) == 1


def test_tied_head_shares_embedding():
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ffn=32, vocab_size=32,
                      context_length=8, tie_embedding_to_head=True)
    store = init_conventional(cfg)
    assert "head.weight" not in store.shared.tensors
    assert trainable_param_count(store) == 2 * layer_param_count(cfg) + shared_param_count(cfg)
    assert store.shared.numel() == shared_param_count(cfg)


def test_no_tie_storage_copies(tiny_cfg):
    store = init_model(tiny_cfg, share_storage=False)
    apply_state(store, (0, 0), (0, 0), first_transition=True)
    assert store.slots[1] is not store.slots[0]
    assert store.layer_bytes(0) == store.layer_bytes(1)
    assert trainable_param_count(store) == 2 * layer_param_count(tiny_cfg) + shared_param_count(tiny_cfg)


def test_checkpoint_roundtrip(tmp_path, tiny_batch):
    cfg = ModelConfig(n_layers=4, d_model=16, n_heads=2, d_ffn=32, vocab_size=16,
                      context_length=8, dtype="float64")
    store = init_with_state(cfg, (0, 1, 1, 0))
    save_checkpoint(store, tmp_path / "ck", step=12)
    loaded, manifest = load_checkpoint(tmp_path / "ck.json")
    assert manifest["step"] == 12 and manifest["tying"] == [0, 1, 1, 0]
    assert loaded.slots[2] is loaded.slots[1] and loaded.slots[3] is loaded.slots[0]
    assert torch.equal(forward(loaded, tiny_batch.inputs), forward(store, tiny_batch.inputs))
    save_checkpoint(loaded, tmp_path / "ck2", step=12)
    assert (tmp_path / "ck.bin").read_bytes() == (tmp_path / "ck2.bin").read_bytes()

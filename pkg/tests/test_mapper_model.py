import numpy as np
import pytest

from fofa import autograd as ag
from fofa.backbone import BackboneConfig, block_layout, block_size, flatten_block, init_block
from fofa.controller import GumbelConfig, harden
from fofa.mapper import (HEAD_INIT_SCALE, MapperWeights, extract_latent, generate_weights, heads_flops,
                         mapper_flops)
from fofa.model import MODES, ForwardOFA, ModelConfig
from fofa.rng import RngState
from fofa.training import compact_loss, rec_loss
from oracles import random_batch, small_model

BB = BackboneConfig(n_blocks=3, d=8, n_items=30, max_seq_len=12)


def test_head_initialization(gen):
    w = MapperWeights.init(gen, BB)
    assert len(w.head_w) == 3 and w.latent_size == 16
    allw = np.concatenate([h.data.ravel() for h in w.head_w])
    assert allw.std() == pytest.approx(HEAD_INIT_SCALE, rel=0.05)
    # bias is a conventionally initialized block: unit norm gains and zero biases
    names = [n for n, _ in block_layout(BB)]
    sizes = [int(np.prod(s)) for _, s in block_layout(BB)]
    parts = np.split(w.head_b[0].data, np.cumsum(sizes)[:-1])
    for name, part in zip(names, parts):
        if name.endswith("gamma"):
            assert np.all(part == 1)
        elif name.endswith(".beta") or name.startswith("b"):
            assert np.all(part == 0)
    assert w.head_b[0].data.size == block_size(BB)


def test_generated_weights_are_linear_in_latent(gen):
    w = MapperWeights.init(gen, BB)
    h = gen.normal(size=(2, 16)).astype(np.float32)
    flat = generate_weights(w, ag.Tensor(h))
    for k in range(3):
        np.testing.assert_allclose(flat[k].data, h @ w.head_w[k].data + w.head_b[k].data, rtol=1e-5, atol=1e-6)


def test_head_subset_and_order_do_not_change_outputs(gen):
    w = MapperWeights.init(gen, BB)
    h = ag.Tensor(gen.normal(size=(2, 16)).astype(np.float32))
    full = generate_weights(w, h)
    some = generate_weights(w, h, blocks=np.array([True, False, True]), order=[2, 1, 0])
    assert some[1] is None
    for k in (0, 2):
        np.testing.assert_array_equal(some[k].data, full[k].data)
    with pytest.raises(ag.NumericFault):
        generate_weights(w, ag.Tensor(np.full((1, 16), np.nan)))


def test_structure_logits_seed_the_extractor(gen):
    w = MapperWeights.init(gen, BB)
    emb = ag.Tensor(gen.normal(size=(1, 5, 8)).astype(np.float32))
    a = extract_latent(w, emb, ag.Tensor(np.zeros((1, 3, 2), np.float32))).data
    b = extract_latent(w, emb, ag.Tensor(np.ones((1, 3, 2), np.float32))).data
    assert not np.allclose(a, b)
    frozen = MapperWeights.init(gen, BB, zero_seed=True)
    assert frozen.seed_frozen and np.all(frozen.seed_w.data == 0)
    a = extract_latent(frozen, emb, ag.Tensor(np.zeros((1, 3, 2), np.float32))).data
    b = extract_latent(frozen, emb, ag.Tensor(np.ones((1, 3, 2), np.float32))).data
    np.testing.assert_array_equal(a, b)


def test_appended_token_injection_respects_padding(gen):
    w = MapperWeights.init(gen, BB, injection="appended-token")
    emb = gen.normal(size=(1, 4, 8)).astype(np.float32)
    beta = ag.Tensor(gen.normal(size=(1, 3, 2)).astype(np.float32))
    padded = np.concatenate([emb, np.zeros((1, 3, 8), np.float32)], axis=1)
    mask = np.array([[1, 1, 1, 1, 0, 0, 0]], bool)
    np.testing.assert_allclose(extract_latent(w, ag.Tensor(padded), beta, mask).data,
                               extract_latent(w, ag.Tensor(emb), beta).data, rtol=1e-5, atol=1e-6)


def test_mapper_flops_split(gen):
    w = MapperWeights.init(gen, BB)
    p = block_size(BB)
    assert heads_flops(w, 2) == 2 * (2 * 16 * p + p)
    assert mapper_flops(w, 5) - mapper_flops(w, 5, n_heads=0) == heads_flops(w, 3)


@pytest.mark.parametrize("mode", MODES)
def test_mode_parameter_sets(mode):
    model = small_model(mode)
    names = set(model.trainable())
    has_blocks = any(n.startswith("blocks.") for n in names)
    assert has_blocks == (not model.cfg.uses_mapper)
    assert any(n.startswith("controller.") for n in names) == model.cfg.uses_controller
    assert ("mapper.seed.w" in names) == (mode in ("forward-ofa", "mapper-only"))


@pytest.mark.parametrize("mode", ["forward-ofa", "no-structural-vector", "mapper-only"])
def test_head_of_an_unused_block_gets_exactly_zero_gradient(mode, gen):
    model = small_model(mode)
    inputs, mask = random_batch(gen, 30, 5, 12)
    noise = np.zeros((5, 3, 2))
    noise[:, 1, 1] = 1e3  # block 1 skipped by everyone
    gate = None
    if not model.cfg.uses_controller:
        gate = np.tile(np.array([[1, 0], [0, 1], [1, 0]], np.float32), (5, 1, 1))
    with ag.Tape():
        res = model.forward(inputs, mask, train=True, rng=RngState(0), noise=noise, gate_override=gate)
        assert np.all(res.kept(3)[:, 1] == 0)
        loss = rec_loss(model.shared.score(res.rep), np.roll(inputs, -1, axis=1), mask.astype(float))
        if res.logits is not None:
            loss = loss + compact_loss(res.logits)[0] * 0.1
        params = model.trainable()
        grads = ag.backward(loss, list(params.values()))
    assert np.all(grads[params["mapper.head1.w"]] == 0)
    assert np.all(grads[params["mapper.head1.b"]] == 0)
    assert np.any(grads[params["mapper.head0.w"]] != 0)


def test_deploy_path_matches_masked_path(gen):
    for family in ("attention", "causal-conv"):
        model = small_model("forward-ofa", family=family, seed=3)
        inputs, mask = random_batch(gen, 30, 6, 12)
        a = model.forward(inputs, mask).rep.data
        b = model.forward(inputs, mask, deploy=True).rep.data
        np.testing.assert_allclose(a[mask], b[mask], atol=1e-5)


def test_prefix_context_is_what_the_controller_sees(gen):
    model = small_model("forward-ofa")
    inputs, mask = random_batch(gen, 30, 3, 12, min_len=12)
    ctx, ctx_mask = inputs.copy(), mask.copy()
    ctx_mask[:, 4:] = False
    a = model.forward(inputs, mask, ctx, ctx_mask)
    changed = inputs.copy()
    changed[:, 4:] = (changed[:, 4:] + 7) % 30
    b = model.forward(changed, mask, changed, ctx_mask)
    np.testing.assert_array_equal(a.logits.beta.data, b.logits.beta.data)
    np.testing.assert_array_equal(a.latent.data, b.latent.data)


def test_train_forward_is_reproducible_and_gate_is_hard(gen):
    model = small_model("forward-ofa")
    inputs, mask = random_batch(gen, 30, 4, 12)
    a = model.forward(inputs, mask, train=True, rng=RngState(9), gumbel=GumbelConfig(5.0), dropout=0.2)
    b = model.forward(inputs, mask, train=True, rng=RngState(9), gumbel=GumbelConfig(5.0), dropout=0.2)
    np.testing.assert_array_equal(a.rep.data, b.rep.data)
    assert set(np.unique(a.hard)) <= {0.0, 1.0}
    np.testing.assert_array_equal(a.hard.sum(-1), 1)


def test_eval_gate_is_noiseless_argmax(gen):
    model = small_model("controller-only")
    inputs, mask = random_batch(gen, 30, 4, 12)
    res = model.forward(inputs, mask)
    np.testing.assert_array_equal(res.hard, harden(res.logits))


def test_config_roundtrip_and_validation():
    cfg = ModelConfig(BB, mode="mapper-only", d_m=24)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.latent_width == 24
    with pytest.raises(ValueError):
        ModelConfig(BB, mode="ofa")


def test_same_seed_same_weights():
    a, b = small_model(seed=4), small_model(seed=4)
    for (n, x), (_, y) in zip(a.named_tensors().items(), b.named_tensors().items()):
        np.testing.assert_array_equal(x.data, y.data, err_msg=n)
    c = small_model(seed=5)
    assert not np.array_equal(a.shared.item_emb.data, c.shared.item_emb.data)


def test_load_arrays_checks_shapes_and_names():
    model = small_model()
    arrays = {n: t.data for n, t in model.named_tensors().items()}
    arrays["shared.pos_emb"] = np.zeros((3, 3))
    with pytest.raises(ag.ShapeError):
        model.load_arrays(arrays)
    arrays.pop("shared.pos_emb")
    with pytest.raises(KeyError):
        model.load_arrays(arrays)

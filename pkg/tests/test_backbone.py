import numpy as np
import pytest

from fofa import autograd as ag
from fofa.backbone import (BackboneConfig, GateError, SharedHead, block_flops, block_param_count, encode,
                           flatten_block, flops_count, head_flops, init_block, shared_param_count,
                           unflatten_block)
from oracles import check_grads, random_batch

ATT = BackboneConfig(n_blocks=2, d=8, n_items=30, max_seq_len=10)
CONV = BackboneConfig(family="causal-conv", n_blocks=2, d=8, n_items=30, max_seq_len=10)

# Hand counts at T=10, d=8, ffn=32, 2 heads, 30 items:
#   attention block: projections 4*(2*10*8*8 + 80) = 5440; scores 1600 + scale 200 + softmax 600
#   + weighted sum 1600 = 4000; ffn 5120 + 320 + 320 + 5120 + 80 = 10960; two norms 1120;
#   residual adds 160 -> 21680
#   head: position add 80 + final norm 560 + one score row 2*8*30 = 480 -> 1120
#   conv block: 2*(2*3*8*8*10 + 80) = 7840; norms 1120; activations 160; residual 80 -> 9200
ATT_BLOCK_FLOPS = 21680
HEAD_FLOPS = 1120
CONV_BLOCK_FLOPS = 9200
# params: 4 norm vectors 32 + q,k,v,o 4*(64+8) = 288 + ffn (256+32) + (256+8) = 552 -> 872
ATT_BLOCK_PARAMS = 872
CONV_BLOCK_PARAMS = 432  # 4 norm vectors 32 + 2 * (3*8*8 + 8)


def _weights(cfg, gen, n=None):
    return [{k: ag.Tensor(v) for k, v in init_block(cfg, gen).items()} for _ in range(n or cfg.n_blocks)]


def test_flops_match_hand_counts():
    assert block_flops(ATT, 10) == ATT_BLOCK_FLOPS
    assert head_flops(ATT, 10) == HEAD_FLOPS
    assert block_flops(CONV, 10) == CONV_BLOCK_FLOPS
    assert flops_count(ATT) == 2 * ATT_BLOCK_FLOPS + HEAD_FLOPS
    assert flops_count(ATT, np.array([[0, 1], [1, 0]])) == ATT_BLOCK_FLOPS + HEAD_FLOPS
    assert flops_count(ATT, np.array([False, False])) == HEAD_FLOPS


def test_param_counts_match_hand_counts():
    assert block_param_count(ATT).per_block == ATT_BLOCK_PARAMS
    assert block_param_count(CONV).per_block == CONV_BLOCK_PARAMS
    assert block_param_count(ATT, [True, False]).blocks == ATT_BLOCK_PARAMS
    assert shared_param_count(ATT) == 30 * 8 + 10 * 8 + 16


def test_param_count_equals_materialized_sizes(gen):
    for cfg in (ATT, CONV):
        assert sum(v.size for v in init_block(cfg, gen).values()) == block_param_count(cfg).per_block
        head = SharedHead.init(cfg, gen)
        assert sum(t.data.size for t in head.tensors().values()) == shared_param_count(cfg)


@pytest.mark.parametrize("cfg", [ATT, CONV])
def test_flatten_roundtrip(cfg, gen):
    w = init_block(cfg, gen)
    flat = flatten_block(cfg, w)
    back = unflatten_block(cfg, flat)
    for k, v in w.items():
        np.testing.assert_array_equal(back[k].data, v)
    batched = unflatten_block(cfg, np.stack([flat, flat * 2]))
    np.testing.assert_array_equal(batched["ln1.beta"].data.shape, (2, 1, cfg.d))
    with pytest.raises(ag.ShapeError):
        unflatten_block(cfg, flat[:-1])


@pytest.mark.parametrize("cfg", [ATT, CONV])
def test_representations_are_causal(cfg, gen):
    head = SharedHead.init(cfg, gen)
    w = _weights(cfg, gen)
    seq = gen.integers(0, 30, size=(1, 10))
    other = seq.copy()
    other[0, 6:] = (other[0, 6:] + 1) % 30
    a = encode(cfg, w, head, seq).data
    b = encode(cfg, w, head, other).data
    np.testing.assert_allclose(a[0, :6], b[0, :6], atol=1e-6)
    assert not np.allclose(a[0, 6:], b[0, 6:])


@pytest.mark.parametrize("cfg", [ATT, CONV])
def test_right_padding_does_not_change_real_positions(cfg, gen):
    head = SharedHead.init(cfg, gen)
    w = _weights(cfg, gen)
    seq = gen.integers(0, 30, size=(1, 6))
    inputs, mask = np.zeros((1, 10), np.int64), np.zeros((1, 10), bool)
    inputs[0, :6], mask[0, :6] = seq, True
    np.testing.assert_allclose(encode(cfg, w, head, inputs, mask=mask).data[0, :6],
                               encode(cfg, w, head, seq).data[0], atol=1e-6)


@pytest.mark.parametrize("cfg", [ATT, CONV])
def test_gate_semantics(cfg, gen):
    head = SharedHead.init(cfg, gen)
    w = _weights(cfg, gen)
    seq = gen.integers(0, 30, size=(2, 10))
    skip_all = np.tile([0.0, 1.0], (2, 1))
    np.testing.assert_allclose(encode(cfg, w, head, seq, skip_all).data,
                               head.finalize(head.embed(seq)).data, atol=1e-6)
    only_second = np.array([[0.0, 1.0], [1.0, 0.0]])
    single = encode(BackboneConfig(**{**cfg.to_dict(), "n_blocks": 1, "dilations": [cfg.dilations[1]]})
                    if cfg.family == "causal-conv" else BackboneConfig(**{**cfg.to_dict(), "n_blocks": 1}),
                    [w[1]], head, seq)
    np.testing.assert_allclose(encode(cfg, w, head, seq, only_second, "deploy-assembled").data,
                               single.data, atol=1e-6)


@pytest.mark.parametrize("cfg", [ATT, CONV])
def test_masked_and_assembled_paths_agree(cfg, gen):
    head = SharedHead.init(cfg, gen)
    w = _weights(cfg, gen)
    for _ in range(10):
        inputs, mask = random_batch(gen, 30, 4, 10)
        hard = np.zeros((4, 2, 2), np.float32)
        pick = gen.integers(0, 2, size=(4, 2))
        hard[np.arange(4)[:, None], np.arange(2), pick] = 1
        a = encode(cfg, w, head, inputs, hard, "train-masked", mask).data
        b = encode(cfg, w, head, inputs, hard, "deploy-assembled", mask).data
        np.testing.assert_allclose(a[mask], b[mask], atol=1e-5)


def test_deploy_rejects_soft_gates_and_missing_weights(gen):
    head = SharedHead.init(ATT, gen)
    w = _weights(ATT, gen)
    seq = gen.integers(0, 30, size=(1, 5))
    with pytest.raises(GateError):
        encode(ATT, w, head, seq, np.full((2, 2), 0.5), "deploy-assembled")
    with pytest.raises(ag.ContractViolation):
        encode(ATT, [w[0], None], head, seq, np.array([[0, 1], [1, 0]]), "deploy-assembled")
    # a skipped block may be absent
    encode(ATT, [None, w[1]], head, seq, np.array([[0, 1], [1, 0]]), "deploy-assembled")


def test_sequence_contracts(gen):
    head = SharedHead.init(ATT, gen)
    w = _weights(ATT, gen)
    with pytest.raises(ag.ContractViolation):
        encode(ATT, w, head, np.zeros((1, 0), np.int64))
    with pytest.raises(ag.ContractViolation):
        encode(ATT, w, head, np.zeros((1, 11), np.int64))
    with pytest.raises(ag.ShapeError):
        encode(ATT, w[:1], head, np.zeros((1, 3), np.int64))


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(family="lstm")
    with pytest.raises(ValueError):
        BackboneConfig(d=7, heads=2)
    with pytest.raises(ValueError):
        BackboneConfig(family="causal-conv", n_blocks=2, dilations=((1, 2),))
    conv = BackboneConfig(family="causal-conv", n_blocks=5)
    assert conv.dilations == ((1, 2), (2, 4), (4, 8), (8, 16), (1, 2))
    assert BackboneConfig.from_dict(conv.to_dict()) == conv


def test_block_gradients_match_differences(gen):
    """End-to-end gradient through one attention and one conv block (float64)."""
    for cfg in (BackboneConfig(n_blocks=1, d=4, n_items=6, max_seq_len=5, heads=2),
                BackboneConfig(family="causal-conv", n_blocks=1, d=4, n_items=6, max_seq_len=5)):
        head = SharedHead.init(cfg, gen)
        for t in head.tensors().values():
            t.data = t.data.astype(np.float64)
        base = {k: v.astype(np.float64) for k, v in init_block(cfg, gen).items()}
        seq = gen.integers(0, 6, size=(2, 5))
        probe = ag.Tensor(gen.normal(size=(2, 5, 4)))
        names = sorted(base)

        def f(*arrays):
            w = dict(zip(names, arrays))
            return (encode(cfg, [w], head, seq) * probe).sum()

        check_grads(f, *[base[n] + 0.1 * gen.normal(size=base[n].shape) for n in names], rtol=1e-4, atol=1e-6)

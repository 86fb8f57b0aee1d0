"""Independent numerical oracles shared by the tests."""

import numpy as np

from fofa import autograd as ag


def numeric_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar function ``f`` at float64 ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f(x)
        x[i] = old - eps
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check_grads(fn, *arrays, eps=1e-6, rtol=1e-5, atol=1e-7):
    """Compare tape gradients of ``fn(*tensors)`` (scalar) with central differences, in float64."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    params = [ag.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ag.Tape():
        loss = fn(*params)
        grads = ag.backward(loss, params)
    for k, p in enumerate(params):
        def f(x, k=k):
            args = [ag.Tensor((x if j == k else arrays[j]).copy()) for j in range(len(arrays))]
            return float(fn(*args).data)
        np.testing.assert_allclose(grads[p], numeric_grad(f, arrays[k], eps), rtol=rtol, atol=atol)


def small_model(mode="forward-ofa", family="attention", n_blocks=3, d=8, n_items=30, max_seq_len=12, seed=0,
                float64=False, **model_kw):
    from fofa.backbone import BackboneConfig
    from fofa.model import ForwardOFA, ModelConfig

    bb = BackboneConfig(family=family, n_blocks=n_blocks, d=d, n_items=n_items, max_seq_len=max_seq_len)
    model = ForwardOFA.init(ModelConfig(bb, mode=mode, **model_kw), seed)
    if float64:
        to_float64(model)
    return model


def to_float64(model):
    """Promote every weight in place so finite differences are accurate."""
    for t in model.named_tensors().values():
        arr = t.data.astype(np.float64)
        arr.flags.writeable = False
        t.data = arr
    return model


def random_batch(gen, n_items, batch, length, min_len=2):
    """Right-padded id batch with per-row lengths in [min_len, length]."""
    from fofa.data import pad_right

    seqs = [gen.integers(0, n_items, size=gen.integers(min_len, length + 1)) for _ in range(batch)]
    return pad_right(seqs, length)


def relative_error(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))

import numpy as np
import pytest

from setcomplete import kernels


@pytest.fixture(autouse=True)
def restore_backend():
    before = kernels.get_backend()
    yield
    kernels.set_backend(before)


def _attention_inputs(rng, b=3, h=2, m=4, n=6, dh=8):
    q = rng.standard_normal((b, h, m, dh))
    k = rng.standard_normal((b, h, n, dh))
    v = rng.standard_normal((b, h, n, dh))
    mask = (rng.random((b, n)) > 0.3).astype(np.float64)
    mask[:, 0] = 1.0
    return q, k, v, mask


def test_backend_switch_roundtrip():
    kernels.set_backend("numpy")
    assert kernels.get_backend() == "numpy"
    if kernels.HAVE_NUMBA:
        kernels.set_backend("numba")
        assert kernels.get_backend() == "numba"


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.set_backend("gpu")


def test_attention_weights_rows_sum_to_one(rng):
    q, k, v, mask = _attention_inputs(rng)
    kernels.set_backend("numpy")
    _, w = kernels.attn_forward(q, k, v, mask, 0.3)
    assert np.allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_attention_masked_keys_get_exact_zero_weight(rng):
    q, k, v, mask = _attention_inputs(rng)
    for backend in ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else []):
        kernels.set_backend(backend)
        _, w = kernels.attn_forward(q, k, v, mask, 0.3)
        masked = w * (1.0 - mask[:, None, None, :])
        assert masked.max() == 0.0


@pytest.mark.skipif(not kernels.HAVE_NUMBA, reason="numba not installed")
def test_backends_agree(rng, warmed):
    q, k, v, mask = _attention_inputs(rng)
    g = rng.standard_normal(q.shape)
    x = rng.standard_normal((10, 8))
    gamma, beta = rng.standard_normal(8), rng.standard_normal(8)
    g2 = rng.standard_normal((10, 8))
    scores = rng.standard_normal(64)
    ids = rng.permutation(64).astype(np.int64)
    feats = rng.standard_normal((40, 8))
    cents = rng.standard_normal((5, 8))

    results = {}
    for backend in ("numpy", "numba"):
        kernels.set_backend(backend)
        ctx, w = kernels.attn_forward(q, k, v, mask, 0.3)
        dq, dk, dv = kernels.attn_backward(g, q, k, v, w, mask, 0.3)
        y, xhat, rstd = kernels.layernorm_forward(x, gamma, beta, 1e-5)
        dx, dgam, dbet = kernels.layernorm_backward(g2, xhat, rstd, gamma)
        top = kernels.topk_select(scores, ids, 9)
        lab = kernels.assign_nearest(feats, cents)
        results[backend] = [ctx, w, dq, dk, dv, y, dx, dgam, dbet, top, lab]

    for a, b in zip(results["numpy"], results["numba"]):
        assert np.allclose(np.asarray(a, float), np.asarray(b, float), atol=1e-12)


def test_topk_orders_by_score_then_id():
    scores = np.array([0.5, 0.9, 0.5, 0.1, 0.9])
    ids = np.array([40, 30, 2, 1, 10], dtype=np.int64)
    for backend in ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else []):
        kernels.set_backend(backend)
        pos = kernels.topk_select(scores, ids, 4)
        # 0.9 ties: id 10 before 30; 0.5 ties: id 2 before 40
        assert list(ids[pos]) == [10, 30, 2, 40]


def test_topk_k_larger_than_pool():
    scores = np.array([0.3, 0.1])
    ids = np.array([7, 5], dtype=np.int64)
    kernels.set_backend("numpy")
    pos = kernels.topk_select(scores, ids, 10)
    assert list(ids[pos]) == [7, 5]


def test_assign_nearest_breaks_ties_toward_lowest_centroid():
    feats = np.array([[1.0, 0.0]])
    cents = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    for backend in ["numpy"] + (["numba"] if kernels.HAVE_NUMBA else []):
        kernels.set_backend(backend)
        assert kernels.assign_nearest(feats, cents)[0] == 0


def test_attention_op_rejects_all_masked_entry():
    from setcomplete import autodiff as ad

    rng = np.random.default_rng(0)
    q, k, v, mask = _attention_inputs(rng)
    mask[1, :] = 0.0
    kernels.set_backend("numpy")
    with pytest.raises(ValueError):
        ad.attention(ad.const(q), ad.const(k), ad.const(v), mask, 0.3)

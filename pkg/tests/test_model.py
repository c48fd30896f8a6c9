import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groklab.model import (
    ModelConfig,
    accuracy_from_logits,
    check_params,
    embedding_rows,
    forward,
    load_checkpoint,
    loss_and_accuracy,
    loss_and_grads,
    param_shapes,
    save_checkpoint,
    weight_norms,
    zero_params,
)
from groklab.zp_dataset import TaskSpec, label_grid, tokenize_pairs


def random_params(cfg, seed=0, std=0.5):
    rng = np.random.default_rng(seed)
    return {k: std * rng.standard_normal(s) for k, s in param_shapes(cfg).items()}


def all_tokens(p, offset=0):
    task = TaskSpec(p, operand_offset=offset)
    pairs = np.array([[i, j] for i in range(p) for j in range(p)])
    return task, tokenize_pairs(task, pairs), label_grid(task)[pairs[:, 0], pairs[:, 1]]


def naive_forward(params, tokens, cfg):
    """Straightforward per-example, per-head loop over the full sequence."""
    d, H, dh = cfg.d_model, cfg.n_heads, cfg.d_head

    def ln(x):
        mu = x.mean(-1, keepdims=True)
        return (x - mu) / np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + 1e-5)

    out = []
    for seq in tokens:
        X = np.stack([params["W_E"][t] + params["W_P"][pos] for pos, t in enumerate(seq)])
        for l in range(cfg.n_layers):
            b = lambda n: params[f"blocks.{l}.{n}"]
            src = ln(X) if cfg.use_layer_norm else X
            heads = []
            for h in range(H):
                cols = slice(h * dh, (h + 1) * dh)
                Q, K, Vv = src @ b("W_Q")[:, cols], src @ b("W_K")[:, cols], src @ b("W_V")[:, cols]
                S = Q @ K.T / math.sqrt(dh)
                if cfg.causal_mask:
                    S = np.where(np.tril(np.ones((3, 3))) > 0, S, -np.inf)
                A = np.exp(S - S.max(1, keepdims=True))
                A /= A.sum(1, keepdims=True)
                heads.append(A @ Vv)
            X = X + np.concatenate(heads, axis=1) @ b("W_O")
            src = ln(X) if cfg.use_layer_norm else X
            X = X + np.maximum(src @ b("W_in"), 0) @ b("W_out")
        out.append(X[2] @ params["W_U"])
    return np.array(out)


# ---------------------------------------------------------------- config


def test_config_defaults_and_validation():
    cfg = ModelConfig.for_task(TaskSpec(97))
    assert (cfg.vocab_size, cfg.out_classes, cfg.d_model, cfg.n_heads, cfg.d_mlp) == (98, 97, 128, 4, 512)
    assert cfg.d_head == 32
    with pytest.raises(ValueError):
        ModelConfig(10, 5, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(10, 5, n_layers=0)
    with pytest.raises(ValueError):
        ModelConfig(4, 5)


def test_param_shapes_and_check():
    cfg = ModelConfig(8, 5, d_model=8, n_heads=2, n_layers=2, d_mlp=16)
    shapes = param_shapes(cfg)
    assert shapes["W_E"] == (8, 8) and shapes["W_U"] == (8, 5) and shapes["blocks.1.W_in"] == (8, 16)
    params = zero_params(cfg)
    check_params(params, cfg)
    params["W_U"] = np.zeros((8, 4))
    with pytest.raises(ValueError):
        check_params(params, cfg)
    del params["W_U"]
    with pytest.raises(KeyError):
        check_params(params, cfg)


# ---------------------------------------------------------------- forward


def test_zero_params_give_log_p():
    p = 7
    task, toks, labels = all_tokens(p)
    cfg = ModelConfig.for_task(task, d_model=8, n_heads=2)
    logits = forward(zero_params(cfg), toks, cfg)
    assert np.all(logits == 0)
    loss, _ = loss_and_accuracy(zero_params(cfg), toks, labels, cfg)
    assert loss == pytest.approx(math.log(p), abs=1e-12)


@pytest.mark.parametrize("n_layers", [1, 2])
@pytest.mark.parametrize("n_heads", [1, 2])
@pytest.mark.parametrize("ln", [False, True])
@pytest.mark.parametrize("causal", [False, True])
def test_forward_matches_naive(n_layers, n_heads, ln, causal):
    task, toks, _ = all_tokens(5, offset=2)
    cfg = ModelConfig.for_task(task, d_model=8, n_heads=n_heads, n_layers=n_layers, use_layer_norm=ln, causal_mask=causal)
    params = random_params(cfg, seed=n_layers * 10 + n_heads)
    assert np.allclose(forward(params, toks, cfg), naive_forward(params, toks, cfg), rtol=1e-10, atol=1e-12)


def test_residual_identity_when_blocks_are_zero():
    task, toks, _ = all_tokens(5)
    cfg = ModelConfig.for_task(task, d_model=8, n_heads=2)
    params = random_params(cfg, seed=3)
    for k in params:
        if k.startswith("blocks."):
            params[k][:] = 0
    expect = (params["W_E"][toks[:, 2]] + params["W_P"][2]) @ params["W_U"]
    assert np.allclose(forward(params, toks, cfg), expect, rtol=1e-13, atol=1e-14)


def test_unembedding_permutation_permutes_logits():
    task, toks, _ = all_tokens(5)
    cfg = ModelConfig.for_task(task, d_model=8, n_heads=2)
    params = random_params(cfg, seed=4)
    perm = np.random.default_rng(0).permutation(5)
    permuted = dict(params, W_U=params["W_U"][:, perm])
    assert np.allclose(forward(permuted, toks, cfg), forward(params, toks, cfg)[:, perm], rtol=0, atol=1e-13)


def test_forward_rejects_bad_tokens():
    task, toks, _ = all_tokens(5)
    cfg = ModelConfig.for_task(task, d_model=4, n_heads=1)
    with pytest.raises(ValueError):
        forward(zero_params(cfg), toks[:, :2], cfg)
    bad = toks.copy()
    bad[0, 0] = cfg.vocab_size
    with pytest.raises(IndexError):
        forward(zero_params(cfg), bad, cfg)


def test_chunked_loss_matches_single_batch():
    task, toks, labels = all_tokens(7)
    cfg = ModelConfig.for_task(task, d_model=8, n_heads=2)
    params = random_params(cfg, seed=5)
    a = loss_and_accuracy(params, toks, labels, cfg, chunk=10)
    b = loss_and_accuracy(params, toks, labels, cfg)
    assert a[0] == pytest.approx(b[0], rel=1e-13) and a[1] == b[1]
    loss, acc, _ = loss_and_grads(params, toks, labels, cfg)
    assert loss == pytest.approx(b[0], rel=1e-12) and acc == b[1]


def test_accuracy_ties_go_to_smallest_index():
    assert accuracy_from_logits(np.zeros((2, 3)), np.array([0, 1])) == 0.5


# ---------------------------------------------------------------- gradients


@pytest.mark.parametrize("ln", [False, True])
@pytest.mark.parametrize("n_layers", [1, 2])
def test_full_model_gradient_fd(ln, n_layers):
    task, toks, labels = all_tokens(5)
    cfg = ModelConfig.for_task(task, d_model=4, n_heads=2, n_layers=n_layers, d_mlp=8, use_layer_norm=ln)
    params = random_params(cfg, seed=7, std=0.7)
    _, _, grads = loss_and_grads(params, toks, labels, cfg)
    h = 1e-5
    for name, value in params.items():
        num = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            old = value[idx]
            value[idx] = old + h
            lp = loss_and_accuracy(params, toks, labels, cfg)[0]
            value[idx] = old - h
            lm = loss_and_accuracy(params, toks, labels, cfg)[0]
            value[idx] = old
            num[idx] = (lp - lm) / (2 * h)
        denom = max(np.linalg.norm(num), np.linalg.norm(grads[name]), 1e-12)
        assert np.linalg.norm(num - grads[name]) / denom < 1e-4, name


# ---------------------------------------------------------------- norms / embeddings


def test_weight_norms_split_heads():
    cfg = ModelConfig(6, 5, d_model=4, n_heads=2, d_mlp=4)
    params = zero_params(cfg)
    params["blocks.0.W_Q"][:] = 1.0  # (4, 4): two 4x2 blocks, each norm sqrt(8)
    total, sq = weight_norms(params, n_heads=2)
    assert total == pytest.approx(2 * math.sqrt(8)) and sq == pytest.approx(16.0)
    total1, sq1 = weight_norms(params, n_heads=1)
    assert total1 == pytest.approx(4.0) and sq1 == sq


def test_embedding_rows():
    cfg = ModelConfig(9, 5, d_model=4, n_heads=1)
    params = random_params(cfg)
    assert np.array_equal(embedding_rows(params, 5), params["W_E"][:5])
    with pytest.raises(ValueError):
        embedding_rows(params, 10)


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    task, toks, _ = all_tokens(5)
    cfg = ModelConfig.for_task(task, d_model=8, n_heads=2, n_layers=2, use_layer_norm=True)
    params = random_params(cfg, seed=9)
    save_checkpoint(tmp_path / "ck", cfg, params, epoch=12, extra={"note": np.float64(1.5)})
    cfg2, params2, manifest = load_checkpoint(tmp_path / "ck")
    assert cfg2 == cfg and manifest["epoch"] == 12 and manifest["note"] == 1.5
    assert all(np.array_equal(params[k], params2[k]) for k in params)
    assert np.array_equal(forward(params, toks, cfg), forward(params2, toks, cfg2))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), d=st.sampled_from([4, 8]), heads=st.sampled_from([1, 2, 4]))
def test_forward_is_batch_independent(seed, d, heads):
    task, toks, _ = all_tokens(5)
    cfg = ModelConfig.for_task(task, d_model=d, n_heads=heads)
    params = random_params(cfg, seed)
    full = forward(params, toks, cfg)
    idx = np.random.default_rng(seed).permutation(len(toks))[:7]
    assert np.allclose(forward(params, toks[idx], cfg), full[idx], rtol=1e-12, atol=1e-13)

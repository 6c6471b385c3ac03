import numpy as np
import pytest

from mftune import tensor as T
from mftune.model import (
    ModelConfig,
    ModelError,
    TinyTransformer,
    count_params,
    load_model,
    lora_attach,
    lora_merge,
    quantize_base_weights,
    save_model,
    trainable_fraction,
)

SMALL = ModelConfig(d_model=16, n_layers=2, n_heads=2, seq_len=32, vocab_size=263)


def test_config_validation():
    with pytest.raises(ModelError, match="divisible"):
        ModelConfig(d_model=10, n_heads=3)
    with pytest.raises(ModelError, match="positive"):
        ModelConfig(d_model=0)


def test_logits_shape():
    model = TinyTransformer(SMALL, seed=0)
    ids = np.arange(10) % 50
    logits = model.forward(ids)
    assert logits.shape == (10, 263)


def test_forward_rejects_bad_inputs():
    model = TinyTransformer(SMALL, seed=0)
    with pytest.raises(ModelError, match="vocab"):
        model.forward(np.array([0, 263]))
    with pytest.raises(ModelError, match="seq_len"):
        model.forward(np.zeros(33, dtype=np.int64))


def test_causal_masking():
    """Changing a future token never changes the logits of earlier positions."""
    model = TinyTransformer(SMALL, seed=1)
    a = np.array([5, 6, 7, 8, 9])
    b = a.copy()
    b[-1] = 42
    la = model.forward(a).data
    lb = model.forward(b).data
    np.testing.assert_allclose(la[:-1], lb[:-1], atol=1e-12)
    assert np.abs(la[-1] - lb[-1]).max() > 1e-6


def test_windows_processed_independently():
    model = TinyTransformer(SMALL, seed=2)
    w1 = np.array([1, 2, 3])
    w2 = np.array([9, 8, 7, 6])
    a1 = model.forward(w1).data
    model.forward(w2)
    a2 = model.forward(w1).data
    np.testing.assert_array_equal(a1, a2)


def test_tied_embeddings_drop_lm_head():
    model = TinyTransformer(ModelConfig(d_model=16, n_layers=1, n_heads=2, seq_len=16, tie_embeddings=True), seed=0)
    assert "lm_head" not in model.params
    assert model.forward(np.array([1, 2])).shape == (2, 263)


def test_end_to_end_gradients_flow():
    model = TinyTransformer(SMALL, seed=3)
    ids = np.array([10, 11, 12, 13])
    logits = model.forward(ids)
    lp = T.masked_token_logprobs(
        T.gather_rows(logits, np.arange(3)), ids[1:], np.array([1, 1, 1])
    )
    T.scale(T.tsum(lp), -1.0).backward()
    grads = {n: np.abs(p.grad).max() for n, p in model.trainable().items()}
    assert all(np.isfinite(v) for v in grads.values())
    assert grads["tok_emb"] > 0 and grads["l1.attn.wq"] > 0


class TestLora:
    def test_zero_init_adapter_is_silent(self):
        model = TinyTransformer(SMALL, seed=4)
        ids = np.array([3, 1, 4, 1, 5])
        base_logits = model.forward(ids).data.copy()
        lora_attach(model, {"attn.wq", "attn.wv", "mlp.w1", "lm_head"}, r=2, alpha=4.0)
        adapted = model.forward(ids).data
        np.testing.assert_allclose(adapted, base_logits, atol=1e-12)

    def test_attach_freezes_base(self):
        model = TinyTransformer(SMALL, seed=4)
        lora_attach(model, {"attn.wq"}, r=2, alpha=4.0)
        trainable = model.trainable()
        assert all(".lora." in name for name in trainable)
        assert not model.params["tok_emb"].requires_grad

    def test_optional_final_norm_training(self):
        model = TinyTransformer(SMALL, seed=4)
        lora_attach(model, {"attn.wq"}, r=2, alpha=4.0, train_final_norm=True)
        names = set(model.trainable())
        assert "lnf.g" in names and "lnf.b" in names

    def test_unknown_target_rejected(self):
        model = TinyTransformer(SMALL, seed=4)
        with pytest.raises(ModelError, match="unknown lora target"):
            lora_attach(model, {"attn.qkv"}, r=2, alpha=4.0)

    def test_trainable_fraction_closed_form(self):
        model = TinyTransformer(SMALL, seed=5)
        targets = {"attn.wq", "attn.wo", "mlp.w2"}
        r = 3
        lora_attach(model, targets, r=r, alpha=6.0)
        base = sum(t.data.size for t in model.params.values())
        per_layer = r * (16 + 16) * 2 + r * (16 + 64)  # wq, wo, mlp.w2 per layer
        expected = (per_layer * SMALL.n_layers) / base
        assert trainable_fraction(model) == pytest.approx(expected, rel=1e-12)

    def test_single_square_layer_fraction_rule(self):
        # one adapted d x d map contributes r(d+d)/d^2 trainable fraction
        d, r = 64, 4
        assert (d * r + r * d) / (d * d) == pytest.approx(0.125)

    def test_trained_adapter_merge_equivalence(self):
        model = TinyTransformer(SMALL, seed=6)
        lora_attach(model, {"attn.wq", "attn.wk", "mlp.w1", "lm_head"}, r=2, alpha=4.0)
        rng = np.random.default_rng(0)
        adam = T.AdamState()
        ids = np.array([7, 8, 9, 10, 11, 12])
        for _ in range(25):
            logits = model.forward(ids)
            lp = T.masked_token_logprobs(
                T.gather_rows(logits, np.arange(5)), ids[1:], np.ones(5, dtype=int)
            )
            loss = T.scale(T.tmean(lp), -1.0)
            model.zero_grad()
            loss.backward()
            params = model.trainable()
            T.adam_step(params, {n: p.grad for n, p in params.items()}, adam, 1e-2)
        probe = rng.integers(0, 263, size=12)
        adapted = model.forward(probe).data.copy()
        lora_merge(model)
        merged = model.forward(probe).data
        assert np.abs(merged - adapted).max() <= 1e-9

    def test_double_merge_rejected(self):
        model = TinyTransformer(SMALL, seed=7)
        lora_attach(model, {"attn.wq"}, r=2, alpha=2.0)
        lora_merge(model)
        with pytest.raises(ModelError, match="already merged"):
            lora_merge(model)

    def test_rank_bounds(self):
        model = TinyTransformer(SMALL, seed=7)
        with pytest.raises(ModelError):
            lora_attach(model, {"attn.wq"}, r=0, alpha=1.0)
        with pytest.raises(ModelError, match="too large"):
            lora_attach(model, {"attn.wq"}, r=16, alpha=1.0)

    def test_count_params(self):
        model = TinyTransformer(SMALL, seed=8)
        lora_attach(model, {"attn.wq"}, r=2, alpha=2.0)
        trainable, base = count_params(model)
        assert trainable == 2 * (2 * 16) * SMALL.n_layers
        assert base == sum(t.data.size for t in model.params.values())


class TestQuantizedBase:
    def test_quantize_base_keeps_adapter_training(self):
        model = TinyTransformer(SMALL, seed=9)
        lora_attach(model, {"attn.wq"}, r=2, alpha=2.0)
        before = {n: t.data.copy() for n, t in model.params.items()}
        quantize_base_weights(model)
        # linear weights changed (quantized), embeddings untouched
        assert np.abs(model.params["l0.attn.wq"].data - before["l0.attn.wq"]).max() > 0
        np.testing.assert_array_equal(model.params["tok_emb"].data, before["tok_emb"])
        assert set(model.trainable()) == {"l0.attn.wq.lora.down", "l0.attn.wq.lora.up",
                                          "l1.attn.wq.lora.down", "l1.attn.wq.lora.up"}

    def test_refuses_trainable_weights(self):
        model = TinyTransformer(SMALL, seed=9)
        with pytest.raises(ModelError, match="trainable"):
            quantize_base_weights(model)


def test_checkpoint_roundtrip(tmp_path):
    model = TinyTransformer(SMALL, seed=10)
    path = str(tmp_path / "model.bin")
    save_model(model, path)
    loaded = load_model(path)
    assert loaded.config == model.config
    for name, t in model.params.items():
        np.testing.assert_array_equal(loaded.params[name].data, t.data)
    ids = np.array([1, 2, 3])
    np.testing.assert_array_equal(loaded.forward(ids).data, model.forward(ids).data)


def test_checkpoint_adapters_stored_separately(tmp_path):
    import os

    model = TinyTransformer(SMALL, seed=11)
    lora_attach(model, {"attn.wq"}, r=2, alpha=4.0, seed=1)
    model.adapters["l0.attn.wq"].up.data += 0.03  # give the branch a signal
    path = str(tmp_path / "model.bin")
    save_model(model, path)
    assert os.path.exists(path + ".adapters")
    loaded = load_model(path)
    assert set(loaded.adapters) == set(model.adapters)
    ids = np.array([5, 6, 7])
    np.testing.assert_array_equal(loaded.forward(ids).data, model.forward(ids).data)

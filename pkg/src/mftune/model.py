"""Tiny decoder-only transformer with low-rank adapters and a quantizable
frozen base.

Pre-norm blocks, learned positional embeddings, causal attention, relu MLP.
Parameters live in a flat name -> Tensor dict so the optimizer, checkpoints,
and adapter plumbing all share one addressing scheme.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .quant import nf4_roundtrip


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    seq_len: int = 128
    vocab_size: int = 263
    tie_embeddings: bool = False

    def __post_init__(self):
        if min(self.d_model, self.n_layers, self.n_heads, self.seq_len, self.vocab_size) < 1:
            raise ModelError("all dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "seq_len": self.seq_len,
            "vocab_size": self.vocab_size,
            "tie_embeddings": self.tie_embeddings,
        }


@dataclass
class LoraAdapter:
    down: T.Tensor  # [r, d_in], gaussian init
    up: T.Tensor  # [d_out, r], zero init so the branch starts silent
    rank: int
    scaling: float  # alpha / r


INIT_STD = 0.02


class TinyTransformer:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.adapters: dict[str, LoraAdapter] = {}
        self.merged = False
        self._causal_bias: dict[int, T.Tensor] = {}
        rng = np.random.default_rng([seed, 77])
        c = config

        def mat(*shape):
            return T.Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

        p: dict[str, T.Tensor] = {}
        p["tok_emb"] = mat(c.vocab_size, c.d_model)
        p["pos_emb"] = mat(c.seq_len, c.d_model)
        for i in range(c.n_layers):
            p[f"l{i}.ln1.g"] = T.Tensor(np.ones(c.d_model), requires_grad=True)
            p[f"l{i}.ln1.b"] = T.Tensor(np.zeros(c.d_model), requires_grad=True)
            for w in ("wq", "wk", "wv", "wo"):
                p[f"l{i}.attn.{w}"] = mat(c.d_model, c.d_model)
            p[f"l{i}.ln2.g"] = T.Tensor(np.ones(c.d_model), requires_grad=True)
            p[f"l{i}.ln2.b"] = T.Tensor(np.zeros(c.d_model), requires_grad=True)
            p[f"l{i}.mlp.w1"] = mat(4 * c.d_model, c.d_model)
            p[f"l{i}.mlp.w2"] = mat(c.d_model, 4 * c.d_model)
        p["lnf.g"] = T.Tensor(np.ones(c.d_model), requires_grad=True)
        p["lnf.b"] = T.Tensor(np.zeros(c.d_model), requires_grad=True)
        if not c.tie_embeddings:
            p["lm_head"] = mat(c.vocab_size, c.d_model)
        self.params = p

    # linear weights LoRA can target (embeddings and norms are not linear maps)
    def linear_names(self) -> list[str]:
        names = []
        for i in range(self.config.n_layers):
            names += [f"l{i}.attn.{w}" for w in ("wq", "wk", "wv", "wo")]
            names += [f"l{i}.mlp.w1", f"l{i}.mlp.w2"]
        if not self.config.tie_embeddings:
            names.append("lm_head")
        return names

    def trainable(self) -> dict[str, T.Tensor]:
        out = {n: t for n, t in self.params.items() if t.requires_grad}
        for name, ad in self.adapters.items():
            out[f"{name}.lora.down"] = ad.down
            out[f"{name}.lora.up"] = ad.up
        return out

    def zero_grad(self) -> None:
        for t in self.trainable().values():
            t.zero_grad()

    def _linear(self, x: T.Tensor, name: str) -> T.Tensor:
        y = T.matmul(x, T.transpose(self.params[name]))
        ad = self.adapters.get(name)
        if ad is not None:
            z = T.matmul(T.matmul(x, T.transpose(ad.down)), T.transpose(ad.up))
            y = T.add(y, T.scale(z, ad.scaling))
        return y

    def _ln(self, x: T.Tensor, prefix: str) -> T.Tensor:
        y = T.layer_norm(x)
        return T.add(T.mul(y, self.params[f"{prefix}.g"]), self.params[f"{prefix}.b"])

    def _causal(self, t_len: int) -> T.Tensor:
        if t_len not in self._causal_bias:
            bias = np.triu(np.full((t_len, t_len), -1e30), k=1)
            self._causal_bias[t_len] = T.Tensor(bias)
        return self._causal_bias[t_len]

    def _attention(self, x: T.Tensor, layer: int) -> T.Tensor:
        c = self.config
        hd = c.d_model // c.n_heads
        t_len = x.shape[0]
        q = self._linear(x, f"l{layer}.attn.wq")
        k = self._linear(x, f"l{layer}.attn.wk")
        v = self._linear(x, f"l{layer}.attn.wv")
        q_t, k_t, v_t = T.transpose(q), T.transpose(k), T.transpose(v)
        bias = self._causal(t_len)
        ctx_heads = []
        for h in range(c.n_heads):
            rows = np.arange(h * hd, (h + 1) * hd)
            qh = T.transpose(T.gather_rows(q_t, rows))  # [T, hd]
            kh_t = T.gather_rows(k_t, rows)  # [hd, T]
            vh = T.transpose(T.gather_rows(v_t, rows))  # [T, hd]
            scores = T.add(T.scale(T.matmul(qh, kh_t), 1.0 / math.sqrt(hd)), bias)
            probs = T.softmax(scores, axis=-1)
            ctx_heads.append(T.transpose(T.matmul(probs, vh)))  # [hd, T]
        ctx = T.transpose(T.concat(ctx_heads, axis=0))  # [T, d]
        return self._linear(ctx, f"l{layer}.attn.wo")

    def forward(self, ids) -> T.Tensor:
        """Logits [T, vocab] for one window of token ids."""
        ids = np.asarray(ids, dtype=np.int64)
        c = self.config
        if ids.ndim != 1:
            raise ModelError(f"forward expects a 1-D window, got shape {ids.shape}")
        if ids.shape[0] > c.seq_len:
            raise ModelError(f"window length {ids.shape[0]} > seq_len {c.seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise ModelError("token id out of vocab range")
        t_len = ids.shape[0]
        x = T.add(
            T.gather_rows(self.params["tok_emb"], ids),
            T.gather_rows(self.params["pos_emb"], np.arange(t_len)),
        )
        for i in range(c.n_layers):
            x = T.add(x, self._attention(self._ln(x, f"l{i}.ln1"), i))
            h = self._ln(x, f"l{i}.ln2")
            h = self._linear(T.relu(self._linear(h, f"l{i}.mlp.w1")), f"l{i}.mlp.w2")
            x = T.add(x, h)
        x = self._ln(x, "lnf")
        if c.tie_embeddings:
            return T.matmul(x, T.transpose(self.params["tok_emb"]))
        return self._linear(x, "lm_head")

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for n, t in self.params.items():
            t.data = arrays[n].copy()


def lora_attach(
    model: TinyTransformer,
    targets: set[str] | list[str],
    r: int,
    alpha: float,
    train_final_norm: bool = False,
    seed: int = 0,
) -> None:
    """Freeze the base and add low-rank branches to the targeted linear maps.

    Targets match full parameter names or suffixes ("attn.wq" hits every layer).
    """
    if r < 1:
        raise ModelError(f"lora rank must be >= 1, got {r}")
    if model.merged:
        raise ModelError("cannot attach adapters to a merged model")
    linear = model.linear_names()
    resolved: list[str] = []
    for target in sorted(set(targets)):
        hits = [n for n in linear if n == target or n.endswith("." + target)]
        if not hits:
            raise ModelError(f"unknown lora target {target!r}")
        resolved.extend(hits)
    rng = np.random.default_rng([seed, 55])
    for t in model.params.values():
        t.requires_grad = False
        t.grad = None
    for name in sorted(set(resolved)):
        d_out, d_in = model.params[name].shape
        if r >= min(d_in, d_out):
            raise ModelError(f"rank {r} too large for {name} ({d_out}x{d_in})")
        model.adapters[name] = LoraAdapter(
            down=T.Tensor(rng.normal(0.0, INIT_STD, size=(r, d_in)), requires_grad=True),
            up=T.Tensor(np.zeros((d_out, r)), requires_grad=True),
            rank=r,
            scaling=alpha / r,
        )
    if train_final_norm:
        for n in ("lnf.g", "lnf.b"):
            model.params[n].requires_grad = True
            model.params[n].zero_grad()


def lora_merge(model: TinyTransformer) -> None:
    """Fold each adapter into its base weight: W += scaling * up @ down."""
    if model.merged:
        raise ModelError("adapters already merged")
    if not model.adapters:
        raise ModelError("no adapters to merge")
    for name, ad in model.adapters.items():
        model.params[name].data += ad.scaling * (ad.up.data @ ad.down.data)
    model.adapters = {}
    model.merged = True


def count_params(model: TinyTransformer) -> tuple[int, int]:
    """(trainable, frozen base) parameter counts."""
    trainable = sum(t.data.size for t in model.trainable().values())
    base = sum(t.data.size for t in model.params.values() if not t.requires_grad)
    return trainable, base


def trainable_fraction(model: TinyTransformer) -> float:
    trainable, base = count_params(model)
    if base == 0:
        raise ModelError("no frozen base parameters")
    return trainable / base


def quantize_base_weights(model: TinyTransformer, block: int = 64) -> None:
    """Round-trip every frozen linear weight through NF4 (QLoRA-style base)."""
    for name in model.linear_names():
        t = model.params[name]
        if t.requires_grad:
            raise ModelError(f"refusing to quantize trainable weight {name}")
        t.data = nf4_roundtrip(t.data, block=block)


def save_model(model: TinyTransformer, path: str) -> None:
    """Base weights in `path`; adapters, if any, in `path + '.adapters'`."""
    save_checkpoint(path, model.config.to_dict(), model.state_arrays())
    if model.adapters:
        meta = {
            name: {"rank": ad.rank, "scaling": ad.scaling} for name, ad in model.adapters.items()
        }
        arrays = {}
        for name, ad in model.adapters.items():
            arrays[f"{name}.down"] = ad.down.data
            arrays[f"{name}.up"] = ad.up.data
        save_checkpoint(path + ".adapters", {"adapters": meta}, arrays)


def load_model(path: str) -> TinyTransformer:
    config_dict, arrays = load_checkpoint(path)
    model = TinyTransformer(ModelConfig(**config_dict))
    model.load_state_arrays(arrays)
    adapter_path = path + ".adapters"
    if os.path.exists(adapter_path):
        meta, ad_arrays = load_checkpoint(adapter_path)
        for t in model.params.values():
            t.requires_grad = False
            t.grad = None
        for name, info in meta["adapters"].items():
            model.adapters[name] = LoraAdapter(
                down=T.Tensor(ad_arrays[f"{name}.down"], requires_grad=True),
                up=T.Tensor(ad_arrays[f"{name}.up"], requires_grad=True),
                rank=info["rank"],
                scaling=info["scaling"],
            )
    return model

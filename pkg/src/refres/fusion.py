"""Cross-attention fusion of object candidates with encoded text.

Object features and text vectors are first projected into a shared width,
then two pre-norm decoder blocks run {object self-attention, cross-attention
with objects as queries and text as keys/values, feed-forward}, each with a
residual connection.  Objects carry no positional encoding, so the decoder
is permutation-equivariant over object slots.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T


@dataclass
class FusionConfig:
    d_text: int = 64      # encoder output width
    d_object: int = 64    # raw candidate feature width
    d_shared: int = 64
    blocks: int = 2
    heads: int = 2
    ffn_mult: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_shared % self.heads != 0:
            raise ValueError(f"d_shared {self.d_shared} not divisible by heads {self.heads}")


class FusionDecoder:
    def __init__(self, cfg: FusionConfig, rng: np.random.Generator):
        self.cfg = cfg
        ds, dt = cfg.d_shared, np.dtype(cfg.dtype)
        self.dtype = dt

        def weight(*shape):
            return T.Tensor(T.truncated_normal(rng, shape, dtype=dt), requires_grad=True)

        def zeros(*shape):
            return T.Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

        def ones(*shape):
            return T.Tensor(np.ones(shape, dtype=dt), requires_grad=True)

        p: dict[str, T.Tensor] = {
            "text_proj.w": weight(cfg.d_text, ds), "text_proj.b": zeros(ds),
            "obj_proj.w": weight(cfg.d_object, ds), "obj_proj.b": zeros(ds),
        }
        for i in range(cfg.blocks):
            pre = f"block{i}."
            for sub in ("self", "cross"):
                p[pre + sub + ".ln.gain"], p[pre + sub + ".ln.bias"] = ones(ds), zeros(ds)
                for name in ("wq", "wk", "wv", "wo"):
                    p[pre + sub + "." + name] = weight(ds, ds)
                for name in ("bq", "bk", "bv", "bo"):
                    p[pre + sub + "." + name] = zeros(ds)
            p[pre + "ffn.ln.gain"], p[pre + "ffn.ln.bias"] = ones(ds), zeros(ds)
            h = ds * cfg.ffn_mult
            p[pre + "ffn.w1"], p[pre + "ffn.b1"] = weight(ds, h), zeros(h)
            p[pre + "ffn.w2"], p[pre + "ffn.b2"] = weight(h, ds), zeros(ds)
        self.params = p

    def parameters(self) -> dict[str, T.Tensor]:
        return dict(self.params)

    def project_inputs(self, text: T.Tensor, obj_features: T.Tensor) -> tuple[T.Tensor, T.Tensor]:
        """Map encoder vectors (n x d_text) and raw candidate features
        (q x d_object) into the shared width."""
        if text.data.shape[1] != self.cfg.d_text:
            raise T.ShapeError(f"project_inputs: text width {text.data.shape} != {self.cfg.d_text}")
        if obj_features.data.shape[1] != self.cfg.d_object:
            raise T.ShapeError(f"project_inputs: object width {obj_features.data.shape} "
                               f"!= {self.cfg.d_object}")
        p = self.params
        t = T.add_bias(T.matmul(text, p["text_proj.w"]), p["text_proj.b"])
        x = T.add_bias(T.matmul(obj_features, p["obj_proj.w"]), p["obj_proj.b"])
        return t, x

    def _attn(self, pre: str, queries: T.Tensor, keys: T.Tensor,
              key_mask: np.ndarray | None) -> T.Tensor:
        p = self.params
        q = T.add_bias(T.matmul(queries, p[pre + "wq"]), p[pre + "bq"])
        k = T.add_bias(T.matmul(keys, p[pre + "wk"]), p[pre + "bk"])
        v = T.add_bias(T.matmul(keys, p[pre + "wv"]), p[pre + "bv"])
        att = T.multi_head_attention(q, k, v, self.cfg.heads, key_mask=key_mask)
        return T.add_bias(T.matmul(att, p[pre + "wo"]), p[pre + "bo"])

    def decode(self, x: T.Tensor, text: T.Tensor,
               text_mask: np.ndarray | None = None) -> T.Tensor:
        """Fuse projected objects (q x d_shared) with projected text.
        `text_mask` removes padding keys from every cross-attention softmax."""
        if x.data.shape[1] != self.cfg.d_shared or text.data.shape[1] != self.cfg.d_shared:
            raise T.ShapeError("decode: inputs must already be projected to d_shared")
        if text_mask is not None and bool(np.asarray(text_mask).all()):
            text_mask = None
        p = self.params
        for i in range(self.cfg.blocks):
            pre = f"block{i}."
            h = T.layer_norm(x, p[pre + "self.ln.gain"], p[pre + "self.ln.bias"])
            x = x + self._attn(pre + "self.", h, h, None)
            h = T.layer_norm(x, p[pre + "cross.ln.gain"], p[pre + "cross.ln.bias"])
            x = x + self._attn(pre + "cross.", h, text, text_mask)
            h = T.layer_norm(x, p[pre + "ffn.ln.gain"], p[pre + "ffn.ln.bias"])
            ff = T.relu(T.add_bias(T.matmul(h, p[pre + "ffn.w1"]), p[pre + "ffn.b1"]))
            x = x + T.add_bias(T.matmul(ff, p[pre + "ffn.w2"]), p[pre + "ffn.b2"])
        return x

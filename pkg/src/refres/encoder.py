"""Toy text encoder: vocabulary, window tokenizer, and a small pre-norm
transformer producing one contextual vector per subword.

The tokenizer lays a window out as [BOS] then, per utterance, a speaker-tag
token followed by the utterance's tokens.  Speakers alternate with utterance
parity (two-party dialogues).  Mention spans are re-indexed into the
concatenated sequence; anything extending past the length cap is dropped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .datamodel import Mention, TextInstance, Utterance

PAD, UNK, BOS, SPEAKER_A, SPEAKER_B = "<pad>", "<unk>", "<bos>", "<spk_a>", "<spk_b>"
RESERVED = (PAD, UNK, BOS, SPEAKER_A, SPEAKER_B)
PAD_ID, UNK_ID, BOS_ID, SPEAKER_A_ID, SPEAKER_B_ID = range(5)


class VocabError(ValueError):
    pass


@dataclass
class Vocab:
    """Dense token-to-id map whose first five ids are reserved."""

    tokens: list[str]
    index: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if tuple(self.tokens[:5]) != RESERVED:
            raise VocabError(f"first five tokens must be {RESERVED}")
        if not self.index:
            self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls([t for t in tokens if t])

    @classmethod
    def build(cls, docs) -> "Vocab":
        seen = set()
        for doc in docs:
            for utt in doc.utterances:
                seen.update(utt.tokens)
        return cls(list(RESERVED) + sorted(seen - set(RESERVED)))


@dataclass
class TokenizedWindow:
    """Tokenizer output: ids, padding mask (True = real token), and for each
    surviving mention its window-level span and first-subword row."""

    token_ids: np.ndarray
    pad_mask: np.ndarray
    mention_rows: dict[str, int]
    mention_spans: dict[str, tuple[int, int]]
    dropped: tuple[str, ...] = ()


def tokenize(vocab: Vocab, utterances: list[Utterance], mentions: list[Mention] = (),
             max_len: int | None = None, pad_to: int | None = None) -> TokenizedWindow:
    """Concatenate a window into ids with speaker tags and aligned spans.

    An empty window is just [BOS].  With `max_len` the id sequence is cut
    there and mentions extending past the cut are dropped.  `pad_to` right-
    pads with PAD up to a fixed length (the mask marks real tokens).
    """
    ids: list[int] = [BOS_ID]
    offsets: dict[int, int] = {}
    for utt in utterances:
        ids.append(SPEAKER_A_ID if utt.idx % 2 == 0 else SPEAKER_B_ID)
        offsets[utt.idx] = len(ids)
        ids.extend(vocab.id_of(t) for t in utt.tokens)
    if max_len is not None and len(ids) > max_len:
        ids = ids[:max_len]
    n = len(ids)
    rows: dict[str, int] = {}
    spans: dict[str, tuple[int, int]] = {}
    dropped: list[str] = []
    for m in mentions:
        if m.utt not in offsets:
            dropped.append(m.id)
            continue
        lo = offsets[m.utt] + m.span[0]
        hi = offsets[m.utt] + m.span[1]
        if hi > n:
            dropped.append(m.id)
            continue
        rows[m.id] = lo
        spans[m.id] = (lo, hi)
    if pad_to is not None:
        if pad_to < n:
            raise VocabError(f"pad_to={pad_to} below sequence length {n}")
        ids = ids + [PAD_ID] * (pad_to - n)
    arr = np.asarray(ids, dtype=np.int64)
    mask = np.zeros(len(ids), dtype=bool)
    mask[:n] = True
    return TokenizedWindow(arr, mask, rows, spans, tuple(dropped))


def attach_encoding(instance: TextInstance, vocab: Vocab, max_len: int | None = None,
                    pad_to: int | None = None) -> TokenizedWindow:
    enc = tokenize(vocab, instance.utterances, instance.mentions, max_len, pad_to)
    instance.encoding = enc
    return enc


def sinusoidal_positions(n: int, d: int, dtype=np.float32) -> np.ndarray:
    """Fixed sine/cosine position table, interleaved by dimension pair."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange((d + 1) // 2, dtype=np.float64)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / d)
    table = np.zeros((n, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles[:, : d // 2])
    return table.astype(dtype)


@dataclass
class EncoderConfig:
    """Toy defaults; the full-scale preset lives in `presets`."""

    max_len: int = 64
    d_model: int = 64
    layers: int = 2
    heads: int = 2
    ffn_mult: int = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by heads {self.heads}")


class TransformerEncoder:
    """Embedding + sinusoidal positions + `layers` pre-norm self-attention
    blocks.  With zero layers the output is exactly embedding + positions.
    Padded rows are zeroed in the output."""

    def __init__(self, vocab_size: int, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab_size = vocab_size
        d, dt = cfg.d_model, np.dtype(cfg.dtype)
        self.dtype = dt

        def weight(*shape):
            return T.Tensor(T.truncated_normal(rng, shape, dtype=dt), requires_grad=True)

        def zeros(*shape):
            return T.Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

        def ones(*shape):
            return T.Tensor(np.ones(shape, dtype=dt), requires_grad=True)

        p: dict[str, T.Tensor] = {"embed": weight(vocab_size, d)}
        for i in range(cfg.layers):
            pre = f"layer{i}."
            p[pre + "ln1.gain"], p[pre + "ln1.bias"] = ones(d), zeros(d)
            for name in ("wq", "wk", "wv", "wo"):
                p[pre + name] = weight(d, d)
            p[pre + "bq"], p[pre + "bk"] = zeros(d), zeros(d)
            p[pre + "bv"], p[pre + "bo"] = zeros(d), zeros(d)
            p[pre + "ln2.gain"], p[pre + "ln2.bias"] = ones(d), zeros(d)
            h = d * cfg.ffn_mult
            p[pre + "ffn.w1"], p[pre + "ffn.b1"] = weight(d, h), zeros(h)
            p[pre + "ffn.w2"], p[pre + "ffn.b2"] = weight(h, d), zeros(d)
        self.params = p
        self._pos_cache: dict[int, np.ndarray] = {}

    def parameters(self) -> dict[str, T.Tensor]:
        return dict(self.params)

    def _positions(self, n: int) -> np.ndarray:
        if n not in self._pos_cache:
            self._pos_cache[n] = sinusoidal_positions(n, self.cfg.d_model, self.dtype)
        return self._pos_cache[n]

    def forward(self, token_ids: np.ndarray, pad_mask: np.ndarray | None = None) -> T.Tensor:
        n = len(token_ids)
        if n == 0:
            raise ValueError("cannot encode an empty token sequence")
        if n > self.cfg.max_len:
            raise ValueError(f"sequence length {n} exceeds max_len {self.cfg.max_len}")
        if token_ids.max() >= self.vocab_size or token_ids.min() < 0:
            raise ValueError("token id outside vocabulary")
        if pad_mask is None:
            pad_mask = np.ones(n, dtype=bool)
        p = self.params
        x = T.gather_rows(p["embed"], token_ids) + T.constant(self._positions(n), self.dtype)
        full_rows = bool(pad_mask.all())
        for i in range(self.cfg.layers):
            pre = f"layer{i}."
            h = T.layer_norm(x, p[pre + "ln1.gain"], p[pre + "ln1.bias"])
            q = T.add_bias(T.matmul(h, p[pre + "wq"]), p[pre + "bq"])
            k = T.add_bias(T.matmul(h, p[pre + "wk"]), p[pre + "bk"])
            v = T.add_bias(T.matmul(h, p[pre + "wv"]), p[pre + "bv"])
            att = T.multi_head_attention(q, k, v, self.cfg.heads,
                                         key_mask=None if full_rows else pad_mask)
            x = x + T.add_bias(T.matmul(att, p[pre + "wo"]), p[pre + "bo"])
            h = T.layer_norm(x, p[pre + "ln2.gain"], p[pre + "ln2.bias"])
            ff = T.relu(T.add_bias(T.matmul(h, p[pre + "ffn.w1"]), p[pre + "ffn.b1"]))
            x = x + T.add_bias(T.matmul(ff, p[pre + "ffn.w2"]), p[pre + "ffn.b2"])
        if not full_rows:
            keep = np.repeat(pad_mask[:, None], self.cfg.d_model, axis=1).astype(self.dtype)
            x = x * T.Tensor(keep)
        return x

"""Guidance-aware transformer encoder-decoder, built directly on the autodiff
tape.

Encoder: post-layer-norm self-attention + feed-forward stacks applied to
independent chunks of at most `chunk_len` tokens; chunk outputs are
concatenated and passed through a learned linear projection. The guidance
encoder reuses the same stack (shared parameters) on the serialized facts and
entity-chain frame, followed by its own affine projection. Decoder layers run
masked self-attention, cross-attention over the guidance states, then
cross-attention over the source states, then the feed-forward sublayer, each
wrapped as norm(h + sublayer(h)).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .knowledge import GuidanceBundle

PAD, UNK, CLS, SEP, BOS, EOS, ENT = range(7)
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]", "[ENT]")

NEG_INF = -1e9  # additive mask; large enough to zero attention weights exactly

AttnSink = list  # collects (weights, key_mask) pairs when passed to a forward


class ModelError(ValueError):
    """Misconfigured model or malformed forward-pass input."""


class Vocabulary:
    """Word-level token <-> id maps with fixed special-token ids 0..6."""

    def __init__(self, tokens: Iterable[str]):
        self.id_to_token = list(SPECIAL_TOKENS) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ModelError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def build(
        cls,
        token_seqs: Iterable[Iterable[str]],
        min_count: int = 2,
        always_include: Iterable[str] = (),
    ) -> "Vocabulary":
        """Count tokens and keep those with count >= min_count.

        `always_include` tokens (entity ids, for one) bypass the cutoff.
        Real tokens get ids from 7 upward, most frequent first, ties by token.
        """
        counts: dict[str, int] = {}
        for seq in token_seqs:
            for tok in seq:
                counts[tok] = counts.get(tok, 0) + 1
        keep = {t for t, c in counts.items() if c >= min_count}
        keep.update(always_include)
        keep.difference_update(SPECIAL_TOKENS)
        ordered = sorted(keep, key=lambda t: (-counts.get(t, 0), t))
        return cls(ordered)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode(self, tokens: Iterable[str]) -> np.ndarray:
        return np.array([self.id_of(t) for t in tokens], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.id_to_token[int(i)] for i in ids]


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 128
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    chunk_len: int = 512
    max_src: int = 1024
    max_tgt: int = 210

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.chunk_len < 8:
            raise ModelError(f"chunk_len must be >= 8, got {self.chunk_len}")


@dataclass
class EncodedStates:
    states: Tensor  # (seq_len, d_model)
    mask: np.ndarray  # (seq_len,) bool; False rows are padding


# ---------------------------------------------------------------------------
# Parameters


def _attention_spec(prefix: str, d: int) -> list[tuple[str, tuple[int, ...], str]]:
    return [
        (f"{prefix}.wq", (d, d), "weight"),
        (f"{prefix}.bq", (d,), "zero"),
        (f"{prefix}.wk", (d, d), "weight"),
        (f"{prefix}.bk", (d,), "zero"),
        (f"{prefix}.wv", (d, d), "weight"),
        (f"{prefix}.bv", (d,), "zero"),
        (f"{prefix}.wo", (d, d), "weight"),
        (f"{prefix}.bo", (d,), "zero"),
    ]


def _ln_spec(prefix: str, d: int) -> list[tuple[str, tuple[int, ...], str]]:
    return [(f"{prefix}.g", (d,), "one"), (f"{prefix}.b", (d,), "zero")]


def _ffn_spec(prefix: str, d: int, d_ff: int) -> list[tuple[str, tuple[int, ...], str]]:
    return [
        (f"{prefix}.w1", (d, d_ff), "weight"),
        (f"{prefix}.b1", (d_ff,), "zero"),
        (f"{prefix}.w2", (d_ff, d), "weight"),
        (f"{prefix}.b2", (d,), "zero"),
    ]


def parameter_spec(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every trainable tensor, in a fixed order."""
    d, dff = cfg.d_model, cfg.d_ff
    spec: list[tuple[str, tuple[int, ...], str]] = [
        ("tok_emb", (cfg.vocab_size, d), "weight"),
        ("enc_pos", (cfg.chunk_len, d), "weight"),
        ("dec_pos", (cfg.max_tgt, d), "weight"),
    ]
    for i in range(cfg.n_enc_layers):
        spec += _attention_spec(f"enc{i}.attn", d)
        spec += _ln_spec(f"enc{i}.ln1", d)
        spec += _ffn_spec(f"enc{i}.ffn", d, dff)
        spec += _ln_spec(f"enc{i}.ln2", d)
    spec += [("chunk_proj.w", (d, d), "weight"), ("chunk_proj.b", (d,), "zero")]
    spec += [("guid_proj.w", (d, d), "weight"), ("guid_proj.b", (d,), "zero")]
    for i in range(cfg.n_dec_layers):
        spec += _attention_spec(f"dec{i}.self_attn", d)
        spec += _ln_spec(f"dec{i}.ln1", d)
        spec += _attention_spec(f"dec{i}.guid_attn", d)
        spec += _ln_spec(f"dec{i}.ln2", d)
        spec += _attention_spec(f"dec{i}.src_attn", d)
        spec += _ln_spec(f"dec{i}.ln3", d)
        spec += _ffn_spec(f"dec{i}.ffn", d, dff)
        spec += _ln_spec(f"dec{i}.ln4", d)
    spec += [("out_proj.w", (d, cfg.vocab_size), "weight"), ("out_proj.b", (cfg.vocab_size,), "zero")]
    return spec


def init_parameters(cfg: ModelConfig, seed: int, init_scale: float = 0.02) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in parameter_spec(cfg):
        if kind == "weight":
            data = rng.normal(0.0, init_scale, size=shape)
        elif kind == "one":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# Attention and layers


def attention_bias(key_mask: np.ndarray, q_len: int, causal: bool) -> np.ndarray:
    """Additive (1, q_len, k_len) bias from a key padding mask, causal or not."""
    if not key_mask.any():
        raise ModelError("attention over a fully masked key sequence")
    bias = np.where(key_mask, 0.0, NEG_INF)[None, None, :]
    bias = np.broadcast_to(bias, (1, q_len, key_mask.size)).copy()
    if causal:
        if q_len != key_mask.size:
            raise ModelError("causal attention needs square score matrix")
        bias += np.triu(np.full((q_len, q_len), NEG_INF), k=1)[None]
    return bias


def multi_head_attention(
    params: dict[str, Tensor],
    prefix: str,
    q_in: Tensor,
    k_in: Tensor,
    v_in: Tensor,
    n_heads: int,
    key_mask: np.ndarray,
    causal: bool = False,
    sink: AttnSink | None = None,
) -> Tensor:
    """softmax(QK^T / sqrt(d_head) + bias) V per head, concatenated, projected."""
    t_q, d = q_in.shape
    t_k = k_in.shape[0]
    d_head = d // n_heads
    q = ad.add(ad.matmul(q_in, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = ad.add(ad.matmul(k_in, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = ad.add(ad.matmul(v_in, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    qh = ad.transpose(ad.reshape(q, (t_q, n_heads, d_head)), (1, 0, 2))
    kh = ad.transpose(ad.reshape(k, (t_k, n_heads, d_head)), (1, 2, 0))
    vh = ad.transpose(ad.reshape(v, (t_k, n_heads, d_head)), (1, 0, 2))
    scores = ad.scale(ad.matmul(qh, kh), 1.0 / np.sqrt(d_head))
    scores = ad.add(scores, Tensor(attention_bias(key_mask, t_q, causal)))
    weights = ad.softmax(scores)
    if sink is not None:
        sink.append((weights.data.copy(), key_mask.copy()))
    out = ad.matmul(weights, vh)
    out = ad.reshape(ad.transpose(out, (1, 0, 2)), (t_q, d))
    return ad.add(ad.matmul(out, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _ffn(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.w1"]), params[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, params[f"{prefix}.w2"]), params[f"{prefix}.b2"])


def _sublayer(x: Tensor, sub: Tensor, params: dict[str, Tensor], ln: str) -> Tensor:
    return ad.layer_norm(ad.add(x, sub), params[f"{ln}.g"], params[f"{ln}.b"])


def _encode_chunk(
    ids: np.ndarray,
    cfg: ModelConfig,
    params: dict[str, Tensor],
    sink: AttnSink | None,
) -> Tensor:
    key_mask = ids != PAD
    x = ad.add(ad.gather_rows(params["tok_emb"], ids), ad.gather_rows(params["enc_pos"], np.arange(ids.size)))
    for i in range(cfg.n_enc_layers):
        attn = multi_head_attention(
            params, f"enc{i}.attn", x, x, x, cfg.n_heads, key_mask, sink=sink
        )
        x = _sublayer(x, attn, params, f"enc{i}.ln1")
        x = _sublayer(x, _ffn(x, params, f"enc{i}.ffn"), params, f"enc{i}.ln2")
    return x


def encode_tokens(
    ids: np.ndarray,
    cfg: ModelConfig,
    params: dict[str, Tensor],
    sink: AttnSink | None = None,
) -> EncodedStates:
    """Shared encoder: chunked self-attention stack + linear chunk projection."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise ModelError("cannot encode an empty token sequence")
    chunks = [
        _encode_chunk(ids[s : s + cfg.chunk_len], cfg, params, sink)
        for s in range(0, ids.size, cfg.chunk_len)
    ]
    h = chunks[0] if len(chunks) == 1 else ad.concat_rows(chunks)
    h = ad.add(ad.matmul(h, params["chunk_proj.w"]), params["chunk_proj.b"])
    return EncodedStates(h, ids != PAD)


def encode_source(
    ids: np.ndarray,
    cfg: ModelConfig,
    params: dict[str, Tensor],
    sink: AttnSink | None = None,
) -> EncodedStates:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size > cfg.max_src:
        raise ModelError(f"source length {ids.size} exceeds max_src {cfg.max_src}")
    return encode_tokens(ids, cfg, params, sink)


def serialize_guidance(bundle: GuidanceBundle, vocab: Vocabulary) -> list[str]:
    """[CLS] fact tokens [SEP] ... [CLS] e1 [ENT] e2 ... [SEP] frame."""
    toks = ["[CLS]"]
    texts = bundle.fact_texts()
    if texts:
        for text in texts:
            toks += text + ["[SEP]"]
    else:
        toks.append("[SEP]")
    toks.append("[CLS]")
    ents = list(bundle.chain.entities)
    for j, ent in enumerate(ents):
        if j > 0:
            toks.append("[ENT]")
        toks.append(ent)
    toks.append("[SEP]")
    return toks


def encode_guidance(
    bundle: GuidanceBundle,
    vocab: Vocabulary,
    cfg: ModelConfig,
    params: dict[str, Tensor],
    sink: AttnSink | None = None,
) -> EncodedStates:
    """Encode the guidance frame with the shared stack, then the guidance affine."""
    ids = vocab.encode(serialize_guidance(bundle, vocab))
    enc = encode_tokens(ids, cfg, params, sink)
    h = ad.add(ad.matmul(enc.states, params["guid_proj.w"]), params["guid_proj.b"])
    return EncodedStates(h, enc.mask)


def decode_step(
    prefix_ids: np.ndarray,
    src: EncodedStates,
    guid: EncodedStates | None,
    cfg: ModelConfig,
    params: dict[str, Tensor],
    sink: AttnSink | None = None,
) -> Tensor:
    """Logits over the vocabulary at every prefix position.

    `guid=None` (vanilla operation) skips the guidance cross-attention
    sublayer entirely; its parameters stay disconnected from the loss.
    """
    prefix_ids = np.asarray(prefix_ids, dtype=np.int64)
    length = prefix_ids.size
    if length == 0:
        raise ModelError("decoder prefix is empty")
    if prefix_ids[0] != BOS:
        raise ModelError("decoder prefix must start with [BOS]")
    if length > cfg.max_tgt:
        raise ModelError(f"prefix length {length} exceeds max_tgt {cfg.max_tgt}")
    self_mask = np.ones(length, dtype=bool)
    x = ad.add(
        ad.gather_rows(params["tok_emb"], prefix_ids),
        ad.gather_rows(params["dec_pos"], np.arange(length)),
    )
    for i in range(cfg.n_dec_layers):
        attn = multi_head_attention(
            params, f"dec{i}.self_attn", x, x, x, cfg.n_heads, self_mask, causal=True, sink=sink
        )
        x = _sublayer(x, attn, params, f"dec{i}.ln1")
        if guid is not None:
            attn = multi_head_attention(
                params, f"dec{i}.guid_attn", x, guid.states, guid.states, cfg.n_heads,
                guid.mask, sink=sink,
            )
            x = _sublayer(x, attn, params, f"dec{i}.ln2")
        attn = multi_head_attention(
            params, f"dec{i}.src_attn", x, src.states, src.states, cfg.n_heads,
            src.mask, sink=sink,
        )
        x = _sublayer(x, attn, params, f"dec{i}.ln3")
        x = _sublayer(x, _ffn(x, params, f"dec{i}.ffn"), params, f"dec{i}.ln4")
    return ad.add(ad.matmul(x, params["out_proj.w"]), params["out_proj.b"])


def frame_source(tokens: list[str], vocab: Vocabulary, cfg: ModelConfig) -> np.ndarray:
    """[CLS] tokens [SEP] as ids, truncated so the frame fits max_src."""
    body = tokens[: cfg.max_src - 2]
    return vocab.encode(["[CLS]"] + body + ["[SEP]"])


def frame_target(tokens: list[str], vocab: Vocabulary, cfg: ModelConfig) -> np.ndarray:
    """[BOS] tokens [EOS] as ids, truncated so the frame fits max_tgt."""
    body = tokens[: cfg.max_tgt - 2]
    return vocab.encode(["[BOS]"] + body + ["[EOS]"])


# ---------------------------------------------------------------------------
# Checkpoints

_MAGIC = b"FSCKPT01"


def save_checkpoint(
    path: str | Path,
    cfg: ModelConfig,
    vocab: Vocabulary,
    params: dict[str, Tensor],
    extra: dict | None = None,
) -> None:
    """Write a deterministic binary container: header JSON + raw tensors."""
    names = [name for name, _, _ in parameter_spec(cfg)]
    tensors = []
    entries = []
    offset = 0
    for name in names:
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        tensors.append(arr)
        offset += arr.nbytes
    header = json.dumps(
        {
            "config": asdict(cfg),
            "vocab": vocab.id_to_token[len(SPECIAL_TOKENS) :],
            "params": entries,
            "extra": extra or {},
        },
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for arr in tensors:
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, Vocabulary, dict[str, Tensor], dict]:
    """Read a checkpoint and validate every tensor shape against the config."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ModelError(f"not a checkpoint file: {path}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        cfg = ModelConfig(**header["config"])
        vocab = Vocabulary(header["vocab"])
        expected = {name: shape for name, shape, _ in parameter_spec(cfg)}
        params: dict[str, Tensor] = {}
        for entry in header["params"]:
            name, shape = entry["name"], tuple(entry["shape"])
            if name not in expected:
                raise ModelError(f"unexpected parameter {name!r} in checkpoint")
            if shape != expected[name]:
                raise ModelError(
                    f"shape mismatch for {name!r}: checkpoint {shape}, config {expected[name]}"
                )
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * 8), dtype="<f8").reshape(shape)
            params[name] = Tensor(data.copy(), requires_grad=True)
        missing = set(expected) - set(params)
        if missing:
            raise ModelError(f"checkpoint missing parameters: {sorted(missing)}")
    return cfg, vocab, params, header.get("extra", {})

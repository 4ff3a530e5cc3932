"""Encoder-decoder ResMLP for sequence transduction.

The encoder stacks ordinary residual blocks whose token-mixing matrix is
sized for the longest supported sequence (``max_len``) and cut down to the
longest sequence of each batch. The decoder layer is a causal token-mixing
sublayer (lower-triangular matrix, only the lower triangle is stored), a
cross-attention sublayer over the encoder output and a channel MLP.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import CapacityError, ConfigurationError, DataError, DimensionError, InvariantError
from .layers import (AffineParams, Linear, PostScale, channel_mlp, named_parameters, pre_norm,
                     trunc_normal)
from .tensor import Tensor

PAD, BOS, EOS = 0, 1, 2
RESERVED = ("<pad>", "<bos>", "<eos>")


# ---------------------------------------------------------------- vocabulary / batches

class Vocabulary:
    """Token <-> id bijection with pad=0, bos=1, eos=2."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self.stoi[t] for t in tokens]
        except KeyError as e:
            raise DataError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.itos[i] for i in ids if i not in (PAD, BOS, EOS)]

    @classmethod
    def numeric(cls, size: int) -> "Vocabulary":
        return cls([str(i) for i in range(size - len(RESERVED))])

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(self.itos) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            lines = [ln.rstrip("\n") for ln in fh]
        if lines[:3] != list(RESERVED):
            raise DataError(f"{path}: first three lines must be {RESERVED}")
        if len(set(lines)) != len(lines):
            raise DataError(f"{path}: duplicate tokens")
        return cls(lines[3:])


@dataclass
class TokenBatch:
    ids: np.ndarray       # [b, L_max], zero padded
    lengths: np.ndarray   # [b]

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)
        if self.ids.ndim != 2 or self.lengths.shape != (self.ids.shape[0],):
            raise DimensionError(f"ids {self.ids.shape} / lengths {self.lengths.shape} mismatch")
        if (self.lengths > self.ids.shape[1]).any():
            raise DimensionError("a length exceeds the padded width")
        if (self.ids[~self.mask] != PAD).any():
            raise DataError("non-pad token beyond a sequence length")

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.ids.shape[1])[None, :] < self.lengths[:, None]

    @property
    def max_len(self) -> int:
        return int(self.lengths.max()) if self.lengths.size else 0

    @classmethod
    def from_sequences(cls, seqs: Sequence[Sequence[int]], width: int | None = None) -> "TokenBatch":
        width = max(len(s) for s in seqs) if width is None else width
        ids = np.zeros((len(seqs), max(width, 1)), dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
        return cls(ids, [len(s) for s in seqs])

    def trimmed(self) -> "TokenBatch":
        """Drop padding columns beyond the longest sequence."""
        return TokenBatch(self.ids[:, :max(self.max_len, 1)], self.lengths)


# ---------------------------------------------------------------- model

@dataclass(frozen=True)
class Seq2SeqConfig:
    vocab_size: int = 32
    dim: int = 64
    enc_depth: int = 2
    dec_depth: int = 2
    heads: int = 4
    max_len: int = 24
    activation: str = "gelu"
    pre_norm: str = "affine"
    layerscale_init: float = 0.2
    post_affine_bias: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("vocab_size", "dim", "enc_depth", "dec_depth", "heads", "max_len"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.vocab_size <= len(RESERVED):
            raise ConfigurationError("vocab_size must exceed the reserved ids")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.activation not in T.ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if self.pre_norm not in ("affine", "layernorm"):
            raise ConfigurationError(f"unknown pre_norm {self.pre_norm!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"unknown dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Seq2SeqConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown seq2seq config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EncoderBlock:
    pre1: AffineParams
    mix: Linear                      # [max_len, max_len] + bias [max_len]
    post1: PostScale
    pre2: AffineParams
    fc1: Linear
    fc2: Linear
    post2: PostScale


@dataclass
class AttentionParams:
    q: Linear
    k: Linear
    v: Linear
    o: Linear


@dataclass
class DecoderLayer:
    pre1: AffineParams
    mix_packed: Tensor               # lower triangle of A_dec, row-major
    mix_bias: Tensor                 # [max_len]
    post1: PostScale
    pre_x: AffineParams
    attn: AttentionParams
    post_x: PostScale
    pre2: AffineParams
    fc1: Linear
    fc2: Linear
    post2: PostScale


@dataclass
class Seq2SeqModel:
    config: Seq2SeqConfig = field(metadata={"static": True})
    src_embed: Tensor
    tgt_embed: Tensor
    encoder: list[EncoderBlock]
    enc_affine: AffineParams
    decoder: list[DecoderLayer]
    final_affine: AffineParams
    out: Linear

    @classmethod
    def create(cls, config: Seq2SeqConfig, seed: int = 0) -> "Seq2SeqModel":
        rng = np.random.default_rng(seed)
        dt = config.np_dtype
        d, L, V = config.dim, config.max_len, config.vocab_size
        ls, pb = config.layerscale_init, config.post_affine_bias

        def lin(n_in, n_out):
            return Linear.create(rng, n_in, n_out, dtype=dt)

        def emb():
            table = trunc_normal(rng, (V, d), std=1.0, dtype=dt)
            table[PAD] = 0.0
            return T.parameter(table)

        src, tgt = emb(), emb()
        encoder = [EncoderBlock(AffineParams.identity(d, dt), lin(L, L), PostScale.create(d, ls, pb, dt),
                                AffineParams.identity(d, dt), lin(d, 4 * d), lin(4 * d, d),
                                PostScale.create(d, ls, pb, dt))
                   for _ in range(config.enc_depth)]
        decoder = []
        for _ in range(config.dec_depth):
            packed = trunc_normal(rng, (L * (L + 1) // 2,), dtype=dt)
            decoder.append(DecoderLayer(
                AffineParams.identity(d, dt), T.parameter(packed), T.parameter(np.zeros(L, dtype=dt)),
                PostScale.create(d, ls, pb, dt),
                AffineParams.identity(d, dt), AttentionParams(lin(d, d), lin(d, d), lin(d, d), lin(d, d)),
                PostScale.create(d, ls, pb, dt),
                AffineParams.identity(d, dt), lin(d, 4 * d), lin(4 * d, d), PostScale.create(d, ls, pb, dt)))
        return cls(config, src, tgt, encoder, AffineParams.identity(d, dt), decoder,
                   AffineParams.identity(d, dt), lin(d, V))

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(named_parameters(self))

    def parameters(self) -> list[Tensor]:
        return [p for _, p in named_parameters(self)]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def decoder_matrix(self, layer: int) -> Tensor:
        return T.tril_unpack(self.decoder[layer].mix_packed, self.config.max_len)


# ---------------------------------------------------------------- operations

def extract_submatrix(a: Tensor, length: int) -> Tensor:
    """Top-left ``length`` x ``length`` block of a [max_len, max_len] matrix."""
    cap = a.shape[0]
    if length > cap:
        raise CapacityError(f"sequence length {length} exceeds capacity {cap}")
    if length < 1:
        raise DimensionError("length must be >= 1")
    if length == cap:
        return a
    return T.take(a, (slice(0, length), slice(0, length)))


def _mask_rows(x: Tensor, mask: np.ndarray | None) -> Tensor:
    if mask is None:
        return x
    return T.where(mask[..., None], x, 0.0)


def encoder_block(x: Tensor, blk: EncoderBlock, mask: np.ndarray | None, cfg: Seq2SeqConfig) -> Tensor:
    """Residual block on [b, L, d] where rows outside ``mask`` are padding and
    are excluded from token mixing."""
    L = x.shape[-2]
    a = extract_submatrix(blk.mix.weight, L)
    bias = T.take(blk.mix.bias, slice(0, L))
    h = _mask_rows(pre_norm(x, blk.pre1, cfg.pre_norm), mask)
    m = T.add(T.matmul(a, h), T.reshape(bias, (L, 1)))
    x = x + blk.post1(m)
    h = pre_norm(x, blk.pre2, cfg.pre_norm)
    return x + blk.post2(channel_mlp(h, blk.fc1, blk.fc2, cfg.activation))


def causal_sublayer(x: Tensor, a_dec: Tensor, bias: Tensor | None, pre: AffineParams, post: PostScale,
                    pre_kind: str = "affine") -> Tensor:
    """``X + post(A_dec · pre(X) + bias)`` with a lower-triangular ``A_dec``;
    output row t depends on input rows 0..t only."""
    if np.any(np.triu(a_dec.data, k=1) != 0):
        raise InvariantError("decoder mixing matrix has non-zero entries above the diagonal")
    L = x.shape[-2]
    if a_dec.shape != (L, L):
        raise DimensionError(f"A_dec {a_dec.shape} does not match sequence length {L}")
    m = T.matmul(a_dec, pre_norm(x, pre, pre_kind))
    if bias is not None:
        m = T.add(m, T.reshape(bias, (L, 1)))
    return x + post(m)


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, L, d = x.shape
    x = T.reshape(x, (*lead, L, h, d // h))
    k = len(lead)
    return T.permute(x, (*range(k), k + 1, k, k + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, L, dh = x.shape
    k = len(lead)
    x = T.permute(x, (*range(k), k + 1, k, k + 2))
    return T.reshape(x, (*lead, L, h * dh))


def cross_attention(dec: Tensor, enc: Tensor, params: AttentionParams, heads: int,
                    src_mask: np.ndarray | None = None, return_weights: bool = False):
    """Multi-head scaled dot-product attention, queries from ``dec`` [.., L_t, d],
    keys / values from ``enc`` [.., L_s, d]. Masked source positions get zero weight."""
    d = dec.shape[-1]
    if d % heads:
        raise ConfigurationError(f"dim {d} is not divisible by {heads} heads")
    dh = d // heads
    if src_mask is not None:
        src_mask = np.asarray(src_mask, dtype=bool)
        if not src_mask.any(axis=-1).all():
            raise DataError("a source row has every position masked")
    q = _split_heads(params.q(dec), heads)
    k = _split_heads(params.k(enc), heads)
    v = _split_heads(params.v(enc), heads)
    scores = T.mul(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dh))
    if src_mask is not None:
        m = src_mask.reshape(src_mask.shape[:-1] + (1, 1, src_mask.shape[-1]))
        scores = T.where(m, scores, -np.inf)
    w = T.softmax(scores, axis=-1)
    out = params.o(_merge_heads(T.matmul(w, v)))
    return (out, w) if return_weights else out


def _as_batch(x) -> TokenBatch:
    if isinstance(x, TokenBatch):
        return x
    return TokenBatch.from_sequences(x)


def encode(model: Seq2SeqModel, src: TokenBatch) -> tuple[Tensor, np.ndarray]:
    cfg = model.config
    src = _as_batch(src).trimmed()
    if src.max_len > cfg.max_len:
        raise CapacityError(f"source length {src.max_len} exceeds capacity {cfg.max_len}")
    mask = src.mask
    x = _mask_rows(T.embedding(model.src_embed, src.ids), mask)
    for blk in model.encoder:
        x = encoder_block(x, blk, mask, cfg)
    x = _mask_rows(model.enc_affine(x), mask)
    return x, mask


def decode(model: Seq2SeqModel, memory: Tensor, src_mask: np.ndarray, tgt_ids: np.ndarray) -> Tensor:
    """Teacher-forced decoder pass: [b, L_t] ids -> logits [b, L_t, V]."""
    return decode_embedded(model, memory, src_mask, T.embedding(model.tgt_embed, tgt_ids))


def decode_embedded(model: Seq2SeqModel, memory: Tensor, src_mask: np.ndarray, x: Tensor) -> Tensor:
    """Decoder stack on already embedded targets [b, L_t, d] -> logits [b, L_t, V]."""
    cfg = model.config
    L = x.shape[-2]
    if L > cfg.max_len:
        raise CapacityError(f"target length {L} exceeds capacity {cfg.max_len}")
    for i, layer in enumerate(model.decoder):
        a = extract_submatrix(model.decoder_matrix(i), L)
        x = causal_sublayer(x, a, T.take(layer.mix_bias, slice(0, L)), layer.pre1, layer.post1, cfg.pre_norm)
        att = cross_attention(pre_norm(x, layer.pre_x, cfg.pre_norm), memory, layer.attn, cfg.heads, src_mask)
        x = x + layer.post_x(att)
        x = x + layer.post2(channel_mlp(pre_norm(x, layer.pre2, cfg.pre_norm), layer.fc1, layer.fc2,
                                        cfg.activation))
    return model.out(model.final_affine(x))


def seq2seq_forward(model: Seq2SeqModel, src, tgt_in) -> Tensor:
    """Teacher-forcing logits [b, L_t, V] for a padded batch."""
    memory, mask = encode(model, src)
    tgt_in = _as_batch(tgt_in).trimmed()
    return decode(model, memory, mask, tgt_in.ids)


# ---------------------------------------------------------------- decoding

StepFn = Callable[[list[list[int]]], np.ndarray]


def model_step_fn(model: Seq2SeqModel, src_ids: Sequence[int]) -> StepFn:
    """Log-probabilities of the next token for a set of prefixes of one source."""
    memory, mask = encode(model, TokenBatch.from_sequences([list(src_ids)]))

    def step(prefixes: list[list[int]]) -> np.ndarray:
        n = len(prefixes)
        ids = np.array(prefixes, dtype=np.int64)
        mem = T.Tensor._wrap(np.broadcast_to(memory.data, (n, *memory.shape[1:])))
        logits = decode(model, mem, np.broadcast_to(mask, (n, mask.shape[1])), ids).data[:, -1, :]
        return T.log_softmax(T.Tensor._wrap(logits.astype(np.float64))).data
    return step


def beam_search_fn(step: StepFn, beam: int = 4, max_len: int = 20, bos: int = BOS, eos: int = EOS,
                   length_norm: bool = True) -> list[int]:
    """Beam search over a next-token log-probability function.

    Returns the generated tokens without bos / eos. Each step keeps the best
    ``2·beam`` expansions by cumulative log-probability; eos expansions ranked
    within the first ``beam`` are finished, the first ``beam`` others stay alive. Search stops when ``beam``
    hypotheses are finished or ``max_len`` tokens were produced. The winner
    maximises the (optionally length-normalised) score. Ties go to the lowest
    hypothesis / token index, so ``beam=1`` is greedy decoding.
    """
    if beam < 1:
        raise ConfigurationError("beam must be >= 1")
    alive: list[tuple[list[int], float]] = [([bos], 0.0)]
    finished: list[tuple[list[int], float]] = []

    def score(h):
        toks, lp = h
        return lp / (len(toks) - 1) if length_norm else lp

    for _ in range(max_len):
        logp = step([toks for toks, _ in alive])
        vocab = logp.shape[1]
        total = np.array([lp for _, lp in alive])[:, None] + logp
        flat = total.reshape(-1)
        order = np.argsort(-flat, kind="stable")[:2 * beam]
        new_alive = []
        for rank, idx in enumerate(order):
            hyp, tok = divmod(int(idx), vocab)
            if not np.isfinite(flat[idx]):
                continue
            cand = (alive[hyp][0] + [tok], float(flat[idx]))
            if tok == eos:
                if rank < beam:
                    finished.append(cand)
            elif len(new_alive) < beam:
                new_alive.append(cand)
        alive = new_alive
        if len(finished) >= beam or not alive:
            break
    pool = finished if finished else alive
    best = max(range(len(pool)), key=lambda i: (score(pool[i]), -i))
    return [t for t in pool[best][0][1:] if t != eos]


def beam_search(model: Seq2SeqModel, src_ids: Sequence[int], beam: int = 4, max_len: int | None = None,
                length_norm: bool = True) -> list[int]:
    max_len = model.config.max_len if max_len is None else min(max_len, model.config.max_len)
    return beam_search_fn(model_step_fn(model, src_ids), beam, max_len, length_norm=length_norm)


def greedy_decode(model: Seq2SeqModel, src, max_len: int | None = None) -> list[list[int]]:
    """Batched argmax decoding (ties to the lowest id)."""
    src = _as_batch(src)
    max_len = model.config.max_len if max_len is None else min(max_len, model.config.max_len)
    memory, mask = encode(model, src)
    b = len(src.lengths)
    seqs = np.full((b, 1), BOS, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    for _ in range(max_len):
        logits = decode(model, memory, mask, seqs).data[:, -1, :]
        nxt = np.where(done, PAD, np.argmax(logits, axis=-1))
        seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        done |= nxt == EOS
        if done.all():
            break
    out = []
    for row in seqs[:, 1:]:
        toks = []
        for t in row:
            if t in (EOS, PAD):
                break
            toks.append(int(t))
        out.append(toks)
    return out

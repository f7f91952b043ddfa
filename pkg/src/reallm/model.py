"""The ReaLLM network.

A chunked streaming encoder turns raw 20 ms frames into one embedding per
chunk; a causal Llama-style decoder consumes an interleaved history of
chunk embeddings and word-token embeddings and predicts the next label.

Two evaluation paths share the same parameters:

* the autodiff path (``encode_batch`` / ``decode_batch``) used for
  teacher-forced training, built from :mod:`reallm.numerics` ops;
* a plain-numpy incremental path (``DecoderState`` / ``decoder_extend``)
  with per-layer key/value caches, used for decoding.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, fields
from functools import lru_cache

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .vocab import BLANK, BOS, EOS, FIRST_WORD

MASK_VALUE = -1e9


class ConfigError(ValueError):
    pass


class InputTooShortError(ValueError):
    pass


class CapacityError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 24
    decoder_layers: int = 2
    decoder_dim: int = 64
    decoder_heads: int = 4
    decoder_ffn_dim: int = 256
    encoder_layers: int = 2
    encoder_dim: int = 64
    encoder_heads: int = 4
    encoder_ffn_dim: int = 256
    raw_frame_dim: int = 8
    raw_frame_ms: int = 20
    chunk_ms: int = 240
    encoder_right_context_chunks: int = 4
    max_emissions_per_chunk: int = 10
    max_context: int = 4096
    rope_base: float = 10000.0
    seed: int = 0

    def violations(self) -> list[str]:
        out = []
        if self.raw_frame_ms <= 0 or self.chunk_ms <= 0 or self.chunk_ms % self.raw_frame_ms:
            out.append("chunk_ms must be a positive multiple of raw_frame_ms")
        if self.decoder_dim % self.decoder_heads:
            out.append("decoder_dim must be divisible by decoder_heads")
        if self.encoder_dim % self.encoder_heads:
            out.append("encoder_dim must be divisible by encoder_heads")
        for name in ("decoder_dim", "encoder_dim"):
            heads = self.decoder_heads if name == "decoder_dim" else self.encoder_heads
            if heads and (getattr(self, name) // heads) % 2:
                out.append(f"{name} per head must be even for rotary embeddings")
        if self.vocab_size < 4:
            out.append("vocab_size must be >= 4 (BLANK, BOS, EOS and at least one word)")
        for name in ("decoder_layers", "decoder_dim", "decoder_heads", "decoder_ffn_dim",
                     "encoder_dim", "encoder_heads", "encoder_ffn_dim", "raw_frame_dim", "max_context"):
            if getattr(self, name) <= 0:
                out.append(f"{name} must be positive")
        if self.encoder_layers < 0 or self.encoder_right_context_chunks < 0:
            out.append("encoder_layers and encoder_right_context_chunks must be >= 0")
        if self.max_emissions_per_chunk < 1:
            out.append("max_emissions_per_chunk must be >= 1")
        return out

    def validate(self) -> "ModelConfig":
        bad = self.violations()
        if bad:
            raise ConfigError("invalid model config: " + "; ".join(bad))
        return self

    @property
    def frames_per_chunk(self) -> int:
        return self.chunk_ms // self.raw_frame_ms

    @property
    def chunk_input_dim(self) -> int:
        return self.frames_per_chunk * self.raw_frame_dim

    def layer_right_context(self) -> list[int]:
        """Right context per encoder layer; the per-layer values sum to the total budget."""
        n = self.encoder_layers
        if n == 0:
            return []
        base, extra = divmod(self.encoder_right_context_chunks, n)
        return [base + (1 if i < extra else 0) for i in range(n)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise ConfigError(f"unknown model config key {k!r}")
            kw[k] = float(v) if k == "rope_base" else int(v)
        return cls(**kw)


ModelParams = dict  # name -> Tensor, in creation order


def _block_shapes(prefix: str, dim: int, ffn: int) -> list[tuple[str, tuple[int, ...]]]:
    return [
        (prefix + "attn_norm", (dim,)),
        (prefix + "wq", (dim, dim)),
        (prefix + "wk", (dim, dim)),
        (prefix + "wv", (dim, dim)),
        (prefix + "wo", (dim, dim)),
        (prefix + "ffn_norm", (dim,)),
        (prefix + "w1", (dim, ffn)),
        (prefix + "w3", (dim, ffn)),
        (prefix + "w2", (ffn, dim)),
    ]


def param_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    c = config
    shapes = [
        ("frame_in.w", (c.chunk_input_dim, c.encoder_dim)),
        ("frame_in.b", (c.encoder_dim,)),
    ]
    for i in range(c.encoder_layers):
        shapes += _block_shapes(f"enc.{i}.", c.encoder_dim, c.encoder_ffn_dim)
    shapes += [
        ("enc.out_norm", (c.encoder_dim,)),
        ("frame_proj.w", (c.encoder_dim, c.decoder_dim)),
        ("frame_proj.b", (c.decoder_dim,)),
        ("tok_emb", (c.vocab_size, c.decoder_dim)),
    ]
    for i in range(c.decoder_layers):
        shapes += _block_shapes(f"dec.{i}.", c.decoder_dim, c.decoder_ffn_dim)
    shapes += [
        ("dec.out_norm", (c.decoder_dim,)),
        ("out_proj", (c.decoder_dim, c.vocab_size)),
    ]
    return shapes


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count.

    With C = chunk input size (frames_per_chunk * raw_frame_dim), E/Fe the
    encoder width/FFN width, D/Fd the decoder ones, V the vocabulary and a
    transformer block costing ``2W + 4W^2 + 3W*F``::

        (C*E + E) + Le*(2E + 4E^2 + 3E*Fe) + E + (E*D + D)
        + V*D + Ld*(2D + 4D^2 + 3D*Fd) + D + D*V
    """
    c = config
    C, E, D, V = c.chunk_input_dim, c.encoder_dim, c.decoder_dim, c.vocab_size

    def block(w, f):
        return 2 * w + 4 * w * w + 3 * w * f

    return (C * E + E + c.encoder_layers * block(E, c.encoder_ffn_dim) + E + E * D + D
            + V * D + c.decoder_layers * block(D, c.decoder_ffn_dim) + D + D * V)


def init_params(config: ModelConfig, dtype=np.float32) -> ModelParams:
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: ModelParams = {}
    for name, shape in param_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("norm"):
            data = np.ones(shape)
        elif leaf == "b":
            data = np.zeros(shape)
        elif name == "tok_emb":
            data = rng.uniform(-1.0, 1.0, size=shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return params


def cast_params(params: ModelParams, dtype) -> ModelParams:
    return {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}


# ---------------------------------------------------------------- inputs


class ItemKind(enum.Enum):
    BOS = "BOS"
    FRAME = "FRAME"
    TOKEN = "TOKEN"
    EOS_EMB = "EOS_EMB"


@dataclass(frozen=True)
class InputItem:
    """One decoder input position.

    FRAME items carry the chunk index in ``value`` (into the owning sample's
    frames) or the chunk embedding itself in ``vector`` when streaming.
    """

    kind: ItemKind
    value: int = -1
    vector: np.ndarray | None = None

    @classmethod
    def token(cls, tid: int) -> "InputItem":
        return cls(ItemKind.TOKEN, tid)

    @classmethod
    def frame(cls, index: int, vector=None) -> "InputItem":
        return cls(ItemKind.FRAME, index, vector)

    def label(self) -> str:
        if self.kind is ItemKind.FRAME:
            return f"f{self.value + 1}"
        if self.kind is ItemKind.TOKEN:
            return str(self.value)
        return self.kind.value

    def __eq__(self, other):
        return isinstance(other, InputItem) and (self.kind, self.value) == (other.kind, other.value)

    def __hash__(self):
        return hash((self.kind, self.value))


BOS_ITEM = InputItem(ItemKind.BOS)
EOS_ITEM = InputItem(ItemKind.EOS_EMB)


def item_token_row(item: InputItem) -> int | None:
    """Row of the token embedding table used for a non-frame item."""
    if item.kind is ItemKind.BOS:
        return BOS
    if item.kind is ItemKind.EOS_EMB:
        return EOS
    if item.kind is ItemKind.TOKEN:
        return item.value
    return None


# ---------------------------------------------------------------- shared math


@lru_cache(maxsize=64)
def _rope_tables(head_dim: int, start: int, length: int, base: float, dtype_name: str):
    inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.arange(start, start + length, dtype=np.float64)[:, None] * inv[None, :]
    ang = np.concatenate([ang, ang], axis=1)
    return np.cos(ang).astype(dtype_name), np.sin(ang).astype(dtype_name)


def rope_tables(head_dim, start, length, base, dtype=np.float32):
    return _rope_tables(head_dim, start, length, float(base), np.dtype(dtype).name)


def stack_chunks(raw_frames: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Group raw frames into chunk vectors [K, frames_per_chunk * raw_frame_dim].

    Trailing frames that do not fill a chunk are merged into the final chunk:
    its (fpc + r) frames are averaged down to fpc slots.
    """
    raw = np.asarray(raw_frames)
    if raw.ndim != 2 or raw.shape[1] != config.raw_frame_dim:
        raise ValueError(f"raw frames must be [N, {config.raw_frame_dim}], got {raw.shape}")
    fpc = config.frames_per_chunk
    k = raw.shape[0] // fpc
    if k == 0:
        raise InputTooShortError(
            f"{raw.shape[0]} frames ({raw.shape[0] * config.raw_frame_ms} ms) is shorter than one "
            f"{config.chunk_ms} ms chunk")
    head = raw[: (k - 1) * fpc].reshape(k - 1, fpc * raw.shape[1])
    tail = raw[(k - 1) * fpc:]
    if tail.shape[0] > fpc:
        tail = np.stack([g.mean(axis=0) for g in np.array_split(tail, fpc)])
    return np.concatenate([head, tail.reshape(1, -1)], axis=0)


def chunk_count(n_raw_frames: int, config: ModelConfig) -> int:
    return n_raw_frames // config.frames_per_chunk


# ---------------------------------------------------------------- autodiff path


def _block(p: ModelParams, prefix: str, x: Tensor, heads: int, cos, sin, mask: np.ndarray) -> Tensor:
    b, length, dim = x.shape
    dh = dim // heads

    def split(t):
        return nx.transpose(nx.reshape(t, (b, length, heads, dh)), (0, 2, 1, 3))

    h = nx.rms_norm(x, p[prefix + "attn_norm"])
    q = nx.rope(split(h @ p[prefix + "wq"]), cos, sin)
    k = nx.rope(split(h @ p[prefix + "wk"]), cos, sin)
    v = split(h @ p[prefix + "wv"])
    scores = (q @ nx.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh)) + mask
    att = nx.softmax(scores) @ v
    att = nx.reshape(nx.transpose(att, (0, 2, 1, 3)), (b, length, dim))
    x = x + att @ p[prefix + "wo"]
    h = nx.rms_norm(x, p[prefix + "ffn_norm"])
    return x + (nx.silu(h @ p[prefix + "w1"]) * (h @ p[prefix + "w3"])) @ p[prefix + "w2"]


def _key_mask(lengths, length: int) -> np.ndarray:
    return np.arange(length)[None, :] < np.asarray(lengths)[:, None]


def encoder_mask(lengths, length: int, right: int, dtype=np.float32) -> np.ndarray:
    """Additive [B, 1, K, K] mask: query k sees every valid key j <= k + right."""
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    allowed = (j <= i + right)[None] & _key_mask(lengths, length)[:, None, :]
    return np.where(allowed, 0.0, MASK_VALUE).astype(dtype)[:, None]


def causal_mask(lengths, length: int, dtype=np.float32) -> np.ndarray:
    i = np.arange(length)[:, None]
    j = np.arange(length)[None, :]
    allowed = (j <= i)[None] & _key_mask(lengths, length)[:, None, :]
    return np.where(allowed, 0.0, MASK_VALUE).astype(dtype)[:, None]


def encode_batch(params: ModelParams, config: ModelConfig, chunk_inputs: np.ndarray, lengths) -> Tensor:
    """Encode a padded batch of stacked chunks [B, K, C] into [B, K, decoder_dim]."""
    dtype = params["frame_in.w"].dtype
    x = Tensor(np.asarray(chunk_inputs, dtype=dtype)) @ params["frame_in.w"] + params["frame_in.b"]
    length = x.shape[1]
    dh = config.encoder_dim // config.encoder_heads
    cos, sin = rope_tables(dh, 0, length, config.rope_base, dtype)
    for i, right in enumerate(config.layer_right_context()):
        mask = encoder_mask(lengths, length, right, dtype)
        x = _block(params, f"enc.{i}.", x, config.encoder_heads, cos, sin, mask)
    x = nx.rms_norm(x, params["enc.out_norm"])
    return x @ params["frame_proj.w"] + params["frame_proj.b"]


def decode_batch(params: ModelParams, config: ModelConfig, inputs: Tensor, lengths) -> Tensor:
    """Causal decoder over padded input vectors [B, L, D]; returns logits [B, L, V]."""
    length = inputs.shape[1]
    dtype = inputs.dtype
    dh = config.decoder_dim // config.decoder_heads
    cos, sin = rope_tables(dh, 0, length, config.rope_base, dtype)
    mask = causal_mask(lengths, length, dtype)
    x = inputs
    for i in range(config.decoder_layers):
        x = _block(params, f"dec.{i}.", x, config.decoder_heads, cos, sin, mask)
    x = nx.rms_norm(x, params["dec.out_norm"])
    return x @ params["out_proj"]


def encode_utterance(raw_frames: np.ndarray, config: ModelConfig, params: ModelParams) -> np.ndarray:
    """Chunk embeddings [K, decoder_dim] for one utterance (no graph recorded)."""
    chunks = stack_chunks(raw_frames, config)
    with nx.no_grad():
        out = encode_batch(params, config, chunks[None], [chunks.shape[0]])
    return out.data[0]


def assemble_inputs(params: ModelParams, items_batch, frames: Tensor, frame_offsets) -> tuple[Tensor, list[int]]:
    """Interleave token embeddings and chunk embeddings into a padded [B, L, D] tensor.

    ``frames`` holds every sample's chunk embeddings stacked as rows; sample b's
    chunk j lives at row ``frame_offsets[b] + j``.
    """
    emb = params["tok_emb"]
    vocab = emb.shape[0]
    lengths = [len(items) for items in items_batch]
    length = max(lengths)
    index = np.full((len(items_batch), length), BLANK, dtype=np.int64)
    for b, items in enumerate(items_batch):
        for t, item in enumerate(items):
            if item.kind is ItemKind.FRAME:
                index[b, t] = vocab + frame_offsets[b] + item.value
            else:
                index[b, t] = item_token_row(item)
    source = nx.concat([emb, frames], axis=0) if frames is not None else emb
    return nx.gather_rows(source, index), lengths


def forward_teacher_forced(sample, params: ModelParams, config: ModelConfig, frames=None) -> Tensor:
    """Logits [L, V] for one interleaved sample; row i predicts ``sample.targets[i]``.

    ``frames`` defaults to the sample's own chunk embeddings (a constant).
    """
    if frames is None:
        frames = Tensor(np.asarray(sample.frames, dtype=params["tok_emb"].dtype))
    inputs, lengths = assemble_inputs(params, [sample.inputs], frames, [0])
    logits = decode_batch(params, config, inputs, lengths)
    return nx.reshape(logits, (logits.shape[1], logits.shape[2]))


# ---------------------------------------------------------------- incremental path


def _rms_np(x, gain):
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + nx.RMS_EPS) * gain


def _silu_np(x):
    return x / (1.0 + np.exp(-x))


class DecoderState:
    """Per-layer key/value caches for every consumed position."""

    def __init__(self, config: ModelConfig, dtype=np.float32, capacity: int = 64):
        self.config = config
        heads = config.decoder_heads
        dh = config.decoder_dim // heads
        self.keys = [np.zeros((heads, capacity, dh), dtype) for _ in range(config.decoder_layers)]
        self.values = [np.zeros((heads, capacity, dh), dtype) for _ in range(config.decoder_layers)]
        self.current_length = 0

    @property
    def capacity(self) -> int:
        return self.keys[0].shape[1] if self.keys else 1 << 30

    def _reserve(self, n: int) -> None:
        need = self.current_length + n
        if need > self.config.max_context:
            raise CapacityError(f"decoder context of {self.config.max_context} positions exceeded")
        if need <= self.capacity:
            return
        cap = max(need, 2 * self.capacity)
        for store in (self.keys, self.values):
            for i, arr in enumerate(store):
                grown = np.zeros((arr.shape[0], cap, arr.shape[2]), arr.dtype)
                grown[:, : self.current_length] = arr[:, : self.current_length]
                store[i] = grown

    def copy(self) -> "DecoderState":
        new = DecoderState.__new__(DecoderState)
        new.config = self.config
        n = self.current_length
        cap = max(n + 16, 64)
        new.keys, new.values = [], []
        for src, dst in ((self.keys, new.keys), (self.values, new.values)):
            for arr in src:
                a = np.zeros((arr.shape[0], cap, arr.shape[2]), arr.dtype)
                a[:, :n] = arr[:, :n]
                dst.append(a)
        new.current_length = n
        return new


class NumpyParams:
    """Plain-array view of ModelParams for the decode path."""

    def __init__(self, params: ModelParams):
        self.arrays = {k: v.data for k, v in params.items()}

    def __getitem__(self, key):
        return self.arrays[key]


def decoder_extend(state: DecoderState, vectors: np.ndarray, p: NumpyParams, config: ModelConfig,
                   logits: str = "last") -> np.ndarray | None:
    """Consume input vectors [M, D] (mutating ``state``) and return logits.

    ``logits`` selects which rows reach the output layer: "last" -> [V],
    "all" -> [M, V], "none" -> None.
    """
    x = np.asarray(vectors, dtype=state.keys[0].dtype if state.keys else np.float32)
    if x.ndim == 1:
        x = x[None]
    m = x.shape[0]
    state._reserve(m)
    n = state.current_length
    heads = config.decoder_heads
    dh = config.decoder_dim // heads
    cos, sin = rope_tables(dh, n, m, config.rope_base, x.dtype)
    allowed = np.arange(n + m)[None, :] <= (n + np.arange(m))[:, None]
    bias = np.where(allowed, 0.0, MASK_VALUE).astype(x.dtype)
    scale = 1.0 / math.sqrt(dh)
    for i in range(config.decoder_layers):
        pre = f"dec.{i}."
        h = _rms_np(x, p[pre + "attn_norm"])
        q = nx.rope_np((h @ p[pre + "wq"]).reshape(m, heads, dh).transpose(1, 0, 2), cos, sin)
        k = nx.rope_np((h @ p[pre + "wk"]).reshape(m, heads, dh).transpose(1, 0, 2), cos, sin)
        v = (h @ p[pre + "wv"]).reshape(m, heads, dh).transpose(1, 0, 2)
        state.keys[i][:, n:n + m] = k
        state.values[i][:, n:n + m] = v
        keys = state.keys[i][:, : n + m]
        vals = state.values[i][:, : n + m]
        s = q @ keys.transpose(0, 2, 1) * scale + bias
        s = np.exp(s - s.max(axis=-1, keepdims=True))
        s /= s.sum(axis=-1, keepdims=True)
        att = (s @ vals).transpose(1, 0, 2).reshape(m, heads * dh)
        x = x + att @ p[pre + "wo"]
        h = _rms_np(x, p[pre + "ffn_norm"])
        x = x + (_silu_np(h @ p[pre + "w1"]) * (h @ p[pre + "w3"])) @ p[pre + "w2"]
    state.current_length = n + m
    if logits == "none":
        return None
    if logits == "last":
        return _rms_np(x[-1], p["dec.out_norm"]) @ p["out_proj"]
    return _rms_np(x, p["dec.out_norm"]) @ p["out_proj"]


class OpCounter:
    """Decoder positions consumed (by input kind) and output-layer evaluations."""

    def __init__(self):
        self.by_kind = {k: 0 for k in ItemKind}
        self.outputs = 0
        self.blank_outputs = 0

    def positions(self, kind: ItemKind, n: int) -> None:
        self.by_kind[kind] += n

    @property
    def decoder_positions(self) -> int:
        return sum(self.by_kind.values())

    def as_dict(self) -> dict:
        d = {f"positions_{k.value.lower()}": v for k, v in self.by_kind.items()}
        d.update(outputs=self.outputs, blank_outputs=self.blank_outputs)
        return d


class ReaLLM:
    """Config + parameters with the decode-time API."""

    def __init__(self, config: ModelConfig, params: ModelParams | None = None):
        self.config = config.validate()
        self.params = params if params is not None else init_params(config)
        self.refresh()

    def refresh(self) -> None:
        """Re-snapshot parameter arrays after training updates."""
        self.np = NumpyParams(self.params)
        self.dtype = self.params["tok_emb"].dtype

    def encode(self, raw_frames: np.ndarray) -> np.ndarray:
        return encode_utterance(raw_frames, self.config, self.params)

    def new_state(self) -> DecoderState:
        return DecoderState(self.config, self.dtype)

    def embed(self, item: InputItem, frames: np.ndarray | None = None) -> np.ndarray:
        if item.kind is ItemKind.FRAME:
            vec = item.vector if item.vector is not None else frames[item.value]
            return np.asarray(vec, dtype=self.dtype)
        row = item_token_row(item)
        if not 0 <= row < self.config.vocab_size:
            raise ValueError(f"token id {row} outside vocabulary")
        return self.np["tok_emb"][row]

    def step(self, state: DecoderState, item: InputItem, frames=None, counter=None) -> np.ndarray:
        """Append one item to ``state`` and return next-label logits [V]."""
        logits = decoder_extend(state, self.embed(item, frames)[None], self.np, self.config, "last")
        if counter is not None:
            counter.positions(item.kind, 1)
            counter.outputs += 1
        return logits

    def feed(self, state: DecoderState, items, frames=None, counter=None, want_logits: bool = True):
        """Prefill several items in one pass; logits for the last one (or None)."""
        if not items:
            return None
        vecs = np.stack([self.embed(it, frames) for it in items])
        out = decoder_extend(state, vecs, self.np, self.config, "last" if want_logits else "none")
        if counter is not None:
            for it in items:
                counter.positions(it.kind, 1)
            if want_logits:
                counter.outputs += 1
        return out


def decoder_step(state: DecoderState, item: InputItem, model: ReaLLM, frames=None):
    """Functional form: (logits, state) after consuming ``item``. The state is updated in place."""
    return model.step(state, item, frames), state


def word_ids(vocab_size: int) -> range:
    return range(FIRST_WORD, vocab_size)


__all__ = [
    "BLANK", "BOS", "EOS", "CapacityError", "ConfigError", "DecoderState", "InputItem",
    "InputTooShortError", "ItemKind", "ModelConfig", "OpCounter", "ReaLLM", "decoder_step", "encode_utterance",
    "forward_teacher_forced", "init_params", "param_count",
]

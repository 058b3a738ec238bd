"""Pre-layernorm decoder-only transformer with fully exposed residual stream.

Everything here is plain numpy in float32. A single batched forward routine
(`_forward`) serves tracing, decoding, interventions and training; the
training backward pass lives in :mod:`ragscope.train` and consumes the cache
produced here.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from typing import Any

import numpy as np

DTYPE = np.float32
GELU_C = math.sqrt(2.0 / math.pi)


class ModelError(ValueError):
    """Invalid model input (token ids, sequence length, weight shapes)."""


class CapacityError(ModelError):
    """Sequence would exceed the model's context window."""


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ffn: int = 256
    vocab_size: int = 128
    max_seq_len: int = 256
    layernorm_epsilon: float = 1e-5
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ffn", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be >= 2")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if not self.layernorm_epsilon > 0:
            raise ValueError("layernorm_epsilon must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelConfig":
        return cls(**{f.name: d[f.name] for f in dataclasses.fields(cls) if f.name in d})

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def tensor_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor names and shapes, in file order.

    Per-head projections are stacked along a leading head axis, so
    ``blocks.{l}.attn.W_Q[h]`` is the d x d_head query matrix of head (l, h).
    """
    c = config
    shapes: dict[str, tuple[int, ...]] = {
        "embed.W_E": (c.vocab_size, c.d_model),
        "embed.W_pos": (c.max_seq_len, c.d_model),
    }
    for l in range(c.n_layers):
        p = f"blocks.{l}."
        shapes[p + "ln1.w"] = (c.d_model,)
        shapes[p + "ln1.b"] = (c.d_model,)
        shapes[p + "attn.W_Q"] = (c.n_heads, c.d_model, c.d_head)
        shapes[p + "attn.W_K"] = (c.n_heads, c.d_model, c.d_head)
        shapes[p + "attn.W_V"] = (c.n_heads, c.d_model, c.d_head)
        shapes[p + "attn.W_O"] = (c.n_heads, c.d_head, c.d_model)
        shapes[p + "ln2.w"] = (c.d_model,)
        shapes[p + "ln2.b"] = (c.d_model,)
        shapes[p + "ffn.K"] = (c.d_ffn, c.d_model)
        shapes[p + "ffn.V"] = (c.d_ffn, c.d_model)
    shapes["ln_final.w"] = (c.d_model,)
    shapes["ln_final.b"] = (c.d_model,)
    shapes["unembed.W_U"] = (c.d_model, c.vocab_size)
    return shapes


class Weights(Mapping[str, np.ndarray]):
    """Immutable named-tensor container for every model parameter."""

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray], dtype=DTYPE):
        expected = tensor_shapes(config)
        missing = set(expected) - set(tensors)
        extra = set(tensors) - set(expected)
        if missing or extra:
            raise ModelError(f"tensor set mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        store = {}
        for name, shape in expected.items():
            arr = np.array(tensors[name], dtype=dtype, copy=True)
            if arr.shape != shape:
                raise ModelError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"{name}: non-finite entries")
            arr.flags.writeable = False
            store[name] = arr
        self.config = config
        self.dtype = np.dtype(dtype)
        self._tensors = store

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self):
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def replace(self, **updates: np.ndarray) -> "Weights":
        """Copy with some tensors swapped. Names use '__' in place of '.'."""
        tensors = dict(self._tensors)
        for key, value in updates.items():
            tensors[key.replace("__", ".")] = value
        return Weights(self.config, tensors, self.dtype)

    def with_tensors(self, updates: Mapping[str, np.ndarray]) -> "Weights":
        tensors = dict(self._tensors)
        tensors.update(updates)
        return Weights(self.config, tensors, self.dtype)

    def astype(self, dtype) -> "Weights":
        return Weights(self.config, self._tensors, dtype)

    def allclose(self, other: "Weights", atol: float = 0.0) -> bool:
        return set(self) == set(other) and all(
            np.array_equal(self[k], other[k]) if atol == 0 else np.allclose(self[k], other[k], atol=atol)
            for k in self
        )


def init_weights(config: ModelConfig, seed: int | None = None) -> Weights:
    rng = np.random.default_rng(config.rng_seed if seed is None else seed)
    c = config
    depth = 1.0 / math.sqrt(2 * c.n_layers)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config).items():
        if name.endswith(".w"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        elif name in ("embed.W_E", "embed.W_pos"):
            arr = rng.normal(0.0, 0.5, shape)
        elif name.endswith("attn.W_O"):
            arr = rng.normal(0.0, depth / math.sqrt(c.d_model), shape)
        elif name.endswith("ffn.V"):
            arr = rng.normal(0.0, depth / math.sqrt(c.d_ffn), shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(c.d_model), shape)
        tensors[name] = arr
    return Weights(config, tensors)


def zero_block_weights(config: ModelConfig, seed: int | None = None) -> Weights:
    """Random embeddings/unembedding, all attention and FFN matrices zero."""
    w = init_weights(config, seed)
    zeros = {
        name: np.zeros_like(w[name])
        for name in w
        if ".attn." in name or ".ffn." in name
    }
    return w.with_tensors(zeros)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------


def layernorm(x: np.ndarray, w: np.ndarray, b: np.ndarray, eps: float):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * w + b, xhat, rstd


def gelu(x: np.ndarray) -> np.ndarray:
    c = x.dtype.type(GELU_C)
    a = x.dtype.type(0.044715)
    return 0.5 * x * (1.0 + np.tanh(c * (x + a * (x * x * x))))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    c = x.dtype.type(GELU_C)
    a = x.dtype.type(0.044715)
    x2 = x * x
    t = np.tanh(c * (x + a * x2 * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * (c * (1.0 + 3 * a * x2))


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Intervention:
    """Modifiers applied inside the forward pass.

    head_scale / ffn_scale multiply component outputs before they enter the
    residual stream; `positions` restricts the scaling to those sequence
    positions (negative indices count from the end, None means all).
    noise_heads lists heads whose pre-softmax scores are replaced by seeded
    standard-normal draws.
    """

    head_scale: np.ndarray | None = None  # (L, H)
    ffn_scale: np.ndarray | None = None  # (L,)
    noise_heads: tuple[tuple[int, int], ...] = ()
    noise_seed: int = 0
    positions: tuple[int, ...] | None = None

    @property
    def is_identity(self) -> bool:
        return (
            (self.head_scale is None or np.all(self.head_scale == 1))
            and (self.ffn_scale is None or np.all(self.ffn_scale == 1))
            and not self.noise_heads
        )


def _merge_proj(w: np.ndarray) -> np.ndarray:
    """(H, d, dh) per-head projections -> (d, H*dh)."""
    H, d, dh = w.shape
    return w.transpose(1, 0, 2).reshape(d, H * dh)


def _split_heads(x: np.ndarray, H: int) -> np.ndarray:
    """(B, T, H*dh) -> (B, H, T, dh)."""
    B, T, F = x.shape
    return x.reshape(B, T, H, F // H).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    """(B, H, T, dh) -> (B, T, H*dh)."""
    B, H, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, H * dh)


@dataclasses.dataclass
class ForwardCache:
    tokens: np.ndarray  # (B, T)
    x0: np.ndarray  # (B, T, d)
    layers: list[dict[str, np.ndarray]]
    x_final: np.ndarray  # (B, T, d) residual after last block
    ln_final: tuple[np.ndarray, np.ndarray, np.ndarray]
    logits: np.ndarray  # (B, T, V)
    head_scale: np.ndarray  # (L, H, T)
    ffn_scale: np.ndarray  # (L, T)


def _check_tokens(config: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.ndim != 2:
        raise ModelError("tokens must be a 2-D batch")
    T = tokens.shape[1]
    if T < 1:
        raise ModelError("empty token sequence")
    if T > config.max_seq_len:
        raise CapacityError(f"sequence length {T} exceeds max_seq_len {config.max_seq_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ModelError(f"token id out of range [0, {config.vocab_size})")


def _forward(weights: Weights, tokens: np.ndarray, iv: Intervention | None = None) -> ForwardCache:
    c = weights.config
    tokens = np.asarray(tokens, dtype=np.int64)
    _check_tokens(c, tokens)
    dt = weights.dtype
    B, T = tokens.shape
    L, H = c.n_layers, c.n_heads
    eps = c.layernorm_epsilon
    iv = iv or Intervention()
    head_scale = np.ones((L, H), dtype=dt) if iv.head_scale is None else np.asarray(iv.head_scale, dtype=dt)
    ffn_scale = np.ones(L, dtype=dt) if iv.ffn_scale is None else np.asarray(iv.ffn_scale, dtype=dt)
    if head_scale.shape != (L, H) or ffn_scale.shape != (L,):
        raise ModelError("intervention scale arrays have wrong shape")
    where = np.ones(T, dtype=bool)
    if iv.positions is not None:
        where[:] = False
        for pos in iv.positions:
            if not -T <= pos < T:
                raise ModelError(f"intervention position {pos} out of range")
            where[pos] = True
    head_scale = np.where(where, head_scale[..., None], dt.type(1)).astype(dt)  # (L, H, T)
    ffn_scale = np.where(where, ffn_scale[:, None], dt.type(1)).astype(dt)  # (L, T)
    noise: dict[tuple[int, int], np.ndarray] = {}
    if iv.noise_heads:
        rng = np.random.default_rng(iv.noise_seed)
        for head in sorted(set(iv.noise_heads)):
            noise[head] = rng.standard_normal((B, T, T)).astype(dt)

    causal = np.triu(np.ones((T, T), dtype=bool), k=1)
    inv_sqrt = dt.type(1.0 / math.sqrt(c.d_head))
    x = weights["embed.W_E"][tokens] + weights["embed.W_pos"][:T]
    x0 = x
    layers = []
    for l in range(L):
        p = f"blocks.{l}."
        h1, xhat1, rstd1 = layernorm(x, weights[p + "ln1.w"], weights[p + "ln1.b"], eps)
        q = _split_heads(h1 @ _merge_proj(weights[p + "attn.W_Q"]), H)
        k = _split_heads(h1 @ _merge_proj(weights[p + "attn.W_K"]), H)
        v = _split_heads(h1 @ _merge_proj(weights[p + "attn.W_V"]), H)
        scores = np.matmul(q, k.transpose(0, 1, 3, 2)) * inv_sqrt
        for (nl, nh), draw in noise.items():
            if nl == l:
                scores[:, nh] = draw
        scores = np.where(causal, -np.inf, scores).astype(dt, copy=False)
        pattern = softmax(scores)
        z = np.matmul(pattern, v)  # (B, H, T, dh)
        head_out = np.matmul(z, weights[p + "attn.W_O"][None])  # (B, H, T, d)
        x_mid = x + (head_out * head_scale[l][None, :, :, None]).sum(axis=1)
        h2, xhat2, rstd2 = layernorm(x_mid, weights[p + "ln2.w"], weights[p + "ln2.b"], eps)
        pre = h2 @ weights[p + "ffn.K"].T
        act = gelu(pre)
        ffn_out = act @ weights[p + "ffn.V"]
        x_out = x_mid + ffn_scale[l][None, :, None] * ffn_out
        layers.append(
            dict(
                x_in=x, h1=h1, xhat1=xhat1, rstd1=rstd1, q=q, k=k, v=v, pattern=pattern, z=z,
                head_out=head_out, x_mid=x_mid, h2=h2, xhat2=xhat2, rstd2=rstd2, pre=pre,
                act=act, ffn_out=ffn_out, x_out=x_out,
            )
        )
        x = x_out
    hf, xhatf, rstdf = layernorm(x, weights["ln_final.w"], weights["ln_final.b"], eps)
    logits = hf @ weights["unembed.W_U"]
    return ForwardCache(tokens, x0, layers, x, (hf, xhatf, rstdf), logits, head_scale, ffn_scale)


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ResidualTrace:
    """All residual-stream intermediates for one sequence.

    Layer-indexed arrays have a leading L axis; attention[l, h, i, :i+1] is
    the attention row of position i (entries beyond i are exactly zero).
    head_out holds unscaled head outputs; head_scale/ffn_scale record the
    multipliers that were applied before residual addition.
    """

    tokens: np.ndarray  # (T,)
    x0: np.ndarray  # (T, d)
    attention: np.ndarray  # (L, H, T, T)
    head_out: np.ndarray  # (L, H, T, d)
    x_mid: np.ndarray  # (L, T, d)
    ffn_out: np.ndarray  # (L, T, d)
    x: np.ndarray  # (L, T, d) residual after block l
    logits: np.ndarray  # (T, V)
    head_scale: np.ndarray  # (L, H, T)
    ffn_scale: np.ndarray  # (L, T)

    @property
    def n_positions(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def x_last(self) -> np.ndarray:
        """Final-layer residual states x^L (before the final layernorm)."""
        return self.x[-1]

    def residual_in(self, layer: int) -> np.ndarray:
        """x^{l-1}: residual entering block `layer`."""
        return self.x0 if layer == 0 else self.x[layer - 1]


def _trace_from_cache(cache: ForwardCache, b: int = 0) -> ResidualTrace:
    return ResidualTrace(
        tokens=cache.tokens[b].copy(),
        x0=cache.x0[b],
        attention=np.stack([ly["pattern"][b] for ly in cache.layers]),
        head_out=np.stack([ly["head_out"][b] for ly in cache.layers]),
        x_mid=np.stack([ly["x_mid"][b] for ly in cache.layers]),
        ffn_out=np.stack([ly["ffn_out"][b] for ly in cache.layers]),
        x=np.stack([ly["x_out"][b] for ly in cache.layers]),
        logits=cache.logits[b],
        head_scale=cache.head_scale,
        ffn_scale=cache.ffn_scale,
    )


def forward_trace(weights: Weights, tokens: Sequence[int], intervention: Intervention | None = None) -> ResidualTrace:
    """Run one sequence and return every residual-stream intermediate."""
    arr = np.asarray(list(tokens), dtype=np.int64)[None, :]
    return _trace_from_cache(_forward(weights, arr, intervention))


def forward_logits(weights: Weights, tokens: Sequence[int], intervention: Intervention | None = None) -> np.ndarray:
    return forward_trace(weights, tokens, intervention).logits


def reconstruct_residual(trace: ResidualTrace, position: int) -> float:
    """Relative error between x^L and the sum of its additive components."""
    if not 0 <= position < trace.n_positions:
        raise IndexError(f"position {position} out of range [0, {trace.n_positions})")
    dt = trace.x.dtype
    total = trace.x0[position].astype(dt, copy=True)
    total = total + np.einsum("lhd,lh->d", trace.head_out[:, :, position], trace.head_scale[:, :, position])
    total = total + np.einsum("ld,l->d", trace.ffn_out[:, position], trace.ffn_scale[:, position])
    target = trace.x_last[position]
    denom = max(float(np.linalg.norm(target)), 1e-12)
    return float(np.linalg.norm(target - total)) / denom


# ---------------------------------------------------------------------------
# decoding & likelihood
# ---------------------------------------------------------------------------

# hook(step, tokens, trace) -> logits row to use for the argmax, or None to
# keep the unmodified final-position logits.
DecodeHook = Callable[[int, list, ResidualTrace], "np.ndarray | None"]


def argmax_lowest(logits: np.ndarray) -> int:
    """Argmax with ties broken by the lowest token id."""
    return int(np.argmax(logits))  # np.argmax returns the first maximum


def greedy_decode(
    weights: Weights,
    prompt: Sequence[int],
    max_new: int,
    hook: DecodeHook | None = None,
    eos_id: int | None = None,
) -> list[int]:
    """Greedy decoding; returns the prompt followed by generated tokens.

    Generation stops after `max_new` tokens or once `eos_id` is emitted (the
    EOS token is included in the returned sequence).
    """
    tokens = list(prompt)
    if max_new < 0:
        raise ValueError("max_new must be >= 0")
    if not tokens:
        raise ModelError("empty prompt")
    if len(tokens) + max_new > weights.config.max_seq_len:
        raise CapacityError("prompt + max_new exceeds max_seq_len")
    for step in range(max_new):
        trace = forward_trace(weights, tokens)
        row = hook(step, tokens, trace) if hook is not None else None
        if row is None:
            row = trace.logits[-1]
        nxt = argmax_lowest(row)
        tokens.append(nxt)
        if eos_id is not None and nxt == eos_id:
            break
    return tokens


def nll(weights: Weights, prompt: Sequence[int], response: Sequence[int], intervention: Intervention | None = None) -> float:
    """Mean teacher-forced negative log-likelihood of `response` given `prompt`."""
    if len(response) == 0:
        raise ModelError("empty response")
    if len(prompt) == 0:
        raise ModelError("empty prompt")
    seq = list(prompt) + list(response)
    if len(seq) > weights.config.max_seq_len:
        raise CapacityError("prompt + response exceeds max_seq_len")
    logits = forward_logits(weights, seq, intervention).astype(np.float64)
    return nll_from_logits(logits, len(prompt), response)


def nll_from_logits(logits: np.ndarray, prompt_len: int, response: Sequence[int]) -> float:
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    rows = np.arange(prompt_len - 1, prompt_len - 1 + len(response))
    vals = -logp[rows, np.asarray(response)]
    return float(max(vals.mean(), 0.0))


def batch_tokens(seqs: Iterable[Sequence[int]], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad sequences; returns (tokens, lengths)."""
    seqs = [list(s) for s in seqs]
    T = max(len(s) for s in seqs)
    out = np.full((len(seqs), T), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, np.array([len(s) for s in seqs])

"""Analytic gradients and a small deterministic trainer for toy models."""

from __future__ import annotations

import dataclasses
import logging
import math
from collections.abc import Sequence

import numpy as np

from .model import (
    ForwardCache,
    ModelConfig,
    Weights,
    _forward,
    _merge_heads,
    _merge_proj,
    gelu_grad,
    init_weights,
    log_softmax,
)

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became non-finite ({loss}) at step {step}")
        self.step = step
        self.loss = loss


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings.

    The optimizer is RMSProp with a bias-corrected second-moment estimate and
    no momentum term, plus optional gradient-norm clipping.
    """

    learning_rate: float = 3e-3
    steps: int = 3000
    batch_size: int = 64
    seed: int = 0
    decay: float = 0.99
    eps: float = 1e-8
    clip_norm: float = 1.0
    warmup: int = 100
    weight_decay: float = 0.0
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.learning_rate < 0 or self.steps < 0 or self.batch_size < 1:
            raise ValueError("learning_rate/steps must be >= 0 and batch_size >= 1")


@dataclasses.dataclass
class TrainResult:
    weights: Weights
    losses: list[float]
    final_loss: float
    fact_accuracy: float | None = None


def _layernorm_backward(dy, xhat, rstd, w):
    dxhat = dy * w
    dw = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = rstd * (dxhat - m1 - xhat * m2)
    return dx, dw, db


def loss_and_grads(
    weights: Weights, tokens: np.ndarray, mask: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Masked next-token cross-entropy and its exact gradient.

    `mask[b, t]` weights the prediction made at position t (of token t+1);
    the loss is the mask-weighted mean. The last column of `mask` is ignored.
    """
    cache = _forward(weights, tokens)
    return _backward(weights, cache, mask)


def loss_only(weights: Weights, tokens: np.ndarray, mask: np.ndarray) -> float:
    cache = _forward(weights, tokens)
    return _masked_ce(cache, mask)[0]


def _masked_ce(cache: ForwardCache, mask: np.ndarray):
    logits = cache.logits[:, :-1]
    targets = cache.tokens[:, 1:]
    m = np.asarray(mask, dtype=logits.dtype)[:, :-1]
    denom = max(float(m.sum()), 1.0)
    logp = log_softmax(logits)
    picked = np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    loss = float(-(picked * m).sum() / denom)
    return loss, logp, targets, m, denom


def _backward(weights: Weights, cache: ForwardCache, mask: np.ndarray):
    c = weights.config
    dt = weights.dtype
    loss, logp, targets, m, denom = _masked_ce(cache, mask)
    B, T = cache.tokens.shape
    grads: dict[str, np.ndarray] = {}

    dlogits = np.zeros_like(cache.logits)
    probs = np.exp(logp)
    np.put_along_axis(probs, targets[..., None], np.take_along_axis(probs, targets[..., None], -1) - 1, axis=-1)
    dlogits[:, :-1] = probs * (m / dt.type(denom))[..., None]

    hf, xhatf, rstdf = cache.ln_final
    W_U = weights["unembed.W_U"]
    grads["unembed.W_U"] = hf.reshape(-1, hf.shape[-1]).T @ dlogits.reshape(-1, dlogits.shape[-1])
    dhf = dlogits @ W_U.T
    dx, grads["ln_final.w"], grads["ln_final.b"] = _layernorm_backward(dhf, xhatf, rstdf, weights["ln_final.w"])

    inv_sqrt = dt.type(1.0 / math.sqrt(c.d_head))
    for l in reversed(range(c.n_layers)):
        p = f"blocks.{l}."
        ly = cache.layers[l]
        s_f = cache.ffn_scale[l]
        s_h = cache.head_scale[l]
        # FFN
        dffn = dx * s_f[None, :, None]
        act2 = ly["act"].reshape(-1, ly["act"].shape[-1])
        grads[p + "ffn.V"] = act2.T @ dffn.reshape(-1, dffn.shape[-1])
        dact = dffn @ weights[p + "ffn.V"].T
        dpre = dact * gelu_grad(ly["pre"])
        grads[p + "ffn.K"] = dpre.reshape(-1, dpre.shape[-1]).T @ ly["h2"].reshape(-1, ly["h2"].shape[-1])
        dh2 = dpre @ weights[p + "ffn.K"]
        dxm, grads[p + "ln2.w"], grads[p + "ln2.b"] = _layernorm_backward(dh2, ly["xhat2"], ly["rstd2"], weights[p + "ln2.w"])
        dx_mid = dx + dxm
        # attention
        dhead = dx_mid[:, None] * s_h[None, :, :, None]  # (B, H, T, d)
        grads[p + "attn.W_O"] = np.matmul(ly["z"].transpose(0, 1, 3, 2), dhead).sum(0)
        dz = np.matmul(dhead, weights[p + "attn.W_O"].transpose(0, 2, 1)[None])
        pattern = ly["pattern"]
        dpattern = np.matmul(dz, ly["v"].transpose(0, 1, 3, 2))
        dv = np.matmul(pattern.transpose(0, 1, 3, 2), dz)
        dscores = pattern * (dpattern - (dpattern * pattern).sum(-1, keepdims=True))
        dscores *= inv_sqrt
        dq = np.matmul(dscores, ly["k"])
        dk = np.matmul(dscores.transpose(0, 1, 3, 2), ly["q"])
        h1f = ly["h1"].reshape(B * T, -1)
        dh1 = np.zeros_like(ly["h1"])
        for name, dproj in (("W_Q", dq), ("W_K", dk), ("W_V", dv)):
            w_full = weights[p + "attn." + name]
            dflat = _merge_heads(dproj)  # (B, T, H*dh)
            gw = h1f.T @ dflat.reshape(B * T, -1)  # (d, H*dh)
            grads[p + "attn." + name] = gw.reshape(c.d_model, c.n_heads, c.d_head).transpose(1, 0, 2)
            dh1 += dflat @ _merge_proj(w_full).T
        dxa, grads[p + "ln1.w"], grads[p + "ln1.b"] = _layernorm_backward(dh1, ly["xhat1"], ly["rstd1"], weights[p + "ln1.w"])
        dx = dx_mid + dxa

    dW_E = np.zeros_like(weights["embed.W_E"])
    np.add.at(dW_E, cache.tokens.reshape(-1), dx.reshape(-1, dx.shape[-1]))
    grads["embed.W_E"] = dW_E
    dW_pos = np.zeros_like(weights["embed.W_pos"])
    dW_pos[:T] = dx.sum(0)
    grads["embed.W_pos"] = dW_pos
    return loss, {k: v.astype(dt, copy=False) for k, v in grads.items()}


def finite_difference_check(
    weights: Weights,
    tokens: np.ndarray,
    mask: np.ndarray,
    n_params: int = 1000,
    seed: int = 0,
    h: float = 1e-5,
) -> np.ndarray:
    """Relative errors |g - g_fd| / max(|g| + |g_fd|, 1e-8) at random entries.

    Runs in float64 regardless of the weights' dtype; central differences.
    """
    w64 = weights.astype(np.float64)
    _, grads = loss_and_grads(w64, tokens, mask)
    rng = np.random.default_rng(seed)
    names = list(w64)
    # sample tensors uniformly (not by size) so small tensors are covered
    picks = rng.integers(0, len(names), size=n_params)
    errors = np.empty(n_params)
    base = {n: np.array(w64[n]) for n in names}
    for i, ti in enumerate(picks):
        name = names[ti]
        idx = tuple(int(rng.integers(0, s)) for s in base[name].shape)
        plus = base[name].copy()
        plus[idx] += h
        minus = base[name].copy()
        minus[idx] -= h
        lp = loss_only(w64.with_tensors({name: plus}), tokens, mask)
        lm = loss_only(w64.with_tensors({name: minus}), tokens, mask)
        fd = (lp - lm) / (2 * h)
        an = float(grads[name][idx])
        errors[i] = abs(an - fd) / max(abs(an) + abs(fd), 1e-8)
    return errors


def make_batch(
    corpus: Sequence[Sequence[int]],
    masks: Sequence[Sequence[float]] | None,
    idx: np.ndarray,
    pad_id: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    seqs = [corpus[i] for i in idx]
    T = max(len(s) for s in seqs)
    tokens = np.full((len(seqs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=np.float32)
    for row, i in enumerate(idx):
        s = corpus[i]
        tokens[row, : len(s)] = s
        if masks is None:
            mask[row, : len(s) - 1] = 1.0
        else:
            mask[row, : len(s)] = masks[i]
    return tokens, mask


def train_toy(
    config: ModelConfig,
    corpus: Sequence[Sequence[int]],
    hyper: TrainConfig = TrainConfig(),
    masks: Sequence[Sequence[float]] | None = None,
    init: Weights | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Minimise next-token cross-entropy on `corpus`.

    `masks[i][t]` (optional) selects which predictions of sequence i count
    toward the loss; by default every next-token prediction does.
    Deterministic for a fixed `hyper.seed`.
    """
    if not corpus:
        raise ValueError("corpus is empty")
    if masks is not None and len(masks) != len(corpus):
        raise ValueError("masks must align with corpus")
    weights = init if init is not None else init_weights(config, hyper.seed)
    params = {k: np.array(v) for k, v in weights.items()}
    if hyper.tie_embeddings:
        params["unembed.W_U"] = params["embed.W_E"].T.copy()
    second = {k: np.zeros_like(v) for k, v in params.items()}
    rng = np.random.default_rng(hyper.seed + 1)
    n = len(corpus)
    order = rng.permutation(n)
    cursor = 0
    losses: list[float] = []
    for step in range(hyper.steps):
        if cursor + hyper.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor : cursor + hyper.batch_size]
        cursor += hyper.batch_size
        tokens, mask = make_batch(corpus, masks, idx)
        current = Weights(config, params)
        loss, grads = _backward(current, _forward(current, tokens), mask)
        if not math.isfinite(loss):
            raise TrainingDiverged(step, loss)
        if hyper.tie_embeddings:
            grads["embed.W_E"] = grads["embed.W_E"] + grads["unembed.W_U"].T
            del grads["unembed.W_U"]
        losses.append(loss)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, loss)
        gnorm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
        scale = 1.0 if hyper.clip_norm <= 0 or gnorm <= hyper.clip_norm else hyper.clip_norm / gnorm
        lr = hyper.learning_rate * min(1.0, (step + 1) / max(hyper.warmup, 1))
        # cosine decay to 10% over the run
        lr *= 0.55 + 0.45 * math.cos(math.pi * step / max(hyper.steps, 1))
        bias = 1.0 - hyper.decay ** (step + 1)
        for k in grads:
            g = grads[k] * np.float32(scale)
            second[k] *= np.float32(hyper.decay)
            second[k] += np.float32(1 - hyper.decay) * g * g
            denom = np.sqrt(second[k] / np.float32(bias)) + np.float32(hyper.eps)
            update = g / denom
            if hyper.weight_decay and k.endswith(("W_Q", "W_K", "W_V", "W_O", "ffn.K", "ffn.V")):
                update = update + np.float32(hyper.weight_decay) * params[k]
            params[k] -= np.float32(lr) * update
        if hyper.tie_embeddings:
            params["unembed.W_U"] = params["embed.W_E"].T.copy()
    final = Weights(config, params)
    final_loss = losses[-1] if losses else float("nan")
    return TrainResult(final, losses, final_loss)

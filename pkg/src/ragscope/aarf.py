"""Decode-time reweighting of copying heads and knowledge FFNs.

Each step scores the generating position with the token-level hallucination
score. Above tau, the step is recomputed with copying-head outputs scaled by
alpha2 and knowledge-FFN outputs by beta2, and that argmax is emitted.
"""

from __future__ import annotations

import dataclasses
import json
import math
from collections.abc import Sequence

import numpy as np

from .detector import DetectorConfig, DetectorError, f1_threshold, token_scores
from .model import CapacityError, Intervention, ResidualTrace, Weights, argmax_lowest, forward_trace
from .scores import ScoreTable, ecs_matrix, pks_vector


SCOPES = ("last", "all")


class AarfError(ValueError):
    pass


def scale_intervention(
    weights: Weights,
    heads: Sequence[tuple[int, int]],
    layers: Sequence[int],
    alpha2: float,
    beta2: float,
    allow_zero: bool = False,
    scope: str = "last",
) -> Intervention:
    if not alpha2 >= 1:
        raise AarfError("alpha2 must be >= 1")
    lo_ok = beta2 >= 0 if allow_zero else beta2 > 0
    if not (lo_ok and beta2 <= 1):
        raise AarfError("beta2 must lie in (0, 1] (0 only in test mode)")
    c = weights.config
    hs = np.ones((c.n_layers, c.n_heads), dtype=np.float32)
    fs = np.ones(c.n_layers, dtype=np.float32)
    for l, h in heads:
        if not (0 <= l < c.n_layers and 0 <= h < c.n_heads):
            raise AarfError(f"head {(l, h)} out of range")
        hs[l, h] = alpha2
    for l in layers:
        if not 0 <= l < c.n_layers:
            raise AarfError(f"layer {l} out of range")
        fs[l] = beta2
    if scope not in SCOPES:
        raise AarfError(f"scope must be one of {SCOPES}")
    return Intervention(head_scale=hs, ffn_scale=fs, positions=(-1,) if scope == "last" else None)


def reweighted_forward(
    weights: Weights,
    tokens: Sequence[int],
    heads: Sequence[tuple[int, int]],
    layers: Sequence[int],
    alpha2: float,
    beta2: float,
    allow_zero: bool = False,
    scope: str = "last",
) -> tuple[np.ndarray, ResidualTrace]:
    """Forward pass with scaled copying heads and knowledge FFNs.

    Scaling hits every targeted layer at the final position (scope="last")
    or at every position (scope="all"); other positions are untouched, so
    the final position reads an unmodified context.
    """
    iv = scale_intervention(weights, heads, layers, alpha2, beta2, allow_zero, scope)
    trace = forward_trace(weights, tokens, iv)
    return trace.logits, trace


def step_score(trace: ResidualTrace, weights: Weights, config: DetectorConfig, context_span: tuple[int, int]) -> float:
    """Token hallucination score at the last (generating) position."""
    n = trace.n_positions - 1
    ecs = ecs_matrix(trace, n, context_span, config.k_percent)
    pks = pks_vector(trace, n, weights)
    table = ScoreTable("", [n], ecs[None], pks[None])
    return float(token_scores(table, config)[0])


@dataclasses.dataclass
class AarfResult:
    tokens: list[int]
    log: list[dict]

    @property
    def triggered_steps(self) -> list[int]:
        return [e["step"] for e in self.log if e["triggered"]]

    def log_json(self) -> str:
        return json.dumps(self.log, sort_keys=True)


def aarf_decode(
    weights: Weights,
    prompt: Sequence[int],
    config: DetectorConfig,
    max_new: int,
    context_span: tuple[int, int] | None,
    eos_id: int | None = None,
    targets: tuple[Sequence[tuple[int, int]], Sequence[int]] | None = None,
    scope: str = "last",
) -> AarfResult:
    """Greedy decoding with score-triggered reweighting.

    The trigger score always uses config.heads/layers. `targets`, if given,
    names the (heads, layers) to rescale instead of those same sets.
    With tau = +inf no step triggers and the output matches plain greedy
    decoding token for token.
    """
    if context_span is None or context_span[1] <= context_span[0]:
        raise AarfError("aarf_decode needs a nonempty context span")
    tokens = list(prompt)
    if context_span[1] > len(tokens):
        raise AarfError("context span extends past the prompt")
    if max_new < 0:
        raise AarfError("max_new must be >= 0")
    if len(tokens) + max_new > weights.config.max_seq_len:
        raise CapacityError("prompt + max_new exceeds max_seq_len")
    heads, layers = targets if targets is not None else (config.heads, config.layers)
    log = []
    for step in range(max_new):
        trace = forward_trace(weights, tokens)
        score = step_score(trace, weights, config, context_span)
        triggered = score > config.tau
        if triggered:
            logits, _ = reweighted_forward(weights, tokens, heads, layers, config.alpha2, config.beta2, scope=scope)
            row = logits[-1]
        else:
            row = trace.logits[-1]
        nxt = argmax_lowest(row)
        log.append({"step": step, "position": len(tokens) - 1, "h_t": score, "triggered": bool(triggered), "token": nxt})
        tokens.append(nxt)
        if eos_id is not None and nxt == eos_id:
            break
    return AarfResult(tokens, log)


def calibrate_tau(tables: Sequence[ScoreTable], config: DetectorConfig, position: int = 0) -> float:
    """F1-maximising tau on per-token scores at one response position.

    `position` indexes the table rows. Tables read the states that emit each
    response token, so in the toy format row 1 emits the answer object.
    """
    vals, labels = [], []
    for t in tables:
        s = token_scores(t, config)
        if position >= s.size:
            raise DetectorError(f"sample {t.sample_id} has no response position {position}")
        vals.append(float(s[position]))
        labels.append(t.label)
    thr = f1_threshold(vals, labels)
    # aarf triggers on a strict inequality; step just below the F1 threshold
    return float(np.nextafter(thr, -math.inf))

"""Logit lens, Jensen-Shannon divergence, and the external-context /
parametric-knowledge scores computed from residual traces."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from collections.abc import Iterable, Mapping, Sequence

import numpy as np

from .model import ResidualTrace, Weights, layernorm, softmax

JSD_EPS = 1e-12
LN2 = math.log(2.0)


class ScoreError(ValueError):
    pass


class DegenerateInputError(ScoreError):
    """Zero-norm vectors, constant series and similar undefined inputs."""


# ---------------------------------------------------------------------------
# lens and divergence
# ---------------------------------------------------------------------------


def logit_lens(x: np.ndarray, weights: Weights) -> np.ndarray:
    """Project residual state(s) through the final layernorm and W_U."""
    x = np.asarray(x, dtype=weights.dtype)
    if not np.all(np.isfinite(x)):
        raise ScoreError("logit_lens input is not finite")
    h, _, _ = layernorm(
        x, weights["ln_final.w"], weights["ln_final.b"], weights.config.layernorm_epsilon
    )
    return h @ weights["unembed.W_U"]


def lens_distribution(x: np.ndarray, weights: Weights) -> np.ndarray:
    return softmax(logit_lens(x, weights).astype(np.float64))


def _check_distribution(p: np.ndarray, name: str) -> None:
    if p.ndim < 1 or not np.all(np.isfinite(p)):
        raise ScoreError(f"{name} is not a finite vector")
    if np.any(p < 0):
        raise ScoreError(f"{name} has negative entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ScoreError(f"{name} does not sum to 1")


def jsd(p: Sequence[float] | np.ndarray, q: Sequence[float] | np.ndarray) -> float | np.ndarray:
    """Jensen-Shannon divergence in nats, reduced over the last axis.

    Both inputs get ``JSD_EPS`` added before the logarithms. Result lies in
    [0, ln 2].
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ScoreError(f"length mismatch {p.shape} vs {q.shape}")
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    m = 0.5 * (p + q)
    lm = np.log(m + JSD_EPS)
    kl_pm = (p * (np.log(p + JSD_EPS) - lm)).sum(axis=-1)
    kl_qm = (q * (np.log(q + JSD_EPS) - lm)).sum(axis=-1)
    out = np.clip(0.5 * kl_pm + 0.5 * kl_qm, 0.0, LN2)
    return float(out) if out.ndim == 0 else out


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine of a zero-norm vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------------------
# external context score
# ---------------------------------------------------------------------------


def n_attended(span_length: int, k_percent: float) -> int:
    return max(1, math.floor(k_percent / 100.0 * span_length))


def attended_index_set(attention_row: np.ndarray, context_span: tuple[int, int], k_percent: float = 10.0) -> list[int]:
    """Top-k% context positions by attention mass, ties to the lower index.

    `context_span` is a half-open interval [start, end) of absolute positions.
    Returned indices are absolute and sorted ascending.
    """
    start, end = context_span
    row = np.asarray(attention_row)
    if end <= start:
        raise ScoreError("empty context span")
    if start < 0 or end > row.shape[0]:
        raise ScoreError("context span outside attention row")
    if not 0 < k_percent <= 100:
        raise ScoreError("k_percent must be in (0, 100]")
    vals = row[start:end]
    n = n_attended(end - start, k_percent)
    # stable sort on -value keeps lower indices first among equal values
    order = np.argsort(-vals, kind="stable")[:n]
    return sorted(int(start + i) for i in order)


def ecs_token(
    trace: ResidualTrace,
    position: int,
    head: tuple[int, int],
    context_span: tuple[int, int],
    k_percent: float = 10.0,
) -> float:
    """Cosine between x^L at `position` and the mean x^L of attended context tokens."""
    l, h = head
    row = trace.attention[l, h, position]
    idx = attended_index_set(row, context_span, k_percent)
    xl = trace.x_last
    e = xl[idx].astype(np.float64).mean(axis=0)
    return cosine(e, xl[position])


def ecs_matrix(trace: ResidualTrace, position: int, context_span: tuple[int, int], k_percent: float = 10.0) -> np.ndarray:
    """ECS for every head at one position, shape (L, H)."""
    L, H = trace.attention.shape[:2]
    start, end = context_span
    if end <= start:
        raise ScoreError("empty context span")
    rows = trace.attention[:, :, position, start:end]  # (L, H, S)
    n = n_attended(end - start, k_percent)
    order = np.argsort(-rows, axis=-1, kind="stable")[..., :n]
    xl = trace.x_last.astype(np.float64)
    ctx = xl[start:end]
    e = ctx[order].mean(axis=-2)  # (L, H, d)
    target = xl[position]
    ne = np.linalg.norm(e, axis=-1)
    nt = np.linalg.norm(target)
    if nt == 0 or np.any(ne == 0):
        raise DegenerateInputError("zero-norm state in ECS")
    return np.clip(e @ target / (ne * nt), -1.0, 1.0)


# ---------------------------------------------------------------------------
# parametric knowledge score
# ---------------------------------------------------------------------------


def pks_token(trace: ResidualTrace, position: int, layer: int, weights: Weights) -> float:
    """JSD between lens distributions before and after the FFN of `layer`."""
    p = lens_distribution(trace.x_mid[layer, position], weights)
    q = lens_distribution(trace.x[layer, position], weights)
    return float(jsd(p, q))


def pks_vector(trace: ResidualTrace, position: int, weights: Weights) -> np.ndarray:
    """PKS for every layer at one position, shape (L,)."""
    p = lens_distribution(trace.x_mid[:, position], weights)
    q = lens_distribution(trace.x[:, position], weights)
    return np.asarray(jsd(p, q), dtype=np.float64)


# ---------------------------------------------------------------------------
# score tables
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class ScoreTable:
    """Token- and response-level scores of one sample.

    token_ecs is (R, L, H) and token_pks is (R, L) over the R response
    positions; response_* are their means over the response. The chunk_*
    fields are filled in by chunk scoring and may be absent.
    """

    sample_id: str
    positions: list[int]
    token_ecs: np.ndarray
    token_pks: np.ndarray
    label: int | None = None
    chunk_ecs: np.ndarray | None = None  # (L, H)
    chunk_pks: np.ndarray | None = None  # (L,)

    @property
    def response_ecs(self) -> np.ndarray:
        return self.token_ecs.mean(axis=0)

    @property
    def response_pks(self) -> np.ndarray:
        return self.token_pks.mean(axis=0)

    def to_dict(self) -> dict:
        d = {
            "sample_id": self.sample_id,
            "label": self.label,
            "token": {
                "positions": list(self.positions),
                "ecs": self.token_ecs.tolist(),
                "pks": self.token_pks.tolist(),
            },
            "response": {"ecs": self.response_ecs.tolist(), "pks": self.response_pks.tolist()},
        }
        if self.chunk_ecs is not None:
            d["chunk"] = {"ecs": self.chunk_ecs.tolist(), "pks": self.chunk_pks.tolist()}
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScoreTable":
        chunk = d.get("chunk")
        return cls(
            sample_id=d["sample_id"],
            positions=list(d["token"]["positions"]),
            token_ecs=np.asarray(d["token"]["ecs"], dtype=np.float64),
            token_pks=np.asarray(d["token"]["pks"], dtype=np.float64),
            label=d.get("label"),
            chunk_ecs=None if chunk is None else np.asarray(chunk["ecs"], dtype=np.float64),
            chunk_pks=None if chunk is None else np.asarray(chunk["pks"], dtype=np.float64),
        )


def generating_span(response_span: tuple[int, int]) -> tuple[int, int]:
    """Positions whose next-token outputs emit the response tokens.

    Response token n is produced by the forward state at n - 1, which is the
    state the decode-time score reads as well.
    """
    start, end = response_span
    if start < 1 or end <= start:
        raise ScoreError("response span must start after position 0 and be nonempty")
    return start - 1, end - 1


def response_scores(
    trace: ResidualTrace,
    weights: Weights,
    context_span: tuple[int, int],
    response_span: tuple[int, int],
    sample_id: str = "",
    label: int | None = None,
    k_percent: float = 10.0,
) -> ScoreTable:
    """Score every response position of a teacher-forced trace."""
    start, end = response_span
    if end <= start:
        raise ScoreError("empty response")
    positions = list(range(start, end))
    ecs = np.stack([ecs_matrix(trace, n, context_span, k_percent) for n in positions])
    pks = np.stack([pks_vector(trace, n, weights) for n in positions])
    return ScoreTable(sample_id, positions, ecs, pks, label)


def save_tables(tables: Iterable[ScoreTable], path) -> None:
    payload = {t.sample_id: t.to_dict() for t in tables}
    with open(path, "w") as f:
        json.dump(payload, f, indent=1, sort_keys=True)


def load_tables(path) -> list[ScoreTable]:
    with open(path) as f:
        payload = json.load(f)
    return [ScoreTable.from_dict(payload[k]) for k in sorted(payload)]


def tables_to_csv(tables: Iterable[ScoreTable]) -> str:
    """Flatten to rows (sample_id, layer, head, token_pos, ecs, pks).

    One row per (position, layer, head); pks is repeated across heads of a
    layer since it is a per-layer quantity.
    """
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_id", "layer", "head", "token_pos", "ecs", "pks"])
    for t in tables:
        R, L, H = t.token_ecs.shape
        for r in range(R):
            for l in range(L):
                for h in range(H):
                    w.writerow([t.sample_id, l, h, t.positions[r], repr(float(t.token_ecs[r, l, h])), repr(float(t.token_pks[r, l]))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# dataset-level analyses
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class DatasetSplit:
    truthful: tuple[str, ...]
    hallucinated: tuple[str, ...]
    known: tuple[str, ...] = ()

    def __post_init__(self):
        t, h = set(self.truthful), set(self.hallucinated)
        if t & h:
            raise ScoreError("truthful and hallucinated ids overlap")
        if set(self.known) & h:
            raise ScoreError("known ids must not be hallucinated")

    @classmethod
    def from_tables(cls, tables: Iterable[ScoreTable]) -> "DatasetSplit":
        tables = list(tables)
        return cls(
            tuple(t.sample_id for t in tables if t.label == 0),
            tuple(t.sample_id for t in tables if t.label == 1),
        )


def delta_scores(tables: Iterable[ScoreTable], split: DatasetSplit) -> tuple[np.ndarray, np.ndarray]:
    """(mean_T ECS - mean_H ECS per head, mean_H PKS - mean_T PKS per layer)."""
    by_id = {t.sample_id: t for t in tables}
    if not split.truthful or not split.hallucinated:
        raise ScoreError("both split sides must be nonempty")
    ecs_t = np.mean([by_id[i].response_ecs for i in split.truthful], axis=0)
    ecs_h = np.mean([by_id[i].response_ecs for i in split.hallucinated], axis=0)
    pks_t = np.mean([by_id[i].response_pks for i in split.truthful], axis=0)
    pks_h = np.mean([by_id[i].response_pks for i in split.hallucinated], axis=0)
    return ecs_t - ecs_h, pks_h - pks_t


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ScoreError("pearson needs two equal-length vectors")
    if x.size < 2:
        raise ScoreError("pearson needs at least 2 points")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(xc @ xc), math.sqrt(yc @ yc)
    if sx == 0 or sy == 0:
        raise DegenerateInputError("pearson of a constant vector")
    return float(np.clip(xc @ yc / (sx * sy), -1.0, 1.0))


def correlation_maps(tables: Sequence[ScoreTable]) -> tuple[np.ndarray, np.ndarray]:
    """Per-head PCC(ECS, 1 - h) and per-layer PCC(PKS, h), NaN where undefined."""
    labels = np.array([t.label for t in tables], dtype=float)
    ecs = np.stack([t.response_ecs for t in tables])
    pks = np.stack([t.response_pks for t in tables])
    L, H = ecs.shape[1:]
    ecs_map = np.full((L, H), np.nan)
    pks_map = np.full(L, np.nan)
    for l in range(L):
        for h in range(H):
            try:
                ecs_map[l, h] = pearson(ecs[:, l, h], 1 - labels)
            except DegenerateInputError:
                pass
        try:
            pks_map[l] = pearson(pks[:, l], labels)
        except DegenerateInputError:
            pass
    return ecs_map, pks_map

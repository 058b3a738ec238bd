"""Hallucination scores that weigh FFN knowledge injection against copying-head
context use, plus calibration and evaluation.

A sample's score is alpha * (summed PKS over the knowledge layers) minus
beta * (summed ECS over the copying heads). The token variant averages
per-token scores. The chunk variant pairs each response chunk with its
most-attended context chunk per head and compares pooled chunk embeddings.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from collections.abc import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .copying import CopyingHeadReport
from .model import ResidualTrace, Weights
from .scores import DegenerateInputError, ScoreTable, pearson, pks_vector

DEFAULT_BETAS = (0.1, 0.25, 0.5, 1.0, 2.0, 4.0)
MODES = ("token", "chunk")


class DetectorError(ValueError):
    pass


def _enc_float(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def _dec_float(x) -> float:
    return float(x)


@dataclasses.dataclass(frozen=True)
class DetectorConfig:
    heads: tuple[tuple[int, int], ...] = ()
    layers: tuple[int, ...] = ()
    alpha: float = 1.0
    beta: float = 1.0
    threshold: float = 0.0
    chunk_size: int = 2
    alpha2: float = 5.0
    beta2: float = 0.2
    tau: float = math.inf
    k_percent: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple((int(l), int(h)) for l, h in self.heads))
        object.__setattr__(self, "layers", tuple(int(l) for l in self.layers))
        if not (self.alpha > 0 and self.beta > 0):
            raise DetectorError("alpha and beta must be positive")
        if self.chunk_size < 1:
            raise DetectorError("chunk_size must be >= 1")
        # alpha2 == 1 and beta2 == 1 are the identity settings used in checks
        if not self.alpha2 >= 1:
            raise DetectorError("alpha2 must be >= 1")
        if not 0 < self.beta2 <= 1:
            raise DetectorError("beta2 must lie in (0, 1]")
        if not 0 < self.k_percent <= 100:
            raise DetectorError("k_percent must lie in (0, 100]")

    def require_sets(self) -> None:
        if not self.heads or not self.layers:
            raise DetectorError("detection needs nonempty head and layer sets")

    def replace(self, **kw) -> "DetectorConfig":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["heads"] = [list(h) for h in self.heads]
        d["layers"] = list(self.layers)
        for k in ("threshold", "tau"):
            d[k] = _enc_float(d[k])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["heads"] = tuple(tuple(h) for h in d.get("heads", ()))
        d["layers"] = tuple(d.get("layers", ()))
        for k in ("threshold", "tau"):
            if k in d:
                d[k] = _dec_float(d[k])
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "DetectorConfig":
        with open(path) as f:
            return cls.from_json(json.load(f))


# ---------------------------------------------------------------------------
# set selection
# ---------------------------------------------------------------------------


def layer_pcc(tables: Sequence[ScoreTable], level: str = "token") -> np.ndarray:
    """PCC between response-level PKS and the label, per layer (NaN if undefined)."""
    labels = np.array([t.label for t in tables], dtype=float)
    pks = _pks(tables, level)
    out = np.full(pks.shape[1], np.nan)
    for l in range(pks.shape[1]):
        try:
            out[l] = pearson(pks[:, l], labels)
        except DegenerateInputError:
            pass
    return out


def select_sets(
    report: CopyingHeadReport,
    tables: Sequence[ScoreTable],
    top_a: int,
    top_f: int,
    level: str = "token",
) -> tuple[list[tuple[int, int]], list[int]]:
    """Top copying heads by score, and the layers whose PKS best tracks the label."""
    if top_a < 1 or top_f < 1:
        raise DetectorError("top_a and top_f must be >= 1")
    _check_both_labels(tables)
    heads = report.top(top_a)
    pcc = layer_pcc(tables, level)
    # descending PCC, undefined last, ties to the lower layer
    order = sorted(range(pcc.size), key=lambda l: (math.isnan(pcc[l]), -np.nan_to_num(pcc[l]), l))
    return heads, sorted(order[:top_f])


# ---------------------------------------------------------------------------
# scores
# ---------------------------------------------------------------------------


def _ecs(tables: Sequence[ScoreTable], level: str) -> np.ndarray:
    if level == "token":
        return np.stack([t.response_ecs for t in tables])
    if any(t.chunk_ecs is None for t in tables):
        raise DetectorError("chunk scores missing from a table")
    return np.stack([t.chunk_ecs for t in tables])


def _pks(tables: Sequence[ScoreTable], level: str) -> np.ndarray:
    if level == "token":
        return np.stack([t.response_pks for t in tables])
    if any(t.chunk_pks is None for t in tables):
        raise DetectorError("chunk scores missing from a table")
    return np.stack([t.chunk_pks for t in tables])


def _combine(ecs: np.ndarray, pks: np.ndarray, heads, layers, alpha: float, beta: float) -> np.ndarray:
    p = pks[..., list(layers)].sum(axis=-1) if layers else np.zeros(pks.shape[:-1])
    if heads:
        ls, hs = zip(*heads)
        e = ecs[..., list(ls), list(hs)].sum(axis=-1)
    else:
        e = np.zeros(ecs.shape[:-2])
    return alpha * p - beta * e


def _check_entries(table: ScoreTable, config: DetectorConfig) -> None:
    L, H = table.token_ecs.shape[1:]
    for l, h in config.heads:
        if not (0 <= l < L and 0 <= h < H):
            raise DetectorError(f"score table has no entry for head {(l, h)}")
    for l in config.layers:
        if not 0 <= l < L:
            raise DetectorError(f"score table has no entry for layer {l}")


def token_scores(table: ScoreTable, config: DetectorConfig) -> np.ndarray:
    """Per-token hallucination scores of one sample."""
    _check_entries(table, config)
    return _combine(table.token_ecs, table.token_pks, config.heads, config.layers, config.alpha, config.beta)


def h_token(table: ScoreTable, config: DetectorConfig) -> float:
    return float(token_scores(table, config).mean())


def h_chunk(table: ScoreTable, config: DetectorConfig) -> float:
    if table.chunk_ecs is None or table.chunk_pks is None:
        raise DetectorError(f"sample {table.sample_id}: chunk scores missing")
    _check_entries(table, config)
    return float(_combine(table.chunk_ecs, table.chunk_pks, config.heads, config.layers, config.alpha, config.beta))


# ---------------------------------------------------------------------------
# chunks
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ChunkSpan:
    start: int
    end: int

    def __post_init__(self):
        if not self.start < self.end:
            raise DetectorError(f"empty chunk [{self.start}, {self.end})")

    def __len__(self) -> int:
        return self.end - self.start


def chunk_text(span: tuple[int, int], chunk_size: int) -> list[ChunkSpan]:
    """Tile [start, end) into consecutive chunks of `chunk_size` (last may be short)."""
    start, end = span
    if end <= start:
        raise DetectorError("cannot chunk an empty span")
    if chunk_size < 1:
        raise DetectorError("chunk_size must be >= 1")
    return [ChunkSpan(s, min(s + chunk_size, end)) for s in range(start, end, chunk_size)]


def chunk_attention_pair(attention: np.ndarray, context_chunks: Sequence[ChunkSpan], response_chunk: ChunkSpan) -> int:
    """Index of the context chunk with the highest mean attention from `response_chunk`."""
    if not context_chunks:
        raise DetectorError("no context chunks")
    A = np.asarray(attention)
    rows = slice(response_chunk.start, response_chunk.end)
    pooled = np.array([A[rows, c.start : c.end].mean() for c in context_chunks])
    return int(np.argmax(pooled))  # first maximum: earliest chunk wins ties


def _emb(xl: np.ndarray, chunk: ChunkSpan) -> np.ndarray:
    return xl[chunk.start : chunk.end].astype(np.float64).mean(axis=0)


def chunk_scores(
    trace: ResidualTrace,
    weights: Weights,
    context_span: tuple[int, int],
    response_span: tuple[int, int],
    chunk_size: int,
    token_pks: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Response-level chunk ECS (L, H) and chunk PKS (L,).

    `token_pks`, if given, holds (R, L) PKS values for the response positions
    and avoids recomputing them.
    """
    ctx_chunks = chunk_text(context_span, chunk_size)
    resp_chunks = chunk_text(response_span, chunk_size)
    L, H = trace.attention.shape[:2]
    xl = trace.x_last
    if token_pks is None:
        token_pks = np.stack([pks_vector(trace, n, weights) for n in range(*response_span)])
    ctx_emb = np.stack([_emb(xl, c) for c in ctx_chunks])
    ctx_norm = np.linalg.norm(ctx_emb, axis=1)
    ecs = np.zeros((len(resp_chunks), L, H))
    pks = np.zeros((len(resp_chunks), L))
    for j, rc in enumerate(resp_chunks):
        r = _emb(xl, rc)
        rn = np.linalg.norm(r)
        if rn == 0:
            raise DegenerateInputError("zero-norm response chunk embedding")
        for l in range(L):
            for h in range(H):
                i = chunk_attention_pair(trace.attention[l, h], ctx_chunks, rc)
                if ctx_norm[i] == 0:
                    raise DegenerateInputError("zero-norm context chunk embedding")
                ecs[j, l, h] = np.clip(ctx_emb[i] @ r / (ctx_norm[i] * rn), -1.0, 1.0)
        lo = rc.start - response_span[0]
        pks[j] = token_pks[lo : lo + len(rc)].mean(axis=0)
    return ecs.mean(axis=0), pks.mean(axis=0)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def _check_both_labels(tables_or_labels) -> None:
    labels = [t.label if isinstance(t, ScoreTable) else t for t in tables_or_labels]
    if len(set(labels)) < 2:
        raise DetectorError("need both labels present")


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Rank-based ROC AUC; tied scores contribute one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    if s.shape != y.shape:
        raise DetectorError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DetectorError("AUC needs both classes")
    ranks = rankdata(s, method="average")
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def classification_metrics(scores: Sequence[float], labels: Sequence[int], threshold: float) -> dict:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    pred = (s >= threshold).astype(int)
    tp = int(((pred == 1) & (y == 1)).sum())
    fp = int(((pred == 1) & (y == 0)).sum())
    fn = int(((pred == 0) & (y == 1)).sum())
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return {"acc": float((pred == y).mean()), "precision": prec, "recall": rec, "f1": f1}


def f1_threshold(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Threshold (predict 1 when score >= it) that maximises F1; lowest on ties."""
    _check_both_labels(list(labels))
    best_t, best_f = math.inf, -1.0
    for t in np.unique(np.asarray(scores, dtype=np.float64)):
        f = classification_metrics(scores, labels, float(t))["f1"]
        if f > best_f:
            best_t, best_f = float(t), f
    return best_t


# ---------------------------------------------------------------------------
# calibration and evaluation
# ---------------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class Calibration:
    config: DetectorConfig
    auc: float
    mode: str
    grid: tuple[tuple[float, int, int, float], ...]  # (beta, top_a, top_f, auc)

    def to_json(self) -> dict:
        return {
            "config": self.config.to_json(),
            "auc": self.auc,
            "mode": self.mode,
            "grid": [list(g) for g in self.grid],
        }


def detector_scores(tables: Sequence[ScoreTable], config: DetectorConfig, mode: str = "token") -> np.ndarray:
    if mode not in MODES:
        raise DetectorError(f"mode must be one of {MODES}")
    fn = h_token if mode == "token" else h_chunk
    return np.array([fn(t, config) for t in tables])


def calibrate(
    tables: Sequence[ScoreTable],
    report: CopyingHeadReport,
    mode: str = "token",
    betas: Sequence[float] = DEFAULT_BETAS,
    top_as: Sequence[int] | None = None,
    top_fs: Sequence[int] | None = None,
    base: DetectorConfig = DetectorConfig(),
) -> Calibration:
    """Exhaustive grid search over (beta, top_a, top_f) with alpha fixed.

    The first grid point reaching the best validation AUC wins. The returned
    config carries the F1-maximising threshold on the same validation set.
    """
    if mode not in MODES:
        raise DetectorError(f"mode must be one of {MODES}")
    tables = list(tables)
    _check_both_labels(tables)
    labels = np.array([t.label for t in tables])
    ecs, pks = _ecs(tables, mode), _pks(tables, mode)
    L, H = ecs.shape[1:]
    top_as = list(top_as) if top_as is not None else list(range(1, L * H + 1))
    top_fs = list(top_fs) if top_fs is not None else list(range(1, L + 1))
    grid, best = [], None
    for top_f in top_fs:
        for top_a in top_as:
            heads, layers = select_sets(report, tables, top_a, top_f, mode)
            for beta in betas:
                s = _combine(ecs, pks, heads, layers, base.alpha, beta)
                a = auc(s, labels)
                grid.append((float(beta), int(top_a), int(top_f), a))
                if best is None or a > best[0]:
                    best = (a, beta, heads, layers, s)
    a, beta, heads, layers, s = best
    cfg = base.replace(heads=tuple(heads), layers=tuple(layers), beta=float(beta), threshold=f1_threshold(s, labels))
    return Calibration(cfg, a, mode, tuple(grid))


@dataclasses.dataclass
class EvalReport:
    mode: str
    rows: list[tuple[str, float, float, int, int]]  # sample_id, H_token, H_chunk, label, predicted
    summary: dict

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample_id", "H_token", "H_chunk", "label", "predicted"])
        for sid, ht, hc, y, p in self.rows:
            w.writerow([sid, repr(ht), "" if math.isnan(hc) else repr(hc), y, p])
        return buf.getvalue()

    def save(self, prefix) -> None:
        with open(f"{prefix}.csv", "w") as f:
            f.write(self.to_csv())
        with open(f"{prefix}.json", "w") as f:
            json.dump(self.summary, f, indent=1, sort_keys=True)
            f.write("\n")


def evaluate(tables: Sequence[ScoreTable], config: DetectorConfig, mode: str = "token") -> EvalReport:
    tables = list(tables)
    _check_both_labels(tables)
    config.require_sets()
    labels = np.array([t.label for t in tables])
    ht = detector_scores(tables, config, "token")
    has_chunk = all(t.chunk_ecs is not None for t in tables)
    hc = detector_scores(tables, config, "chunk") if has_chunk else np.full(len(tables), np.nan)
    used = ht if mode == "token" else hc
    if mode == "chunk" and not has_chunk:
        raise DetectorError("chunk mode needs chunk scores in every table")
    pred = (used >= config.threshold).astype(int)
    try:
        pcc = pearson(used, labels)
    except DegenerateInputError:
        pcc = float("nan")
    summary = {"mode": mode, "n": len(tables), "auc": auc(used, labels), "pcc": pcc}
    summary.update(classification_metrics(used, labels, config.threshold))
    rows = [(t.sample_id, float(a), float(b), int(y), int(p)) for t, a, b, y, p in zip(tables, ht, hc, labels, pred)]
    return EvalReport(mode, rows, summary)


def stratified_split(tables: Iterable[ScoreTable], seed: int, fraction: float = 0.5) -> tuple[list[ScoreTable], list[ScoreTable]]:
    """Deterministic per-label split into (calibration, held-out)."""
    tables = sorted(tables, key=lambda t: t.sample_id)
    rng = np.random.default_rng(seed)
    cal, held = [], []
    for lab in (0, 1):
        group = [t for t in tables if t.label == lab]
        idx = rng.permutation(len(group))
        cut = int(round(fraction * len(group)))
        cal += [group[i] for i in sorted(idx[:cut])]
        held += [group[i] for i in sorted(idx[cut:])]
    return sorted(cal, key=lambda t: t.sample_id), sorted(held, key=lambda t: t.sample_id)

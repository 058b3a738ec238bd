"""Copying-head scores from full OV circuits.

For each head the full OV circuit M = W_E W_V W_O W_U (|V| x |V|) is
summarised by its trace and by how many Gershgorin boundary points a_ii +/- R_i
are IQR outliers. Heads are ranked on both statistics and the ranks summed;
a lower sum marks a stronger copying head.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from collections.abc import Sequence

import numpy as np
from scipy.stats import rankdata

from .model import Weights

MODES = ("literal", "signed")


class CopyingError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class OVCircuit:
    head: tuple[int, int]
    matrix: np.ndarray


def full_ov_matrix(weights: Weights, head: tuple[int, int]) -> OVCircuit:
    l, h = head
    c = weights.config
    if not (0 <= l < c.n_layers and 0 <= h < c.n_heads):
        raise CopyingError(f"head {head} out of range")
    W_E = weights["embed.W_E"].astype(np.float64)
    W_U = weights["unembed.W_U"].astype(np.float64)
    W_V = weights[f"blocks.{l}.attn.W_V"][h].astype(np.float64)
    W_O = weights[f"blocks.{l}.attn.W_O"][h].astype(np.float64)
    if W_E.shape[1] != W_V.shape[0] or W_O.shape[1] != W_U.shape[0]:
        raise CopyingError("weight shapes do not compose")
    return OVCircuit(head, W_E @ (W_V @ W_O) @ W_U)


def _square(M) -> np.ndarray:
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise CopyingError(f"expected a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise CopyingError("matrix has non-finite entries")
    return M


def gershgorin_boundary_points(M) -> np.ndarray:
    """Real-axis disk extremes: a_ii + R_i and a_ii - R_i for every row, interleaved."""
    M = _square(M)
    diag = np.diag(M)
    radii = np.abs(M).sum(axis=1) - np.abs(diag)
    return np.stack([diag + radii, diag - radii], axis=1).ravel()


def iqr_outlier_count(points: Sequence[float]) -> int:
    x = np.asarray(points, dtype=np.float64).ravel()
    if x.size < 4:
        raise CopyingError("IQR outlier count needs at least 4 points")
    q1, q3 = np.percentile(x, [25, 75])  # linear interpolation
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    return int(np.count_nonzero((x < lo) | (x > hi)))


def exact_positive_ratio(M) -> float:
    """Share of eigenvalues with positive real part (dense eigensolve)."""
    M = _square(M)
    if M.shape[0] > 512:
        raise CopyingError("matrix too large for the dense oracle")
    try:
        ev = np.linalg.eigvals(M)
    except np.linalg.LinAlgError as e:
        raise CopyingError(f"eigensolver failed: {e}") from None
    return float(np.count_nonzero(ev.real > 0) / ev.size)


@dataclasses.dataclass(frozen=True)
class HeadScore:
    layer: int
    head: int
    trace: float
    outlier_count: int
    trace_rank: int
    outlier_rank: int
    score: int
    exact_ratio: float | None = None


@dataclasses.dataclass(frozen=True)
class CopyingHeadReport:
    rows: tuple[HeadScore, ...]  # ascending score, ties by (layer, head)
    mode: str = "literal"

    def ranking(self) -> list[tuple[int, int]]:
        return [(r.layer, r.head) for r in self.rows]

    def top(self, n: int) -> list[tuple[int, int]]:
        return self.ranking()[:n]

    def score_of(self, head: tuple[int, int]) -> int:
        for r in self.rows:
            if (r.layer, r.head) == tuple(head):
                return r.score
        raise KeyError(head)

    def to_json(self) -> dict:
        return {"mode": self.mode, "heads": [dataclasses.asdict(r) for r in self.rows]}

    @classmethod
    def from_json(cls, d: dict) -> "CopyingHeadReport":
        return cls(tuple(HeadScore(**r) for r in d["heads"]), d.get("mode", "literal"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "head", "trace", "outlier_count", "trace_rank", "outlier_rank", "score", "exact_ratio"])
        for r in self.rows:
            w.writerow([
                r.layer, r.head, repr(r.trace), r.outlier_count, r.trace_rank, r.outlier_rank, r.score,
                "" if r.exact_ratio is None else repr(r.exact_ratio),
            ])
        return buf.getvalue()

    def save(self, path) -> None:
        path = str(path)
        if path.endswith(".csv"):
            text = self.to_csv()
        else:
            text = json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n"
        with open(path, "w") as f:
            f.write(text)


def score_matrices(
    matrices: dict[tuple[int, int], np.ndarray],
    mode: str = "literal",
    exact: bool = False,
) -> CopyingHeadReport:
    """Rank heads given their OV circuit matrices.

    literal: trace ranked by absolute value, descending. signed: trace ranked
    by signed value, descending, so strongly negative circuits rank last.
    Outlier counts are ranked ascending. Ties share the minimum rank.
    """
    if mode not in MODES:
        raise CopyingError(f"mode must be one of {MODES}")
    heads = sorted(matrices)
    if not heads:
        raise CopyingError("no heads to score")
    traces = np.array([float(np.trace(_square(matrices[h]))) for h in heads])
    outliers = np.array([iqr_outlier_count(gershgorin_boundary_points(matrices[h])) for h in heads])
    key = -np.abs(traces) if mode == "literal" else -traces
    tr_rank = rankdata(key, method="min").astype(int)
    out_rank = rankdata(outliers, method="min").astype(int)
    rows = []
    for i, (l, h) in enumerate(heads):
        ratio = exact_positive_ratio(matrices[(l, h)]) if exact else None
        rows.append(HeadScore(l, h, float(traces[i]), int(outliers[i]), int(tr_rank[i]), int(out_rank[i]),
                              int(tr_rank[i] + out_rank[i]), ratio))
    rows.sort(key=lambda r: (r.score, r.layer, r.head))
    return CopyingHeadReport(tuple(rows), mode)


def copying_head_scores(weights: Weights, mode: str = "literal", exact: bool = False) -> CopyingHeadReport:
    c = weights.config
    mats = {(l, h): full_ov_matrix(weights, (l, h)).matrix for l in range(c.n_layers) for h in range(c.n_heads)}
    return score_matrices(mats, mode, exact)

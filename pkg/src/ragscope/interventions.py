"""Causal interventions on heads and FFNs, and the known/hallucinated comparison."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from collections.abc import Iterable, Sequence

import numpy as np

from .corpus import Sample, Vocab
from .model import Intervention, ResidualTrace, Weights, forward_trace, nll
from .scores import ScoreTable

KINDS = ("attention_noise", "ffn_amplify")


class InterventionError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class InterventionSpec:
    kind: str
    targets: tuple
    k: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InterventionError(f"kind must be one of {KINDS}")
        if not self.k > 0:
            raise InterventionError("amplification k must be positive")
        if self.kind == "attention_noise":
            object.__setattr__(self, "targets", tuple(sorted((int(l), int(h)) for l, h in self.targets)))
        else:
            object.__setattr__(self, "targets", tuple(sorted(int(l) for l in self.targets)))

    def build(self, weights: Weights) -> Intervention:
        c = weights.config
        if self.kind == "attention_noise":
            for l, h in self.targets:
                if not (0 <= l < c.n_layers and 0 <= h < c.n_heads):
                    raise InterventionError(f"invalid head {(l, h)}")
            return Intervention(noise_heads=self.targets, noise_seed=self.seed)
        scale = np.ones(c.n_layers, dtype=np.float32)
        for l in self.targets:
            if not 0 <= l < c.n_layers:
                raise InterventionError(f"invalid layer {l}")
            scale[l] = self.k
        return Intervention(ffn_scale=scale)


def noise_attention_forward(weights: Weights, tokens: Sequence[int], heads: Iterable[tuple[int, int]], seed: int):
    """Targeted heads get seeded N(0, 1) pre-softmax scores."""
    iv = InterventionSpec("attention_noise", tuple(heads), seed=seed).build(weights)
    trace = forward_trace(weights, tokens, iv)
    return trace.logits, trace


def amplify_ffn_forward(weights: Weights, tokens: Sequence[int], layers: Iterable[int], k: float = 10.0):
    iv = InterventionSpec("ffn_amplify", tuple(layers), k=k).build(weights)
    trace = forward_trace(weights, tokens, iv)
    return trace.logits, trace


def matched_controls(experimental: Iterable, universe: Iterable, cross_layer: bool = False) -> list:
    """Disjoint, equal-sized control group.

    Heads ((layer, head) pairs) are matched to the nearest unused
    non-experimental head in the same layer; layers (ints) to the nearest
    unused non-experimental layer. Distance ties go to the lower index.
    With `cross_layer`, a head whose layer has no candidate left falls back
    to the nearest layer that has one (then the nearest head index there).
    """
    exp = sorted(set(experimental))
    uni = sorted(set(universe))
    if not exp:
        return []
    if not set(exp) <= set(uni):
        raise InterventionError("experimental items must belong to the universe")
    taken = set(exp)
    out = []
    heads = isinstance(exp[0], tuple)
    for item in exp:
        if heads:
            l, h = item
            cands = [u for u in uni if u[0] == l and u not in taken]
            dist = lambda u: (abs(u[1] - h), u[1])
            if not cands and cross_layer:
                cands = [u for u in uni if u not in taken]
                dist = lambda u: (abs(u[0] - l), u[0], abs(u[1] - h), u[1])
        else:
            cands = [u for u in uni if u not in taken]
            dist = lambda u: (abs(u - item), u)
        if not cands:
            raise InterventionError(f"no control candidate for {item}")
        pick = min(cands, key=dist)
        taken.add(pick)
        out.append(pick)
    return out


# ---------------------------------------------------------------------------
# RQ2: NLL under intervention
# ---------------------------------------------------------------------------


@dataclasses.dataclass
class Rq2Report:
    rows: list[tuple[str, str, float, float, float]]  # group, sample_id, base, intervened, delta

    def mean_delta(self, group: str) -> float:
        vals = [r[4] for r in self.rows if r[0] == group]
        if not vals:
            raise InterventionError(f"no rows for group {group}")
        return float(np.mean(vals))

    @property
    def groups(self) -> list[str]:
        return sorted({r[0] for r in self.rows})

    def summary(self) -> dict:
        out = {g: self.mean_delta(g) for g in self.groups}
        for kind in KINDS:
            e, c = f"{kind}/experimental", f"{kind}/control"
            if e in out and c in out:
                out[f"{kind}/difference"] = out[e] - out[c]
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "sample_id", "nll_base", "nll_intervened", "delta"])
        for g, sid, b, i, d in self.rows:
            w.writerow([g, sid, repr(b), repr(i), repr(d)])
        return buf.getvalue()

    def save(self, prefix) -> None:
        with open(f"{prefix}.csv", "w") as f:
            f.write(self.to_csv())
        with open(f"{prefix}.json", "w") as f:
            json.dump(self.summary(), f, indent=1, sort_keys=True)
            f.write("\n")


def run_rq2(
    weights: Weights,
    vocab: Vocab,
    samples: Sequence[Sample],
    specs: dict[str, InterventionSpec],
) -> Rq2Report:
    """Teacher-forced NLL change of each sample's response under each named spec."""
    if not samples:
        raise InterventionError("truthful set is empty")
    rows = []
    base = {s.id: nll(weights, s.prompt(vocab), s.response) for s in samples}
    for group in sorted(specs):
        iv = specs[group].build(weights)
        for s in samples:
            v = nll(weights, s.prompt(vocab), s.response, iv)
            rows.append((group, s.id, base[s.id], v, v - base[s.id]))
    return Rq2Report(rows)


def rq2_specs(
    weights: Weights,
    heads: Sequence[tuple[int, int]],
    layers: Sequence[int],
    k: float = 10.0,
    seed: int = 0,
) -> dict[str, InterventionSpec]:
    """Experimental and matched-control specs for both intervention kinds."""
    c = weights.config
    all_heads = [(l, h) for l in range(c.n_layers) for h in range(c.n_heads)]
    ctrl_heads = matched_controls(heads, all_heads, cross_layer=True)
    ctrl_layers = matched_controls(layers, range(c.n_layers))
    return {
        "attention_noise/experimental": InterventionSpec("attention_noise", tuple(heads), seed=seed),
        "attention_noise/control": InterventionSpec("attention_noise", tuple(ctrl_heads), seed=seed),
        "ffn_amplify/experimental": InterventionSpec("ffn_amplify", tuple(layers), k=k),
        "ffn_amplify/control": InterventionSpec("ffn_amplify", tuple(ctrl_layers), k=k),
    }


# ---------------------------------------------------------------------------
# RQ3: known-truthful versus hallucinated
# ---------------------------------------------------------------------------


def _group_means(tables: Sequence[ScoreTable], heads, layers) -> tuple[float, float]:
    ecs = np.mean([[t.response_ecs[l, h] for l, h in heads] for t in tables])
    pks = np.mean([[t.response_pks[l] for l in layers] for t in tables])
    return float(ecs), float(pks)


def run_rq3(
    known: Sequence[ScoreTable],
    hallucinated: Sequence[ScoreTable],
    heads: Sequence[tuple[int, int]],
    layers: Sequence[int],
) -> dict:
    """Mean ECS over `heads` and mean PKS over `layers` in each set, plus differences."""
    if not known or not hallucinated:
        raise InterventionError("both sets must be nonempty")
    if not heads or not layers:
        raise InterventionError("heads and layers must be nonempty")
    ke, kp = _group_means(known, heads, layers)
    he, hp = _group_means(hallucinated, heads, layers)
    return {
        "known": {"n": len(known), "ecs": ke, "pks": kp},
        "hallucinated": {"n": len(hallucinated), "ecs": he, "pks": hp},
        "ecs_difference": ke - he,
        "pks_difference": kp - hp,
    }

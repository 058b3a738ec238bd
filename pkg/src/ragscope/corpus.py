"""Synthetic fact worlds, RAG prompts and labelled samples.

A world holds subject/relation/object facts over a closed vocabulary.
Known subjects are memorised through closed-book sequences; unknown
subjects only ever appear inside retrieved contexts, so answering about them
requires reading the context. Prompts put the retrieved facts first and the
question last:

    <bos> <ctx> s1 r1 o1 s2 r2 o2 ... <q> s r   ->   <ans> o

No training position ever receives an object token as input. That keeps an
object token's own state free of "don't repeat me" directions, which would
otherwise dominate final-layer similarities.
"""

from __future__ import annotations

import dataclasses
import json
from collections.abc import Callable, Iterable, Sequence
from pathlib import Path

import numpy as np

SPECIALS = ("<pad>", "<bos>", "<eos>", "<ans>", "<ctx>", "<q>")
MAX_VOCAB = 512


class CorpusError(ValueError):
    pass


class SampleFormatError(CorpusError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclasses.dataclass(frozen=True)
class Vocab:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise CorpusError("duplicate vocabulary symbols")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, sym: str) -> bool:
        return sym in self._index

    def id(self, sym: str) -> int:
        try:
            return self._index[sym]
        except KeyError:
            raise CorpusError(f"unknown symbol {sym!r}") from None

    def encode(self, syms: Iterable[str]) -> list[int]:
        return [self.id(s) for s in syms]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad_id(self) -> int:
        return self.id("<pad>")

    @property
    def eos_id(self) -> int:
        return self.id("<eos>")

    @classmethod
    def build(cls, n_subjects: int, n_relations: int, n_objects: int) -> "Vocab":
        syms = list(SPECIALS)
        syms += [f"s{i}" for i in range(n_subjects)]
        syms += [f"r{i}" for i in range(n_relations)]
        syms += [f"o{i}" for i in range(n_objects)]
        if len(syms) > MAX_VOCAB:
            raise CorpusError(f"vocabulary of {len(syms)} symbols exceeds {MAX_VOCAB}")
        return cls(tuple(syms))


@dataclasses.dataclass(frozen=True)
class FactTriple:
    subject: str
    relation: str
    obj: str

    @property
    def key(self) -> tuple[str, str]:
        return (self.subject, self.relation)

    def to_list(self) -> list[str]:
        return [self.subject, self.relation, self.obj]


@dataclasses.dataclass
class Sample:
    id: str
    query: list[int]
    context: list[int]
    response: list[int]
    label: int
    provenance: str = "synthetic"
    meta: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if not self.query or not self.context or not self.response:
            raise CorpusError(f"sample {self.id}: query, context and response must be nonempty")
        if self.label not in (0, 1):
            raise CorpusError(f"sample {self.id}: label must be 0 or 1")
        if self.provenance not in ("synthetic", "imported"):
            raise CorpusError(f"sample {self.id}: bad provenance {self.provenance!r}")

    def prompt(self, vocab: Vocab) -> list[int]:
        return render_prompt(vocab, self.context, self.query)

    def tokens(self, vocab: Vocab) -> list[int]:
        return self.prompt(vocab) + list(self.response)

    @staticmethod
    def context_span(context_len: int) -> tuple[int, int]:
        """Half-open context positions inside a rendered prompt."""
        return (2, 2 + context_len)

    def spans(self) -> tuple[tuple[int, int], tuple[int, int]]:
        """(context span, response span) in the rendered teacher-forced sequence."""
        ctx = self.context_span(len(self.context))
        start = ctx[1] + 1 + len(self.query)
        return ctx, (start, start + len(self.response))

    def to_json(self) -> dict:
        d = {
            "id": self.id,
            "query_tokens": list(self.query),
            "context_tokens": list(self.context),
            "response_tokens": list(self.response),
            "label": self.label,
            "provenance": self.provenance,
        }
        if self.meta:
            d["meta"] = self.meta
        return d


def render_prompt(vocab: Vocab, context: Sequence[int], query: Sequence[int]) -> list[int]:
    return [vocab.id("<bos>"), vocab.id("<ctx>"), *context, vocab.id("<q>"), *query]


def closed_book_prompt(vocab: Vocab, query: Sequence[int]) -> list[int]:
    return [vocab.id("<bos>"), vocab.id("<q>"), *query]


# ---------------------------------------------------------------------------
# fact generation
# ---------------------------------------------------------------------------


def _draw_facts(rng: np.random.Generator, subjects: Iterable[int], n_relations: int, n_objects: int) -> list[FactTriple]:
    return [
        FactTriple(f"s{s}", f"r{r}", f"o{int(rng.integers(n_objects))}")
        for s in subjects
        for r in range(n_relations)
    ]


def generate_fact_corpus(
    seed: int,
    n_entities: int,
    n_relations: int,
    n_objects: int = 32,
) -> tuple[list[FactTriple], list[list[int]], Vocab]:
    """Unique (subject, relation) facts and their closed-book training sequences.

    Each sequence reads ``<bos> <q> s r <ans> o``.
    """
    if n_entities < 1 or n_relations < 1 or n_objects < 1:
        raise CorpusError("counts must be >= 1")
    vocab = Vocab.build(n_entities, n_relations, n_objects)
    rng = np.random.default_rng(seed)
    facts = _draw_facts(rng, range(n_entities), n_relations, n_objects)
    seqs = [closed_book_sequence(vocab, f) for f in facts]
    return facts, seqs, vocab


def closed_book_sequence(vocab: Vocab, fact: FactTriple) -> list[int]:
    return closed_book_prompt(vocab, vocab.encode(fact.key)) + vocab.encode(["<ans>", fact.obj])


def answer_mask(seq_len: int, prompt_len: int) -> list[float]:
    """Loss on the two predictions after the prompt (<ans>, then the object)."""
    m = [0.0] * seq_len
    m[prompt_len - 1] = 1.0
    m[prompt_len] = 1.0
    return m


@dataclasses.dataclass(frozen=True)
class WorldConfig:
    """Shape of a synthetic world and of its training mixture.

    A random `override_fraction` of known facts also appear with a conflicting
    retrieved context whose target is still the memorised object, in a share
    `override_rate` of their RAG examples. That is what lets memory win some
    conflicts at test time.
    """

    n_known: int = 50
    n_unknown: int = 100
    n_relations: int = 4
    n_objects: int = 32
    facts_per_context: int = 2
    repeats: int = 10
    max_frequency: int = 5
    override_fraction: float = 0.3
    override_rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_known < 1 or self.n_relations < 1 or self.n_objects < 2:
            raise CorpusError("world needs >= 1 known subject, >= 1 relation, >= 2 objects")
        if self.facts_per_context < 1 or self.repeats < 1 or self.max_frequency < 1:
            raise CorpusError("facts_per_context, repeats and max_frequency must be >= 1")
        if not (0 <= self.override_fraction <= 1 and 0 <= self.override_rate <= 1):
            raise CorpusError("override fractions must lie in [0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        return cls(**d)


@dataclasses.dataclass
class World:
    config: WorldConfig
    vocab: Vocab
    known: list[FactTriple]
    unknown: list[FactTriple]
    override_keys: frozenset[tuple[str, str]]
    sequences: list[list[int]]
    masks: list[list[float]]

    @property
    def facts(self) -> list[FactTriple]:
        return self.known + self.unknown

    def max_prompt_len(self) -> int:
        return 2 + 3 * self.config.facts_per_context + 1 + 2

    def to_json(self) -> dict:
        return {
            "config": dataclasses.asdict(self.config),
            "vocab": list(self.vocab.tokens),
            "known": [f.to_list() for f in self.known],
            "unknown": [f.to_list() for f in self.unknown],
            "override_keys": sorted(list(k) for k in self.override_keys),
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)

    @classmethod
    def load(cls, path) -> "World":
        # the training mixture is a pure function of the config, so rebuild it
        with open(path) as f:
            d = json.load(f)
        world = build_world(WorldConfig.from_dict(d["config"]))
        if list(world.vocab.tokens) != d["vocab"] or [f.to_list() for f in world.known] != d["known"]:
            raise CorpusError(f"{path}: stored facts disagree with the regenerated world")
        return world


class _ContextBuilder:
    def __init__(self, vocab: Vocab, pool: Sequence[FactTriple], n_facts: int, rng: np.random.Generator):
        self.vocab, self.pool, self.n_facts, self.rng = vocab, list(pool), n_facts, rng

    def __call__(self, key: tuple[str, str], obj: str) -> tuple[list[int], int]:
        """Context tokens asserting key -> obj among distractor facts; returns (tokens, slot)."""
        slot = int(self.rng.integers(self.n_facts))
        need = self.n_facts - 1
        picks = self.rng.choice(len(self.pool), size=min(len(self.pool), 3 * need + 3), replace=False)
        others = [self.pool[i] for i in picks if self.pool[i].key != key and self.pool[i].obj != obj][:need]
        if len(others) < need:
            raise CorpusError("fact pool too small to draw distractors")
        rows, j = [], 0
        for i in range(self.n_facts):
            if i == slot:
                rows.append([key[0], key[1], obj])
            else:
                rows.append(others[j].to_list())
                j += 1
        return self.vocab.encode(sym for row in rows for sym in row), slot


def build_world(config: WorldConfig = WorldConfig()) -> World:
    """Deterministically build facts plus the (sequence, loss-mask) training mixture."""
    c = config
    vocab = Vocab.build(c.n_known + c.n_unknown, c.n_relations, c.n_objects)
    rng = np.random.default_rng(c.seed)
    known = _draw_facts(rng, range(c.n_known), c.n_relations, c.n_objects)
    unknown = _draw_facts(rng, range(c.n_known, c.n_known + c.n_unknown), c.n_relations, c.n_objects)
    freq = {f.key: int(rng.integers(1, c.max_frequency + 1)) for f in known}
    override = frozenset(f.key for f in known if rng.random() < c.override_fraction)
    make_ctx = _ContextBuilder(vocab, known + unknown, c.facts_per_context, rng)
    objects = [f"o{i}" for i in range(c.n_objects)]

    seqs: list[list[int]] = []
    masks: list[list[float]] = []

    def add(prompt: list[int], obj: str) -> None:
        seq = prompt + vocab.encode(["<ans>", obj])
        seqs.append(seq)
        masks.append(answer_mask(len(seq), len(prompt)))

    for _ in range(c.repeats):
        for f in known:
            for _ in range(freq[f.key]):
                add(closed_book_prompt(vocab, vocab.encode(f.key)), f.obj)
        for f in known:
            shown = f.obj
            if f.key in override and rng.random() < c.override_rate:
                shown = _other_object(rng, objects, f.obj)
            ctx, _ = make_ctx(f.key, shown)
            add(render_prompt(vocab, ctx, vocab.encode(f.key)), f.obj)
        for f in unknown:
            # unknown subjects get a fresh object every time: only the context can tell
            obj = objects[int(rng.integers(c.n_objects))]
            ctx, _ = make_ctx(f.key, obj)
            add(render_prompt(vocab, ctx, vocab.encode(f.key)), obj)
    return World(c, vocab, known, unknown, override, seqs, masks)


def _other_object(rng: np.random.Generator, objects: Sequence[str], avoid: str) -> str:
    while True:
        o = objects[int(rng.integers(len(objects)))]
        if o != avoid:
            return o


# ---------------------------------------------------------------------------
# labelled samples
# ---------------------------------------------------------------------------

# decode(prompt tokens) -> response tokens
Decoder = Callable[[list[int]], list[int]]


def greedy_decoder(weights, max_new: int = 2) -> Decoder:
    from .model import greedy_decode

    def run(prompt: list[int]) -> list[int]:
        return greedy_decode(weights, prompt, max_new)[len(prompt):]

    return run


def closed_book_accuracy(weights, world: World, facts: Sequence[FactTriple] | None = None) -> float:
    from .model import greedy_decode

    facts = world.known if facts is None else facts
    hits = 0
    for f in facts:
        prompt = closed_book_prompt(world.vocab, world.vocab.encode(f.key))
        hits += greedy_decode(weights, prompt, 2)[-1] == world.vocab.id(f.obj)
    return hits / len(facts)


def containment_label(response: Sequence[int], context_obj: int, memory_obj: int) -> int | None:
    """0 if only the context object appears, 1 if only the memorised one, else None."""
    has_ctx = context_obj in response
    has_mem = memory_obj in response
    if has_ctx == has_mem:
        return None
    return 0 if has_ctx else 1


@dataclasses.dataclass
class BuildStats:
    attempted: int = 0
    kept: int = 0
    discarded: int = 0
    rejected: int = 0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def conflict_prompt(world: World, fact: FactTriple, counterfactual: str, rng: np.random.Generator):
    """Context asserting `counterfactual` for `fact`'s key, or None if it is no conflict."""
    if counterfactual == fact.obj:
        return None
    make_ctx = _ContextBuilder(world.vocab, world.facts, world.config.facts_per_context, rng)
    ctx, slot = make_ctx(fact.key, counterfactual)
    return ctx, slot


def build_conflict_samples(
    world: World,
    weights,
    seed: int,
    variants: int = 4,
    min_accuracy: float = 0.95,
    decoder: Decoder | None = None,
) -> tuple[list[Sample], BuildStats]:
    """Counterfactual-context prompts for every known fact, labelled by what the model says."""
    acc = closed_book_accuracy(weights, world)
    if acc < min_accuracy:
        raise CorpusError(f"closed-book accuracy {acc:.3f} below memorisation threshold {min_accuracy}")
    decode = decoder or greedy_decoder(weights)
    rng = np.random.default_rng(seed)
    objects = [f"o{i}" for i in range(world.config.n_objects)]
    vocab = world.vocab
    out, stats = [], BuildStats()
    for fi, fact in enumerate(world.known):
        for v in range(variants):
            stats.attempted += 1
            cf = _other_object(rng, objects, fact.obj)
            built = conflict_prompt(world, fact, cf, rng)
            if built is None:
                stats.rejected += 1
                continue
            ctx, slot = built
            query = vocab.encode(fact.key)
            resp = decode(render_prompt(vocab, ctx, query))
            label = containment_label(resp, vocab.id(cf), vocab.id(fact.obj))
            if label is None:
                stats.discarded += 1
                continue
            stats.kept += 1
            meta = {"kind": "conflict", "memory_obj": fact.obj, "context_obj": cf, "slot": slot}
            out.append(Sample(f"c{fi:04d}_{v}", query, ctx, resp, label, meta=meta))
    return out, stats


def build_consistent_samples(
    world: World,
    weights,
    seed: int,
    variants: int = 1,
    decoder: Decoder | None = None,
) -> tuple[list[Sample], BuildStats]:
    """Prompts whose context agrees with the gold object, for known and unknown subjects.

    Label 0 when the response contains the gold object, 1 otherwise. meta["known"]
    records whether closed-book decoding already recovers the gold object.
    """
    from .model import greedy_decode

    decode = decoder or greedy_decoder(weights)
    rng = np.random.default_rng(seed)
    objects = [f"o{i}" for i in range(world.config.n_objects)]
    vocab = world.vocab
    unknown = {f.key for f in world.unknown}
    out, stats = [], BuildStats()
    for fi, fact in enumerate(world.facts):
        for v in range(variants):
            stats.attempted += 1
            # unknown subjects have no stable object, so the context defines gold
            gold = objects[int(rng.integers(len(objects)))] if fact.key in unknown else fact.obj
            make_ctx = _ContextBuilder(vocab, world.facts, world.config.facts_per_context, rng)
            ctx, slot = make_ctx(fact.key, gold)
            query = vocab.encode(fact.key)
            resp = decode(render_prompt(vocab, ctx, query))
            label = 0 if vocab.id(gold) in resp else 1
            closed = greedy_decode(weights, closed_book_prompt(vocab, query), 2)[-1]
            stats.kept += 1
            meta = {"kind": "consistent", "gold_obj": gold, "slot": slot, "known": bool(closed == vocab.id(gold))}
            out.append(Sample(f"k{fi:04d}_{v}", query, ctx, resp, label, meta=meta))
    return out, stats


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

_REQUIRED = ("id", "query_tokens", "context_tokens", "response_tokens", "label")


def save_samples(samples: Iterable[Sample], path) -> None:
    with open(path, "w") as f:
        for s in samples:
            f.write(json.dumps(s.to_json(), sort_keys=True) + "\n")


def load_samples(path) -> list[Sample]:
    out = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            d = json.loads(raw)
        except json.JSONDecodeError as e:
            raise SampleFormatError(lineno, f"invalid JSON ({e.msg})") from None
        if not isinstance(d, dict):
            raise SampleFormatError(lineno, "expected a JSON object")
        for field in _REQUIRED:
            if field not in d:
                raise SampleFormatError(lineno, f"missing field {field!r}")
        try:
            out.append(
                Sample(
                    id=str(d["id"]),
                    query=[int(t) for t in d["query_tokens"]],
                    context=[int(t) for t in d["context_tokens"]],
                    response=[int(t) for t in d["response_tokens"]],
                    label=d["label"],
                    provenance=d.get("provenance", "synthetic"),
                    meta=d.get("meta", {}),
                )
            )
        except (CorpusError, TypeError, ValueError) as e:
            raise SampleFormatError(lineno, str(e)) from None
    return out

"""Command-line entry point.

Every subcommand writes its artifacts to the paths it is given, prints a
one-line JSON summary on stdout, and exits 0 only when everything succeeded.
Outputs contain no timestamps or host details, so identical inputs and seeds
give byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__

log = logging.getLogger("ragscope")


class CliError(Exception):
    pass


def _dump(obj, path) -> None:
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(text)


def _load_json(path):
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError:
        raise CliError(f"no such file: {path}") from None
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: invalid JSON ({e})") from None


def _finite(x):
    # strict JSON has no NaN/inf
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    if isinstance(x, dict):
        return {k: _finite(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_finite(v) for v in x]
    return x


def _samples_by_id(path):
    from .corpus import load_samples

    return {s.id: s for s in load_samples(path)}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train_toy(a) -> dict:
    from .corpus import WorldConfig, build_world, closed_book_accuracy
    from .pipeline import model_config_for
    from .serialization import save_weights
    from .train import TrainConfig, train_toy

    wc = WorldConfig(
        n_known=a.n_known, n_unknown=a.n_unknown, n_relations=a.n_relations, n_objects=a.n_objects,
        facts_per_context=a.facts_per_context, seed=a.seed,
    )
    world = build_world(wc)
    cfg = model_config_for(world, a.seed, n_layers=a.layers, n_heads=a.heads, d_model=a.d_model, d_ffn=4 * a.d_model)
    tc = TrainConfig(learning_rate=a.lr, steps=a.steps, batch_size=a.batch_size, seed=a.seed, tie_embeddings=True)
    res = train_toy(cfg, world.sequences, tc, masks=world.masks)
    save_weights(res.weights, a.out)
    world.save(a.world_out)
    acc = closed_book_accuracy(res.weights, world)
    summary = {"weights": str(a.out), "world": str(a.world_out), "final_loss": res.final_loss, "fact_accuracy": acc}
    if a.summary:
        _dump({**summary, "losses": res.losses, "train_config": dataclasses.asdict(tc)}, a.summary)
    return summary


def cmd_make_corpus(a) -> dict:
    from .corpus import generate_fact_corpus

    facts, seqs, vocab = generate_fact_corpus(a.seed, a.n_entities, a.n_relations, a.n_objects)
    _dump({"vocab": list(vocab.tokens), "facts": [f.to_list() for f in facts], "sequences": seqs}, a.out)
    return {"facts": len(facts), "vocab_size": len(vocab), "out": str(a.out)}


def cmd_make_conflicts(a) -> dict:
    from .corpus import World, build_conflict_samples, build_consistent_samples, save_samples
    from .serialization import load_weights

    world = World.load(a.world)
    weights = load_weights(a.weights)
    if a.consistent:
        samples, stats = build_consistent_samples(world, weights, a.seed, a.variants)
    else:
        samples, stats = build_conflict_samples(world, weights, a.seed, a.variants, min_accuracy=a.min_accuracy)
    save_samples(samples, a.out)
    out = {
        "out": str(a.out), **stats.to_json(),
        "labels": {"truthful": sum(s.label == 0 for s in samples), "hallucinated": sum(s.label == 1 for s in samples)},
    }
    if a.stats:
        _dump(out, a.stats)
    return out


def cmd_trace(a) -> dict:
    from .corpus import World
    from .model import forward_trace
    from .serialization import load_weights

    world = World.load(a.world)
    weights = load_weights(a.weights)
    samples = _samples_by_id(a.samples)
    if a.sample_id not in samples:
        raise CliError(f"sample {a.sample_id!r} not in {a.samples}")
    s = samples[a.sample_id]
    tr = forward_trace(weights, s.tokens(world.vocab))
    ctx, resp = s.spans()
    dump = {
        "sample_id": s.id,
        "tokens": tr.tokens.tolist(),
        "symbols": world.vocab.decode(tr.tokens.tolist()),
        "context_span": list(ctx),
        "response_span": list(resp),
        "x0": tr.x0.tolist(),
        "attention": tr.attention.tolist(),
        "head_out": tr.head_out.tolist(),
        "x_mid": tr.x_mid.tolist(),
        "ffn_out": tr.ffn_out.tolist(),
        "x": tr.x.tolist(),
        "logits": tr.logits.tolist(),
    }
    _dump(dump, a.out)
    return {"sample_id": s.id, "positions": tr.n_positions, "out": str(a.out)}


def cmd_scores(a) -> dict:
    from .corpus import World, load_samples
    from .pipeline import score_samples
    from .scores import save_tables, tables_to_csv
    from .serialization import load_weights

    world = World.load(a.world)
    weights = load_weights(a.weights)
    samples = load_samples(a.samples)
    tables = score_samples(weights, world.vocab, samples, a.k_percent, a.chunk_size)
    save_tables(tables, a.out)
    if a.csv:
        with open(a.csv, "w") as f:
            f.write(tables_to_csv(tables))
    return {"tables": len(tables), "out": str(a.out)}


def cmd_copy_heads(a) -> dict:
    from .copying import copying_head_scores
    from .serialization import load_weights

    report = copying_head_scores(load_weights(a.weights), a.mode, a.exact)
    report.save(a.out)
    if a.csv:
        report.save(a.csv if str(a.csv).endswith(".csv") else f"{a.csv}.csv")
    return {"ranking": [list(h) for h in report.top(a.show)], "out": str(a.out)}


def _load_report(a):
    from .copying import CopyingHeadReport, copying_head_scores

    if a.copy_report:
        return CopyingHeadReport.from_json(_load_json(a.copy_report))
    if a.weights:
        from .serialization import load_weights

        return copying_head_scores(load_weights(a.weights))
    raise CliError("pass --copy-report or --weights")


def cmd_calibrate(a) -> dict:
    from .detector import DetectorConfig, calibrate, stratified_split
    from .scores import load_tables

    tables = load_tables(a.tables)
    cal_t, held_t = stratified_split(tables, a.seed, a.fraction)
    base = DetectorConfig(chunk_size=a.chunk_size, k_percent=a.k_percent)
    cal = calibrate(cal_t, _load_report(a), a.mode, base=base)
    cal.config.save(a.out)
    if a.split_out:
        _dump({"seed": a.seed, "calibration": [t.sample_id for t in cal_t], "held_out": [t.sample_id for t in held_t]}, a.split_out)
    if a.calibration_out:
        _dump(_finite(cal.to_json()), a.calibration_out)
    return {"mode": a.mode, "validation_auc": cal.auc, "heads": [list(h) for h in cal.config.heads],
            "layers": list(cal.config.layers), "beta": cal.config.beta, "out": str(a.out)}


def cmd_detect(a) -> dict:
    from .detector import DetectorConfig, evaluate
    from .scores import load_tables

    tables = load_tables(a.tables)
    if a.split:
        ids = set(_load_json(a.split)[a.subset])
        tables = [t for t in tables if t.sample_id in ids]
    rep = evaluate(tables, DetectorConfig.load(a.config), a.mode)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    rep.save(a.out)
    return _finite(rep.summary)


def cmd_intervene(a) -> dict:
    from .corpus import World, load_samples
    from .detector import DetectorConfig
    from .interventions import InterventionSpec, rq2_specs, run_rq2, run_rq3
    from .scores import load_tables
    from .serialization import load_weights

    cfg = DetectorConfig.load(a.config)
    cfg.require_sets()
    heads, layers = list(cfg.heads)[: a.max_heads], list(cfg.layers)[: a.max_layers]
    if a.kind == "rq3":
        if not (a.known_tables and a.tables):
            raise CliError("rq3 needs --known-tables and --tables")
        known = [t for t in load_tables(a.known_tables) if t.label == 0]
        halluc = [t for t in load_tables(a.tables) if t.label == 1]
        out = run_rq3(known, halluc, heads, layers)
        _dump(out, f"{a.out}.json")
        return out
    if not (a.weights and a.world and a.samples):
        raise CliError("rq2 needs --weights, --world and --samples")
    weights = load_weights(a.weights)
    world = World.load(a.world)
    truthful = [s for s in load_samples(a.samples) if s.label == 0]
    if a.spec:
        d = _load_json(a.spec)
        specs = {name: InterventionSpec(**v) for name, v in d.items()}
    else:
        specs = rq2_specs(weights, heads, layers, a.k, a.seed)
    rep = run_rq2(weights, world.vocab, truthful, specs)
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    rep.save(a.out)
    return rep.summary()


def cmd_aarf_generate(a) -> dict:
    from .aarf import aarf_decode, calibrate_tau
    from .corpus import World, containment_label, load_samples
    from .detector import DetectorConfig
    from .scores import load_tables
    from .serialization import load_weights

    weights = load_weights(a.weights)
    world = World.load(a.world)
    cfg = DetectorConfig.load(a.config)
    cfg.require_sets()
    upd = {"alpha2": a.alpha2, "beta2": a.beta2}
    tables = None
    if a.tau_tables:
        tables = load_tables(a.tau_tables)
        if a.split:
            ids = set(_load_json(a.split)["calibration"])
            tables = [t for t in tables if t.sample_id in ids]
    if a.tau is not None:
        upd["tau"] = float(a.tau)
    elif tables is not None:
        upd["tau"] = calibrate_tau(tables, cfg, position=a.tau_position)
    cfg = cfg.replace(**upd)
    targets = None
    if a.target_heads is not None or a.target_layers is not None:
        from .copying import CopyingHeadReport
        from .detector import select_sets

        if not (a.copy_report and tables is not None and a.target_heads and a.target_layers):
            raise CliError("--target-heads/--target-layers need both counts, --copy-report and --tau-tables")
        report = CopyingHeadReport.from_json(_load_json(a.copy_report))
        targets = select_sets(report, tables, a.target_heads, a.target_layers)
    samples = load_samples(a.samples)
    if a.split:
        ids = set(_load_json(a.split)["held_out"])
        samples = [s for s in samples if s.id in ids]
    vocab = world.vocab
    lines, follow, triggered = [], 0, 0
    for s in samples:
        prompt = s.prompt(vocab)
        res = aarf_decode(weights, prompt, cfg, a.max_new, s.spans()[0],
                          eos_id=vocab.eos_id if a.stop_at_eos else None, targets=targets, scope=a.scope)
        gen = res.tokens[len(prompt):]
        rec = {"id": s.id, "tokens": gen, "text": " ".join(vocab.decode(gen)), "log": res.log}
        if "context_obj" in s.meta:
            lab = containment_label(gen, vocab.id(s.meta["context_obj"]), vocab.id(s.meta["memory_obj"]))
            rec["context_following"] = lab == 0
            follow += lab == 0
        triggered += bool(res.triggered_steps)
        lines.append(json.dumps(_finite(rec), sort_keys=True))
    Path(a.out).parent.mkdir(parents=True, exist_ok=True)
    with open(a.out, "w") as f:
        f.writelines(line + "\n" for line in lines)
    n = len(samples)
    heads, layers = targets if targets is not None else (cfg.heads, cfg.layers)
    summary = {"n": n, "tau": cfg.tau, "alpha2": cfg.alpha2, "beta2": cfg.beta2, "triggered_samples": triggered,
               "heads": [list(h) for h in heads], "layers": list(layers),
               "context_following_rate": follow / n if n else None, "out": str(a.out)}
    return _finite(summary)


def _flatten(prefix: str, obj, out: dict) -> None:
    if isinstance(obj, dict):
        for k in sorted(obj):
            _flatten(f"{prefix}.{k}" if prefix else str(k), obj[k], out)
    elif isinstance(obj, list) and all(not isinstance(v, (dict, list)) for v in obj) and len(obj) <= 16:
        out[prefix] = json.dumps(obj)
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _flatten(f"{prefix}[{i}]", v, out)
    else:
        out[prefix] = obj


def cmd_report(a) -> dict:
    """Merge JSON summaries (and CSV row counts) into one JSON and one long-form CSV."""
    merged, flat = {}, {}
    for p in sorted(a.inputs, key=str):
        name = Path(p).name
        if name.endswith(".json"):
            merged[name] = _load_json(p)
            _flatten(name, merged[name], flat)
        elif name.endswith(".csv"):
            with open(p, newline="") as f:
                rows = list(csv.DictReader(f))
            merged[name] = {"rows": len(rows), "columns": list(rows[0]) if rows else []}
            numeric = {}
            for col in merged[name]["columns"]:
                try:
                    vals = [float(r[col]) for r in rows if r[col] != ""]
                except ValueError:
                    continue
                if vals:
                    numeric[col] = {"mean": float(np.mean(vals)), "n": len(vals)}
            merged[name]["numeric"] = numeric
            _flatten(name, merged[name], flat)
        else:
            raise CliError(f"unsupported report input {p}")
    _dump(_finite(merged), f"{a.out}.json")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["key", "value"])
    for k in sorted(flat):
        v = flat[k]
        w.writerow([k, repr(v) if isinstance(v, float) else v])
    with open(f"{a.out}.csv", "w") as f:
        f.write(buf.getvalue())
    return {"inputs": len(merged), "keys": len(flat), "out": str(a.out)}


def cmd_pipeline(a) -> dict:
    """Full toy experiment; writes every intermediate artifact under --out-dir."""
    from .corpus import WorldConfig, save_samples
    from .pipeline import ExperimentSettings, run_experiment
    from .scores import save_tables

    out = Path(a.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    st = ExperimentSettings(seed=a.seed, steps=a.steps, variants=a.variants,
                            world=WorldConfig(facts_per_context=a.facts_per_context))
    cache = Path(a.cache_dir) if a.cache_dir else None
    r = run_experiment(st, cache_dir=cache, with_aarf=not a.no_aarf)
    save_samples(r.samples, out / "samples.jsonl")
    save_tables(r.tables, out / "tables.json")
    r.report.save(out / "copy_heads.json")
    for mode, cal in r.calibration.items():
        cal.config.save(out / f"detector_{mode}.json")
    summary = _finite(r.summary())
    _dump(summary, out / "summary.json")
    return {"seed": a.seed, "out_dir": str(out), "fact_accuracy": r.accuracy,
            "held_out_auc": {m: r.held_out[m]["auc"] for m in r.held_out}}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ragscope", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def cmd(name, fn, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
        sp.set_defaults(fn=fn)
        return sp

    sp = cmd("train-toy", cmd_train_toy, "train a toy model on a synthetic fact world")
    sp.add_argument("--out", required=True, help="weights file to write")
    sp.add_argument("--world-out", required=True, help="world description (JSON) to write")
    sp.add_argument("--summary", help="optional JSON with the loss curve")
    sp.add_argument("--steps", type=int, default=5000)
    sp.add_argument("--lr", type=float, default=3e-3)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--layers", type=int, default=4)
    sp.add_argument("--heads", type=int, default=4)
    sp.add_argument("--d-model", type=int, default=64)
    sp.add_argument("--n-known", type=int, default=50)
    sp.add_argument("--n-unknown", type=int, default=100)
    sp.add_argument("--n-relations", type=int, default=4)
    sp.add_argument("--n-objects", type=int, default=32)
    sp.add_argument("--facts-per-context", type=int, default=2)

    sp = cmd("make-corpus", cmd_make_corpus, "write a closed-book fact corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-entities", type=int, default=50)
    sp.add_argument("--n-relations", type=int, default=4)
    sp.add_argument("--n-objects", type=int, default=32)

    sp = cmd("make-conflicts", cmd_make_conflicts, "build auto-labelled conflict (or consistent) samples")
    sp.add_argument("--world", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--out", required=True, help="samples JSONL to write")
    sp.add_argument("--stats", help="optional JSON with build counts")
    sp.add_argument("--variants", type=int, default=4)
    sp.add_argument("--min-accuracy", type=float, default=0.95)
    sp.add_argument("--consistent", action="store_true", help="contexts agree with the stored facts")

    sp = cmd("trace", cmd_trace, "dump the residual trace of one sample")
    sp.add_argument("--world", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--sample-id", required=True)
    sp.add_argument("--out", required=True)

    sp = cmd("scores", cmd_scores, "compute ECS/PKS score tables")
    sp.add_argument("--world", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--samples", required=True)
    sp.add_argument("--out", required=True, help="tables JSON to write")
    sp.add_argument("--csv", help="optional long-form CSV")
    sp.add_argument("--k-percent", type=float, default=10.0)
    sp.add_argument("--chunk-size", type=int, default=2)

    sp = cmd("copy-heads", cmd_copy_heads, "rank heads by copying score")
    sp.add_argument("--weights", required=True)
    sp.add_argument("--out", required=True, help=".json or .csv")
    sp.add_argument("--csv", help="also write a CSV")
    sp.add_argument("--mode", choices=("literal", "signed"), default="literal")
    sp.add_argument("--exact", action="store_true", help="add the exact positive-eigenvalue ratio")
    sp.add_argument("--show", type=int, default=8, help="heads echoed on stdout")

    sp = cmd("calibrate", cmd_calibrate, "grid-search detector sets and weights on a calibration split")
    sp.add_argument("--tables", required=True)
    sp.add_argument("--copy-report", help="copy-heads JSON")
    sp.add_argument("--weights", help="used to rank heads when no report is given")
    sp.add_argument("--mode", choices=("token", "chunk"), default="token")
    sp.add_argument("--fraction", type=float, default=0.5, help="calibration share per label")
    sp.add_argument("--chunk-size", type=int, default=2)
    sp.add_argument("--k-percent", type=float, default=10.0)
    sp.add_argument("--out", required=True, help="detector config JSON")
    sp.add_argument("--split-out", help="write calibration/held-out sample ids")
    sp.add_argument("--calibration-out", help="write the full grid")

    sp = cmd("detect", cmd_detect, "evaluate a detector config on score tables")
    sp.add_argument("--config", required=True)
    sp.add_argument("--tables", required=True)
    sp.add_argument("--mode", choices=("token", "chunk"), default="token")
    sp.add_argument("--split", help="split JSON from calibrate")
    sp.add_argument("--subset", choices=("calibration", "held_out"), default="held_out")
    sp.add_argument("--out", required=True, help="prefix for .csv and .json")

    sp = cmd("intervene", cmd_intervene, "causal interventions (rq2) or known/hallucinated comparison (rq3)")
    sp.add_argument("--kind", choices=("rq2", "rq3"), default="rq2")
    sp.add_argument("--config", required=True, help="detector config supplying heads and layers")
    sp.add_argument("--weights")
    sp.add_argument("--world")
    sp.add_argument("--samples")
    sp.add_argument("--spec", help="JSON {group: {kind, targets, k, seed}} overriding the default groups")
    sp.add_argument("--k", type=float, default=10.0, help="FFN amplification factor")
    sp.add_argument("--max-heads", type=int, help="use only the first N heads of the config")
    sp.add_argument("--max-layers", type=int, help="use only the first N layers of the config")
    sp.add_argument("--tables", help="rq3: conflict tables (hallucinated rows used)")
    sp.add_argument("--known-tables", help="rq3: tables of known, truthful samples")
    sp.add_argument("--out", required=True, help="prefix for report files")

    sp = cmd("aarf-generate", cmd_aarf_generate, "decode with score-triggered reweighting")
    sp.add_argument("--world", required=True)
    sp.add_argument("--weights", required=True)
    sp.add_argument("--config", required=True)
    sp.add_argument("--samples", required=True, help="prompts are taken from these samples")
    sp.add_argument("--tau", help="trigger threshold; 'inf' disables reweighting")
    sp.add_argument("--tau-tables", help="calibrate tau on these tables instead")
    sp.add_argument("--tau-position", type=int, default=1, help="table row tau is fitted on (1 emits the toy answer)")
    sp.add_argument("--split", help="split JSON: tau from calibration ids, decode held-out ids")
    sp.add_argument("--alpha2", type=float, default=5.0)
    sp.add_argument("--beta2", type=float, default=0.2)
    sp.add_argument("--copy-report", help="copy-heads JSON for choosing reweighting targets")
    sp.add_argument("--target-heads", type=int, help="rescale the top-N copying heads")
    sp.add_argument("--target-layers", type=int, help="rescale the N FFNs whose PKS best tracks the label")
    sp.add_argument("--scope", choices=("last", "all"), default="last", help="positions that get rescaled")
    sp.add_argument("--max-new", type=int, default=2)
    sp.add_argument("--stop-at-eos", action="store_true")
    sp.add_argument("--out", required=True, help="JSONL of generations with per-step logs")

    sp = cmd("report", cmd_report, "aggregate JSON/CSV outputs into summary tables")
    sp.add_argument("inputs", nargs="+")
    sp.add_argument("--out", required=True, help="prefix for .json and .csv")

    sp = cmd("pipeline", cmd_pipeline, "run the whole toy experiment")
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--steps", type=int, default=5000)
    sp.add_argument("--variants", type=int, default=4)
    sp.add_argument("--facts-per-context", type=int, default=2)
    sp.add_argument("--cache-dir", help="reuse trained weights across runs")
    sp.add_argument("--no-aarf", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    np.random.seed(a.seed)  # nothing should rely on the global RNG; this just pins it
    try:
        summary = a.fn(a)
    except (CliError, ValueError, OSError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

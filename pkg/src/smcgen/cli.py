"""Experiment runner: train models, run methods over instances, estimate quality.

Subcommands: ``train``, ``run``, ``enumerate``, ``quality``, ``compare``.
Run configurations are JSON files (schema documented in the README); every
output embeds the configuration hash and seed so results can be audited and
reproduced. Output formats: JSON-lines for runs, CSV for per-run quality
estimates, JSON for summaries and oracle files. Non-finite floats are
written as ``null``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor

from . import instances as instances_mod
from .estimators import (
    METHOD_TARGET,
    compare_methods,
    method_quality,
)
from .grammar import parse_grammar
from .inference import AllDeadError, METHODS, MethodConfig, run
from .lm import NgramLM, RemoteLM, perplexity, train_ngram
from .oracle import EnumerationCapError
from .potentials import PotentialProduct, cfg_potential, make_potential

ENDPOINT_ENV = "SMCGEN_LM_ENDPOINT"
SCHEMA_VERSION = 1


class SpecError(ValueError):
    """Configuration problem, reported with the offending field path."""


def _jf(x):
    """JSON-safe float: non-finite becomes null."""
    return x if x is not None and math.isfinite(x) else None


def config_hash(spec: dict) -> str:
    canon = json.dumps(spec, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def load_spec(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise SpecError(f"spec: cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise SpecError(f"spec: invalid JSON in {path}: {exc}") from exc


def _spec_get(spec, key, typ, default=None, required=False):
    if key not in spec:
        if required:
            raise SpecError(f"spec.{key}: required field is missing")
        return default
    val = spec[key]
    if typ is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, typ):
        raise SpecError(f"spec.{key}: expected {typ.__name__}, got {type(val).__name__}")
    return val


def build_run_setup(spec: dict):
    """Resolve a run spec into (instance, lm, method config pieces).

    The spec names a bundled instance and may override its grammar, LM
    source, and expensive potentials.
    """
    name = _spec_get(spec, "instance", str, required=True)
    try:
        instance = instances_mod.get_instance(name)
    except KeyError as exc:
        raise SpecError(f"spec.instance: {exc.args[0]}") from None

    method = _spec_get(spec, "method", str, required=True)
    if method not in METHODS:
        raise SpecError(
            f"spec.method: unknown method {method!r}; valid: {sorted(METHODS)}"
        )

    lm = instance.lm
    lm_spec = spec.get("lm")
    if lm_spec is not None:
        if not isinstance(lm_spec, dict):
            raise SpecError("spec.lm: expected an object")
        if "file" in lm_spec:
            if not os.path.exists(lm_spec["file"]):
                raise SpecError(f"spec.lm.file: no such file {lm_spec['file']!r}")
            lm = NgramLM.load(lm_spec["file"])
        elif "endpoint" in lm_spec:
            endpoint = os.environ.get(ENDPOINT_ENV, lm_spec["endpoint"])
            lm = RemoteLM(endpoint, instance.vocab)
        else:
            raise SpecError("spec.lm: needs 'file' or 'endpoint'")

    grammar = instance.grammar
    if "grammar" in spec:
        gpath = _spec_get(spec, "grammar", str)
        if not os.path.exists(gpath):
            raise SpecError(f"spec.grammar: no such file {gpath!r}")
        with open(gpath, encoding="utf-8") as fh:
            grammar = parse_grammar(fh.read())

    if "potentials" in spec:
        if not isinstance(spec["potentials"], list):
            raise SpecError("spec.potentials: expected a list")
        members = []
        for i, entry in enumerate(spec["potentials"]):
            if not isinstance(entry, dict) or "name" not in entry:
                raise SpecError(f"spec.potentials[{i}]: expected an object with 'name'")
            try:
                members.append(make_potential(entry["name"], lm.vocabulary,
                                              grammar, entry.get("params")))
            except KeyError as exc:
                raise SpecError(f"spec.potentials[{i}].name: {exc.args[0]}") from None
        expensive = PotentialProduct(members)
    else:
        expensive = instance.expensive()

    efficient = PotentialProduct(
        [cfg_potential(grammar, lm.vocabulary)] if grammar is not None else []
    )

    proposal = _spec_get(spec, "proposal", str, default=instance.proposal)
    traits = METHODS[method]
    if method == "base-lm" and grammar is not None:
        warnings.warn("method base-lm ignores grammar fields", RuntimeWarning)
    if traits.use_efficient and method != "base-lm" and not len(efficient):
        if method in ("grammar-only-is", "grammar-only-smc", "local-decoding"):
            raise SpecError(f"spec.method: {method} requires a grammar")
    if traits.expensive in ("incremental", "final") and not len(expensive):
        raise SpecError(f"spec.method: {method} requires an expensive potential")
    if proposal == "character" and not len(efficient):
        raise SpecError("spec.proposal: character proposal requires a grammar")

    config = MethodConfig(
        method=method,
        efficient=efficient,
        expensive=expensive,
        proposal=proposal,
        n_particles=_spec_get(spec, "particles", int, default=10),
        unit=_spec_get(spec, "unit", str, default=instance.unit),
        max_steps=_spec_get(spec, "max_steps", int, default=instance.max_steps),
        ess_threshold_fraction=_spec_get(spec, "ess_threshold", float,
                                         default=instance.ess_threshold_fraction),
        workers=_spec_get(spec, "engine_workers", int, default=1),
    )
    return instance, lm, config


def run_record(spec, seed, instance, lm, config, result=None, error=None) -> dict:
    vocab = lm.vocabulary
    rec = {
        "schema": SCHEMA_VERSION,
        "config_hash": config_hash(spec),
        "instance": instance.name,
        "method": config.method,
        "seed": seed,
        "failed": error is not None,
    }
    if error is not None:
        rec["error"] = str(error)
        rec["steps"] = [
            {"t": d.step, "ess": _jf(d.ess), "resampled": d.resampled,
             "log_mean_weight": _jf(d.log_mean_weight), "wall_clock_s": d.wall_clock}
            for d in getattr(error, "diagnostics", [])
        ]
        return rec
    rec["log_evidence"] = _jf(result.log_evidence)
    rec["n_truncated"] = result.n_truncated
    rec["resample_count"] = result.resample_count
    rec["particles"] = [
        {
            "tokens": list(p.tokens),
            "bytes": vocab.decode(p.core_tokens()).decode("utf-8", "backslashreplace"),
            "log_weight": _jf(p.log_weight),
            "complete": p.complete,
        }
        for p in result.particles
    ]
    rec["posterior"] = [
        {
            "bytes": vocab.decode(t for t in toks if t != vocab.eos_id)
                     .decode("utf-8", "backslashreplace"),
            "prob": w,
        }
        for toks, w in sorted(result.posterior.entries.items())
    ]
    rec["steps"] = [
        {"t": d.step, "ess": _jf(d.ess), "resampled": d.resampled,
         "log_mean_weight": _jf(d.log_mean_weight), "wall_clock_s": d.wall_clock}
        for d in result.diagnostics
    ]
    return rec


def cmd_train(args) -> int:
    if args.order < 1:
        raise SpecError("train: --order must be >= 1")
    if args.smoothing < 0:
        raise SpecError("train: --smoothing must be >= 0")
    try:
        with open(args.corpus, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise SpecError(f"train: cannot read corpus: {exc}") from exc
    if not data.strip():
        raise SpecError("train: corpus is empty")
    delim = args.doc_delimiter.encode("utf-8")
    docs = [d for d in data.split(delim) if d]
    if len(docs) >= 2:
        n_held = max(1, len(docs) // 10)
        train_docs, held = docs[:-n_held], docs[-n_held:]
        note = f"held-out ({len(held)} docs)"
    else:
        train_docs, held = docs, docs
        note = "training-set (single document; no held-out split)"
    lm = train_ngram(delim.join(train_docs), args.order, args.smoothing,
                     doc_delimiter=delim)
    lm.save(args.out)
    ppl = perplexity(lm, held)
    print(f"vocabulary size: {lm.vocabulary.size} (including EOS)")
    print(f"{note} perplexity: {ppl:.4f}")
    print(f"model written to {args.out}")
    return 0


def cmd_run(args) -> int:
    spec = load_spec(args.spec)
    if args.particles is not None:
        spec["particles"] = args.particles
    if args.seed is not None:
        spec["seeds"] = [args.seed]
    instance, lm, config = build_run_setup(spec)
    seeds = spec.get("seeds", [0])
    if not isinstance(seeds, list) or not all(isinstance(s, int) for s in seeds):
        raise SpecError("spec.seeds: expected a list of integers")
    out_path = args.out or spec.get("out")

    def one(seed):
        try:
            return run_record(spec, seed, instance, lm, config,
                              result=run(config, lm, seed))
        except AllDeadError as exc:
            return run_record(spec, seed, instance, lm, config, error=exc)

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            records = list(pool.map(one, seeds))
    else:
        records = [one(s) for s in seeds]
    records.sort(key=lambda r: r["seed"])
    lines = [json.dumps(r, sort_keys=True) for r in records]
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        for line in lines:
            print(line)
    n_failed = sum(r["failed"] for r in records)
    if n_failed:
        print(f"{n_failed}/{len(records)} runs failed (all particles dead)",
              file=sys.stderr)
        return 1
    return 0


def cmd_enumerate(args) -> int:
    try:
        instance = instances_mod.get_instance(args.instance)
    except KeyError as exc:
        raise SpecError(f"enumerate: {exc.args[0]}") from None
    if not instance.enumerable:
        raise SpecError(f"enumerate: instance {instance.name} is not enumerable")
    try:
        oracle = instance.oracle()
    except EnumerationCapError as exc:
        raise SpecError(f"enumerate: {exc}") from None
    vocab = instance.vocab
    payload = {
        "schema": SCHEMA_VERSION,
        "instance": instance.name,
        "max_len": oracle.max_len,
        "z": oracle.z,
        "log_z": _jf(oracle.log_z),
        "z_efficient": oracle.z_efficient,
        "z_rerank": oracle.z_rerank,
        "truncation_bound": oracle.truncation_bound,
        "posterior": [
            {
                "tokens": list(toks),
                "bytes": vocab.decode(t for t in toks if t != vocab.eos_id)
                         .decode("utf-8", "backslashreplace"),
                "prob": p,
            }
            for toks, p in sorted(oracle.posterior.items())
        ],
        "local_normalizers": [
            {
                "prefix": vocab.decode(pre).decode("utf-8", "backslashreplace"),
                "L": l_val,
            }
            for pre, l_val in sorted(oracle.local_normalizers.items())
        ],
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def cmd_quality(args) -> int:
    spec = load_spec(args.spec)
    name = _spec_get(spec, "instance", str, required=True)
    try:
        instance = instances_mod.get_instance(name)
    except KeyError as exc:
        raise SpecError(f"spec.instance: {exc.args[0]}") from None
    methods = spec.get("methods")
    if not isinstance(methods, list) or len(methods) < 2:
        raise SpecError("spec.methods: need at least two method names")
    for m in methods:
        if m not in METHODS:
            raise SpecError(f"spec.methods: unknown method {m!r}; valid: {sorted(METHODS)}")
    runs = _spec_get(spec, "runs", int, default=100)
    particles = _spec_get(spec, "particles", int, default=10)
    seed = _spec_get(spec, "seed", int, default=0)

    per_method = {}
    for m in methods:
        vals, rq = method_quality(instance, m, runs, seed, n_particles=particles)
        per_method[m] = (vals, rq)

    csv_path = args.out_csv or spec.get("out_csv")
    if csv_path:
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "instance", "run_seed", "estimate"])
            for m, (vals, rq) in per_method.items():
                for i, v in enumerate(vals):
                    writer.writerow([m, instance.name, seed + i, v])

    summary = {
        "schema": SCHEMA_VERSION,
        "config_hash": config_hash(spec),
        "instance": instance.name,
        "seed": seed,
        "methods": {},
        "pairwise": [],
    }
    if instance.enumerable:
        oracle = instance.oracle()
        summary["oracle_log_z"] = {
            "full": _jf(oracle.log_z),
            "efficient": _jf(oracle.log_z_efficient),
            "rerank": _jf(oracle.log_z_rerank),
        }
    for m, (vals, rq) in per_method.items():
        summary["methods"][m] = {
            "target": rq.target,
            "runs": rq.accepted,
            "attempted": rq.attempted,
            "acceptance_rate": rq.acceptance_rate,
            "mean_estimate": _jf(rq.accepted_mean),
            "std_error": _jf(rq.accepted_std_error),
            "corrected_estimate": _jf(rq.corrected),
        }
    for i, a in enumerate(methods):
        for b in methods[i + 1:]:
            va, vb = per_method[a][0], per_method[b][0]
            if len(va) >= 30 and len(vb) >= 30:
                rep = compare_methods(va, vb)
                summary["pairwise"].append({
                    "a": a, "b": b,
                    "t_stat": _jf(rep.t_stat), "p_value": _jf(rep.p_value),
                    "band": rep.band,
                    "comparable": METHOD_TARGET[a] == METHOD_TARGET[b],
                })
    text = json.dumps(summary, indent=2, sort_keys=True)
    json_path = args.out_json or spec.get("out_json")
    if json_path:
        with open(json_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    return 0


def _read_estimates(path, method=None):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if method is not None:
        rows = [r for r in rows if r["method"] == method]
    if not rows:
        raise SpecError(f"compare: no rows for method {method!r} in {path}")
    return [float(r["estimate"]) for r in rows]


def cmd_compare(args) -> int:
    a = _read_estimates(args.csv_a, args.method_a)
    b = _read_estimates(args.csv_b or args.csv_a, args.method_b)
    rep = compare_methods(a, b)
    print(json.dumps({
        "mean_a": _jf(rep.mean_a), "mean_b": _jf(rep.mean_b),
        "n_a": rep.n_a, "n_b": rep.n_b,
        "t_stat": _jf(rep.t_stat), "p_value": _jf(rep.p_value),
        "band": rep.band,
    }, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smcgen",
        description="constrained-generation inference over synthetic instances",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train and serialize an n-gram model")
    p_train.add_argument("corpus")
    p_train.add_argument("--order", type=int, required=True)
    p_train.add_argument("--smoothing", type=float, default=1.0)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--doc-delimiter", default="\n")
    p_train.set_defaults(fn=cmd_train)

    p_run = sub.add_parser("run", help="execute a method over an instance")
    p_run.add_argument("--spec", required=True)
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--particles", type=int)
    p_run.add_argument("--out")
    p_run.add_argument("--workers", type=int, default=1)
    p_run.set_defaults(fn=cmd_run)

    p_enum = sub.add_parser("enumerate", help="write the brute-force oracle file")
    p_enum.add_argument("instance")
    p_enum.add_argument("--out")
    p_enum.set_defaults(fn=cmd_enumerate)

    p_q = sub.add_parser("quality", help="estimate approximation quality per method")
    p_q.add_argument("--spec", required=True)
    p_q.add_argument("--out-csv")
    p_q.add_argument("--out-json")
    p_q.set_defaults(fn=cmd_quality)

    p_c = sub.add_parser("compare", help="Welch test between two estimate samples")
    p_c.add_argument("csv_a")
    p_c.add_argument("csv_b", nargs="?")
    p_c.add_argument("--method-a")
    p_c.add_argument("--method-b")
    p_c.set_defaults(fn=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line orchestration: score, prune, apply, eval, bench, inspect.

Plan computation (prune) and application (apply) are separate commands
so plans stay auditable artifacts. Exit codes: 0 success, 1 validation
error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import bundle as bundle_io
from . import engine, evalharness, relevance
from .corpus import AXIS_ALIASES, build_dimension_corpus, load_documents, tokenize
from .errors import ValidationError
from .neurons import enumerate_neurons

log = logging.getLogger("cusprune")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on bad flags, usage on stderr
        raise UsageError(message)


class _PairAction(argparse.Action):
    """Record --corpus/--dim occurrences in command-line order."""

    def __call__(self, parser, namespace, values, option_string=None):
        pairs = getattr(namespace, "ordered_pairs", None)
        if pairs is None:
            pairs = []
            namespace.ordered_pairs = pairs
        pairs.append((self.dest, values))


def _parse_dim(spec: str) -> dict[str, str]:
    fixed: dict[str, str] = {}
    for part in spec.split(","):
        if "=" not in part:
            raise ValidationError(f"bad --dim value {spec!r}: expected axis=value")
        axis, value = part.split("=", 1)
        canon = AXIS_ALIASES.get(axis.strip())
        if canon is None:
            raise ValidationError(f"unknown axis {axis!r} in --dim (expected lang/domain/task)")
        if canon in fixed:
            raise ValidationError(f"axis {canon!r} fixed twice in --dim {spec!r}")
        fixed[canon] = value.strip()
    return fixed


def _collect_dimensions(namespace) -> list[tuple[str, dict[str, str]]]:
    """Pair each --dim with the most recent --corpus before it."""
    pairs = getattr(namespace, "ordered_pairs", None) or []
    current_corpus = None
    out: list[tuple[str, dict[str, str]]] = []
    for kind, value in pairs:
        if kind == "corpus":
            current_corpus = value
        else:
            if current_corpus is None:
                raise ValidationError("--dim given before any --corpus")
            out.append((current_corpus, _parse_dim(value)))
    return out


def _build_corpora(dimensions):
    doc_cache: dict[str, list] = {}
    corpora = []
    for path, fixed in dimensions:
        if path not in doc_cache:
            doc_cache[path] = load_documents(path)
        corpora.append(build_dimension_corpus(doc_cache[path], fixed))
    return corpora


def _add_model_corpus_flags(p: _Parser) -> None:
    p.add_argument("--model", required=True, help="bundle directory")
    p.add_argument("--corpus", action=_PairAction, metavar="FILE",
                   help="JSONL documents; pairs with the --dim flags that follow it")
    p.add_argument("--dim", "--dimension", action=_PairAction, metavar="AXIS=VALUE",
                   help="dimension spec, e.g. lang=de or domain=medical,task=mcq")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-tokens", type=int, default=512, help="truncate documents to this many tokens")


def _safe_name(label: str) -> str:
    return "".join(c if c.isalnum() or c in "-_=." else "_" for c in label.replace(":", "="))


def _write_json_atomic(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name, dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _load_token_docs(path, vocab, max_tokens, max_seq_len) -> list[list[int]]:
    limit = min(max_tokens, max_seq_len)
    out = []
    for doc in load_documents(path):
        ids = tokenize(vocab, doc.text)[:limit]
        if ids:
            out.append(ids)
    if not out:
        raise ValidationError(f"no usable documents in {path}")
    return out


def _load_jsonl(path) -> list[dict]:
    items = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            items.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
    return items


# --- subcommands ------------------------------------------------------------


def _cmd_score(args) -> int:
    config, weights, vocab = bundle_io.load_bundle(args.model)
    dimensions = _collect_dimensions(args)
    if not dimensions:
        raise ValidationError("at least one dimension required (--corpus FILE --dim axis=value)")
    corpora = _build_corpora(dimensions)
    universe = enumerate_neurons(config)
    score_config = relevance.ScoreConfig(tau=args.tau, max_tokens_per_doc=args.max_tokens)
    fp = bundle_io.fingerprint(config, weights)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for corpus in corpora:
        impacts = relevance.score_corpus(
            config, weights, vocab, corpus, universe, score_config,
            fingerprint=fp, threads=args.threads,
        )
        iset = relevance.irrelevant_set(impacts, score_config)
        name = _safe_name(corpus.label)
        relevance.save_impacts(impacts, outdir / f"{name}.impacts.bin")
        relevance.save_irrelevant_set(iset, outdir / f"{name}.irrelevant.txt")
        print(f"{corpus.label}: {len(corpus)} docs, {len(iset.neurons)} neurons below tau={args.tau}")
    return 0


def _cmd_prune(args) -> int:
    config, weights, vocab = bundle_io.load_bundle(args.model)
    dimensions = _collect_dimensions(args)
    if not dimensions:
        raise ValidationError("at least one dimension required (--corpus FILE --dim axis=value)")
    corpora = _build_corpora(dimensions)
    universe = enumerate_neurons(config)
    score_config = relevance.ScoreConfig(
        tau=args.tau if args.tau is not None else 50.0,
        max_tokens_per_doc=args.max_tokens,
    )
    if args.tau is not None:
        if args.layers:
            raise ValidationError("--tau (fixed threshold) cannot be combined with --layers")
        plan = engine.plan_at_tau(
            config, weights, vocab, corpora, universe, args.tau,
            score_config=score_config, threads=args.threads, seed=args.seed,
        )
    else:
        if args.sigma is None:
            raise ValidationError("either --sigma or --tau is required")
        if args.layers:
            plan = engine.aggressive_plan(
                config, weights, vocab, corpora, universe, args.sigma, args.layers,
                score_config=score_config, threads=args.threads,
                force_closest=args.force_closest, seed=args.seed,
            )
        else:
            plan = engine.calibrate(
                config, weights, vocab, corpora, universe, args.sigma,
                score_config=score_config, threads=args.threads,
                force_closest=args.force_closest, seed=args.seed,
            )
    engine.save_plan(plan, args.out)
    n_neurons = sum(len(p.ids) for p in plan.phases)
    print(
        f"plan: {n_neurons} neurons, achieved ratio {plan.achieved_ratio:.6f} "
        f"(target sigma {plan.sigma:.4f}, tau {plan.tau:.4f}) -> {args.out}"
    )
    return 0


def _cmd_apply(args) -> int:
    config, weights, vocab = bundle_io.load_bundle(args.model)
    plan = engine.load_plan(args.plan)
    pruned_config, pruned_weights = engine.apply_plan(config, weights, plan)
    bundle_io.save_bundle(pruned_config, pruned_weights, vocab, args.out)
    print(
        f"pruned bundle: {pruned_config.parameter_count()} params "
        f"(dense {config.parameter_count()}) -> {args.out}"
    )
    return 0


def _cmd_eval(args) -> int:
    dense = bundle_io.load_bundle(args.dense)
    pruned = bundle_io.load_bundle(args.pruned)
    vocab = dense[2]
    max_seq = min(dense[0].max_seq_len, pruned[0].max_seq_len)
    expert_docs = _load_token_docs(args.expert_docs, vocab, args.max_tokens, max_seq)
    general_docs = _load_token_docs(args.general_docs, vocab, args.max_tokens, max_seq)
    mcq_sets = {Path(p).stem: _load_jsonl(p) for p in args.mcq or []}
    rouge_sets = {Path(p).stem: _load_jsonl(p) for p in args.rouge or []}
    timing_docs = None
    if args.timing_docs:
        timing_docs = _load_token_docs(args.timing_docs, vocab, args.max_tokens, max_seq)
    report = evalharness.expert_report(
        (dense[0], dense[1]),
        (pruned[0], pruned[1]),
        vocab,
        expert_docs,
        general_docs,
        mcq_sets or None,
        rouge_sets or None,
        plan_ref=args.plan,
        timing_docs=timing_docs,
        repetitions=args.reps,
        max_new_tokens=args.max_new_tokens,
        threads=args.threads,
    )
    _emit_report(report.to_json(), Path(args.out), args.figures)
    for name, row in report.datasets.items():
        retention = row["retention"]
        shown = f"{100 * retention:.1f}%" if retention is not None else "n/a"
        print(f"{name}: dense {row['dense']:.4f}, pruned {row['pruned']:.4f}, retention {shown}")
    return 0


def _cmd_bench(args) -> int:
    dense = bundle_io.load_bundle(args.dense)
    pruned = bundle_io.load_bundle(args.pruned)
    docs = _load_token_docs(args.docs, dense[2], args.max_tokens, dense[0].max_seq_len)
    timing = evalharness.bench_speed(
        dense[0], dense[1], pruned[0], pruned[1], docs, repetitions=args.reps
    )
    report = {
        "timing": timing,
        "parameters": {
            "dense": dense[0].parameter_count(),
            "pruned": pruned[0].parameter_count(),
        },
    }
    _emit_report(report, Path(args.out), args.figures)
    print(
        f"speedup {timing['speedup']:.3f}x "
        f"({timing['tokens_per_sec_dense']:.0f} -> {timing['tokens_per_sec_pruned']:.0f} tok/s), "
        f"FLOP ratio {timing['flop_ratio']:.3f}x"
    )
    return 0


def _emit_report(doc: dict, out: Path, figures: bool) -> None:
    from . import plots

    _write_json_atomic(doc, out)
    stem = out.with_suffix("") if out.suffix else out
    plots.write_report_csv(doc, stem.with_name(stem.name + ".csv"))
    if figures:
        if "datasets" in doc:
            plots.render_eval_figures(doc, stem)
        elif doc.get("timing"):
            plots.render_bench_figure(doc["timing"], stem)


def _cmd_inspect(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        config, weights, vocab = bundle_io.load_bundle(path)
        universe = enumerate_neurons(config)
        print(f"bundle: {path}")
        print(f"  fingerprint: {bundle_io.fingerprint(config, weights)}")
        print(f"  parameters: {config.parameter_count()}")
        print(f"  layers: {config.n_layers}  d_model: {config.d_model}  vocab: {config.vocab_size}")
        for l in range(config.n_layers):
            print(
                f"  layer {l}: d_ff {config.d_ff_at(l)}, heads {config.n_heads_at(l)}, "
                f"v_dims {list(config.v_dims_at(l))}"
            )
        print(f"  prunable neurons: {len(universe)}")
        if config.meta:
            print(f"  meta: {json.dumps(config.meta, sort_keys=True)}")
        return 0
    plan = engine.load_plan(path)
    print(f"plan: {path}")
    print(f"  fingerprint: {plan.fingerprint}")
    print(f"  sigma: {plan.sigma}  tau: {plan.tau:.4f}")
    print(f"  achieved ratio: {plan.achieved_ratio:.6f} "
          f"({plan.removed_params} of {plan.total_params} params)")
    for phase in plan.phases:
        print(f"  phase {phase.kind}: {len(phase.ids)} neurons")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="cusprune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", parents=[], help="write impact matrices and irrelevant sets")
    _add_model_corpus_flags(p)
    p.add_argument("--tau", type=float, default=50.0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("prune", help="calibrate a prune plan")
    _add_model_corpus_flags(p)
    p.add_argument("--sigma", type=float, default=None, help="target removed-parameter fraction")
    p.add_argument("--layers", type=int, default=0, help="drop this many layers first")
    p.add_argument("--tau", type=float, default=None, help="fixed percentile; skips calibration")
    p.add_argument("--force-closest", action="store_true")
    p.add_argument("--out", required=True, help="plan JSON path")
    p.set_defaults(func=_cmd_prune)

    p = sub.add_parser("apply", help="apply a plan to a bundle")
    p.add_argument("--model", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("--out", required=True, help="pruned bundle directory")
    p.set_defaults(func=_cmd_apply)

    p = sub.add_parser("eval", help="dense-vs-pruned retention report")
    p.add_argument("--dense", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--expert-docs", required=True)
    p.add_argument("--general-docs", required=True)
    p.add_argument("--mcq", action="append", metavar="FILE", help="JSONL {prompt, options, gold}")
    p.add_argument("--rouge", action="append", metavar="FILE", help="JSONL {prompt, reference}")
    p.add_argument("--plan", default=None, help="plan path recorded in the report")
    p.add_argument("--timing-docs", default=None)
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--max-new-tokens", type=int, default=32)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("bench", help="wall-clock speed comparison")
    p.add_argument("--dense", required=True)
    p.add_argument("--pruned", required=True)
    p.add_argument("--docs", required=True)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--max-tokens", type=int, default=512)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("inspect", help="summarize a bundle or plan")
    p.add_argument("path")
    p.set_defaults(func=_cmd_inspect)

    return parser


def main(argv=None) -> int:
    level = _LOG_LEVELS.get(os.environ.get("CUSPRUNE_LOG", "error").lower())
    if level is None:
        print(f"CUSPRUNE_LOG must be one of {sorted(_LOG_LEVELS)}", file=sys.stderr)
        return 1
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: ``tracetriage <subcommand> ...``.

Exit status is 0 on success, 1 when a command fails on its inputs and 2 for
usage errors (argparse).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .adjudicator import DEFAULT_POLICY, POLICIES, load_remote_config, read_run, run_checklist, write_run
from .bundle import host_of, load_bundle, save_bundle
from .checklist import PROFILE_NAMES
from .errors import EvalError, TriageError
from .estimators import make_backend
from .evidence_api import SocketClient, serve
from .harness import (cost_quantiles, curve_table, evaluate, load_truth, metrics_table, parse_grid,
                      prior_shift_curve)
from .oracle import email_domain, registrable_domain
from .preprocessor import load_persona, preprocess, write_context
from .report import render, synthesize
from .simulator import FailureMode, build_corpus, load_corpus_spec, make_script, run_scenario, write_corpus


def _loop_count(text: str):
    return text if text == "pass" else int(text)


def _backend(args):
    if args.backend == "remote":
        if not args.remote_config:
            raise TriageError("--backend remote needs --remote-config")
        return make_backend(load_remote_config(args.remote_config), args.max_tool_calls)
    return make_backend(args.backend, args.max_tool_calls)


def cmd_serve(args) -> int:
    bundle = load_bundle(args.bundle)
    if args.listen == "stdio":
        serve(bundle, "stdio")
        return 0
    handle = serve(bundle, args.listen)
    host, port = handle.address
    print(f"serving {bundle.bundle_id} on {host}:{port}", file=sys.stderr, flush=True)
    try:
        handle.wait()
    except KeyboardInterrupt:
        pass
    finally:
        handle.shutdown()
    return 0


def cmd_adjudicate(args) -> int:
    bundle = load_bundle(args.bundle)
    run = run_checklist(bundle, args.profile, _backend(args), args.policy, retry_limit=args.retry_limit,
                        max_tool_calls=args.max_tool_calls, parallelism=args.parallelism)
    write_run(run, args.out)
    print(f"{run.bundle_id}\t{run.prediction}\t{','.join(run.final.drivers) or '-'}")
    return 0


def cmd_ingest_eml(args) -> int:
    persona = load_persona(args.persona) if args.persona else None
    result = preprocess(Path(args.input).read_bytes(), persona)
    write_context(result, args.out)
    if result.context is None:
        print("no call-to-action link found", file=sys.stderr)
        return 1
    print(result.context.target_url)
    return 0


def cmd_simulate(args) -> int:
    persona = load_persona(args.persona) if args.persona else None
    script = make_script(args.kind, args.seed, loop_count=args.loop_count)
    bundle, truth = run_scenario(script, persona, FailureMode.parse(args.mode))
    save_bundle(bundle, args.out)
    print(json.dumps(truth.to_dict(), sort_keys=True))
    return 0


def cmd_simulate_corpus(args) -> int:
    counts, seed = load_corpus_spec(args.spec)
    persona = load_persona(args.persona) if args.persona else None
    corpus = build_corpus(counts, seed, persona)
    write_corpus(corpus, args.out)
    print(f"{len(corpus)} bundles written to {args.out}")
    return 0


def cmd_report(args) -> int:
    run = read_run(args.run)
    bundle = load_bundle(args.bundle)
    config = load_remote_config(args.remote_config) if args.remote_config else None
    report = synthesize(run, bundle, args.writer, remote_config=config)
    Path(args.out).write_text(render(report), encoding="utf-8")
    for note in report.notes:
        print(note, file=sys.stderr)
    return 0


def _run_files(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    files = sorted(path.glob("*.json")) or sorted(path.glob("*/run.json"))
    if not files:
        raise EvalError(f"no run files under {path}")
    return files


def cmd_eval(args) -> int:
    truth = load_truth(args.truth)
    runs = {}
    for f in _run_files(Path(args.runs)):
        run = read_run(f)
        runs[run.bundle_id] = run
    unknown = sorted(set(runs) - set(truth))
    if unknown:
        raise EvalError(f"runs without truth: {', '.join(unknown[:5])}")
    # Truth entries with no run count as error slots.
    ids = sorted(truth)
    predictions = [runs[i].prediction if i in runs else "error" for i in ids]
    evaluation = evaluate(predictions, [truth[i]["label"] for i in ids])
    Path(args.out).write_text(metrics_table(evaluation), encoding="utf-8")
    mismatched = [i for i, p in zip(ids, predictions) if truth[i]["blocked"] and p != "blocked"]
    if mismatched:
        print(f"blocked sessions not reported as blocked: {', '.join(mismatched)}", file=sys.stderr)
    costs = [r.cost.total_usd for r in runs.values()]
    if costs:
        q = cost_quantiles(costs)
        print(f"cost per URL p50={q.quantiles['p50']:.4f} p99={q.quantiles['p99']:.4f} "
              f"(+{q.fixed_operator_usd:.2f} operator)", file=sys.stderr)
    sys.stdout.write(metrics_table(evaluation))
    return 0


def cmd_prior_shift(args) -> int:
    curve = curve_table(prior_shift_curve(args.tpr, args.fpr, parse_grid(args.grid)))
    Path(args.out).write_text(curve, encoding="utf-8")
    return 0


def pick_kind(sender: str, target_url: str) -> str:
    """Demo mapping from an email's CTA to a simulator scenario.

    A CTA on the sender's own registrable domain replays the benign scenario;
    anything else replays brand impersonation.
    """
    sender_domain = registrable_domain(email_domain(sender)) if sender else ""
    target = registrable_domain(host_of(target_url))
    return "benign" if sender_domain and sender_domain == target else "brand_impersonation"


def cmd_triage(args) -> int:
    persona = load_persona(args.persona) if args.persona else None
    result = preprocess(Path(args.eml).read_bytes(), persona)
    if result.context is None:
        print("no call-to-action link found", file=sys.stderr)
        return 1
    ctx = result.context
    if args.bundle:
        bundle = load_bundle(args.bundle)
    else:
        kind = args.kind or pick_kind(ctx.lure_from, ctx.target_url)
        bundle, _ = run_scenario(make_script(kind, args.seed), ctx.persona)
        print(f"CTA {ctx.target_url} replayed as simulated scenario {kind}", file=sys.stderr)
    backend = _backend(args)
    with serve(bundle, "127.0.0.1:0") as handle, SocketClient(handle.address) as client:
        run = run_checklist(bundle, args.profile, backend, args.policy, client=client)
    if args.run_out:
        write_run(run, args.run_out)
    Path(args.out).write_text(render(synthesize(run, bundle)), encoding="utf-8")
    print(f"{run.bundle_id}\t{run.prediction}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracetriage", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def backend_opts(p):
        p.add_argument("--backend", choices=("oracle", "remote"), default="oracle")
        p.add_argument("--remote-config", help="JSON with base_url, model and pricing for --backend remote")
        p.add_argument("--profile", choices=PROFILE_NAMES, default="comprehensive")
        p.add_argument("--policy", choices=sorted(POLICIES), default=DEFAULT_POLICY)
        p.add_argument("--max-tool-calls", type=int, default=None)

    p = sub.add_parser("serve", help="answer evidence tool requests for one bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--listen", default="stdio", help="host:port or stdio")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("adjudicate", help="run the technique checklist over a bundle")
    p.add_argument("--bundle", required=True)
    backend_opts(p)
    p.add_argument("--retry-limit", type=int, default=2)
    p.add_argument("--parallelism", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adjudicate)

    p = sub.add_parser("ingest-eml", help="parse and sanitize an email, pick its call-to-action")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--persona")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest_eml)

    p = sub.add_parser("simulate", help="record one synthetic scenario as a sealed bundle")
    p.add_argument("--kind", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("none", "symbol", "literal"), default="none")
    p.add_argument("--loop-count", type=_loop_count, default=0, help="slider loops before success, or 'pass'")
    p.add_argument("--persona")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("simulate-corpus", help="record a seeded corpus with ground truth")
    p.add_argument("--spec", required=True)
    p.add_argument("--persona")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate_corpus)

    p = sub.add_parser("report", help="render an incident report for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--writer", choices=("template", "remote"), default="template")
    p.add_argument("--remote-config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("eval", help="score run files against ground truth")
    p.add_argument("--runs", required=True, help="directory of run JSON files")
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("prior-shift", help="project precision/F1 over a prevalence grid")
    p.add_argument("--tpr", type=float, required=True)
    p.add_argument("--fpr", type=float, required=True)
    p.add_argument("--grid", default="0.01:0.99:0.01")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_prior_shift)

    p = sub.add_parser("triage", help="email to report in one step")
    p.add_argument("--eml", required=True)
    backend_opts(p)
    p.add_argument("--persona")
    p.add_argument("--bundle", help="use this recorded bundle instead of simulating the CTA")
    p.add_argument("--kind", help="simulator scenario to replay (default: chosen from the CTA)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--run-out", help="also write the run JSON here")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_triage)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TriageError, OSError, ValueError) as exc:
        print(f"tracetriage {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

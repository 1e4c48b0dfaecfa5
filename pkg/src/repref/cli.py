"""Command-line surface: validate, run, report, synth, clean-cache.

Exit codes are a stable contract: 0 success, 1 runtime failure, 2
usage/config error. `run` progress is line-oriented key=value so every
stage and cache decision is greppable:

    stage=extract key=1f2e3d4c5b6a status=run seconds=0.412

REPREF_CACHE sets the default cache directory; the fallback is
<output_dir>/cache. Resumption is automatic through the content-addressed
cache; --resume is accepted for explicitness and changes nothing.
"""

from __future__ import annotations

import argparse
import logging
import os
import shutil
import signal
import sys
import threading
from pathlib import Path

from . import __version__, dataio, orchestrator, report
from . import plan as planmod

log = logging.getLogger(__name__)


def _cache_dir(args, the_plan=None) -> Path:
    if getattr(args, "cache", None):
        return Path(args.cache)
    env = os.environ.get("REPREF_CACHE")
    if env:
        return Path(env)
    if the_plan is not None:
        return Path(the_plan.output_dir) / "cache"
    return Path("cache")


def _load_plan_or_exit(path: str) -> planmod.ExperimentPlan:
    p = Path(path)
    if not p.exists():
        print(f"error: config file not found: {p}", file=sys.stderr)
        raise SystemExit(2)
    try:
        return planmod.load_plan(p)
    except planmod.PlanError as e:
        print(f"error: {e}", file=sys.stderr)
        raise SystemExit(2) from e


def cmd_validate(args) -> int:
    p = Path(args.config)
    if not p.exists():
        print(f"error: config file not found: {p}", file=sys.stderr)
        return 2
    try:
        the_plan = planmod.load_plan(p)
    except planmod.PlanError as e:
        print(f"ERROR {e}")
        return 1
    diags = planmod.validate(the_plan, base_dir=p.parent)
    for d in diags:
        print(str(d))
    if any(d.severity == "ERROR" for d in diags):
        return 1
    print(f"ok: {len(planmod.expand_grid(the_plan)) if _grid_known(the_plan) else '?'} "
          f"runs in the grid")
    return 0


def _grid_known(the_plan) -> bool:
    return all(d.declared_tasks() is not None for d in the_plan.datasets)


def cmd_run(args) -> int:
    config = Path(args.config)
    the_plan = _load_plan_or_exit(args.config)
    diags = planmod.validate(the_plan, base_dir=config.parent)
    errors = [d for d in diags if d.severity == "ERROR"]
    for d in diags:
        print(str(d), file=sys.stderr)
    if errors:
        return 2

    datasets = orchestrator.load_datasets(the_plan, config.parent)
    dag = orchestrator.build_dag(the_plan, datasets)
    task_map = {did: sorted(ds.tasks) for did, ds in datasets.items()}
    runs = planmod.expand_grid(the_plan, task_map=task_map)

    if args.dry_run:
        print(f"{len(runs)} runs, {len(dag.nodes)} nodes")
        for stage, count in sorted(dag.stage_counts().items()):
            print(f"stage={stage} nodes={count}")
        for r in runs:
            print("run " + " ".join(f"{k}={v}"
                                    for k, v in r.to_jsonable().items()))
        return 0

    parallelism = args.parallelism or the_plan.parallelism
    cache = _cache_dir(args, the_plan)
    cancel = threading.Event()

    def on_interrupt(signum, frame):
        print("interrupt: finishing in-flight nodes", file=sys.stderr)
        cancel.set()

    previous = signal.signal(signal.SIGINT, on_interrupt)
    try:
        rep = orchestrator.execute(
            dag, cache, parallelism=parallelism, cancel=cancel,
            progress=lambda s: print(
                f"stage={s.stage} key={s.key[:12]} status={s.status} "
                f"seconds={s.seconds:.3f}"
                + (f" error={s.error!r}" if s.error else ""), flush=True))
    finally:
        signal.signal(signal.SIGINT, previous)

    counts = rep.counts()
    print("summary " + " ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    if rep.results:
        out = orchestrator.store_results(rep.results,
                                         Path(the_plan.output_dir) / "results")
        print(f"results={out}")
    if cancel.is_set():
        return 130
    if rep.failures:
        for f in rep.failures:
            print(f"failed stage={f.stage} key={f.key[:12]} error={f.error!r}",
                  file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    results_path = Path(args.results)
    if not results_path.exists():
        print(f"error: results file not found: {results_path}", file=sys.stderr)
        return 2
    if args.preset and args.preset not in report.PRESETS:
        print(f"error: unknown preset {args.preset!r} "
              f"(valid: {', '.join(report.PRESETS)})", file=sys.stderr)
        return 2
    results = orchestrator.load_results(results_path)
    out_dir = Path(args.out) if args.out else results_path.parent / "report"

    try:
        if args.preset:
            tables = report.results_table(results, args.preset)
            paths = report.write_tables(tables, out_dir / "tables", args.preset)
            print(f"tables={paths['csv']} markdown={paths['md']}")
        if args.confusion:
            out = _confusion_from_args(args, results, out_dir)
            print(f"confusion={out}")
    except report.ReportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if not args.preset and not args.confusion:
        print("error: nothing to do (pass --preset and/or --confusion)",
              file=sys.stderr)
        return 2
    return 0


def _confusion_from_args(args, results, out_dir):
    try:
        task_id, feature_id = args.confusion.split("/", 1)
    except ValueError:
        raise report.ReportError(
            f"--confusion wants task/feature, got {args.confusion!r}")
    condition = args.condition or planmod.CLEAN
    candidates = [r for r in results
                  if r.run.task_id == task_id and r.run.feature_id == feature_id
                  and r.run.deformation_id == condition]
    if not candidates:
        raise report.ReportError(
            f"no results for task={task_id} feature={feature_id} "
            f"condition={condition}")
    with_conf = [r for r in candidates if r.confusion is not None]
    if not with_conf:
        raise report.ReportError(
            f"runs for task={task_id} feature={feature_id} have no confusion "
            f"data (multilabel tasks produce none)")
    best = max(with_conf,
               key=lambda r: (r.metrics.get(report.primary_metric_name(r.metrics))
                              or 0.0, -r.run.seed))

    if not args.config:
        raise report.ReportError(
            "--confusion needs --config to locate dataset audio")
    config = Path(args.config)
    the_plan = _load_plan_or_exit(args.config)
    datasets = orchestrator.load_datasets(the_plan, config.parent)
    dataset = datasets[best.run.dataset_id]
    cache = orchestrator.Cache(_cache_dir(args, the_plan))
    audio_of = report.audio_paths_for_result(best, dataset, cache)
    return report.confusion_report(best, dataset, out_dir, audio_of=audio_of)


def cmd_synth(args) -> int:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe_file = out / ".write_probe"
        probe_file.write_text("")
        probe_file.unlink()
    except OSError as e:
        print(f"error: output dir not writable: {e}", file=sys.stderr)
        return 2
    common = {"seed": args.seed, "sr": args.sr, "duration_s": args.duration}
    try:
        if args.kind == "tonebank":
            ds = dataio.synth_tonebank(
                out, n_per_class=args.n_per_class,
                octaves=tuple(int(o) for o in args.octaves.split(",")),
                timbre_families=tuple(args.timbres.split(",")),
                detune_cents_max=args.detune_cents, **common)
        elif args.kind == "noiseband":
            ds = dataio.synth_noiseband(out, n_classes=args.n_classes,
                                        n_per_class=args.n_per_class, **common)
        else:
            ds = dataio.synth_xorband(out, n_per_cluster=args.n_per_cluster,
                                      **common)
    except dataio.DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(f"dataset={ds.dataset_id} tracks={len(ds.tracks)} "
          f"manifest={out / 'manifest.csv'}")
    return 0


def cmd_clean_cache(args) -> int:
    cache = _cache_dir(args)
    if not cache.exists():
        print(f"cache={cache} (already absent)")
        return 0
    if not (cache / "index.jsonl").exists() and not (cache / "tmp").exists():
        print(f"error: {cache} does not look like a repref cache "
              f"(no index.jsonl); refusing to delete", file=sys.stderr)
        return 2
    shutil.rmtree(cache)
    print(f"removed cache={cache}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="repref",
        description="Configuration-driven evaluation of audio feature "
                    "representations")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a plan and print diagnostics")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute a plan with caching")
    p.add_argument("config")
    p.add_argument("--parallelism", type=int, default=0,
                   help="worker threads (default: plan setting)")
    p.add_argument("--cache", help="cache directory (default: REPREF_CACHE "
                                   "or <output_dir>/cache)")
    p.add_argument("--resume", action="store_true",
                   help="resume after interruption (the default behavior; "
                        "accepted for explicitness)")
    p.add_argument("--dry-run", action="store_true",
                   help="print the grid and node counts, touch nothing")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="tables and confusion pages from results")
    p.add_argument("results", help="path to results.jsonl")
    p.add_argument("--preset", help=f"one of: {', '.join(report.PRESETS)}")
    p.add_argument("--confusion", metavar="TASK/FEATURE",
                   help="write the confusion page for a task/feature pair")
    p.add_argument("--condition", help="deformation id for --confusion "
                                       "(default: the clean condition)")
    p.add_argument("--config", help="plan file (needed by --confusion)")
    p.add_argument("--cache", help="cache directory for deformed audio")
    p.add_argument("--out", help="report output dir (default: <results>/report)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("synth", help="generate a synthetic dataset + manifest")
    p.add_argument("kind", choices=sorted(dataio.SYNTH_KINDS))
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sr", type=int, default=16000)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--n-per-class", type=int, default=10)
    p.add_argument("--octaves", default="3,4,5")
    p.add_argument("--timbres", default="sine,saw,square")
    p.add_argument("--detune-cents", type=float, default=10.0)
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--n-per-cluster", type=int, default=40)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("clean-cache", help="delete the cache directory")
    p.add_argument("--cache")
    p.set_defaults(func=cmd_clean_cache)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("REPREF_LOGLEVEL", "WARNING"),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except orchestrator.OrchestratorError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (planmod.PlanError, dataio.DataError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

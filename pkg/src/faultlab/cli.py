"""Command-line entry point: one binary, all subcommands.

Exit codes: 0 success, 1 usage error, 2 runtime error. Every failure prints
exactly one ``error: <reason>`` line to stderr so callers can parse it.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import logging
import os
import signal
import sys
import threading
import time

from .core import (
    FaultlabError,
    ToolConfig,
    parse_hosts_file,
    parse_tool_config,
    parse_workload,
    program_from_args,
    read_execution_log,
    write_workload,
)
from .faults import MB, FAULT_PROGRAMS, BENCHMARKS, FaultProgramSpec, run_benchmark, run_fault_program
from .workloadgen import generate_probe, generate_workload, parse_genspec

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2

DEMO_SPAN = 7200
DEMO_SEED = 2

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage problems; this tool reserves 2 for runtime."""

    def error(self, message: str) -> None:  # noqa: A003 - argparse API
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(args) -> ToolConfig:
    path = getattr(args, "config", None) or os.environ.get("FAULTLAB_CONFIG")
    if path:
        return parse_tool_config(path)
    return ToolConfig()


# ---------------------------------------------------------------- engine


def cmd_engine(args) -> int:
    from .engine import InjectionEngine

    cfg = _load_config(args)
    over = {}
    if args.port is not None:
        over["listen_port"] = args.port
    if args.results_dir is not None:
        over["results_dir"] = args.results_dir
    if args.pool_size is not None:
        over["pool_size"] = args.pool_size
    if args.exact_duration:
        over["exact_duration_mode"] = True
    if over:
        cfg = dataclasses.replace(cfg, **over)
    eng = InjectionEngine(cfg, host=args.host)
    eng.start()
    print(f"engine listening on port {eng.port}", flush=True)
    stop = threading.Event()
    for sig in (signal.SIGTERM, signal.SIGINT):
        signal.signal(sig, lambda *_: stop.set())
    try:
        while not stop.wait(0.5):
            pass
    finally:
        eng.stop()
    print("engine stopped", flush=True)
    return EXIT_OK


# ------------------------------------------------------------ controller


def cmd_controller(args) -> int:
    from .controller import run_session

    cfg = _load_config(args)
    if args.hosts:
        hosts = tuple(h.strip() for h in args.hosts.split(",") if h.strip())
    elif args.hosts_file:
        hosts = parse_hosts_file(args.hosts_file)
    else:
        hosts = cfg.target_hosts
    if not hosts:
        print("error: no target hosts (use --hosts, --hosts-file, or config)", file=sys.stderr)
        return EXIT_USAGE
    workload = parse_workload(args.workload)
    companions = cfg.companion_commands + tuple(args.companion or ())
    summary = run_session(
        workload,
        hosts,
        log_dir=args.log_dir,
        session_id=args.session_id,
        lead_time=args.lead_time,
        connect_timeout=args.connect_timeout,
        companion_commands=companions,
    )
    for label in sorted(summary.log_paths):
        counts = summary.counts.get(label, {})
        state = "ok" if label in summary.connected else f"failed: {summary.failed.get(label, '?')}"
        print(
            f"host {label}: task_start={counts.get('task_start', 0)} "
            f"task_end={counts.get('task_end', 0)} error={counts.get('error', 0)} "
            f"log={summary.log_paths[label]} [{state}]"
        )
    for label, reason in sorted(summary.failed.items()):
        if label not in summary.log_paths:
            print(f"host {label}: unreachable ({reason})")
    print(f"session {summary.session_id} finished: {len(summary.connected)} host(s) completed")
    return EXIT_OK


# ----------------------------------------------------------------- genwl


def cmd_genwl(args) -> int:
    spec = parse_genspec(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    workload = generate_workload(spec)
    write_workload(workload, args.out)
    faults = sum(1 for t in workload.tasks if t.is_fault)
    print(f"workload: {len(workload)} tasks ({faults} faults), span {spec.time_span}s -> {args.out}")
    if args.probe_out:
        probe = generate_probe(spec)
        write_workload(probe, args.probe_out)
        print(f"probe: {len(probe)} tasks -> {args.probe_out}")
    return EXIT_OK


# ----------------------------------------------------------- fault/bench


def cmd_fault(args) -> int:
    params: dict = {}
    if args.cache_mb is not None:
        params["cache_bytes"] = args.cache_mb * MB
    if args.block_mb is not None:
        params["block_mb"] = args.block_mb
    if args.chunk_mb is not None:
        params["chunk_mb"] = args.chunk_mb
    if args.file_mb is not None:
        params["file_mb"] = args.file_mb
    if args.dir is not None:
        params["dir"] = args.dir
    if args.sidechannel is not None:
        params["sidechannel"] = args.sidechannel
    spec = FaultProgramSpec(
        name=args.program,
        duration=args.duration,
        low=args.low,
        seed=args.seed,
        real=args.real,
        i_have_root=args.i_have_root,
        params=params,
    )
    report = run_fault_program(spec)
    print(report.to_json())
    if not report.ok:
        print(f"error: {args.program}: {report.message}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_bench(args) -> int:
    report = run_benchmark(
        args.kind,
        threads=args.threads,
        duration=args.duration,
        ops=args.ops,
        workdir=args.dir,
    )
    print(report.to_json())
    return EXIT_OK


# -------------------------------------------------------------- features


def _build_sets(telemetry_dir, log_path, window, step, min_samples, include_interrupts):
    from .features import (
        allocation_intervals,
        build_feature_sets,
        fault_intervals,
        postprocess,
        read_telemetry_dir,
    )

    exclude = () if include_interrupts else None
    if exclude is None:
        frame = read_telemetry_dir(telemetry_dir)
    else:
        frame = read_telemetry_dir(telemetry_dir, exclude_plugins=exclude)
    allocation = None
    faults = ()
    if log_path:
        entries = read_execution_log(log_path)
        allocation = allocation_intervals(entries)
        faults = fault_intervals(entries)
    frame = postprocess(frame, allocation=allocation)
    return build_feature_sets(frame, faults=faults, window=window, step=step,
                              min_samples=min_samples)


def cmd_features(args) -> int:
    from .features import write_feature_set

    sets = _build_sets(args.telemetry, args.log, args.window, args.step,
                       args.min_samples, args.include_interrupts)
    os.makedirs(args.out, exist_ok=True)
    for view in sorted(sets):
        fs = sets[view]
        path = os.path.join(args.out, f"{view}.csv")
        write_feature_set(fs, path)
        print(f"view {view}: {fs.n} windows x {len(fs.feature_names)} features -> {path}")
    return EXIT_OK


# ---------------------------------------------------------------- ml I/O


def _read_feature_dir(path: str) -> dict:
    from .features import read_feature_set

    sets = {}
    for csv_path in sorted(glob.glob(os.path.join(path, "*.csv"))):
        with open(csv_path, "r", encoding="utf-8") as fh:
            head = fh.readline()
        if not head.startswith("window_end,ambiguous,"):
            continue  # not a feature file; the dir may hold reports too
        fs = read_feature_set(csv_path)
        sets[fs.view] = fs
    if not sets:
        raise FaultlabError(f"no feature sets found under {path}")
    return sets


def _core_feature_names(sets: dict) -> list:
    # pooled rows come from the per-core views, never the node view
    for view in sorted(sets):
        if view != "node":
            return list(sets[view].feature_names)
    raise FaultlabError("no per-core feature views found")


_ORDER_ALIASES = {"timestamp": "time", "time": "time", "shuffled": "shuffled"}


def _order_name(raw: str) -> str:
    try:
        return _ORDER_ALIASES[raw]
    except KeyError:
        raise FaultlabError(f"unknown fold order {raw!r} (use timestamp or shuffled)") from None


def cmd_train(args) -> int:
    from .ml import RandomForest, cross_validate, pool_core_windows, save_model

    sets = _read_feature_dir(args.features)
    X, y, ends = pool_core_windows(
        sets, seed=args.seed, label=args.label, drop_ambiguous=args.drop_ambiguous
    )
    factory = lambda: RandomForest(
        n_trees=args.trees, max_depth=args.depth,
        min_samples_leaf=args.min_leaf, seed=args.seed,
    )
    if not args.no_cv:
        order = _order_name(args.order)
        cv = cross_validate(X, y, window_ends=ends, n_folds=args.folds,
                            order=order, seed=args.seed, model_factory=factory)
        for f in cv.folds:
            print(f"fold {f.fold} ({order}): macro_f={f.scores.macro_f:.4f} "
                  f"accuracy={f.scores.accuracy:.4f} test_size={f.test_size}")
        print(f"cv ({order}, {args.folds} folds): macro_f={cv.macro_f:.4f} "
              f"weighted_f={cv.weighted_f:.4f} accuracy={cv.accuracy:.4f}")
    forest = factory()
    forest.fit(X, y)
    names = _core_feature_names(sets)
    meta = {
        "label": args.label,
        "drop_ambiguous": args.drop_ambiguous,
        "n_trees": args.trees,
        "rows": int(len(y)),
        "class_labels": sorted(set(y)),
    }
    save_model(args.model, forest, names, meta=meta)
    print(f"model: {len(y)} rows, {len(names)} features, "
          f"{len(meta['class_labels'])} classes -> {args.model}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from .ml import (
        CVResult,
        FoldScore,
        RandomForest,
        cross_validate,
        load_model,
        pool_core_windows,
        score_classification,
    )
    from .report import write_report

    sets = _read_feature_dir(args.features)
    X, y, ends = pool_core_windows(
        sets, seed=args.seed, label=args.label, drop_ambiguous=args.drop_ambiguous
    )
    results = {}
    if args.model:
        forest, meta = load_model(args.model)
        names = _core_feature_names(sets)
        if meta["feature_names"] != names:
            raise FaultlabError("model feature schema does not match the feature sets")
        scores = score_classification(y, forest.predict(X))
        results["holdout"] = CVResult(
            order="holdout", n_folds=1,
            folds=[FoldScore(fold=1, test_size=len(y),
                             test_indices=np.arange(len(y)), scores=scores)],
            macro_f=scores.macro_f, weighted_f=scores.weighted_f,
            accuracy=scores.accuracy,
        )
    else:
        factory = lambda: RandomForest(n_trees=args.trees, seed=args.seed)
        for raw in args.orders.split(","):
            order = _order_name(raw.strip())
            results[order] = cross_validate(
                X, y, window_ends=ends, n_folds=args.folds, order=order,
                seed=args.seed, model_factory=factory,
            )
    paths = write_report(args.report_dir, results)
    for name, res in results.items():
        print(f"{name}: macro_f={res.macro_f:.4f} weighted_f={res.weighted_f:.4f} "
              f"accuracy={res.accuracy:.4f}")
    print(f"report -> {paths['summary']}")
    return EXIT_OK


# ---------------------------------------------------------------- detect


def _matching_views(sets: dict, names: list) -> dict:
    return {v: fs for v, fs in sets.items() if list(fs.feature_names) == names}


def cmd_detect(args) -> int:
    import numpy as np

    from .ml import load_model

    forest, meta = load_model(args.model)
    names = meta["feature_names"]
    out = open(args.out, "w", encoding="utf-8") if args.out else sys.stdout
    try:
        out.write("window_end,view,label\n")
        out.flush()
        last_end = -1
        polls = 0
        while True:
            sets = _build_sets(args.telemetry, args.log, args.window, args.step,
                               args.min_samples, args.include_interrupts)
            views = _matching_views(sets, names)
            if not views:
                hint = ""
                if any(n.startswith("allocated") for n in names) and not args.log:
                    hint = " (the model uses allocated channels; pass --log)"
                raise FaultlabError("no feature view matches the model schema" + hint)
            rows = []
            for view in sorted(views):
                fs = views[view]
                for i, end in enumerate(fs.window_ends):
                    if end > last_end:
                        rows.append((int(end), view, fs.X[i]))
            if rows:
                rows.sort(key=lambda r: (r[0], r[1]))
                labels = forest.predict(np.array([r[2] for r in rows]))
                for (end, view, _), label in zip(rows, labels):
                    out.write(f"{end},{view},{label}\n")
                out.flush()
                last_end = max(r[0] for r in rows)
            if not args.follow:
                break
            polls += 1
            if args.max_polls and polls >= args.max_polls:
                break
            time.sleep(args.poll)
    except KeyboardInterrupt:
        pass  # normal way to leave --follow
    finally:
        if args.out:
            out.close()
    return EXIT_OK


# ------------------------------------------------------------------ demo

# CPU-local fault programs run pinned to core pairs; the others touch
# node-wide resources (memory, I/O), so their labels apply to every core.
_DEMO_PINS = {"ddot": "0,1", "dial": "2,3", "cpufreq": "1,2"}


def demo_genspec_text(span: int, seed: int) -> str:
    lines = [
        "# desk-scale demo: two benchmark apps plus the eight fault programs",
        f"time_span = {span}",
        f"seed = {seed}",
        "app_duration = normal(600, 60)",
        "app_interarrival = normal(900, 90)",
        "fault_duration = johnson_su(0, 2, 150, 30)",
        # k=0.9, alpha=2.1; lambda solves for a 120 s mean gap
        "fault_interarrival = exp_weibull(0.9, 72.20355694764153, 2.1)",
        "app_command = 1 ; ; python3 -m faultlab bench cpu --duration {duration}",
        "app_command = 1 ; ; python3 -m faultlab bench mem --duration {duration}",
    ]
    for prog in FAULT_PROGRAMS:
        cores = _DEMO_PINS.get(prog, "")
        extra = " --cache-mb 64" if prog == "ddot" else ""
        lines.append(
            f"fault_command = 1 ; {cores} ; "
            f"python3 -m faultlab fault {prog} --duration {{duration}}{extra}"
        )
    return "\n".join(lines) + "\n"


def run_demo_pipeline(out_dir: str, seed: int = DEMO_SEED, span: int = DEMO_SPAN,
                      labeling: str = "mode", trees: int = 30, folds: int = 5,
                      probe: bool = True, port: int = 0,
                      progress=lambda msg: None) -> dict:
    """The full demo: workload, optional live probe session, synthetic
    telemetry, features, cross-validation both ways, model, report.

    Returns a dict with the headline numbers and artifact paths; the CLI
    wrapper prints them. Kept importable so tests can run it in-process.
    """
    import numpy as np

    from .features import write_feature_set
    from .ml import RandomForest, cross_validate, pool_core_windows, save_model
    from .report import write_importance, write_report
    from .telemetry import write_simulated_session
    from .workloadgen import parse_genspec_text

    os.makedirs(out_dir, exist_ok=True)
    result: dict = {"out_dir": out_dir}

    progress("generating workload")
    spec_text = demo_genspec_text(span, seed)
    spec_path = os.path.join(out_dir, "genspec.txt")
    with open(spec_path, "w", encoding="utf-8") as fh:
        fh.write(spec_text)
    spec = parse_genspec_text(spec_text)
    workload = generate_workload(spec)
    probe_wl = generate_probe(spec)
    wl_path = os.path.join(out_dir, "workload.csv")
    probe_path = os.path.join(out_dir, "probe.csv")
    write_workload(workload, wl_path)
    write_workload(probe_wl, probe_path)
    result["workload"] = wl_path
    result["probe"] = probe_path
    result["tasks"] = len(workload)
    result["faults"] = sum(1 for t in workload.tasks if t.is_fault)

    if probe:
        progress("running probe session against a local engine "
                 f"(~{probe_wl.end_time}s of live fault injection)")
        result["probe_log"] = _run_probe_session(out_dir, probe_wl, port)

    progress("synthesizing telemetry for the full session")
    session_dir = os.path.join(out_dir, "session")
    sim = write_simulated_session(session_dir, workload, seed=seed)
    result["telemetry"] = sim.telemetry_dir
    result["execution_log"] = sim.log_path

    progress("building feature sets")
    sets = _build_sets(sim.telemetry_dir, sim.log_path, 60, 10, 30, False)
    feat_dir = os.path.join(out_dir, "features")
    os.makedirs(feat_dir, exist_ok=True)
    for view in sorted(sets):
        write_feature_set(sets[view], os.path.join(feat_dir, f"{view}.csv"))
    result["features"] = feat_dir

    progress("cross-validating (time-ordered and shuffled folds)")
    X, y, ends = pool_core_windows(sets, seed=seed, label=labeling)
    factory = lambda: RandomForest(n_trees=trees, seed=seed)
    results = {
        order: cross_validate(X, y, window_ends=ends, n_folds=folds,
                              order=order, seed=seed, model_factory=factory)
        for order in ("time", "shuffled")
    }
    result["macro_f"] = {o: r.macro_f for o, r in results.items()}
    result["rows"] = int(len(y))
    result["classes"] = sorted(set(y))

    progress("training the final model")
    Xt, yt, _ = pool_core_windows(sets, seed=seed, label=labeling, drop_ambiguous=True)
    forest = factory()
    forest.fit(Xt, yt)
    names = _core_feature_names(sets)
    model_path = os.path.join(out_dir, "model.json")
    save_model(model_path, forest, names, meta={
        "label": labeling, "drop_ambiguous": True, "n_trees": trees,
        "rows": int(len(yt)), "class_labels": sorted(set(yt)), "seed": seed,
    })
    result["model"] = model_path

    progress("writing the report")
    paths = write_report(out_dir, results)
    paths.update(write_importance(out_dir, names, forest.feature_importances()))
    result["report"] = paths
    return result


def _run_probe_session(out_dir: str, probe_wl, port: int) -> str:
    from .controller import run_session
    from .engine import InjectionEngine

    cfg = ToolConfig(listen_port=port, pool_size=4,
                     results_dir=os.path.join(out_dir, "engine-results"))
    eng = InjectionEngine(cfg, host="127.0.0.1")
    eng.start()
    try:
        summary = run_session(
            probe_wl,
            (f"127.0.0.1:{eng.port}",),
            log_dir=os.path.join(out_dir, "probe-logs"),
            session_id="demo-probe",
        )
    finally:
        eng.stop()
    if not summary.connected:
        raise FaultlabError(f"probe session failed: {summary.failed}")
    label = summary.connected[0]
    return summary.log_paths[label]


def cmd_demo(args) -> int:
    steps = []

    def progress(msg: str) -> None:
        steps.append(msg)
        print(f"[{len(steps)}] {msg}", flush=True)

    stage = "setup"
    try:
        stage = "pipeline"
        result = run_demo_pipeline(
            args.out, seed=args.seed, span=args.span, labeling=args.labeling,
            trees=args.trees, folds=args.folds, probe=not args.skip_probe,
            port=args.port, progress=progress,
        )
    except FaultlabError:
        raise
    except Exception as exc:
        raise FaultlabError(f"demo stage {stage!r} failed: {exc}") from exc
    print(f"workload: {result['tasks']} tasks ({result['faults']} faults) "
          f"-> {result['workload']}")
    if "probe_log" in result:
        print(f"probe log -> {result['probe_log']}")
    print(f"feature rows: {result['rows']} across {len(result['classes'])} classes")
    for order in ("time", "shuffled"):
        print(f"macro_f ({order}): {result['macro_f'][order]:.4f}")
    print(f"model -> {result['model']}")
    print(f"report -> {result['report']['summary']}")
    return EXIT_OK


# ----------------------------------------------------------------- wiring


def build_parser() -> _Parser:
    parser = _Parser(
        prog="faultlab",
        description="Fault injection orchestration and online fault classification.",
    )
    parser.add_argument("--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    def add(name: str, func, help_: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.set_defaults(func=func)
        return p

    p = add("engine", cmd_engine, "run the injection engine daemon")
    p.add_argument("--config", help="tool config file (or FAULTLAB_CONFIG)")
    p.add_argument("--host", default="0.0.0.0", help="bind address")
    p.add_argument("--port", type=int, default=None, help="listen port override")
    p.add_argument("--results-dir", default=None, help="results directory override")
    p.add_argument("--pool-size", type=int, default=None, help="worker pool size override")
    p.add_argument("--exact-duration", action="store_true",
                   help="respawn tasks that exit early until their window closes")

    p = add("controller", cmd_controller, "drive a workload against engines")
    p.add_argument("--workload", required=True, help="workload CSV")
    p.add_argument("--hosts", default=None, help="comma-separated host:port list")
    p.add_argument("--hosts-file", default=None, help="file with one host:port per line")
    p.add_argument("--config", help="tool config file (or FAULTLAB_CONFIG)")
    p.add_argument("--log-dir", default=".", help="execution log directory")
    p.add_argument("--session-id", default=None, help="session id (default: random)")
    p.add_argument("--lead-time", type=float, default=2.0,
                   help="seconds before start time a task is dispatched")
    p.add_argument("--connect-timeout", type=float, default=15.0,
                   help="seconds to wait for engine connections")
    p.add_argument("--companion", action="append", default=[],
                   help="companion command to run for the whole session (repeatable)")

    p = add("genwl", cmd_genwl, "generate workload and probe files")
    p.add_argument("--spec", required=True, help="genspec file")
    p.add_argument("--out", required=True, help="workload CSV to write")
    p.add_argument("--probe-out", default=None, help="probe workload CSV to write")
    p.add_argument("--seed", type=int, default=None, help="seed override")

    p = add("fault", cmd_fault, "run one fault program in the foreground")
    p.add_argument("program", choices=FAULT_PROGRAMS)
    p.add_argument("--duration", type=float, required=True, help="seconds to run")
    p.add_argument("--low", action="store_true", help="half-intensity variant")
    p.add_argument("--seed", type=int, default=None, help="rng seed")
    p.add_argument("--real", action="store_true",
                   help="touch real system knobs instead of simulating")
    p.add_argument("--i-have-root", action="store_true",
                   help="required opt-in for --real")
    p.add_argument("--cache-mb", type=int, default=None,
                   help="ddot working-set base size (default: detected LLC)")
    p.add_argument("--block-mb", type=int, default=None, help="leak block size")
    p.add_argument("--chunk-mb", type=int, default=None, help="memeater chunk size")
    p.add_argument("--file-mb", type=int, default=None, help="copy/ioerr file size")
    p.add_argument("--dir", default=None, help="working directory for file-based programs")
    p.add_argument("--sidechannel", default=None,
                   help="telemetry side-channel path (cpufreq)")

    p = add("bench", cmd_bench, "run one benchmark")
    p.add_argument("kind", choices=BENCHMARKS)
    p.add_argument("--duration", type=float, default=5.0, help="seconds to run")
    p.add_argument("--ops", type=int, default=None,
                   help="fixed operation count instead of fixed time")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.add_argument("--dir", default=None, help="working directory for the io benchmark")

    p = add("features", cmd_features, "build labeled feature sets from telemetry")
    p.add_argument("--telemetry", required=True, help="telemetry directory")
    p.add_argument("--log", default=None, help="execution log for labels and allocation")
    p.add_argument("--out", required=True, help="output directory for feature CSVs")
    _add_window_flags(p)

    p = add("train", cmd_train, "train a random forest on feature sets")
    p.add_argument("--features", required=True, help="feature CSV directory")
    p.add_argument("--model", required=True, help="model file to write")
    p.add_argument("--order", default="timestamp",
                   help="cross-validation fold order: timestamp or shuffled")
    p.add_argument("--folds", type=int, default=5, help="cross-validation folds")
    p.add_argument("--no-cv", action="store_true", help="skip cross-validation")
    _add_ml_flags(p)

    p = add("eval", cmd_eval, "cross-validate or score a model, write a report")
    p.add_argument("--features", required=True, help="feature CSV directory")
    p.add_argument("--model", default=None,
                   help="saved model to score (default: cross-validate fresh forests)")
    p.add_argument("--orders", default="timestamp,shuffled",
                   help="comma-separated fold orders for cross-validation")
    p.add_argument("--folds", type=int, default=5, help="cross-validation folds")
    p.add_argument("--report-dir", default=".", help="directory for report files")
    _add_ml_flags(p)

    p = add("detect", cmd_detect, "classify telemetry windows with a saved model")
    p.add_argument("--model", required=True, help="saved model file")
    p.add_argument("--telemetry", required=True, help="telemetry directory")
    p.add_argument("--log", default=None,
                   help="execution log (needed when the model uses allocated channels)")
    p.add_argument("--out", default=None, help="write diagnoses here instead of stdout")
    p.add_argument("--follow", action="store_true",
                   help="keep polling for new windows")
    p.add_argument("--poll", type=float, default=10.0, help="seconds between polls")
    p.add_argument("--max-polls", type=int, default=0,
                   help="stop after this many polls (0 = run until interrupted)")
    _add_window_flags(p)

    p = add("demo", cmd_demo, "end-to-end desk-scale run")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=DEMO_SEED, help="workload and model seed")
    p.add_argument("--span", type=int, default=DEMO_SPAN, help="session length, seconds")
    p.add_argument("--labeling", choices=("mode", "recent"), default="mode",
                   help="window labeling rule")
    p.add_argument("--trees", type=int, default=30, help="forest size")
    p.add_argument("--folds", type=int, default=5, help="cross-validation folds")
    p.add_argument("--skip-probe", action="store_true",
                   help="skip the live engine probe session")
    p.add_argument("--port", type=int, default=0,
                   help="probe engine port (0 = ephemeral)")

    return parser


def _add_window_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--window", type=int, default=60, help="aggregation window, seconds")
    p.add_argument("--step", type=int, default=10, help="window step, seconds")
    p.add_argument("--min-samples", type=int, default=30,
                   help="minimum telemetry samples per window")
    p.add_argument("--include-interrupts", action="store_true",
                   help="keep the procinterrupts plugin")


def _add_ml_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--trees", type=int, default=30, help="forest size")
    p.add_argument("--depth", type=int, default=20, help="max tree depth")
    p.add_argument("--min-leaf", type=int, default=1, help="min samples per leaf")
    p.add_argument("--seed", type=int, default=0, help="rng seed")
    p.add_argument("--label", choices=("mode", "recent"), default="mode",
                   help="window labeling rule")
    p.add_argument("--drop-ambiguous", action="store_true",
                   help="exclude ambiguous windows")


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.func(args)
    except FaultlabError as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"error: {_one_line(exc)}", file=sys.stderr)
        return EXIT_RUNTIME
    except KeyboardInterrupt:
        print("error: interrupted", file=sys.stderr)
        return EXIT_RUNTIME


def _one_line(exc: BaseException) -> str:
    return " ".join(str(exc).split()) or exc.__class__.__name__


if __name__ == "__main__":
    sys.exit(main())

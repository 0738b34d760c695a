"""Command-line entry point and run-directory management.

A run directory (``<project_dir>/<exp_name>/<run_name>/``) holds:

    manifest.json     run identity, written before training, immutable
    config.conf       fully resolved config, re-parseable and re-runnable
    vocab.txt         vocabulary (deterministic given the data)
    log.txt           human log with wall-clock timestamps
    metrics.events    append-only metric stream, one JSON object per line
    ckpt/...          per-phase latest/best checkpoints
    preds/...         prediction files for the splits in write_preds
    results.json      final evaluation metrics
    done              end marker; absent while running or halted

The metric stream deliberately carries no wall-clock field so that a
resumed run reproduces it byte for byte; timestamps live in log.txt.

Exit codes: 0 success, 1 runtime failure, 2 config/usage error, 3 halted
by --halt_after_steps (resume with --resume).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from dataclasses import dataclass

from . import __version__, confparse, corpus, model, pipeline, trainer
from . import tensor as T
from .confparse import ConfigError
from .corpus import CorpusError, TaskDescriptor
from .model import ModelError
from .trainer import HaltBudget, PhaseTrainer, TrainingError

__all__ = [
    "MetricEvent",
    "EventWriter",
    "read_events",
    "write_predictions",
    "main",
    "cli",
]

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_HALTED = 3

EVENTS_FILENAME = "metrics.events"


# ---------------------------------------------------------------------------
# Metric events


@dataclass(frozen=True)
class MetricEvent:
    phase: str
    step: int
    task: str
    metric: str
    value: float
    wall_time: float = 0.0  # in-memory only; never persisted (see module doc)


class EventWriter:
    """Append-only line-delimited event stream with a line counter, so
    checkpoints can record (and resume can restore) an exact position."""

    def __init__(self, path: str):
        self.path = path
        self.count = len(self._complete_lines())

    def _complete_lines(self) -> list[str]:
        if not os.path.isfile(self.path):
            return []
        with open(self.path, encoding="utf-8") as fh:
            content = fh.read()
        lines = content.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        elif lines:
            lines.pop()  # unterminated trailing junk from a crash
        return lines

    def emit(self, phase: str, step: int, task: str, metric: str, value: float) -> None:
        record = json.dumps(
            {"phase": phase, "step": step, "task": task, "metric": metric, "value": float(value)},
            sort_keys=True,
        )
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(record + "\n")
        self.count += 1

    def truncate_to(self, n: int) -> None:
        lines = self._complete_lines()
        keep = lines[: max(n, 0)]
        with open(self.path, "w", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in keep))
        self.count = len(keep)


def read_events(run_dir: str) -> list[MetricEvent]:
    """Events in write order; a corrupt trailing line (crash artifact) is
    skipped with a warning."""
    path = os.path.join(run_dir, EVENTS_FILENAME)
    out: list[MetricEvent] = []
    if not os.path.isfile(path):
        return out
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    for i, line in enumerate(lines):
        if not line:
            continue
        try:
            rec = json.loads(line)
            out.append(MetricEvent(rec["phase"], rec["step"], rec["task"], rec["metric"], rec["value"]))
        except (json.JSONDecodeError, KeyError):
            if i == len(lines) - 1 or (i == len(lines) - 2 and lines[-1] == ""):
                logging.getLogger("relay").warning("skipping corrupt trailing event line in %s", path)
            else:
                raise ValueError(f"{path}:{i + 1}: corrupt event record") from None
    return out


# ---------------------------------------------------------------------------
# Prediction files


def write_predictions(
    desc: TaskDescriptor,
    split: str,
    guids: list[str],
    predictions,
    scores,
    strict: bool,
    out_dir: str,
) -> str:
    """strict: benchmark-style TSV (``index<TAB>prediction``, labels as
    strings, regression at 3 decimals).  raw: JSON lines with guid,
    prediction, and per-class scores."""
    if len(predictions) != len(guids):
        raise TrainingError(
            f"{desc.name}/{split}: {len(predictions)} predictions for {len(guids)} examples"
        )
    os.makedirs(out_dir, exist_ok=True)
    if strict:
        path = os.path.join(out_dir, f"{desc.name}_{split}.tsv")
        lines = ["index\tprediction"]
        lines += [f"{i}\t{_render_prediction(desc, p)}" for i, p in enumerate(predictions)]
        payload = "\n".join(lines) + "\n"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(payload)
        return path
    path = os.path.join(out_dir, f"{desc.name}_{split}.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        for guid, pred, score in zip(guids, predictions, scores):
            rec = {"guid": guid, "prediction": _raw_prediction(desc, pred), "scores": score}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


def _render_prediction(desc: TaskDescriptor, pred) -> str:
    if desc.task_type == "regression":
        return f"{float(pred):.3f}"
    if desc.task_type == "multiple_choice":
        return str(int(pred))
    if desc.task_type == "tagging":
        return " ".join(desc.labels[t] for t in pred)
    return desc.labels[int(pred)]


def _raw_prediction(desc: TaskDescriptor, pred):
    if desc.task_type == "regression":
        return float(pred)
    if desc.task_type == "multiple_choice":
        return int(pred)
    if desc.task_type == "tagging":
        return [desc.labels[t] for t in pred]
    return desc.labels[int(pred)]


# ---------------------------------------------------------------------------
# CLI


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and argv[0] == "plot":
        return plot_main(argv[1:])
    if argv and argv[0] == "synth":
        return synth_main(argv[1:])
    parser = argparse.ArgumentParser(
        prog="relay",
        description="Run a config-driven multi-phase training experiment.",
    )
    parser.add_argument("--config_file", action="append", default=[], metavar="PATH",
                        help="config file; repeatable, later files win")
    parser.add_argument("--overrides", default="", metavar="FRAGMENT",
                        help='comma-separated "path = value" assignments, applied last')
    parser.add_argument("--force", action="store_true", help="wipe an existing run directory")
    parser.add_argument("--resume", action="store_true", help="continue from the latest checkpoints")
    parser.add_argument("--halt_after_steps", type=int, default=0, metavar="N",
                        help="gracefully halt after N optimizer steps (0 = never)")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    if not args.config_file:
        print("error: at least one --config_file is required", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG

    try:
        tree = confparse.ConfigTree()
        for path in args.config_file:
            tree = confparse.merge(tree, confparse.parse_file(path))
        if args.overrides:
            tree = confparse.merge(tree, confparse.parse_overrides(args.overrides))
        config_hash = hashlib.sha256(confparse.render(tree).encode("utf-8")).hexdigest()
        cfg = confparse.validate(tree)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        return _run_experiment(cfg, config_hash, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingError, CorpusError, ModelError, OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def cli() -> None:  # console_scripts hook
    sys.exit(main())


# ---------------------------------------------------------------------------
# Experiment orchestration


def _resolve_dirs(cfg) -> None:
    values = cfg._values
    if not values["project_dir"]:
        values["project_dir"] = os.environ.get("RELAY_PROJECT_DIR", "") or "."
    if not values["data_dir"]:
        values["data_dir"] = os.environ.get("RELAY_DATA_DIR", "") or "."
    if not values["cache_dir"]:
        values["cache_dir"] = os.path.join(values["project_dir"], "cache")


def _make_logger(run_dir: str) -> tuple[logging.Logger, logging.Handler]:
    logger = logging.getLogger(f"relay.run.{abs(hash(run_dir))}")
    logger.setLevel(logging.INFO)
    logger.propagate = False
    for h in list(logger.handlers):
        logger.removeHandler(h)
        h.close()
    handler = logging.FileHandler(os.path.join(run_dir, "log.txt"), encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logger.addHandler(handler)
    stream = logging.StreamHandler()
    stream.setFormatter(logging.Formatter("%(message)s"))
    logger.addHandler(stream)
    return logger, handler


def _run_experiment(cfg, config_hash: str, args) -> int:
    _resolve_dirs(cfg)
    run_dir = os.path.join(cfg.project_dir, cfg.exp_name, cfg.run_name)
    done_marker = os.path.join(run_dir, "done")

    if os.path.isdir(run_dir) and not args.resume:
        if not args.force:
            raise ConfigError(
                f"run directory {run_dir} already exists; pass --force to overwrite or --resume to continue"
            )
        shutil.rmtree(run_dir)
    os.makedirs(run_dir, exist_ok=True)

    if args.resume and os.path.isfile(done_marker):
        print(f"run {run_dir} already complete; nothing to resume")
        return EXIT_OK

    lock_path = os.path.join(run_dir, ".lock")
    try:
        lock_fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(
            f"run directory {run_dir} is locked ({lock_path}); another process owns it, "
            f"or a crashed run left the lock behind"
        ) from None
    os.write(lock_fd, str(os.getpid()).encode())
    os.close(lock_fd)

    logger, file_handler = _make_logger(run_dir)
    try:
        return _run_stages(cfg, config_hash, args, run_dir, logger)
    finally:
        logger.removeHandler(file_handler)
        file_handler.close()
        if os.path.exists(lock_path):
            os.unlink(lock_path)


def _run_stages(cfg, config_hash: str, args, run_dir: str, logger) -> int:
    log = logger.info
    manifest_path = os.path.join(run_dir, "manifest.json")
    if os.path.isfile(manifest_path):
        with open(manifest_path, encoding="utf-8") as fh:
            previous = json.load(fh)
        if previous.get("config_hash") != config_hash:
            raise ConfigError(
                "refusing to resume: config differs from the original run "
                f"(was {previous.get('config_hash', '?')[:12]}..., now {config_hash[:12]}...)"
            )
    else:
        manifest = {
            "exp_name": cfg.exp_name,
            "run_name": cfg.run_name,
            "schema_version": confparse.SCHEMA_VERSION,
            "tool_version": __version__,
            "seed": cfg.seed,
            "config_hash": config_hash,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "provenance": dict(sorted(cfg.tree.provenance.items())),
        }
        with open(manifest_path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    config_path = os.path.join(run_dir, "config.conf")
    if not os.path.isfile(config_path):
        with open(config_path, "w", encoding="utf-8") as fh:
            fh.write(cfg.render_resolved())

    log(f"run {cfg.exp_name}/{cfg.run_name} (seed {cfg.seed}, config {config_hash[:12]})")
    events = EventWriter(os.path.join(run_dir, EVENTS_FILENAME))
    rng = T.seed_rng(cfg.seed)
    halt = HaltBudget(args.halt_after_steps)

    # stage 2a: preprocessing (cached)
    registry = corpus.build_registry(cfg)
    task_names = list(dict.fromkeys([*cfg.pretrain_tasks, *cfg.target_tasks]))
    if not task_names:
        raise ConfigError("no tasks selected: set pretrain_tasks and/or target_tasks")
    vocab, datasets = pipeline.preprocess_all(registry, task_names, cfg, log)
    vocab.save(os.path.join(run_dir, "vocab.txt"))

    # stages 2b/2c: encoder and heads; the template keeps initial values
    template = model.build_assembly(cfg, vocab, [registry.get(n) for n in task_names], rng)
    n_params = sum(p.data.size for p in template.parameters().values())
    log(f"model: {n_params} parameters, encoder {cfg.sent_enc}, paradigm {cfg.transfer_paradigm}")

    training_events_count = 0
    phase1_best: str | None = None

    # stage 3: intermediate multitask phase
    if cfg.do_pretrain:
        phase1 = PhaseTrainer(
            template.copy(),
            [registry.get(n) for n in cfg.pretrain_tasks],
            datasets,
            cfg,
            "intermediate",
            run_dir,
            events,
            rng,
            config_hash,
            halt,
            log,
        )
        if phase1.run(resume=args.resume) == "halted":
            log("halted; resume with --resume")
            return EXIT_HALTED
        training_events_count = max(training_events_count, phase1.state.events_count)
        if not os.path.isfile(phase1.best_checkpoint_path()):
            raise TrainingError(f"intermediate phase left no best checkpoint at {phase1.best_checkpoint_path()}")
        phase1_best = phase1.best_checkpoint_path()

    # stage 4: per-task target phase on independent copies
    best_checkpoints: dict[str, str | None] = {}
    if cfg.do_target_task_training:
        for name in cfg.target_tasks:
            task_assembly = template.copy()
            if phase1_best:
                meta, records = trainer.load_checkpoint(phase1_best)
                task_assembly.load_parameters(
                    {k[len("param.") :]: v for k, v in records.items() if k.startswith("param.")}
                )
            phase2 = PhaseTrainer(
                task_assembly,
                [registry.get(name)],
                datasets,
                cfg,
                f"target:{name}",
                run_dir,
                events,
                rng,
                config_hash,
                halt,
                log,
            )
            if phase2.run(resume=args.resume) == "halted":
                log("halted; resume with --resume")
                return EXIT_HALTED
            training_events_count = max(training_events_count, phase2.state.events_count)
            best_checkpoints[name] = (
                phase2.best_checkpoint_path() if os.path.isfile(phase2.best_checkpoint_path()) else phase1_best
            )
    else:
        for name in cfg.target_tasks:
            best_checkpoints[name] = phase1_best

    # stage 5: evaluation and prediction files
    if cfg.do_full_eval:
        if not cfg.target_tasks:
            raise ConfigError("do_full_eval is set but target_tasks is empty")
        events.truncate_to(training_events_count)  # drop partial eval output from an interrupted run

        def writer(desc, split, guids, preds, scores):
            path = write_predictions(
                desc, split, guids, preds, scores,
                strict=cfg.write_strict_glue_format,
                out_dir=os.path.join(run_dir, "preds"),
            )
            log(f"[eval] wrote {path}")

        results = trainer.evaluate(
            template.copy(), cfg.target_tasks, registry, datasets, cfg, best_checkpoints, events,
            prediction_writer=writer, log=log, run_dir=run_dir,
        )
        with open(os.path.join(run_dir, "results.json"), "w", encoding="utf-8") as fh:
            json.dump(results, fh, indent=2, sort_keys=True)
            fh.write("\n")

    with open(os.path.join(run_dir, "done"), "w", encoding="utf-8") as fh:
        fh.write(time.strftime("%Y-%m-%dT%H:%M:%S%z") + "\n")
    log("run complete")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Synthetic data


def synth_main(argv) -> int:
    parser = argparse.ArgumentParser(
        prog="relay synth",
        description="Write a synthetic task suite (one task per supported type plus a transfer pair) "
                    "and a tasks.conf describing it.",
    )
    parser.add_argument("out_dir")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--train_size", type=int, default=64, help="per-type training examples")
    parser.add_argument("--intermediate_train", type=int, default=2048, help="transfer-pair source training size")
    parser.add_argument("--target_train", type=int, default=32, help="transfer-pair target training size")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    from .corpus import SyntheticParams, generate_synthetic_suite

    try:
        suite = generate_synthetic_suite(
            args.seed,
            SyntheticParams(
                out_dir=args.out_dir,
                train_size=args.train_size,
                intermediate_train=args.intermediate_train,
                target_train=args.target_train,
            ),
        )
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for name, desc in suite.tasks.items():
        print(f"{name}: {desc.task_type}")
    print(f"task definitions: {suite.tasks_conf_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Plotting


def plot_main(argv) -> int:
    parser = argparse.ArgumentParser(prog="relay plot", description="Render metric curves from a run directory.")
    parser.add_argument("run_dir")
    parser.add_argument("--out_dir", default="", help="default: <run_dir>/plots")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        events = read_events(args.run_dir)
    except (OSError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if not events:
        print(f"no events found under {args.run_dir}", file=sys.stderr)
        return EXIT_RUNTIME
    out_dir = args.out_dir or os.path.join(args.run_dir, "plots")
    os.makedirs(out_dir, exist_ok=True)

    with open(os.path.join(out_dir, "events.csv"), "w", encoding="utf-8") as fh:
        fh.write("phase,step,task,metric,value\n")
        for ev in events:
            fh.write(f"{ev.phase},{ev.step},{ev.task},{ev.metric},{ev.value!r}\n")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    by_metric: dict[str, dict[tuple[str, str], list[tuple[int, float]]]] = {}
    for ev in events:
        by_metric.setdefault(ev.metric, {}).setdefault((ev.phase, ev.task), []).append((ev.step, ev.value))
    for metric, series in sorted(by_metric.items()):
        fig, ax = plt.subplots(figsize=(7, 4))
        for (phase, task), points in sorted(series.items()):
            xs, ys = zip(*points)
            ax.plot(xs, ys, marker="o", markersize=3, label=f"{phase}/{task}")
        ax.set_xlabel("optimizer step")
        ax.set_ylabel(metric)
        ax.legend(fontsize=7)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        safe = metric.replace("/", "_")
        fig.savefig(os.path.join(out_dir, f"{safe}.png"), dpi=110)
        plt.close(fig)
    print(f"wrote {len(by_metric)} plots to {out_dir}")
    return EXIT_OK

"""Training control flow: multitask sampling, validation scheduling, early
stopping with LR-on-plateau decay, gradient accumulation, and
interruption-safe checkpointing for the two optional training phases.

Checkpoint layout: ``<run_dir>/ckpt/{intermediate,target_<task>}/
{latest,best}.ckpt`` plus ``.sha256`` sidecars.  A checkpoint is
self-contained: model parameters, optimizer slots, trainer state (counters,
batch cursors, RNG snapshot, event-stream position), and the config hash it
was trained under.  Resuming restores all of it, so a continued run is
bit-identical to an uninterrupted one.

Validation runs strictly every ``val_interval`` optimizer steps; a final
validation also runs at phase end when steps happened after the last
scheduled one, so short phases still record a best checkpoint.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from . import corpus, model
from . import tensor as T
from .confparse import ConfigError
from .corpus import TaskDescriptor

__all__ = [
    "TrainingError",
    "sampling_weights",
    "TaskSampler",
    "EarlyStopCounters",
    "TaskCursor",
    "TrainerState",
    "HaltBudget",
    "PhaseTrainer",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_dir",
    "run_task_eval",
    "evaluate",
]

CKPT_FORMAT_VERSION = 1
_CKPT_MAGIC = b"RLYCKPT1"


class TrainingError(Exception):
    pass


# ---------------------------------------------------------------------------
# Task sampling


def sampling_weights(method: str, tasks_info: list[tuple[str, int, int]]) -> dict[str, float]:
    """tasks_info rows are (name, n_train_examples, batch_size)."""
    if not tasks_info:
        raise TrainingError("cannot build a sampler over an empty task set")
    if method == "uniform":
        raw = {name: 1.0 for name, _, _ in tasks_info}
    elif method == "proportional_examples":
        raw = {name: float(n) for name, n, _ in tasks_info}
    elif method == "proportional_batches":
        raw = {name: float(math.ceil(n / bs)) for name, n, bs in tasks_info}
    else:
        raise TrainingError(f"unknown sampling method {method!r}")
    total = sum(raw.values())
    if total <= 0:
        raise TrainingError("sampling weights sum to zero")
    return {name: w / total for name, w in raw.items()}


class TaskSampler:
    """I.i.d. task draws per batch; weights renormalize over the still
    active tasks as others exhaust their epoch budget."""

    def __init__(self, weights: dict[str, float]):
        self.names = list(weights)
        self.weights = weights

    def draw(self, rng: T.RngState, active: list[str]) -> str:
        if not active:
            raise TrainingError("no active tasks to sample")
        probs = np.array([self.weights[name] for name in active], dtype=np.float64)
        probs /= probs.sum()
        return active[rng.choice(len(active), p=probs)]


# ---------------------------------------------------------------------------
# Early stopping counters


@dataclass
class EarlyStopCounters:
    patience: int
    lr_patience: int
    lr_decay: float
    min_lr: float
    max_vals: int
    lr: float
    best: float | None = None
    best_step: int = -1
    patience_ctr: int = 0
    lr_patience_ctr: int = 0
    val_count: int = 0

    def observe(self, value: float, step: int) -> tuple[bool, str | None]:
        """Record one validation outcome.  Returns (improved, stop_reason).
        Ties do not count as improvement."""
        self.val_count += 1
        improved = self.best is None or value > self.best
        if improved:
            self.best = value
            self.best_step = step
            self.patience_ctr = 0
            self.lr_patience_ctr = 0
        else:
            self.patience_ctr += 1
            self.lr_patience_ctr += 1
            if self.lr_patience_ctr >= self.lr_patience:
                self.lr *= self.lr_decay
                self.lr_patience_ctr = 0
        if self.patience_ctr >= self.patience:
            return improved, "patience"
        if self.val_count >= self.max_vals:
            return improved, "max_vals"
        if self.lr < self.min_lr:
            return improved, "lr_floor"
        return improved, None

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "patience", "lr_patience", "lr_decay", "min_lr", "max_vals", "lr",
            "best", "best_step", "patience_ctr", "lr_patience_ctr", "val_count")}

    @classmethod
    def from_dict(cls, d: dict) -> "EarlyStopCounters":
        return cls(**d)


# ---------------------------------------------------------------------------
# Batch cursors


class TaskCursor:
    """Cycles through one task's training examples, reshuffling each pass
    with the run RNG; exhausts after ``max_epochs`` full passes."""

    def __init__(self, n: int, batch_size: int, max_epochs: int, rng: T.RngState):
        self.n = n
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.order = [int(i) for i in rng.permutation(n)]
        self.pos = 0
        self.passes = 0
        self.exhausted = n == 0

    def next_batch(self, rng: T.RngState) -> list[int] | None:
        if self.exhausted:
            return None
        if self.pos >= self.n:
            self.passes += 1
            if self.passes >= self.max_epochs:
                self.exhausted = True
                return None
            self.order = [int(i) for i in rng.permutation(self.n)]
            self.pos = 0
        out = self.order[self.pos : self.pos + self.batch_size]
        self.pos += self.batch_size
        return out

    def to_dict(self) -> dict:
        return {"n": self.n, "batch_size": self.batch_size, "max_epochs": self.max_epochs,
                "order": self.order, "pos": self.pos, "passes": self.passes, "exhausted": self.exhausted}

    @classmethod
    def from_dict(cls, d: dict) -> "TaskCursor":
        cursor = cls.__new__(cls)
        cursor.n = d["n"]
        cursor.batch_size = d["batch_size"]
        cursor.max_epochs = d["max_epochs"]
        cursor.order = list(d["order"])
        cursor.pos = d["pos"]
        cursor.passes = d["passes"]
        cursor.exhausted = d["exhausted"]
        return cursor


# ---------------------------------------------------------------------------
# Trainer state and checkpoints


@dataclass
class TrainerState:
    phase: str
    stop: EarlyStopCounters
    global_step: int = 0
    task_steps: dict = field(default_factory=dict)  # task -> micro-batches consumed
    cursors: dict = field(default_factory=dict)  # task -> TaskCursor dict
    interval_loss_sum: float = 0.0
    interval_batches: int = 0
    last_val_step: int = 0
    rng_snapshot: dict | None = None
    events_count: int = 0
    completed: bool = False
    stop_reason: str = ""

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["stop"] = self.stop.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerState":
        d = dict(d)
        d["stop"] = EarlyStopCounters.from_dict(d["stop"])
        return cls(**d)


def checkpoint_dir(run_dir: str, phase: str) -> str:
    return os.path.join(run_dir, "ckpt", phase.replace(":", "_"))


def save_checkpoint(path: str, meta: dict, records: dict[str, np.ndarray]) -> None:
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    body = _CKPT_MAGIC + struct.pack("<I", len(meta_bytes)) + meta_bytes + T.serialize_records(records)
    payload = body + hashlib.sha256(body).digest()
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    digest = hashlib.sha256(payload).hexdigest()
    with open(path + ".sha256", "w", encoding="utf-8") as fh:
        fh.write(f"{digest}  {os.path.basename(path)}\n")


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        payload = fh.read()
    if len(payload) < 44:
        raise TrainingError(f"corrupt checkpoint {path}: truncated")
    body, digest = payload[:-32], payload[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise TrainingError(f"corrupt checkpoint {path}: checksum mismatch")
    if not body.startswith(_CKPT_MAGIC):
        raise TrainingError(f"corrupt checkpoint {path}: bad magic")
    (mlen,) = struct.unpack("<I", body[8:12])
    meta = json.loads(body[12 : 12 + mlen].decode("utf-8"))
    records = T.deserialize_records(body[12 + mlen :])
    return meta, records


# ---------------------------------------------------------------------------
# Halt hook (graceful interruption for preemptible environments and tests)


class HaltBudget:
    def __init__(self, max_steps: int = 0):
        self.remaining = max_steps if max_steps > 0 else None

    def tick(self) -> bool:
        """Count one optimizer step; True when it is time to halt."""
        if self.remaining is None:
            return False
        self.remaining -= 1
        return self.remaining <= 0


# ---------------------------------------------------------------------------
# Evaluation helpers (shared by validation and the final eval stage)


def run_task_eval(assembly: model.ModelAssembly, desc: TaskDescriptor, dataset, batch_size: int):
    """Deterministic pass over a dataset in file order.

    Returns (MetricReport | None, predictions, scores, guids); metrics are
    None when any target is missing (prediction-only splits).
    """
    preds: list = []
    scores: list = []
    golds: list = []
    have_targets = True
    for start in range(0, len(dataset.examples), batch_size):
        chunk = dataset.examples[start : start + batch_size]
        batch = model.make_batch(desc, chunk)
        _, p, s = assembly.forward(desc, batch, train=False)
        if desc.task_type == "tagging":
            preds.extend(p)
            scores.extend([None] * len(chunk))
            for ex in chunk:
                if ex.tags is None:
                    have_targets = False
                else:
                    golds.append(list(ex.tags))
        else:
            preds.extend(np.asarray(p).tolist())
            scores.extend(np.asarray(s).tolist())
            for ex in chunk:
                if ex.target is None:
                    have_targets = False
                else:
                    golds.append(ex.target)
    report = None
    if have_targets and golds:
        report = corpus.compute_metrics(desc, preds, golds)
    guids = [ex.guid for ex in dataset.examples]
    return report, preds, scores, guids


# ---------------------------------------------------------------------------
# Phase trainer


class PhaseTrainer:
    """One training phase: the multitask intermediate phase or a
    single-task target phase (same loop, task set of one)."""

    def __init__(
        self,
        assembly: model.ModelAssembly,
        descriptors: list[TaskDescriptor],
        datasets: dict,
        cfg,
        phase: str,
        run_dir: str,
        events,
        rng: T.RngState,
        config_hash: str,
        halt: HaltBudget | None = None,
        log=None,
    ):
        self.assembly = assembly
        self.descriptors = {d.name: d for d in descriptors}
        self.task_names = [d.name for d in descriptors]
        self.datasets = datasets
        self.cfg = cfg
        self.phase = phase
        self.run_dir = run_dir
        self.events = events
        self.rng = rng
        self.config_hash = config_hash
        self.halt = halt or HaltBudget(0)
        self.log = log or (lambda msg: None)

        self.settings = cfg.for_task(phase.split(":", 1)[1] if phase.startswith("target:") else None)
        self.sampler = TaskSampler(
            sampling_weights(
                cfg.task_sampling,
                [(n, len(datasets[(n, "train")].examples), cfg.for_task(n).batch_size) for n in self.task_names],
            )
        )
        self.optimizer = T.make_optimizer(
            cfg.optimizer,
            betas=(cfg.adam_beta1, cfg.adam_beta2),
            eps=cfg.adam_eps,
            weight_decay=self.settings.weight_decay,
            warmup_steps=self.settings.warmup_steps,
        )
        self.state: TrainerState | None = None
        self.cursors: dict[str, TaskCursor] = {}

    # -- checkpoint plumbing -------------------------------------------------

    def _ckpt_path(self, kind: str) -> str:
        return os.path.join(checkpoint_dir(self.run_dir, self.phase), f"{kind}.ckpt")

    def best_checkpoint_path(self) -> str:
        return self._ckpt_path("best")

    def _records(self) -> dict[str, np.ndarray]:
        records = {f"param.{k}": p.data for k, p in self.assembly.parameters().items()}
        slots = self.optimizer.state_dict()["slots"]
        for slot, values in slots.items():
            for name, arr in values.items():
                records[f"opt.{slot}.{name}"] = arr
        return records

    def _save(self, kind: str) -> None:
        self.state.rng_snapshot = self.rng.snapshot()
        self.state.events_count = self.events.count
        self.state.cursors = {n: c.to_dict() for n, c in self.cursors.items()}
        meta = {
            "format": CKPT_FORMAT_VERSION,
            "kind": kind,
            "phase": self.phase,
            "config_hash": self.config_hash,
            "trainer_state": self.state.to_dict(),
            "optimizer": {"kind": self.optimizer.kind, "step_count": self.optimizer.step_count},
        }
        save_checkpoint(self._ckpt_path(kind), meta, self._records())

    def _restore(self, meta: dict, records: dict[str, np.ndarray]) -> None:
        if meta["config_hash"] != self.config_hash:
            raise ConfigError(
                "refusing to resume: config snapshot hash mismatch "
                f"(checkpoint {meta['config_hash'][:12]}..., current {self.config_hash[:12]}...)"
            )
        params = {k[len("param.") :]: v for k, v in records.items() if k.startswith("param.")}
        self.assembly.load_parameters(params)
        slots: dict[str, dict[str, np.ndarray]] = {}
        for key, arr in records.items():
            if key.startswith("opt."):
                _, slot, name = key.split(".", 2)
                slots.setdefault(slot, {})[name] = arr
        self.optimizer.load_state_dict({"step_count": meta["optimizer"]["step_count"], "slots": slots})
        self.state = TrainerState.from_dict(meta["trainer_state"])
        self.cursors = {n: TaskCursor.from_dict(d) for n, d in self.state.cursors.items()}
        self.rng.restore(self.state.rng_snapshot)

    # -- the loop -------------------------------------------------------------

    def run(self, resume: bool = False) -> str:
        """Train to a stop condition.  Returns "completed" or "halted"."""
        latest = self._ckpt_path("latest")
        if resume and os.path.isfile(latest):
            meta, records = load_checkpoint(latest)
            self._restore(meta, records)
            if self.state.completed:
                # events written by later stages stay; nothing to replay
                self.log(f"[{self.phase}] already completed at step {self.state.global_step}; skipping")
                return "completed"
            # drop events emitted after this checkpoint; replay re-emits them
            self.events.truncate_to(self.state.events_count)
            self.log(f"[{self.phase}] resumed at step {self.state.global_step}")
        else:
            self.state = TrainerState(
                phase=self.phase,
                stop=EarlyStopCounters(
                    patience=self.settings.patience,
                    lr_patience=self.settings.lr_patience,
                    lr_decay=self.settings.lr_decay,
                    min_lr=self.settings.min_lr,
                    max_vals=self.settings.max_vals,
                    lr=self.settings.lr,
                ),
                task_steps={n: 0 for n in self.task_names},
            )
            for name in self.task_names:
                self.cursors[name] = TaskCursor(
                    n=len(self.datasets[(name, "train")].examples),
                    batch_size=self.cfg.for_task(name).batch_size,
                    max_epochs=self.cfg.for_task(name).max_epochs,
                    rng=self.rng,
                )
            # a step-0 checkpoint anchors event truncation if a crash lands
            # between an event write and the next checkpoint save
            self._save("latest")

        stop_reason = None
        while stop_reason is None:
            progressed = self._one_optimizer_step()
            if not progressed:
                stop_reason = "data_exhausted"
                break
            if self.halt.tick():
                self._save("latest")
                self.log(f"[{self.phase}] halted at step {self.state.global_step}")
                return "halted"
            if self.state.global_step % self.settings.val_interval == 0:
                stop_reason = self._validate()

        if self.state.global_step > self.state.last_val_step or self.state.stop.val_count == 0:
            # phase ended off the validation grid; score what we have
            self._validate(final=True)
        self.state.completed = True
        self.state.stop_reason = stop_reason
        self._save("latest")
        self.log(f"[{self.phase}] stopped ({stop_reason}) at step {self.state.global_step}, "
                 f"best {self.state.stop.best} at step {self.state.stop.best_step}")
        return "completed"

    def _active(self) -> list[str]:
        return [n for n in self.task_names if not self.cursors[n].exhausted]

    def _draw(self):
        while True:
            active = self._active()
            if not active:
                return None
            name = self.sampler.draw(self.rng, active)
            idx = self.cursors[name].next_batch(self.rng)
            if idx is None:
                continue
            desc = self.descriptors[name]
            examples = self.datasets[(name, "train")].examples
            return desc, model.make_batch(desc, [examples[i] for i in idx])

    def _one_optimizer_step(self) -> bool:
        k = self.settings.accumulation_steps
        self.assembly.zero_grad()
        done = 0
        for _ in range(k):
            drawn = self._draw()
            if drawn is None:
                break
            desc, batch = drawn
            loss, _, _ = self.assembly.forward(desc, batch, rng=self.rng, train=True, loss_scale=1.0 / k)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss ({value}) in task {desc.name!r} at step {self.state.global_step + 1} "
                    f"of phase {self.phase!r}"
                )
            T.backward(loss)
            self.state.task_steps[desc.name] += 1
            self.state.interval_loss_sum += value * k
            self.state.interval_batches += 1
            done += 1
        if done < k:
            # task pool emptied mid-group: drop the partial group
            self.assembly.zero_grad()
            return False
        self.optimizer.step(self.assembly.trainable_parameters(), lr=self.state.stop.lr)
        self.state.global_step += 1
        return True

    def _validate(self, final: bool = False) -> str | None:
        step = self.state.global_step
        rows: list[tuple[str, str, float]] = []
        primaries: list[float] = []
        for name in sorted(self.task_names):
            desc = self.descriptors[name]
            report, _, _, _ = run_task_eval(
                self.assembly, desc, self.datasets[(name, "val")], self.cfg.for_task(name).batch_size
            )
            primaries.append(report.primary_value)
            rows.extend((name, metric, value) for metric, value in report.values.items())
        aggregate = float(np.mean(primaries))
        mean_loss = self.state.interval_loss_sum / max(self.state.interval_batches, 1)
        rows.append(("aggregate", "lr", self.state.stop.lr))
        rows.append(("aggregate", "primary_mean", aggregate))
        rows.append(("aggregate", "train_loss", mean_loss))
        for task, metric, value in sorted(rows):
            self.events.emit(self.phase, step, task, metric, float(value))
        self.state.interval_loss_sum = 0.0
        self.state.interval_batches = 0
        self.state.last_val_step = step

        improved, stop_reason = self.state.stop.observe(aggregate, step)
        if improved:
            self._save("best")
        self.log(
            f"[{self.phase}] step {step}: aggregate {aggregate:.4f}"
            + (" (best)" if improved else f" (patience {self.state.stop.patience_ctr})")
        )
        if not final:
            self._save("latest")
        return stop_reason


# ---------------------------------------------------------------------------
# Final evaluation stage


def evaluate(
    base_assembly: model.ModelAssembly,
    target_tasks: list[str],
    registry,
    datasets: dict,
    cfg,
    best_checkpoints: dict[str, str | None],
    events,
    prediction_writer=None,
    log=None,
    run_dir: str | None = None,
) -> dict:
    """Load each task's best checkpoint, compute validation (and, when
    targets exist, test) metrics, and hand predictions to the writer for
    the splits selected by ``write_preds``."""
    say = log or (lambda msg: None)
    results: dict[str, dict] = {}
    rows: list[tuple[str, str, float]] = []
    for name in target_tasks:
        desc = registry.get(name)
        assembly = base_assembly.copy()
        ckpt = best_checkpoints.get(name)
        if ckpt:
            meta, records = load_checkpoint(ckpt)
            params = {k[len("param.") :]: v for k, v in records.items() if k.startswith("param.")}
            assembly.load_parameters(params)
        # run-dir-relative path keeps results comparable across machines
        ckpt_label = os.path.relpath(ckpt, run_dir) if ckpt and run_dir else (ckpt or "initial")
        task_result: dict = {"checkpoint": ckpt_label}
        batch_size = cfg.for_task(name).batch_size
        for split in ("val", "test"):
            if (name, split) not in datasets:
                continue
            report, preds, scores, guids = run_task_eval(assembly, desc, datasets[(name, split)], batch_size)
            if report is not None:
                task_result[split] = dict(sorted(report.values.items()))
                rows.extend((name, f"{split}/{metric}", float(v)) for metric, v in report.values.items())
            if prediction_writer is not None and split in cfg.write_preds:
                prediction_writer(desc, split, guids, preds, scores)
        results[name] = task_result
        say(f"[eval] {name}: " + json.dumps(task_result.get("val", {}), sort_keys=True))
    for task, metric, value in sorted(rows):  # events stay ordered by (task, metric)
        events.emit("eval", 0, task, metric, value)
    return results

"""Task registry, data loaders, per-task metrics, and synthetic task
generators.

Data formats:
  * classification / pair / regression: TSV, UTF-8, no header, columns
    ``text_a [text_b] target``; test files may omit the target column.
  * tagging: CoNLL style, one ``token<TAB>tag`` per line, blank line
    between sentences; test files may carry bare tokens.
  * multiple choice: JSON lines with ``guid``, ``context``, ``choices``
    (list of strings) and ``answer_idx``; test files may omit answer_idx.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, replace
from typing import Any, Sequence

import numpy as np
from scipy import stats as _scipy_stats
from sklearn import metrics as _skm

__all__ = [
    "CorpusError",
    "TaskDescriptor",
    "RawExample",
    "MetricReport",
    "TaskRegistry",
    "build_registry",
    "load_examples",
    "resolve_labels",
    "compute_metrics",
    "SyntheticParams",
    "SyntheticSuite",
    "generate_synthetic_suite",
    "TASK_TYPES",
    "PRIMARY_METRICS",
]

TASK_TYPES = (
    "single_classification",
    "pair_classification",
    "regression",
    "tagging",
    "multiple_choice",
)

PRIMARY_METRICS = {
    "single_classification": "accuracy",
    "pair_classification": "accuracy",
    "regression": "pearson",
    "tagging": "accuracy",
    "multiple_choice": "accuracy",
}


class CorpusError(Exception):
    pass


@dataclass
class TaskDescriptor:
    name: str
    task_type: str
    train_path: str
    val_path: str
    test_path: str | None = None
    labels: tuple[str, ...] | None = None  # classification labels or tag inventory
    num_choices: int | None = None
    head_key: str = ""

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise CorpusError(f"task {self.name!r}: unsupported task type {self.task_type!r}")
        if not self.head_key:
            self.head_key = self.name
        if self.num_choices is not None and self.num_choices < 2:
            raise CorpusError(f"task {self.name!r}: num_choices must be >= 2")
        if self.labels is not None:
            self.labels = tuple(self.labels)
            if self.task_type in ("single_classification", "pair_classification") and len(self.labels) < 2:
                raise CorpusError(f"task {self.name!r}: need at least 2 labels")

    @property
    def primary_metric(self) -> str:
        return PRIMARY_METRICS[self.task_type]

    @property
    def is_pair(self) -> bool:
        return self.task_type == "pair_classification"

    def path_for(self, split: str) -> str | None:
        return {"train": self.train_path, "val": self.val_path, "test": self.test_path}[split]

    def head_arity(self) -> int:
        if self.task_type == "regression":
            return 1
        if self.task_type == "multiple_choice":
            return int(self.num_choices)
        if self.labels is None:
            raise CorpusError(f"task {self.name!r}: label inventory not resolved yet")
        return len(self.labels)


@dataclass
class RawExample:
    guid: str
    text_a: str
    text_b: str | None = None
    choices: tuple[str, ...] | None = None
    target: Any = None  # label string | float | tuple of tag strings
    tokens_a: tuple[str, ...] | None = None  # pre-tokenized input (tagging)


@dataclass
class MetricReport:
    values: dict[str, float]
    primary: str

    @property
    def primary_value(self) -> float:
        return self.values[self.primary]


class TaskRegistry:
    """Name -> descriptor map, built once at startup, read-only after."""

    def __init__(self):
        self._tasks: dict[str, TaskDescriptor] = {}

    def register(self, descriptor: TaskDescriptor) -> TaskDescriptor:
        if descriptor.name in self._tasks:
            raise CorpusError(f"duplicate task name {descriptor.name!r}")
        self._tasks[descriptor.name] = descriptor
        return descriptor

    def get(self, name: str) -> TaskDescriptor:
        try:
            return self._tasks[name]
        except KeyError:
            raise CorpusError(f"unknown task {name!r}; registered: {sorted(self._tasks)}") from None

    def names(self) -> list[str]:
        return list(self._tasks)

    def __contains__(self, name: str) -> bool:
        return name in self._tasks

    def update(self, descriptor: TaskDescriptor) -> None:
        if descriptor.name not in self._tasks:
            raise CorpusError(f"unknown task {descriptor.name!r}")
        self._tasks[descriptor.name] = descriptor


def build_registry(cfg) -> TaskRegistry:
    """Registry from a validated config's task definitions."""
    registry = TaskRegistry()
    data_dir = cfg.data_dir or os.environ.get("RELAY_DATA_DIR", "") or "."
    for name, defn in cfg.tasks.items():
        registry.register(
            TaskDescriptor(
                name=name,
                task_type=defn["type"],
                train_path=os.path.join(data_dir, defn["train"]),
                val_path=os.path.join(data_dir, defn["val"]),
                test_path=os.path.join(data_dir, defn["test"]) if "test" in defn else None,
                labels=tuple(defn["labels"]) if "labels" in defn else None,
                num_choices=defn.get("num_choices"),
                head_key=defn["head_key"],
            )
        )
    return registry


# ---------------------------------------------------------------------------
# Loading


def load_examples(descriptor: TaskDescriptor, split: str) -> list[RawExample]:
    path = descriptor.path_for(split)
    if path is None:
        raise CorpusError(f"task {descriptor.name!r} has no {split} split configured")
    if not os.path.isfile(path):
        raise CorpusError(f"task {descriptor.name!r}: missing {split} file {path}")
    allow_unlabeled = split == "test"
    if descriptor.task_type == "tagging":
        return _load_conll(descriptor, path, split, allow_unlabeled)
    if descriptor.task_type == "multiple_choice":
        return _load_choices(descriptor, path, split, allow_unlabeled)
    return _load_tsv(descriptor, path, split, allow_unlabeled)


def _load_tsv(desc: TaskDescriptor, path: str, split: str, allow_unlabeled: bool) -> list[RawExample]:
    want = 3 if desc.is_pair else 2
    out: list[RawExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) == want - 1 and allow_unlabeled:
                cols = cols + [None]
            if len(cols) != want:
                raise CorpusError(f"{path}:{lineno}: expected {want} tab-separated columns, got {len(cols)}")
            target = cols[-1]
            if target is not None and desc.task_type == "regression":
                try:
                    target = float(target)
                except ValueError:
                    raise CorpusError(f"{path}:{lineno}: regression target {cols[-1]!r} is not a number") from None
                if not math.isfinite(target):
                    raise CorpusError(f"{path}:{lineno}: regression target must be finite")
            out.append(
                RawExample(
                    guid=f"{desc.name}-{split}-{len(out)}",
                    text_a=cols[0],
                    text_b=cols[1] if desc.is_pair else None,
                    target=target,
                )
            )
    return out


def _load_conll(desc: TaskDescriptor, path: str, split: str, allow_unlabeled: bool) -> list[RawExample]:
    out: list[RawExample] = []
    tokens: list[str] = []
    tags: list[str] = []

    def flush(lineno):
        if not tokens:
            return
        if tags and len(tags) != len(tokens):
            raise CorpusError(f"{path}:{lineno}: {len(tags)} tags for {len(tokens)} tokens")
        out.append(
            RawExample(
                guid=f"{desc.name}-{split}-{len(out)}",
                text_a=" ".join(tokens),
                tokens_a=tuple(tokens),
                target=tuple(tags) if tags else None,
            )
        )
        tokens.clear()
        tags.clear()

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                flush(lineno)
                continue
            cols = line.split("\t")
            if len(cols) == 1 and allow_unlabeled:
                if tags:
                    raise CorpusError(f"{path}:{lineno}: mixed labeled and unlabeled lines in one sentence")
                tokens.append(cols[0])
            elif len(cols) == 2:
                if tokens and not tags:
                    raise CorpusError(f"{path}:{lineno}: mixed labeled and unlabeled lines in one sentence")
                tokens.append(cols[0])
                tags.append(cols[1])
            else:
                raise CorpusError(f"{path}:{lineno}: expected 'token<TAB>tag', got {line!r}")
        flush(lineno="EOF")
    return out


def _load_choices(desc: TaskDescriptor, path: str, split: str, allow_unlabeled: bool) -> list[RawExample]:
    out: list[RawExample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: bad JSON record: {exc}") from None
            for fieldname in ("guid", "context", "choices"):
                if fieldname not in rec:
                    raise CorpusError(f"{path}:{lineno}: missing field {fieldname!r}")
            choices = rec["choices"]
            if not isinstance(choices, list) or not all(isinstance(c, str) for c in choices):
                raise CorpusError(f"{path}:{lineno}: 'choices' must be a list of strings")
            if desc.num_choices is not None and len(choices) != desc.num_choices:
                raise CorpusError(f"{path}:{lineno}: expected {desc.num_choices} choices, got {len(choices)}")
            answer = rec.get("answer_idx")
            if answer is None and not allow_unlabeled:
                raise CorpusError(f"{path}:{lineno}: missing field 'answer_idx'")
            if answer is not None:
                if not isinstance(answer, int) or not (0 <= answer < len(choices)):
                    raise CorpusError(f"{path}:{lineno}: answer_idx {answer!r} out of range")
            out.append(
                RawExample(
                    guid=str(rec["guid"]),
                    text_a=rec["context"],
                    choices=tuple(choices),
                    target=answer,
                )
            )
    return out


def resolve_labels(descriptor: TaskDescriptor, train_examples: Sequence[RawExample]) -> TaskDescriptor:
    """Fill in the label inventory from training data when the config did
    not pin one.  Returns an updated descriptor."""
    if descriptor.task_type in ("regression", "multiple_choice"):
        return descriptor
    if descriptor.labels is not None:
        return descriptor
    seen: set[str] = set()
    for ex in train_examples:
        if descriptor.task_type == "tagging":
            seen.update(ex.target or ())
        elif ex.target is not None:
            seen.add(ex.target)
    if len(seen) < 2:
        raise CorpusError(f"task {descriptor.name!r}: fewer than 2 distinct labels in training data")
    return replace(descriptor, labels=tuple(sorted(seen)))


# ---------------------------------------------------------------------------
# Metrics


def _check_lengths(predictions, golds):
    if len(predictions) != len(golds):
        raise CorpusError(f"predictions ({len(predictions)}) and golds ({len(golds)}) differ in length")
    if len(predictions) == 0:
        raise CorpusError("cannot compute metrics on empty input")


def compute_metrics(descriptor: TaskDescriptor, predictions, golds) -> MetricReport:
    """Per-task metrics.  Classification: accuracy (+ mcc, macro F1);
    regression: pearson (+ spearman, mse); tagging and multiple choice:
    accuracy.  The primary metric drives early stopping."""
    _check_lengths(predictions, golds)
    ttype = descriptor.task_type
    if ttype in ("single_classification", "pair_classification"):
        pred = np.asarray(predictions)
        gold = np.asarray(golds)
        values = {
            "accuracy": float(_skm.accuracy_score(gold, pred)),
            "mcc": _safe_mcc(gold, pred),
            "f1_macro": float(_skm.f1_score(gold, pred, average="macro", zero_division=0)),
        }
    elif ttype == "multiple_choice":
        pred = np.asarray(predictions)
        gold = np.asarray(golds)
        values = {"accuracy": float(_skm.accuracy_score(gold, pred))}
    elif ttype == "tagging":
        flat_pred: list[int] = []
        flat_gold: list[int] = []
        for p, g in zip(predictions, golds):
            if len(p) != len(g):
                raise CorpusError("tag sequence length mismatch between prediction and gold")
            flat_pred.extend(p)
            flat_gold.extend(g)
        if not flat_gold:
            raise CorpusError("cannot compute metrics on empty input")
        values = {"accuracy": float(np.mean(np.asarray(flat_pred) == np.asarray(flat_gold)))}
    elif ttype == "regression":
        pred = np.asarray(predictions, dtype=np.float64)
        gold = np.asarray(golds, dtype=np.float64)
        values = {
            "pearson": _safe_corr(_scipy_stats.pearsonr, pred, gold),
            "spearman": _safe_corr(_scipy_stats.spearmanr, pred, gold),
            "mse": float(np.mean((pred - gold) ** 2)),
        }
    else:  # pragma: no cover
        raise CorpusError(f"unsupported task type {ttype!r}")
    return MetricReport(values=values, primary=descriptor.primary_metric)


def _safe_mcc(gold, pred) -> float:
    # a zero marginal makes the denominator undefined; report 0 like common
    # benchmark scorers
    if len(set(gold.tolist())) < 2 or len(set(pred.tolist())) < 2:
        return 0.0
    return float(_skm.matthews_corrcoef(gold, pred))


def _safe_corr(fn, pred, gold) -> float:
    if pred.size < 2 or np.std(pred) == 0 or np.std(gold) == 0:
        return 0.0
    r = fn(pred, gold)
    value = float(r.statistic if hasattr(r, "statistic") else r[0])
    return 0.0 if math.isnan(value) else value


# ---------------------------------------------------------------------------
# Synthetic tasks
#
# All tasks share one word inventory: "trigger" words carry the signal and
# plain words are noise.  Rules are deterministic functions of the text, so
# the best attainable accuracy is 1.0 by construction.


@dataclass
class SyntheticParams:
    out_dir: str
    vocab_size: int = 100  # noise words
    num_triggers: int = 24  # split evenly into two polarity groups
    seq_len: tuple[int, int] = (6, 12)
    train_size: int = 64
    val_size: int = 64
    test_size: int = 64
    intermediate_train: int = 2048
    intermediate_val: int = 256
    target_train: int = 32
    target_val: int = 256
    target_test: int = 64


@dataclass
class SyntheticSuite:
    tasks: dict[str, TaskDescriptor]
    tasks_conf_path: str
    trigger_words: tuple[str, ...]
    pos_triggers: tuple[str, ...]
    neg_triggers: tuple[str, ...]
    params: SyntheticParams

    def trigger_presence_label(self, text: str) -> str:
        """The latent rule shared by the transfer pair."""
        toks = set(text.split())
        return "yes" if toks & set(self.trigger_words) else "no"


def _noise_words(params: SyntheticParams) -> list[str]:
    return [f"w{i:03d}" for i in range(params.vocab_size)]


def _trigger_words(params: SyntheticParams) -> list[str]:
    return [f"trig{i:02d}" for i in range(params.num_triggers)]


def _sentence(rng, words, length) -> list[str]:
    return [words[int(rng.integers(0, len(words)))] for _ in range(length)]


def _length(rng, params) -> int:
    lo, hi = params.seq_len
    return int(rng.integers(lo, hi + 1))


def generate_synthetic_suite(seed: int, params: SyntheticParams) -> SyntheticSuite:
    """Deterministically write data files plus a tasks.conf for one task of
    each supported type and a transfer pair (large intermediate task, small
    target task, same latent rule).  Same seed, same params => byte
    identical files."""
    rng = np.random.default_rng(np.random.PCG64(seed))
    os.makedirs(params.out_dir, exist_ok=True)
    noise = _noise_words(params)
    triggers = _trigger_words(params)
    half = len(triggers) // 2
    pos, neg = triggers[:half], triggers[half:]

    files: dict[str, list[str]] = {}

    def emit(fname: str, lines: list[str]) -> None:
        files[fname] = lines
        with open(os.path.join(params.out_dir, fname), "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + ("\n" if lines else ""))

    # --- single classification: which polarity group is present ------------
    def cls_example():
        toks = _sentence(rng, noise, _length(rng, params))
        group = int(rng.integers(0, 3))
        if group == 0:
            label = "neutral"
        else:
            word = (pos if group == 1 else neg)[int(rng.integers(0, half))]
            toks[int(rng.integers(0, len(toks)))] = word
            label = "positive" if group == 1 else "negative"
        return " ".join(toks), label

    for split, n in (("train", params.train_size), ("val", params.val_size), ("test", params.test_size)):
        emit(f"syn_cls.{split}.tsv", ["\t".join(cls_example()) for _ in range(n)])

    # --- pair classification: do both sides carry the same polarity? -------
    def pair_example():
        same = bool(rng.integers(0, 2))
        ga = int(rng.integers(0, 2))
        gb = ga if same else 1 - ga
        side = []
        for g in (ga, gb):
            toks = _sentence(rng, noise, _length(rng, params))
            toks[int(rng.integers(0, len(toks)))] = (pos if g == 0 else neg)[int(rng.integers(0, half))]
            side.append(" ".join(toks))
        return side[0], side[1], "match" if same else "mismatch"

    for split, n in (("train", params.train_size), ("val", params.val_size), ("test", params.test_size)):
        emit(f"syn_pair.{split}.tsv", ["\t".join(pair_example()) for _ in range(n)])

    # --- regression: fraction of trigger tokens ----------------------------
    def reg_example():
        toks = _sentence(rng, noise, _length(rng, params))
        k = int(rng.integers(0, len(toks) + 1))
        for i in range(k):
            toks[i] = triggers[int(rng.integers(0, len(triggers)))]
        value = k / len(toks)
        return " ".join(toks), f"{value:.6f}"

    for split, n in (("train", params.train_size), ("val", params.val_size), ("test", params.test_size)):
        emit(f"syn_reg.{split}.tsv", ["\t".join(reg_example()) for _ in range(n)])

    # --- tagging: tag determined by the token's lexical class --------------
    def tag_sentence():
        toks = _sentence(rng, noise, _length(rng, params))
        for i in range(len(toks)):
            r = rng.random()
            if r < 0.2:
                toks[i] = triggers[int(rng.integers(0, len(triggers)))]
            elif r < 0.3:
                toks[i] = f"num{int(rng.integers(0, 10))}"
        tags = ["T" if t.startswith("trig") else "D" if t.startswith("num") else "O" for t in toks]
        return ["\t".join(pair) for pair in zip(toks, tags)]

    for split, n in (("train", params.train_size), ("val", params.val_size), ("test", params.test_size)):
        blocks = []
        for _ in range(n):
            blocks.extend(tag_sentence())
            blocks.append("")
        emit(f"syn_tag.{split}.conll", blocks[:-1] if blocks else [])

    # --- multiple choice: pick the choice that carries a trigger -----------
    def mc_example(i, split):
        context = " ".join(_sentence(rng, noise, _length(rng, params)))
        answer = int(rng.integers(0, 4))
        choices = []
        for c in range(4):
            toks = _sentence(rng, noise, _length(rng, params))
            if c == answer:
                toks[int(rng.integers(0, len(toks)))] = triggers[int(rng.integers(0, len(triggers)))]
            choices.append(" ".join(toks))
        return json.dumps(
            {"guid": f"syn_mc-{split}-{i}", "context": context, "choices": choices, "answer_idx": answer},
            sort_keys=True,
        )

    for split, n in (("train", params.train_size), ("val", params.val_size), ("test", params.test_size)):
        emit(f"syn_mc.{split}.jsonl", [mc_example(i, split) for i in range(n)])

    # --- transfer pair: label = presence of any trigger word ---------------
    def presence_example():
        toks = _sentence(rng, noise, _length(rng, params))
        if bool(rng.integers(0, 2)):
            toks[int(rng.integers(0, len(toks)))] = triggers[int(rng.integers(0, len(triggers)))]
            label = "yes"
        else:
            label = "no"
        return " ".join(toks), label

    for split, n in (("train", params.intermediate_train), ("val", params.intermediate_val)):
        emit(f"trans_src.{split}.tsv", ["\t".join(presence_example()) for _ in range(n)])
    for split, n in (("train", params.target_train), ("val", params.target_val), ("test", params.target_test)):
        emit(f"trans_tgt.{split}.tsv", ["\t".join(presence_example()) for _ in range(n)])

    defs = {
        "syn_cls": ("single_classification", "tsv", ["neutral", "positive", "negative"], None),
        "syn_pair": ("pair_classification", "tsv", ["match", "mismatch"], None),
        "syn_reg": ("regression", "tsv", None, None),
        "syn_tag": ("tagging", "conll", ["D", "O", "T"], None),
        "syn_mc": ("multiple_choice", "jsonl", None, 4),
        "trans_src": ("single_classification", "tsv", ["no", "yes"], None),
        "trans_tgt": ("single_classification", "tsv", ["no", "yes"], None),
    }
    conf_lines = ["tasks {"]
    tasks: dict[str, TaskDescriptor] = {}
    for name, (ttype, ext, labels, num_choices) in defs.items():
        fields = [f'type = {ttype}', f'train = "{name}.train.{ext}"', f'val = "{name}.val.{ext}"']
        if f"{name}.test.{ext}" in files:
            fields.append(f'test = "{name}.test.{ext}"')
        if labels:
            fields.append("labels = [" + ", ".join(f'"{x}"' for x in labels) + "]")
        if num_choices:
            fields.append(f"num_choices = {num_choices}")
        conf_lines.append(f"  {name} {{ " + ", ".join(fields) + " }")
        tasks[name] = TaskDescriptor(
            name=name,
            task_type=ttype,
            train_path=os.path.join(params.out_dir, f"{name}.train.{ext}"),
            val_path=os.path.join(params.out_dir, f"{name}.val.{ext}"),
            test_path=os.path.join(params.out_dir, f"{name}.test.{ext}") if f"{name}.test.{ext}" in files else None,
            labels=tuple(labels) if labels else None,
            num_choices=num_choices,
        )
    conf_lines.append("}")
    conf_path = os.path.join(params.out_dir, "tasks.conf")
    with open(conf_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(conf_lines) + "\n")

    return SyntheticSuite(
        tasks=tasks,
        tasks_conf_path=conf_path,
        trigger_words=tuple(triggers),
        pos_triggers=tuple(pos),
        neg_triggers=tuple(neg),
        params=params,
    )

"""Experiment configuration language: a small HOCON-style dialect with file
includes, deep merging, command-line override fragments, and schema
validation.

Grammar (informal):

    document := (include | entry)*          separated by newlines or commas
    include  := 'include' QUOTED_STRING     top level only
    entry    := keypath ('=' value | object)
    keypath  := key ('.' key)*              dotted paths create nesting
    value    := object | list | QUOTED_STRING | number | bool | unquoted
    object   := '{' document '}'            no includes inside objects
    list     := '[' (value (',' value)* ','?)? ']'

``//`` and ``#`` start line comments.  Unquoted strings run to the next
newline, comma, ``}``, ``]`` or comment start and are stripped of
surrounding whitespace, so entries sharing a line need a comma between
them.  A numeric token containing ``.`` or an exponent parses as a float
(``.00001`` is 1e-05), otherwise as an integer.  Duplicate keys inside one
document merge the way overlay files do: objects merge recursively,
anything else is replaced by the later value.
"""

from __future__ import annotations

import copy
import os
import re
from dataclasses import dataclass, field
from types import SimpleNamespace
from typing import Any, Iterator

__all__ = [
    "ConfigError",
    "ConfigTree",
    "RunConfig",
    "parse_config",
    "parse_file",
    "parse_overrides",
    "merge",
    "render",
    "trees_equal",
    "validate",
    "EXPERIMENT_SCHEMA",
    "TASK_OVERRIDE_KEYS",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1

_KEY_RE = re.compile(r"[A-Za-z0-9_\-]+")
_INT_RE = re.compile(r"^[+-]?[0-9]+$")
_FLOAT_RE = re.compile(r"^[+-]?(?:[0-9]+\.[0-9]*|\.[0-9]+|[0-9]+)(?:[eE][+-]?[0-9]+)?$")


class ConfigError(Exception):
    """Raised for syntax, composition, and validation problems."""

    def __init__(self, message: str, source: str | None = None, line: int | None = None, col: int | None = None):
        self.message = message
        self.source = source
        self.line = line
        self.col = col
        loc = ""
        if source is not None:
            loc = source
            if line is not None:
                loc += f":{line}"
                if col is not None:
                    loc += f":{col}"
            loc += ": "
        super().__init__(loc + message)


@dataclass
class ConfigTree:
    """Nested key/value structure plus per-leaf provenance.

    ``root`` is a plain nested dict; ``provenance`` maps dotted leaf paths
    to the label of the source (file path or "<override>") that last set
    them.
    """

    root: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def get(self, path: str, default: Any = ...) -> Any:
        node: Any = self.root
        for part in path.split("."):
            if isinstance(node, dict) and part in node:
                node = node[part]
            else:
                if default is ...:
                    raise KeyError(path)
                return default
        return node

    def leaves(self) -> Iterator[tuple[str, Any]]:
        yield from _iter_leaves(self.root, "")

    def is_empty(self) -> bool:
        return not self.root


def _iter_leaves(node: Any, prefix: str) -> Iterator[tuple[str, Any]]:
    if isinstance(node, dict) and node:
        for k, v in node.items():
            yield from _iter_leaves(v, f"{prefix}{k}.")
    else:
        if prefix:
            yield prefix[:-1], node


def trees_equal(a: ConfigTree | dict, b: ConfigTree | dict) -> bool:
    """Type-strict structural equality, ignoring provenance."""
    ra = a.root if isinstance(a, ConfigTree) else a
    rb = b.root if isinstance(b, ConfigTree) else b
    return _values_equal(ra, rb)


def _values_equal(x: Any, y: Any) -> bool:
    if type(x) is not type(y):
        return False
    if isinstance(x, dict):
        return x.keys() == y.keys() and all(_values_equal(x[k], y[k]) for k in x)
    if isinstance(x, list):
        return len(x) == len(y) and all(_values_equal(a, b) for a, b in zip(x, y))
    return x == y


# ---------------------------------------------------------------------------
# Parsing


class _Scanner:
    def __init__(self, text: str, source: str):
        self.text = text
        self.source = source
        self.i = 0
        self.line = 1
        self.col = 1

    def eof(self) -> bool:
        return self.i >= len(self.text)

    def peek(self, n: int = 1) -> str:
        return self.text[self.i : self.i + n]

    def advance(self, n: int = 1) -> str:
        out = self.text[self.i : self.i + n]
        for ch in out:
            if ch == "\n":
                self.line += 1
                self.col = 1
            else:
                self.col += 1
        self.i += n
        return out

    def error(self, msg: str) -> ConfigError:
        return ConfigError(msg, source=self.source, line=self.line, col=self.col)

    def at_comment(self) -> bool:
        return self.peek() == "#" or self.peek(2) == "//"

    def skip_inline_ws(self) -> None:
        while not self.eof() and self.peek() in " \t\r":
            self.advance()

    def skip_to_eol(self) -> None:
        while not self.eof() and self.peek() != "\n":
            self.advance()

    def skip_layout(self, commas: bool = True) -> None:
        """Skip whitespace, newlines, comments and (optionally) commas."""
        while not self.eof():
            ch = self.peek()
            if ch in " \t\r\n" or (commas and ch == ","):
                self.advance()
            elif self.at_comment():
                self.skip_to_eol()
            else:
                return


class _Parser:
    def __init__(self, scanner: _Scanner, base_dir: str | None, include_stack: tuple[str, ...]):
        self.s = scanner
        self.base_dir = base_dir
        self.include_stack = include_stack

    # -- document / object bodies ------------------------------------------

    def parse_document(self) -> ConfigTree:
        tree = ConfigTree()
        s = self.s
        while True:
            s.skip_layout()
            if s.eof():
                return tree
            if s.peek() == "}":
                raise s.error("unexpected '}'")
            tree = merge(tree, self._parse_top_item())

    def _parse_top_item(self) -> ConfigTree:
        s = self.s
        key = self._parse_key()
        s.skip_inline_ws()
        if key == "include" and s.peek() == '"':
            return self._parse_include()
        return self._parse_entry_rest([key])

    def _parse_entry_rest(self, path: list[str]) -> ConfigTree:
        s = self.s
        while s.peek() == ".":
            s.advance()
            path.append(self._parse_key())
            s.skip_inline_ws()
        if s.peek() == "=":
            s.advance()
            s.skip_inline_ws()
            value = self._parse_value()
        elif s.peek() == "{":
            value = self._parse_object()
        else:
            raise s.error(f"expected '=' or '{{' after key {'.'.join(path)!r}")
        root: dict = {}
        node = root
        for part in path[:-1]:
            node[part] = {}
            node = node[part]
        node[path[-1]] = value
        prov = {p: self.s.source for p, _ in _iter_leaves(root, "")}
        return ConfigTree(root, prov)

    def _parse_include(self) -> ConfigTree:
        s = self.s
        rel = self._parse_quoted()
        if self.base_dir is None:
            raise s.error("include directives are not allowed in this context")
        path = os.path.normpath(os.path.join(self.base_dir, rel))
        real = os.path.realpath(path)
        if real in self.include_stack:
            chain = " -> ".join(self.include_stack + (real,))
            raise s.error(f"include cycle: {chain}")
        if not os.path.isfile(path):
            raise s.error(f"missing include file: {path}")
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        sub = _Parser(
            _Scanner(text, path),
            os.path.dirname(path),
            self.include_stack + (real,),
        )
        return sub.parse_document()

    def _parse_key(self) -> str:
        s = self.s
        if s.peek() == '"':
            return self._parse_quoted()
        m = _KEY_RE.match(s.text, s.i)
        if not m:
            raise s.error(f"expected a key, found {s.peek()!r}")
        s.advance(m.end() - s.i)
        return m.group(0)

    # -- values -------------------------------------------------------------

    def _parse_value(self) -> Any:
        s = self.s
        ch = s.peek()
        if ch == "{":
            return self._parse_object()
        if ch == "[":
            return self._parse_list()
        if ch == '"':
            return self._parse_quoted()
        return self._parse_unquoted()

    def _parse_object(self) -> dict:
        s = self.s
        if s.advance() != "{":
            raise s.error("expected '{'")
        out: dict = {}
        while True:
            s.skip_layout()
            if s.eof():
                raise s.error("unterminated object, expected '}'")
            if s.peek() == "}":
                s.advance()
                return out
            key = self._parse_key()
            s.skip_inline_ws()
            if key == "include" and s.peek() == '"':
                raise s.error("include is only allowed at the top level")
            sub = self._parse_entry_rest([key])
            out = _merge_values(out, sub.root)

    def _parse_list(self) -> list:
        s = self.s
        if s.advance() != "[":
            raise s.error("expected '['")
        items: list = []
        while True:
            s.skip_layout(commas=False)
            if s.eof():
                raise s.error("unterminated list, expected ']'")
            if s.peek() == "]":
                s.advance()
                return items
            items.append(self._parse_value())
            s.skip_layout(commas=False)
            if s.peek() == ",":
                s.advance()
            elif s.peek() != "]":
                raise s.error("expected ',' or ']' in list")

    def _parse_quoted(self) -> str:
        s = self.s
        if s.advance() != '"':
            raise s.error("expected '\"'")
        out: list[str] = []
        while True:
            if s.eof():
                raise s.error("unterminated string")
            ch = s.advance()
            if ch == '"':
                return "".join(out)
            if ch == "\n":
                raise s.error("newline in quoted string")
            if ch == "\\":
                esc = s.advance()
                if esc == "u":
                    hexs = s.advance(4)
                    if len(hexs) != 4:
                        raise s.error("bad \\u escape")
                    try:
                        out.append(chr(int(hexs, 16)))
                    except ValueError:
                        raise s.error("bad \\u escape") from None
                elif esc in _ESCAPES:
                    out.append(_ESCAPES[esc])
                else:
                    raise s.error(f"unknown escape \\{esc}")
            else:
                out.append(ch)

    def _parse_unquoted(self) -> Any:
        s = self.s
        chars: list[str] = []
        while not s.eof():
            ch = s.peek()
            if ch in "\n,}]" or s.at_comment():
                break
            chars.append(s.advance())
        raw = "".join(chars).strip()
        if not raw:
            raise s.error("expected a value")
        if raw == "true":
            return True
        if raw == "false":
            return False
        if _INT_RE.match(raw):
            return int(raw)
        if _FLOAT_RE.match(raw) and ("." in raw or "e" in raw or "E" in raw):
            return float(raw)
        return raw


_ESCAPES = {'"': '"', "\\": "\\", "/": "/", "n": "\n", "t": "\t", "r": "\r", "b": "\b", "f": "\f"}


def parse_config(text: str, base_dir: str | None = None, source: str = "<string>") -> ConfigTree:
    """Parse a config document; ``base_dir`` resolves include directives."""
    parser = _Parser(_Scanner(text, source), base_dir, ())
    return parser.parse_document()


def parse_file(path: str) -> ConfigTree:
    real = os.path.realpath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}", source=str(path)) from exc
    parser = _Parser(_Scanner(text, str(path)), os.path.dirname(path) or ".", (real,))
    return parser.parse_document()


# ---------------------------------------------------------------------------
# Merging and overrides


def _merge_values(base: Any, overlay: Any) -> Any:
    if isinstance(base, dict) and isinstance(overlay, dict):
        out = dict(base)
        for k, v in overlay.items():
            out[k] = _merge_values(out[k], v) if k in out else copy.deepcopy(v)
        return out
    return copy.deepcopy(overlay)


def merge(base: ConfigTree, overlay: ConfigTree) -> ConfigTree:
    """Deep merge: objects merge recursively, anything else is replaced by
    the overlay.  Neither input is mutated; overlay provenance wins."""
    root = _merge_values(base.root, overlay.root)
    overlay_leaves = {p for p, _ in overlay.leaves()}
    prov = {}
    for path, _ in _iter_leaves(root, ""):
        if path in overlay_leaves:
            prov[path] = overlay.provenance.get(path, "<unknown>")
        else:
            prov[path] = base.provenance.get(path, "<unknown>")
    return ConfigTree(root, prov)


def parse_overrides(fragment: str, source: str = "<override>") -> ConfigTree:
    """Parse a comma- or newline-separated sequence of ``path = value``
    assignments into a tree."""
    tree = ConfigTree()
    for piece in _split_assignments(fragment):
        if "=" not in piece and not piece.rstrip().endswith("}"):
            raise ConfigError(f"malformed override (missing '='): {piece.strip()!r}", source=source)
        if piece.lstrip().startswith("="):
            raise ConfigError(f"override with empty path: {piece.strip()!r}", source=source)
        sub = parse_config(piece, base_dir=None, source=source)
        tree = merge(tree, sub)
    return tree


def _split_assignments(fragment: str) -> list[str]:
    pieces = []
    buf: list[str] = []
    depth = 0
    quoted = False
    i = 0
    while i < len(fragment):
        ch = fragment[i]
        if quoted:
            buf.append(ch)
            if ch == "\\" and i + 1 < len(fragment):
                buf.append(fragment[i + 1])
                i += 1
            elif ch == '"':
                quoted = False
        elif ch == '"':
            quoted = True
            buf.append(ch)
        elif ch in "[{":
            depth += 1
            buf.append(ch)
        elif ch in "]}":
            depth -= 1
            buf.append(ch)
        elif (ch == "," or ch == "\n") and depth == 0:
            pieces.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
        i += 1
    pieces.append("".join(buf))
    return [p for p in pieces if p.strip()]


# ---------------------------------------------------------------------------
# Rendering


def render(tree: ConfigTree | dict) -> str:
    root = tree.root if isinstance(tree, ConfigTree) else tree
    lines: list[str] = []
    _render_body(root, lines, 0)
    return "\n".join(lines) + ("\n" if lines else "")


def _render_body(obj: dict, lines: list[str], indent: int) -> None:
    pad = "  " * indent
    for key, value in obj.items():
        rkey = key if _KEY_RE.fullmatch(key) else _quote(key)
        if isinstance(value, dict):
            lines.append(f"{pad}{rkey} {{")
            _render_body(value, lines, indent + 1)
            lines.append(f"{pad}}}")
        else:
            lines.append(f"{pad}{rkey} = {_render_value(value)}")


def _render_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return _quote(value)
    if isinstance(value, list):
        return "[" + ", ".join(_render_value(v) for v in value) + "]"
    if isinstance(value, dict):
        inner: list[str] = []
        _render_body(value, inner, 0)
        return "{" + ", ".join(s.strip() for s in inner) + "}"
    raise ConfigError(f"cannot render value of type {type(value).__name__}")


def _quote(s: str) -> str:
    out = ['"']
    for ch in s:
        if ch == '"':
            out.append('\\"')
        elif ch == "\\":
            out.append("\\\\")
        elif ch == "\n":
            out.append("\\n")
        elif ch == "\t":
            out.append("\\t")
        elif ch == "\r":
            out.append("\\r")
        else:
            out.append(ch)
    out.append('"')
    return "".join(out)


# ---------------------------------------------------------------------------
# Schema and validation


@dataclass(frozen=True)
class SchemaEntry:
    typ: str  # str | int | float | flag | enum | tasklist | float01
    default: Any = None
    required: bool = False
    choices: tuple = ()
    minimum: float | None = None


TASK_TYPES = (
    "single_classification",
    "pair_classification",
    "regression",
    "tagging",
    "multiple_choice",
)

# Keys a per-task block (top-level block named after a registered task) may
# override.  They apply to that task's target-phase training loop, and
# batch_size / max_epochs also shape its batches in the multitask phase.
TASK_OVERRIDE_KEYS = (
    "val_interval",
    "max_epochs",
    "batch_size",
    "patience",
    "max_vals",
    "lr",
    "min_lr",
    "lr_patience",
    "lr_decay",
    "accumulation_steps",
    "warmup_steps",
    "weight_decay",
)

EXPERIMENT_SCHEMA: dict[str, SchemaEntry] = {
    # run identity and directories
    "exp_name": SchemaEntry("str", required=True),
    "run_name": SchemaEntry("str", "run"),
    "project_dir": SchemaEntry("str", ""),  # empty -> $RELAY_PROJECT_DIR or cwd
    "data_dir": SchemaEntry("str", ""),  # empty -> $RELAY_DATA_DIR or cwd
    "cache_dir": SchemaEntry("str", ""),  # empty -> <project_dir>/cache
    "seed": SchemaEntry("int", 1234, minimum=0),
    # phases
    "do_pretrain": SchemaEntry("flag", False),
    "do_target_task_training": SchemaEntry("flag", True),
    "do_full_eval": SchemaEntry("flag", True),
    "pretrain_tasks": SchemaEntry("tasklist", []),
    "target_tasks": SchemaEntry("tasklist", []),
    # preprocessing
    "max_seq_len": SchemaEntry("int", 256, minimum=3),
    "max_vocab_size": SchemaEntry("int", 20000, minimum=1),
    # model
    "input_module": SchemaEntry("enum", "random_embeddings", choices=("random_embeddings", "embedding_file")),
    "embedding_file": SchemaEntry("str", ""),
    "embedding_dim": SchemaEntry("int", 32, minimum=1),
    "sent_enc": SchemaEntry("enum", "bow_ff", choices=("none", "bow_ff", "rnn")),
    "hidden_dim": SchemaEntry("int", 32, minimum=1),
    "bidirectional": SchemaEntry("flag", True),
    "pooling": SchemaEntry("enum", "mean", choices=("mean", "max", "first")),
    "classifier": SchemaEntry("enum", "log_reg", choices=("log_reg",)),
    "dropout": SchemaEntry("float01", 0.0),
    "transfer_paradigm": SchemaEntry("enum", "finetune", choices=("finetune", "frozen")),
    # optimization
    "optimizer": SchemaEntry("enum", "adamw", choices=("sgd", "adamw", "bert_adam")),
    "lr": SchemaEntry("float", 0.003, minimum=1e-300),
    "weight_decay": SchemaEntry("float", 0.0, minimum=0.0),
    "warmup_steps": SchemaEntry("int", 0, minimum=0),
    "adam_beta1": SchemaEntry("float01", 0.9),
    "adam_beta2": SchemaEntry("float01", 0.999),
    "adam_eps": SchemaEntry("float", 1e-8, minimum=0.0),
    "batch_size": SchemaEntry("int", 16, minimum=1),
    "accumulation_steps": SchemaEntry("int", 1, minimum=1),
    # training control
    "val_interval": SchemaEntry("int", 100, minimum=1),
    "max_vals": SchemaEntry("int", 100, minimum=1),
    "patience": SchemaEntry("int", 20, minimum=1),
    "lr_patience": SchemaEntry("int", 4, minimum=1),
    "lr_decay": SchemaEntry("float", 0.5, minimum=1e-9),
    "min_lr": SchemaEntry("float", 1e-7, minimum=0.0),
    "max_epochs": SchemaEntry("int", 10000, minimum=1),
    "task_sampling": SchemaEntry(
        "enum", "proportional_examples", choices=("uniform", "proportional_examples", "proportional_batches")
    ),
    "halt_after_steps": SchemaEntry("int", 0, minimum=0),  # 0 = never; graceful-halt hook
    # outputs
    "write_preds": SchemaEntry("str", ""),
    "write_strict_glue_format": SchemaEntry("flag", False),
}

# Keys we recognise from wider configs but deliberately do not support;
# rejecting them beats silently ignoring them.
REJECTED_KEYS = {
    "sep_embs_for_skip": "per-task skip embeddings are not supported",
    "s2s": "sequence-to-sequence heads are not supported",
    "transformers_output_mode": "pretrained transformer encoders are not supported",
}

_RESERVED_TOP = set(EXPERIMENT_SCHEMA) | set(REJECTED_KEYS) | {"tasks"}
_TASK_NAME_RE = re.compile(r"^[a-z][a-z0-9_]*$")

_TASK_DEF_KEYS = {"type", "train", "val", "test", "labels", "num_choices", "head_key"}


class RunConfig:
    """Typed view of a validated config, consumed by every other module."""

    def __init__(self, values: dict, tasks: dict, task_overrides: dict, tree: ConfigTree):
        self._values = values
        self.tasks = tasks
        self.task_overrides = task_overrides
        self.tree = tree

    def __getattr__(self, name: str) -> Any:
        try:
            return self._values[name]
        except KeyError:
            raise AttributeError(name) from None

    def get(self, name: str, default: Any = None) -> Any:
        return self._values.get(name, default)

    def for_task(self, name: str | None) -> SimpleNamespace:
        """Training settings: globals overridden by the named task's config
        block; plain globals when name is None."""
        ns = {k: self._values[k] for k in TASK_OVERRIDE_KEYS}
        if name is not None:
            ns.update(self.task_overrides.get(name, {}))
        return SimpleNamespace(**ns)

    def resolved_root(self) -> dict:
        root: dict = dict(self._values)
        root["pretrain_tasks"] = list(self.pretrain_tasks)
        root["target_tasks"] = list(self.target_tasks)
        root["write_preds"] = ",".join(self.write_preds)
        if self.tasks:
            root["tasks"] = {name: dict(defn) for name, defn in self.tasks.items()}
        for name, block in self.task_overrides.items():
            root[name] = dict(block)
        return root

    def render_resolved(self) -> str:
        return render(self.resolved_root())


def _check_type(key: str, entry: SchemaEntry, value: Any) -> Any:
    if entry.typ == "flag":
        if isinstance(value, bool):
            return value
        if isinstance(value, int) and value in (0, 1):
            return bool(value)
        raise ConfigError(f"key {key!r}: expected a flag (true/false or 0/1), got {value!r}")
    if entry.typ == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"key {key!r}: expected an integer, got {value!r}")
    elif entry.typ in ("float", "float01"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"key {key!r}: expected a number, got {value!r}")
        value = float(value)
        if entry.typ == "float01" and not (0.0 <= value < 1.0):
            raise ConfigError(f"key {key!r}: expected a value in [0, 1), got {value!r}")
    elif entry.typ == "str":
        if not isinstance(value, str):
            raise ConfigError(f"key {key!r}: expected a string, got {value!r}")
    elif entry.typ == "enum":
        if not isinstance(value, str) or value not in entry.choices:
            raise ConfigError(f"key {key!r}: expected one of {sorted(entry.choices)}, got {value!r}")
    elif entry.typ == "tasklist":
        if isinstance(value, str):
            value = [t.strip() for t in value.split(",") if t.strip()]
        elif isinstance(value, list) and all(isinstance(t, str) for t in value):
            value = list(value)
        else:
            raise ConfigError(f"key {key!r}: expected a task list, got {value!r}")
    else:  # pragma: no cover - schema table bug
        raise AssertionError(f"unknown schema type {entry.typ}")
    if entry.minimum is not None and value < entry.minimum:
        raise ConfigError(f"key {key!r}: value {value!r} below minimum {entry.minimum}")
    return value


def _validate_task_def(name: str, defn: Any) -> dict:
    if not isinstance(defn, dict):
        raise ConfigError(f"task {name!r}: definition must be an object")
    unknown = set(defn) - _TASK_DEF_KEYS
    if unknown:
        raise ConfigError(f"task {name!r}: unknown fields {sorted(unknown)}")
    if "type" not in defn:
        raise ConfigError(f"task {name!r}: missing required field 'type'")
    ttype = defn["type"]
    if ttype not in TASK_TYPES:
        raise ConfigError(f"task {name!r}: unsupported task type {ttype!r} (supported: {', '.join(TASK_TYPES)})")
    out: dict = {"type": ttype}
    for split in ("train", "val", "test"):
        if split in defn:
            if not isinstance(defn[split], str) or not defn[split]:
                raise ConfigError(f"task {name!r}: field {split!r} must be a non-empty path string")
            out[split] = defn[split]
    for split in ("train", "val"):
        if split not in out:
            raise ConfigError(f"task {name!r}: missing required field {split!r}")
    labels = defn.get("labels")
    if labels is not None:
        if not isinstance(labels, list) or not all(isinstance(x, str) for x in labels):
            raise ConfigError(f"task {name!r}: 'labels' must be a list of strings")
        if ttype in ("single_classification", "pair_classification") and len(labels) < 2:
            raise ConfigError(f"task {name!r}: classification needs at least 2 labels")
        if len(set(labels)) != len(labels):
            raise ConfigError(f"task {name!r}: duplicate labels")
        out["labels"] = list(labels)
    if ttype == "multiple_choice":
        n = defn.get("num_choices")
        if isinstance(n, bool) or not isinstance(n, int) or n < 2:
            raise ConfigError(f"task {name!r}: multiple_choice needs integer num_choices >= 2")
        out["num_choices"] = n
    elif "num_choices" in defn:
        raise ConfigError(f"task {name!r}: num_choices only applies to multiple_choice tasks")
    head_key = defn.get("head_key", name)
    if not isinstance(head_key, str) or not head_key:
        raise ConfigError(f"task {name!r}: head_key must be a non-empty string")
    out["head_key"] = head_key
    return out


def validate(tree: ConfigTree, schema: dict[str, SchemaEntry] | None = None) -> RunConfig:
    """Check a fully merged tree against the schema, fill defaults, and
    return a typed view.

    Unknown top-level keys are rejected unless they name a task declared in
    the ``tasks`` block, in which case they are per-task override blocks.
    """
    schema = schema or EXPERIMENT_SCHEMA
    root = tree.root
    if not isinstance(root, dict):
        raise ConfigError("top level of a config must be an object")

    for key, why in REJECTED_KEYS.items():
        if key in root:
            raise ConfigError(f"key {key!r} is not supported: {why}")

    tasks: dict[str, dict] = {}
    raw_tasks = root.get("tasks", {})
    if not isinstance(raw_tasks, dict):
        raise ConfigError("'tasks' must be an object of task definitions")
    for name, defn in raw_tasks.items():
        if not _TASK_NAME_RE.match(name):
            raise ConfigError(f"invalid task name {name!r} (lowercase letters, digits, underscores)")
        if name in _RESERVED_TOP:
            raise ConfigError(f"task name {name!r} collides with a reserved config key")
        tasks[name] = _validate_task_def(name, defn)

    values: dict[str, Any] = {}
    for key, entry in schema.items():
        if key in root:
            values[key] = _check_type(key, entry, root[key])
        elif entry.required:
            raise ConfigError(f"missing required key {key}")
        else:
            values[key] = copy.deepcopy(entry.default)

    task_overrides: dict[str, dict] = {}
    for key, value in root.items():
        if key in schema or key in ("tasks",):
            continue
        if key in tasks:
            if not isinstance(value, dict):
                raise ConfigError(f"per-task block {key!r} must be an object")
            block: dict = {}
            for okey, oval in value.items():
                if okey not in TASK_OVERRIDE_KEYS:
                    raise ConfigError(f"per-task block {key!r}: key {okey!r} cannot be overridden per task")
                block[okey] = _check_type(f"{key}.{okey}", schema[okey], oval)
            task_overrides[key] = block
        else:
            raise ConfigError(f"unknown key {key!r} (not a schema key or a registered task name)")

    for listkey in ("pretrain_tasks", "target_tasks"):
        for tname in values[listkey]:
            if tname not in tasks:
                raise ConfigError(f"{listkey} names unknown task {tname!r}")
    if values["do_pretrain"] and not values["pretrain_tasks"]:
        raise ConfigError("do_pretrain is set but pretrain_tasks is empty")
    if values["do_target_task_training"] and not values["target_tasks"]:
        raise ConfigError("do_target_task_training is set but target_tasks is empty")
    if values["input_module"] == "embedding_file" and not values["embedding_file"]:
        raise ConfigError("input_module = embedding_file requires the embedding_file key")

    splits = [s.strip() for s in values["write_preds"].split(",") if s.strip()]
    for s in splits:
        if s not in ("val", "test"):
            raise ConfigError(f"write_preds: unknown split {s!r} (use val, test)")
    values["write_preds"] = splits

    return RunConfig(values, tasks, task_overrides, tree)

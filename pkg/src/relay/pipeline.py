"""Tokenization, vocabulary construction, integer indexing, and a
fingerprinted preprocessing cache.

Tokenizer rule (version ``ws-punct-1``): lowercase, split on whitespace,
then detach every non-alphanumeric character as its own token.  Tagging
tasks arrive pre-tokenized and keep their token boundaries (lowercased),
so tags stay aligned one per token.

Cache layout: ``<cache_dir>/<fingerprint>.idx`` holds a versioned,
checksummed binary record; ``<fingerprint>.meta`` lists the fingerprint
inputs as readable text.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import re
import struct
import tempfile
from dataclasses import dataclass, field

from . import corpus
from .corpus import CorpusError, RawExample, TaskDescriptor

__all__ = [
    "TOKENIZER_VERSION",
    "CACHE_FORMAT_VERSION",
    "PAD", "UNK", "CLS", "SEP",
    "tokenize",
    "Vocabulary",
    "build_vocab",
    "IndexedExample",
    "IndexedDataset",
    "index_dataset",
    "compute_fingerprint",
    "cache_store",
    "cache_load",
    "preprocess_all",
]

TOKENIZER_VERSION = "ws-punct-1"
CACHE_FORMAT_VERSION = 1

PAD, UNK, CLS, SEP = 0, 1, 2, 3
_SPECIALS = ("<pad>", "<unk>", "<cls>", "<sep>")

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, whitespace-split, punctuation detached as single-char
    tokens."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Frequency-ranked token inventory with fixed special slots."""

    def __init__(self, tokens: list[str]):
        self.itos: list[str] = list(_SPECIALS) + list(tokens)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def index(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def content_hash(self) -> str:
        payload = "\n".join(self.itos).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()

    def save(self, path: str) -> None:
        _atomic_write(path, ("\n".join(self.itos) + "\n").encode("utf-8"))

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        with open(path, encoding="utf-8") as fh:
            items = fh.read().splitlines()
        if items[: len(_SPECIALS)] != list(_SPECIALS):
            raise ValueError(f"vocabulary file {path} missing special tokens")
        return cls(items[len(_SPECIALS) :])


def build_vocab(token_streams, max_size: int) -> Vocabulary:
    """Rank tokens by frequency (ties broken lexicographically), truncate
    to ``max_size``, and prepend the special tokens."""
    counts: dict[str, int] = {}
    total = 0
    for stream in token_streams:
        for tok in stream:
            counts[tok] = counts.get(tok, 0) + 1
            total += 1
    if total == 0:
        raise ValueError("cannot build a vocabulary from empty corpora")
    ranked = sorted(counts, key=lambda t: (-counts[t], t))
    return Vocabulary(ranked[:max_size])


# ---------------------------------------------------------------------------
# Indexing


@dataclass(frozen=True)
class IndexedExample:
    guid: str
    seqs: tuple[tuple[int, ...], ...]  # one per text field / per choice
    tags: tuple[int, ...] | None = None
    target: int | float | None = None


@dataclass
class IndexedDataset:
    task: str
    split: str
    task_type: str
    labels: tuple[str, ...] | None
    max_seq_len: int
    fingerprint: str
    examples: list[IndexedExample] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)


def _index_field(tokens: list[str], vocab: Vocabulary, max_seq_len: int) -> tuple[int, ...]:
    body = tokens[: max_seq_len - 2]
    return (CLS, *(vocab.index(t) for t in body), SEP)


def example_tokens(ex: RawExample) -> list[list[str]]:
    """Token lists per text field, honoring pre-tokenized input."""
    if ex.tokens_a is not None:
        fields = [[t.lower() for t in ex.tokens_a]]
    else:
        fields = [tokenize(ex.text_a)]
    if ex.text_b is not None:
        fields.append(tokenize(ex.text_b))
    if ex.choices is not None:
        fields.extend(tokenize(c) for c in ex.choices)
    return fields


def index_dataset(
    descriptor: TaskDescriptor,
    examples: list[RawExample],
    vocab: Vocabulary,
    max_seq_len: int,
    split: str,
    fingerprint: str = "",
) -> IndexedDataset:
    """Each text field becomes [CLS] tokens [SEP] truncated from the right
    to max_seq_len; OOV maps to UNK; tag tails drop with their tokens."""
    if max_seq_len < 3:
        raise ValueError("max_seq_len must be at least 3")
    if descriptor.task_type != "regression" and descriptor.labels is None and descriptor.task_type != "multiple_choice":
        raise CorpusError(f"task {descriptor.name!r}: labels must be resolved before indexing")
    label_index = {lab: i for i, lab in enumerate(descriptor.labels or ())}
    out = IndexedDataset(
        task=descriptor.name,
        split=split,
        task_type=descriptor.task_type,
        labels=descriptor.labels,
        max_seq_len=max_seq_len,
        fingerprint=fingerprint,
    )
    for ex in examples:
        fields = example_tokens(ex)
        seqs = tuple(_index_field(f, vocab, max_seq_len) for f in fields)
        tags = None
        target: int | float | None = None
        if descriptor.task_type == "tagging":
            if ex.target is not None:
                if len(ex.target) != len(fields[0]):
                    raise CorpusError(
                        f"task {descriptor.name!r}: {len(ex.target)} tags for {len(fields[0])} tokens in {ex.guid}"
                    )
                kept = len(seqs[0]) - 2  # tags follow token truncation
                try:
                    tags = tuple(label_index[t] for t in ex.target[:kept])
                except KeyError as exc:
                    raise CorpusError(f"task {descriptor.name!r}: unknown tag {exc.args[0]!r} in {ex.guid}") from None
        elif descriptor.task_type == "regression":
            target = float(ex.target) if ex.target is not None else None
        elif descriptor.task_type == "multiple_choice":
            target = int(ex.target) if ex.target is not None else None
        else:
            if ex.target is not None:
                if ex.target not in label_index:
                    raise CorpusError(f"task {descriptor.name!r}: unknown label {ex.target!r} in {ex.guid}")
                target = label_index[ex.target]
        out.examples.append(IndexedExample(guid=ex.guid, seqs=seqs, tags=tags, target=target))
    return out


# ---------------------------------------------------------------------------
# Fingerprints and cache


def _file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def compute_fingerprint(
    descriptor: TaskDescriptor,
    split: str,
    vocab: Vocabulary,
    max_seq_len: int,
    tokenizer_version: str | None = None,
) -> tuple[str, dict]:
    """Hash of everything that shapes an indexed dataset; any input change
    must change the fingerprint."""
    path = descriptor.path_for(split)
    inputs = {
        "task": descriptor.name,
        "split": split,
        "raw_sha256": _file_sha256(path),
        "tokenizer_version": tokenizer_version or TOKENIZER_VERSION,
        "vocab_sha256": vocab.content_hash(),
        "max_seq_len": max_seq_len,
        "labels": list(descriptor.labels) if descriptor.labels else None,
        "cache_format": CACHE_FORMAT_VERSION,
    }
    digest = hashlib.sha256(json.dumps(inputs, sort_keys=True).encode("utf-8")).hexdigest()
    return digest, inputs


def _atomic_write(path: str, payload: bytes) -> None:
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_dataset(ds: IndexedDataset) -> bytes:
    buf = io.BytesIO()
    meta = {
        "format": CACHE_FORMAT_VERSION,
        "task": ds.task,
        "split": ds.split,
        "task_type": ds.task_type,
        "labels": list(ds.labels) if ds.labels else None,
        "max_seq_len": ds.max_seq_len,
        "fingerprint": ds.fingerprint,
        "count": len(ds.examples),
    }
    mb = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(b"RLYIDX01")
    buf.write(struct.pack("<I", len(mb)))
    buf.write(mb)
    for ex in ds.examples:
        gb = ex.guid.encode("utf-8")
        buf.write(struct.pack("<H", len(gb)))
        buf.write(gb)
        buf.write(struct.pack("<H", len(ex.seqs)))
        for seq in ex.seqs:
            buf.write(struct.pack("<I", len(seq)))
            buf.write(struct.pack(f"<{len(seq)}i", *seq))
        if ex.tags is None:
            buf.write(struct.pack("<i", -1))
        else:
            buf.write(struct.pack("<i", len(ex.tags)))
            buf.write(struct.pack(f"<{len(ex.tags)}i", *ex.tags))
        if ex.target is None:
            buf.write(b"n")
        elif isinstance(ex.target, int):
            buf.write(b"i")
            buf.write(struct.pack("<q", ex.target))
        else:
            buf.write(b"f")
            buf.write(struct.pack("<d", ex.target))
    payload = buf.getvalue()
    return payload + hashlib.sha256(payload).digest()


def _decode_dataset(blob: bytes) -> IndexedDataset:
    if len(blob) < 44 or hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise ValueError("cache entry corrupt")
    view = io.BytesIO(blob[:-32])
    if view.read(8) != b"RLYIDX01":
        raise ValueError("cache entry corrupt")
    (mlen,) = struct.unpack("<I", view.read(4))
    meta = json.loads(view.read(mlen).decode("utf-8"))
    if meta["format"] != CACHE_FORMAT_VERSION:
        raise ValueError("cache entry from another format version")
    ds = IndexedDataset(
        task=meta["task"],
        split=meta["split"],
        task_type=meta["task_type"],
        labels=tuple(meta["labels"]) if meta["labels"] else None,
        max_seq_len=meta["max_seq_len"],
        fingerprint=meta["fingerprint"],
    )
    for _ in range(meta["count"]):
        (glen,) = struct.unpack("<H", view.read(2))
        guid = view.read(glen).decode("utf-8")
        (nseq,) = struct.unpack("<H", view.read(2))
        seqs = []
        for _ in range(nseq):
            (slen,) = struct.unpack("<I", view.read(4))
            seqs.append(struct.unpack(f"<{slen}i", view.read(4 * slen)))
        (tlen,) = struct.unpack("<i", view.read(4))
        tags = None if tlen < 0 else struct.unpack(f"<{tlen}i", view.read(4 * tlen))
        kind = view.read(1)
        if kind == b"n":
            target = None
        elif kind == b"i":
            target = struct.unpack("<q", view.read(8))[0]
        elif kind == b"f":
            target = struct.unpack("<d", view.read(8))[0]
        else:
            raise ValueError("cache entry corrupt")
        ds.examples.append(IndexedExample(guid=guid, seqs=tuple(seqs), tags=tags, target=target))
    return ds


def cache_store(dataset: IndexedDataset, cache_dir: str, fingerprint_inputs: dict | None = None) -> str:
    os.makedirs(cache_dir, exist_ok=True)
    path = os.path.join(cache_dir, f"{dataset.fingerprint}.idx")
    _atomic_write(path, _encode_dataset(dataset))
    if fingerprint_inputs is not None:
        meta_text = json.dumps(fingerprint_inputs, sort_keys=True, indent=2) + "\n"
        _atomic_write(os.path.join(cache_dir, f"{dataset.fingerprint}.meta"), meta_text.encode("utf-8"))
    return path


def cache_load(fingerprint: str, cache_dir: str) -> IndexedDataset | None:
    """Return the cached dataset, or None on miss.  Corrupt entries are
    evicted and count as misses."""
    path = os.path.join(cache_dir, f"{fingerprint}.idx")
    if not os.path.isfile(path):
        return None
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        ds = _decode_dataset(blob)
    except (ValueError, struct.error):
        os.unlink(path)
        return None
    if ds.fingerprint != fingerprint:
        os.unlink(path)
        return None
    return ds


# ---------------------------------------------------------------------------
# Orchestration


def preprocess_all(registry, task_names, cfg, log=None):
    """Load, tokenize, index, and cache every split of the named tasks.

    The vocabulary is built over the training splits of all named tasks so
    later phases never meet an undefined index space.  Returns
    ``(vocab, {(task, split): IndexedDataset})``.
    """
    say = log or (lambda msg: None)
    cache_dir = cfg.cache_dir
    raw_cache: dict[tuple[str, str], list[RawExample]] = {}

    # Resolve label inventories (needs raw training data).
    for name in task_names:
        desc = registry.get(name)
        examples = corpus.load_examples(desc, "train")
        raw_cache[(name, "train")] = examples
        resolved = corpus.resolve_labels(desc, examples)
        if resolved is not desc:
            registry.update(resolved)

    def train_token_streams():
        for name in task_names:
            for ex in raw_cache[(name, "train")]:
                yield from example_tokens(ex)

    vocab = build_vocab(train_token_streams(), cfg.max_vocab_size)
    say(f"vocabulary: {len(vocab)} entries")

    datasets: dict[tuple[str, str], IndexedDataset] = {}
    for name in task_names:
        desc = registry.get(name)
        for split in ("train", "val", "test"):
            if desc.path_for(split) is None:
                continue
            fingerprint, inputs = compute_fingerprint(desc, split, vocab, cfg.max_seq_len)
            ds = cache_load(fingerprint, cache_dir)
            if ds is None:
                examples = raw_cache.get((name, split)) or corpus.load_examples(desc, split)
                ds = index_dataset(desc, examples, vocab, cfg.max_seq_len, split, fingerprint)
                cache_store(ds, cache_dir, inputs)
                say(f"indexed {name}/{split}: {len(ds)} examples (cache miss)")
            else:
                say(f"loaded {name}/{split} from cache: {len(ds)} examples")
            datasets[(name, split)] = ds
    return vocab, datasets

"""Sentence encoders, task heads, and their assembly.

An encoder is an embedding table plus an optional second layer: ``none``
pools the embeddings, ``bow_ff`` pools then applies one tanh feedforward
layer, ``rnn`` runs a single-layer (optionally bidirectional) vanilla tanh
recurrence and pools its states.  Pair inputs are encoded as one
``[CLS] a [SEP] b [SEP]`` sequence.  Tagging heads read the per-token
states (pre-pooling).

One head exists per distinct head_key; tasks sharing a head_key literally
share parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .corpus import TaskDescriptor
from .pipeline import IndexedExample, PAD, Vocabulary

__all__ = [
    "ModelError",
    "EncoderSpec",
    "Encoder",
    "build_encoder",
    "HeadSpec",
    "build_heads",
    "ModelAssembly",
    "build_assembly",
    "make_batch",
    "load_embedding_file",
]


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    input_module: str = "random_embeddings"
    embedding_file: str = ""
    embedding_dim: int = 32
    sent_enc: str = "none"
    hidden_dim: int = 32
    bidirectional: bool = True
    pooling: str = "mean"

    @classmethod
    def from_config(cls, cfg) -> "EncoderSpec":
        return cls(
            input_module=cfg.input_module,
            embedding_file=cfg.embedding_file,
            embedding_dim=cfg.embedding_dim,
            sent_enc=cfg.sent_enc,
            hidden_dim=cfg.hidden_dim,
            bidirectional=cfg.bidirectional,
            pooling=cfg.pooling,
        )


def load_embedding_file(path: str, dim: int) -> dict[str, np.ndarray]:
    """GloVe-style text file: ``token v1 v2 ... vd`` per line."""
    table: dict[str, np.ndarray] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise ModelError(f"cannot read embedding file {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if len(parts) < 2:
                continue
            if len(parts) - 1 != dim:
                raise ModelError(f"{path}:{lineno}: embedding has {len(parts) - 1} dims, expected {dim}")
            try:
                table[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError:
                raise ModelError(f"{path}:{lineno}: non-numeric embedding value") from None
    return table


class Encoder:
    def __init__(self, spec: EncoderSpec, vocab_size: int, params: dict[str, T.Tensor]):
        self.spec = spec
        self.vocab_size = vocab_size
        self.params = params

    @property
    def token_dim(self) -> int:
        if self.spec.sent_enc == "rnn":
            return self.spec.hidden_dim * (2 if self.spec.bidirectional else 1)
        return self.spec.embedding_dim

    @property
    def sent_dim(self) -> int:
        if self.spec.sent_enc == "bow_ff":
            return self.spec.hidden_dim
        return self.token_dim

    def encode(self, indices: np.ndarray, mask: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
        """(B, T) int indices + 0/1 mask -> (per-token states, pooled)."""
        if indices.size and indices.max() >= self.vocab_size:
            raise ModelError("token index out of vocabulary range")
        emb = T.embedding_gather(self.params["emb"], indices)
        if self.spec.sent_enc == "rnn":
            fwd = T.rnn_scan(emb, mask, self.params["rnn.fwd.w_ih"], self.params["rnn.fwd.w_hh"], self.params["rnn.fwd.b"])
            if self.spec.bidirectional:
                bwd = T.rnn_scan(
                    emb, mask, self.params["rnn.bwd.w_ih"], self.params["rnn.bwd.w_hh"], self.params["rnn.bwd.b"], reverse=True
                )
                states = T.concat([fwd, bwd], axis=-1)
            else:
                states = fwd
            return states, self._pool(states, mask)
        if self.spec.sent_enc == "bow_ff":
            pooled = self._pool(emb, mask)
            hidden = T.tanh(T.add(T.matmul(pooled, self.params["ff.w"]), self.params["ff.b"]))
            return emb, hidden
        return emb, self._pool(emb, mask)

    def _pool(self, states: T.Tensor, mask: np.ndarray) -> T.Tensor:
        if self.spec.pooling == "mean":
            return T.mean_pool(states, mask)
        if self.spec.pooling == "max":
            return T.max_pool(states, mask)
        # "first": the [CLS] position, as a mean over a one-position mask
        first_only = np.zeros_like(mask)
        first_only[:, 0] = 1.0
        return T.mean_pool(states, first_only)

    def copy(self) -> "Encoder":
        params = {k: T.Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()}
        return Encoder(self.spec, self.vocab_size, params)


def build_encoder(spec: EncoderSpec, vocab: Vocabulary, rng: T.RngState) -> Encoder:
    """Embeddings init uniform(+-0.05), dense layers Xavier; embedding_file
    mode copies file vectors for in-vocabulary tokens."""
    emb = rng.uniform(-0.05, 0.05, (len(vocab), spec.embedding_dim))
    if spec.input_module == "embedding_file":
        loaded = load_embedding_file(spec.embedding_file, spec.embedding_dim)
        for i, token in enumerate(vocab.itos):
            if token in loaded:
                emb[i] = loaded[token]
    params: dict[str, T.Tensor] = {"emb": T.Tensor(emb, requires_grad=True)}
    d, h = spec.embedding_dim, spec.hidden_dim
    if spec.sent_enc == "bow_ff":
        params["ff.w"] = T.Tensor(T.xavier_uniform(rng, (d, h)), requires_grad=True)
        params["ff.b"] = T.Tensor(np.zeros(h), requires_grad=True)
    elif spec.sent_enc == "rnn":
        directions = ["fwd", "bwd"] if spec.bidirectional else ["fwd"]
        for direction in directions:
            params[f"rnn.{direction}.w_ih"] = T.Tensor(T.xavier_uniform(rng, (d, h)), requires_grad=True)
            params[f"rnn.{direction}.w_hh"] = T.Tensor(T.xavier_uniform(rng, (h, h)), requires_grad=True)
            params[f"rnn.{direction}.b"] = T.Tensor(np.zeros(h), requires_grad=True)
    elif spec.sent_enc != "none":
        raise ModelError(f"unknown sent_enc {spec.sent_enc!r}")
    return Encoder(spec, len(vocab), params)


# ---------------------------------------------------------------------------
# Heads


_HEAD_KINDS = {
    "single_classification": "classification",
    "pair_classification": "classification",
    "regression": "regression",
    "tagging": "tagging",
    "multiple_choice": "choice_scorer",
}


@dataclass(frozen=True)
class HeadSpec:
    head_key: str
    kind: str
    input_dim: int
    arity: int


class Head:
    """Single affine layer; softmax (when applicable) lives in the loss."""

    def __init__(self, spec: HeadSpec, params: dict[str, T.Tensor]):
        self.spec = spec
        self.params = params

    def logits(self, rep: T.Tensor) -> T.Tensor:
        return T.add(T.matmul(rep, self.params["w"]), self.params["b"])

    def copy(self) -> "Head":
        return Head(self.spec, {k: T.Tensor(p.data.copy(), requires_grad=True) for k, p in self.params.items()})


def head_spec_for(desc: TaskDescriptor, token_dim: int, sent_dim: int) -> HeadSpec:
    kind = _HEAD_KINDS[desc.task_type]
    if kind == "tagging":
        return HeadSpec(desc.head_key, kind, token_dim, desc.head_arity())
    if kind == "choice_scorer":
        return HeadSpec(desc.head_key, kind, sent_dim, 1)
    if kind == "regression":
        return HeadSpec(desc.head_key, kind, sent_dim, 1)
    return HeadSpec(desc.head_key, kind, sent_dim, desc.head_arity())


def build_heads(descriptors: list[TaskDescriptor], token_dim: int, sent_dim: int, rng: T.RngState) -> dict[str, Head]:
    specs: dict[str, HeadSpec] = {}
    for desc in descriptors:
        spec = head_spec_for(desc, token_dim, sent_dim)
        prev = specs.get(spec.head_key)
        if prev is not None and prev != spec:
            raise ModelError(
                f"head_key {spec.head_key!r} shared across incompatible heads: {prev} vs {spec} "
                f"(tasks sharing a head need identical kind and arity)"
            )
        specs[spec.head_key] = spec
    heads: dict[str, Head] = {}
    for key in sorted(specs):
        spec = specs[key]
        heads[key] = Head(
            spec,
            {
                "w": T.Tensor(T.xavier_uniform(rng, (spec.input_dim, spec.arity)), requires_grad=True),
                "b": T.Tensor(np.zeros(spec.arity), requires_grad=True),
            },
        )
    return heads


# ---------------------------------------------------------------------------
# Batches


def _join_pair(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    # [CLS] a [SEP] + b [SEP] (drop b's leading CLS)
    return a + b[1:]


def _pad_block(seqs: list[tuple[int, ...]]) -> tuple[np.ndarray, np.ndarray]:
    tlen = max(len(s) for s in seqs)
    x = np.full((len(seqs), tlen), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), tlen), dtype=np.float64)
    for i, s in enumerate(seqs):
        x[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return x, mask


def make_batch(desc: TaskDescriptor, examples: list[IndexedExample]) -> dict:
    """Pad a slice of an IndexedDataset into dense arrays for the model."""
    if not examples:
        raise ModelError("empty batch")
    ttype = desc.task_type
    batch: dict = {"guids": [ex.guid for ex in examples], "size": len(examples)}
    if ttype == "multiple_choice":
        joined = [[_join_pair(ex.seqs[0], choice) for choice in ex.seqs[1:]] for ex in examples]
        n_choices = len(joined[0])
        flat = [seq for row in joined for seq in row]
        x, mask = _pad_block(flat)
        batch["x"] = x.reshape(len(examples), n_choices, -1)
        batch["mask"] = mask.reshape(len(examples), n_choices, -1)
        targets = [ex.target for ex in examples]
        batch["y"] = np.array(targets, dtype=np.int64) if all(t is not None for t in targets) else None
        return batch
    if ttype == "pair_classification":
        seqs = [_join_pair(ex.seqs[0], ex.seqs[1]) for ex in examples]
    else:
        seqs = [ex.seqs[0] for ex in examples]
    x, mask = _pad_block(seqs)
    batch["x"] = x
    batch["mask"] = mask
    if ttype == "tagging":
        tlen = x.shape[1]
        tags = np.zeros((len(examples), tlen), dtype=np.int64)
        tag_mask = np.zeros((len(examples), tlen), dtype=np.float64)
        have_tags = True
        for i, ex in enumerate(examples):
            if ex.tags is None:
                have_tags = False
                break
            # tags align with token positions, which start after [CLS]
            tags[i, 1 : 1 + len(ex.tags)] = ex.tags
            tag_mask[i, 1 : 1 + len(ex.tags)] = 1.0
        batch["tag_y"] = tags if have_tags else None
        batch["tag_mask"] = tag_mask if have_tags else None
        batch["tag_lens"] = [len(ex.seqs[0]) - 2 for ex in examples]
    else:
        targets = [ex.target for ex in examples]
        if all(t is not None for t in targets):
            dtype = np.float64 if ttype == "regression" else np.int64
            batch["y"] = np.array(targets, dtype=dtype)
        else:
            batch["y"] = None
    return batch


# ---------------------------------------------------------------------------
# Assembly


class ModelAssembly:
    """One shared encoder plus one head per head_key.

    With ``transfer_paradigm = frozen`` the encoder's parameters are left
    out of the trainable set; heads always train.
    """

    def __init__(self, encoder: Encoder, heads: dict[str, Head], transfer_paradigm: str = "finetune", dropout: float = 0.0):
        if transfer_paradigm not in ("finetune", "frozen"):
            raise ModelError(f"unknown transfer paradigm {transfer_paradigm!r}")
        self.encoder = encoder
        self.heads = heads
        self.transfer_paradigm = transfer_paradigm
        self.dropout = dropout

    def parameters(self) -> dict[str, T.Tensor]:
        out = {f"enc.{k}": p for k, p in self.encoder.params.items()}
        for key, head in self.heads.items():
            for k, p in head.params.items():
                out[f"head.{key}.{k}"] = p
        return out

    def trainable_parameters(self) -> dict[str, T.Tensor]:
        params = self.parameters()
        if self.transfer_paradigm == "frozen":
            params = {k: p for k, p in params.items() if not k.startswith("enc.")}
        return params

    def encoder_checksum(self) -> str:
        return T.params_checksum({k: p for k, p in self.encoder.params.items()})

    def heads_checksum(self) -> str:
        return T.params_checksum({k: p for k, p in self.parameters().items() if k.startswith("head.")})

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def copy(self) -> "ModelAssembly":
        return ModelAssembly(
            self.encoder.copy(),
            {k: h.copy() for k, h in self.heads.items()},
            self.transfer_paradigm,
            self.dropout,
        )

    def load_parameters(self, records: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(records)
        extra = set(records) - set(params)
        if missing or extra:
            raise ModelError(f"parameter name mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in params.items():
            if records[name].shape != p.data.shape:
                raise ModelError(f"parameter {name} shape mismatch: {records[name].shape} vs {p.data.shape}")
            p.data = records[name].astype(np.float64).copy()

    def head_for(self, desc: TaskDescriptor) -> Head:
        try:
            return self.heads[desc.head_key]
        except KeyError:
            raise ModelError(f"no head built for head_key {desc.head_key!r}") from None

    # -- forward ------------------------------------------------------------

    def forward(
        self,
        desc: TaskDescriptor,
        batch: dict,
        rng: T.RngState | None = None,
        train: bool = False,
        loss_scale: float = 1.0,
    ) -> tuple[T.Tensor | None, np.ndarray | list, np.ndarray]:
        """Returns (loss, predictions, scores).  loss is None when the
        batch has no targets (prediction-only)."""
        if train and rng is None:
            raise ModelError("training forward needs the run RNG for dropout")
        head = self.head_for(desc)
        ttype = desc.task_type
        drop = lambda t: T.dropout(t, self.dropout, rng, train) if train else t

        if ttype == "multiple_choice":
            bsz, n_choices, tlen = batch["x"].shape
            flat_x = batch["x"].reshape(bsz * n_choices, tlen)
            flat_mask = batch["mask"].reshape(bsz * n_choices, tlen)
            _, pooled = self.encoder.encode(flat_x, flat_mask)
            scores = T.reshape(head.logits(drop(pooled)), (bsz, n_choices))
            preds = scores.data.argmax(axis=1)
            loss = None
            if batch["y"] is not None:
                loss = T.scale(T.softmax_cross_entropy(scores, batch["y"]), loss_scale)
            return loss, preds, scores.data.copy()

        states, pooled = self.encoder.encode(batch["x"], batch["mask"])
        if ttype == "tagging":
            logits = head.logits(drop(states))
            loss = None
            if batch["tag_y"] is not None:
                loss = T.scale(T.softmax_cross_entropy(logits, batch["tag_y"], batch["tag_mask"]), loss_scale)
            arg = logits.data.argmax(axis=-1)
            preds = [arg[i, 1 : 1 + n].tolist() for i, n in enumerate(batch["tag_lens"])]
            return loss, preds, logits.data.copy()
        if ttype == "regression":
            pred_t = T.reshape(head.logits(drop(pooled)), (batch["size"],))
            loss = None
            if batch["y"] is not None:
                loss = T.scale(T.mse(pred_t, batch["y"]), loss_scale)
            values = pred_t.data.copy()
            return loss, values, values
        logits = head.logits(drop(pooled))
        loss = None
        if batch["y"] is not None:
            loss = T.scale(T.softmax_cross_entropy(logits, batch["y"]), loss_scale)
        preds = logits.data.argmax(axis=1)
        return loss, preds, _softmax(logits.data)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def build_assembly(cfg, vocab: Vocabulary, descriptors: list[TaskDescriptor], rng: T.RngState) -> ModelAssembly:
    spec = EncoderSpec.from_config(cfg)
    encoder = build_encoder(spec, vocab, rng)
    heads = build_heads(descriptors, encoder.token_dim, encoder.sent_dim, rng)
    return ModelAssembly(encoder, heads, cfg.transfer_paradigm, cfg.dropout)

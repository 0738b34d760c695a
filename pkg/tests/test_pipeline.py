import os
from types import SimpleNamespace

import pytest

from relay import pipeline as P
from relay.corpus import (
    CorpusError,
    RawExample,
    SyntheticParams,
    TaskDescriptor,
    TaskRegistry,
    generate_synthetic_suite,
)


def make_vocab(text):
    return P.build_vocab([P.tokenize(text)], max_size=100)


# ---------------------------------------------------------------------------
# Tokenizer

def test_tokenize_basic():
    assert P.tokenize("The cat sat.") == ["the", "cat", "sat", "."]


def test_tokenize_empty():
    assert P.tokenize("") == []


def test_tokenize_apostrophe():
    assert P.tokenize("don't  stop") == ["don", "'", "t", "stop"]


def test_tokenize_idempotent_under_rejoin():
    for text in ["The cat sat.", "a--b  c!?", "don't", "x", ""]:
        toks = P.tokenize(text)
        assert P.tokenize(" ".join(toks)) == toks


# ---------------------------------------------------------------------------
# Vocabulary

def test_vocab_order_and_specials():
    vocab = P.build_vocab([["a", "a", "b"]], max_size=10)
    assert vocab.itos == ["<pad>", "<unk>", "<cls>", "<sep>", "a", "b"]
    assert vocab.index("a") == 4
    assert len(vocab) <= 10 + 4


def test_vocab_truncation_maps_to_unk():
    vocab = P.build_vocab([["a", "a", "b"]], max_size=1)
    assert vocab.index("a") == 4
    assert vocab.index("b") == P.UNK


def test_vocab_tie_break_lexicographic():
    vocab = P.build_vocab([["y", "x"]], max_size=10)
    assert vocab.itos[4:] == ["x", "y"]


def test_vocab_empty_corpus_fails():
    with pytest.raises(ValueError, match="empty"):
        P.build_vocab([[]], max_size=5)


def test_vocab_deterministic_file(tmp_path):
    v1 = P.build_vocab([P.tokenize("b a a c b b")], max_size=50)
    v2 = P.build_vocab([P.tokenize("b a a c b b")], max_size=50)
    p1, p2 = tmp_path / "v1.txt", tmp_path / "v2.txt"
    v1.save(str(p1))
    v2.save(str(p2))
    assert p1.read_bytes() == p2.read_bytes()
    assert P.Vocabulary.load(str(p1)).itos == v1.itos
    assert v1.content_hash() == v2.content_hash()


# ---------------------------------------------------------------------------
# Indexing

def cls_desc(**kw):
    base = dict(name="toy", task_type="single_classification", train_path="t", val_path="v", labels=("neg", "pos"))
    base.update(kw)
    return TaskDescriptor(**base)


def test_index_single_token():
    vocab = make_vocab("cat")
    assert vocab.index("cat") == 4
    ds = P.index_dataset(cls_desc(), [RawExample(guid="0", text_a="cat", target="pos")], vocab, 16, "train")
    assert ds.examples[0].seqs == ((P.CLS, 4, P.SEP),)
    assert ds.examples[0].target == 1


def test_index_oov_goes_to_unk():
    vocab = make_vocab("cat")
    ds = P.index_dataset(cls_desc(), [RawExample(guid="0", text_a="dog", target="neg")], vocab, 16, "train")
    assert ds.examples[0].seqs[0][1] == P.UNK


def test_index_truncates_to_max_seq_len():
    vocab = make_vocab("w")
    text = " ".join(["w"] * 300)
    ds = P.index_dataset(cls_desc(), [RawExample(guid="0", text_a=text, target="pos")], vocab, 256, "train")
    assert len(ds.examples[0].seqs[0]) == 256


def test_index_tagging_truncation_drops_tag_tail():
    desc = TaskDescriptor(name="tag", task_type="tagging", train_path="t", val_path="v", labels=("A", "B"))
    tokens = tuple(f"t{i}" for i in range(10))
    tags = tuple("A" if i % 2 else "B" for i in range(10))
    vocab = P.build_vocab([[t.lower() for t in tokens]], max_size=50)
    ex = RawExample(guid="0", text_a=" ".join(tokens), tokens_a=tokens, target=tags)
    ds = P.index_dataset(desc, [ex], vocab, 6, "train")
    assert len(ds.examples[0].seqs[0]) == 6  # CLS + 4 tokens + SEP
    assert len(ds.examples[0].tags) == 4


def test_index_tag_count_mismatch_fails():
    desc = TaskDescriptor(name="tag", task_type="tagging", train_path="t", val_path="v", labels=("A", "B"))
    vocab = make_vocab("a b c")
    ex = RawExample(guid="0", text_a="a b c", tokens_a=("a", "b", "c"), target=("A", "B"))
    with pytest.raises(CorpusError, match="2 tags for 3 tokens"):
        P.index_dataset(desc, [ex], vocab, 16, "train")


def test_index_unknown_label_fails():
    vocab = make_vocab("x")
    with pytest.raises(CorpusError, match="unknown label"):
        P.index_dataset(cls_desc(), [RawExample(guid="0", text_a="x", target="meh")], vocab, 8, "train")


def test_index_pair_and_choices_fields():
    pair = TaskDescriptor(name="p", task_type="pair_classification", train_path="t", val_path="v", labels=("a", "b"))
    vocab = make_vocab("x y z")
    ds = P.index_dataset(pair, [RawExample(guid="0", text_a="x", text_b="y z", target="a")], vocab, 8, "train")
    assert len(ds.examples[0].seqs) == 2
    mc = TaskDescriptor(name="m", task_type="multiple_choice", train_path="t", val_path="v", num_choices=2)
    ds = P.index_dataset(mc, [RawExample(guid="0", text_a="x", choices=("y", "z"), target=1)], vocab, 8, "train")
    assert len(ds.examples[0].seqs) == 3  # context + 2 choices


# ---------------------------------------------------------------------------
# Fingerprints and cache

def write_task(tmp_path, text="good one\tpos\nbad one\tneg\n"):
    train = tmp_path / "train.tsv"
    train.write_text(text, encoding="utf-8")
    val = tmp_path / "val.tsv"
    val.write_text(text, encoding="utf-8")
    return cls_desc(train_path=str(train), val_path=str(val))


def test_cache_roundtrip(tmp_path):
    desc = write_task(tmp_path)
    vocab = make_vocab("good bad one")
    from relay.corpus import load_examples

    fp, inputs = P.compute_fingerprint(desc, "train", vocab, 16)
    ds = P.index_dataset(desc, load_examples(desc, "train"), vocab, 16, "train", fp)
    cache_dir = str(tmp_path / "cache")
    P.cache_store(ds, cache_dir, inputs)
    assert os.path.isfile(os.path.join(cache_dir, f"{fp}.meta"))
    back = P.cache_load(fp, cache_dir)
    assert back == ds


def test_cache_miss_on_unknown_fingerprint(tmp_path):
    assert P.cache_load("0" * 64, str(tmp_path)) is None


def test_fingerprint_changes(tmp_path):
    desc = write_task(tmp_path)
    vocab = make_vocab("good bad one")
    fp0, _ = P.compute_fingerprint(desc, "train", vocab, 128)
    # max_seq_len bump
    fp1, _ = P.compute_fingerprint(desc, "train", vocab, 256)
    assert fp1 != fp0
    # raw data change
    (tmp_path / "train.tsv").write_text("other text\tpos\n", encoding="utf-8")
    fp2, _ = P.compute_fingerprint(desc, "train", vocab, 128)
    assert fp2 != fp0
    # tokenizer version change
    fp3, _ = P.compute_fingerprint(write_task(tmp_path), "train", vocab, 128, tokenizer_version="ws-punct-2")
    assert fp3 != fp0
    # vocab change
    fp4, _ = P.compute_fingerprint(write_task(tmp_path), "train", make_vocab("entirely different"), 128)
    assert fp4 != fp0
    # split change
    fp5, _ = P.compute_fingerprint(write_task(tmp_path), "val", vocab, 128)
    assert fp5 != fp0


def test_cache_corruption_detected_and_evicted(tmp_path):
    desc = write_task(tmp_path)
    vocab = make_vocab("good bad one")
    from relay.corpus import load_examples

    fp, inputs = P.compute_fingerprint(desc, "train", vocab, 16)
    ds = P.index_dataset(desc, load_examples(desc, "train"), vocab, 16, "train", fp)
    cache_dir = str(tmp_path / "cache")
    path = P.cache_store(ds, cache_dir, inputs)
    blob = open(path, "rb").read()
    with open(path, "wb") as fh:  # truncate mid-write simulation
        fh.write(blob[: len(blob) // 2])
    assert P.cache_load(fp, cache_dir) is None
    assert not os.path.exists(path)  # evicted


# ---------------------------------------------------------------------------
# preprocess_all

def suite_cfg(tmp_path, suite):
    return SimpleNamespace(
        cache_dir=str(tmp_path / "cache"),
        max_vocab_size=5000,
        max_seq_len=24,
        data_dir=str(tmp_path),
    )


def registry_from(suite):
    reg = TaskRegistry()
    for desc in suite.tasks.values():
        reg.register(desc)
    return reg


def test_preprocess_with_cache_equals_without(tmp_path):
    suite = generate_synthetic_suite(9, SyntheticParams(out_dir=str(tmp_path / "data"), train_size=12,
                                                        intermediate_train=16, target_train=8))
    names = sorted(suite.tasks)
    cfg = suite_cfg(tmp_path, suite)

    vocab_cold, cold = P.preprocess_all(registry_from(suite), names, cfg)
    vocab_warm, warm = P.preprocess_all(registry_from(suite), names, cfg)
    assert vocab_cold.itos == vocab_warm.itos
    assert set(cold) == set(warm)
    for key in cold:
        assert cold[key] == warm[key], key

    # and a fresh cache dir reproduces the same datasets
    cfg2 = suite_cfg(tmp_path, suite)
    cfg2.cache_dir = str(tmp_path / "cache2")
    _, fresh = P.preprocess_all(registry_from(suite), names, cfg2)
    for key in cold:
        assert cold[key] == fresh[key], key


def test_preprocess_resolves_labels_from_data(tmp_path):
    train = tmp_path / "train.tsv"
    train.write_text("x\tzebra\ny\tant\n", encoding="utf-8")
    val = tmp_path / "val.tsv"
    val.write_text("z\tant\n", encoding="utf-8")
    reg = TaskRegistry()
    reg.register(TaskDescriptor(name="t", task_type="single_classification",
                                train_path=str(train), val_path=str(val), labels=None))
    cfg = SimpleNamespace(cache_dir=str(tmp_path / "c"), max_vocab_size=100, max_seq_len=8, data_dir=str(tmp_path))
    _, datasets = P.preprocess_all(reg, ["t"], cfg)
    assert reg.get("t").labels == ("ant", "zebra")
    assert datasets[("t", "train")].examples[0].target == 1  # zebra

import json
import os

import pytest

from relay.corpus import SyntheticParams, TaskDescriptor, generate_synthetic_suite
from relay.runner import (
    EXIT_CONFIG,
    EXIT_HALTED,
    EXIT_OK,
    EventWriter,
    MetricEvent,
    main,
    read_events,
    write_predictions,
)


# ---------------------------------------------------------------------------
# Events

def test_event_write_read_roundtrip(tmp_path):
    w = EventWriter(str(tmp_path / "metrics.events"))
    w.emit("intermediate", 10, "t", "accuracy", 0.5)
    w.emit("intermediate", 10, "t", "mcc", 0.1)
    w.emit("intermediate", 20, "aggregate", "primary_mean", 0.6)
    events = read_events(str(tmp_path))
    assert len(events) == 3
    assert events[0] == MetricEvent("intermediate", 10, "t", "accuracy", 0.5)
    assert events[2].task == "aggregate"


def test_event_crash_truncated_tail_tolerated(tmp_path):
    w = EventWriter(str(tmp_path / "metrics.events"))
    w.emit("p", 1, "t", "m", 1.0)
    w.emit("p", 2, "t", "m", 2.0)
    with open(tmp_path / "metrics.events", "a", encoding="utf-8") as fh:
        fh.write('{"phase": "p", "step": 3, "ta')  # crash mid-record
    events = read_events(str(tmp_path))
    assert [e.step for e in events] == [1, 2]


def test_event_counter_ignores_partial_line(tmp_path):
    path = tmp_path / "metrics.events"
    w = EventWriter(str(path))
    w.emit("p", 1, "t", "m", 1.0)
    with open(path, "a", encoding="utf-8") as fh:
        fh.write("junk-without-newline")
    assert EventWriter(str(path)).count == 1


def test_event_truncate_to(tmp_path):
    w = EventWriter(str(tmp_path / "metrics.events"))
    for i in range(5):
        w.emit("p", i, "t", "m", float(i))
    w.truncate_to(2)
    assert w.count == 2
    events = read_events(str(tmp_path))
    assert [e.step for e in events] == [0, 1]
    w.emit("p", 9, "t", "m", 9.0)
    assert [e.step for e in read_events(str(tmp_path))] == [0, 1, 9]


def test_event_values_roundtrip_exactly(tmp_path):
    w = EventWriter(str(tmp_path / "metrics.events"))
    values = [0.1 + 0.2, 1e-17, 2 / 3, 1.0]
    for v in values:
        w.emit("p", 0, "t", "m", v)
    assert [e.value for e in read_events(str(tmp_path))] == values


# ---------------------------------------------------------------------------
# Prediction files

def cls_desc():
    return TaskDescriptor(name="toy", task_type="single_classification", train_path="t", val_path="v",
                          labels=("neg", "pos"))


def test_strict_predictions_format(tmp_path):
    desc = cls_desc()
    path = write_predictions(desc, "val", ["g0", "g1", "g2"], [1, 0, 1],
                             [[0.1, 0.9], [0.8, 0.2], [0.3, 0.7]], strict=True, out_dir=str(tmp_path))
    lines = open(path, encoding="utf-8").read().splitlines()
    assert lines[0] == "index\tprediction"
    assert lines[1:] == ["0\tpos", "1\tneg", "2\tpos"]


def test_strict_regression_three_decimals_roundtrip(tmp_path):
    desc = TaskDescriptor(name="r", task_type="regression", train_path="t", val_path="v")
    path = write_predictions(desc, "val", ["a", "b"], [0.123456, 2.0], [0.123456, 2.0],
                             strict=True, out_dir=str(tmp_path))
    rows = [line.split("\t") for line in open(path).read().splitlines()[1:]]
    assert rows == [["0", "0.123"], ["1", "2.000"]]
    assert [float(r[1]) for r in rows] == [0.123, 2.0]


def test_raw_predictions_jsonl(tmp_path):
    desc = cls_desc()
    path = write_predictions(desc, "test", ["g0"], [0], [[0.6, 0.4]], strict=False, out_dir=str(tmp_path))
    rec = json.loads(open(path).read().splitlines()[0])
    assert rec == {"guid": "g0", "prediction": "neg", "scores": [0.6, 0.4]}


def test_predictions_length_mismatch(tmp_path):
    with pytest.raises(Exception, match="predictions"):
        write_predictions(cls_desc(), "val", ["g0", "g1"], [1], [[0.5, 0.5]], strict=True, out_dir=str(tmp_path))


def test_mc_and_tagging_rendering(tmp_path):
    mc = TaskDescriptor(name="m", task_type="multiple_choice", train_path="t", val_path="v", num_choices=3)
    path = write_predictions(mc, "val", ["q"], [2], [[0.1, 0.2, 0.7]], strict=True, out_dir=str(tmp_path))
    assert open(path).read().splitlines()[1] == "0\t2"
    tag = TaskDescriptor(name="g", task_type="tagging", train_path="t", val_path="v", labels=("A", "B"))
    path = write_predictions(tag, "val", ["s"], [[0, 1, 0]], [None], strict=True, out_dir=str(tmp_path))
    assert open(path).read().splitlines()[1] == "0\tA B A"


# ---------------------------------------------------------------------------
# CLI

def write_experiment(tmp_path, seed=9, extra="", name="cli"):
    data = tmp_path / "data"
    if not (data / "tasks.conf").exists():
        generate_synthetic_suite(5, SyntheticParams(out_dir=str(data), train_size=16, val_size=8, test_size=4,
                                                    intermediate_train=24, intermediate_val=8,
                                                    target_train=8, target_val=8, target_test=4))
    conf = tmp_path / f"{name}.conf"
    conf.write_text(
        f"""
include "data/tasks.conf"
exp_name = {name}
project_dir = "{tmp_path / 'runs'}"
data_dir = "{data}"
seed = {seed}
target_tasks = syn_cls
max_seq_len = 16
embedding_dim = 8
hidden_dim = 8
batch_size = 4
val_interval = 4
max_vals = 2
{extra}
""",
        encoding="utf-8",
    )
    return conf


def test_main_requires_config_file(capsys):
    assert main([]) == EXIT_CONFIG
    assert "config_file" in capsys.readouterr().err


def test_main_bad_config_is_exit_2(tmp_path, capsys):
    conf = tmp_path / "x.conf"
    conf.write_text("exp_name = demo\nmystery_key = 1\n", encoding="utf-8")
    assert main(["--config_file", str(conf)]) == EXIT_CONFIG
    assert "unknown key" in capsys.readouterr().err


def test_main_missing_file_is_exit_2(tmp_path, capsys):
    assert main(["--config_file", str(tmp_path / "none.conf")]) == EXIT_CONFIG


def test_main_runtime_error_is_exit_1(tmp_path, capsys):
    conf = tmp_path / "x.conf"
    conf.write_text(
        f"""
exp_name = demo
project_dir = "{tmp_path / 'runs'}"
target_tasks = ghost_task
tasks {{ ghost_task {{ type = regression, train = "missing.tsv", val = "missing.tsv" }} }}
""",
        encoding="utf-8",
    )
    assert main(["--config_file", str(conf)]) == 1
    assert "missing" in capsys.readouterr().err


def test_full_run_and_artifacts(tmp_path):
    conf = write_experiment(tmp_path, extra='write_preds = "val,test"\nwrite_strict_glue_format = 1\n')
    assert main(["--config_file", str(conf)]) == EXIT_OK
    run_dir = tmp_path / "runs" / "cli" / "run"
    for artifact in ["manifest.json", "config.conf", "vocab.txt", "log.txt",
                     "metrics.events", "results.json", "done",
                     "preds/syn_cls_val.tsv", "preds/syn_cls_test.tsv"]:
        assert (run_dir / artifact).exists(), artifact
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["exp_name"] == "cli"
    assert manifest["seed"] == 9
    assert len(manifest["config_hash"]) == 64
    # no pretrain phase requested: phase skipped entirely
    assert not (run_dir / "ckpt" / "intermediate").exists()
    assert (run_dir / "ckpt" / "target_syn_cls" / "best.ckpt").exists()


def test_run_name_override_changes_run_dir(tmp_path):
    conf = write_experiment(tmp_path)
    assert main(["--config_file", str(conf), "--overrides", "run_name = swag_01"]) == EXIT_OK
    assert (tmp_path / "runs" / "cli" / "swag_01" / "done").exists()


def test_existing_run_dir_refused_without_force(tmp_path, capsys):
    conf = write_experiment(tmp_path)
    assert main(["--config_file", str(conf)]) == EXIT_OK
    assert main(["--config_file", str(conf)]) == EXIT_CONFIG
    assert "already exists" in capsys.readouterr().err
    assert main(["--config_file", str(conf), "--force"]) == EXIT_OK


def test_later_config_file_wins(tmp_path):
    conf = write_experiment(tmp_path)
    second = tmp_path / "later.conf"
    second.write_text("run_name = from_later\nseed = 123\n", encoding="utf-8")
    assert main(["--config_file", str(conf), "--config_file", str(second)]) == EXIT_OK
    run_dir = tmp_path / "runs" / "cli" / "from_later"
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["seed"] == 123
    assert manifest["provenance"]["seed"].endswith("later.conf")
    assert manifest["provenance"]["exp_name"].endswith("cli.conf")


def test_overrides_beat_all_files(tmp_path):
    conf = write_experiment(tmp_path)
    assert main(["--config_file", str(conf), "--overrides", "seed = 555, run_name = ov"]) == EXIT_OK
    manifest = json.loads((tmp_path / "runs" / "cli" / "ov" / "manifest.json").read_text())
    assert manifest["seed"] == 555
    assert manifest["provenance"]["seed"] == "<override>"


def test_flag_selects_raw_prediction_mode(tmp_path):
    conf = write_experiment(tmp_path, extra='write_preds = "val"\n')  # strict flag off
    assert main(["--config_file", str(conf)]) == EXIT_OK
    preds = tmp_path / "runs" / "cli" / "run" / "preds"
    assert (preds / "syn_cls_val.jsonl").exists()
    assert not (preds / "syn_cls_val.tsv").exists()
    rec = json.loads((preds / "syn_cls_val.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"guid", "prediction", "scores"}
    assert len(rec["scores"]) == 3  # per-class scores


def test_do_full_eval_zero_writes_no_eval_artifacts(tmp_path):
    conf = write_experiment(tmp_path, extra="do_full_eval = 0\n")
    assert main(["--config_file", str(conf)]) == EXIT_OK
    run_dir = tmp_path / "runs" / "cli" / "run"
    assert not (run_dir / "results.json").exists()
    assert not (run_dir / "preds").exists()


def test_halt_and_resume_exit_codes(tmp_path):
    conf = write_experiment(tmp_path)
    assert main(["--config_file", str(conf), "--halt_after_steps", "3"]) == EXIT_HALTED
    run_dir = tmp_path / "runs" / "cli" / "run"
    assert not (run_dir / "done").exists()
    assert main(["--config_file", str(conf), "--resume"]) == EXIT_OK
    assert (run_dir / "done").exists()
    # resuming a finished run is a no-op
    assert main(["--config_file", str(conf), "--resume"]) == EXIT_OK


def test_resume_with_edited_config_refused(tmp_path, capsys):
    conf = write_experiment(tmp_path)
    assert main(["--config_file", str(conf), "--halt_after_steps", "3"]) == EXIT_HALTED
    run_dir = tmp_path / "runs" / "cli" / "run"
    resolved_before = (run_dir / "config.conf").read_bytes()
    conf.write_text(conf.read_text().replace("seed = 9", "seed = 10"), encoding="utf-8")
    assert main(["--config_file", str(conf), "--resume"]) == EXIT_CONFIG
    assert "refusing to resume" in capsys.readouterr().err
    assert (run_dir / "config.conf").read_bytes() == resolved_before  # original snapshot intact


def test_resume_discards_events_orphaned_by_a_crash(tmp_path):
    # reference run
    conf_a = write_experiment(tmp_path, extra="do_pretrain = 1\npretrain_tasks = trans_src\n")
    assert main(["--config_file", str(conf_a)]) == EXIT_OK
    run_a = tmp_path / "runs" / "cli" / "run"
    events_a = (run_a / "metrics.events").read_bytes()

    # halted run with fake events appended, as if a crash hit between an
    # event write and the next checkpoint save
    conf_b = write_experiment(tmp_path, name="cli2", extra="do_pretrain = 1\npretrain_tasks = trans_src\n")
    assert main(["--config_file", str(conf_b), "--halt_after_steps", "5"]) == EXIT_HALTED
    run_b = tmp_path / "runs" / "cli2" / "run"
    with open(run_b / "metrics.events", "a", encoding="utf-8") as fh:
        fh.write('{"metric": "orphan", "phase": "intermediate", "step": 99, "task": "x", "value": 0.0}\n')
    assert main(["--config_file", str(conf_b), "--resume"]) == EXIT_OK
    events_b = (run_b / "metrics.events").read_bytes()
    assert b"orphan" not in events_b
    assert events_b == events_a


def test_missing_expected_phase1_checkpoint_is_runtime_error(tmp_path, capsys):
    conf = write_experiment(tmp_path, extra="do_pretrain = 1\npretrain_tasks = trans_src\n")
    # halt right after the intermediate phase (4 + 2 val_interval*max_vals steps each is
    # more than 8; intermediate stops at step 8 via max_vals=2 * val_interval=4)
    assert main(["--config_file", str(conf), "--halt_after_steps", "9"]) == EXIT_HALTED
    best = tmp_path / "runs" / "cli" / "run" / "ckpt" / "intermediate" / "best.ckpt"
    assert best.exists()
    os.unlink(best)
    assert main(["--config_file", str(conf), "--resume"]) == 1
    assert "no best checkpoint" in capsys.readouterr().err


def test_resolved_config_reruns_identically(tmp_path):
    conf = write_experiment(tmp_path)
    assert main(["--config_file", str(conf)]) == EXIT_OK
    run_dir = tmp_path / "runs" / "cli" / "run"
    events_first = (run_dir / "metrics.events").read_bytes()
    resolved = run_dir / "config.conf"
    assert main(["--config_file", str(resolved), "--overrides", "run_name = rerun"]) == EXIT_OK
    rerun_dir = tmp_path / "runs" / "cli" / "rerun"
    assert (rerun_dir / "metrics.events").read_bytes() == events_first
    assert (rerun_dir / "results.json").read_bytes() == (run_dir / "results.json").read_bytes()


def test_eval_twice_identical_outputs(tmp_path):
    conf = write_experiment(tmp_path, extra='write_preds = "val"\nwrite_strict_glue_format = 1\n')
    assert main(["--config_file", str(conf)]) == EXIT_OK
    run_dir = tmp_path / "runs" / "cli" / "run"
    preds1 = (run_dir / "preds" / "syn_cls_val.tsv").read_bytes()
    results1 = (run_dir / "results.json").read_bytes()
    # wipe the done marker and eval outputs, resume re-runs evaluation only
    os.unlink(run_dir / "done")
    os.unlink(run_dir / "results.json")
    assert main(["--config_file", str(conf), "--resume"]) == EXIT_OK
    assert (run_dir / "preds" / "syn_cls_val.tsv").read_bytes() == preds1
    assert (run_dir / "results.json").read_bytes() == results1


def test_unlabeled_test_split_gets_predictions_but_no_metrics(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    (data / "t.train.tsv").write_text("good stuff\tpos\nbad stuff\tneg\nfine stuff\tpos\npoor stuff\tneg\n")
    (data / "t.val.tsv").write_text("good thing\tpos\nbad thing\tneg\n")
    (data / "t.test.tsv").write_text("nice one\nawful one\n")  # no targets
    conf = tmp_path / "x.conf"
    conf.write_text(
        f"""
exp_name = unlabeled
project_dir = "{tmp_path / 'runs'}"
data_dir = "{data}"
target_tasks = t
batch_size = 2
val_interval = 2
max_vals = 2
write_preds = "val,test"
write_strict_glue_format = 1
tasks {{ t {{ type = single_classification, train = "t.train.tsv", val = "t.val.tsv", test = "t.test.tsv", labels = ["neg", "pos"] }} }}
""",
        encoding="utf-8",
    )
    assert main(["--config_file", str(conf)]) == EXIT_OK
    run_dir = tmp_path / "runs" / "unlabeled" / "run"
    results = json.loads((run_dir / "results.json").read_text())
    assert "val" in results["t"]
    assert "test" not in results["t"]  # no targets, no metrics
    test_preds = (run_dir / "preds" / "t_test.tsv").read_text().splitlines()
    assert test_preds[0] == "index\tprediction"
    assert len(test_preds) == 3


def test_env_var_directory_fallbacks(tmp_path, monkeypatch):
    conf = write_experiment(tmp_path)
    # strip explicit dirs from the config; env vars take over
    text = conf.read_text()
    text = "\n".join(line for line in text.splitlines() if not line.startswith(("project_dir", "data_dir")))
    conf.write_text(text, encoding="utf-8")
    monkeypatch.setenv("RELAY_PROJECT_DIR", str(tmp_path / "env_runs"))
    monkeypatch.setenv("RELAY_DATA_DIR", str(tmp_path / "data"))
    assert main(["--config_file", str(conf)]) == EXIT_OK
    assert (tmp_path / "env_runs" / "cli" / "run" / "done").exists()


def test_events_ordered_within_contiguous_phase_blocks(tmp_path):
    conf = write_experiment(tmp_path, extra="do_pretrain = 1\npretrain_tasks = \"trans_src,syn_cls\"\n"
                                            "target_tasks = \"trans_tgt,syn_cls\"\n")
    assert main(["--config_file", str(conf)]) == EXIT_OK
    events = read_events(str(tmp_path / "runs" / "cli" / "run"))
    phases = [e.phase for e in events]
    blocks = list(dict.fromkeys(phases))
    assert blocks == ["intermediate", "target:trans_tgt", "target:syn_cls", "eval"]
    # contiguity: once a phase ends it never reappears
    seen = []
    for p in phases:
        if p not in seen:
            seen.append(p)
        else:
            assert p == seen[-1]
    # within a phase, strict (step, task, metric) ordering
    for block in blocks:
        keys = [(e.step, e.task, e.metric) for e in events if e.phase == block]
        assert keys == sorted(keys)
        assert len(keys) == len(set(keys))


def test_config_variant_sgd_maxpool_accumulation(tmp_path):
    conf = write_experiment(
        tmp_path,
        extra="optimizer = sgd\nsent_enc = none\npooling = max\naccumulation_steps = 2\nlr = 0.05\n",
    )
    assert main(["--config_file", str(conf)]) == EXIT_OK
    run_dir = tmp_path / "runs" / "cli" / "run"
    results = json.loads((run_dir / "results.json").read_text())
    assert "val" in results["syn_cls"]
    log = (run_dir / "log.txt").read_text()
    assert "run complete" in log
    assert any(line[:4].isdigit() for line in log.splitlines())  # timestamped lines


def test_eval_only_run_uses_initial_model(tmp_path):
    conf = write_experiment(tmp_path, extra="do_target_task_training = 0\n")
    assert main(["--config_file", str(conf)]) == EXIT_OK
    run_dir = tmp_path / "runs" / "cli" / "run"
    assert not (run_dir / "ckpt").exists()  # no phase trained anything
    results = json.loads((run_dir / "results.json").read_text())
    assert results["syn_cls"]["checkpoint"] == "initial"
    assert "val" in results["syn_cls"]


def test_embedding_file_with_frozen_rnn_end_to_end(tmp_path):
    from relay.pipeline import Vocabulary
    from relay.trainer import load_checkpoint

    data = tmp_path / "data"
    generate_synthetic_suite(5, SyntheticParams(out_dir=str(data), train_size=16, val_size=8, test_size=4,
                                                intermediate_train=24, intermediate_val=8,
                                                target_train=8, target_val=8, target_test=4))
    vectors = tmp_path / "vectors.txt"
    vectors.write_text("w000 " + " ".join(["0.125"] * 8) + "\ntrig00 " + " ".join(["-0.25"] * 8) + "\n",
                       encoding="utf-8")
    conf = tmp_path / "emb.conf"
    conf.write_text(
        f"""
include "data/tasks.conf"
exp_name = emb
project_dir = "{tmp_path / 'runs'}"
data_dir = "{data}"
target_tasks = syn_cls
input_module = embedding_file
embedding_file = "{vectors}"
embedding_dim = 8
sent_enc = rnn
hidden_dim = 4
transfer_paradigm = frozen
batch_size = 4
val_interval = 4
max_vals = 2
""",
        encoding="utf-8",
    )
    assert main(["--config_file", str(conf)]) == EXIT_OK
    run_dir = tmp_path / "runs" / "emb" / "run"
    vocab = Vocabulary.load(str(run_dir / "vocab.txt"))
    _, records = load_checkpoint(str(run_dir / "ckpt" / "target_syn_cls" / "best.ckpt"))
    emb = records["param.enc.emb"]
    # frozen paradigm: file vectors survive training verbatim
    assert (emb[vocab.index("w000")] == 0.125).all()
    assert (emb[vocab.index("trig00")] == -0.25).all()


def test_plot_subcommand(tmp_path):
    conf = write_experiment(tmp_path)
    assert main(["--config_file", str(conf)]) == EXIT_OK
    run_dir = str(tmp_path / "runs" / "cli" / "run")
    assert main(["plot", run_dir]) == EXIT_OK
    out = tmp_path / "runs" / "cli" / "run" / "plots"
    assert (out / "events.csv").exists()
    assert any(p.suffix == ".png" for p in out.iterdir())


def test_plot_missing_run_dir(tmp_path, capsys):
    assert main(["plot", str(tmp_path / "nope")]) == 1


def test_synth_subcommand_runs_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", str(data), "--seed", "3", "--train_size", "12",
                 "--intermediate_train", "16", "--target_train", "8"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "tasks.conf" in out
    conf = tmp_path / "exp.conf"
    conf.write_text(
        f"""
include "data/tasks.conf"
exp_name = synthcli
project_dir = "{tmp_path / 'runs'}"
data_dir = "{data}"
target_tasks = syn_tag
batch_size = 4
val_interval = 3
max_vals = 2
""",
        encoding="utf-8",
    )
    assert main(["--config_file", str(conf)]) == EXIT_OK
    assert (tmp_path / "runs" / "synthcli" / "run" / "done").exists()

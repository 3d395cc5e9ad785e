import csv
import json

import pytest

from siamreloc import cli
from siamreloc.dataset import generate_synth_splits
from siamreloc.errors import ConfigError, DivergedLoss

TINY = [
    "synth.num_sequences=2",
    "synth.frames_per_sequence=30",
    "synth.num_test_sequences=1",
    "synth.descriptor_dim=8",
    "synth.aliasing_pair_min_distance=0.25",
    "model.hidden_dims=[16]",
    "model.feature_dim=8",
    "model.head_dim=16",
    "train.max_epochs=1",
    "train.learning_rate=1e-3",
]


def run(*args, extra=TINY):
    argv = list(args)
    for kv in extra:
        argv += ["--set", kv]
    return cli.main(argv)


def rows(path):
    return list(csv.reader(open(path)))


@pytest.mark.parametrize("command", [None, *cli.COMMANDS])
def test_help_lists_every_flag(command, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(([command] if command else []) + ["--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    if command is None:
        assert all(name in text for name in cli.COMMANDS)
    else:
        assert all(flag in text for flag in ("--config", "--seed", "--out", "--set"))


def test_config_grammar():
    parsed = cli.parse_assignments(
        ["# comment", "", "a = 1e-3", "b=[1, 2]", "c = 'next'", "d = some/path.txt", "e = True"], "t"
    )
    assert parsed == {"a": 1e-3, "b": [1, 2], "c": "next", "d": "some/path.txt", "e": True}
    with pytest.raises(ConfigError):
        cli.parse_assignments(["a = 1", "a = 2"], "t")
    with pytest.raises(ConfigError):
        cli.parse_assignments(["just words"], "t")


def test_flags_win_over_the_file(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("seed = 3\nout = a\ntrain.max_epochs = 7\n")
    cfg = cli.build_run_config(str(cfg_file), ["train.max_epochs=2"], seed=5, out="b")
    assert cfg["seed"] == 5 and cfg["out"] == "b"
    assert cfg.train_config().max_epochs == 2
    assert cfg.train_config().rng_seed == 5 and cfg.synth_config().rng_seed == 5


@pytest.mark.parametrize(
    "overrides, fragment",
    [
        (["bogus=1"], "bogus"),
        (["train.bogus=1"], "train.bogus"),
        (["synth.rng_seed=1"], "root"),
        (["train.batch_size=0"], "batch_size"),
        (["seed='x'"], "seed"),
    ],
)
def test_config_errors_exit_1(overrides, fragment, capsys):
    assert run("train", extra=overrides) == cli.EXIT_CONFIG
    assert fragment in capsys.readouterr().err


def test_missing_config_file_exit_1(tmp_path, capsys):
    missing = tmp_path / "nope.cfg"
    assert cli.main(["train", "--config", str(missing)]) == cli.EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_missing_data_exit_2(tmp_path, capsys):
    code = run("train", "--out", str(tmp_path), extra=["dataset_format='jsonl'", "train_data=a.jsonl",
                                                        "test_data=b.jsonl"])
    assert code == cli.EXIT_DATA
    assert "a.jsonl" in capsys.readouterr().err


def test_divergence_exit_3(tmp_path, monkeypatch):
    def diverge(*args, **kwargs):
        raise DivergedLoss("loss became nan")

    monkeypatch.setattr(cli, "train", diverge)
    assert run("train", "--out", str(tmp_path)) == cli.EXIT_DIVERGED


def test_train_is_byte_reproducible(tmp_path):
    for d in ("a", "b"):
        assert run("train", "--seed", "2", "--out", str(tmp_path / d)) == 0
    for name in ("checkpoint.json", "train_report.json", "train.run.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert json.loads((tmp_path / "a" / "train.run.json").read_text())["seed"] == 2
    assert run("train", "--seed", "3", "--out", str(tmp_path / "c")) == 0
    assert (tmp_path / "a" / "checkpoint.json").read_bytes() != (tmp_path / "c" / "checkpoint.json").read_bytes()


def test_synth_then_train_and_evaluate_from_files(tmp_path):
    data = tmp_path / "data"
    assert run("synth", "--out", str(data)) == 0
    assert (data / "synth-train.jsonl").exists() and (data / "synth-test.jsonl").exists()
    files = ["dataset_format='jsonl'", f"train_data={data / 'synth-train.jsonl'}",
             f"test_data={data / 'synth-test.jsonl'}"]
    assert run("train", "--out", str(tmp_path / "m"), extra=TINY + files) == 0
    ckpt = tmp_path / "m" / "checkpoint.json"
    assert run("evaluate", "--out", str(tmp_path / "e"), extra=TINY + files + [f"checkpoint={ckpt}"]) == 0
    table = rows(tmp_path / "e" / "results.csv")
    assert table[0] == ["scene", "median_pos_m", "median_ort_deg"] and table[1][0] == "synth-test"


def test_evaluate_needs_a_model(tmp_path):
    assert run("evaluate", "--out", str(tmp_path)) == cli.EXIT_CONFIG


def test_evaluate_from_predictions(tmp_path):
    cfg = cli.build_run_config(None, TINY)
    _, test = generate_synth_splits(cfg.synth_config())
    pred = tmp_path / "pred.txt"
    pred.write_text("".join(
        f"{f.id} {' '.join(repr(float(v)) for v in (*f.pose.position, *f.pose.orientation))}\n" for f in test.frames
    ))
    assert run("evaluate", "--out", str(tmp_path), extra=TINY + [f"predictions={pred}"]) == 0
    assert float(rows(tmp_path / "results.csv")[1][1]) == 0.0


def test_pair_stats_on_synth(tmp_path):
    assert run("pair-stats", "--out", str(tmp_path), "--seed", "1") == 0
    table = rows(tmp_path / "pair_stats.csv")
    assert table[0] == ["scene", "split", "frames", "seed", "mean_next", "mean_random"]
    for r in table[1:]:
        assert float(r[4]) < float(r[5]) and r[3] == "1"


def test_ablate_rows(tmp_path):
    code = run("ablate", "--out", str(tmp_path), extra=TINY + ["combinations=G,full", "seeds=[0, 1]"])
    assert code == 0
    table = rows(tmp_path / "ablation.csv")
    assert table[0] == ["scene", "combination", "seed", "median_pos_m", "median_ort_deg"]
    assert [(r[1], r[2]) for r in table[1:]] == [("G", "0"), ("G", "1"), ("full", "0"), ("full", "1")]
    assert run("ablate", "--out", str(tmp_path), extra=TINY + ["combinations=G,H"]) == cli.EXIT_CONFIG


def test_gradcheck_passes_on_a_fresh_model(tmp_path):
    assert run("gradcheck", "--out", str(tmp_path), extra=["gradcheck_points=2"]) == 0
    table = rows(tmp_path / "gradcheck.csv")
    assert len(table) == 1 + 9
    assert all(r[4] == "True" for r in table[1:])


def test_gradcheck_failure_exit_4(tmp_path, monkeypatch):
    monkeypatch.setattr(cli, "run_gradcheck_suite", lambda *a, **k: {name: 1.0 for name in cli.LOSS_CHECKS})
    assert run("gradcheck", "--out", str(tmp_path), extra=["gradcheck_points=1"]) == cli.EXIT_CHECK_FAILED


def test_every_output_is_reproducible(tmp_path):
    for d in ("a", "b"):
        for command in ("synth", "pair-stats", "gradcheck"):
            assert run(command, "--out", str(tmp_path / d), extra=TINY + ["gradcheck_points=1"]) == 0
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "b").iterdir())
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name

import re

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from conftest import write_yoochoose
from tagnn import cli
from tagnn.data import ItemVocabulary
from tagnn.model import VARIANTS

FAST = ["--d", "8", "--epochs", "2", "--batch", "50", "--threads", "1"]


def block(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line and not line.startswith("#"))


@pytest.fixture
def trained(tmp_path, prepared):
    out = tmp_path / "run"
    assert cli.main(["train", "--data", str(prepared), "--out", str(out), *FAST]) == 0
    return out


# ---------------------------------------------------------------------------
# preprocess


def test_preprocess_writes_files_and_stats(prepared, capsys):
    for name in ("train.txt", "test.txt", "vocab.txt", "stats.txt"):
        assert (prepared / name).is_file()
    stats = block((prepared / "stats.txt").read_text())
    assert stats["format"] == "yoochoose"
    assert int(stats["train_sessions"]) > 0 and int(stats["test_sessions"]) > 0
    assert stats["vocab_hash"] == ItemVocabulary.load(prepared / "vocab.txt").digest()


def test_preprocess_is_deterministic(tmp_path, raw_log, prepared):
    again = tmp_path / "again"
    assert cli.main(["preprocess", "--data", str(raw_log), "--format", "yoochoose", "--out", str(again)]) == 0
    for name in ("train.txt", "test.txt", "vocab.txt", "stats.txt"):
        assert (again / name).read_bytes() == (prepared / name).read_bytes()


def test_recent_fraction_keeps_two_of_128(tmp_path):
    # 128 older sessions one minute apart plus 4 on the last day
    sessions = [["1", "2", "3"]] * 128 + [["1", "2"], ["2", "3"], ["3", "1"], ["1", "3"]]
    log = write_yoochoose(tmp_path / "c.dat", sessions, day_of=lambda i: 0 if i < 128 else 5)
    out = tmp_path / "p"
    code = cli.main(["preprocess", "--data", str(log), "--format", "yoochoose", "--fraction", "1/64",
                     "--out", str(out)])
    assert code == 0
    stats = block((out / "stats.txt").read_text())
    assert stats["train_sessions"] == "2"
    assert stats["test_sessions"] == "4"


def test_preprocess_missing_input(tmp_path, capsys):
    code = cli.main(["preprocess", "--data", str(tmp_path / "nope.dat"), "--format", "yoochoose",
                     "--out", str(tmp_path / "o")])
    assert code == 2
    assert "not found" in capsys.readouterr().err


def test_preprocess_mostly_garbage_fails(tmp_path):
    path = tmp_path / "bad.dat"
    path.write_text("1,notatime,5,0\n" * 20 + "2,2014-04-01T00:00:00.000Z,5,0\n")
    assert cli.main(["preprocess", "--data", str(path), "--format", "yoochoose", "--out", str(tmp_path / "o")]) == 2


def test_bad_flag_is_an_input_error(capsys):
    assert cli.main(["train", "--no-such-flag"]) == 2


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert "preprocess" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# train


def test_train_writes_checkpoint_log_and_figure(trained):
    assert (trained / "checkpoint.tagn").read_bytes()[:4] == b"TAGN"
    assert (trained / "training.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    lines = (trained / "train_log.csv").read_text().splitlines()
    assert lines[0].startswith("# started ")
    assert lines[1] == "epoch, lr, train_loss, val_p20, val_mrr20"
    assert len(lines) == 4


def test_same_seed_reproduces_log_and_checkpoint(tmp_path, prepared, trained):
    again = tmp_path / "again"
    assert cli.main(["train", "--data", str(prepared), "--out", str(again), *FAST]) == 0
    a = (trained / "train_log.csv").read_text().splitlines()[1:]
    b = (again / "train_log.csv").read_text().splitlines()[1:]
    assert a == b
    assert (trained / "checkpoint.tagn").read_bytes() == (again / "checkpoint.tagn").read_bytes()


@pytest.mark.parametrize("variant", ["L", "Att"])
def test_variant_flag_is_stored_in_checkpoint(tmp_path, prepared, variant):
    out = tmp_path / variant
    assert cli.main(["train", "--data", str(prepared), "--out", str(out), "--variant", variant, *FAST]) == 0
    from tagnn.training import load_checkpoint

    ckpt = load_checkpoint(out / "checkpoint.tagn")
    assert ckpt.config.variant == variant
    assert ("W_3" in ckpt.tensors) == (variant != "L")


def test_loss_flag_routes_to_binary_form(tmp_path, prepared, trained):
    out = tmp_path / "eq13"
    assert cli.main(["train", "--data", str(prepared), "--out", str(out), "--loss", "eq13", *FAST]) == 0
    from tagnn.training import load_checkpoint

    assert load_checkpoint(out / "checkpoint.tagn").config.loss == "eq13"
    a = (trained / "train_log.csv").read_text().splitlines()[2].split(", ")[2]
    b = (out / "train_log.csv").read_text().splitlines()[2].split(", ")[2]
    assert float(b) > float(a)  # the extra negative terms only add to the loss


def test_train_on_raw_log_is_rejected(tmp_path, raw_log, capsys):
    code = cli.main(["train", "--data", str(raw_log), "--format", "yoochoose", "--out", str(tmp_path / "o")])
    assert code == 2
    assert "preprocess" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_defaults_to_k20(tmp_path, prepared, trained, capsys):
    out = tmp_path / "eval"
    assert cli.main(["evaluate", "--data", str(prepared), "--checkpoint", str(trained / "checkpoint.tagn"),
                     "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    values = block(printed)
    assert set(values) == {"precision_at_20", "mrr_at_20", "examples"}
    assert 0 <= float(values["mrr_at_20"]) <= float(values["precision_at_20"]) <= 100
    assert (out / "metrics.txt").read_text() == printed
    assert (out / "hit_curve.png").is_file()


def test_evaluate_other_k(prepared, trained, capsys):
    assert cli.main(["evaluate", "--data", str(prepared), "--checkpoint", str(trained / "checkpoint.tagn"),
                     "--k", "5", "--out", str(trained / "e5")]) == 0
    assert "precision_at_5=" in capsys.readouterr().out


def test_evaluate_with_foreign_vocabulary(tmp_path, prepared, trained, capsys):
    other = tmp_path / "vocab.txt"
    ItemVocabulary(["a", "b", "c"]).save(other)
    code = cli.main(["evaluate", "--test", str(prepared / "test.txt"), "--vocab", str(other),
                     "--checkpoint", str(trained / "checkpoint.tagn")])
    assert code == 3
    assert "vocabulary" in capsys.readouterr().err


def test_evaluate_corrupt_checkpoint(tmp_path, prepared, trained):
    bad = tmp_path / "bad.tagn"
    raw = bytearray((trained / "checkpoint.tagn").read_bytes())
    raw[100] ^= 0xFF
    bad.write_bytes(bytes(raw))
    assert cli.main(["evaluate", "--data", str(prepared), "--checkpoint", str(bad)]) == 3


def test_evaluate_missing_checkpoint(tmp_path, prepared):
    assert cli.main(["evaluate", "--data", str(prepared), "--checkpoint", str(tmp_path / "x.tagn")]) == 2


# ---------------------------------------------------------------------------
# ablate


def test_ablate_reports_every_variant(tmp_path, prepared, capsys):
    out = tmp_path / "ablate"
    args = ["ablate", "--data", str(prepared), "--out", str(out), "--d", "4", "--epochs", "1", "--batch", "100"]
    assert cli.main(args) == 0
    text = (out / "ablation.txt").read_text()
    rows = [line.split()[0] for line in text.splitlines()[2:] if line and "=" not in line]
    assert rows == list(VARIANTS)
    assert (out / "ablation.png").is_file()
    for v in VARIANTS:
        assert (out / v / "checkpoint.tagn").is_file()


# ---------------------------------------------------------------------------
# predict


def _predict(prepared, trained, session, *extra):
    return cli.main(["predict", "--data", str(prepared), "--checkpoint", str(trained / "checkpoint.tagn"),
                     "--session", session, *extra])


def _first_item(prepared):
    return ItemVocabulary.load(prepared / "vocab.txt").ids


def test_predict_single_item_session(prepared, trained, capsys):
    ids = _first_item(prepared)
    assert _predict(prepared, trained, ids[0]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == min(20, len(ids))
    ranks = [int(line.split()[0]) for line in lines]
    probs = [float(line.split()[2]) for line in lines]
    assert ranks == list(range(1, len(lines) + 1))
    assert probs == sorted(probs, reverse=True)
    assert all(line.split()[1] in ids for line in lines)


def test_predict_probabilities_sum_to_one(prepared, trained, capsys):
    ids = _first_item(prepared)
    assert _predict(prepared, trained, f"{ids[0]},{ids[1]},{ids[0]}", "--check-normalization") == 0
    out = capsys.readouterr().out
    total = float(re.search(r"probability_sum=([0-9.]+)", out).group(1))
    assert abs(total - 1.0) <= 1e-6


def test_predict_unknown_item(prepared, trained, capsys):
    assert _predict(prepared, trained, "not-an-item") == 4
    assert "not-an-item" in capsys.readouterr().err


def test_predict_is_repeatable(prepared, trained, capsys):
    ids = _first_item(prepared)
    _predict(prepared, trained, ",".join(ids[:3]))
    first = capsys.readouterr().out
    _predict(prepared, trained, ",".join(ids[:3]))
    assert capsys.readouterr().out == first


def test_predict_dump_graph(prepared, trained, capsys):
    ids = _first_item(prepared)
    assert _predict(prepared, trained, f"{ids[0]},{ids[1]}", "--dump-graph") == 0
    assert f"{ids[0]} -> {ids[1]} : 1" in capsys.readouterr().out


# ---------------------------------------------------------------------------
# configuration


def test_config_file_and_flag_precedence(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# comment\nlr = 0.01\nd=16\nvariant=Avg  # trailing\n")
    cfg = cli.resolve_config(cli.read_config_file(path), {"d": 32})
    assert (cfg.lr, cfg.d, cfg.variant, cfg.batch) == (0.01, 32, "Avg", 100)


def test_unknown_config_key(tmp_path, prepared):
    path = tmp_path / "run.cfg"
    path.write_text("learning_rate=0.1\n")
    assert cli.main(["train", "--data", str(prepared), "--config", str(path)]) == 2


SAMPLES = {"lr": ["0.5", "0.02"], "d": ["8", "64"], "epochs": ["3", "9"], "variant": ["L", "Att"],
           "fraction": ["1/64", "0.5"], "seed": ["1", "7"]}


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.dictionaries(st.sampled_from(sorted(SAMPLES)), st.integers(0, 1)),
       st.dictionaries(st.sampled_from(sorted(SAMPLES)), st.integers(0, 1)))
def test_precedence_on_random_subsets(file_pick, flag_pick):
    file_values = {k: SAMPLES[k][i] for k, i in file_pick.items()}
    flag_values = {k: cli.SETTINGS[k][0](SAMPLES[k][i]) for k, i in flag_pick.items()}
    cfg = cli.resolve_config(file_values, flag_values)
    for key, (parse, default) in cli.SETTINGS.items():
        if key in flag_values:
            expected = flag_values[key]
        elif key in file_values:
            expected = parse(file_values[key])
        else:
            expected = default
        assert getattr(cfg, key) == expected

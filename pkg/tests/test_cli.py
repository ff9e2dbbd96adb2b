import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from larslab import engine as E
from larslab.cli import main, parse_bytes


def rows_of(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_parse_bytes():
    assert parse_bytes("1KB") == 1024
    assert parse_bytes("2mb") == 2 * 1024 ** 2
    assert parse_bytes("512") == 512


def test_memscan_rows_and_slopes(tmp_path, capsys):
    out = tmp_path / "scan.csv"
    assert main(["memscan", "--S-grid", "64,128,256", "--adapters", "lars,lora", "--out", str(out)]) == 0
    rows = rows_of(out)
    assert len(rows) == 6
    assert len({r["step_peak_adapter_bytes"] for r in rows[:3]}) == 1
    text = capsys.readouterr().out
    assert "growth-rate reduction" in text and "R2 1.000000" in text


def test_memscan_empty_grid_is_usage_error(tmp_path):
    assert main(["memscan", "--S-grid", "", "--out", str(tmp_path / "x.csv")]) == 2


def test_memscan_budget(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["memscan", "--S-grid", "64,128,256", "--budget", "1KB", "--out", str(out)]) == 0
    assert all(r["step_peak_adapter_bytes"] == "exceeds_budget" for r in rows_of(out))


def test_memscan_unwritable_path(tmp_path, capsys):
    code = main(["memscan", "--S-grid", "64,128", "--out", str(tmp_path / "nope" / "x.csv")])
    assert code != 0
    assert "cannot write" in capsys.readouterr().err


def test_gradcheck_default_and_rank_one(capsys):
    assert main(["gradcheck"]) == 0
    assert main(["gradcheck", "--R", "1"]) == 0
    out = capsys.readouterr().out
    for name in ("A_pool", "W_x", "W_h", "tau1", "tau2", "M_mix", "B_pool", "alpha"):
        assert name in out


@pytest.fixture
def broken_sigmoid(monkeypatch):
    def install(bwd):
        fwd, _ = E._PRIMITIVES["sigmoid"]
        monkeypatch.setitem(E._PRIMITIVES, "sigmoid", (fwd, bwd))
    return install


def test_gradcheck_catches_corrupted_backward(broken_sigmoid):
    broken_sigmoid(lambda g, saved, ctx, needs: [g * saved[0]])  # drops the (1 - y) factor
    assert main(["gradcheck", "--R", "2"]) == 1


def test_gradcheck_non_finite_names_tensor(broken_sigmoid, capsys):
    broken_sigmoid(lambda g, saved, ctx, needs: [np.full_like(g, np.nan)])
    assert main(["gradcheck", "--R", "2"]) == 1
    err = capsys.readouterr().err
    assert "non-finite" in err and "attn_o.A_pool" in err


def test_train_zero_steps(tmp_path):
    out = tmp_path / "r.json"
    assert main(["train", "--steps", "0", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["report"]["losses"] == []


def test_train_report_reproducible(tmp_path, capsys):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for path in (a, b):
        assert main(["train", "--steps", "20", "--seed", "3", "--out", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes()
    doc = json.loads(a.read_text())
    assert doc["report"]["tokens_per_sec"] is None
    assert doc["config"]["backbone"]["seed"] == 3
    assert "final_acc=" in capsys.readouterr().out


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_exit_code(tmp_path, monkeypatch, capsys):
    import larslab.cli as cli
    real = cli.build_backbone

    def poisoned(cfg):
        model = real(cfg)
        model.weights["head"].data[...] = np.inf
        return model
    monkeypatch.setattr(cli, "build_backbone", poisoned)
    assert main(["train", "--steps", "3"]) == 1
    assert "step 0" in capsys.readouterr().err


def _table(text):
    rows = {}
    for line in text.splitlines():
        parts = line.split()
        if len(parts) == 8 and parts[1].isdigit():
            rows[(parts[0], int(parts[1]))] = [int(p) for p in parts[2:]]
    return rows


def test_estimate_verify_and_toggles(capsys):
    assert main(["estimate", "--verify", "--adapters", "lars,lora", "--S", "32"]) == 0
    out = capsys.readouterr().out
    assert "MISMATCH" not in out and "mismatches: 0" in out
    main(["estimate", "--S", "64"])
    plain = _table(capsys.readouterr().out)[("lars-fixed", 64)]
    main(["estimate", "--S", "64", "--flash"])
    flash = _table(capsys.readouterr().out)[("lars-fixed", 64)]
    main(["estimate", "--S", "64", "--gc-factor", "0.5"])
    half = _table(capsys.readouterr().out)[("lars-fixed", 64)]
    assert flash[3] < plain[3] and flash[4] == plain[4]
    assert half[3] * 2 == plain[3]


def test_config_errors_exit_2(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"backbone": {"width": 3}}))
    assert main(["estimate", "--config", str(cfg)]) == 2
    assert main(["gradcheck", "--adapter", "prefix"]) == 2
    with pytest.raises(SystemExit) as info:
        main(["nonsense"])
    assert info.value.code == 2


def test_seed_env(tmp_path, monkeypatch):
    monkeypatch.setenv("LARSLAB_SEED", "9")
    out = tmp_path / "r.json"
    assert main(["train", "--steps", "0", "--out", str(out)]) == 0
    assert json.loads(out.read_text())["config"]["train"]["seed"] == 9


def test_niah_writes_rows(tmp_path, capsys):
    out = tmp_path / "n.csv"
    assert main(["niah", "--steps", "5", "--S", "16", "--out", str(out)]) == 0
    rows = rows_of(out)
    assert [r["adapter"] for r in rows] == ["lars", "lora"]
    assert "chance 0.125" in capsys.readouterr().out


def test_help_lists_defaults():
    out = subprocess.run([sys.executable, "-m", "larslab", "--help"], capture_output=True,
                         text=True, check=True).stdout
    assert "warmup_steps" in out and "LARSLAB_SEED" in out

import io
import json
from pathlib import Path

import pytest

from flexlora import cli
from flexlora.sweeps import ROUNDS_COLUMNS, SPECTRA_COLUMNS, SWEEPS

EXAMPLE = Path(__file__).parent.parent / "configs" / "quick.cfg"


def run(argv):
    out = io.StringIO()
    code = cli.main(argv, stdout=out)
    return code, out.getvalue()


def lines(path):
    return Path(path).read_text().splitlines()


@pytest.fixture(scope="module")
def quick_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("quick")
    code, _ = run(["run", str(EXAMPLE), "--out", str(out), "--set", "fed.max_rounds=3"])
    assert code == 0
    return out


def test_run_writes_golden_headers(quick_run):
    rounds = lines(quick_run / "rounds.csv")
    spectra = lines(quick_run / "spectra.csv")
    assert rounds[0].startswith("# config_hash=") and rounds[0].endswith("seeds=0,1")
    assert spectra[0].endswith("seeds=0")
    assert rounds[1] == ",".join(ROUNDS_COLUMNS)
    assert spectra[1] == ",".join(SPECTRA_COLUMNS)
    assert rounds[1] == "round,strategy,distribution,seed,train_loss,val_loss,zeroshot_loss,cost_per_round"
    assert spectra[1] == "round,layer,index,sigma,error_ratio"
    assert len(rounds) == 2 + 2 * 3


def test_run_summary_json(quick_run):
    summary = json.loads((quick_run / "summary.json").read_text())
    assert summary["seeds"] == [0, 1]
    assert set(summary["per_seed"]) == {"0", "1"}
    assert summary["fed"]["max_rounds"] == 3
    header, _ = cli.read_csv(quick_run / "rounds.csv")
    assert header == f"# config_hash={summary['config_hash']} seeds=0,1"


def test_run_is_deterministic(quick_run, tmp_path):
    code, _ = run(["run", str(EXAMPLE), "--out", str(tmp_path), "--set", "fed.max_rounds=3"])
    assert code == 0
    for name in ("rounds.csv", "spectra.csv", "summary.json"):
        assert (tmp_path / name).read_bytes() == (quick_run / name).read_bytes()


def test_zero_rounds_gives_header_only(tmp_path):
    code, _ = run(["run", str(EXAMPLE), "--out", str(tmp_path), "--set", "fed.max_rounds=0"])
    assert code == 0
    assert len(lines(tmp_path / "rounds.csv")) == 2
    assert len(lines(tmp_path / "spectra.csv")) == 2


def test_missing_config_exits_two(tmp_path, capsys):
    code, _ = run(["run", str(tmp_path / "absent.cfg")])
    assert code == 2
    assert "absent.cfg" in capsys.readouterr().err


def test_invalid_key_exits_two(tmp_path, capsys):
    code, _ = run(["run", str(EXAMPLE), "--out", str(tmp_path), "--set", "fed.colour=red"])
    assert code == 2
    assert "fed.colour" in capsys.readouterr().err


def test_naive_with_mixed_ranks_exits_one(tmp_path, capsys):
    code, _ = run(["run", str(EXAMPLE), "--out", str(tmp_path), "--set", "fed.strategy=naive"])
    assert code == 1
    assert "HeterogeneousRanksUnsupported" in capsys.readouterr().err
    assert not (tmp_path / "rounds.csv").exists()


def test_unknown_preset_and_bad_usage(capsys):
    assert run(["sweep", "table9"])[0] == 2
    assert "table9" in capsys.readouterr().err
    assert run([])[0] == 2
    assert run(["launch"])[0] == 2
    assert set(SWEEPS) == {"table2", "fig5a", "fig4b", "table4", "fig6"}


def test_verify_inject_fault_fails_and_names_check():
    code, text = run(["verify", "--inject-fault"])
    assert code == 1
    assert "adapter.roundtrip" in text.splitlines()[-1]
    assert "[FAIL] adapter" in text


def test_csv_cells_roundtrip(tmp_path):
    table = cli.Table(("a", "b", "c"), [(1, 0.1 + 0.2, None)])
    cli.write_csv(tmp_path / "t.csv", table, "abc", (0,))
    header, rows = cli.read_csv(tmp_path / "t.csv")
    assert header == "# config_hash=abc seeds=0"
    assert rows == [{"a": "1", "b": repr(0.1 + 0.2), "c": ""}]
    assert float(rows[0]["b"]) == 0.1 + 0.2

import json
import subprocess
import sys

import pytest

from agrimon.cli import main


@pytest.fixture
def repro(tmp_path, capsys):
    assert main(["scenario", "paper_repro.json", "--out", str(tmp_path)]) == 0
    summary = json.loads(capsys.readouterr().out)
    return tmp_path, summary


def test_bundled_scenario(repro):
    out, summary = repro
    assert summary["rows"] == 432 and summary["rejected"] == 0
    assert summary["received"] == summary["stored"] + summary["duplicates"]
    assert (out / "store.jsonl").read_text().count("\n") == 432


def test_scenario_is_byte_identical_across_runs(tmp_path):
    for sub in ("a", "b"):
        assert main(["scenario", "paper_repro.json", "--out", str(tmp_path / sub)]) == 0
    for name in ("store.jsonl", "deliveries.jsonl", "stats.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_compare_and_query(repro, capsys):
    out, _ = repro
    store = str(out / "store.jsonl")
    assert main(["compare", "--store", store, "--a", "n1", "--b", "n2", "--name", "temperature"]) == 0
    lines = capsys.readouterr().out.splitlines()
    head = lines[0].split()
    assert head[0].startswith("max_diff=") and float(head[0][9:]) <= 0.3
    assert head[1] == "at" and head[2].startswith("t=")
    assert lines[1] == "t,value_a,value_b,diff" and len(lines) == 2 + 36

    assert main(["compare", "--store", store, "--a", "n1", "--b", "n1", "--name", "humidity",
                 "--csv", str(out / "p.csv")]) == 0
    assert capsys.readouterr().out.startswith("max_diff=0 ")
    assert (out / "p.csv").read_text().startswith("t,value_a,value_b,diff\n")

    assert main(["query", "--store", store, "--node", "n2", "--name", "wind_speed",
                 "--from", "0", "--to", "24000"]) == 0
    assert capsys.readouterr().out.splitlines()[0] == "t,node,name,value"


def test_empty_results_have_their_own_exit_code(repro, capsys):
    out, _ = repro
    store = str(out / "store.jsonl")
    assert main(["query", "--store", store, "--node", "nobody"]) == 3
    assert capsys.readouterr().out == "t,node,name,value\n"
    assert main(["compare", "--store", store, "--a", "n1", "--b", "zz", "--name", "humidity"]) == 3


def test_missing_store(tmp_path, capsys):
    assert main(["query", "--store", str(tmp_path / "none.jsonl")]) == 4
    assert main(["compare", "--store", str(tmp_path / "none.jsonl"), "--a", "a", "--b", "b",
                 "--name", "humidity"]) == 4


def test_commands_do_not_modify_the_store(repro):
    out, _ = repro
    store = out / "store.jsonl"
    before = store.read_bytes()
    main(["query", "--store", str(store)])
    main(["compare", "--store", str(store), "--a", "n1", "--b", "n2", "--name", "temperature"])
    assert store.read_bytes() == before


def test_spec_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nodes": [{"id": "a", "protocol": "wifi"}, {"id": "a", "protocol": "zigbee"}]}))
    assert main(["scenario", str(bad), "--out", str(tmp_path)]) == 2
    assert "'a'" in capsys.readouterr().err
    assert main(["scenario", str(tmp_path / "missing.json")]) == 2


def test_config_dir_env(tmp_path, monkeypatch, capsys):
    cfg = tmp_path / "cfg"
    cfg.mkdir()
    (cfg / "one.json").write_text(json.dumps({"nodes": [{"id": "w", "protocol": "wifi"}],
                                              "outputs": {"store": "s.jsonl"}}))
    monkeypatch.setenv("AGRIMON_CONFIG_DIR", str(cfg))
    assert main(["scenario", "one.json", "--out", str(tmp_path / "o")]) == 0
    assert json.loads(capsys.readouterr().out)["rows"] == 216


def test_usage_errors():
    with pytest.raises(SystemExit) as exc:
        main(["node", "--broker", "127.0.0.1:1", "--protocol", "lora", "--id", "x"])
    assert exc.value.code == 2
    assert main(["node", "--broker", "127.0.0.1:99999", "--protocol", "wifi", "--id", "x"]) == 2
    assert main(["node", "--broker", "127.0.0.1:1", "--protocol", "wifi", "--id", "much-too-long"]) == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "agrimon.cli", "scenario", "paper_repro.json", "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["stored"] == 432

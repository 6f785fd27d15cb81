import csv

import pytest

from dmsync.bench import CSV_COLUMNS
from dmsync.cli import main, read_config, UsageError

SMALL = ["--clients", "4", "--keys", "100", "--ops", "20"]


def test_bench_prints_csv_row(capsys):
    assert main(["bench", "--mode", "cider", "--theta", "0.99", "--mix", "write_intensive",
                 *SMALL]) == 0
    rows = list(csv.reader(capsys.readouterr().out.splitlines()))
    assert rows[0] == list(CSV_COLUMNS) and len(rows) == 2 and rows[1][0] == "cider"


def test_bench_sweep_table_and_out_file(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["bench", "--mode", "osync,cider", "--out", str(out), *SMALL]) == 0
    err = capsys.readouterr().err
    assert "verbs/op" in err and "vs osync" in err
    rows = list(csv.reader(out.read_text().splitlines()))
    assert [r[0] for r in rows[1:]] == ["osync", "cider"]


def test_local_wc_flag(capsys):
    assert main(["bench", "--mode", "mcs", "--local-wc", *SMALL]) == 0
    assert capsys.readouterr().out.splitlines()[1].startswith("mcs+lwc,")


@pytest.mark.parametrize("argv", [
    ["bench", "--mix", "nope"],
    ["bench", "--mode", "spin"],
    ["bench", "--clients", "6", "--nodes", "4"],
    ["bench", "--aimd-factor", "1"],
    ["microtest", "-n", "1"],
    ["verify", "nosuch"],
    [],
])
def test_usage_errors_exit_2(argv):
    assert main(argv) == 2


def test_config_file_with_flag_override(tmp_path, capsys):
    p = tmp_path / "run.cfg"
    p.write_text("# desk run\nmode = mcs\nclients=8\nkeys=50\nops=10\nmix=write_only\n"
                 "initial-credit=10\n")
    assert main(["--config", str(p), "bench", "--clients", "4"]) == 0
    row = dict(zip(CSV_COLUMNS, list(csv.reader(capsys.readouterr().out.splitlines()))[1]))
    assert (row["mode"], row["clients"], row["keys"], row["mix"]) == ("mcs", "4", "50",
                                                                      "write_only")


def test_bad_config(tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("bogus=1\n")
    assert main(["--config", str(p), "bench"]) == 2
    p.write_text("just words\n")
    with pytest.raises(UsageError):
        read_config(str(p))
    assert main(["--config", str(tmp_path / "missing.cfg"), "bench"]) == 2
    p.write_text("mix=bogus\n")
    assert main(["--config", str(p), "bench"]) == 2


def test_verify_suites_pass(capsys):
    assert main(["verify", "gwc", "--seeds", "5"]) == 0
    assert main(["verify", "epoch"]) == 0
    assert main(["verify", "linearizability", "--seeds", "3", "--mode", "cider,mcs"]) == 0
    assert main(["verify", "fencing", "--seeds", "5"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_verify_mutation_fails_with_witness(tmp_path, capsys):
    w = tmp_path / "w.json"
    assert main(["verify", "fencing", "--mutation", "skip-version-bump", "--seeds", "0",
                 "--witness", str(w)]) == 1
    assert "FAIL" in capsys.readouterr().out
    assert "delete_inside_combining_queue" in w.read_text()


def test_verify_seed_replay(capsys):
    assert main(["verify", "linearizability", "--seed", "42", "--mode", "cider"]) == 0
    assert "(1 runs" in capsys.readouterr().out


def test_microtest_output(capsys):
    assert main(["microtest", "-n", "4"]) == 0
    out = capsys.readouterr().out
    assert "osync  ptr_cas_failures=6" in out and "cider  ptr_cas_failures=0" in out
    assert main(["microtest", "-n", "2"]) == 0
    assert "osync  ptr_cas_failures=1" in capsys.readouterr().out

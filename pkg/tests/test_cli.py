import pytest

from src.cli import EXIT_CONFIG, EXIT_OK, EXIT_VERIFY, main

TINY = """
id = "tiny"
producers = 1
seed = 3
chunk_size = "1KB"

[package]
image_count = 2
image_size = "{size}"

[expect]
restored = {restored}
"""


def _scenario(write_scenario, name="tiny.toml", size="2KB", restored=2):
    return write_scenario(TINY.format(size=size, restored=restored), name)


def test_gen_dataset(tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["gen-dataset", "--seed", "1", "--count", "2", "--size", "1KB", "--out", str(out)]) == EXIT_OK
    assert capsys.readouterr().out.strip() == str(out / "manifest.csv")
    assert (out / "img_002.bin").stat().st_size == 1024


def test_run_writes_report_and_prints_trace(tmp_path, write_scenario, capsys):
    path = _scenario(write_scenario)
    code = main(["run", "--scenario", str(path), "--out", str(tmp_path / "out"), "--work", str(tmp_path / "work")])
    assert code == EXIT_OK
    assert capsys.readouterr().out.startswith("trace ")
    assert (tmp_path / "out" / "summary.csv").is_file()


def test_run_with_seed_override_uses_temp_work_dir(tmp_path, write_scenario, capsys):
    path = _scenario(write_scenario)
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "a"), "--seed", "9"]) == EXIT_OK
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "b"), "--seed", "9"]) == EXIT_OK
    first, second = capsys.readouterr().out.split()[1::2]
    assert first == second
    assert (tmp_path / "a" / "transfers.csv").read_bytes() == (tmp_path / "b" / "transfers.csv").read_bytes()


def test_failed_expectation_exits_with_one(tmp_path, write_scenario):
    path = _scenario(write_scenario, restored=5)
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "out")]) == EXIT_VERIFY
    assert (tmp_path / "out" / "summary.csv").is_file()


def test_bad_scenario_exits_with_two(tmp_path, write_scenario):
    path = write_scenario('id = "x"\nproducers = 0\n', "bad.toml")
    assert main(["run", "--scenario", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert main(["run", "--scenario", str(tmp_path / "nope.toml"), "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_report_diff(tmp_path, write_scenario):
    small = _scenario(write_scenario, "small.toml")
    large = _scenario(write_scenario, "large.toml", size="4KB")
    for name, path in (("a", small), ("b", small), ("c", large)):
        assert main(["run", "--scenario", str(path), "--out", str(tmp_path / name)]) == EXIT_OK
    assert main(["report-diff", str(tmp_path / "a"), str(tmp_path / "b")]) == EXIT_OK
    assert main(["report-diff", str(tmp_path / "a"), str(tmp_path / "c")]) == EXIT_CONFIG
    assert main(["report-diff", str(tmp_path / "a"), str(tmp_path / "missing")]) == EXIT_CONFIG


@pytest.mark.parametrize(
    "extra",
    [
        ["--role", "producer"],
        ["--role", "producer", "--id", "PC1"],
        ["--role", "producer", "--id", "PC1", "--dataset", "d", "--request", "Sample PC1"],
        ["--role", "orchestrator", "--broker", "localhost:port"],
    ],
)
def test_node_argument_errors(extra):
    assert main(["node", *extra]) == EXIT_CONFIG


def test_unknown_log_level(tmp_path):
    args = ["--log-level", "loud", "gen-dataset", "--count", "1", "--size", "1", "--out", str(tmp_path)]
    assert main(args) == EXIT_CONFIG

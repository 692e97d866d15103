import csv
import io
import json

import pytest

from ucplab.expcli import ConfigError, RunError, load_record, parse_config, run
from ucplab.expcli.cli import main
from ucplab.expcli.plotdata import emit_plotdata

UCP = """
kind = "ucp"
name = "small"
[domain]
lengths = [4.0]
bc = "N"
points = 64
[sweep]
delta_over_G = [0.1, 0.2, 0.4]
E = [0.0, 5.0]
"""

WEGNER = """
kind = "wegner"
[ensemble]
amplitude = 4.0
[params]
E = 2.0
E0 = 3.0
M = 60
[sweep]
epsilon = [0.04, 0.08, 0.16]
L = [4, 8]
"""


def write(tmp_path, text, name="cfg.toml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# --- config parsing ---------------------------------------------------------------------------------


def test_minimal_ucp_defaults():
    cfg = parse_config(UCP)
    assert cfg.kind == "ucp" and cfg.name == "small"
    assert cfg.params["G"] == 1.0 and cfg.params["placement"] == "center"
    assert cfg.sweep["seeds"] == [0]
    assert cfg.seed == 0 and cfg.output == "results"
    assert cfg.digest == parse_config(UCP).digest
    assert cfg.digest != parse_config(UCP + "\n# comment\n").digest
    assert parse_config(UCP, seed_override=5).seed == 5
    assert parse_config(UCP, seed_override=5).digest != cfg.digest


def test_delta_over_G_message():
    with pytest.raises(ConfigError, match="delta < G/2"):
        parse_config(UCP.replace("[0.1, 0.2, 0.4]", "[0.1, 0.6]"))


def test_all_errors_collected():
    text = UCP.replace('bc = "N"', 'bc = "N"\nbogus = 1').replace("points = 64", "points = -3").replace(
        "E = [0.0, 5.0]", "E = []")
    with pytest.raises(ConfigError) as exc:
        parse_config(text)
    msgs = exc.value.errors
    assert any("domain.bogus" in m for m in msgs)
    assert any("domain.points" in m for m in msgs)
    assert any("sweep.E" in m for m in msgs)


def test_strict_and_lenient_unknown_keys():
    text = UCP + "\n[params]\ncolour = 'red'\n"
    with pytest.raises(ConfigError, match="params.colour"):
        parse_config(text)
    cfg = parse_config(text, strict=False)
    assert any("params.colour" in w for w in cfg.warnings)


def test_kind_and_toml_errors():
    with pytest.raises(ConfigError, match="kind"):
        parse_config('kind = "heat"\n')
    with pytest.raises(ConfigError, match="TOML"):
        parse_config("kind = \n")


def test_potential_table_grammar():
    base = UCP + '\n[potential]\nkind = "sum"\nterms = [{kind = "constant", value = 2.0}, {kind = "power", gamma = 0.3}]\n'
    cfg = parse_config(base)
    (pid, pot), = cfg.potentials(cfg.build_domain())
    assert pid == "constant(2)+power"
    with pytest.raises(ConfigError, match="not admissible"):
        parse_config(UCP + '\n[potential]\nkind = "power"\ngamma = 0.7\n')
    with pytest.raises(ConfigError, match="not both"):
        parse_config(UCP.replace("[sweep]", '[sweep]\npotentials = ["zero"]') + '\n[potential]\nkind = "zero"\n')


def test_kind_specific_checks():
    with pytest.raises(ConfigError, match="E0"):
        parse_config(WEGNER.replace("E0 = 3.0", "E0 = 2.1"))
    with pytest.raises(ConfigError, match="exactly one of b or center_energy"):
        parse_config('kind = "ils"\n[sweep]\nL = [8]\n')
    with pytest.raises(ConfigError, match="2 - sqrt"):
        parse_config('kind = "carleman-lr"\n[params]\nrho = 0.6\n[sweep]\nbeta = [1.0]\n')


# --- runs and output -----------------------------------------------------------------------------------


def test_empty_sweep_writes_nothing(tmp_path):
    cfg = write(tmp_path, UCP.replace("delta_over_G = [0.1, 0.2, 0.4]", "delta_over_G = []"))
    assert main(["ucp", "--config", cfg, "--out", str(tmp_path / "out")]) == 2
    assert not (tmp_path / "out").exists()


@pytest.fixture(scope="module")
def ucp_record(tmp_path_factory):
    out = tmp_path_factory.mktemp("ucp")
    return run(parse_config(UCP), out), out


def test_csv_layout(ucp_record):
    rec, out = ucp_record
    with open(rec.csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    assert header[-1] == "config_digest"
    assert "delta[length]" in header and "E[energy]" in header and "observed[1]" in header
    assert all(r[-1] == rec.digest for r in rows[1:])
    assert len(rows) - 1 == len(rec.rows) == 6
    assert rec.meta["N_calibrated"] > 0
    assert rec.ok and rec.exit_code == 0


def test_json_mirror(ucp_record):
    rec, _ = ucp_record
    data = json.loads(open(rec.json_path).read())
    assert data["config_digest"] == rec.digest and data["kind"] == "ucp"
    back = load_record(rec.json_path)
    assert back.rows == rec.rows


def test_rerun_byte_identical(ucp_record, tmp_path):
    rec, _ = ucp_record
    again = run(parse_config(UCP), tmp_path)
    assert open(rec.csv_path, "rb").read() == open(again.csv_path, "rb").read()


def test_plotdata_ucp(ucp_record):
    rec, _ = ucp_record
    buf = io.StringIO()
    n = emit_plotdata([rec], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].split("\t") == ["potential", "E", "seed", "delta_over_G", "observed", "predicted"]
    assert n == len(lines) - 1 == 6
    buf2 = io.StringIO()
    emit_plotdata([rec, rec], buf2)
    assert buf2.getvalue().splitlines()[0].startswith("run\t")


def test_plotdata_errors(ucp_record, tmp_path):
    rec, _ = ucp_record
    with pytest.raises(ValueError, match="no result"):
        emit_plotdata([], io.StringIO())
    w = run(parse_config(WEGNER), tmp_path)
    with pytest.raises(ValueError, match="mix"):
        emit_plotdata([rec, w], io.StringIO())
    buf = io.StringIO()
    emit_plotdata([w], buf)
    lines = buf.getvalue().splitlines()
    assert lines[0].split("\t") == ["epsilon", "L", "mean", "stderr", "fit"]
    assert len(lines) == 1 + 6


def test_run_error_names_coordinates(tmp_path):
    text = UCP.replace('[sweep]', '[params]\nmode = "single"\nk = 50\n[sweep]')
    with pytest.raises(RunError, match="potential=zero"):
        run(parse_config(text), tmp_path)


# --- command line ------------------------------------------------------------------------------------


def test_cli_success_and_outputs(tmp_path, capsys):
    cfg = write(tmp_path, UCP)
    assert main(["ucp", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    assert (tmp_path / "o" / "small.csv").exists() and (tmp_path / "o" / "small.json").exists()
    assert "PASS" in capsys.readouterr().out


def test_cli_config_errors(tmp_path):
    assert main(["ucp", "--config", str(tmp_path / "missing.toml")]) == 2
    bad = write(tmp_path, UCP.replace("[0.1, 0.2, 0.4]", "[0.7]"))
    assert main(["ucp", "--config", bad]) == 2
    assert main(["ghost", "--config", write(tmp_path, UCP, "ok.toml")]) == 2


def test_cli_fail_exit(tmp_path):
    text = UCP + "\n[calibration]\nN = 1e-6\n"
    cfg = write(tmp_path, text)
    # a tiny N predicts a bound near 1, which the observations cannot reach
    assert main(["ucp", "--config", cfg, "--out", str(tmp_path / "o")]) == 1


def test_cli_run_error_exit(tmp_path):
    cfg = write(tmp_path, UCP.replace('[sweep]', '[params]\nmode = "single"\nk = 50\n[sweep]'))
    assert main(["ucp", "--config", cfg, "--out", str(tmp_path / "o")]) == 3


def test_cli_validate(tmp_path, capsys):
    assert main(["validate", "--config", write(tmp_path, UCP)]) == 0
    assert "ok: ucp" in capsys.readouterr().out
    lenient = write(tmp_path, UCP + "\n[params]\nextra = 1\n", "lenient.toml")
    assert main(["validate", "--config", lenient]) == 2
    assert main(["validate", "--config", lenient, "--no-strict"]) == 0


def test_cli_jobs_and_seed(tmp_path):
    text = UCP.replace("[sweep]", '[sweep]\npotentials = ["zero", "cosine", "power"]\nseeds = [0, 1]')
    cfg = write(tmp_path, text)
    assert main(["ucp", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["ucp", "--config", cfg, "--out", str(tmp_path / "b"), "--jobs", "3"]) == 0
    a = (tmp_path / "a" / "small.csv").read_bytes()
    assert a == (tmp_path / "b" / "small.csv").read_bytes()
    main(["ucp", "--config", cfg, "--out", str(tmp_path / "c"), "--seed", "9"])
    assert a != (tmp_path / "c" / "small.csv").read_bytes()


def test_cli_plotdata(tmp_path, capsys):
    cfg = write(tmp_path, UCP)
    main(["ucp", "--config", cfg, "--out", str(tmp_path / "o")])
    capsys.readouterr()
    assert main(["plotdata", str(tmp_path / "o" / "small.json")]) == 0
    assert capsys.readouterr().out.startswith("potential\tE")
    assert main(["plotdata", str(tmp_path / "nothing.json")]) == 2

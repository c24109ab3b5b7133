import contextlib
import io
import pathlib
import re
import shutil

import pytest

from b4f.cli import build_parser, main

FIXTURES = pathlib.Path(__file__).parent / "fixtures"
SCENES = sorted(p.name for p in FIXTURES.glob("scene-*"))
SCENARIO = FIXTURES / "scene-b" / "scenario.txt"


def run(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        rc = main([str(a) for a in argv])
    return rc, out.getvalue(), err.getvalue()


def case_args(d):
    case = dict(tok.split("=", 1) for tok in (d / "case.txt").read_text().split())
    return case, [
        "investigate", "--ledger", d / "ledger.bin", "--disclosure", d / "disclosure",
        "--intersection", d / "intersection.txt",
        "--accident-time", case["accident_time"], "--vehicles", case["vehicles"],
    ]


@pytest.mark.parametrize("scene", SCENES)
def test_golden_investigation_output(scene):
    d = FIXTURES / scene
    _, argv = case_args(d)
    rc, out, _ = run(*argv)
    assert out == (d / "expected.txt").read_text()
    assert rc == (2 if scene == "scene-empty" else 0)


@pytest.mark.parametrize("scene", SCENES)
def test_fixtures_regenerate_byte_identical(scene, tmp_path):
    d = FIXTURES / scene
    case, _ = case_args(d)
    rc, _, _ = run("ledger", "export", "--scenario", d / "scenario.txt", "--until", case["until"],
                   "--out", tmp_path / "ledger.bin", "--disclosure-dir", tmp_path / "disclosure")
    assert rc == 0
    assert (tmp_path / "ledger.bin").read_bytes() == (d / "ledger.bin").read_bytes()
    for f in (d / "disclosure").iterdir():
        assert (tmp_path / "disclosure" / f.name).read_bytes() == f.read_bytes(), f.name


def test_scene_b_prints_expected_verdict():
    _, argv = case_args(FIXTURES / "scene-b")
    rc, out, _ = run("--quiet", *argv)
    assert out.splitlines() == ["seed=0", "verdict=vehicle_fault id=V1 rule=R1"]
    assert rc == 0


def test_investigate_exit_1_on_integrity_failure(tmp_path):
    d = FIXTURES / "scene-b"
    shutil.copytree(d / "disclosure", tmp_path / "disclosure")
    records = tmp_path / "disclosure" / "records.txt"
    lines = records.read_text().splitlines()
    party, hexed = lines[0].split()
    hexed = hexed[:-2] + ("00" if hexed[-2:] != "00" else "01")
    records.write_text("\n".join([f"{party} {hexed}"] + lines[1:]) + "\n")
    _, argv = case_args(d)
    argv[4] = tmp_path / "disclosure"
    rc, out, _ = run(*argv)
    assert rc == 1
    assert "integrity=fail" in out
    assert "verdict=vehicle_fault id=V1 rule=R1" in out


def test_verify_chain_exit_codes(tmp_path):
    good = (FIXTURES / "scene-b" / "ledger.bin").read_bytes()
    rc, out, _ = run("verify-chain", "--ledger", FIXTURES / "scene-b" / "ledger.bin")
    assert rc == 0 and "chain=ok" in out
    bad = bytearray(good)
    bad[len(bad) // 2] ^= 0xFF
    (tmp_path / "bad.bin").write_bytes(bytes(bad))
    rc, out, _ = run("verify-chain", "--ledger", tmp_path / "bad.bin")
    assert rc == 1 and "chain=corrupt" in out


def test_sim_run_metrics_deterministic(tmp_path):
    for name in ("a", "b"):
        rc, out, _ = run("--seed", "9", "sim", "run", "--scenario", SCENARIO, "--until", 30,
                         "--metrics", tmp_path / f"{name}.txt", "--trace", tmp_path / f"{name}.trace")
        assert rc == 0
        assert out.startswith("seed=9\n")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    assert (tmp_path / "a.trace").read_bytes() == (tmp_path / "b.trace").read_bytes()


def test_scenario_seed_is_reported():
    rc, out, _ = run("--quiet", "sim", "run", "--scenario", SCENARIO, "--until", 1)
    assert out.splitlines() == ["seed=11", "safety_violation=0"]


def test_seed_flag_after_subcommand():
    rc, out, _ = run("sim", "run", "--seed", "4", "--scenario", SCENARIO, "--until", 1, "--quiet")
    assert out.splitlines()[0] == "seed=4"


def test_ca_issue(tmp_path):
    rc, out, _ = run("--seed", 1, "ca", "issue", "--count", 3, "--start", 100, "--out", tmp_path / "c.txt")
    assert rc == 0
    windows = re.findall(r"valid_from=(\d+) valid_until=(\d+)", out)
    assert windows == [("100", "400"), ("400", "700"), ("700", "1000")]
    assert len((tmp_path / "c.txt").read_text().splitlines()) == 3


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["sim", "run", "--scenario", "x"],
    ["verify-chain", "--ledger", "x", "--bogus"],
    ["--seed", "-1", "verify-chain", "--ledger", "x"],
    ["ca", "issue", "--count", "0"],
    ["investigate", "--ledger", "a", "--disclosure", "b", "--accident-time", "x", "--vehicles", "V1"],
])
def test_bad_arguments_exit_64(argv):
    rc, out, err = run(*argv)
    assert rc == 64
    assert "usage" in err


def test_missing_file_is_error_not_usage(tmp_path):
    rc, out, _ = run("verify-chain", "--ledger", tmp_path / "nope.bin")
    assert rc == 1 and "error=" in out


def test_bad_scenario_reports_line(tmp_path):
    (tmp_path / "s.txt").write_text("validator N1\nwat\n")
    rc, out, _ = run("sim", "run", "--scenario", tmp_path / "s.txt", "--until", 1)
    assert rc == 1
    assert "line 2" in out


def _all_parsers(p):
    yield p
    for action in p._actions:
        if getattr(action, "choices", None) and isinstance(action.choices, dict):
            for sub in action.choices.values():
                yield from _all_parsers(sub)


def test_help_documents_every_flag():
    for p in _all_parsers(build_parser()):
        text = p.format_help()
        for action in p._actions:
            for flag in action.option_strings:
                assert flag in text
            if action.option_strings and action.dest != "help":
                assert action.help, f"{p.prog} {action.option_strings} has no help"


def test_help_exits_zero():
    rc, out, _ = run("investigate", "--help")
    assert rc == 0
    assert "--accident-time" in out

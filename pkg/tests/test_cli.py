from __future__ import annotations

import json

from fixtures import app_doc, crashy_app, echo_app, guard_app, mixed_app
from svcfuzz.appmodel import app_to_document
from svcfuzz.cli import main


def write_scenario(tmp_path, apps, name="scenario.json", corpus=None, seed=0, events=None):
    paths = []
    for app in apps:
        p = tmp_path / f"{app.app_id}_{app.version_id}.json"
        p.write_text(json.dumps(app_to_document(app)), encoding="utf-8")
        paths.append(p.name)
    doc = {"apps": paths, "seed": seed, "fault": {"rpc_failure_probability": 0.0, "latency_ms": 0}}
    if corpus:
        doc["corpus"] = corpus
    if events:
        doc["events"] = events
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def test_budget_zero_exits_clean_with_empty_report(tmp_path, capsys):
    scenario = write_scenario(tmp_path, [mixed_app(), echo_app()])
    out = tmp_path / "out"
    code = main(["fuzz", "run", "--scenario", str(scenario), "--app", "F",
                 "--budget", "0", "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["iterations"] == 0
    assert report["admissions"] == []


def test_unknown_flag_is_usage_error(capsys):
    assert main(["fuzz", "run", "--nonsense"]) == 1
    assert "usage" in capsys.readouterr().err.lower()


def test_missing_subcommand_is_usage_error(capsys):
    assert main([]) == 1


def test_crash_findings_exit_code_and_taxonomy(tmp_path):
    scenario = write_scenario(
        tmp_path, [crashy_app()],
        corpus=[{"app": "K", "handler": "poke", "args": ["0x05"]},
                {"app": "K", "handler": "poke", "args": ["0x32"]}],
    )
    out = tmp_path / "out"
    code = main(["fuzz", "run", "--scenario", str(scenario), "--app", "K",
                 "--budget", "200", "--out", str(out), "--n-min", "100000"])
    assert code == 2
    report = json.loads((out / "report.json").read_text())
    assert "Sys_Vul" in report["crashes"] or "Biz_Vul" in report["crashes"]


def test_store_persisted_and_seedstore_ls_rm(tmp_path, capsys):
    scenario = write_scenario(tmp_path, [mixed_app(), echo_app()])
    out = tmp_path / "out"
    assert main(["fuzz", "run", "--scenario", str(scenario), "--app", "F",
                 "--budget", "30", "--out", str(out)]) == 0
    store_dir = out / "store"
    assert main(["seedstore", "ls", "--store", str(store_dir)]) == 0
    listing = capsys.readouterr().out.strip().splitlines()
    listing = [line for line in listing if line.startswith("s")]
    assert listing
    seed_id = listing[0].split()[0]
    assert main(["seedstore", "rm", "--store", str(store_dir), "--seed-id", seed_id]) == 0
    assert main(["seedstore", "ls", "--store", str(store_dir)]) == 0
    remaining = [line for line in capsys.readouterr().out.splitlines() if line.startswith(seed_id + " ")]
    assert not remaining


def test_seedstore_refresh_command(tmp_path, capsys):
    scenario = write_scenario(tmp_path, [mixed_app(), echo_app()])
    out = tmp_path / "out"
    main(["fuzz", "run", "--scenario", str(scenario), "--app", "F", "--budget", "10", "--out", str(out)])
    code = main(["seedstore", "refresh", "--store", str(out / "store"),
                 "--scenario", str(scenario), "--app", "F"])
    assert code == 0
    assert "refreshed=" in capsys.readouterr().out


def test_replay_command(tmp_path, capsys):
    scenario = write_scenario(tmp_path, [mixed_app(), echo_app()])
    out = tmp_path / "out"
    main(["fuzz", "run", "--scenario", str(scenario), "--app", "F", "--budget", "10", "--out", str(out)])
    capsys.readouterr()
    store_dir = out / "store"
    seeds = list((store_dir / "seeds" / "F").glob("*.json"))
    seed_id = json.loads(seeds[0].read_text())["seed_id"]
    code = main(["replay", "--scenario", str(scenario), "--store", str(store_dir), "--seed-id", seed_id])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["divergences"] == 0


def test_iterate_command(tmp_path, capsys):
    old = write_scenario(
        tmp_path, [guard_app(version="v1", with_guard=False)], name="old.json",
        corpus=[{"app": "G", "handler": "g", "args": ["0x1000"]},
                {"app": "G", "handler": "g", "args": ["0xc800"]}],
    )
    new = write_scenario(tmp_path, [guard_app(version="v2", with_guard=True)], name="new.json")
    report_path = tmp_path / "iteration.json"
    code = main(["iterate", "--old", str(old), "--new", str(new),
                 "--budget", "4000", "--seed", "11", "--out", str(report_path)])
    assert code == 0
    doc = json.loads(report_path.read_text())
    assert doc["effectiveness"] > 0
    assert ["G", "g", "secret"] in doc["reached_diff_blocks"]


def test_taint_verify_command(tmp_path, capsys):
    from fixtures import block, emit, first_byte, handler_doc, op, ret
    from svcfuzz.appmodel import parse_app_spec

    app = parse_app_spec(app_doc("T", "v1", [handler_doc("t", ["src"], "b0", {
        "b0": block([emit("s0", op("add", first_byte("src"), 1))], ret(0)),
    })]))
    scenario = write_scenario(tmp_path, [app],
                              corpus=[{"app": "T", "handler": "t", "args": ["0x01"]}])
    candidates = tmp_path / "candidates.json"
    candidates.write_text(json.dumps([
        {"app": "T", "handler": "t", "param_index": 0, "sink_id": "s0"},
    ]), encoding="utf-8")
    code = main(["taint", "verify", "--candidates", str(candidates),
                 "-k", "50", "--scenario", str(scenario)])
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["confirmed"] == 1
    assert doc["results"][0]["verdict"] == "confirmed"


def test_report_rendering(tmp_path, capsys):
    scenario = write_scenario(tmp_path, [mixed_app(), echo_app()])
    out = tmp_path / "out"
    main(["fuzz", "run", "--scenario", str(scenario), "--app", "F", "--budget", "20", "--out", str(out)])
    capsys.readouterr()
    assert main(["report", str(out / "report.json")]) == 0
    text = capsys.readouterr().out
    assert "iterations" in text and "coverage" in text


def test_switch_file_written_and_honored(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["switch", "off", "--out", str(out)]) == 0
    assert json.loads((out / "switch.json").read_text())["state"] == "off"
    scenario = write_scenario(tmp_path, [mixed_app(), echo_app()])
    code = main(["fuzz", "run", "--scenario", str(scenario), "--app", "F",
                 "--budget", "50", "--out", str(out)])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["iterations"] == 0  # pre-set off switch halts selection immediately
    assert main(["switch", "on", "--out", str(out)]) == 0


def test_seed_flag_overrides_scenario_seed(tmp_path):
    from fixtures import maze_app

    scenario = write_scenario(tmp_path, [maze_app()], seed=5,
                              corpus=[{"app": "M", "handler": "walk", "args": ["0x000000"]}])
    reports = []
    for name, seed in (("oa", "5"), ("ob", "99")):
        out = tmp_path / name
        main(["fuzz", "run", "--scenario", str(scenario), "--app", "M",
              "--budget", "150", "--out", str(out), "--seed", seed, "--n-min", "100000"])
        reports.append(json.loads((out / "report.json").read_text()))
    assert reports[0]["config"]["rng_seed"] == 5
    assert reports[1]["config"]["rng_seed"] == 99
    assert reports[0]["coverage"] != reports[1]["coverage"]  # different exploration order


def test_stats_every_flag(tmp_path):
    scenario = write_scenario(tmp_path, [mixed_app(), echo_app()])
    out = tmp_path / "out"
    main(["fuzz", "run", "--scenario", str(scenario), "--app", "F",
          "--budget", "30", "--out", str(out), "--stats-every", "10"])
    report = json.loads((out / "report.json").read_text())
    assert len(report["stats_series"]) == 3


def test_determinism_byte_identical_reports(tmp_path):
    scenario = write_scenario(tmp_path, [mixed_app(), echo_app()], seed=5)
    outs = []
    for name in ("o1", "o2"):
        out = tmp_path / name
        main(["fuzz", "run", "--scenario", str(scenario), "--app", "F",
              "--budget", "40", "--out", str(out), "--mode", "sequential"])
        outs.append((out / "report.json").read_bytes())
    assert outs[0] == outs[1]

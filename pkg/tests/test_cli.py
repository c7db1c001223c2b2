import json
import os
import signal
import subprocess
import sys
import time

import pytest
import yaml
from click.testing import CliRunner

from cxrfusion.cli import EXIT_CONFIG, EXIT_FAILED, EXIT_OK, EXIT_PARTIAL, main
from cxrfusion.replication import expand_cases, solve_joint_counts, write_bundle
from cxrfusion.stats import ConfusionMatrix2x2 as CM


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    d = tmp_path_factory.mktemp("bundle")
    cases = expand_cases(solve_joint_counts(CM(7, 4, 5, 34), CM(7, 4, 8, 31), agreed=46), seed=2)
    write_bundle(d, cases, seed=2)
    return d


def write_config(path, bundle, out, **extra):
    cfg = {
        "dataset": str(bundle / "index.csv"),
        "out": str(out),
        "consensus": {"metric": "token_f1", "threshold": 0.95},
        "backends": [
            {"id": "chatgpt", "kind": "replay", "fixture": str(bundle / "replay.jsonl")},
            {"id": "claude", "kind": "replay", "fixture": str(bundle / "replay.jsonl")},
        ],
        **extra,
    }
    path.write_text(yaml.safe_dump(cfg))
    return path


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


def full_run(config, *extra):
    for cmd in ("ingest", "run", "evaluate", "sweep"):
        r = invoke(cmd, "--config", config, *extra)
        assert r.exit_code == EXIT_OK, (cmd, r.output)


def test_full_pipeline_outputs(tmp_path, bundle):
    cfg = write_config(tmp_path / "c.yaml", bundle, tmp_path / "out")
    full_run(cfg)
    out = tmp_path / "out"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["cases"]["total"] == 50
    assert summary["backends"]["claude"]["accuracy_pct"] == 76.0
    assert summary["agreement"]["agreement_count"] == 46
    assert len((out / "manifest.jsonl").read_text().splitlines()) == 50
    assert len((out / "outcomes.jsonl").read_text().splitlines()) == 50
    assert (out / "tables" / "sensitivity.csv").exists() and (out / "summary.md").exists()
    echo = json.loads((out / "config.resolved.json").read_text())
    assert echo["config_hash"] == summary["metadata"]["config_hash"]
    for line in (out / "outcomes.jsonl").read_text().splitlines():
        assert "latency" not in line
    rec = json.loads((out / "outcomes.jsonl").read_text().splitlines()[0])
    raw = (out / rec["outputs"][0]["raw_text_path"]).read_text()
    assert raw == [json.loads(l)["raw_text"] for l in (bundle / "replay.jsonl").read_text().splitlines()
                   if json.loads(l)["case_id"] == rec["case_id"] and json.loads(l)["backend_id"] == "chatgpt"][0]


def test_two_runs_byte_identical(tmp_path, bundle):
    for name in ("a", "b"):
        full_run(write_config(tmp_path / f"{name}.yaml", bundle, tmp_path / name))
    for f in ("summary.json", "outcomes.jsonl", "manifest.jsonl", "review_queue.jsonl", "tables/sensitivity.csv", "summary.md"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_rerun_same_dir_idempotent(tmp_path, bundle):
    cfg = write_config(tmp_path / "c.yaml", bundle, tmp_path / "out")
    full_run(cfg)
    first = {f: (tmp_path / "out" / f).read_bytes() for f in ("summary.json", "manifest.jsonl", "outcomes.jsonl")}
    full_run(cfg)
    assert first == {f: (tmp_path / "out" / f).read_bytes() for f in first}


def test_flags_override_config(tmp_path, bundle):
    cfg = write_config(tmp_path / "c.yaml", bundle, tmp_path / "out")
    full_run(cfg, "--sample", 20, "--seed", 5, "--out", tmp_path / "other")
    summary = json.loads((tmp_path / "other" / "summary.json").read_text())
    assert summary["cases"]["total"] == 20 and summary["metadata"]["seeds"]["seed"] == 5
    assert not (tmp_path / "out").exists()


def test_missing_image_is_partial(tmp_path, bundle):
    import shutil

    local = tmp_path / "bundle"
    shutil.copytree(bundle, local)
    victim = sorted((local / "images").iterdir())[0]
    victim.unlink()
    cfg = write_config(tmp_path / "c.yaml", local, tmp_path / "out")
    r = invoke("ingest", "--config", cfg)
    assert r.exit_code == EXIT_PARTIAL
    report = json.loads((tmp_path / "out" / "ingest_report.json").read_text())
    assert report["records"] == 49 and report["rejections"][-1]["kind"] == "image"
    assert invoke("run", "--config", cfg).exit_code == EXIT_OK


def test_config_errors_exit_code_and_json(tmp_path, bundle):
    r = CliRunner().invoke(main, ["ingest", "--config", str(tmp_path / "missing.yaml")])
    assert r.exit_code == EXIT_CONFIG
    err = json.loads(r.stderr.strip().splitlines()[-1])
    assert err["error"] == "config" and err["exit_code"] == EXIT_CONFIG
    cfg = write_config(tmp_path / "c.yaml", bundle, tmp_path / "out")
    assert invoke("ingest", "--config", cfg).exit_code == EXIT_OK
    assert CliRunner().invoke(main, ["run", "--config", str(cfg), "--backend", "x=mock:0.5,0.5"]).exit_code == EXIT_CONFIG
    assert CliRunner().invoke(main, ["run", "--config", str(cfg), "--threshold", "3"]).exit_code == EXIT_CONFIG


def test_all_backends_failing_is_total_failure(tmp_path, bundle):
    empty = tmp_path / "empty.jsonl"
    empty.write_text("")
    cfg = write_config(tmp_path / "c.yaml", bundle, tmp_path / "out")
    assert invoke("ingest", "--config", cfg, "--sample", 5).exit_code == EXIT_OK
    r = CliRunner().invoke(main, ["run", "--config", str(cfg), "--backend", f"a=replay:{empty}", "--backend", f"b=replay:{empty}"])
    assert r.exit_code == EXIT_FAILED
    r = CliRunner().invoke(main, ["evaluate", "--config", str(cfg)])
    assert r.exit_code == EXIT_FAILED


def test_notegen_and_multimodal_run(tmp_path, bundle):
    cfg = write_config(tmp_path / "c.yaml", bundle, tmp_path / "out", mode="multimodal", notegen={"seed": 11})
    assert invoke("ingest", "--config", cfg).exit_code == EXIT_OK
    assert invoke("notegen", "--config", cfg, "--audit").exit_code == EXIT_OK
    notes = sorted((tmp_path / "out" / "notes").iterdir())
    assert len(notes) == 50
    before = [n.read_bytes() for n in notes]
    assert invoke("notegen", "--config", cfg).exit_code == EXIT_OK
    assert before == [n.read_bytes() for n in notes]
    assert invoke("run", "--config", cfg).exit_code == EXIT_OK
    assert invoke("evaluate", "--config", cfg).exit_code == EXIT_OK


def test_multimodal_without_notes_or_seed_is_config_error(tmp_path, bundle):
    cfg = write_config(tmp_path / "c.yaml", bundle, tmp_path / "out", mode="multimodal")
    assert invoke("ingest", "--config", cfg).exit_code == EXIT_OK
    assert CliRunner().invoke(main, ["run", "--config", str(cfg)]).exit_code == EXIT_CONFIG


def test_killed_run_resumes_to_identical_outputs(tmp_path, bundle):
    slow = {"id": "chatgpt", "kind": "mock", "sensitivity": 0.8, "specificity": 0.9, "seed": 1, "delay_ms": 40}
    other = {"id": "claude", "kind": "mock", "sensitivity": 0.7, "specificity": 0.8, "seed": 2}

    def config(name):
        path = tmp_path / f"{name}.yaml"
        path.write_text(yaml.safe_dump({"dataset": str(bundle / "index.csv"), "out": str(tmp_path / name),
                                        "concurrency": 1, "backends": [slow, other]}))
        return path

    ref, killed = config("ref"), config("killed")
    full_run(ref)
    assert invoke("ingest", "--config", killed).exit_code == EXIT_OK

    cmd = [sys.executable, "-m", "cxrfusion.cli", "run", "--config", str(killed)]
    proc = subprocess.Popen(cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    cases_dir = tmp_path / "killed" / "run" / "cases"
    deadline = time.monotonic() + 30
    while time.monotonic() < deadline:
        if cases_dir.exists() and len(list(cases_dir.glob("*.json"))) >= 10:
            break
        time.sleep(0.01)
    os.kill(proc.pid, signal.SIGKILL)
    proc.wait()
    done = len(list(cases_dir.glob("*.json")))
    assert 10 <= done < 50, "the run must be interrupted part-way"
    assert not (tmp_path / "killed" / "outcomes.jsonl").exists()

    r = invoke("run", "--config", killed, "--resume")
    assert r.exit_code == EXIT_OK
    assert json.loads(r.output)["resumed"] == done
    for cmd in ("evaluate", "sweep"):
        assert invoke(cmd, "--config", killed).exit_code == EXIT_OK
    for f in ("outcomes.jsonl", "review_queue.jsonl", "summary.json", "tables/sensitivity.csv"):
        assert (tmp_path / "ref" / f).read_bytes() == (tmp_path / "killed" / f).read_bytes(), f

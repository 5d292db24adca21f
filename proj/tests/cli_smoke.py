"""End-to-end checks of the gated_moe command line on a tiny dataset."""

import csv
import json
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import jsonschema
from referencing import Registry, Resource

BINARY = Path(sys.argv[1])
SCHEMA_DIR = Path(sys.argv[2])

TINY = {
    "dataset": {"videos_per_class": 10, "frames": 18, "spatial_classes": 1, "temporal_classes": 1, "both_classes": 0},
    "model": {"fusion": "conv", "activation": "softmax", "tap_layer": 2},
    "train": {"patience": 2, "max_epochs_experts": 6, "max_epochs_gate": 6},
}

failures = []


def check(ok, what):
    print(("ok   " if ok else "FAIL ") + what)
    if not ok:
        failures.append(what)


def run(*args):
    return subprocess.run([str(BINARY), *map(str, args)], capture_output=True, text=True)


def load(path):
    return json.loads(Path(path).read_text())


def comparable(report):
    report = dict(report)
    report.pop("wall_time_s")
    report["stages"] = [{k: v for k, v in s.items() if k != "checkpoint"} for s in report["stages"]]
    return report


def main():
    schemas = {p.name: load(p) for p in SCHEMA_DIR.glob("*.schema.json")}
    registry = Registry().with_resources(
        (name, Resource.from_contents(doc)) for name, doc in schemas.items()
    )
    report_validator = jsonschema.Draft202012Validator(schemas["report.schema.json"], registry=registry)
    config_validator = jsonschema.Draft202012Validator(schemas["config.schema.json"])

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = tmp / "tiny.json"
        cfg.write_text(json.dumps(TINY))
        check(config_validator.is_valid(TINY), "tiny config validates against the config schema")

        t0 = time.monotonic()
        first = run("--config", cfg, "--out", tmp / "a", "train")
        elapsed = time.monotonic() - t0
        check(first.returncode == 0, f"train exits 0 ({first.stderr.strip()})")
        check(elapsed < 60.0, f"tiny train finishes under 60 s ({elapsed:.1f} s)")
        report = load(tmp / "a" / "report.json")
        errors = [e.message for e in report_validator.iter_errors(report)]
        check(not errors, f"report validates against the schema {errors[:3]}")
        check(all(abs(w["w_spatial"] + w["w_temporal"] - 1.0) < 1e-12 for w in report["weights"]),
              "softmax weights sum to 1")
        check(config_validator.is_valid(report["config"]), "report config snapshot validates")

        second = run("--config", cfg, "--out", tmp / "b", "train")
        check(second.returncode == 0 and comparable(load(tmp / "b" / "report.json")) == comparable(report),
              "rerun with the same seed gives an identical report")

        ev = run("--config", cfg, "--out", tmp / "e", "eval", "--checkpoint", tmp / "a" / "stage3.gmt")
        evaluated = load(tmp / "e" / "report.json")
        check(ev.returncode == 0 and not list(report_validator.iter_errors(evaluated)), "eval report validates")
        check(evaluated["accuracy"]["gated"] == report["accuracy"]["gated"]
              and evaluated["score_hash"] == report["score_hash"],
              "eval of the final checkpoint reproduces the train report")

        forced = run("--config", cfg, "--out", tmp / "f", "eval", "--checkpoint", tmp / "a" / "stage3.gmt",
                     "--force-weights", "0.5", "0.5")
        forced_report = load(tmp / "f" / "report.json")
        check(forced.returncode == 0
              and forced_report["accuracy"]["gated"] == forced_report["accuracy"]["even_average"],
              "forced (0.5, 0.5) gate equals the even average")

        paper = run("--config", cfg, "--out", tmp / "ps", "--paper-scale-test", "eval", "--checkpoint",
                    tmp / "a" / "stage3.gmt")
        protocol = load(tmp / "ps" / "report.json")["protocol"]
        check(paper.returncode == 0 and protocol["crop_evaluations_per_stream"] == 250 and protocol["crops"] == "paper",
              "--paper-scale-test runs 25 samples x 10 crops per stream")

        ex = run("--out", tmp / "w", "export-weights", "--report", tmp / "a" / "report.json")
        with open(tmp / "w" / "weights_scatter.csv") as f:
            rows = list(csv.DictReader(f))
        with open(tmp / "w" / "weights_histogram.csv") as f:
            counts = [int(r["count"]) for r in csv.DictReader(f)]
        check(ex.returncode == 0 and len(rows) == len(report["weights"]), "one scatter row per test video")
        check(sum(counts) == len(rows), "histogram counts sum to the sample count")

        pr = run("--config", cfg, "--out", tmp / "p", "project-features", "--checkpoint", tmp / "a" / "stage2.gmt")
        with open(tmp / "p" / "projection.csv") as f:
            check(pr.returncode == 0 and len(list(csv.DictReader(f))) == len(rows), "one projected row per test video")

        grid = tmp / "grid.json"
        grid.write_text(json.dumps({"activations": ["softmax"], "fusions": ["concat", "conv"], "tap_layers": [2],
                                    "multitask": [True], "seeds": [1]}))
        ab = run("--config", cfg, "--out", tmp / "ab", "ablate", "--grid", grid, "--threads", 1)
        check(ab.returncode == 0, f"ablate exits 0 ({ab.stderr.strip()})")
        conv_cell = load(tmp / "ab" / "cells" / "softmax_conv_tap2_mt_s1" / "report.json")
        check(comparable(conv_cell) == comparable(report), "one-cell ablation report equals the train report")

        bad = tmp / "bad.json"
        bad.write_text(json.dumps({"model": {"fusion": "conv", "tap_layer": 2}}))
        missing = run("--config", bad, "--out", tmp / "bad", "train")
        check(missing.returncode == 2 and "model.activation" in missing.stderr, "missing field names it and exits 2")

        relu = tmp / "relu.json"
        relu.write_text(json.dumps({**TINY, "model": {**TINY["model"], "activation": "relu"}}))
        mismatch = run("--config", relu, "--out", tmp / "m", "eval", "--checkpoint", tmp / "a" / "stage3.gmt")
        check(mismatch.returncode == 2, "checkpoint/config mismatch exits 2")

        unknown = tmp / "unknown.json"
        unknown.write_text(json.dumps({**TINY, "extra": 1}))
        check(run("--config", unknown, "train").returncode == 2, "unknown field exits 2")

        diverge = tmp / "diverge.json"
        diverge.write_text(json.dumps({**TINY, "train": {**TINY["train"], "expert_lr_initial": 1e308,
                                                         "expert_lr_reduced": 1e308}}))
        check(run("--config", diverge, "--out", tmp / "d", "train").returncode == 3, "divergence exits 3")

    print(f"{len(failures)} failure(s)")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())

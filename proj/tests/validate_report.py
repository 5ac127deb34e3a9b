#!/usr/bin/env python3
"""Runs a small simulate/calibrate/analyze pipeline and validates report.json against the schema.

Also checks that the schema rejects a few broken reports, so a permissive schema cannot pass.
"""
import argparse
import copy
import json
import pathlib
import shutil
import subprocess
import sys

import jsonschema


def run(cli, *args):
    subprocess.run([cli, "--quiet", *args], check=True)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--cli", required=True)
    ap.add_argument("--preset", required=True)
    ap.add_argument("--schema", required=True)
    ap.add_argument("--work", required=True)
    a = ap.parse_args()

    work = pathlib.Path(a.work)
    shutil.rmtree(work, ignore_errors=True)
    work.mkdir(parents=True)
    run(a.cli, "--seed", "3", "--out", str(work / "spectra"), "spectra", "synth", "--preset", a.preset,
        "--powers", "log:5uW:0.5mW:10", "--exposure", "10")
    run(a.cli, "--out", str(work / "cal"), "calibrate", "--spectra", str(work / "spectra"))
    run(a.cli, "--seed", "3", "--out", str(work / "ds"), "simulate", "--preset", a.preset, "--sequence", "p1,p2",
        "--powers", "5uW,0.2mW", "--taus", "log:10us:10ms:10", "--reps", "2000")
    run(a.cli, "--out", str(work / "rep"), "analyze", "--dataset", str(work / "ds"),
        "--calibration", str(work / "cal" / "calibration.json"))

    schema = json.loads(pathlib.Path(a.schema).read_text())
    jsonschema.Draft202012Validator.check_schema(schema)
    validator = jsonschema.Draft202012Validator(schema)
    report = json.loads((work / "rep" / "report.json").read_text())

    errors = sorted(validator.iter_errors(report), key=lambda e: list(e.path))
    for e in errors:
        print("report.json:", "/".join(map(str, e.path)), e.message)
    if errors:
        return 1
    if not report["p1"] or not report["p2"]:
        print("report has empty sequence sections")
        return 1

    broken = []
    r = copy.deepcopy(report)
    r["schema_version"] = "0.9"
    broken.append(("wrong version", r))
    r = copy.deepcopy(report)
    del r["p1"][0]["contrast"]
    broken.append(("missing contrast", r))
    r = copy.deepcopy(report)
    r["p1"][0]["normalized"]["classification"] = "sideways"
    broken.append(("bad classification", r))
    r = copy.deepcopy(report)
    r["unexpected"] = 1
    broken.append(("extra key", r))
    for name, doc in broken:
        if validator.is_valid(doc):
            print("schema accepted a broken report:", name)
            return 1

    print("report.json valid against", a.schema)
    return 0


if __name__ == "__main__":
    sys.exit(main())

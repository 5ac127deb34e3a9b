#!/usr/bin/env python3
"""Tune a simulator preset against relaxometry targets.

Ionization is fixed in closed form: with n = k_rec P / (k_rec P + k_ion P^p) at steady state,
two target NV- fractions (n1 at P1, n2 at P2) give

    p - 1 = ln(r2 / r1) / ln(P2 / P1),  r = (1 - n) / n
    k_ion = k_rec r1 / P1^(p - 1)

for any k_rec. The remaining rates (k_rec, w1, n_dark, k_pol, s_max, c_spin, f_mw) minimize a
penalty computed from noiseless `nvrelax simulate` + `nvrelax analyze` runs over the power sweep:
T1 at the lowest power, recharge times at the highest, a single decaying -> inverted flip,
readout ratio factor near 2 and a flat control ratio.

    tools/fit_preset.py --cli build/bin/nvrelax --start presets/reference.json \
        --out presets/refit.json --iterations 200
"""
import argparse
import json
import math
import pathlib
import subprocess
import tempfile

import numpy as np
from scipy.optimize import minimize

POWERS = [5e-6, 0.05e-3, 0.20e-3, 0.54e-3]
FREE = ["k_rec_light", "w1", "n_dark", "k_pol", "s_max", "c_spin", "f_mw"]
# log-scaled rates, logit-scaled fractions; f_mw lives on (0, 0.5)
LOG = {"k_rec_light", "k_pol"}
HALF = {"f_mw"}


def ionization(k_rec, n1, p1, n2, p2):
    r1, r2 = (1 - n1) / n1, (1 - n2) / n2
    p_ion = 1 + math.log(r2 / r1) / math.log(p2 / p1)
    return k_rec * r1 / p1 ** (p_ion - 1), p_ion


def encode(params):
    z = []
    for k in FREE:
        v = params[k]
        if k in LOG:
            z.append(math.log10(v))
        else:
            u = 2 * v if k in HALF else v
            z.append(math.log(u / (1 - u)))
    return np.array(z)


def decode(z, base):
    p = dict(base)
    for k, v in zip(FREE, z):
        if k in LOG:
            p[k] = 10 ** v
        else:
            u = 1 / (1 + math.exp(-v))
            p[k] = u / 2 if k in HALF else u
    return p


def hinge(v, lo, hi):
    return max(0.0, lo - v) + max(0.0, v - hi)


def param(fit, name):
    for q in fit.get("parameters", []):
        if q["name"] == name:
            return q["value"]
    return float("nan")


class Evaluator:
    def __init__(self, cli, preset, targets, workdir):
        self.cli = cli
        self.preset = preset
        self.t = targets
        self.work = pathlib.Path(workdir)

    def run(self, *args):
        subprocess.run([self.cli, "--quiet", *args], check=True, capture_output=True)

    def report(self, params):
        doc = dict(self.preset)
        doc["params"] = params
        path = self.work / "preset.json"
        path.write_text(json.dumps(doc))
        for d in ("spectra", "cal", "ds", "rep"):
            subprocess.run(["rm", "-rf", str(self.work / d)], check=True)
        self.run("--out", str(self.work / "spectra"), "spectra", "synth", "--preset", str(path),
                 "--powers", "log:5uW:0.5mW:12", "--no-noise")
        self.run("--out", str(self.work / "cal"), "calibrate", "--spectra", str(self.work / "spectra"))
        self.run("--out", str(self.work / "ds"), "simulate", "--preset", str(path), "--sequence", "p1",
                 "--powers", ",".join(f"{p:g}" for p in POWERS), "--taus", "log:10us:10ms:20",
                 "--reps", "200", "--no-noise")
        self.run("--out", str(self.work / "rep"), "analyze", "--dataset", str(self.work / "ds"),
                 "--calibration", str(self.work / "cal" / "calibration.json"))
        return json.loads((self.work / "rep" / "report.json").read_text())

    def penalty(self, params, detail=False):
        try:
            rep = self.report(params)
        except subprocess.CalledProcessError:
            return (1e3, {}) if detail else 1e3
        e = {round(x["power_w"] * 1e9): x for x in rep["p1"]}
        lo, hi = e[round(POWERS[0] * 1e9)], e[round(POWERS[-1] * 1e9)]
        t1 = self.t["t1"]
        terms = {
            "t1_normalized": hinge(param(lo["normalized"]["monoexp"], "T") / t1, 0.95, 1.05),
            "t1_raw": 0.2 * hinge(param(lo["raw"]["monoexp"], "T") / t1, 0.0, 0.75),
            "t1_contrast": hinge(param(lo["contrast"]["monoexp"], "T") / t1, 0.95, 1.05),
            "t_r1": hinge(param(hi["nv0_recharge"]["biexp"], "T_R1") * 1e6, 90, 130) / 100,
            "t_r2": hinge(param(hi["nv0_recharge"]["biexp"], "T_R2") * 1e3, 1.7, 2.5),
        }
        cls = [e[round(p * 1e9)]["normalized"]["classification"] for p in POWERS]
        flips = sum(a != b for a, b in zip(cls, cls[1:]))
        terms["flip"] = (cls[0] != "decaying") + (cls[-1] != "inverted") + max(0, flips - 1)
        ratios = [e[round(p * 1e9)]["ratio"]["readout_end_over_start"] for p in POWERS]
        terms["readout_ratio"] = sum(hinge(math.log(r / 2), -0.2, 0.2) for r in ratios)
        terms["control_ratio"] = 3 * hinge(hi["ratio"]["control_end_over_start"], 0.95, 1.05)
        total = sum(terms.values())
        if not math.isfinite(total):
            total = 1e3
        return (total, terms) if detail else total


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--cli", required=True, help="nvrelax executable")
    ap.add_argument("--start", required=True, help="preset to start from")
    ap.add_argument("--out", required=True, help="where to write the tuned preset")
    ap.add_argument("--iterations", type=int, default=200, help="Nelder-Mead function evaluations")
    ap.add_argument("--fraction-low", type=float, default=0.73, help="NV- fraction at --power-low")
    ap.add_argument("--fraction-high", type=float, default=0.21, help="NV- fraction at --power-high")
    ap.add_argument("--power-low", type=float, default=5e-6)
    ap.add_argument("--power-high", type=float, default=4.9e-3)
    a = ap.parse_args()

    start = json.loads(pathlib.Path(a.start).read_text())
    base = dict(start["params"])
    targets = {"t1": base["t1"]}

    def with_ionization(p):
        p["k_ion"], p["p_ion"] = ionization(p["k_rec_light"], a.fraction_low, a.power_low, a.fraction_high, a.power_high)
        return p

    with tempfile.TemporaryDirectory() as tmp:
        ev = Evaluator(a.cli, start, targets, tmp)
        f = lambda z: ev.penalty(with_ionization(decode(z, base)))
        z0 = encode(base)
        print(f"start penalty {f(z0):.4f}")
        res = minimize(f, z0, method="Nelder-Mead", options={"maxfev": a.iterations, "xatol": 1e-3, "fatol": 1e-4})
        best = with_ionization(decode(res.x, base))
        total, terms = ev.penalty(best, detail=True)

    print(f"final penalty {total:.4f}")
    for k, v in terms.items():
        print(f"  {k:14s} {v:.4f}")
    rounded = {k: float(f"{v:.6g}") for k, v in best.items()}
    out = dict(start)
    out["params"] = rounded
    pathlib.Path(a.out).write_text(json.dumps(out, indent=2) + "\n")
    print("wrote", a.out)


if __name__ == "__main__":
    main()

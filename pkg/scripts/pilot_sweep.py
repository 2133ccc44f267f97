"""Multi-seed arm comparison used to pick cohort and training settings.

Each run trains vicreg_only, tc and tc_no_reg per seed on a freshly generated
cohort (generator seed = trainer seed) and reports the 12-month probe AUROC,
the tc_syn AUROC, mean displacement norms and the distance-ranking Spearman.
Overrides use the same dotted keys as the CLI config:

    python3 scripts/pilot_sweep.py --set generator.progression_scale=0.2 \\
        --set trainer.stop_grad_target=true --seeds 0 1 2 --out results/pilot.jsonl
"""

import argparse
import dataclasses
import json
import time
from pathlib import Path

import numpy as np

from tempeq.config import config_from_dict
from tempeq.diffcore import Layer, MlpParams
from tempeq.evaluation import (
    auroc,
    equivariance_diagnostics,
    extract_representations,
    tc_syn_table,
    train_linear_probe,
)
from tempeq.synthdata import generate_cohort
from tempeq.trainer import pretrain

ARMS = ("vicreg_only", "tc", "tc_no_reg")


def probe_auroc(table, cohort, probe_cfg, window=12):
    pool = table.for_patients(cohort.splits["train"] + cohort.splits["val"])
    test = table.for_patients(cohort.splits["test"])
    probe = train_linear_probe(pool, window, probe_cfg)
    return auroc(probe.scores(test.reps), test.labels[window])


def run_seed(cfg, seed, x_scale=1.0):
    cohort = generate_cohort(dataclasses.replace(cfg.generator, seed=seed))
    cohort.x = cohort.x * x_scale
    d = cohort.x.shape[1]
    raw = MlpParams([Layer(np.eye(d), np.zeros(d), "identity")])
    out = {"seed": seed, "raw": probe_auroc(extract_representations(raw, cohort), cohort, cfg.probe)}
    ev = cfg.evaluation
    for arm in ARMS:
        ckpt, _ = pretrain(cohort, dataclasses.replace(cfg.trainer, arm=arm, seed=seed), cfg.model, cfg.augment)
        table = extract_representations(ckpt.params.encoder, cohort)
        out[arm] = probe_auroc(table, cohort, cfg.probe)
        if arm == "vicreg_only":
            continue
        diag = equivariance_diagnostics(
            ckpt.params.encoder, ckpt.params.predictor, cohort,
            months_list=ev.months_list, n_patients=ev.n_diag_patients, delta=ev.fd_delta, arm=arm,
        )
        out[f"dm_{arm}"] = diag.dm_norm_mean
        if arm == "tc":
            syn = tc_syn_table(table, ckpt.params.predictor, ev.tc_syn_months)
            out["tc_syn"] = probe_auroc(syn, cohort, cfg.probe)
            out["spearman"] = diag.spearman
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--x-scale", type=float, default=1.0,
                    help="multiply observations after generation (scale study)")
    ap.add_argument("--out", type=Path, help="append a JSON summary line here")
    args = ap.parse_args()

    cfg = config_from_dict({}, args.overrides)
    t0 = time.perf_counter()
    rows = [run_seed(cfg, s, args.x_scale) for s in args.seeds]
    mean = {k: float(np.mean([r[k] for r in rows])) for k in rows[0] if k != "seed"}
    mean["tc_minus_vicreg"] = mean["tc"] - mean["vicreg_only"]
    mean["dm_ratio"] = mean["dm_tc"] / mean["dm_tc_no_reg"]
    summary = {
        "overrides": args.overrides, "x_scale": args.x_scale, "seeds": args.seeds,
        "seconds": round(time.perf_counter() - t0, 1), "mean": mean, "per_seed": rows,
    }
    print(" ".join(args.overrides) or "(defaults)", f"x_scale={args.x_scale}")
    print("  " + " ".join(f"{k}={v:.3f}" for k, v in mean.items()))
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "a") as fh:
            fh.write(json.dumps(summary, sort_keys=True) + "\n")


if __name__ == "__main__":
    main()

"""Command-line entry point: ``tempeq <command> --config <path> [--set k=v]...``.

Exit codes: 0 ok, 2 configuration or missing-input error, 3 runtime or
numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys

# thread caps must be in place before numpy loads its BLAS
_threads = os.environ.get("TEMPEQ_THREADS")
if _threads and _threads.isdigit() and int(_threads) > 0:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import csv  # noqa: E402
import io  # noqa: E402
import json  # noqa: E402
from concurrent.futures import ProcessPoolExecutor  # noqa: E402
from pathlib import Path  # noqa: E402

from .config import EVAL_ARMS, ExperimentConfig, load_config  # noqa: E402
from .diffcore import ConfigError, NonFiniteError  # noqa: E402
from .evaluation import (  # noqa: E402
    equivariance_diagnostics,
    evaluate_table,
    extract_representations,
    tc_syn_table,
)
from .gradcheck import run_grad_check  # noqa: E402
from .synthdata import CohortFormatError, generate_cohort, load_cohort, save_cohort  # noqa: E402
from .trainer import (  # noqa: E402
    DM_ARMS,
    CheckpointError,
    TrainingError,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

COMMANDS = ("gen-data", "pretrain", "probe", "tc-syn", "diagnose", "grad-check", "report")
REPORT_COLUMNS = (
    "arm", "window", "auroc_mean", "auroc_std", "prauc_mean", "prauc_std", "bacc_mean", "bacc_std",
)


class MissingInputError(FileNotFoundError):
    pass


def worker_count() -> int:
    raw = os.environ.get("TEMPEQ_THREADS", "1")
    if not raw.isdigit() or int(raw) < 1:
        raise ConfigError(f"TEMPEQ_THREADS must be a positive integer, got {raw!r}")
    return int(raw)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


# layout ---------------------------------------------------------------------


class Layout:
    def __init__(self, cfg: ExperimentConfig):
        self.root = Path(cfg.output_dir)

    @property
    def data(self) -> Path:
        return self.root / "data"

    def arm(self, arm: str) -> Path:
        return self.root / "arms" / arm

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.json"


def _need(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"missing input {path} ({hint})")
    return path


def _load_data(lay: Layout):
    _need(lay.data / "manifest.json", "run gen-data first")
    return load_cohort(lay.data)


def _load_arm(lay: Layout, arm: str):
    _need(lay.arm(arm) / "checkpoint.json", f"run pretrain for arm {arm} first")
    return load_checkpoint(lay.arm(arm))


def _merge_metrics(lay: Layout, update: dict) -> dict:
    current = json.loads(lay.metrics.read_text()) if lay.metrics.exists() else {}
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(current.get(k), dict):
            current[k].update(v)
        else:
            current[k] = v
    lay.root.mkdir(parents=True, exist_ok=True)
    lay.metrics.write_text(_dump(current))
    return current


def _write_manifest(lay: Layout, command: str, cfg: ExperimentConfig, overrides: list[str], extra=None):
    manifest = {"command": command, "config": cfg.to_dict(), "overrides": list(overrides)}
    if extra:
        manifest.update(extra)
    lay.root.mkdir(parents=True, exist_ok=True)
    (lay.root / f"run_{command}.json").write_text(_dump(manifest))


# commands ----------------------------------------------------------------------


def cmd_gen_data(cfg: ExperimentConfig, overrides: list[str]) -> int:
    lay = Layout(cfg)
    cohort = generate_cohort(cfg.generator)
    save_cohort(cohort, lay.data, extra={"overrides": list(overrides)})
    pre = ~cohort.converted_already
    prev = {str(w): float(cohort.labels[w][pre].mean()) for w in cfg.generator.label_windows}
    print(f"wrote {cohort.n_visits} visits of {len(cohort.trajectories)} patients to {lay.data}")
    print("pre-conversion prevalence " + " ".join(f"{w}m={p:.3f}" for w, p in prev.items()))
    _write_manifest(lay, "gen-data", cfg, overrides, {"prevalence": prev})
    return 0


def _pretrain_one(cfg: ExperimentConfig, arm: str, overrides: list[str]) -> str:
    lay = Layout(cfg)
    cohort = _load_data(lay)
    ckpt, log = pretrain(cohort, cfg.for_arm(arm), model=cfg.model, augment=cfg.augment)
    ckpt.extra = {"overrides": list(overrides)}
    out = lay.arm(arm)
    save_checkpoint(ckpt, out)
    log.save(out / "train_log.csv")
    last = log.rows[-1]
    return f"{arm}: {ckpt.step} steps, total={last['total']:.4f} mean_dm_norm={last['mean_dm_norm']:.4f}"


def cmd_pretrain(cfg: ExperimentConfig, overrides: list[str]) -> int:
    _load_data(Layout(cfg))  # fail early on a missing dataset
    workers = min(worker_count(), len(cfg.arms))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            lines = list(pool.map(_pretrain_one, [cfg] * len(cfg.arms), cfg.arms, [overrides] * len(cfg.arms)))
    else:
        lines = [_pretrain_one(cfg, arm, overrides) for arm in cfg.arms]
    for line in lines:
        print(line)
    return 0


def cmd_probe(cfg: ExperimentConfig, overrides: list[str]) -> int:
    lay = Layout(cfg)
    cohort = _load_data(lay)
    results = {}
    for arm in cfg.arms:
        ckpt = _load_arm(lay, arm)
        table = extract_representations(ckpt.params.encoder, cohort)
        (lay.arm(arm) / "embeddings.csv").write_text(table.to_csv())
        results[arm] = evaluate_table(table, cohort.splits, cfg.generator.label_windows, cfg.probe)
        for w, m in results[arm].items():
            print(f"{arm:<12} {w:>2}m auroc={m['auroc']:.3f} prauc={m['prauc']:.3f} bacc={m['bacc']:.3f}")
    _merge_metrics(lay, results)
    _write_manifest(lay, "probe", cfg, overrides)
    return 0


def cmd_tc_syn(cfg: ExperimentConfig, overrides: list[str]) -> int:
    lay = Layout(cfg)
    cohort = _load_data(lay)
    arm = cfg.evaluation.tc_syn_arm
    ckpt = _load_arm(lay, arm)
    table = extract_representations(ckpt.params.encoder, cohort)
    syn = tc_syn_table(table, ckpt.params.predictor, cfg.evaluation.tc_syn_months, arm)
    result = evaluate_table(syn, cohort.splits, cfg.generator.label_windows, cfg.probe)
    for w, m in result.items():
        print(f"tc_syn       {w:>2}m auroc={m['auroc']:.3f} prauc={m['prauc']:.3f} bacc={m['bacc']:.3f}")
    _merge_metrics(lay, {"tc_syn": result})
    _write_manifest(lay, "tc-syn", cfg, overrides)
    return 0


def cmd_diagnose(cfg: ExperimentConfig, overrides: list[str]) -> int:
    lay = Layout(cfg)
    cohort = _load_data(lay)
    arms = [a for a in cfg.arms if a in DM_ARMS]
    if not arms:
        raise ConfigError(f"arms: diagnose needs at least one of {DM_ARMS}")
    out = {}
    ev = cfg.evaluation
    for arm in arms:
        ckpt = _load_arm(lay, arm)
        d = equivariance_diagnostics(
            ckpt.params.encoder, ckpt.params.predictor, cohort,
            months_list=ev.months_list, n_patients=ev.n_diag_patients, delta=ev.fd_delta, arm=arm,
        )
        out[arm] = d.to_dict()
        (lay.arm(arm) / "distance_table.csv").write_text(d.distance_csv())
        if arm == arms[0]:
            (lay.root / "distance_table.csv").write_text(d.distance_csv())
        print(
            f"{arm:<10} dm_norm mean={d.dm_norm_mean:.4f} min={d.dm_norm_min:.4f} max={d.dm_norm_max:.4f} "
            f"dt_sensitivity={d.dt_sensitivity:.4f} spearman={d.spearman:.3f}"
        )
    (lay.root / "diagnostics.json").write_text(_dump(out))
    _merge_metrics(lay, {"diagnostics": out})
    _write_manifest(lay, "diagnose", cfg, overrides)
    return 0


def cmd_grad_check(cfg: ExperimentConfig, overrides: list[str]) -> int:
    results, seconds = run_grad_check(seed=cfg.trainer.seed)
    lines = [r.line() for r in results] + [f"elapsed {seconds:.1f}s"]
    print("\n".join(lines))
    lay = Layout(cfg)
    lay.root.mkdir(parents=True, exist_ok=True)
    (lay.root / "gradcheck.txt").write_text("\n".join(lines[:-1]) + "\n")
    if not all(r.report.passed for r in results):
        print("gradient audit failed", file=sys.stderr)
        return 3
    return 0


def report_rows(metrics: dict) -> list[dict]:
    rows = []
    for arm in EVAL_ARMS:
        if arm not in metrics:
            continue
        for w in sorted(metrics[arm], key=int):
            m = metrics[arm][w]
            row = {"arm": arm, "window": int(w)}
            for k in ("auroc", "prauc", "bacc"):
                row[f"{k}_mean"] = m["fold_mean"][k]
                row[f"{k}_std"] = m["fold_std"][k]
            rows.append(row)
    return rows


def report_text(rows: list[dict]) -> str:
    lines = [f"{'arm':<12} {'window':>6}  {'AUROC':>13}  {'PRAUC':>13}  {'BAcc':>13}"]
    for r in rows:
        cells = "  ".join(f"{r[k + '_mean']:.3f} ± {r[k + '_std']:.3f}" for k in ("auroc", "prauc", "bacc"))
        lines.append(f"{r['arm']:<12} {r['window']:>5}m  {cells}")
    return "\n".join(lines) + "\n"


def cmd_report(cfg: ExperimentConfig, overrides: list[str]) -> int:
    lay = Layout(cfg)
    metrics = json.loads(_need(lay.metrics, "run probe first").read_text())
    rows = report_rows(metrics)
    if not rows:
        raise MissingInputError(f"{lay.metrics} holds no arm results")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    (lay.root / "report.csv").write_text(buf.getvalue())
    text = report_text(rows)
    (lay.root / "report.txt").write_text(text)
    print(text, end="")
    return 0


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "probe": cmd_probe,
    "tc-syn": cmd_tc_syn,
    "diagnose": cmd_diagnose,
    "grad-check": cmd_grad_check,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tempeq", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one field by dotted path, value parsed as JSON")
    p.add_argument("--arm", help="restrict to a single arm (shorthand for --set arms=[ARM])")
    return p


def run(command: str, config: str, overrides: list[str] = (), arm: str | None = None) -> int:
    overrides = list(overrides)
    if arm is not None:
        overrides.append(f'arms=["{arm}"]')
    try:
        cfg = load_config(config, overrides)
        worker_count()
        return HANDLERS[command](cfg, overrides)
    except (ConfigError, MissingInputError) as exc:
        print(f"tempeq: error: {exc}", file=sys.stderr)
        return 2
    except (NonFiniteError, TrainingError, CheckpointError, CohortFormatError, FloatingPointError, ValueError) as exc:
        print(f"tempeq: {command} failed: {exc}", file=sys.stderr)
        return 3


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return run(args.command, args.config, args.overrides, args.arm)


if __name__ == "__main__":
    sys.exit(main())

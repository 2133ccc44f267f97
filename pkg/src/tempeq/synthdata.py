"""Synthetic longitudinal cohort with monotone latent severity.

Each patient has a static identity vector ``u`` and a non-decreasing severity
series ``s(0..b)``. A monthly observation mixes both::

    x_t = A u + c * B [s, s^2, sin s] + noise

Conversion happens at the first month where ``s`` reaches the threshold.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy.special import ndtr

FORMAT_NAME = "tempeq-cohort"
FORMAT_VERSION = 1
MAX_DT_MONTHS = 12


class CohortFormatError(ValueError):
    """Dataset files are missing, truncated or malformed."""


class CohortVersionError(CohortFormatError):
    """Dataset was written by an unknown format version."""


class EmptyDatasetError(ValueError):
    pass


@dataclass
class GeneratorConfig:
    n_patients: int = 200
    horizon_months: int = 24
    obs_dim: int = 64
    identity_dim: int = 8
    progression_rate_range: tuple[float, float] = (0.01, 0.08)
    initial_severity_range: tuple[float, float] = (0.0, 0.8)
    conversion_threshold: float = 2.0
    progression_scale: float = 1.0
    # correlation between the static identity and the latent progression speed
    rate_identity_coupling: float = 0.0
    noise_std: float = 0.1
    label_windows: list[int] = field(default_factory=lambda: [6, 12])
    split_fractions: tuple[float, float, float] = (0.6, 0.2, 0.2)
    seed: int = 0
    split_seed: int = 0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ValueError("generator.n_patients must be >= 1")
        if self.horizon_months < 2:
            raise ValueError("generator.horizon_months must be >= 2")
        if self.obs_dim < 1 or self.identity_dim < 1:
            raise ValueError("generator.obs_dim and identity_dim must be >= 1")
        lo, hi = self.progression_rate_range
        if not 0 < lo <= hi:
            raise ValueError("generator.progression_rate_range must satisfy 0 < lo <= hi")
        slo, shi = self.initial_severity_range
        if slo > shi:
            raise ValueError("generator.initial_severity_range must satisfy lo <= hi")
        if self.noise_std < 0:
            raise ValueError("generator.noise_std must be >= 0")
        if not -1.0 <= self.rate_identity_coupling <= 1.0:
            raise ValueError("generator.rate_identity_coupling must lie in [-1, 1]")
        if not self.label_windows or any(w < 1 for w in self.label_windows):
            raise ValueError("generator.label_windows must be positive month counts")
        fr = self.split_fractions
        if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError("generator.split_fractions must be three non-negative numbers summing to 1")


@dataclass
class AugmentConfig:
    noise_std: float = 0.1
    mask_fraction: float = 0.1
    scale_range: tuple[float, float] = (0.8, 1.2)

    def validate(self) -> None:
        if self.noise_std < 0:
            raise ValueError("augment.noise_std must be >= 0")
        if not 0 <= self.mask_fraction < 1:
            raise ValueError("augment.mask_fraction must lie in [0, 1)")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("augment.scale_range must satisfy 0 < lo <= hi")


@dataclass
class PatientTrajectory:
    patient_id: int
    identity: np.ndarray
    severity: np.ndarray  # s(0..b)
    rate: float
    conversion_month: int | None


@dataclass
class Visit:
    patient_id: int
    t: int
    x: np.ndarray
    converted_within: dict[int, bool]
    is_converted_already: bool


@dataclass
class PairBatch:
    view_a: np.ndarray
    view_b: np.ndarray
    dt_months: np.ndarray
    dt_norm: np.ndarray
    patient_id: np.ndarray

    def __len__(self) -> int:
        return len(self.patient_id)


@dataclass
class Cohort:
    config: GeneratorConfig
    identity_mix: np.ndarray  # A, obs_dim x k
    severity_mix: np.ndarray  # B, obs_dim x 3
    trajectories: list[PatientTrajectory]
    patient_id: np.ndarray  # one entry per visit
    month: np.ndarray
    x: np.ndarray
    labels: dict[int, np.ndarray]
    converted_already: np.ndarray
    splits: dict[str, list[int]]
    _index: dict | None = field(default=None, repr=False, compare=False)
    _months: dict | None = field(default=None, repr=False, compare=False)
    _eligible: list | None = field(default=None, repr=False, compare=False)

    @property
    def n_visits(self) -> int:
        return len(self.patient_id)

    def row_of(self, patient_id: int, t: int) -> int | None:
        if self._index is None:
            self._index = {
                (p, m): i for i, (p, m) in enumerate(zip(self.patient_id.tolist(), self.month.tolist()))
            }
        return self._index.get((patient_id, t))

    def visits(self) -> Iterator[Visit]:
        for i in range(self.n_visits):
            yield Visit(
                int(self.patient_id[i]),
                int(self.month[i]),
                self.x[i],
                {w: bool(lab[i]) for w, lab in self.labels.items()},
                bool(self.converted_already[i]),
            )

    def patient_months(self) -> dict[int, np.ndarray]:
        if self._months is None:
            out: dict[int, list[int]] = {}
            for p, m in zip(self.patient_id.tolist(), self.month.tolist()):
                out.setdefault(p, []).append(m)
            self._months = {p: np.array(sorted(ms)) for p, ms in out.items()}
        return self._months

    def eligible_patients(self) -> list[int]:
        """Patients with at least two visits 1..12 months apart."""
        if self._eligible is None:
            self._eligible = _eligible_patients(self.patient_months())
        return self._eligible

    def equal(self, other: "Cohort") -> bool:
        if asdict(self.config) != asdict(other.config):
            return False
        arrays = ("identity_mix", "severity_mix", "patient_id", "month", "x", "converted_already")
        if not all(np.array_equal(getattr(self, a), getattr(other, a)) for a in arrays):
            return False
        if self.labels.keys() != other.labels.keys():
            return False
        if not all(np.array_equal(self.labels[w], other.labels[w]) for w in self.labels):
            return False
        if self.splits != other.splits or len(self.trajectories) != len(other.trajectories):
            return False
        for a, b in zip(self.trajectories, other.trajectories):
            if (
                a.patient_id != b.patient_id
                or a.rate != b.rate
                or a.conversion_month != b.conversion_month
                or not np.array_equal(a.identity, b.identity)
                or not np.array_equal(a.severity, b.severity)
            ):
                return False
        return True


# generation ---------------------------------------------------------------


def severity_from_increments(init: float, increments: np.ndarray) -> np.ndarray:
    return init + np.concatenate([[0.0], np.cumsum(increments)])


def severity_path(rate: float, init: float, b: int, rng: np.random.Generator) -> np.ndarray:
    """Severity s(0..b) with i.i.d. exponential monthly increments of mean ``rate``."""
    if not rate > 0:
        raise ValueError("progression rate must be positive")
    if b < 1:
        raise ValueError("horizon must be >= 1")
    return severity_from_increments(init, rng.exponential(rate, size=b))


def first_crossing(severity: np.ndarray, threshold: float) -> int | None:
    hit = np.flatnonzero(severity >= threshold)
    return int(hit[0]) if hit.size else None


def conversion_labels(
    conversion_month: int | None, horizon: int, windows: list[int]
) -> tuple[dict[int, np.ndarray], np.ndarray]:
    """Per-month window labels and already-converted flags for one patient."""
    months = np.arange(horizon + 1)
    if conversion_month is None:
        already = np.zeros(horizon + 1, dtype=bool)
        return {w: np.zeros(horizon + 1, dtype=bool) for w in windows}, already
    already = months >= conversion_month
    labels = {
        w: (~already) & (conversion_month > months) & (conversion_month <= months + w)
        for w in windows
    }
    return labels, already


def phi(severity: np.ndarray) -> np.ndarray:
    s = np.asarray(severity, dtype=np.float64)
    return np.stack([s, s * s, np.sin(s)], axis=-1)


def _patient_rng(seed: int, patient_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, patient_id])


def generate_cohort(cfg: GeneratorConfig) -> Cohort:
    cfg.validate()
    b, k = cfg.horizon_months, cfg.identity_dim
    mats = np.random.default_rng([cfg.seed, 0])
    identity_mix = mats.normal(0.0, 1.0 / np.sqrt(k), size=(cfg.obs_dim, k))
    severity_mix = mats.normal(0.0, 1.0 / np.sqrt(3.0), size=(cfg.obs_dim, 3))
    speed_dir = mats.normal(size=k)
    speed_dir /= np.linalg.norm(speed_dir)
    rho = cfg.rate_identity_coupling

    trajectories, pids, months, xs, already_all = [], [], [], [], []
    labels_all: dict[int, list[np.ndarray]] = {w: [] for w in cfg.label_windows}
    for pid in range(cfg.n_patients):
        rng = _patient_rng(cfg.seed, pid)
        u = rng.normal(size=k)
        # uniform rate via the normal CDF of a latent correlated with u
        latent = rho * (speed_dir @ u) + np.sqrt(1.0 - rho * rho) * rng.normal()
        lo, hi = cfg.progression_rate_range
        rate = lo + (hi - lo) * ndtr(latent)
        init = rng.uniform(*cfg.initial_severity_range)
        s = severity_path(rate, init, b, rng)
        conv = first_crossing(s, cfg.conversion_threshold)
        noise = rng.normal(0.0, cfg.noise_std, size=(b + 1, cfg.obs_dim)) if cfg.noise_std > 0 else 0.0
        x = identity_mix @ u + cfg.progression_scale * phi(s) @ severity_mix.T + noise
        labels, already = conversion_labels(conv, b, cfg.label_windows)

        trajectories.append(PatientTrajectory(pid, u, s, float(rate), conv))
        pids.append(np.full(b + 1, pid))
        months.append(np.arange(b + 1))
        xs.append(x)
        already_all.append(already)
        for w in cfg.label_windows:
            labels_all[w].append(labels[w])

    splits = stratified_split(
        [t.patient_id for t in trajectories],
        [t.conversion_month is not None for t in trajectories],
        cfg.split_fractions,
        cfg.split_seed,
    )
    return Cohort(
        config=cfg,
        identity_mix=identity_mix,
        severity_mix=severity_mix,
        trajectories=trajectories,
        patient_id=np.concatenate(pids).astype(np.int64),
        month=np.concatenate(months).astype(np.int64),
        x=np.concatenate(xs, axis=0),
        labels={w: np.concatenate(v) for w, v in labels_all.items()},
        converted_already=np.concatenate(already_all),
        splits=splits,
    )


def stratified_split(
    patient_ids: list[int], strata: list[bool], fractions, seed: int
) -> dict[str, list[int]]:
    rng = np.random.default_rng([seed, 2])
    out: dict[str, list[int]] = {"train": [], "val": [], "test": []}
    ids = np.asarray(patient_ids)
    flags = np.asarray(strata, dtype=bool)
    for flag in (True, False):
        group = ids[flags == flag]
        group = group[rng.permutation(len(group))]
        n_train = int(round(fractions[0] * len(group)))
        n_val = int(round(fractions[1] * len(group)))
        out["train"].extend(group[:n_train].tolist())
        out["val"].extend(group[n_train : n_train + n_val].tolist())
        out["test"].extend(group[n_train + n_val :].tolist())
    return {k: sorted(int(p) for p in v) for k, v in out.items()}


def fold_split(patient_ids: list[int], strata: list[bool], n_folds: int, seed: int) -> list[list[int]]:
    """Patient-level stratified k-fold assignment."""
    rng = np.random.default_rng([seed, 3])
    folds: list[list[int]] = [[] for _ in range(n_folds)]
    ids = np.asarray(patient_ids)
    flags = np.asarray(strata, dtype=bool)
    offset = 0
    for flag in (True, False):
        group = ids[flags == flag]
        group = group[rng.permutation(len(group))]
        for i, p in enumerate(group):
            folds[(i + offset) % n_folds].append(int(p))
        offset += len(group)
    return [sorted(f) for f in folds]


# augmentation + pair sampling ----------------------------------------------


def augment_view(x: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Random global scale, then coordinate masking, then additive noise.

    Works on one observation or a batch of rows (one scale per row).
    """
    x = np.asarray(x, dtype=np.float64)
    rows = np.atleast_2d(x)
    n, d = rows.shape
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1], size=(n, 1))
    keep = rng.random((n, d)) >= cfg.mask_fraction
    noise = rng.normal(0.0, cfg.noise_std, size=(n, d)) if cfg.noise_std > 0 else 0.0
    out = rows * scale * keep + noise
    return out.reshape(x.shape)


def _eligible_patients(months: dict[int, np.ndarray]) -> list[int]:
    out = []
    for p, ms in months.items():
        gaps = ms[None, :] - ms[:, None]
        if np.any((gaps >= 1) & (gaps <= MAX_DT_MONTHS)):
            out.append(p)
    return sorted(out)


def sample_pair_batch(
    cohort: Cohort,
    batch_size: int,
    rng: np.random.Generator,
    augment: AugmentConfig | None = None,
    patients: list[int] | None = None,
) -> PairBatch:
    """One (earlier, later) visit pair per distinct patient.

    Draws (t, dt) with dt uniform in 1..12 and rejects pairs whose later
    month has no visit.
    """
    augment = augment or AugmentConfig()
    months = cohort.patient_months()
    if patients is None:
        eligible = cohort.eligible_patients()
    else:
        eligible = _eligible_patients({p: months[p] for p in patients if p in months})
    if not eligible:
        raise EmptyDatasetError("no patient has two visits within 12 months")
    m = min(batch_size, len(eligible))
    chosen = rng.choice(np.array(eligible), size=m, replace=False)

    rows_a, rows_b, dts = [], [], []
    for p in chosen.tolist():
        ms = months[p]
        while True:
            t = int(ms[rng.integers(len(ms))])
            dt = int(rng.integers(1, MAX_DT_MONTHS + 1))
            if cohort.row_of(p, t + dt) is not None:
                break
        rows_a.append(cohort.row_of(p, t))
        rows_b.append(cohort.row_of(p, t + dt))
        dts.append(dt)
    dt_months = np.array(dts, dtype=np.int64)
    return PairBatch(
        view_a=augment_view(cohort.x[rows_a], augment, rng),
        view_b=augment_view(cohort.x[rows_b], augment, rng),
        dt_months=dt_months,
        dt_norm=dt_months / MAX_DT_MONTHS,
        patient_id=chosen.astype(np.int64),
    )


def eligible_patient_count(cohort: Cohort) -> int:
    return len(cohort.eligible_patients())


# serialization ------------------------------------------------------------


def _b64(arr: np.ndarray) -> dict:
    data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return {"shape": list(arr.shape), "data": base64.b64encode(data).decode("ascii")}


def _unb64(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    shape = tuple(obj["shape"])
    if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
        raise CohortFormatError("matrix blob has the wrong length")
    return np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)


def config_from_dict(d: dict) -> GeneratorConfig:
    d = dict(d)
    for key in ("progression_rate_range", "initial_severity_range", "split_fractions"):
        if key in d:
            d[key] = tuple(d[key])
    return GeneratorConfig(**d)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def save_cohort(cohort: Cohort, path: str | Path, extra: dict | None = None) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": asdict(cohort.config),
        "n_visits": cohort.n_visits,
        "matrices": {"identity_mix": _b64(cohort.identity_mix), "severity_mix": _b64(cohort.severity_mix)},
        "trajectories": [
            {
                "patient_id": t.patient_id,
                "rate": t.rate,
                "conversion_month": t.conversion_month,
                "identity": _b64(t.identity),
                "severity": _b64(t.severity),
            }
            for t in cohort.trajectories
        ],
    }
    if extra:
        manifest["extra"] = extra
    (path / "manifest.json").write_text(_dump(manifest))
    with open(path / "visits.jsonl", "w") as fh:
        for v in cohort.visits():
            rec = {
                "patient_id": v.patient_id,
                "t": v.t,
                "x": v.x.tolist(),
                "converted_within": {str(w): flag for w, flag in v.converted_within.items()},
                "is_converted_already": v.is_converted_already,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    (path / "splits.json").write_text(_dump(cohort.splits))
    return path


def load_cohort(path: str | Path) -> Cohort:
    path = Path(path)
    for name in ("manifest.json", "visits.jsonl", "splits.json"):
        if not (path / name).is_file():
            raise CohortFormatError(f"missing dataset file {path / name}")
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise CohortFormatError(f"manifest.json is not valid JSON: {exc}") from exc
    if manifest.get("format") != FORMAT_NAME:
        raise CohortFormatError("manifest.json is not a tempeq cohort manifest")
    if manifest.get("version") != FORMAT_VERSION:
        raise CohortVersionError(
            f"unsupported cohort format version {manifest.get('version')!r} (expected {FORMAT_VERSION})"
        )
    try:
        cfg = config_from_dict(manifest["config"])
        windows = cfg.label_windows
        trajectories = [
            PatientTrajectory(
                int(t["patient_id"]),
                _unb64(t["identity"]),
                _unb64(t["severity"]),
                float(t["rate"]),
                t["conversion_month"],
            )
            for t in manifest["trajectories"]
        ]
        pids, months, xs, already = [], [], [], []
        labels: dict[int, list[bool]] = {w: [] for w in windows}
        with open(path / "visits.jsonl") as fh:
            for line in fh:
                rec = json.loads(line)
                pids.append(int(rec["patient_id"]))
                months.append(int(rec["t"]))
                xs.append(rec["x"])
                already.append(bool(rec["is_converted_already"]))
                for w in windows:
                    labels[w].append(bool(rec["converted_within"][str(w)]))
        splits = json.loads((path / "splits.json").read_text())
        identity_mix = _unb64(manifest["matrices"]["identity_mix"])
        severity_mix = _unb64(manifest["matrices"]["severity_mix"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, CohortFormatError):
            raise
        raise CohortFormatError(f"malformed dataset at {path}: {exc!r}") from exc
    if len(pids) != manifest["n_visits"]:
        raise CohortFormatError(
            f"visits.jsonl has {len(pids)} records, manifest declares {manifest['n_visits']}"
        )
    x = np.array(xs, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != cfg.obs_dim:
        raise CohortFormatError("observation vectors do not match obs_dim")
    return Cohort(
        config=cfg,
        identity_mix=identity_mix,
        severity_mix=severity_mix,
        trajectories=trajectories,
        patient_id=np.array(pids, dtype=np.int64),
        month=np.array(months, dtype=np.int64),
        x=x,
        labels={w: np.array(v, dtype=bool) for w, v in labels.items()},
        converted_already=np.array(already, dtype=bool),
        splits={k: [int(p) for p in v] for k, v in splits.items()},
    )


def dataset_roundtrip(cohort: Cohort, path: str | Path) -> Cohort:
    save_cohort(cohort, path)
    return load_cohort(path)

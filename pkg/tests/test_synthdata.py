import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tempeq.synthdata import (
    AugmentConfig,
    CohortFormatError,
    CohortVersionError,
    EmptyDatasetError,
    GeneratorConfig,
    augment_view,
    dataset_roundtrip,
    generate_cohort,
    load_cohort,
    sample_pair_batch,
    save_cohort,
    severity_from_increments,
    severity_path,
)


@pytest.fixture(scope="module")
def small():
    return generate_cohort(GeneratorConfig(n_patients=10, horizon_months=24, seed=5))


@pytest.fixture(scope="module")
def default_cohort():
    return generate_cohort(GeneratorConfig())


# severity -------------------------------------------------------------------


def test_zero_increments_give_constant_series():
    s = severity_from_increments(0.4, np.zeros(24))
    assert np.all(s == 0.4) and len(s) == 25


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), rate=st.floats(1e-3, 2.0))
def test_severity_monotone(seed, rate):
    s = severity_path(rate, 0.0, 24, np.random.default_rng(seed))
    assert len(s) == 25
    assert np.min(np.diff(s)) >= 0


def test_severity_mean_increment():
    rate = 0.07
    s = severity_path(rate, 0.0, 100_000, np.random.default_rng(0))
    inc = np.diff(s)
    se = inc.std(ddof=1) / np.sqrt(len(inc))
    assert abs(inc.mean() - rate) < 3 * se


def test_severity_rejects_nonpositive_rate():
    with pytest.raises(ValueError):
        severity_path(0.0, 0.0, 5, np.random.default_rng(0))


# cohort ---------------------------------------------------------------------


def test_counts(small):
    assert len(small.trajectories) == 10
    assert small.n_visits == 250
    assert small.x.shape == (250, 64)


def test_same_seed_same_bytes(tmp_path, small):
    again = generate_cohort(GeneratorConfig(n_patients=10, horizon_months=24, seed=5))
    assert small.equal(again)
    save_cohort(small, tmp_path / "a")
    save_cohort(again, tmp_path / "b")
    for name in ("manifest.json", "visits.jsonl", "splits.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_different_seed_differs(small):
    other = generate_cohort(GeneratorConfig(n_patients=10, seed=6))
    assert not np.array_equal(small.x, other.x)


def test_observation_model(small):
    cfg = small.config
    traj = small.trajectories[3]
    rows = small.patient_id == 3
    s = traj.severity
    clean = small.identity_mix @ traj.identity + cfg.progression_scale * (
        np.stack([s, s * s, np.sin(s)], axis=1) @ small.severity_mix.T
    )
    resid = small.x[rows] - clean
    assert abs(resid.std() - cfg.noise_std) < 0.02


@pytest.mark.parametrize("seed", range(5))
def test_label_soundness_exhaustive(seed):
    c = generate_cohort(GeneratorConfig(n_patients=25, seed=seed))
    thr = c.config.conversion_threshold
    for traj in c.trajectories:
        s = traj.severity
        assert np.all(np.diff(s) >= 0)
        crossings = [tau for tau in range(len(s)) if s[tau] >= thr]
        first = crossings[0] if crossings else None
        for t in range(len(s)):
            row = c.row_of(traj.patient_id, t)
            already = first is not None and t >= first
            assert c.converted_already[row] == already
            for w in c.config.label_windows:
                expected = (not already) and first is not None and t < first <= t + w
                assert c.labels[w][row] == expected


def test_default_prevalence(default_cohort):
    # 6-month ~ 1:20 and 12-month ~ 1:10 among pre-conversion visits
    pre = ~default_cohort.converted_already
    p6 = default_cohort.labels[6][pre].mean()
    p12 = default_cohort.labels[12][pre].mean()
    assert 0.03 < p6 < 0.08
    assert 0.07 < p12 < 0.14


def test_splits_partition_patients(default_cohort):
    sp = default_cohort.splits
    ids = sp["train"] + sp["val"] + sp["test"]
    assert sorted(ids) == list(range(200))
    assert len(sp["train"]) == pytest.approx(120, abs=2)
    assert len(sp["test"]) == pytest.approx(40, abs=2)
    conv = {t.patient_id for t in default_cohort.trajectories if t.conversion_month is not None}
    frac = {k: len(conv & set(v)) / len(v) for k, v in sp.items()}
    assert max(frac.values()) - min(frac.values()) < 0.06


@pytest.mark.parametrize(
    "kw",
    [
        {"n_patients": 0},
        {"horizon_months": 1},
        {"progression_rate_range": (0.2, 0.1)},
        {"noise_std": -1.0},
        {"split_fractions": (0.5, 0.5, 0.5)},
    ],
)
def test_config_violations(kw):
    with pytest.raises(ValueError):
        generate_cohort(GeneratorConfig(**kw))


# augmentation ---------------------------------------------------------------


def test_identity_augmentation():
    x = np.random.default_rng(0).normal(size=16)
    cfg = AugmentConfig(noise_std=0.0, mask_fraction=0.0, scale_range=(1.0, 1.0))
    np.testing.assert_array_equal(augment_view(x, cfg, np.random.default_rng(1)), x)


def test_mask_fraction_monte_carlo():
    frac = 0.3
    x = np.ones(10_000)
    cfg = AugmentConfig(noise_std=0.0, mask_fraction=frac, scale_range=(1.0, 1.0))
    zeros = np.mean(augment_view(x, cfg, np.random.default_rng(2)) == 0)
    se = np.sqrt(frac * (1 - frac) / x.size)
    assert abs(zeros - frac) < 4 * se


def test_different_streams_give_different_views():
    x = np.ones(32)
    cfg = AugmentConfig()
    a = augment_view(x, cfg, np.random.default_rng(1))
    b = augment_view(x, cfg, np.random.default_rng(2))
    assert not np.array_equal(a, b)


def test_augmentation_reads_only_observation(small):
    # same input and stream -> same view regardless of what else the cohort holds
    cfg = AugmentConfig()
    x = small.x[0].copy()
    a = augment_view(x, cfg, np.random.default_rng(9))
    b = augment_view(x, cfg, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)


# pair sampling ---------------------------------------------------------------


def test_single_patient_batch():
    c = generate_cohort(GeneratorConfig(n_patients=1, seed=1))
    b = sample_pair_batch(c, 128, np.random.default_rng(0))
    assert len(b) == 1


def test_pair_ranges_and_uniqueness(default_cohort):
    rng = np.random.default_rng(0)
    total = 0
    for _ in range(100):
        b = sample_pair_batch(default_cohort, 128, rng)
        assert len(set(b.patient_id.tolist())) == len(b) == 128
        assert b.dt_months.min() >= 1 and b.dt_months.max() <= 12
        assert np.all(b.dt_norm > 0) and np.all(b.dt_norm <= 1)
        np.testing.assert_array_equal(b.dt_norm, b.dt_months / 12)
        total += len(b)
    assert total >= 10_000


def test_pair_views_come_from_the_right_visits(small):
    cfg = AugmentConfig(noise_std=0.0, mask_fraction=0.0, scale_range=(1.0, 1.0))
    b = sample_pair_batch(small, 4, np.random.default_rng(3), cfg)
    for i, p in enumerate(b.patient_id):
        rows = np.flatnonzero(small.patient_id == p)
        ta = [small.month[r] for r in rows if np.array_equal(small.x[r], b.view_a[i])]
        tb = [small.month[r] for r in rows if np.array_equal(small.x[r], b.view_b[i])]
        assert len(ta) == 1 and len(tb) == 1
        assert tb[0] - ta[0] == b.dt_months[i]


def test_no_eligible_pairs(small):
    import dataclasses

    only_first = small.month == 0
    lone = dataclasses.replace(
        small,
        patient_id=small.patient_id[only_first],
        month=small.month[only_first],
        x=small.x[only_first],
        labels={w: v[only_first] for w, v in small.labels.items()},
        converted_already=small.converted_already[only_first],
        _index=None,
        _months=None,
        _eligible=None,
    )
    with pytest.raises(EmptyDatasetError):
        sample_pair_batch(lone, 8, np.random.default_rng(0))


# files ----------------------------------------------------------------------


def test_roundtrip(tmp_path, small):
    back = dataset_roundtrip(small, tmp_path / "d")
    assert back.equal(small)
    assert back.x.tobytes() == small.x.tobytes()


def test_truncated_file(tmp_path, small):
    save_cohort(small, tmp_path)
    data = (tmp_path / "visits.jsonl").read_bytes()
    (tmp_path / "visits.jsonl").write_bytes(data[: len(data) // 2])
    with pytest.raises(CohortFormatError):
        load_cohort(tmp_path)


def test_unknown_version(tmp_path, small):
    save_cohort(small, tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["version"] = 99
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CohortVersionError, match="version"):
        load_cohort(tmp_path)


def test_missing_file(tmp_path):
    with pytest.raises(CohortFormatError):
        load_cohort(tmp_path)


def test_visit_record_fields(tmp_path, small):
    save_cohort(small, tmp_path)
    rec = json.loads((tmp_path / "visits.jsonl").read_text().splitlines()[0])
    assert set(rec) == {"patient_id", "t", "x", "converted_within", "is_converted_already"}
    assert set(rec["converted_within"]) == {"6", "12"}

"""Synthetic generator: counts, determinism, profile invariants, domain
splitting and the separability of the group effect."""

from dataclasses import replace

import numpy as np
import pytest

from gfdann.data import AMCI, HC, SOURCE, TARGET
from gfdann.errors import DataError, ParameterError
from gfdann.synth import (
    DomainShift,
    GeneratorConfig,
    generate_dataset,
    make_subject_profiles,
    power_baseline,
    split_domains,
)

# oracle runs at 20 epochs per subject, master seeds 0..4
EFFECT_SIZES = (0.0, 0.5, 1.0, 2.0)
FROZEN_SUBJECT_ACCURACY = (0.4631578947368421, 0.5263157894736842, 0.6421052631578947, 0.7789473684210526)


def test_default_size_matches_clinical_cohort():
    cfg = GeneratorConfig()
    assert cfg.n_subjects == 19 and cfg.n_times == 750
    ds = generate_dataset(replace(cfg, epochs_per_subject=150))
    assert len(ds) == 2850
    assert ds.data.shape == (2850, 20, 750)
    assert ds.subjects() == list(range(19))


def test_group_counts_follow_config(small_dataset, small_config):
    groups = small_dataset.subject_groups()
    assert sum(g == AMCI for g in groups.values()) == small_config.n_amci_subjects
    assert sum(g == HC for g in groups.values()) == small_config.n_hc_subjects
    for s in small_dataset.subjects():
        sel = small_dataset.subject == s
        assert sel.sum() == small_config.epochs_per_subject
        assert np.array_equal(small_dataset.epoch_index[sel], np.arange(small_config.epochs_per_subject))
    assert np.all(small_dataset.domain == SOURCE)


def test_same_seed_is_bit_identical(small_config, small_dataset):
    again = generate_dataset(small_config)
    assert np.array_equal(again.data, small_dataset.data)
    other = generate_dataset(replace(small_config, seed=small_config.seed + 1))
    assert not np.array_equal(other.data, small_dataset.data)


def test_subject_data_does_not_depend_on_cohort_size(small_config, small_dataset):
    bigger = generate_dataset(replace(small_config, n_hc_subjects=5))
    for s in range(small_config.n_subjects):
        assert np.array_equal(bigger.data[bigger.subject == s], small_dataset.data[small_dataset.subject == s])


def test_profiles_satisfy_invariants():
    cfg = GeneratorConfig(individual_effect_size=2.0, seed=3)
    for p in make_subject_profiles(cfg):
        assert p.mixing_matrix.shape == (20, 8)
        assert np.linalg.matrix_rank(p.mixing_matrix) == 8
        assert np.all(p.band_power_profile > 0)
        assert p.individual_noise_scale > 0


def test_group_effect_moves_theta_and_alpha():
    cfg = GeneratorConfig(individual_effect_size=0.0, group_effect_size=1.0)
    profiles = make_subject_profiles(cfg)
    amci, hc = profiles[0].band_power_profile, profiles[-1].band_power_profile
    ratio = np.log(amci / hc)
    assert ratio[1] > 0 and ratio[2] < 0
    assert np.allclose(np.delete(ratio, [1, 2]), 0.0)


def test_without_individual_effect_subjects_share_profile():
    cfg = GeneratorConfig(individual_effect_size=0.0)
    profiles = make_subject_profiles(cfg)
    for p in profiles[1:]:
        assert np.array_equal(p.mixing_matrix, profiles[0].mixing_matrix)
        assert p.individual_noise_scale == 1.0


@pytest.mark.parametrize("kwargs", [
    {"channels": 0}, {"n_sources": 0}, {"n_amci_subjects": 0}, {"epochs_per_subject": 0},
    {"group_effect_size": -1.0}, {"individual_effect_size": -0.1}, {"n_sources": 9},
    {"channels": 6}, {"sample_rate": 50.0},
])
def test_invalid_configs_raise(kwargs):
    with pytest.raises(ParameterError):
        GeneratorConfig(**kwargs)


def test_domain_shift_validation():
    with pytest.raises(ParameterError):
        DomainShift(gain_drift=-0.1)
    with pytest.raises(ParameterError):
        DomainShift(gain_drift=1.0)
    assert DomainShift(0.0, 0.0).is_null
    assert GeneratorConfig(domain_shift={"gain_drift": 0.2, "additive_noise": 0.0}).domain_shift.gain_drift == 0.2


def test_split_partitions_the_dataset(small_dataset):
    source, target = split_domains(small_dataset, 3, DomainShift(0.0, 0.0))
    assert set(target.subject.tolist()) == {3}
    assert 3 not in source.subjects()
    assert len(source) + len(target) == len(small_dataset)
    assert np.all(target.domain == TARGET) and np.all(source.domain == SOURCE)
    rebuilt = np.concatenate([source.data, target.data])
    order = np.concatenate([np.flatnonzero(small_dataset.subject != 3), np.flatnonzero(small_dataset.subject == 3)])
    assert np.array_equal(rebuilt, small_dataset.data[order])
    assert np.all(small_dataset.domain == SOURCE)  # input untouched


def test_dms_split_sizes():
    ds = generate_dataset(GeneratorConfig(epochs_per_subject=150, n_amci_subjects=10, n_hc_subjects=9,
                                          sample_rate=100.0, channels=8))
    source, target = split_domains(ds, 3)
    assert len(source.subjects()) == 18 and len(target) == 150


def test_null_shift_leaves_target_unchanged(small_dataset):
    _, target = split_domains(small_dataset, 1, DomainShift(0.0, 0.0))
    assert np.array_equal(target.data, small_dataset.data[small_dataset.subject == 1])
    _, target = split_domains(small_dataset, 1, None)
    assert np.array_equal(target.data, small_dataset.data[small_dataset.subject == 1])


def test_gain_shift_stays_in_range_and_is_seeded(small_dataset):
    raw = small_dataset.data[small_dataset.subject == 4]
    _, a = split_domains(small_dataset, 4, DomainShift(0.3, 0.0), seed=7)
    _, b = split_domains(small_dataset, 4, DomainShift(0.3, 0.0), seed=7)
    _, c = split_domains(small_dataset, 4, DomainShift(0.3, 0.0), seed=8)
    assert np.array_equal(a.data, b.data) and not np.array_equal(a.data, c.data)
    gains = (a.data / raw)[:, :, 0]
    assert np.allclose(gains, gains[0])
    assert np.all(np.abs(gains[0] - 1.0) <= 0.3)


def test_additive_noise_scales_with_channel_rms(small_dataset):
    raw = small_dataset.data[small_dataset.subject == 0]
    _, t = split_domains(small_dataset, 0, DomainShift(0.0, 0.1), seed=0)
    resid = t.data - raw
    ratio = resid.std(axis=(0, 2)) / np.sqrt(np.mean(raw ** 2, axis=(0, 2)))
    assert np.allclose(ratio, 0.1, rtol=0.05)


def test_unknown_subject_is_an_error(small_dataset):
    with pytest.raises(DataError):
        split_domains(small_dataset, 99)


@pytest.fixture(scope="module")
def separability():
    out = []
    for g in EFFECT_SIZES:
        runs = [power_baseline(generate_dataset(GeneratorConfig(epochs_per_subject=20, group_effect_size=g, seed=s)))
                for s in range(5)]
        out.append((np.mean([r["subject_accuracy"] for r in runs]), np.mean([r["epoch_accuracy"] for r in runs])))
    return out


def test_no_group_effect_is_chance_level(separability):
    subject_acc, epoch_acc = separability[0]
    assert abs(subject_acc - 0.5) <= 0.10
    assert abs(epoch_acc - 0.5) <= 0.10


def test_separability_is_monotone_in_group_effect(separability):
    accs = [s for s, _ in separability]
    assert all(b >= a for a, b in zip(accs, accs[1:]))
    assert accs[-1] > accs[0] + 0.2


def test_separability_matches_frozen_oracle(separability):
    for (got, _), want in zip(separability, FROZEN_SUBJECT_ACCURACY):
        assert abs(got - want) < 1e-12

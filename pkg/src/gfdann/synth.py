"""Synthetic multi-subject EEG with group, individual and domain effects.

Each subject mixes eight band-limited Gaussian sources into the sensor
montage.  The aMCI group carries more 4-8 Hz and less 8-12 Hz source power.
Subjects differ through a perturbed mixing matrix, per-source log-power
offsets and their own noise level.  Every channel also carries independent
1-40 Hz background activity and white sensor noise, scaled by that noise
level.  A held-out subject can be given a per-channel gain drift plus white
noise to model a session shift.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy import signal

from .data import AMCI, HC, SOURCE, TARGET, EpochSet
from .errors import DataError, ParameterError

__all__ = [
    "SOURCE_BANDS",
    "DomainShift",
    "GeneratorConfig",
    "SubjectProfile",
    "make_subject_profiles",
    "generate_dataset",
    "split_domains",
    "power_baseline",
]

# 8 latent source bands spanning 2-30 Hz; index 1 is theta, index 2 alpha
SOURCE_BANDS = ((2.0, 4.0), (4.0, 8.0), (8.0, 12.0), (12.0, 15.0),
                (15.0, 18.0), (18.0, 22.0), (22.0, 26.0), (26.0, 30.0))
THETA, ALPHA = 1, 2

# scales tied to effect size 1.0
GROUP_LOG_POWER = 0.5  # log-power shift of theta (+) and alpha (-) in aMCI
INDIVIDUAL_LOG_POWER = 0.5  # sd of per-subject per-source log-power offsets
INDIVIDUAL_MIXING = 0.4  # sd of mixing perturbation relative to base entries
INDIVIDUAL_NOISE = 0.3  # sd of per-subject log sensor-noise scale
EPOCH_JITTER = 0.2  # sd of per-epoch per-source log-amplitude jitter
SOURCE_AMPLITUDE = 10.0  # microvolts
SENSOR_NOISE = 2.0  # white, microvolts, before the per-subject factor
BACKGROUND = 20.0  # spatially independent 1-40 Hz activity, microvolts
BACKGROUND_BAND = (1.0, 40.0)


@dataclass(frozen=True)
class DomainShift:
    gain_drift: float = 0.3
    additive_noise: float = 0.1  # noise sd as a fraction of each channel's rms

    def __post_init__(self):
        if self.gain_drift < 0 or self.additive_noise < 0:
            raise ParameterError("domain shift magnitudes must be >= 0")
        if self.gain_drift >= 1:
            raise ParameterError("gain_drift must be < 1 so channel gains stay positive")

    @property
    def is_null(self) -> bool:
        return self.gain_drift == 0 and self.additive_noise == 0


@dataclass(frozen=True)
class GeneratorConfig:
    n_amci_subjects: int = 10
    n_hc_subjects: int = 9
    epochs_per_subject: int = 150
    epoch_length: float = 2.5
    sample_rate: float = 300.0
    channels: int = 20
    n_sources: int = 8
    group_effect_size: float = 1.0
    individual_effect_size: float = 1.0
    domain_shift: DomainShift = field(default_factory=DomainShift)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.domain_shift, dict):
            object.__setattr__(self, "domain_shift", DomainShift(**self.domain_shift))
        for name in ("n_amci_subjects", "n_hc_subjects", "epochs_per_subject", "channels", "n_sources"):
            if int(getattr(self, name)) <= 0:
                raise ParameterError(f"{name} must be positive")
        if self.n_sources > len(SOURCE_BANDS):
            raise ParameterError(f"at most {len(SOURCE_BANDS)} sources are defined")
        if self.n_sources > self.channels:
            raise ParameterError("need at least as many channels as sources for a full-rank mixing")
        if self.group_effect_size < 0 or self.individual_effect_size < 0:
            raise ParameterError("effect sizes must be >= 0")
        if self.epoch_length <= 0 or self.sample_rate <= 0:
            raise ParameterError("epoch_length and sample_rate must be positive")
        if SOURCE_BANDS[self.n_sources - 1][1] >= self.sample_rate / 2:
            raise ParameterError("sample rate too low for the source bands")

    @property
    def n_subjects(self) -> int:
        return self.n_amci_subjects + self.n_hc_subjects

    @property
    def n_times(self) -> int:
        n = self.epoch_length * self.sample_rate
        if abs(n - round(n)) > 1e-9:
            raise ParameterError("epoch_length * sample_rate must be a whole number of samples")
        return int(round(n))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SubjectProfile:
    subject_id: int
    group_label: int
    mixing_matrix: np.ndarray  # channels x sources
    band_power_profile: np.ndarray  # per-source power gain
    individual_noise_scale: float


def _rng(seed: int, *path: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, *path]))


def make_subject_profiles(config: GeneratorConfig) -> list[SubjectProfile]:
    """Subjects 0..m-1 are aMCI, m..m+n-1 are HC."""
    ch, ns = config.channels, config.n_sources
    head = _rng(config.seed, 0)
    base = head.normal(size=(ch, ns))
    ies, ges = config.individual_effect_size, config.group_effect_size
    profiles = []
    for sid in range(config.n_subjects):
        group = AMCI if sid < config.n_amci_subjects else HC
        rng = _rng(config.seed, 1, sid)
        mixing = base + ies * INDIVIDUAL_MIXING * rng.normal(size=(ch, ns))
        while np.linalg.matrix_rank(mixing) < ns:  # measure-zero, kept for the invariant
            mixing = mixing + 1e-6 * rng.normal(size=(ch, ns))
        log_power = ies * INDIVIDUAL_LOG_POWER * rng.normal(size=ns)
        if group == AMCI:
            if ns > THETA:
                log_power[THETA] += ges * GROUP_LOG_POWER
            if ns > ALPHA:
                log_power[ALPHA] -= ges * GROUP_LOG_POWER
        noise_scale = float(np.exp(ies * INDIVIDUAL_NOISE * rng.normal()))
        profiles.append(SubjectProfile(sid, group, mixing, np.exp(log_power), noise_scale))
    return profiles


def _band_limited_noise(rng: np.random.Generator, shape, band, sample_rate: float) -> np.ndarray:
    """Unit-variance Gaussian noise restricted to ``band`` by FFT masking."""
    n = shape[-1]
    white = rng.normal(size=shape)
    spec = np.fft.rfft(white, axis=-1)
    freqs = np.fft.rfftfreq(n, d=1.0 / sample_rate)
    mask = (freqs >= band[0]) & (freqs < band[1])
    spec[..., ~mask] = 0.0
    out = np.fft.irfft(spec, n=n, axis=-1)
    # white noise has flat expected |X_f|^2 = n, so keeping a fraction of the
    # bins keeps that fraction of the variance
    frac = (2.0 * mask.sum() - mask[0] - (mask[-1] if n % 2 == 0 else 0)) / n
    return out / np.sqrt(frac)


def _subject_epochs(profile: SubjectProfile, config: GeneratorConfig) -> np.ndarray:
    rng = _rng(config.seed, 2, profile.subject_id)
    e, ns, n = config.epochs_per_subject, config.n_sources, config.n_times
    sources = np.empty((e, ns, n))
    for s in range(ns):
        sources[:, s] = _band_limited_noise(rng, (e, n), SOURCE_BANDS[s], config.sample_rate)
    amp = SOURCE_AMPLITUDE * np.sqrt(profile.band_power_profile)
    jitter = np.exp(EPOCH_JITTER * rng.normal(size=(e, ns)))
    sources *= (amp * jitter)[:, :, None]
    x = np.einsum("cs,esn->ecn", profile.mixing_matrix, sources)
    # channel-independent background keeps every band's covariance full rank
    background = _band_limited_noise(rng, x.shape, BACKGROUND_BAND, config.sample_rate)
    x += profile.individual_noise_scale * (BACKGROUND * background + SENSOR_NOISE * rng.normal(size=x.shape))
    return x


def generate_dataset(config: GeneratorConfig) -> EpochSet:
    profiles = make_subject_profiles(config)
    e = config.epochs_per_subject
    parts = []
    for p in profiles:
        parts.append(EpochSet(
            data=_subject_epochs(p, config),
            subject=np.full(e, p.subject_id),
            group=np.full(e, p.group_label),
            domain=np.full(e, SOURCE),
            epoch_index=np.arange(e),
            sample_rate=config.sample_rate,
        ))
    return EpochSet.concatenate(parts)


def split_domains(dataset: EpochSet, target_subject: int, shift: Optional[DomainShift] = None,
                  seed: int = 0) -> tuple[EpochSet, EpochSet]:
    """Return (X_S, X_T): every other subject, and ``target_subject`` shifted.

    The shift for a subject depends only on ``seed`` and the subject id.
    """
    mask = dataset.subject == target_subject
    if not mask.any():
        raise DataError(f"unknown subject {target_subject}")
    source = dataset.select(~mask)
    target = dataset.select(mask)
    target.domain[:] = TARGET
    if shift is not None and not shift.is_null:
        rng = _rng(seed, 3, int(target_subject))
        ch = target.n_channels
        gains = 1.0 + rng.uniform(-shift.gain_drift, shift.gain_drift, size=ch)
        data = target.data * gains[None, :, None]
        if shift.additive_noise > 0:
            rms = np.sqrt(np.mean(data ** 2, axis=(0, 2)))
            data = data + shift.additive_noise * rms[None, :, None] * rng.normal(size=data.shape)
        target.data = data
    return source, target


# -- fixed reference pipeline ------------------------------------------------

def _band_log_power(data: np.ndarray, sample_rate: float, bands) -> np.ndarray:
    freqs, psd = signal.welch(data, fs=sample_rate, nperseg=min(256, data.shape[-1]), axis=-1)
    cols = []
    for lo, hi in bands:
        sel = (freqs >= lo) & (freqs < hi)
        cols.append(np.log(psd[..., sel].mean(axis=-1).mean(axis=-1)))  # channel-averaged
    return np.stack(cols, axis=-1)


def power_baseline(dataset: EpochSet, bands=((4.0, 8.0), (8.0, 12.0))) -> dict:
    """Leave-one-subject-out nearest-centroid classifier on log band power.

    Features are channel-averaged log powers in ``bands``, standardised with
    training statistics.  Returns subject-level accuracy (ties count as
    wrong) and the epoch-level accuracy.
    """
    feats = _band_log_power(dataset.data, dataset.sample_rate, bands)
    subjects = dataset.subjects()
    correct_subjects = 0
    correct_epochs = 0
    for s in subjects:
        test = dataset.subject == s
        xtr, ytr = feats[~test], dataset.group[~test]
        mu, sd = xtr.mean(axis=0), xtr.std(axis=0) + 1e-12
        ztr = (xtr - mu) / sd
        zte = (feats[test] - mu) / sd
        c1 = ztr[ytr == AMCI].mean(axis=0)
        c0 = ztr[ytr == HC].mean(axis=0)
        pred = (np.sum((zte - c1) ** 2, axis=1) < np.sum((zte - c0) ** 2, axis=1)).astype(int)
        truth = int(dataset.group[test][0])
        correct_epochs += int(np.sum(pred == truth))
        ones = pred.sum()
        verdict = 1 if 2 * ones > pred.size else (0 if 2 * ones < pred.size else -1)
        correct_subjects += int(verdict == truth)
    return {
        "subject_accuracy": correct_subjects / len(subjects),
        "epoch_accuracy": correct_epochs / len(dataset),
    }

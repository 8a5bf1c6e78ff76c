"""Shallow features: filter banks, time windows, CSP and average power.

Every (frequency band, time window) cell gets its own CSP spatial filter.
A feature is the mean squared output of one spatial filter over one window,
which equals ``w @ M @ w`` where ``M`` is the window's uncentred second
moment matrix.  The moment matrices are cached once per epoch so that each
cross-validation fold only needs small eigenproblems and quadratic forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, signal

from .data import Epoch, EpochSet
from .errors import DataError, LeakageError, NumericalError, ParameterError

__all__ = [
    "bandpass_filter",
    "notch_filter",
    "make_frequency_bands",
    "make_time_bands",
    "BandGrid",
    "CspFilter",
    "CspFilterBank",
    "FeatureConfig",
    "ShallowFeatureTensor",
    "BandMoments",
    "epoch_covariance",
    "fit_csp",
    "fit_csp_from_covariances",
    "fit_filter_bank",
    "compute_band_moments",
    "extract_feature_tensor",
    "extract_features",
    "build_fold_features",
]

FILTER_ORDER = 4


# -- filtering ---------------------------------------------------------------

def _check_band(low: float, high: float, sample_rate: float) -> None:
    nyq = sample_rate / 2.0
    if not (0.0 < low < high < nyq):
        raise ParameterError(f"band ({low}, {high}) Hz must satisfy 0 < low < high < {nyq} (Nyquist)")


def _bandpass_sos(low: float, high: float, sample_rate: float, order: int = FILTER_ORDER) -> np.ndarray:
    _check_band(low, high, sample_rate)
    return signal.butter(order, [low, high], btype="bandpass", fs=sample_rate, output="sos")


def bandpass_filter(x: np.ndarray, low: float, high: float, sample_rate: float,
                    order: int = FILTER_ORDER) -> np.ndarray:
    """Zero-phase Butterworth band-pass along the last axis."""
    sos = _bandpass_sos(low, high, sample_rate, order)
    return signal.sosfiltfilt(sos, np.asarray(x, dtype=np.float64), axis=-1)


def notch_filter(x: np.ndarray, sample_rate: float, stop_low: float = 48.0, stop_high: float = 52.0,
                 order: int = FILTER_ORDER) -> np.ndarray:
    """Zero-phase Butterworth band-stop along the last axis."""
    _check_band(stop_low, stop_high, sample_rate)
    sos = signal.butter(order, [stop_low, stop_high], btype="bandstop", fs=sample_rate, output="sos")
    return signal.sosfiltfilt(sos, np.asarray(x, dtype=np.float64), axis=-1)


# -- banding -----------------------------------------------------------------

def _count_steps(span: float, width: float, step: float) -> int:
    # tolerate float noise such as 2.5 - 0.5 = 1.9999999
    return int(math.floor((span - width) / step + 1e-9)) + 1


def make_frequency_bands(fmin: float, fmax: float, width: float, step: float) -> list[tuple[float, float]]:
    if width <= 0 or step <= 0:
        raise ParameterError("band width and step must be positive")
    if fmin < 0:
        raise ParameterError("fmin must be non-negative")
    if fmin + width > fmax + 1e-12:
        raise ParameterError(f"first band ({fmin}, {fmin + width}) exceeds fmax={fmax}")
    n = _count_steps(fmax - fmin, width, step)
    return [(fmin + i * step, fmin + i * step + width) for i in range(n)]


def make_time_bands(epoch_length: float, width: float, step: float) -> list[tuple[float, float]]:
    if width <= 0 or step <= 0:
        raise ParameterError("window width and step must be positive")
    if width > epoch_length + 1e-12:
        raise ParameterError(f"window width {width}s exceeds epoch length {epoch_length}s")
    n = _count_steps(epoch_length, width, step)
    return [(i * step, i * step + width) for i in range(n)]


@dataclass(frozen=True)
class BandGrid:
    frequency_bands: tuple[tuple[float, float], ...]
    time_bands: tuple[tuple[float, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "frequency_bands", tuple((float(a), float(b)) for a, b in self.frequency_bands))
        object.__setattr__(self, "time_bands", tuple((float(a), float(b)) for a, b in self.time_bands))
        if not self.frequency_bands or not self.time_bands:
            raise ParameterError("grid needs at least one frequency band and one time band")
        for bands, what in ((self.frequency_bands, "frequency"), (self.time_bands, "time")):
            for lo, hi in bands:
                if not lo < hi:
                    raise ParameterError(f"{what} band ({lo}, {hi}) must have low < high")
            starts = [b[0] for b in bands]
            if starts != sorted(starts):
                raise ParameterError(f"{what} bands must be ordered")

    @classmethod
    def from_params(cls, fmin=2.0, fmax=30.0, f_width=4.0, f_step=2.0,
                    epoch_length=2.5, t_width=0.5, t_step=0.5) -> "BandGrid":
        return cls(tuple(make_frequency_bands(fmin, fmax, f_width, f_step)),
                   tuple(make_time_bands(epoch_length, t_width, t_step)))

    @property
    def n_frequency(self) -> int:
        return len(self.frequency_bands)

    @property
    def n_time(self) -> int:
        return len(self.time_bands)

    @property
    def n_cells(self) -> int:
        return self.n_frequency * self.n_time

    def window_slices(self, sample_rate: float, n_times: int) -> list[slice]:
        out = []
        for start, end in self.time_bands:
            a = int(round(start * sample_rate))
            b = int(round(end * sample_rate))
            if b > n_times or b <= a:
                raise DataError(f"time band ({start}, {end})s does not fit an epoch of {n_times} samples")
            out.append(slice(a, b))
        return out


# -- CSP ---------------------------------------------------------------------

@dataclass(frozen=True)
class CspFilter:
    filters: np.ndarray  # n_components x channels
    eigenvalues: np.ndarray  # descending for "first" selection


def epoch_covariance(x: np.ndarray) -> np.ndarray:
    """Trace-normalised covariance of one channels x time segment."""
    xc = x - x.mean(axis=1, keepdims=True)
    cov = xc @ xc.T
    tr = np.trace(cov)
    if tr <= 0:
        raise NumericalError("segment has zero variance; cannot normalise covariance")
    return cov / tr


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Make the first nonzero entry of every row positive."""
    out = vectors.copy()
    for row in out:
        nz = np.flatnonzero(np.abs(row) > 1e-300)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return out


def fit_csp_from_covariances(cov_a: np.ndarray, cov_b: np.ndarray, n_components: int = 5,
                             regularization: float = 1e-6, selection: str = "first") -> CspFilter:
    """Solve ``cov_a w = lam (cov_a + cov_b) w`` and keep ``n_components`` filters.

    Each class covariance gets ``regularization * trace * I`` added first.
    Filters are scaled so that ``w (cov_a + cov_b) w.T = 1``.
    """
    cov_a = np.asarray(cov_a, dtype=np.float64)
    cov_b = np.asarray(cov_b, dtype=np.float64)
    if cov_a.shape != cov_b.shape or cov_a.ndim != 2 or cov_a.shape[0] != cov_a.shape[1]:
        raise DataError(f"covariances must be equal square matrices, got {cov_a.shape} and {cov_b.shape}")
    if regularization < 0:
        raise ParameterError("regularization must be >= 0")
    ch = cov_a.shape[0]
    if not 1 <= n_components <= ch:
        raise ParameterError(f"n_components must lie in [1, {ch}]")
    if selection not in ("first", "both_ends"):
        raise ParameterError(f"unknown component selection {selection!r}")
    eye = np.eye(ch)
    sa = 0.5 * (cov_a + cov_a.T) + regularization * np.trace(cov_a) * eye
    sb = 0.5 * (cov_b + cov_b.T) + regularization * np.trace(cov_b) * eye
    composite = sa + sb
    ev = np.linalg.eigvalsh(composite)
    if ev[0] <= ev[-1] * 1e-12:
        raise NumericalError(
            "composite covariance is rank deficient; increase the CSP regularization above 0"
        )
    lam, vecs = linalg.eigh(sa, composite)
    order = np.argsort(lam, kind="stable")[::-1]
    if selection == "first":
        keep = order[:n_components]
    else:
        top = (n_components + 1) // 2
        keep = np.concatenate([order[:top], order[len(order) - (n_components - top):]])
    filters = _fix_signs(vecs[:, keep].T)
    return CspFilter(filters=filters, eigenvalues=lam[keep].copy())


def fit_csp(class_a_epochs: Sequence[np.ndarray], class_b_epochs: Sequence[np.ndarray],
            n_components: int = 5, regularization: float = 1e-6, selection: str = "first") -> CspFilter:
    if len(class_a_epochs) < 2 or len(class_b_epochs) < 2:
        raise DataError("CSP needs at least two epochs per class")
    shapes = {np.shape(e)[0] for e in class_a_epochs} | {np.shape(e)[0] for e in class_b_epochs}
    if len(shapes) != 1:
        raise DataError(f"channel counts differ across epochs: {sorted(shapes)}")
    cov_a = np.mean([epoch_covariance(np.asarray(e, dtype=np.float64)) for e in class_a_epochs], axis=0)
    cov_b = np.mean([epoch_covariance(np.asarray(e, dtype=np.float64)) for e in class_b_epochs], axis=0)
    return fit_csp_from_covariances(cov_a, cov_b, n_components, regularization, selection)


@dataclass(frozen=True)
class CspFilterBank:
    grid: BandGrid
    filters: np.ndarray  # K x T x C x channels
    eigenvalues: np.ndarray  # K x T x C

    @property
    def n_components(self) -> int:
        return self.filters.shape[2]

    @property
    def n_channels(self) -> int:
        return self.filters.shape[3]

    @property
    def n_filters(self) -> int:
        return self.filters.shape[0] * self.filters.shape[1]

    def cell(self, k: int, t: int) -> CspFilter:
        return CspFilter(self.filters[k, t], self.eigenvalues[k, t])


# -- moments and features ----------------------------------------------------

@dataclass(frozen=True)
class FeatureConfig:
    fmin: float = 2.0
    fmax: float = 30.0
    f_width: float = 4.0
    f_step: float = 2.0
    t_width: float = 0.5
    t_step: float = 0.5
    n_components: int = 5
    regularization: float = 1e-6
    selection: str = "first"
    log_power: bool = False
    preprocess: bool = True
    broadband: tuple[float, float] = (0.5, 70.0)
    notch: tuple[float, float] = (48.0, 52.0)

    def __post_init__(self):
        if self.selection not in ("first", "both_ends"):
            raise ParameterError(f"unknown component selection {self.selection!r}")
        if self.n_components < 1:
            raise ParameterError("n_components must be >= 1")
        if self.regularization < 0:
            raise ParameterError("regularization must be >= 0")
        object.__setattr__(self, "broadband", tuple(float(v) for v in self.broadband))
        object.__setattr__(self, "notch", tuple(float(v) for v in self.notch))

    def grid(self, epoch_length: float) -> BandGrid:
        return BandGrid.from_params(self.fmin, self.fmax, self.f_width, self.f_step,
                                    epoch_length, self.t_width, self.t_step)


@dataclass(frozen=True)
class ShallowFeatureTensor:
    values: np.ndarray  # C x K x T
    subject_id: int
    group_label: int
    domain_label: int


@dataclass
class BandMoments:
    """Per-epoch window statistics of band-filtered signals.

    ``second[n, k, t]`` is ``X X^T / L`` of epoch n filtered to band k and
    cut to window t; ``mean[n, k, t]`` is the per-channel mean of the same
    segment.  Both are enough to form CSP covariances and power features.
    """

    grid: BandGrid
    second: np.ndarray  # N x K x T x ch x ch
    mean: np.ndarray  # N x K x T x ch
    subject: np.ndarray
    group: np.ndarray
    domain: np.ndarray

    def __len__(self) -> int:
        return self.second.shape[0]

    def select(self, mask: np.ndarray) -> "BandMoments":
        return BandMoments(self.grid, self.second[mask], self.mean[mask],
                           self.subject[mask], self.group[mask], self.domain[mask])

    def covariances(self) -> np.ndarray:
        """Trace-normalised covariances, N x K x T x ch x ch."""
        cov = self.second - self.mean[..., :, None] * self.mean[..., None, :]
        tr = np.trace(cov, axis1=-2, axis2=-1)
        if np.any(tr <= 0):
            raise NumericalError("segment with zero variance; cannot normalise covariance")
        return cov / tr[..., None, None]


def _preprocess(x: np.ndarray, sample_rate: float, config: FeatureConfig) -> np.ndarray:
    lo, hi = config.broadband
    hi = min(hi, 0.45 * sample_rate)
    x = bandpass_filter(x, lo, hi, sample_rate)
    if config.notch[1] < sample_rate / 2.0:
        x = notch_filter(x, sample_rate, *config.notch)
    return x


def compute_band_moments(epochs: EpochSet, grid: BandGrid, config: Optional[FeatureConfig] = None,
                         chunk: int = 128) -> BandMoments:
    config = config or FeatureConfig()
    n, ch, n_times = epochs.data.shape
    slices = grid.window_slices(epochs.sample_rate, n_times)
    sos_bank = [_bandpass_sos(lo, hi, epochs.sample_rate) for lo, hi in grid.frequency_bands]
    second = np.empty((n, grid.n_frequency, grid.n_time, ch, ch))
    mean = np.empty((n, grid.n_frequency, grid.n_time, ch))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        x = epochs.data[start:stop]
        if config.preprocess:
            x = _preprocess(x, epochs.sample_rate, config)
        for k, sos in enumerate(sos_bank):
            xf = signal.sosfiltfilt(sos, x, axis=-1)
            for t, sl in enumerate(slices):
                seg = xf[:, :, sl]
                second[start:stop, k, t] = np.einsum("nct,ndt->ncd", seg, seg) / seg.shape[-1]
                mean[start:stop, k, t] = seg.mean(axis=-1)
    return BandMoments(grid, second, mean, epochs.subject.copy(), epochs.group.copy(), epochs.domain.copy())


def fit_filter_bank(moments: BandMoments, config: Optional[FeatureConfig] = None,
                    positive_group: int = 1) -> CspFilterBank:
    """Fit one CSP filter per cell; class A is ``positive_group``."""
    config = config or FeatureConfig()
    is_a = moments.group == positive_group
    if is_a.sum() < 2 or (~is_a).sum() < 2:
        raise DataError("CSP needs at least two epochs from each class in the training split")
    cov = moments.covariances()
    cov_a = cov[is_a].mean(axis=0)
    cov_b = cov[~is_a].mean(axis=0)
    grid = moments.grid
    ch = cov.shape[-1]
    filters = np.empty((grid.n_frequency, grid.n_time, config.n_components, ch))
    eig = np.empty((grid.n_frequency, grid.n_time, config.n_components))
    for k in range(grid.n_frequency):
        for t in range(grid.n_time):
            f = fit_csp_from_covariances(cov_a[k, t], cov_b[k, t], config.n_components,
                                         config.regularization, config.selection)
            filters[k, t] = f.filters
            eig[k, t] = f.eigenvalues
    return CspFilterBank(grid, filters, eig)


def _check_bank(bank: CspFilterBank, grid: BandGrid, n_channels: int) -> None:
    if bank.grid != grid:
        raise DataError("filter bank was fitted on a different band grid")
    if bank.n_channels != n_channels:
        raise DataError(f"filter bank expects {bank.n_channels} channels, got {n_channels}")


def extract_features(moments: BandMoments, bank: CspFilterBank, log_power: bool = False) -> np.ndarray:
    """Average power features, shape N x C x K x T."""
    _check_bank(bank, moments.grid, moments.second.shape[-1])
    # values[n, c, k, t] = w[k,t,c] . M[n,k,t] . w[k,t,c]
    mw = np.einsum("nktij,ktcj->nktci", moments.second, bank.filters)
    power = np.einsum("nktci,ktci->nckt", mw, bank.filters)
    power = np.maximum(power, 0.0)  # remove round-off negatives of a PSD form
    if log_power:
        power = np.log(power + 1e-12)
    return power


def extract_feature_tensor(epoch: Epoch, grid: BandGrid, bank: CspFilterBank,
                           config: Optional[FeatureConfig] = None) -> ShallowFeatureTensor:
    config = config or FeatureConfig()
    samples = np.asarray(epoch.samples, dtype=np.float64)
    _check_bank(bank, grid, samples.shape[0])
    single = EpochSet(samples[None], [epoch.subject_id], [epoch.group_label], [epoch.domain_label],
                      [epoch.epoch_index], epoch.sample_rate)
    values = extract_features(compute_band_moments(single, grid, config), bank, config.log_power)[0]
    return ShallowFeatureTensor(values, epoch.subject_id, epoch.group_label, epoch.domain_label)


@dataclass
class FoldFeatures:
    train: np.ndarray  # N_train x C x K x T
    test: np.ndarray
    bank: CspFilterBank
    train_subject: np.ndarray = field(repr=False, default=None)
    train_group: np.ndarray = field(repr=False, default=None)
    test_subject: np.ndarray = field(repr=False, default=None)


def build_fold_features(train, test, grid: BandGrid, config: Optional[FeatureConfig] = None) -> FoldFeatures:
    """Fit the CSP bank on ``train`` only and transform both splits.

    ``train`` and ``test`` may be :class:`EpochSet` or precomputed
    :class:`BandMoments` (for example slices of a cached whole-dataset pass).
    """
    config = config or FeatureConfig()
    overlap = set(np.unique(train.subject).tolist()) & set(np.unique(test.subject).tolist())
    if overlap:
        raise LeakageError(f"subjects {sorted(overlap)} appear in both train and test splits")
    if np.unique(train.group).size < 2:
        raise DataError("training split holds a single class; CSP needs both")
    tr = train if isinstance(train, BandMoments) else compute_band_moments(train, grid, config)
    te = test if isinstance(test, BandMoments) else compute_band_moments(test, grid, config)
    if tr.grid != grid or te.grid != grid:
        raise DataError("precomputed moments use a different band grid")
    bank = fit_filter_bank(tr, config)
    return FoldFeatures(
        train=extract_features(tr, bank, config.log_power),
        test=extract_features(te, bank, config.log_power),
        bank=bank,
        train_subject=tr.subject.copy(),
        train_group=tr.group.copy(),
        test_subject=te.subject.copy(),
    )

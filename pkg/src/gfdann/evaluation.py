"""Subject-level voting, confidence metrics, leave-one-subject-out runs,
the four-way ablation and 2-D feature projections."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import AMCI, HC, EpochSet
from .errors import DataError, LeakageError
from .features import BandMoments, FeatureConfig, build_fold_features, compute_band_moments
from .model import ArchConfig, GfdannModel
from .synth import DomainShift, split_domains
from .training import TrainConfig, train, write_training_log

logger = logging.getLogger(__name__)

__all__ = [
    "REFUSE",
    "VARIANTS",
    "VARIANT_LABELS",
    "vote_subject",
    "confidence_probability",
    "average_confidence",
    "SubjectDiagnosis",
    "diagnose",
    "compute_metrics",
    "ExperimentResult",
    "fold_seed",
    "loso_cross_validate",
    "run_ablation",
    "pca_project",
    "export_feature_projection",
    "write_results",
]

REFUSE = "refuse"

VARIANTS = {
    "basenet1": (False, False),
    "basenet2": (True, False),
    "basenet3": (False, True),
    "gfdann": (True, True),
}
VARIANT_LABELS = {"basenet1": "BaseNet-1", "basenet2": "BaseNet-2", "basenet3": "BaseNet-3", "gfdann": "GF-DANN"}


# -- voting and metrics ------------------------------------------------------

def vote_subject(predictions: Sequence[int]):
    """Majority verdict over sample predictions; an exact tie is refused."""
    preds = np.asarray(predictions)
    if preds.size == 0:
        raise DataError("cannot vote on an empty prediction list")
    if not np.isin(preds, (0, 1)).all():
        raise DataError("sample predictions must be 0 or 1")
    ones = int(preds.sum())
    k = preds.size
    if 2 * ones > k:
        return 1
    if 2 * ones < k:
        return 0
    return REFUSE


def confidence_probability(predictions: Sequence[int], true_label: int) -> float:
    """Fraction of one subject's samples predicted correctly."""
    preds = np.asarray(predictions)
    if preds.size == 0:
        raise DataError("subject has no samples")
    return int(np.sum(preds == true_label)) / preds.size


def average_confidence(values: Sequence[float]) -> float:
    vals = [float(v) for v in values]
    if not vals:
        raise DataError("no subjects to average")
    return sum(vals) / len(vals)


@dataclass
class SubjectDiagnosis:
    subject_id: int
    predictions: np.ndarray
    verdict: object  # 0, 1 or REFUSE
    confidence: float
    true_label: int

    @property
    def correct(self) -> bool:
        return self.verdict == self.true_label

    def to_dict(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "verdict": self.verdict,
            "confidence": self.confidence,
            "true_label": self.true_label,
            "n_samples": int(self.predictions.size),
            "n_predicted_amci": int(self.predictions.sum()),
        }


def diagnose(subject_id: int, predictions: Sequence[int], true_label: int) -> SubjectDiagnosis:
    preds = np.asarray(predictions, dtype=np.int64)
    return SubjectDiagnosis(int(subject_id), preds, vote_subject(preds),
                            confidence_probability(preds, true_label), int(true_label))


def compute_metrics(diagnoses: Sequence[SubjectDiagnosis]) -> dict:
    """Acc, ACP, Sen (aMCI positive), Spe (HC negative) as fractions.

    A refused verdict is wrong for Acc/Sen/Spe.  Sen or Spe is None when the
    corresponding class has no subjects.
    """
    if not diagnoses:
        raise DataError("no diagnoses")
    pos = [d for d in diagnoses if d.true_label == AMCI]
    neg = [d for d in diagnoses if d.true_label == HC]
    return {
        "acc": sum(d.correct for d in diagnoses) / len(diagnoses),
        "acp": average_confidence([d.confidence for d in diagnoses]),
        "sen": sum(d.correct for d in pos) / len(pos) if pos else None,
        "spe": sum(d.correct for d in neg) / len(neg) if neg else None,
        "n_subjects": len(diagnoses),
        "n_refused": sum(d.verdict == REFUSE for d in diagnoses),
    }


# -- cross-validation --------------------------------------------------------

def fold_seed(master_seed: int, subject_id: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(subject_id)]).generate_state(1)[0])


@dataclass
class ExperimentResult:
    diagnoses: list[SubjectDiagnosis]
    metrics: dict
    config: dict
    seed: int
    variant: str = "gfdann"
    fold_seeds: dict = field(default_factory=dict)
    histories: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "seed": self.seed,
            "metrics": self.metrics,
            "config": self.config,
            "fold_seeds": {str(k): v for k, v in self.fold_seeds.items()},
            "diagnoses": [d.to_dict() for d in self.diagnoses],
        }


def _check_protocol(dataset: EpochSet) -> None:
    groups = dataset.subject_groups()
    for label, name in ((AMCI, "aMCI"), (HC, "HC")):
        if sum(g == label for g in groups.values()) < 2:
            raise DataError(f"leave-one-subject-out needs at least two {name} subjects")


def _atomic_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _fold_csv(diag: SubjectDiagnosis, probs: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["subject_id", "sample", "true_label", "pred", "p_amci"])
    for i, (pred, p) in enumerate(zip(diag.predictions, probs[:, AMCI])):
        w.writerow([diag.subject_id, i, diag.true_label, int(pred), repr(float(p))])
    return buf.getvalue()


@dataclass
class _FoldJob:
    subject: int
    seed: int


# shared with forked workers
_CTX: dict = {}


def _run_fold(job: _FoldJob):
    ctx = _CTX
    dataset: EpochSet = ctx["dataset"]
    fcfg: FeatureConfig = ctx["feature_config"]
    tcfg: TrainConfig = replace(ctx["train_config"], seed=job.seed)
    grid = ctx["grid"]
    source, target = split_domains(dataset, job.subject, ctx["shift"], seed=ctx["master_seed"])
    moments: Optional[BandMoments] = ctx["moments"]
    if moments is not None:
        train_part = moments.select(moments.subject != job.subject)
    else:
        train_part = source
    test_part = compute_band_moments(target, grid, fcfg)
    if job.subject in set(np.unique(train_part.subject).tolist()):
        raise LeakageError(f"subject {job.subject} leaked into its own training split")
    fold = build_fold_features(train_part, test_part, grid, fcfg)
    arch = replace(ctx["arch"], input_shape=fold.train.shape[1:])
    # the target split goes in without class labels
    result = train(fold.train, fold.train_group, fold.train_subject, fold.test, tcfg, arch)
    probs = result.model.predict_proba(fold.test)
    preds = probs.argmax(axis=1)
    true_label = int(target.group[0])
    diag = diagnose(job.subject, preds, true_label)
    out_dir = ctx["out_dir"]
    if out_dir is not None:
        folds = Path(out_dir) / "folds"
        _atomic_text(folds / f"fold_{job.subject:03d}.csv", _fold_csv(diag, probs))
        write_training_log(result.history, folds / f"fold_{job.subject:03d}_log.csv")
    logger.info("fold subject=%d verdict=%s P=%.3f", job.subject, diag.verdict, diag.confidence)
    return diag, result.history


def loso_cross_validate(
    dataset: EpochSet,
    feature_config: Optional[FeatureConfig] = None,
    train_config: Optional[TrainConfig] = None,
    arch: Optional[ArchConfig] = None,
    *,
    master_seed: int = 0,
    domain_shift: Optional[DomainShift] = None,
    moments: Optional[BandMoments] = None,
    jobs: int = 1,
    out_dir=None,
    subjects: Optional[Sequence[int]] = None,
    variant: Optional[str] = None,
) -> ExperimentResult:
    """One fold per subject; the held-out subject is the target domain.

    ``moments`` may hold the band statistics of the whole (unshifted)
    dataset; each fold then selects its training subjects from it.
    ``subjects`` restricts the run to a subset of folds.
    """
    feature_config = feature_config or FeatureConfig()
    train_config = train_config or TrainConfig()
    if variant is not None:
        gfe, dbda = VARIANTS[variant]
        train_config = replace(train_config, gfe_enabled=gfe, dbda_enabled=dbda)
    else:
        variant = next(k for k, v in VARIANTS.items()
                       if v == (train_config.gfe_enabled, train_config.dbda_enabled))
    _check_protocol(dataset)
    grid = feature_config.grid(dataset.epoch_length)
    if moments is not None and (moments.grid != grid or len(moments) != len(dataset)):
        raise DataError("cached band moments do not match this dataset and grid")
    arch = arch or ArchConfig(input_shape=(feature_config.n_components, grid.n_frequency, grid.n_time))
    fold_subjects = list(subjects) if subjects is not None else dataset.subjects()
    jobs_list = [_FoldJob(s, fold_seed(master_seed, s)) for s in fold_subjects]
    if out_dir is not None:
        (Path(out_dir) / "folds").mkdir(parents=True, exist_ok=True)
    _CTX.clear()
    _CTX.update(dataset=dataset, feature_config=feature_config, train_config=train_config, arch=arch,
                grid=grid, shift=domain_shift, master_seed=master_seed, moments=moments, out_dir=out_dir)
    try:
        if jobs > 1:
            import multiprocessing as mp

            with ProcessPoolExecutor(max_workers=jobs, mp_context=mp.get_context("fork")) as pool:
                outputs = list(pool.map(_run_fold, jobs_list))
        else:
            outputs = [_run_fold(j) for j in jobs_list]
    finally:
        _CTX.clear()
    diagnoses = [d for d, _ in outputs]
    config = {
        "feature": asdict(feature_config),
        "train": train_config.to_dict(),
        "arch": arch.to_dict(),
        "domain_shift": asdict(domain_shift) if domain_shift is not None else None,
        "master_seed": master_seed,
    }
    return ExperimentResult(
        diagnoses=diagnoses,
        metrics=compute_metrics(diagnoses),
        config=config,
        seed=master_seed,
        variant=variant,
        fold_seeds={j.subject: j.seed for j in jobs_list},
        histories={j.subject: h for j, (_, h) in zip(jobs_list, outputs)},
    )


def run_ablation(
    dataset: EpochSet,
    feature_config: Optional[FeatureConfig] = None,
    train_config: Optional[TrainConfig] = None,
    arch: Optional[ArchConfig] = None,
    *,
    master_seeds: Sequence[int] = (0,),
    domain_shift: Optional[DomainShift] = None,
    jobs: int = 1,
    variants: Sequence[str] = tuple(VARIANTS),
    moments: Optional[BandMoments] = None,
) -> list[dict]:
    """Rows in the fixed order BaseNet-1, BaseNet-2, BaseNet-3, GF-DANN.

    Every variant sees the same dataset, band statistics and fold seeds.
    Metrics are averaged over ``master_seeds`` (sd over seeds alongside).
    """
    feature_config = feature_config or FeatureConfig()
    train_config = train_config or TrainConfig()
    if moments is None:
        moments = compute_band_moments(dataset, feature_config.grid(dataset.epoch_length), feature_config)
    order = [v for v in VARIANTS if v in variants]
    rows = []
    for v in order:
        runs = [
            loso_cross_validate(dataset, feature_config, train_config, arch, master_seed=s,
                                domain_shift=domain_shift, moments=moments, jobs=jobs, variant=v)
            for s in master_seeds
        ]
        gfe, dbda = VARIANTS[v]
        row = {"variant": VARIANT_LABELS[v], "key": v, "GFE": gfe, "DBDA": dbda,
               "seeds": list(master_seeds), "fold_seeds": [r.fold_seeds for r in runs]}
        for m in ("acc", "acp", "sen", "spe"):
            vals = [r.metrics[m] for r in runs if r.metrics[m] is not None]
            row[m] = float(np.mean(vals)) if vals else None
            row[m + "_sd"] = float(np.std(vals)) if vals else None
        row["runs"] = [r.metrics for r in runs]
        rows.append(row)
    return rows


# -- projection --------------------------------------------------------------

def pca_project(features: np.ndarray, n_components: int = 2) -> np.ndarray:
    """Scores on the leading principal components (SVD of centred data).

    Each component's sign is fixed so its largest-magnitude loading is
    positive.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise DataError("projection needs at least 3 samples in a 2-D array")
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:n_components]
    for c in comps:
        if c[np.argmax(np.abs(c))] < 0:
            c *= -1.0
    scores = xc @ comps.T
    if scores.shape[1] < n_components:
        scores = np.hstack([scores, np.zeros((len(x), n_components - scores.shape[1]))])
    return scores


def export_feature_projection(model: GfdannModel, x: np.ndarray, path=None,
                              sample_ids: Optional[Sequence] = None) -> list[dict]:
    """Embed ``x`` with both extractors and project the stacked set to 2-D."""
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 3:
        raise DataError("projection needs at least 3 samples")
    ids = list(range(len(x))) if sample_ids is None else list(sample_ids)
    stacked = np.vstack([model.embed(x, 1), model.embed(x, 2)])
    scores = pca_project(stacked)
    rows = []
    for b in (1, 2):
        for i, sid in enumerate(ids):
            s = scores[(b - 1) * len(x) + i]
            rows.append({"sample_id": sid, "branch": b, "pc1": float(s[0]), "pc2": float(s[1])})
    if path is not None:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["sample_id", "branch", "pc1", "pc2"])
        w.writeheader()
        for r in rows:
            w.writerow({**r, "pc1": repr(r["pc1"]), "pc2": repr(r["pc2"])})
        _atomic_text(Path(path), buf.getvalue())
    return rows


# -- writers -----------------------------------------------------------------

METRIC_COLUMNS = ("variant", "GFE", "DBDA", "acc", "acp", "sen", "spe")


def _fmt(v):
    return "" if v is None else (repr(v) if isinstance(v, float) else v)


def write_results(result: ExperimentResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _atomic_text(out / "results.json", json.dumps(result.to_dict(), indent=2, sort_keys=True))
    gfe, dbda = VARIANTS[result.variant]
    row = {"variant": VARIANT_LABELS[result.variant], "GFE": gfe, "DBDA": dbda,
           **{k: result.metrics[k] for k in ("acc", "acp", "sen", "spe")}}
    write_metrics_csv([row], out / "metrics.csv")


def write_metrics_csv(rows: Sequence[dict], path, extra: Sequence[str] = ()) -> None:
    cols = list(METRIC_COLUMNS) + list(extra)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=cols, extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({c: _fmt(r.get(c)) for c in cols})
    _atomic_text(Path(path), buf.getvalue())

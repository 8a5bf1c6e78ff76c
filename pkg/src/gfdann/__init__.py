"""GF-DANN: group-feature domain-adversarial networks for subject-level
EEG diagnosis, with a from-scratch autodiff engine, CSP shallow features,
a synthetic data generator and a leave-one-subject-out harness."""

from .data import AMCI, HC, Epoch, EpochSet, read_dataset, write_dataset
from .evaluation import (
    REFUSE,
    compute_metrics,
    export_feature_projection,
    loso_cross_validate,
    run_ablation,
    vote_subject,
)
from .features import BandGrid, CspFilterBank, FeatureConfig, build_fold_features, fit_csp
from .model import ArchConfig, GfdannModel, load_checkpoint, save_checkpoint
from .synth import DomainShift, GeneratorConfig, generate_dataset, split_domains
from .training import TrainConfig, focal_loss, train

__version__ = "0.1.0"

"""Analytic class-incremental learning over frozen, expanded features."""

__version__ = "0.1.0"

from .classifier import (
    AnalyticState,
    ClassRegistry,
    LabeledFeatures,
    adapt,
    faum_update,
    fit_task0,
    init_empty,
    joint_fit,
    load_state,
    one_hot,
    predict,
    predict_scores,
    save_state,
)
from .data import FeatureStore, SyntheticSpec, TaskManifest, gen_synthetic, load_manifest, split_train_test
from .expansion import ExpansionSpec, Projector, expand, make_projector
from .protocol import AccuracyMatrix, RunReport, acc_metric, bwt_metric, run_anast, run_joint, run_naive

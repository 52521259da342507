"""Honest causal forests with local centering, little-bags inference and
the reporting tools used to communicate heterogeneous effects."""

from .cate import CateBatch, CateEstimate, cate_se_little_bags, estimate_cate, oob_cates, predict_cates
from .centering import CenteredData, local_center
from .data import (
    Dataset,
    FirstDifferenceSpec,
    Schema,
    SplitPair,
    first_differences,
    load_csv,
    split_holdout,
    write_csv,
)
from .errors import *  # noqa: F401,F403
from .forest import (
    Forest,
    ForestParams,
    grow_causal_forest,
    grow_regression_forest,
    kernel_weights,
    predict,
    predict_oob,
    tune_params,
)
from .inference import DrScores, ate_aipw, blp, calibration_test, dr_scores, rate
from .pipeline import FitResult, fit
from .simulate import DgpSpec, generate

__version__ = "0.1.0"

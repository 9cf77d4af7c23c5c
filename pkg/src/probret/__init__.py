"""Dense two-tower retrieval with query-dependent score distributions.

Each query gets a learned temperature ``tau_q``; the retrieval depth is
the upper tail of the implied score distribution rather than a fixed
``k`` or a fixed score.
"""
from .data import ClickLogDataset, DataError, SynthSpec, generate, ingest, write_dataset
from .distributions import (Beta, CdfTable, DomainError, SphericalMarginal, TruncExp,
                            build_cdf_table, cdf, density, infonce_inverse_cdf, inverse_cdf)
from .estimators import CutoffRetriever, TwoTowerEncoder
from .evaluation import EvalReport, cdf_sweep, count_histogram, evaluate
from .pipeline import PipelineConfig, StageError, run_experiment
from .retrieval import (CdfCutoff, ItemIndex, ScoreThreshold, TopK, calibrate_policy_for_avg_k,
                        parse_policy, retrieve)
from .serialization import load_index, load_model, save_index, save_model
from .trainer import TrainConfig, train

__version__ = "0.1.0"

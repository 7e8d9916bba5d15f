"""Weakly-supervised temporal action localization with projector-based
activation calibration, a synthetic confounded benchmark, and a full
mAP evaluation harness."""

from .baseline import (Cas, ClassifierParams, TrainConfig, cas_forward,
                       topk_aggregate, train_classifier, video_cls_loss)
from .dataset import (Dataset, GroundTruthInstance, Split, SyntheticConfig,
                      VideoFeatures, VideoLabel, generate_synthetic,
                      load_dataset, read_features, save_dataset,
                      write_features)
from .deconfound import (CalibrationConfig, PipelineResult, calibrate,
                         run_pipeline)
from .evaluate import (ErrorProfile, EvalResult, average_precision,
                       error_profile, map_eval, tiou)
from .localize import (ActionInstance, LocalizeConfig, extract_instances,
                       nms)
from .tspca import (ConfounderScore, ProjectorBank, TspcaConfig,
                    confounder_score, exact_pca_oracle, init_projectors,
                    orient_projectors, train_tspca, tspca_grads,
                    tspca_losses)

__version__ = "0.1.0"

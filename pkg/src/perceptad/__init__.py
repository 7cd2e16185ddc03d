"""Perceptual-loss autoencoders for image anomaly detection.

Autoencoders trained and scored purely with a relative perceptual L1 loss
over frozen deep features, optionally with progressive growing where the
network resolution and the loss's feature depth grow in lock-step, plus a
weakly-supervised hyperparameter-search harness.
"""

from .features import (CallableExtractor, FeatureStats, FixedRandomExtractor,
                       compute_stats, load_stats, make_fixed_random_extractor,
                       normalize, save_stats, unit_stats)
from .losses import (LossConfig, blended_loss, combined_loss, down, pixel_l1,
                     relative_perceptual_l1, upsample2)
from .model import (Autoencoder, BlendState, ModelConfig, blend_input,
                    load_checkpoint, save_checkpoint)
from .train import (TrainConfig, TrainReport, TrainingDivergedError, alpha_at,
                    level_stage, train, train_flat)
from .evaluation import (EvalReport, ScoredSample, anomaly_score, evaluate,
                         roc_auc, score_batch)
from .data import (Manifest, ManifestError, PreprocessSpec, SyntheticSpec,
                   generate_arrays, generate_synthetic, load_manifest, load_split,
                   preprocess)
from .search import (Candidate, SearchReport, SearchSpace, Trial, TrialRunner,
                     ValidationSpec, build_validation_set, cross_validate,
                     sensitivity_sweep)

__version__ = "0.1.0"

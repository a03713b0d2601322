"""Synthesis and evaluation of longitudinal multimodal EHR cohorts.

The generator predicts each next visit (code sets plus the gap to it) from
the current visit with a conditional denoising diffusion model: visits are
embedded time-aware, a per-visit context vector (history state, predicted
interval, demographics) conditions a 1-D U-Net denoiser, and per-modality
heads decode code probabilities.
"""

from .conditioning import ConditionEncoder
from .data import (Cohort, CohortError, CodeTimeGapTable, CodeVocabulary,
                   PatientRecord, SyntheticCohortConfig, Visit, binarize_visit,
                   compute_code_time_gaps, generate_synthetic_cohort, load_cohort,
                   split_cohort, validate_cohort, write_cohort)
from .diffusion import (NoiseSchedule, ScheduleError, ancestral_sample, build_schedule,
                        forward_chain, forward_noise, invert_forward_noise,
                        posterior_mean_from_eps, posterior_mean_from_x0,
                        predict_next_visit)
from .embedding import (TimeAwareVisitEmbedding, TimeGapEncoder, gumbel_gate,
                        sample_gumbel, sinusoidal_position_encoding)
from .evaluation import (MetricReport, evaluate, gap_rmse, lpl, mpl,
                         presence_disclosure, time_rmse)
from .losses import (CodePredictionHead, FocalParams, LossWeights, focal_loss,
                     interval_loss, reconstruction_loss, total_loss)
from .model import ModelConfig, VisitSequenceModel
from .training import (NumericalError, TrainConfig, TrainResult, generate_cohort,
                       gradient_check, load_checkpoint, save_checkpoint, train)
from .unet import ConditionalUNet1d, ConditionAttention, ResBlock1d

__version__ = "0.1.0"

"""Self-supervised skeleton action representations in two stages.

Stage 1 trains a transformer encoder/decoder to reconstruct the motion of
masked spatio-temporal tokens; stage 2 swaps the decoder for a projector and
predictor and tunes the upper encoder layers with a nearest-neighbour
contrastive loss.
"""

from .data import (
    DataConfig, DatasetManifest, PreprocessConfig, SegmentedSequence, SkeletonSequence,
    augment, generate_synthetic, load_sequence, segment, trim_and_resize, unsegment, write_sequence,
)
from .evaluation import FeatureSet, extract_features, few_shot_eval, knn_eval, linear_probe
from .masking import extract_motion, mask_probabilities, motion_intensity, sample_mask
from .model import ModelConfig, StarsModel, load_checkpoint, save_checkpoint
from .pretrain import Stage1Config, build_stage1_batch, mamp_loss, run_stage1
from .tune import (
    Stage2Config, SupportQueue, TuneSchedule, build_tune_schedule, nearest_neighbor, nnclr_loss, run_stage2,
)

__version__ = "0.1.0"

"""Membership inference against black-box reasoning models via their reasoning traces."""

from .anchors import RecallInferenceAxis, build_anchor, build_axis, next_token_entropy, select_top_gamma
from .attack import BLACKSPECTRUM, MembershipScore, decide, membership_score, project_onto_axis
from .dataset import Dataset, QuerySequence, load_dataset, save_dataset, segment_text, validate_dataset
from .embedding import Encoder, EncoderHandle, denoise, encode_denoised
from .evaluation import LabeledScores, auc, balanced_accuracy, compute_metrics, tpr_at_fpr
from .providers import PromptTemplate, Provider, ProviderConfig, ReasoningTrace, render_prompt

__version__ = "0.1.0"

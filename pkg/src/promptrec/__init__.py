"""Zero-shot referring expression comprehension with visual prompts and joint prediction."""

from .config import PipelineConfig, load_config
from .data import BoundingBox, Dataset, Entry, ImageRecord, filter_proposals, iou, load_dataset
from .joint import Assignment, EntryScoreVector, aggregate_entry, assign_image, hungarian_max
from .masks import BinaryMask, BoxFillBackend, MaskBackend, MaskCache, segment
from .pipeline import Prediction, RunReport, ablate, evaluate_accuracy, run_pipeline
from .prompts import PromptKind, Renderer, RenderParams, render
from .scoring import MockBackend, ScorerBackend, ScoreTensor, ensemble, score_entry, softmax_normalize
from .text import RedundancyRules, apply_template, reduce

__version__ = "0.1.0"

"""Retrieval-augmented multimodal diagnosis.

Retrieve disease knowledge, refine it into guidelines, align image and text
features to those guidelines, and classify with guideline-queried decoders.
"""

from .corpus import Corpus, DenseRetriever, Document, HashingEmbedder, ingest_corpus
from .dataset import DatasetManifest, Sample, make_synthetic, quantize_ehr, textualize_ehr
from .estimator import RADClassifier, TrainingDiverged
from .gecl import GeclConfig, gecl_loss
from .metrics import EvalReport, evaluate
from .refinement import ConfigurationError, DiseaseGuideline, GuidelineStore, refine, verify
from .trainer import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError", "Corpus", "DatasetManifest", "DenseRetriever", "DiseaseGuideline", "Document",
    "EvalReport", "GeclConfig", "GuidelineStore", "HashingEmbedder", "RADClassifier", "Sample",
    "TrainConfig", "TrainingDiverged", "evaluate", "gecl_loss", "ingest_corpus", "make_synthetic",
    "quantize_ehr", "refine", "textualize_ehr", "train", "verify",
]

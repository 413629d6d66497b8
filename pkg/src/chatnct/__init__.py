"""Context-aware chat translation with coherence and speaker auxiliary tasks.

Subpackages are imported on demand; the names below are the usual entry points.
"""

from .corpus import Dialogue, Speaker, Utterance, Vocabulary, build_vocabulary
from .evalkit import corpus_bleu, corpus_ter, ter
from .inference import BeamConfig, beam_search, translate_corpus, translate_dialogue
from .kernels import BACKEND as KERNEL_BACKEND
from .model import ChatTranslator, ModelConfig
from .objectives import Schedule, compute_losses, joint
from .trainer import TrainConfig, finetune, pretrain

__version__ = "0.1.0"

__all__ = [
    "BeamConfig", "ChatTranslator", "Dialogue", "KERNEL_BACKEND", "ModelConfig", "Schedule", "Speaker",
    "TrainConfig", "Utterance", "Vocabulary", "beam_search", "build_vocabulary", "compute_losses", "corpus_bleu",
    "corpus_ter", "finetune", "joint", "pretrain", "ter", "translate_corpus", "translate_dialogue",
]

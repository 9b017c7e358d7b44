"""Video-grounded dialogue and video QA with bidirectional reasoning.

The package is layered bottom-up: a small reverse-mode tensor substrate
(`tensor`), text/video encoders, directed spatio-temporal reasoning, a
cross-attending decoder with a copy mechanism, and two task heads (free-form
response generation, multiple-choice / count / frame QA) plus the data,
metric, and training tooling needed to run everything end to end on a desk.
"""

from . import tensor
from .config import TrainConfig, apply_overrides, load_config, parse_config_text
from .data import (
    DialogueRecord,
    DialogueTurn,
    QAExample,
    SynthConfig,
    load_features,
    read_dialogues,
    read_feature_file,
    read_qa_examples,
    save_dataset,
    synthesize_dialogues,
    synthesize_qa,
    write_dialogues,
    write_feature_file,
    write_qa_examples,
)
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    DimensionError,
    FormatError,
    NumericError,
    TrainingDiverged,
    VidialError,
    VocabularyError,
)
from .metrics import bleu_n, cider, corpus_report, rouge_l
from .model import ModelInputs, ResponseModel, dialogue_items
from .qa import AnswerVocabulary, QAModel, evaluate_choice, evaluate_count, evaluate_frame
from .training import (
    Checkpoint,
    Trainer,
    load_checkpoint,
    model_from_checkpoint,
    save_checkpoint,
)
from .vocab import Vocabulary, build_vocab, tokenize

__version__ = "0.1.0"

__all__ = [
    "AnswerVocabulary",
    "Checkpoint",
    "ConfigError",
    "ContractError",
    "DataError",
    "DialogueRecord",
    "DialogueTurn",
    "DimensionError",
    "FormatError",
    "ModelInputs",
    "NumericError",
    "QAExample",
    "QAModel",
    "ResponseModel",
    "SynthConfig",
    "Trainer",
    "TrainConfig",
    "TrainingDiverged",
    "VidialError",
    "Vocabulary",
    "VocabularyError",
    "apply_overrides",
    "bleu_n",
    "build_vocab",
    "cider",
    "corpus_report",
    "dialogue_items",
    "evaluate_choice",
    "evaluate_count",
    "evaluate_frame",
    "load_checkpoint",
    "load_config",
    "load_features",
    "model_from_checkpoint",
    "parse_config_text",
    "read_dialogues",
    "read_feature_file",
    "read_qa_examples",
    "rouge_l",
    "save_checkpoint",
    "save_dataset",
    "synthesize_dialogues",
    "synthesize_qa",
    "tensor",
    "tokenize",
    "write_dialogues",
    "write_feature_file",
    "write_qa_examples",
    "__version__",
]

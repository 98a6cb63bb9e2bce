"""Hierarchical visual-connotation QA toolkit.

Builds three-level benchmark chains top-down with judge validation,
searches bottom-up QA trees for instruction-tuning data, and evaluates
multimodal chat backends level by level.
"""

from .config import BenchConfig, ClientConfig, GenerationConfig, MctsConfig, load_config
from .core import (
    ASPECTS,
    TASKS,
    BenchmarkItem,
    ImageRef,
    Level,
    OptionEntry,
    QAPair,
    ValidationVerdict,
    validate_benchmark_item,
)

__version__ = "0.1.0"

__all__ = [
    "ASPECTS",
    "TASKS",
    "BenchConfig",
    "BenchmarkItem",
    "ClientConfig",
    "GenerationConfig",
    "ImageRef",
    "Level",
    "MctsConfig",
    "OptionEntry",
    "QAPair",
    "ValidationVerdict",
    "load_config",
    "validate_benchmark_item",
    "__version__",
]

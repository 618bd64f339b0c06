"""lenctl: a desk-scale laboratory for length-controllable sequence generation.

Compares progress-ratio embeddings (PRE), reverse positional embeddings
(RPE), length-aware attention boosting (LAAM), and an uncontrolled baseline
on synthetic sequence-to-sequence tasks, with deterministic training and a
CSV-first evaluation suite.
"""

from .corpus import CorpusSpec, LengthDistribution, Task, TrainingExample
from .evaluation import GenerationRecord, LengthPolicy
from .model import DecoderStepContext, LengthControlMode, ModelConfig
from .signals import SignalConfig
from .training import AdamWConfig, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AdamWConfig",
    "CorpusSpec",
    "DecoderStepContext",
    "GenerationRecord",
    "LengthControlMode",
    "LengthDistribution",
    "LengthPolicy",
    "ModelConfig",
    "SignalConfig",
    "Task",
    "TrainConfig",
    "TrainingExample",
    "__version__",
]

from .structures import *
from .errors import *
from .domain import AgentRole, GenerationStrategy, RetrievalMode, Severity
from .config import RunConfig, AblationFlags, load_config
from .logging_ import set_log_level
from .worker_pool import SupportsProgress
from .trainer import (
    LearningSystem,
    run_training,
    run_ablation_suite,
    evaluate,
    replay,
    export_metrics,
    checkpoint,
    restore,
)
from .__main__ import main

__version__ = "0.1.0"

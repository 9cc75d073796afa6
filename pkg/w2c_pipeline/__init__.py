"""W2C pipeline - visual concept annotation with self-consistency filtering."""

__version__ = "0.1.0"

from .codegen import emit_code, parse_code
from .models import PipelineConfig, RunStats, W2CRecord
from .orchestrator import resume, run_pipeline

__all__ = [
    "PipelineConfig",
    "RunStats",
    "W2CRecord",
    "emit_code",
    "parse_code",
    "resume",
    "run_pipeline",
]

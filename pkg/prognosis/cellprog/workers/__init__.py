"""
Pipeline stage workers.
Each worker runs a group of CLI stages and records their status in the run state.
"""
from .analysis_worker import AnalysisWorker
from .cycler_worker import CyclerWorker
from .training_worker import TrainingWorker

__all__ = ["AnalysisWorker", "CyclerWorker", "TrainingWorker"]

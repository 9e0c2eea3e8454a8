"""
Configuration module for the battery prognosis toolkit.
Contains system-wide settings and parameters.
"""
import os
from typing import List, Tuple

from dotenv import load_dotenv

from . import __version__

load_dotenv()

# Base directories
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
OUTPUT_DIR = os.environ.get('CELLPROG_OUTPUT_DIR', os.path.join(os.getcwd(), 'runs'))

# Run artifacts
STATE_FILE = "state.json"
MANIFEST_FILE = "manifest_{command}.json"
ERROR_FILE = "error.json"
TOOLKIT_VERSION = __version__

# Logging configuration
LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO').upper()
LOG_FORMAT = os.environ.get(
    'LOG_FORMAT',
    '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
LOG_JSON = os.environ.get('LOG_JSON', 'False').lower() in ('true', '1', 't')

# Reproducibility
DEFAULT_SEED = int(os.environ.get('CELLPROG_SEED', 42))

# Cycler data
PROTECTION_WINDOW_V: Tuple[float, float] = (2.5, 4.3)
CSV_COLUMNS: List[str] = [
    'cell_id', 'cycle', 'step', 'time', 'current_a', 'voltage_v', 'capacity_ah'
]
STEP_LABELS: List[str] = ['CHG', 'DCH', 'REST']

# Curve analysis
RESAMPLE_POINTS = int(os.environ.get('RESAMPLE_POINTS', 100))
SMOOTHING_WINDOW = int(os.environ.get('SMOOTHING_WINDOW', 11))
SMOOTHING_POLY_ORDER = int(os.environ.get('SMOOTHING_POLY_ORDER', 3))
PROMINENCE_FRACTION = float(os.environ.get('PROMINENCE_FRACTION', 0.30))
PEAK_MATCH_GATE_V = float(os.environ.get('PEAK_MATCH_GATE_V', 0.15))

# Synthetic cycler
SYNTH_SAMPLE_HZ = float(os.environ.get('SYNTH_SAMPLE_HZ', 10.0))
SYNTH_DECIMATION = int(os.environ.get('SYNTH_DECIMATION', 100))  # 10 Hz / 100 -> one row per 10 s
SYNTH_NOISE_V = float(os.environ.get('SYNTH_NOISE_V', 0.002))
SYNTH_NOISE_A = float(os.environ.get('SYNTH_NOISE_A', 0.005))
REST_PERIOD_S = 600.0
INTER_CYCLE_REST_S = 1200.0
DISCHARGE_CUTOFF_V = 3.0
DEFAULT_PROTOCOL: List[Tuple[float, float]] = [
    (0.2, 0.5), (0.5, 0.9), (1.0, 1.3), (1.5, 1.6)
]

# Training
TRAIN_MAX_WORKERS = int(os.environ.get('TRAIN_MAX_WORKERS', 4))
TRAIN_ROW_STRIDE = int(os.environ.get('TRAIN_ROW_STRIDE', 1))
TRAIN_EVAL_MODES: List[str] = ['teacher_forced', 'autoregressive']
GRID_BATCH_SIZES: List[int] = [32, 64]
GRID_EPOCHS: List[int] = [100, 200, 300, 400]
GRID_LEARNING_RATES: List[float] = [0.001, 0.0001, 0.00001]

# Checkpoints
CHECKPOINT_FORMAT_VERSION = int(os.environ.get('CHECKPOINT_FORMAT_VERSION', 1))

# Output tree (relative to the run's output directory)
DATA_SUBDIR = "data"
MODELS_SUBDIR = "models"
REPORTS_SUBDIR = "reports"
PLOTS_SUBDIR = "plots"
DCA_SUBDIR = "dca"
PEAKS_SUBDIR = "peaks"
REPORT_SUBDIR = "report"

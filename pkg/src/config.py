from pathlib import Path

# Automatically resolve the project root
PROJ_ROOT = Path(__file__).resolve().parent.parent

REFERENCES_DIR = PROJ_ROOT / "references"
DATA_DIR = PROJ_ROOT / "data"

INTERIM_DIR = DATA_DIR / "interim"
PROCESSED_DIR = DATA_DIR / "processed"
RAW_DIR = DATA_DIR / "raw"


# Reference data
DEFAULT_CONFIG_PATH = REFERENCES_DIR / "pipeline_config.yaml"
SYNTHETIC_CLASSES_PATH = REFERENCES_DIR / "synthetic_classes.yaml"

# Environment variable pointing at a user config file
CONFIG_ENV_VAR = "GRAPHTRACK_CONFIG"

# Checkpoint path
TRAINING_CHECKPOINT_PATH = INTERIM_DIR / "training_checkpoint.weights"


# File format versions
SCENE_FORMAT_VERSION = 1
TRACKS_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1
WEIGHTS_FORMAT_VERSION = 1
WEIGHTS_MAGIC = b"G3DW"


# Sensor modalities carried as precomputed embeddings
MODALITY_TAGS = ("camera", "lidar", "radar")

DEFAULT_MODALITY_DIMS = {
    "camera": 64,
    "lidar": 128,
    "radar": 64,
}

# Number of entries in the pose-and-motion node vector besides the class one-hot
NODE_FEATURE_BASE_DIM = 11
EDGE_FEATURE_DIM = 5

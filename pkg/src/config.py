"""
XAIGuard Configuration
Process settings and numeric defaults for training, attacks and defense
"""
import os
from dotenv import load_dotenv

load_dotenv()

# Paths
DATA_DIR = os.getenv("XAIGUARD_DATA_DIR", "./data")
OUTPUT_DIR = os.getenv("XAIGUARD_OUTPUT_DIR", "./runs")

# Logging
LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

# Grid sweeps
WORKERS = int(os.getenv("XAIGUARD_WORKERS", "1"))

# Normalization
BN_EPSILON = 1e-5          # shared by BN and CFN
BN_MOMENTUM = 0.9          # running <- m * running + (1 - m) * batch

# Clean training
CLEAN_LR = 0.05            # cosine-decayed
SGD_MOMENTUM = 0.9
CLEAN_EPOCHS = 20
CLEAN_BATCH_SIZE = 64

# Attacks
DEFAULT_LAMBDA = 0.5
POISON_FRACTION = 0.5      # triggered share of every fine-tuning batch
ATTACK_LR = 1e-4           # Adam
ATTACK_EPOCHS = 10
ATTACK_BATCH_SIZE = 32
ACCURACY_FLOOR = 0.5       # clean accuracy below floor * baseline is flagged in the attack log

# Trigger / target explanation defaults
TRIGGER_SIDE = 4
TRIGGER_VALUE = 1.0
TARGET_BOX_FRACTION = 0.25  # box side as a fraction of map side

# DSSIM
SSIM_WINDOW = 7
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# Defense
EVAL_BATCH_SIZE = 16
ABLATION_BATCH_SIZES = [1, 2, 5, 16]

# Forensics
ACCURACY_DROP_THRESHOLD = 0.5  # scenario flagged when clean acc < threshold * baseline
NORMAL_APPROX_N = 1000          # Spearman p-value switches to the normal approximation above this n
PERMUTATION_ROUNDS = 2000
SRC_P_THRESHOLD = 1e-6          # p-value summaries report the fraction of samples below this

# Softplus baseline
SOFTPLUS_BETA_BASELINE = 5.0

# Snapshot format
SNAPSHOT_MAGIC = b"XGW1"
SNAPSHOT_VERSION = 1

# Exit codes
EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

# Layer kind tags in weight snapshots
KIND_TAGS = {
    'conv': 1,
    'linear': 2,
    'bn_gamma': 3,
    'bn_beta': 4,
    'bn_running_mean': 5,
    'bn_running_var': 6,
    'bias': 7,
}


def get_kind_name(tag: int) -> str:
    """Reverse lookup for a snapshot kind tag"""
    for name, value in KIND_TAGS.items():
        if value == tag:
            return name
    raise KeyError(tag)

"""
Configuration settings and environment variables
"""
import os
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Parallel evaluation
WORKERS = int(os.getenv("LOGIT_MCMC_WORKERS", "1"))
BLOCK_ROWS = int(os.getenv("LOGIT_MCMC_BLOCK_ROWS", "4096"))

# Logging
LOG_LEVEL = os.getenv("LOGIT_MCMC_LOG_LEVEL", "INFO")

# Prior and proposal defaults
PRIOR_VARIANCE = float(os.getenv("LOGIT_MCMC_PRIOR_VARIANCE", "1000.0"))
TARGET_ACCEPTANCE = float(os.getenv("LOGIT_MCMC_TARGET_ACCEPTANCE", "0.234"))
ADAPT_INTERVAL = int(os.getenv("LOGIT_MCMC_ADAPT_INTERVAL", "100"))
PROPOSAL_SCALE = float(os.getenv("LOGIT_MCMC_PROPOSAL_SCALE", "0.01"))

# Consensus weighting
RIDGE_EPSILON = float(os.getenv("LOGIT_MCMC_RIDGE_EPSILON", "1e-8"))
CONDITION_LIMIT = float(os.getenv("LOGIT_MCMC_CONDITION_LIMIT", "1e12"))

# Diagnostics
MIN_ESS_DRAWS = 100
DENSITY_BINS = int(os.getenv("LOGIT_MCMC_DENSITY_BINS", "50"))
BENCH_MIN_SECONDS = float(os.getenv("LOGIT_MCMC_BENCH_MIN_SECONDS", "0.01"))

# Text formats
FLOAT_FORMAT = "%.17g"
MANIFEST_VERSION = 1
SCHEMA_VERSION = 1
META_VERSION = 1

# Chain presets: iterations, burn-in, thinning and an optional metadata note
CHAIN_PRESETS = {
    "bank": {
        "iterations": 500_000,
        "burnin": 1_000,
        "thinning": 20,
        "note": None,
    },
    "large": {
        "iterations": 500_000,
        "burnin": 50_000,
        "thinning": 20,
        "note": "thinning for large runs is unreported; bank-preset thinning of 20 used",
    },
}
DEFAULT_PRESET = "bank"

"""
Centralized configuration for the RFID voting pipeline.
Simulated timing, batch sizing, storage behaviour, and logging setup.
"""

import os
import logging
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# ---------------------------------------------------------
# TERMINAL TIMING (simulated milliseconds)
# ---------------------------------------------------------
# Per-phase durations of one voting cycle. The defaults sum to 11,500 ms,
# the average cycle time measured on the hardware prototype.
DEFAULT_STEP_DURATIONS = {
    "card_read_ms": 1100,
    "auth_ms": 150,
    "selection_ms": 6400,
    "confirmation_ms": 3650,
    "encryption_ms": 90,
    "append_ms": 110,
}

SESSION_TIMEOUT_MS = int(os.environ.get("VOTING_SESSION_TIMEOUT_MS", "60000"))
DISPLAY_DWELL_MS = int(os.environ.get("VOTING_DISPLAY_DWELL_MS", "2000"))
DISPLAY_LATENCY_BUDGET_MS = 300

# Manual voting procedure reported for comparison (seconds per voter)
MANUAL_CYCLE_RANGE_S = (25, 40)

# ---------------------------------------------------------
# SYNCHRONIZATION
# ---------------------------------------------------------
BATCH_SIZE = int(os.environ.get("VOTING_BATCH_SIZE", "20"))
# Transmission time of one full batch; short batches are charged pro rata
BATCH_TRANSMIT_MS = int(os.environ.get("VOTING_BATCH_TRANSMIT_MS", "4800"))
SYNC_INTERVAL_MS = int(os.environ.get("VOTING_SYNC_INTERVAL_MS", "30000"))
MAX_UPLOAD_RETRIES = int(os.environ.get("VOTING_MAX_UPLOAD_RETRIES", "3"))
# Upper bound on sync graph steps in one cycle
SYNC_RECURSION_LIMIT = 10_000

# ---------------------------------------------------------
# STORAGE
# ---------------------------------------------------------
LOG_FSYNC = os.environ.get("VOTING_LOG_FSYNC", "1") not in ("0", "false", "False")

# ---------------------------------------------------------
# SIMULATION
# ---------------------------------------------------------
DEFAULT_SEED = int(os.environ.get("VOTING_SEED", "0"))
# Catch-up sync after polls close gives up after this much simulated time
MAX_CATCHUP_MS = 7 * 24 * 3600 * 1000

# ---------------------------------------------------------
# LOGGING SETUP
# ---------------------------------------------------------
LOG_FORMAT = "%(asctime)s | %(name)-28s | %(levelname)-7s | %(message)s"
LOG_DATE_FORMAT = "%H:%M:%S"
LOG_LEVEL = getattr(logging, os.environ.get("VOTING_LOG_LEVEL", "INFO").upper(), logging.INFO)


def get_logger(name: str, level: int = LOG_LEVEL) -> logging.Logger:
    """
    Returns a named logger with consistent formatting.
    Usage:  logger = get_logger("voting.terminal")
    """
    logger = logging.getLogger(name)

    # Avoid adding duplicate handlers if called multiple times
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=LOG_DATE_FORMAT))
        logger.addHandler(handler)

    logger.setLevel(level)
    return logger

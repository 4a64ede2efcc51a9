# unips_system/config/settings.py

import logging
import os

from dotenv import load_dotenv

logger = logging.getLogger(__name__)

# Values in a local .env file fill in variables the shell did not set.
load_dotenv()

DEFAULT_DATABASE_URL = "sqlite:///./unips_runs.db"


def get_threads() -> int:
    """Worker-pool cap from UNIPS_THREADS (default 1)."""
    raw = os.getenv("UNIPS_THREADS", "1")
    try:
        threads = int(raw)
    except ValueError:
        logger.warning(f"UNIPS_THREADS={raw!r} is not an integer, using 1 worker")
        return 1
    return max(1, threads)


def get_database_url() -> str:
    url = os.getenv("UNIPS_DATABASE_URL")
    if not url:
        logger.debug(f"UNIPS_DATABASE_URL not defined, using SQLite database at {DEFAULT_DATABASE_URL}")
        return DEFAULT_DATABASE_URL
    return url


def get_runs_dir() -> str:
    """Root for run directories when a command gets no --out (UNIPS_RUNS_DIR, default ./runs)."""
    return os.getenv("UNIPS_RUNS_DIR") or "runs"

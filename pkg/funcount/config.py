# funcount/config.py

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from dotenv import load_dotenv
from pydantic import BaseModel, Field

T = TypeVar("T")
R = TypeVar("R")


# ---------- Settings model ----------

def cpu_threads() -> int:
    return os.cpu_count() or 1


class Settings(BaseModel):
    threads: int = Field(
        default_factory=cpu_threads,
        ge=1,
        description="Cap on per-subject parallelism (FUNCOUNT_THREADS, default CPU count).",
    )
    log_level: str = Field(default="INFO", description="Root log level (FUNCOUNT_LOG_LEVEL).")
    n_basis: int = Field(default=30, ge=1, description="Default number of B-spline basis functions (FUNCOUNT_N_BASIS).")
    k: int = Field(default=6, ge=1, description="Default number of components (FUNCOUNT_K).")


def load_settings() -> Settings:
    """
    Load settings from the environment, reading a local .env file first.
    Unset variables fall back to the model defaults (threads = CPU count).
    """
    load_dotenv()

    values = {}
    threads = os.getenv("FUNCOUNT_THREADS")
    if threads:
        values["threads"] = int(threads)
    if os.getenv("FUNCOUNT_LOG_LEVEL"):
        values["log_level"] = os.getenv("FUNCOUNT_LOG_LEVEL").upper()
    if os.getenv("FUNCOUNT_N_BASIS"):
        values["n_basis"] = int(os.getenv("FUNCOUNT_N_BASIS"))
    if os.getenv("FUNCOUNT_K"):
        values["k"] = int(os.getenv("FUNCOUNT_K"))

    return Settings.model_validate(values)


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


# ---------- Ordered parallel map ----------

def resolve_threads(threads: Optional[int] = None) -> int:
    """An explicit thread count, else FUNCOUNT_THREADS, else the CPU count."""
    if threads is not None:
        return max(1, int(threads))
    env_threads = os.getenv("FUNCOUNT_THREADS")
    return max(1, int(env_threads)) if env_threads else cpu_threads()


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: Optional[int] = None) -> List[R]:
    """
    Apply fn to every item, preserving input order in the result.
    Runs serially when threads is 1; otherwise on a thread pool capped by
    `threads` (FUNCOUNT_THREADS or the CPU count when threads is None).
    """
    items = list(items)
    threads = resolve_threads(threads)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Iterator, Optional, Tuple

DATA_ROOT_ENV = "FEDREC_DATA_ROOT"
DEBUG_ENV = "FEDREC_DEBUG"

# Reruns of one config share a run directory; earlier attempts go here.
PREVIOUS_RUNS_DIR = "previous"
PREVIOUS_RUNS_KEEP = 5

LOGGER_NAME = "fedrec_core"


def debug_enabled() -> bool:
    return os.environ.get(DEBUG_ENV, "").strip().lower() in ("1", "true", "yes")


def setup_logging(level: Optional[int] = None) -> logging.Logger:
    """Route ``fedrec_core.*`` loggers through a rich handler (idempotent)."""
    from rich.logging import RichHandler

    from .display import console

    if level is None:
        level = logging.DEBUG if debug_enabled() else logging.INFO
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(level)
    if not any(isinstance(h, RichHandler) for h in logger.handlers):
        handler = RichHandler(console=console, show_path=False, rich_tracebacks=False)
        handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(handler)
    logger.propagate = False
    return logger


def get_data_root() -> Optional[Path]:
    """Dataset root from ``FEDREC_DATA_ROOT``; ``None`` when unset."""
    raw = os.environ.get(DATA_ROOT_ENV, "").strip()
    if not raw:
        return None
    return Path(raw).expanduser()


def resolve_data_path(raw: str | Path) -> Path:
    """Relative dataset paths are resolved against ``FEDREC_DATA_ROOT`` when it is set."""
    p = Path(raw).expanduser()
    if p.is_absolute():
        return p
    root = get_data_root()
    return (root / p) if root is not None else p


def atomic_write_text(path: Path, content: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.NamedTemporaryFile(
        mode="w",
        encoding="utf-8",
        delete=False,
        dir=str(path.parent),
        prefix=f".{path.name}.",
        suffix=".tmp",
        newline="\n",
    ) as tf:
        tf.write(content)
        tf.flush()
        os.fsync(tf.fileno())
        tmp_path = Path(tf.name)
    os.replace(tmp_path, path)


def _attempts(path: Path) -> Iterator[Tuple[int, Path]]:
    archive = path.parent / PREVIOUS_RUNS_DIR
    if not archive.is_dir():
        return
    head = f"{path.stem}."
    for p in archive.glob(f"{path.stem}.*{path.suffix}"):
        middle = p.name[len(head): len(p.name) - len(path.suffix)]
        if middle.isdigit():
            yield int(middle), p


def archive_previous(path: Path, keep: int = PREVIOUS_RUNS_KEEP) -> Optional[Path]:
    """Move an earlier attempt's artifact to ``<run_dir>/previous/<stem>.<n><suffix>``.

    Attempts are numbered upwards from 1 per artifact; only the newest ``keep`` survive.
    """
    if keep <= 0 or not path.is_file():
        return None
    attempts = sorted(_attempts(path))
    n = attempts[-1][0] + 1 if attempts else 1
    target = path.parent / PREVIOUS_RUNS_DIR / f"{path.stem}.{n}{path.suffix}"
    target.parent.mkdir(exist_ok=True)
    os.replace(path, target)
    for _, stale in attempts[: max(0, len(attempts) + 1 - keep)]:
        stale.unlink(missing_ok=True)
    return target


def write_run_json(path: Path, data: Any, *, keep_previous: int = PREVIOUS_RUNS_KEEP) -> Optional[Path]:
    """Atomic JSON write of a run artifact; returns where the replaced attempt was archived."""
    archived = archive_previous(path, keep=keep_previous)
    atomic_write_text(path, json.dumps(data, indent=2) + "\n")
    return archived


def sha256_files(paths: Iterable[Path]) -> str:
    """Content hash over several files (in the given order); missing files hash as empty."""
    h = hashlib.sha256()
    for p in paths:
        h.update(str(Path(p).name).encode("utf-8"))
        if Path(p).is_file():
            with open(p, "rb") as fh:
                for chunk in iter(lambda: fh.read(1 << 20), b""):
                    h.update(chunk)
    return h.hexdigest()


__all__ = [
    "DATA_ROOT_ENV",
    "DEBUG_ENV",
    "LOGGER_NAME",
    "PREVIOUS_RUNS_DIR",
    "PREVIOUS_RUNS_KEEP",
    "archive_previous",
    "atomic_write_text",
    "debug_enabled",
    "get_data_root",
    "resolve_data_path",
    "setup_logging",
    "sha256_files",
    "write_run_json",
]

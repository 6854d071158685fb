"""
Result containers and the writer that turns them into CSV/JSON files plus a
manifest with content hashes.
"""
import csv
import errno
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence

from tenacity import retry, retry_if_exception, stop_after_attempt, wait_exponential

from dynamics.helper import format_float

logger = logging.getLogger(__name__)

METADATA_FILE = "metadata.json"
MANIFEST_FILE = "manifest.json"
# Files whose bytes depend on the wall clock.
NON_DETERMINISTIC = {METADATA_FILE}

_TRANSIENT_ERRNOS = {errno.EAGAIN, errno.EBUSY, errno.EINTR, errno.ETIMEDOUT}


@dataclass
class Table:
    header: Sequence[str]
    rows: List[Sequence[Any]] = field(default_factory=list)


@dataclass
class ExperimentResult:
    experiment: str
    tables: Dict[str, Table] = field(default_factory=dict)
    jsonl: Dict[str, List[str]] = field(default_factory=dict)
    metadata: Dict[str, Any] = field(default_factory=dict)


def _retryable(exc: Exception) -> bool:
    """Retry only I/O errors that can clear up on their own (busy, interrupted)."""
    return isinstance(exc, OSError) and exc.errno in _TRANSIENT_ERRNOS


def _cell(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, str):
        return value
    try:
        return format_float(value)
    except (TypeError, ValueError):
        return str(value)


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=1, max=10),
    retry=retry_if_exception(_retryable),
    reraise=True,
)
def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=1, max=10),
    retry=retry_if_exception(_retryable),
    reraise=True,
)
def write_csv(path: str, table: Table) -> None:
    """Header row, 17-significant-digit floats, LF line endings."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(table.header)
        for row in table.rows:
            if len(row) != len(table.header):
                raise ValueError(f"{os.path.basename(path)}: row has {len(row)} cells, header {len(table.header)}")
            writer.writerow([_cell(v) for v in row])


def write_outputs(result: ExperimentResult, out_dir: str) -> List[Dict[str, Any]]:
    """
    Write every table, JSON-lines file and metadata.json into `out_dir`,
    then manifest.json listing each file once with its sha256 and size.
    Non-deterministic files are listed without a hash so the manifest
    itself is reproducible.
    Returns the manifest entries.
    """
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for name, table in result.tables.items():
        write_csv(os.path.join(out_dir, name), table)
        names.append(name)
    for name, lines in result.jsonl.items():
        _write_text(os.path.join(out_dir, name), "".join(line + "\n" for line in lines))
        names.append(name)
    _write_text(
        os.path.join(out_dir, METADATA_FILE),
        json.dumps(result.metadata, indent=2, sort_keys=True, default=str) + "\n",
    )
    names.append(METADATA_FILE)

    if len(set(names)) != len(names):
        raise ValueError(f"duplicate output file names: {sorted(names)}")

    manifest = []
    for name in sorted(names):
        path = os.path.join(out_dir, name)
        deterministic = name not in NON_DETERMINISTIC
        manifest.append({
            "file": name,
            "sha256": sha256_file(path) if deterministic else None,
            "bytes": os.path.getsize(path) if deterministic else None,
            "deterministic": deterministic,
        })
    _write_text(
        os.path.join(out_dir, MANIFEST_FILE),
        json.dumps({"experiment": result.experiment, "files": manifest}, indent=2, sort_keys=True) + "\n",
    )
    logger.info("wrote %s files to %s", len(manifest) + 1, out_dir)
    return manifest

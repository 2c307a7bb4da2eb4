"""CSV ingestion and atomic file output."""

from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path

import pandas as pd

from .errors import DataError

FLOAT_FORMAT = "%.17g"

INPUT_COLUMNS = {
    "hr": ("participant_id", "date", "minute", "bpm"),
    "steps": ("participant_id", "date", "minute", "steps"),
    "sleep": ("participant_id", "date", "start_min", "end_min", "duration_min", "efficiency"),
    "survey": ("participant_id", "date", "ttfa_bin", "wake_type", "nap_count", "nap_min",
               "shift", "work_hr", "overwork_min", "caffeine", "alc_drug"),
    "participants": ("participant_id", "role"),
    "labels": ("participant_id", "date", "alertness", "happiness", "energy", "health", "stress"),
}


def read_table(path, columns=None, exact: bool = False) -> pd.DataFrame:
    """Read a CSV, checking that the expected columns are present.

    With ``exact`` the header must match ``columns`` in order and length.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    try:
        df = pd.read_csv(path, dtype={"participant_id": str, "date": str},
                         float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"{path}: cannot parse CSV ({exc})") from exc
    if columns is not None:
        if exact:
            got = list(df.columns)
            if len(got) != len(columns):
                extra = [c for c in got if c not in columns]
                missing = [c for c in columns if c not in got]
                detail = (f"unexpected column {extra[0]!r}" if extra
                          else f"missing column {missing[0]!r}")
                raise DataError(f"{path}: expected {len(columns)} columns, got {len(got)}; {detail}")
            for want, have in zip(columns, got):
                if want != have:
                    raise DataError(f"{path}: column {have!r} found where {want!r} expected")
        else:
            for col in columns:
                if col not in df.columns:
                    raise DataError(f"{path}: missing column {col!r}")
    return df


def read_input(directory, name: str) -> pd.DataFrame:
    return read_table(Path(directory) / f"{name}.csv", INPUT_COLUMNS[name])


def _umask() -> int:
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write_bytes(path, data: bytes) -> None:
    """Write through a temporary file in the same directory, then rename,
    so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        # mkstemp creates owner-only files; give the result the usual mode
        os.chmod(tmp, 0o666 & ~_umask())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_csv(df: pd.DataFrame, path) -> None:
    atomic_write_text(path, df.to_csv(index=False, float_format=FLOAT_FORMAT, lineterminator="\n"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()

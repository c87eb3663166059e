"""Dataset ingestion and export, INI configuration, run manifests and atomic file writes."""

from __future__ import annotations

import configparser
import csv
import hashlib
import io
import json
import math
import os
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataValidationError
from .model import SurvivalDataset

OUT_DIR_ENV = "APGW_OUT_DIR"
MISSING_TOKENS = {"", "na", "nan", "null", "none", "."}


# ---------------------------------------------------------------------------
# datasets


def _is_number(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def load_dataset(path, time: str, status: str, covariates: Sequence[str] = ()) -> SurvivalDataset:
    """Read a comma-separated file with a header row.

    Numeric covariate columns are used as-is. A column holding any non-numeric
    value is treated as categorical and expanded to indicators, the reference
    level being the first level met in file order. Errors name the file line.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DataValidationError(f"{path}: cannot read ({exc})") from exc
    reader = csv.reader(io.StringIO(text))
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataValidationError(f"{path}: file is empty") from None
    wanted = [time, status, *covariates]
    for col in wanted:
        if col not in header:
            raise DataValidationError(f"{path}: column {col!r} not in header {header}")
    if len(set(header)) != len(header):
        raise DataValidationError(f"{path}: duplicate column names in header")
    idx = {c: header.index(c) for c in wanted}

    rows = []  # (line, {col: text})
    for record in reader:
        line = reader.line_num
        if not record or all(not cell.strip() for cell in record):
            continue
        if len(record) != len(header):
            raise DataValidationError(f"{path}:{line}: expected {len(header)} cells, found {len(record)}")
        cells = {c: record[i].strip() for c, i in idx.items()}
        for c, v in cells.items():
            if v.lower() in MISSING_TOKENS:
                raise DataValidationError(f"{path}:{line}: missing value in column {c!r}")
        rows.append((line, cells))
    if not rows:
        raise DataValidationError(f"{path}: no data rows")

    times = np.empty(len(rows))
    events = np.empty(len(rows), dtype=np.int8)
    for k, (line, cells) in enumerate(rows):
        try:
            t = float(cells[time])
        except ValueError:
            raise DataValidationError(f"{path}:{line}: time {cells[time]!r} is not a number") from None
        if not (math.isfinite(t) and t > 0):
            raise DataValidationError(f"{path}:{line}: time must be positive and finite, got {cells[time]!r}")
        try:
            d = float(cells[status])
        except ValueError:
            d = math.nan
        if d not in (0.0, 1.0):
            raise DataValidationError(f"{path}:{line}: status must be 0 or 1, got {cells[status]!r}")
        times[k] = t
        events[k] = int(d)

    columns, names, refs = [], [], {}
    for col in covariates:
        values = [cells[col] for _, cells in rows]
        if all(_is_number(v) for v in values):
            arr = np.array([float(v) for v in values])
            bad = np.flatnonzero(~np.isfinite(arr))
            if bad.size:
                raise DataValidationError(f"{path}:{rows[bad[0]][0]}: covariate {col!r} is not finite")
            columns.append(arr)
            names.append(col)
            continue
        levels = list(dict.fromkeys(values))
        refs[col] = levels[0]
        for level in levels[1:]:
            columns.append(np.array([v == level for v in values], dtype=float))
            names.append(f"{col}[{level}]")
    cov = np.column_stack(columns) if columns else np.empty((len(rows), 0))
    return SurvivalDataset(times, events, cov, tuple(names), refs)


def write_dataset(data: SurvivalDataset, path, time: str = "time", status: str = "status") -> Path:
    """Write ``data`` as CSV with indicator columns as they are; reloads to an equal dataset."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([time, status, *data.names])
    for k in range(data.n):
        writer.writerow([repr(float(data.times[k])), int(data.status[k]), *(repr(float(v)) for v in data.covariates[k])])
    return atomic_write(path, buf.getvalue())


# ---------------------------------------------------------------------------
# files


def atomic_write(path, content) -> Path:
    """Write text or bytes to a temporary sibling and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = content.encode("utf-8") if isinstance(content, str) else content
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def to_json(obj) -> str:
    # non-finite floats are written as null so any JSON reader accepts the file
    return json.dumps(_finite(obj), indent=2, default=_json_default, allow_nan=False) + "\n"


def _finite(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _finite(obj.tolist())
    if isinstance(obj, np.floating):
        return _finite(float(obj))
    return obj


def write_table(path, rows: Sequence[Mapping], header_lines: Iterable[str] = ()) -> Path:
    """CSV with optional ``#`` metadata lines above the header."""
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _cell(v) for k, v in row.items()})
    return atomic_write(path, buf.getvalue())


def _cell(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    if v is None:
        return ""
    return v


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def default_out_dir(flag: Optional[str] = None) -> Path:
    return Path(flag or os.environ.get(OUT_DIR_ENV) or ".")


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: Optional[int]
    input_digests: dict
    version: str
    wall_clock: float = 0.0
    outputs: list = field(default_factory=list)
    argv: list = field(default_factory=list)
    status: str = "ok"

    def write(self, out_dir) -> Path:
        return atomic_write(Path(out_dir) / "manifest.json", to_json(self.__dict__))


def config_hash(settings: Mapping) -> str:
    return hashlib.sha256(json.dumps(_finite(dict(settings)), sort_keys=True, default=str).encode()).hexdigest()


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start


# ---------------------------------------------------------------------------
# configuration

# documented keys: section -> key -> converter
CONFIG_SCHEMA = {
    "data": {"path": str, "time": str, "status": str, "covariates": str},
    "model": {"model": str, "models": str, "fix": str, "allow_two_scales": "bool"},
    "optimizer": {
        "max_iterations": int,
        "gradient_tolerance": float,
        "step_tolerance": float,
        "n_starts": int,
        "seed": int,
        "start_sd": float,
    },
    "simulate": {
        "n": int,
        "coefs": str,
        "covariate_law": str,
        "target_censoring": float,
        "seed": int,
    },
    "curves": {"fit": str, "kind": str, "profile": str, "comparison": str, "grid": str},
    "study": {"table": str, "replicates": int, "n": int, "seed": int, "jobs": int, "nu": str},
    "output": {"out_dir": str},
}


def load_config(path) -> dict:
    """Read an INI file into ``{section: {key: value}}``; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc})") from exc
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    out = {}
    for section in parser.sections():
        if section not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]; known: {sorted(CONFIG_SCHEMA)}")
        out[section] = {}
        for key, raw in parser.items(section):
            conv = CONFIG_SCHEMA[section].get(key)
            if conv is None:
                raise ConfigError(f"{path}: unknown key {section}.{key}")
            try:
                if conv == "bool":
                    value = parser.getboolean(section, key)
                else:
                    value = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {section}.{key}: {raw!r}") from exc
            out[section][key] = value
    return out


def parse_assignments(text: str, what: str = "fix") -> dict:
    """``"nu0=0.69, beta0=0.5"`` -> ``{"nu0": 0.69, "beta0": 0.5}``."""
    out = {}
    for part in (s.strip() for s in text.split(",")):
        if not part:
            continue
        key, sep, value = part.partition("=")
        if not sep:
            raise ConfigError(f"{what}: expected key=value, got {part!r}")
        try:
            out[key.strip()] = float(value)
        except ValueError:
            raise ConfigError(f"{what}: value for {key.strip()!r} is not a number: {value!r}") from None
    return out


def parse_grid(text: str) -> np.ndarray:
    """``"0.1:5:50"`` (start:stop:count, evenly spaced) or a comma list."""
    text = text.strip()
    try:
        if ":" in text:
            start, stop, count = text.split(":")
            return np.linspace(float(start), float(stop), int(count))
        return np.array([float(v) for v in text.split(",") if v.strip()])
    except ValueError:
        raise ConfigError(f"grid: cannot parse {text!r}; use start:stop:count or a comma list") from None


def parse_profile(text: str) -> tuple:
    if not text.strip():
        return ()
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ConfigError(f"profile: cannot parse {text!r}; use a comma list of numbers") from None

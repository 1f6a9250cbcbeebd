"""CSV ingestion with missing-value and detection-limit conventions.

Cell conventions in exposure columns: an empty cell or "NA" marks a missing
value; "<LOD" marks a measurement below the column's detection limit and
requires a bound for that column in the LOD table.  Anything else must
parse as a number.  Transforms (log10, then standardization using moments
of the observed cells) are applied to exposure values and to the detection
bounds alike, and recorded so new data can be mapped to the model scale.
"""

import csv
import math
from dataclasses import dataclass

import numpy as np

from .sampler import BELOW_LOD, MISSING, OBSERVED, Dataset

_MISSING_TOKENS = ("", "NA")
_LOD_TOKEN = "<LOD"


class ConfigError(ValueError):
    """Bad configuration: unknown columns, missing LOD entries, and such."""


class DataFormatError(ValueError):
    """Malformed data file content."""


@dataclass
class ColumnTransform:
    """Model scale = (log10(x) - center) / scale, log10 only when enabled."""

    name: str
    log10: bool
    center: float
    scale: float

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if self.log10:
            with np.errstate(divide="ignore", invalid="ignore"):
                x = np.log10(x)
        return (x - self.center) / self.scale


@dataclass
class LoadMeta:
    response: str
    exposures: list
    covariates: list
    transforms: list
    n_missing: int
    n_below_lod: int


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{path}: file is empty")
    header = [c.strip() for c in rows[0]]
    body = []
    for r, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataFormatError(f"{path}: row {r} has {len(row)} fields, header has {len(header)}")
        body.append([c.strip() for c in row])
    if not body:
        raise DataFormatError(f"{path}: no data rows")
    return header, body


def read_lod_table(path):
    """Two-column CSV (column, lod) mapping exposure names to detection
    limits on the original measurement scale."""
    header, body = _read_rows(path)
    if len(header) < 2:
        raise DataFormatError(f"{path}: expected columns (column, lod)")
    out = {}
    for r, row in enumerate(body, start=2):
        try:
            out[row[0]] = float(row[1])
        except ValueError:
            raise DataFormatError(f"{path}: row {r}: detection limit {row[1]!r} is not numeric") from None
    return out


def _parse_exposure_cell(cell, path, r, name):
    if cell in _MISSING_TOKENS:
        return MISSING, np.nan
    if cell == _LOD_TOKEN:
        return BELOW_LOD, np.nan
    try:
        return OBSERVED, float(cell)
    except ValueError:
        raise DataFormatError(
            f"{path}: row {r}, column {name!r}: cannot parse {cell!r} "
            f"(expected a number, empty/NA, or {_LOD_TOKEN})") from None


def load_dataset(data_csv, response, exposures=None, covariates=None,
                 covariate_csv=None, lod_csv=None, log10_columns="all",
                 standardize=True):
    """Parse the data file into a sampler-ready Dataset plus the transform
    record.

    `exposures=None` takes every column except the response and covariates.
    `log10_columns` is "all", None, or a list of exposure names.  Covariates
    may live in the main file (named by `covariates`) or in a separate
    positionally aligned CSV.  Returns (Dataset, LoadMeta).
    """
    header, body = _read_rows(data_csv)
    if response not in header:
        raise ConfigError(f"response column {response!r} not found in {data_csv}")
    covariates = list(covariates or [])
    for c in covariates:
        if c not in header:
            raise ConfigError(f"covariate column {c!r} not found in {data_csv}")
    if exposures is None:
        exposures = [c for c in header if c != response and c not in covariates]
    else:
        exposures = list(exposures)
        for c in exposures:
            if c not in header:
                raise ConfigError(f"exposure column {c!r} not found in {data_csv}")
    if not exposures:
        raise ConfigError("no exposure columns selected")
    dup = [c for c in exposures if c == response or c in covariates]
    if dup:
        raise ConfigError(f"columns {dup} assigned to more than one role")

    col = {c: i for i, c in enumerate(header)}
    n, p = len(body), len(exposures)
    y = np.empty(n)
    X = np.full((n, p), np.nan)
    status = np.zeros((n, p), dtype=np.int8)
    for i, row in enumerate(body):
        r = i + 2
        cell = row[col[response]]
        try:
            y[i] = float(cell)
        except ValueError:
            raise DataFormatError(
                f"{data_csv}: row {r}, response {response!r}: cannot parse {cell!r}") from None
        for j, name in enumerate(exposures):
            status[i, j], X[i, j] = _parse_exposure_cell(row[col[name]], data_csv, r, name)

    Z = None
    if covariates:
        Z = np.empty((n, len(covariates)))
        for i, row in enumerate(body):
            for m, name in enumerate(covariates):
                cell = row[col[name]]
                try:
                    Z[i, m] = float(cell)
                except ValueError:
                    raise DataFormatError(
                        f"{data_csv}: row {i + 2}, covariate {name!r}: cannot parse {cell!r}") from None
    if covariate_csv is not None:
        zh, zbody = _read_rows(covariate_csv)
        if len(zbody) != n:
            raise DataFormatError(
                f"{covariate_csv}: {len(zbody)} rows, data file has {n}; files align by position")
        Zx = np.empty((n, len(zh)))
        for i, row in enumerate(zbody):
            for m, name in enumerate(zh):
                try:
                    Zx[i, m] = float(row[m])
                except ValueError:
                    raise DataFormatError(
                        f"{covariate_csv}: row {i + 2}, column {name!r}: cannot parse {row[m]!r}") from None
        Z = Zx if Z is None else np.hstack([Z, Zx])
        covariates = covariates + list(zh)

    lod_table = read_lod_table(lod_csv) if lod_csv else {}
    lod = np.full(p, np.nan)
    for j, name in enumerate(exposures):
        has_cens = bool(np.any(status[:, j] == BELOW_LOD))
        if name in lod_table:
            lod[j] = lod_table[name]
        elif has_cens:
            raise ConfigError(
                f"column {name!r} has {_LOD_TOKEN} cells but no entry in the LOD table")

    if log10_columns == "all":
        log_cols = set(exposures)
    else:
        log_cols = set(log10_columns or [])
        unknown = log_cols - set(exposures)
        if unknown:
            raise ConfigError(f"log10 requested for non-exposure columns {sorted(unknown)}")

    transforms = []
    n_missing = int(np.sum(status == MISSING))
    n_lod = int(np.sum(status == BELOW_LOD))
    for j, name in enumerate(exposures):
        obs = status[:, j] == OBSERVED
        vals = X[obs, j]
        use_log = name in log_cols
        if use_log:
            if np.any(vals <= 0):
                bad = np.nonzero(obs)[0][vals <= 0][0] + 2
                raise DataFormatError(
                    f"{data_csv}: row {bad}, column {name!r}: log10 transform "
                    f"needs positive values")
            if np.isfinite(lod[j]) and lod[j] <= 0:
                raise ConfigError(f"detection limit for {name!r} must be positive under log10")
            vals = np.log10(vals)
        center, scale = 0.0, 1.0
        if standardize:
            if vals.size == 0:
                raise DataFormatError(f"column {name!r} has no observed values")
            center = float(vals.mean())
            scale = float(vals.std(ddof=0))
            if scale == 0.0:
                raise DataFormatError(f"column {name!r} has zero observed variance")
        tr = ColumnTransform(name=name, log10=use_log, center=center, scale=scale)
        transforms.append(tr)
        X[obs, j] = (vals - center) / scale
        if np.isfinite(lod[j]):
            lod[j] = float(tr.apply(lod[j]))
    X[status != OBSERVED] = 0.0

    dataset = Dataset(y=y, X_obs=X, status=status, lod=lod, Z=Z)
    meta = LoadMeta(response=response, exposures=exposures, covariates=covariates,
                    transforms=transforms, n_missing=n_missing, n_below_lod=n_lod)
    return dataset, meta

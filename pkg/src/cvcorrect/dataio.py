"""CSV ingestion and experiment configuration for tabular clustered data."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .covmodel import (
    ClusterDesign,
    ClusteredRandomIntercept,
    CompoundSymmetry,
    CovarianceSpec,
    Diagonal,
    ExponentialKernelNugget,
    HierarchicalRandomSlope,
)
from .predictors import Dataset


class CsvFormatError(ValueError):
    """Malformed tabular input; the message names the offending row/column."""


@dataclass(frozen=True)
class TableSchema:
    """Column mapping for a tabular dataset.

    ``cluster_levels`` are ordered outermost first; ``coordinates`` names a
    (latitude-like, longitude-like) pair; ``time`` names the random-slope
    covariate.
    """

    response: str
    fixed_effects: tuple[str, ...]
    cluster_levels: tuple[str, ...] = ()
    coordinates: Optional[tuple[str, str]] = None
    time: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "fixed_effects", tuple(self.fixed_effects))
        object.__setattr__(self, "cluster_levels", tuple(self.cluster_levels))
        if self.coordinates is not None:
            coords = tuple(self.coordinates)
            if len(coords) != 2:
                raise ValueError("coordinates must name exactly two columns")
            object.__setattr__(self, "coordinates", coords)
        if not self.fixed_effects:
            raise ValueError("at least one fixed-effect column is required")
        names = self.all_columns()
        if len(set(names)) != len(names):
            raise ValueError("schema column names must be distinct")

    def all_columns(self) -> list[str]:
        cols = [self.response, *self.fixed_effects, *self.cluster_levels]
        if self.coordinates is not None:
            cols += list(self.coordinates)
        if self.time is not None:
            cols.append(self.time)
        return cols

    @classmethod
    def from_dict(cls, d: dict) -> "TableSchema":
        try:
            return cls(
                response=d["response"],
                fixed_effects=tuple(d["fixed_effects"]),
                cluster_levels=tuple(d.get("cluster_levels", ())),
                coordinates=(
                    tuple(d["coordinates"]) if d.get("coordinates") else None
                ),
                time=d.get("time"),
            )
        except KeyError as exc:
            raise ValueError(f"schema is missing required field {exc}") from exc

    @classmethod
    def from_json_file(cls, path) -> "TableSchema":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def load_csv(path, schema: TableSchema, add_intercept: bool = False) -> Dataset:
    """Parse an RFC-4180 CSV file into a Dataset under ``schema``.

    Numeric columns are parsed as decimal reals and cluster columns as
    opaque string labels.  A missing or non-numeric required value fails
    with the 1-based data row number and the column name.  The intercept
    column is only added when asked for, never implicitly.
    """
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        missing = [c for c in schema.all_columns() if c not in header]
        if missing:
            raise CsvFormatError(f"{path}: missing columns {missing}")
        col_idx = {c: header.index(c) for c in schema.all_columns()}

        numeric_cols = [schema.response, *schema.fixed_effects]
        if schema.coordinates is not None:
            numeric_cols += list(schema.coordinates)
        if schema.time is not None:
            numeric_cols.append(schema.time)

        rows = []
        for rownum, row in enumerate(reader, start=1):
            if not row or (len(row) == 1 and row[0].strip() == ""):
                continue
            if len(row) != len(header):
                raise CsvFormatError(
                    f"{path}: row {rownum} has {len(row)} fields, expected {len(header)}"
                )
            parsed = {}
            for c in numeric_cols:
                raw = row[col_idx[c]].strip()
                if raw == "":
                    raise CsvFormatError(
                        f"{path}: row {rownum}: missing value in column {c!r}"
                    )
                try:
                    parsed[c] = float(raw)
                except ValueError:
                    raise CsvFormatError(
                        f"{path}: row {rownum}: non-numeric value {raw!r} "
                        f"in column {c!r}"
                    ) from None
            for c in schema.cluster_levels:
                raw = row[col_idx[c]].strip()
                if raw == "":
                    raise CsvFormatError(
                        f"{path}: row {rownum}: missing value in column {c!r}"
                    )
                parsed[c] = raw
            rows.append(parsed)

    if len(rows) < 2:
        raise CsvFormatError(f"{path}: need at least 2 data rows, got {len(rows)}")

    y = np.array([r[schema.response] for r in rows])
    X_cols = [np.array([r[c] for r in rows]) for c in schema.fixed_effects]
    if add_intercept:
        X_cols.insert(0, np.ones(len(rows)))
    X = np.column_stack(X_cols)
    labels = tuple(
        np.array([r[c] for r in rows], dtype=object) for c in schema.cluster_levels
    )
    coords = None
    if schema.coordinates is not None:
        coords = np.column_stack(
            [np.array([r[c] for r in rows]) for c in schema.coordinates]
        )
    time = None
    if schema.time is not None:
        time = np.array([r[schema.time] for r in rows])
    design = ClusterDesign(
        levels=schema.cluster_levels, labels=labels, time=time, coords=coords
    )
    return Dataset(y=y, X=X, design=design)


def write_csv(path, data: Dataset, schema: TableSchema):
    """Write a Dataset back out under ``schema`` (round-trip exact floats)."""
    n_fixed = len(schema.fixed_effects)
    if data.p != n_fixed:
        raise ValueError(
            f"dataset has {data.p} covariate columns, schema names {n_fixed}"
        )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(schema.all_columns())
        for i in range(data.n):
            row = [repr(float(data.y[i]))]
            row += [repr(float(v)) for v in data.X[i]]
            row += [str(l[i]) for l in data.design.labels]
            if schema.coordinates is not None:
                row += [repr(float(v)) for v in data.design.coords[i]]
            if schema.time is not None:
                row.append(repr(float(data.design.time[i])))
            writer.writerow(row)


# ---------------------------------------------------------------------------
# Compact covariance / scenario / predictor grammars for the CLI
# ---------------------------------------------------------------------------

_COV_BUILDERS = {
    "diagonal": (Diagonal, {"sigma2": "sigma2_eps", "sigma2_eps": "sigma2_eps"}),
    "compound-symmetry": (
        CompoundSymmetry,
        {"sigma2": "sigma2_eps", "sigma2_eps": "sigma2_eps", "rho": "rho"},
    ),
    "cluster-intercept": (
        ClusteredRandomIntercept,
        {
            "sigma2_b": "sigma2_b",
            "sigma2": "sigma2_eps",
            "sigma2_eps": "sigma2_eps",
        },
    ),
    "exp-nugget": (
        ExponentialKernelNugget,
        {
            "amplitude": "amplitude",
            "lengthscale": "lengthscale",
            "sigma2": "sigma2_nugget",
            "sigma2_nugget": "sigma2_nugget",
        },
    ),
}


def parse_covariance(text: str) -> CovarianceSpec:
    """Parse compact covariance grammar, e.g. ``diagonal:sigma2=1`` or
    ``hier-slope:sigma2_u=9,sb_intercept=9,sb_slope=1,sigma2_eps=1``."""
    name, _, params = text.partition(":")
    name = name.strip().lower()
    kv = {}
    if params.strip():
        for part in params.split(","):
            k, _, v = part.partition("=")
            if not _:
                raise ValueError(f"malformed covariance parameter {part!r}")
            try:
                kv[k.strip()] = float(v)
            except ValueError:
                raise ValueError(f"non-numeric covariance parameter {part!r}") from None
    if name == "hier-slope":
        try:
            return HierarchicalRandomSlope(
                sigma2_u=kv.pop("sigma2_u"),
                Sigma_b=np.diag([kv.pop("sb_intercept"), kv.pop("sb_slope")]),
                sigma2_eps=kv.pop("sigma2_eps", kv.pop("sigma2", 1.0)),
            )
        except KeyError as exc:
            raise ValueError(f"hier-slope is missing parameter {exc}") from exc
    if name not in _COV_BUILDERS:
        raise ValueError(
            f"unknown covariance {name!r}; expected one of "
            f"{sorted([*_COV_BUILDERS, 'hier-slope'])}"
        )
    cls, mapping = _COV_BUILDERS[name]
    kwargs = {}
    for k, v in kv.items():
        if k not in mapping:
            raise ValueError(f"unknown parameter {k!r} for covariance {name!r}")
        kwargs[mapping[k]] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ValueError(f"covariance {name!r}: {exc}") from exc


def parse_predictor(text: str) -> "PredictorSpec":
    from .predictors import PredictorSpec

    name, _, params = text.strip().lower().partition(":")
    if name == "ridge":
        lam = 0.0
        if params:
            k, _, v = params.partition("=")
            if k.strip() != "lambda":
                raise ValueError(f"ridge takes lambda=<value>, got {params!r}")
            lam = float(v)
        return PredictorSpec("ridge", ridge_lambda=lam)
    if params:
        raise ValueError(f"predictor {name!r} takes no parameters")
    return PredictorSpec(name)

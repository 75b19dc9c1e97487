"""Assessment-scale preprocessing and embedding.

Categorical codes are shifted by the running total of earlier columns'
cardinalities so every (column, code) pair owns one row of a shared lookup
table; numeric columns (the diagnosis interval among them) are z-scored
with training statistics and embedded by a per-column affine map.
"""
from dataclasses import dataclass, field, asdict
import json
import logging

import numpy as np
import torch
import torch.nn as nn

from .errors import ValidationError

log = logging.getLogger(__name__)

__all__ = [
    "CategoricalColumn",
    "NumericColumn",
    "TabularSchema",
    "Record",
    "fit_schema",
    "offset_encode",
    "normalize_numeric",
    "impute_interval",
    "TabularEmbedding",
    "assemble_sequence",
    "load_column_kinds",
]

INTERVAL_COLUMN = "delta_t_days"
RESERVED = ("subject_id", "exam_date", "label")


@dataclass
class CategoricalColumn:
    name: str
    cardinality: int


@dataclass
class NumericColumn:
    name: str
    mean: float
    std: float


@dataclass
class TabularSchema:
    categorical_columns: list
    numeric_columns: list  # interval column last
    interval_column: str = INTERVAL_COLUMN
    embedding_dim: int = 64
    dropped: list = field(default_factory=list)

    @property
    def n_categorical(self):
        return len(self.categorical_columns)

    @property
    def n_numeric(self):
        return len(self.numeric_columns)

    @property
    def cardinalities(self):
        return [c.cardinality for c in self.categorical_columns]

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.cardinalities)[:-1]]).astype(int).tolist() if self.cardinalities else []

    @property
    def table_size(self):
        # one reserved "unknown" row per column after all real codes
        return int(sum(self.cardinalities)) + self.n_categorical

    @property
    def interval_stats(self):
        col = self.numeric_columns[-1]
        return col.mean, col.std

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            categorical_columns=[CategoricalColumn(**c) for c in d["categorical_columns"]],
            numeric_columns=[NumericColumn(**c) for c in d["numeric_columns"]],
            interval_column=d.get("interval_column", INTERVAL_COLUMN),
            embedding_dim=d.get("embedding_dim", 64),
            dropped=list(d.get("dropped", [])),
        )


@dataclass
class Record:
    """One subject's assessment row. ``None`` marks a missing value."""

    categorical_values: list
    numeric_values: list
    delta_t: float = None


def _column(rows, key):
    return [r[key] for r in rows]


def fit_schema(rows, kinds, interval_column=INTERVAL_COLUMN, embedding_dim=64):
    """Fit column statistics on training rows.

    Parameters
    ----------
    rows : list of dict or pandas.DataFrame
        Raw training rows keyed by column name. Categorical values are
        0-based integer codes (``None``/NaN = missing).
    kinds : dict
        ``{column: "categorical" | "numeric"}`` for every model column,
        excluding the interval column.

    Returns
    -------
    schema : TabularSchema
    report : list of str
        One line per dropped zero-variance column.
    """
    if hasattr(rows, "to_dict"):
        rows = rows.to_dict("records")
    if len(rows) < 2:
        raise ValidationError(f"fit_schema needs at least 2 rows, got {len(rows)}")
    cats, nums, report = [], [], []
    for name, kind in kinds.items():
        if name == interval_column or name in RESERVED:
            continue
        values = _column(rows, name)
        if kind == "categorical":
            codes = [int(v) for v in values if not _missing(v)]
            if any(c < 0 for c in codes):
                raise ValidationError(f"negative categorical code in column {name!r}")
            cats.append(CategoricalColumn(name, max(codes) + 1 if codes else 1))
        elif kind == "numeric":
            col = _numeric(values, name)
            std = float(col.std())
            if std == 0.0:
                report.append(f"dropped zero-variance numeric column {name!r} (constant {col[0]!r})")
                continue
            nums.append(NumericColumn(name, float(col.mean()), std))
        else:
            raise ValidationError(f"unknown column kind {kind!r} for {name!r}")
    dt = _numeric(_column(rows, interval_column), interval_column)
    if dt.std() == 0.0:
        raise ValidationError(f"interval column {interval_column!r} has zero variance")
    nums.append(NumericColumn(interval_column, float(dt.mean()), float(dt.std())))
    for line in report:
        log.info(line)
    schema = TabularSchema(cats, nums, interval_column, embedding_dim, dropped=[r.split("'")[1] for r in report])
    return schema, report


def _missing(v):
    return v is None or (isinstance(v, float) and np.isnan(v))


def _numeric(values, name):
    col = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(col)):
        raise ValidationError(f"non-finite value in numeric column {name!r}")
    return col


def record_from_row(row, schema):
    """Pick a Record out of a raw row dict (missing Δt stays ``None``)."""
    cat = [None if _missing(row.get(c.name)) else int(row[c.name]) for c in schema.categorical_columns]
    num = [float(row[c.name]) for c in schema.numeric_columns[:-1]]
    dt = row.get(schema.interval_column)
    return Record(cat, num, None if _missing(dt) else float(dt))


def offset_encode(record, schema, unseen="error"):
    """Globally unique codes: column j shifts by the sum of earlier cardinalities.

    A missing code maps to the column's reserved unknown row, which sits
    after every real code in the table. ``unseen="unknown"`` sends codes
    the training rows never showed there too instead of raising.
    """
    values = record.categorical_values if isinstance(record, Record) else record
    if len(values) != schema.n_categorical:
        raise ValidationError(f"expected {schema.n_categorical} categorical values, got {len(values)}")
    total = sum(schema.cardinalities)
    out = []
    for j, (v, col, off) in enumerate(zip(values, schema.categorical_columns, schema.offsets)):
        if _missing(v):
            out.append(total + j)
            continue
        if not 0 <= v < col.cardinality:
            if unseen == "unknown" and v >= 0:
                out.append(total + j)
                continue
            raise ValidationError(f"code {v} out of range for column {col.name!r} (cardinality {col.cardinality})")
        out.append(off + int(v))
    return out


def impute_interval(schema_or_values):
    """Training-set mean Δt in days."""
    if isinstance(schema_or_values, TabularSchema):
        return schema_or_values.interval_stats[0]
    values = np.asarray(list(schema_or_values), dtype=np.float64)
    if values.size == 0:
        raise ValidationError("cannot impute interval from an empty training set")
    return float(values.mean())


def normalize_numeric(record, schema):
    """z-scores with training statistics; Δt last, imputed when missing."""
    dt = record.delta_t if record.delta_t is not None else impute_interval(schema)
    values = np.asarray(list(record.numeric_values) + [dt], dtype=np.float64)
    if values.shape[0] != schema.n_numeric:
        raise ValidationError(f"expected {schema.n_numeric - 1} numeric values, got {values.shape[0] - 1}")
    if not np.all(np.isfinite(values)):
        raise ValidationError("non-finite numeric value")
    mean = np.array([c.mean for c in schema.numeric_columns])
    std = np.array([c.std for c in schema.numeric_columns])
    return (values - mean) / std


class TabularEmbedding(nn.Module):
    """Categorical lookup + per-column bias; numeric per-column affine map."""

    def __init__(self, schema: TabularSchema):
        super().__init__()
        d = schema.embedding_dim
        self.n_cat, self.n_num = schema.n_categorical, schema.n_numeric
        self.table = nn.Parameter(torch.randn(max(schema.table_size, 1), d) * 0.1)
        self.cat_bias = nn.Parameter(torch.zeros(self.n_cat, d))
        self.num_weight = nn.Parameter(torch.randn(self.n_num, d) * 0.1)
        self.num_bias = nn.Parameter(torch.zeros(self.n_num, d))

    def embed_categorical(self, codes):
        """codes [..., n] (offset-encoded) -> tokens [..., n, d]."""
        if codes.numel() and (codes.min() < 0 or codes.max() >= self.table.shape[0]):
            raise ValidationError(f"code out of table range [0, {self.table.shape[0]})")
        return self.table[codes] + self.cat_bias

    def embed_numeric(self, values):
        """values [..., m] (normalised) -> tokens [..., m, d]."""
        return values.unsqueeze(-1) * self.num_weight + self.num_bias

    def forward(self, codes, values):
        """Tokens ordered categoricals then numerics: [..., n + m, d]."""
        return torch.cat([self.embed_categorical(codes), self.embed_numeric(values)], dim=-2)


def assemble_sequence(x_lmp, x_lpp, tab_tokens, proj):
    """stack[proj(x_LMP); proj(x_LPP); T] along the sequence axis.

    ``proj`` is the shared patch-token -> d map; pass ``None`` for the
    image-free ablation (then ``x_lmp``/``x_lpp`` are ignored).
    """
    if proj is None or x_lmp is None:
        return tab_tokens
    if x_lmp.shape[-2] != x_lpp.shape[-2]:
        raise ValidationError(f"patch count mismatch: MRI {x_lmp.shape[-2]} vs PET {x_lpp.shape[-2]}")
    return torch.cat([proj(x_lmp), proj(x_lpp), tab_tokens], dim=-2)


def load_column_kinds(path):
    """Read the ``schema.json`` sidecar: ``{"columns": {name: kind}}`` or a flat map."""
    with open(path) as fh:
        data = json.load(fh)
    kinds = data.get("columns", data)
    bad = {k: v for k, v in kinds.items() if v not in ("categorical", "numeric")}
    if bad:
        raise ValidationError(f"schema.json has unknown kinds: {bad}")
    return kinds

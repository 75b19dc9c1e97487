"""MCI -> AD progression cohorts from longitudinal diagnosis tables.

Each MCI visit is paired with the subject's next visit: AD gives a
positive sample, MCI a negative one, anything else is discarded. Samples
are then filtered by the interval between the two visits and joined to
their baseline scan.
"""
from dataclasses import dataclass, field, asdict
import datetime as dt
import logging

import numpy as np
import pandas as pd

from .errors import ValidationError

log = logging.getLogger(__name__)

__all__ = [
    "DiagnosisEvent",
    "CohortSample",
    "CohortStats",
    "PRESETS",
    "DAYS_PER_MONTH",
    "normalize_diagnosis",
    "read_diagnosis_table",
    "extract_transitions",
    "filter_by_interval",
    "cohort_stats",
    "attach_imaging",
    "attach_tabular",
    "SyntheticCohort",
    "synthesize_cohort",
]

PRESETS = {"one-year": (150, 365), "three-year": (150, 1095)}
DAYS_PER_MONTH = 30.44
MATCH_TOLERANCE_DAYS = 10

_DX = {
    "CN": "CN", "NL": "CN", "CONTROL": "CN",
    "MCI": "MCI", "EMCI": "MCI", "LMCI": "MCI", "AMCI": "MCI",
    "AD": "AD", "DEMENTIA": "AD",
}


def normalize_diagnosis(label):
    return _DX.get(str(label).strip().upper(), "other")


def _as_date(value):
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value).strip()[:10])
    except ValueError as exc:
        raise ValidationError(f"unparseable date {value!r}") from exc


@dataclass
class DiagnosisEvent:
    subject_id: str
    exam_date: dt.date
    diagnosis: str
    imaging_ref: str = None

    def __post_init__(self):
        self.subject_id = str(self.subject_id)
        self.exam_date = _as_date(self.exam_date)
        self.diagnosis = normalize_diagnosis(self.diagnosis)


@dataclass
class CohortSample:
    subject_id: str
    baseline_date: dt.date
    followup_date: dt.date
    delta_t: float
    label: int
    followup_diagnosis: str = "MCI"
    features: dict = field(default_factory=dict)
    mri: str = None
    pet: str = None

    @property
    def key(self):
        return (self.subject_id, self.baseline_date)

    def to_dict(self):
        d = asdict(self)
        d["baseline_date"] = self.baseline_date.isoformat()
        d["followup_date"] = self.followup_date.isoformat()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["baseline_date"] = _as_date(d["baseline_date"])
        d["followup_date"] = _as_date(d["followup_date"])
        return cls(**d)


@dataclass
class CohortStats:
    n_pos: int
    n_neg: int
    mean_pos: float
    std_pos: float
    mean_neg: float
    std_neg: float

    def to_dict(self):
        d = asdict(self)
        d["units"] = "days"
        d["months"] = {
            k: (None if v is None else v / DAYS_PER_MONTH)
            for k, v in d.items()
            if k.startswith(("mean", "std"))
        }
        d["ps_ns"] = f"{self.n_pos}/{self.n_neg}"
        return d


def read_diagnosis_table(path):
    """Diagnosis CSV with columns subject_id, exam_date, diagnosis."""
    df = pd.read_csv(path, dtype={"subject_id": str})
    missing = {"subject_id", "exam_date", "diagnosis"} - set(df.columns)
    if missing:
        raise ValidationError(f"{path}: missing columns {sorted(missing)}")
    return [DiagnosisEvent(r.subject_id, r.exam_date, r.diagnosis) for r in df.itertuples(index=False)]


def extract_transitions(events):
    """Pair every MCI visit with the same subject's next visit.

    Returns
    -------
    samples : list of CohortSample
        Ordered by (subject_id, baseline date).
    report : list of str
        Rejected duplicate (subject, date) rows.
    """
    if isinstance(events, pd.DataFrame):
        events = [DiagnosisEvent(r.subject_id, r.exam_date, r.diagnosis) for r in events.itertuples(index=False)]
    by_subject = {}
    report = []
    for ev in events:
        visits = by_subject.setdefault(ev.subject_id, {})
        if ev.exam_date in visits:
            report.append(f"duplicate visit rejected: subject={ev.subject_id} date={ev.exam_date.isoformat()}")
            visits[ev.exam_date] = None
            continue
        visits[ev.exam_date] = ev
    samples = []
    for sid in sorted(by_subject):
        visits = [v for _, v in sorted(by_subject[sid].items()) if v is not None]
        for base, nxt in zip(visits[:-1], visits[1:]):
            if base.diagnosis != "MCI" or nxt.diagnosis not in ("MCI", "AD"):
                continue
            days = (nxt.exam_date - base.exam_date).days
            samples.append(
                CohortSample(
                    subject_id=sid,
                    baseline_date=base.exam_date,
                    followup_date=nxt.exam_date,
                    delta_t=float(days),
                    label=int(nxt.diagnosis == "AD"),
                    followup_diagnosis=nxt.diagnosis,
                )
            )
    return samples, report


def filter_by_interval(samples, lo_days, hi_days=None):
    """Keep samples with lo < Δt < hi (strict). ``lo_days`` may name a preset."""
    if isinstance(lo_days, str):
        lo_days, hi_days = PRESETS[lo_days]
    if not lo_days < hi_days:
        raise ValidationError(f"interval bounds must satisfy lo < hi, got ({lo_days}, {hi_days})")
    return [s for s in samples if lo_days < s.delta_t < hi_days]


def cohort_stats(samples):
    """Per-label Δt mean and population std (days)."""
    if not samples:
        raise ValidationError("cohort_stats on an empty cohort")
    dts = np.array([s.delta_t for s in samples], dtype=np.float64)
    labels = np.array([s.label for s in samples])

    def moments(x):
        return (float(x.mean()), float(x.std())) if x.size else (None, None)

    mp, sp = moments(dts[labels == 1])
    mn, sn = moments(dts[labels == 0])
    return CohortStats(int((labels == 1).sum()), int((labels == 0).sum()), mp, sp, mn, sn)


def attach_imaging(samples, index, tolerance_days=MATCH_TOLERANCE_DAYS):
    """Resolve each sample's baseline scan within ±tolerance days.

    ``index`` is a list of ``{"subject_id", "date", "mri", "pet"?}`` entries
    (the parsed volume-index JSON). The closest scan wins; ties go to the
    earlier one.
    """
    by_subject = {}
    for entry in index:
        by_subject.setdefault(str(entry["subject_id"]), []).append((_as_date(entry["date"]), entry))
    kept, report = [], []
    for s in samples:
        best = None
        for date, entry in by_subject.get(s.subject_id, []):
            gap = abs((date - s.baseline_date).days)
            if gap <= tolerance_days and (best is None or (gap, date) < best[:2]):
                best = (gap, date, entry)
        if best is None:
            report.append(
                f"no scan within {tolerance_days} days: subject={s.subject_id} baseline={s.baseline_date.isoformat()}"
            )
            continue
        entry = best[2]
        s.mri = entry["mri"]
        s.pet = entry.get("pet")
        kept.append(s)
    return kept, report


def attach_tabular(samples, table, feature_columns):
    """Copy each sample's baseline assessment row (matched on subject and date)."""
    if isinstance(table, pd.DataFrame):
        table = table.to_dict("records")
    rows = {(str(r["subject_id"]), _as_date(r["exam_date"])): r for r in table}
    kept, report = [], []
    for s in samples:
        row = rows.get(s.key)
        if row is None:
            report.append(f"no assessment row: subject={s.subject_id} date={s.baseline_date.isoformat()}")
            continue
        s.features = {c: _plain(row.get(c)) for c in feature_columns}
        kept.append(s)
    return kept, report


def _plain(v):
    if v is None:
        return None
    if isinstance(v, (np.floating, float)):
        return None if np.isnan(v) else float(v)
    if isinstance(v, (np.integer, int)):
        return int(v)
    return v


@dataclass
class SyntheticCohort:
    events: pd.DataFrame
    table: pd.DataFrame
    kinds: dict
    volumes: dict  # (subject_id, baseline iso date) -> (mri, pet) float32 [1, D, H, W]
    scan_dates: dict  # same key -> scan date (within a few days of baseline)
    samples: list

    @property
    def labels(self):
        return np.array([s.label for s in self.samples])


def _volume_pair(rng, dims, label, signal):
    D, H, W = dims
    z, y, x = np.meshgrid(
        np.linspace(-1, 1, D), np.linspace(-1, 1, H), np.linspace(-1, 1, W), indexing="ij"
    )
    r2 = (z / 0.8) ** 2 + (y / 0.9) ** 2 + (x / 0.75) ** 2
    brain = np.clip(1.0 - r2, 0.0, 1.0)
    centre = rng.uniform(-0.25, 0.25, size=3)
    blob = np.exp(-((z - centre[0]) ** 2 + (y - centre[1]) ** 2 + (x - centre[2]) ** 2) / 0.08)
    sign = 2 * label - 1
    mri = 0.55 * brain + (0.15 + 0.12 * signal * sign) * blob + 0.04 * rng.standard_normal(dims)
    mri = np.clip(mri, 0.0, 1.0)
    pet = np.clip(0.9 * mri ** 1.5 + (0.1 + 0.15 * signal * sign) * blob * (brain > 0), 0.0, 1.0)
    return mri[None].astype(np.float32), pet[None].astype(np.float32)


def synthesize_cohort(
    n_samples,
    signal=1.0,
    dt_range=PRESETS["one-year"],
    dims=(16, 16, 16),
    seed=0,
    n_categorical=3,
    n_numeric=5,
    chain_prob=0.3,
    start=dt.date(2010, 1, 1),
):
    """Deterministic synthetic cohort with a label signal of tunable strength.

    Labels are balanced. Some subjects contribute two consecutive
    transitions (MCI -> MCI -> outcome), so grouping by subject matters.
    ``signal`` scales the label dependence of the first three numeric
    columns, the first categorical column and the volume blob; 0 removes
    all label information. Δt is drawn uniformly inside ``dt_range`` and
    carries no label information.
    """
    rng = np.random.default_rng(seed)
    lo, hi = dt_range
    labels = np.zeros(n_samples, dtype=int)
    labels[: n_samples // 2] = 1
    rng.shuffle(labels)

    groups = []
    i = 0
    while i < n_samples:
        if labels[i] == 0 and i + 1 < n_samples and rng.random() < chain_prob:
            groups.append([0, int(labels[i + 1])])
            i += 2
        else:
            groups.append([int(labels[i])])
            i += 1

    events, rows, volumes, scan_dates, samples = [], [], {}, {}, []
    cat_names = [f"cat{j}" for j in range(n_categorical)]
    num_names = [f"num{j}" for j in range(n_numeric)]
    for g, chain in enumerate(groups):
        sid = f"S{g:04d}"
        date = start + dt.timedelta(days=int(rng.integers(0, 3000)))
        events.append((sid, date, "MCI"))
        for label in chain:
            days = int(rng.integers(lo + 1, hi))
            follow = date + dt.timedelta(days=days)
            events.append((sid, follow, "AD" if label else "MCI"))
            sign = 2 * label - 1
            row = {"subject_id": sid, "exam_date": date.isoformat()}
            for j, name in enumerate(num_names):
                shift = 0.9 * signal * sign if j < 3 else 0.0
                row[name] = float(rng.normal(shift, 1.0) * (1 + j) + 10 * j)
            for j, name in enumerate(cat_names):
                card = 3 + j
                p = np.full(card, 1.0 / card)
                if j == 0:
                    p = p + signal * sign * np.linspace(-1, 1, card) / card
                    p = np.clip(p, 1e-3, None)
                    p = p / p.sum()
                row[name] = int(rng.choice(card, p=p))
            row["delta_t_days"] = float(days)
            row["label"] = label
            rows.append(row)
            key = (sid, date.isoformat())
            volumes[key] = _volume_pair(rng, dims, label, signal)
            scan_dates[key] = date + dt.timedelta(days=int(rng.integers(-5, 6)))
            samples.append(
                CohortSample(sid, date, follow, float(days), label, "AD" if label else "MCI",
                             features={k: row[k] for k in cat_names + num_names})
            )
            date = follow
    ev = pd.DataFrame(events, columns=["subject_id", "exam_date", "diagnosis"])
    ev["exam_date"] = ev["exam_date"].map(lambda d: d.isoformat())
    table = pd.DataFrame(rows)
    kinds = {**{c: "categorical" for c in cat_names}, **{c: "numeric" for c in num_names}}
    return SyntheticCohort(ev, table, kinds, volumes, scan_dates, samples)

"""Multi-study individual participant data: parsing, validation, aggregation and splitting.

A study is held as long-format records, one per (subject, arm/timepoint), with
the primary endpoint ``y`` and a ``(n_records, J)`` marker matrix ``s``.
Missing values are stored as NaN; NaN is the mask.
"""

from __future__ import annotations

import csv
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
import pandas as pd

from .validation import InsufficientDataError, check_random_state

logger = logging.getLogger(__name__)

PAIRED = "paired"
TWO_ARM = "two_arm"
DESIGNS = (PAIRED, TWO_ARM)
MISSING_TOKENS = ("", "NA")


class SchemaError(ValueError):
    """A required column is absent from the input."""


class DataParseError(ValueError):
    """A cell could not be converted to the expected type."""


class IntegrityError(ValueError):
    """Records violate a structural invariant (duplicate keys, empty arms...)."""


class NoStudiesError(ValueError):
    """Filtering removed every study."""


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    arm: int
    y: float
    s: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        """True where the marker value is missing."""
        return np.isnan(self.s)


@dataclass(frozen=True, eq=False)
class StudyDataset:
    """Records of one study.

    Parameters
    ----------
    study_id : str
    design : {"paired", "two_arm"}
        For paired studies ``arm`` is the timepoint (0 = pre, 1 = post) and every
        subject has exactly one record per timepoint.
    subjects : array of str, shape (n_records,)
    arm : array of int, shape (n_records,)
    y : array of float, shape (n_records,)
    s : array of float, shape (n_records, J)
    markers : tuple of str, length J
    """

    study_id: str
    design: str
    subjects: np.ndarray
    arm: np.ndarray
    y: np.ndarray
    s: np.ndarray
    markers: tuple = field(default_factory=tuple)

    def __post_init__(self):
        subjects = np.asarray(self.subjects, dtype=object)
        arm = np.asarray(self.arm, dtype=np.int8)
        y = np.asarray(self.y, dtype=float)
        s = np.asarray(self.s, dtype=float)
        if s.ndim == 1:
            s = s.reshape(-1, 1) if len(self.markers) == 1 else s.reshape(len(y), -1)
        object.__setattr__(self, "subjects", subjects)
        object.__setattr__(self, "arm", arm)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "markers", tuple(str(m) for m in self.markers))
        self._validate()

    def _validate(self):
        n = len(self.y)
        if self.design not in DESIGNS:
            raise ValueError(f"design must be one of {DESIGNS}, got {self.design!r}")
        if not (len(self.subjects) == len(self.arm) == n == self.s.shape[0]):
            raise IntegrityError(f"study {self.study_id}: record arrays differ in length")
        if self.s.shape[1] != len(self.markers):
            raise IntegrityError(
                f"study {self.study_id}: {self.s.shape[1]} marker columns "
                f"but {len(self.markers)} marker names"
            )
        if len(set(self.markers)) != len(self.markers):
            raise IntegrityError(f"study {self.study_id}: duplicate marker names")
        if not np.isin(self.arm, (0, 1)).all():
            raise IntegrityError(f"study {self.study_id}: arm values must be 0 or 1")
        for name, arr in (("y", self.y), ("s", self.s)):
            if np.isinf(arr).any():
                raise IntegrityError(f"study {self.study_id}: infinite value in {name}")
        keys = pd.MultiIndex.from_arrays([self.subjects, self.arm])
        if keys.has_duplicates:
            dup = keys[keys.duplicated()][0]
            raise IntegrityError(
                f"study {self.study_id}: duplicate (subject, arm) key {dup}"
            )
        if self.design == PAIRED:
            counts = pd.Series(self.subjects).value_counts()
            if (counts != 2).any():
                bad = counts.index[counts != 2][0]
                raise IntegrityError(
                    f"study {self.study_id}: paired subject {bad!r} lacks a pre or post record"
                )
        else:
            if pd.Series(self.subjects).duplicated().any():
                raise IntegrityError(
                    f"study {self.study_id}: two-arm subject appears in both arms"
                )
            if n and not ((self.arm == 0).any() and (self.arm == 1).any()):
                raise IntegrityError(f"study {self.study_id}: an arm is empty")

    # ------------------------------------------------------------------ views

    @property
    def n_markers(self) -> int:
        return len(self.markers)

    @property
    def subject_ids(self) -> list:
        """Distinct subjects in order of first appearance."""
        return list(dict.fromkeys(self.subjects))

    @property
    def n_subjects(self) -> int:
        return len(self.subject_ids)

    def n_complete(self) -> int:
        """Subjects whose primary endpoint is fully observed."""
        if self.design == PAIRED:
            _, y0, y1, _, _ = self.paired_arrays()
            return int(np.sum(np.isfinite(y0) & np.isfinite(y1)))
        return int(np.sum(np.isfinite(self.y)))

    def marker_index(self, name) -> int:
        try:
            return self.markers.index(name)
        except ValueError:
            raise KeyError(f"marker {name!r} not present in study {self.study_id}") from None

    def paired_arrays(self):
        """Return ``(subject_ids, y0, y1, s0, s1)`` aligned by subject."""
        if self.design != PAIRED:
            raise ValueError(f"study {self.study_id} is not paired")
        ids = self.subject_ids
        pos = {sid: i for i, sid in enumerate(ids)}
        idx = np.fromiter((pos[sid] for sid in self.subjects), dtype=np.intp, count=len(self.subjects))
        pre = self.arm == 0
        n, j = len(ids), self.n_markers
        y0, y1 = np.full(n, np.nan), np.full(n, np.nan)
        s0, s1 = np.full((n, j), np.nan), np.full((n, j), np.nan)
        y0[idx[pre]] = self.y[pre]
        y1[idx[~pre]] = self.y[~pre]
        s0[idx[pre]] = self.s[pre]
        s1[idx[~pre]] = self.s[~pre]
        return ids, y0, y1, s0, s1

    def arm_arrays(self):
        """Return ``(y_t, s_t, y_c, s_c)`` for a two-arm study."""
        if self.design != TWO_ARM:
            raise ValueError(f"study {self.study_id} is not two-arm")
        t = self.arm == 1
        return self.y[t], self.s[t], self.y[~t], self.s[~t]

    def records(self) -> Iterator[SubjectRecord]:
        for i in range(len(self.y)):
            yield SubjectRecord(str(self.subjects[i]), int(self.arm[i]), float(self.y[i]), self.s[i].copy())

    # ------------------------------------------------------------ transforms

    def select_subjects(self, subject_ids) -> "StudyDataset":
        keep = np.isin(self.subjects, list(subject_ids))
        return StudyDataset(
            self.study_id, self.design, self.subjects[keep], self.arm[keep],
            self.y[keep], self.s[keep], self.markers,
        )

    def with_markers(self, markers, s) -> "StudyDataset":
        return StudyDataset(self.study_id, self.design, self.subjects, self.arm, self.y, s, markers)

    def with_y(self, y) -> "StudyDataset":
        return StudyDataset(self.study_id, self.design, self.subjects, self.arm, y, self.s, self.markers)

    def add_marker(self, name, values) -> "StudyDataset":
        if name in self.markers:
            raise IntegrityError(f"marker {name!r} already present")
        values = np.asarray(values, dtype=float).reshape(-1, 1)
        return self.with_markers(self.markers + (name,), np.hstack([self.s, values]))

    def __eq__(self, other):
        if not isinstance(other, StudyDataset):
            return NotImplemented
        return (
            self.study_id == other.study_id
            and self.design == other.design
            and self.markers == other.markers
            and np.array_equal(self.subjects, other.subjects)
            and np.array_equal(self.arm, other.arm)
            and np.array_equal(self.y, other.y, equal_nan=True)
            and np.array_equal(self.s, other.s, equal_nan=True)
        )

    __hash__ = None


# ----------------------------------------------------------------- CSV I/O


@dataclass(frozen=True)
class ColumnMapping:
    """Names of the CSV columns; ``markers=None`` means every remaining column."""

    study: str = "study"
    subject: str = "subject"
    arm: str = "arm"
    y: str = "y"
    markers: Sequence[str] | None = None
    design: str = "auto"


def _to_float(values, column, *, row_offset=0):
    out = np.empty(len(values))
    for i, raw in enumerate(values):
        tok = raw.strip()
        if tok in MISSING_TOKENS:
            out[i] = np.nan
            continue
        try:
            out[i] = float(tok)
        except ValueError:
            raise DataParseError(
                f"non-numeric value {raw!r} in column {column!r} at row {i + row_offset}"
            ) from None
        if not math.isfinite(out[i]):
            raise DataParseError(f"non-finite value {raw!r} in column {column!r} at row {i + row_offset}")
    return out


def parse_study_frame(frame: pd.DataFrame, schema: ColumnMapping = ColumnMapping()) -> list[StudyDataset]:
    """Group a long-format table of strings into validated :class:`StudyDataset` objects.

    Row indices in error messages are 0-based data rows.
    """
    frame = frame.astype(str)
    required = [schema.study, schema.subject, schema.arm, schema.y]
    for col in required:
        if col not in frame.columns:
            raise SchemaError(f"missing required column {col!r}")
    if schema.markers is None:
        markers = [c for c in frame.columns if c not in required]
    else:
        markers = list(schema.markers)
        for col in markers:
            if col not in frame.columns:
                raise SchemaError(f"missing marker column {col!r}")
    if not markers:
        raise SchemaError("no marker columns found")

    arm_raw = frame[schema.arm].str.strip()
    bad = ~arm_raw.isin(["0", "1"])
    if bad.any():
        i = int(np.flatnonzero(bad.to_numpy())[0])
        raise DataParseError(f"arm value {frame[schema.arm].iloc[i]!r} at row {i} is not 0 or 1")
    arm = arm_raw.astype(int).to_numpy()
    y = _to_float(frame[schema.y].tolist(), schema.y)
    s = np.column_stack([_to_float(frame[c].tolist(), c) for c in markers])
    study = frame[schema.study].str.strip().to_numpy()
    subject = frame[schema.subject].str.strip().to_numpy()

    keys = pd.DataFrame({"study": study, "subject": subject, "arm": arm})
    dup = keys.duplicated()
    if dup.any():
        i = int(np.flatnonzero(dup.to_numpy())[0])
        raise IntegrityError(
            f"duplicate (study, subject, arm) key ({study[i]}, {subject[i]}, {arm[i]}) at row {i}"
        )

    out = []
    for sid in dict.fromkeys(study):
        rows = np.flatnonzero(study == sid)
        subj, a = subject[rows], arm[rows]
        design = schema.design
        if design == "auto":
            design = PAIRED if pd.Series(subj).duplicated().any() else TWO_ARM
        yy, ss = y[rows], s[rows]
        if design == PAIRED:
            subj, a, yy, ss = _pad_paired(subj, a, yy, ss)
        out.append(StudyDataset(str(sid), design, subj, a, yy, ss, tuple(markers)))
    return out


def _pad_paired(subj, arm, y, s):
    """Add fully-masked records for paired subjects seen at only one timepoint."""
    counts = pd.Series(subj).value_counts()
    lonely = [x for x in dict.fromkeys(subj) if counts[x] == 1]
    if not lonely:
        return subj, arm, y, s
    logger.warning("%d paired subject(s) have a single timepoint; the other is treated as missing", len(lonely))
    extra_arm = np.array([1 - arm[np.flatnonzero(subj == x)[0]] for x in lonely])
    return (
        np.concatenate([subj, np.array(lonely, dtype=object)]),
        np.concatenate([arm, extra_arm]),
        np.concatenate([y, np.full(len(lonely), np.nan)]),
        np.vstack([s, np.full((len(lonely), s.shape[1]), np.nan)]),
    )


def parse_study_csv(path, schema: ColumnMapping = ColumnMapping()) -> list[StudyDataset]:
    """Read a long-format CSV (``study,subject,arm,y,<markers...>``)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    frame = pd.read_csv(path, dtype=str, keep_default_na=False, na_filter=False, encoding="utf-8")
    return parse_study_frame(frame, schema)


def _fmt(x: float) -> str:
    return "NA" if np.isnan(x) else repr(float(x))


def write_study_csv(data: Sequence[StudyDataset], path) -> None:
    """Write studies in the same long format :func:`parse_study_csv` reads."""
    if not data:
        raise ValueError("nothing to write")
    markers = data[0].markers
    for d in data:
        if d.markers != markers:
            raise IntegrityError("all studies must share the same marker list to be written together")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["study", "subject", "arm", "y", *markers])
        for d in data:
            for i in range(len(d.y)):
                w.writerow([d.study_id, d.subjects[i], int(d.arm[i]), _fmt(d.y[i]), *map(_fmt, d.s[i])])


# ----------------------------------------------------------- study filters


def filter_studies(data: Sequence[StudyDataset], min_n: int) -> list[StudyDataset]:
    """Keep studies with at least ``min_n`` complete-case subjects."""
    if min_n < 1:
        raise ValueError("min_n must be >= 1")
    kept = []
    for d in data:
        n = d.n_complete()
        if n >= min_n:
            kept.append(d)
        else:
            logger.warning("dropping study %s: %d complete subjects < %d", d.study_id, n, min_n)
    if not kept:
        raise NoStudiesError("no studies remain after filtering")
    return kept


# ------------------------------------------------------------------ genesets


def read_geneset_catalog(path) -> dict[str, list[str]]:
    """Read a two-column ``geneset,member`` CSV into an ordered mapping."""
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    for col in ("geneset", "member"):
        if col not in frame.columns:
            raise SchemaError(f"geneset catalog missing column {col!r}")
    catalog: dict[str, list[str]] = {}
    for name, member in zip(frame["geneset"].str.strip(), frame["member"].str.strip()):
        members = catalog.setdefault(name, [])
        if member and member not in members:
            members.append(member)
    return catalog


def intersect_catalog(catalog: Mapping[str, Sequence[str]], features) -> tuple[dict, list]:
    """Restrict genesets to available ``features``; return ``(kept, dropped_names)``."""
    available = set(features)
    kept, dropped = {}, []
    for name, members in catalog.items():
        present = [m for m in members if m in available]
        if present:
            kept[name] = present
        else:
            dropped.append(name)
    return kept, dropped


def aggregate_genesets(data: StudyDataset, catalog: Mapping[str, Sequence[str]]) -> StudyDataset:
    """Replace gene-level markers by the mean of each geneset's members.

    Masked members are left out of the mean; a record with every member masked
    gets a masked geneset value.
    """
    kept, dropped = intersect_catalog(catalog, data.markers)
    if dropped:
        logger.warning("dropping %d geneset(s) with no available members: %s", len(dropped), ", ".join(dropped))
    if not kept:
        raise IntegrityError("no geneset shares a member with the available features")
    cols = []
    for members in kept.values():
        block = data.s[:, [data.marker_index(m) for m in members]]
        n_obs = np.sum(~np.isnan(block), axis=1)
        total = np.nansum(block, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            cols.append(np.where(n_obs > 0, total / np.maximum(n_obs, 1), np.nan))
    return data.with_markers(tuple(kept), np.column_stack(cols))


# ----------------------------------------------------------------- splitting


def split_sizes(n: int, fraction: float) -> tuple[int, int]:
    """Screening/evaluation sizes: nearest integer to ``fraction * n`` for screening."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    k = int(math.floor(fraction * n + 0.5))
    return k, n - k


def split_within_study(data: StudyDataset, fraction: float, seed) -> tuple[StudyDataset, StudyDataset]:
    """Partition subjects into a screening part and an evaluation part.

    Subjects are drawn uniformly without replacement; both records of a paired
    subject always land in the same part.
    """
    ids = data.subject_ids
    k, rest = split_sizes(len(ids), fraction)
    if k < 2 or rest < 2:
        raise InsufficientDataError(
            f"study {data.study_id}: fraction {fraction} splits {len(ids)} subjects into "
            f"{k} and {rest}; each part needs at least 2, choose a different fraction"
        )
    rng = check_random_state(seed)
    chosen = np.sort(rng.choice(len(ids), size=k, replace=False))
    screen_ids = [ids[i] for i in chosen]
    mask = np.zeros(len(ids), dtype=bool)
    mask[chosen] = True
    eval_ids = [sid for sid, m in zip(ids, mask) if not m]
    return data.select_subjects(screen_ids), data.select_subjects(eval_ids)


def study_seed(seed: int, study_id: str) -> np.random.Generator:
    """Generator keyed on both the run seed and the study id (order independent)."""
    return np.random.default_rng([int(seed), zlib.crc32(study_id.encode("utf-8"))])


def split_studies(data: Sequence[StudyDataset], fraction: float, seed: int):
    """Apply :func:`split_within_study` to every study; returns two lists."""
    screen, holdout = [], []
    for d in data:
        a, b = split_within_study(d, fraction, study_seed(seed, d.study_id))
        screen.append(a)
        holdout.append(b)
    return screen, holdout

"""Patient cohorts: code sequences, demographics and zip-level location features.

File formats (all UTF-8):

* EHR: JSON lines ``{"patient_id", "codes", "label", "zip"}``
* demographics: CSV ``patient_id,age,gender,zip``
* location: CSV ``zip,<feature_1>,...,<feature_M>``
* vocabulary: CSV ``code,id``
"""

from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import brentq

logger = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1
N_ZIP_BUCKETS = 64
GENDERS = ("F", "M")
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.64, 0.16, 0.20)

EHR_FILE = "ehr.jsonl"
DEMOGRAPHICS_FILE = "demographics.csv"
LOCATION_FILE = "location.csv"
VOCAB_FILE = "vocab.csv"
PLANTED_FILE = "planted.json"


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class MedicalCodeSequence:
    patient_id: str
    codes: tuple[int, ...]
    label: int


@dataclass(frozen=True, eq=False)
class TabularFeatures:
    patient_id: str
    demographics: np.ndarray
    location: np.ndarray


class Vocabulary:
    """Code string to token ID map; 0 is padding and 1 is the unknown token."""

    def __init__(self, code_to_id: dict[str, int]):
        ids = sorted(code_to_id.values())
        if ids != list(range(2, 2 + len(ids))):
            raise DataError("vocabulary IDs must be contiguous from 2")
        self.code_to_id = dict(code_to_id)
        self.id_to_code = {v: k for k, v in code_to_id.items()}

    @classmethod
    def from_codes(cls, codes: Iterable[str]) -> "Vocabulary":
        return cls({c: i + 2 for i, c in enumerate(sorted(set(codes)))})

    def __len__(self) -> int:
        return len(self.code_to_id) + 2

    def __contains__(self, code: str) -> bool:
        return code in self.code_to_id

    def lookup(self, code: str) -> int:
        return self.code_to_id.get(code, UNK_ID)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["code", "id"])
            for code, idx in sorted(self.code_to_id.items(), key=lambda kv: kv[1]):
                w.writerow([code, idx])

    @classmethod
    def load(cls, path) -> "Vocabulary":
        mapping: dict[str, int] = {}
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["code", "id"]:
                raise DataError(f"{path}:1: expected header code,id")
            for lineno, row in enumerate(reader, start=2):
                if len(row) != 2:
                    raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
                try:
                    mapping[row[0]] = int(row[1])
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: bad id {row[1]!r}") from exc
        return cls(mapping)


def pad_or_truncate(ids: Sequence[int], max_len: int) -> list[int]:
    """Keep the most recent ``max_len`` IDs and right-pad with :data:`PAD_ID`."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    ids = list(ids)[-max_len:]
    return ids + [PAD_ID] * (max_len - len(ids))


def tokenize(raw_codes: Sequence[str], vocab: Vocabulary, max_len: int) -> list[int]:
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    if len(raw_codes) == 0:
        raise DataError("empty code sequence")
    return pad_or_truncate([vocab.lookup(c) for c in raw_codes], max_len)


def zip_bucket(zip_code: str, n_buckets: int = N_ZIP_BUCKETS) -> int:
    return zlib.crc32(zip_code.encode("utf-8")) % n_buckets


def demographics_vector(age: float, gender: str, zip_code: str, n_buckets: int = N_ZIP_BUCKETS) -> np.ndarray:
    """``[age, gender one-hot (F, M), hashed zip one-hot]``."""
    if gender not in GENDERS:
        raise DataError(f"unknown gender {gender!r}")
    vec = np.zeros(1 + len(GENDERS) + n_buckets)
    vec[0] = age
    vec[1 + GENDERS.index(gender)] = 1.0
    vec[1 + len(GENDERS) + zip_bucket(zip_code, n_buckets)] = 1.0
    return vec


@dataclass
class PatientBatch:
    patient_ids: list[str]
    tokens: np.ndarray
    demographics: np.ndarray
    location: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.patient_ids)


@dataclass
class Cohort:
    """Aligned per-patient modalities plus an optional split assignment."""

    sequences: list[MedicalCodeSequence]
    features: list[TabularFeatures]
    vocab: Vocabulary
    zips: list[str]
    location_names: list[str]
    split: np.ndarray | None = None
    planted_noise: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self):
        if len(self.sequences) != len(self.features) or len(self.sequences) != len(self.zips):
            raise DataError("modalities are not aligned")
        for s, f in zip(self.sequences, self.features):
            if s.patient_id != f.patient_id:
                raise DataError(f"patient alignment broken at {s.patient_id!r} / {f.patient_id!r}")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def patient_ids(self) -> list[str]:
        return [s.patient_id for s in self.sequences]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.sequences], dtype=int)

    @property
    def demographics_dim(self) -> int:
        return int(self.features[0].demographics.size)

    @property
    def location_dim(self) -> int:
        return int(self.features[0].location.size)

    def indices(self, name: str) -> np.ndarray:
        if self.split is None:
            raise DataError("cohort has no split assignment")
        return np.nonzero(self.split == name)[0]

    def batch(self, indices: Sequence[int], max_len: int) -> PatientBatch:
        idx = list(np.asarray(indices, dtype=int))
        return PatientBatch(
            patient_ids=[self.sequences[i].patient_id for i in idx],
            tokens=np.array([pad_or_truncate(self.sequences[i].codes, max_len) for i in idx], dtype=np.int64).reshape(len(idx), max_len),
            demographics=np.array([self.features[i].demographics for i in idx]).reshape(len(idx), -1),
            location=np.array([self.features[i].location for i in idx]).reshape(len(idx), -1),
            labels=np.array([self.sequences[i].label for i in idx], dtype=int),
        )


# -- loading -----------------------------------------------------------------


def _read_csv(path, expected_first: Sequence[str]) -> tuple[list[str], list[tuple[int, list[str]]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[: len(expected_first)] != list(expected_first):
            raise DataError(f"{path}:1: header must start with {','.join(expected_first)}")
        rows = [(lineno, row) for lineno, row in enumerate(reader, start=2) if row]
    return header, rows


def load_cohort(ehr_path, demo_path, loc_path, vocab_path=None, n_zip_buckets: int = N_ZIP_BUCKETS) -> Cohort:
    """Join the three modality files per patient.

    Patients whose zip has no location row get the column mean of the
    location table (with a logged warning). Without ``vocab_path`` the
    vocabulary is built from the codes seen in the EHR file.
    """
    records = []
    seen: set[str] = set()
    with open(ehr_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                pid, codes, label, zip_code = str(obj["patient_id"]), obj["codes"], int(obj["label"]), str(obj["zip"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{ehr_path}:{lineno}: malformed EHR record ({exc})") from exc
            if label not in (0, 1):
                raise DataError(f"{ehr_path}:{lineno}: label must be 0 or 1")
            if not isinstance(codes, list) or not codes:
                raise DataError(f"{ehr_path}:{lineno}: empty code sequence")
            if pid in seen:
                raise DataError(f"{ehr_path}:{lineno}: duplicate patient_id {pid!r}")
            seen.add(pid)
            records.append((pid, [str(c) for c in codes], label, zip_code))
    if not records:
        raise DataError(f"{ehr_path}: no patients")

    vocab = Vocabulary.load(vocab_path) if vocab_path else Vocabulary.from_codes(c for r in records for c in r[1])

    _, demo_rows = _read_csv(demo_path, ["patient_id", "age", "gender", "zip"])
    demographics: dict[str, tuple[float, str, str]] = {}
    for lineno, row in demo_rows:
        if len(row) != 4:
            raise DataError(f"{demo_path}:{lineno}: expected 4 fields, got {len(row)}")
        try:
            age = float(row[1])
        except ValueError as exc:
            raise DataError(f"{demo_path}:{lineno}: bad age {row[1]!r}") from exc
        if not math.isfinite(age) or row[2] not in GENDERS:
            raise DataError(f"{demo_path}:{lineno}: malformed demographics row")
        if row[0] in demographics:
            raise DataError(f"{demo_path}:{lineno}: duplicate patient_id {row[0]!r}")
        demographics[row[0]] = (age, row[2], row[3])

    header, loc_rows = _read_csv(loc_path, ["zip"])
    names = header[1:]
    table: dict[str, np.ndarray] = {}
    for lineno, row in loc_rows:
        if len(row) != len(header):
            raise DataError(f"{loc_path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            values = np.array([float(x) for x in row[1:]])
        except ValueError as exc:
            raise DataError(f"{loc_path}:{lineno}: non-numeric location feature") from exc
        if not np.isfinite(values).all():
            raise DataError(f"{loc_path}:{lineno}: non-finite location feature")
        if row[0] in table:
            raise DataError(f"{loc_path}:{lineno}: duplicate zip {row[0]!r}")
        table[row[0]] = values
    if not table:
        raise DataError(f"{loc_path}: no location rows")
    fallback = np.mean(np.stack(list(table.values())), axis=0)

    sequences, features, zips = [], [], []
    for pid, codes, label, zip_code in records:
        if pid not in demographics:
            raise DataError(f"{demo_path}: no demographics for patient {pid!r}")
        age, gender, demo_zip = demographics[pid]
        if demo_zip != zip_code:
            raise DataError(f"zip mismatch for patient {pid!r}: {zip_code!r} vs {demo_zip!r}")
        loc = table.get(zip_code)
        if loc is None:
            logger.warning("no location row for zip %s (patient %s); using column means", zip_code, pid)
            loc = fallback
        sequences.append(MedicalCodeSequence(pid, tuple(vocab.lookup(c) for c in codes), label))
        features.append(TabularFeatures(pid, demographics_vector(age, gender, zip_code, n_zip_buckets), loc))
        zips.append(zip_code)

    planted = Path(ehr_path).with_name(PLANTED_FILE)
    noise = frozenset(json.loads(planted.read_text())["noise_patients"]) if planted.exists() else frozenset()
    return Cohort(sequences, features, vocab, zips, names, planted_noise=noise)


def load_cohort_dir(data_dir, n_zip_buckets: int = N_ZIP_BUCKETS) -> Cohort:
    d = Path(data_dir)
    vocab = d / VOCAB_FILE
    return load_cohort(d / EHR_FILE, d / DEMOGRAPHICS_FILE, d / LOCATION_FILE, vocab if vocab.exists() else None, n_zip_buckets)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_cohort(cohort: Cohort, out_dir, ages: Sequence[float], genders: Sequence[str], signal: dict | None = None) -> None:
    """Write the four interface files (plus the planted-signal sidecar)."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    cohort.vocab.save(d / VOCAB_FILE)
    with open(d / EHR_FILE, "w", encoding="utf-8") as fh:
        for seq, z in zip(cohort.sequences, cohort.zips):
            codes = [cohort.vocab.id_to_code[i] for i in seq.codes]
            fh.write(json.dumps({"patient_id": seq.patient_id, "codes": codes, "label": seq.label, "zip": z}) + "\n")
    with open(d / DEMOGRAPHICS_FILE, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["patient_id", "age", "gender", "zip"])
        for seq, z, age, g in zip(cohort.sequences, cohort.zips, ages, genders):
            w.writerow([seq.patient_id, _fmt(age), g, z])
    with open(d / LOCATION_FILE, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["zip", *cohort.location_names])
        written: set[str] = set()
        for f, z in zip(cohort.features, cohort.zips):
            if z not in written:
                written.add(z)
                w.writerow([z, *(_fmt(x) for x in f.location)])
    sidecar = {"noise_patients": sorted(cohort.planted_noise), "signal": signal or {}}
    (d / PLANTED_FILE).write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# -- synthetic cohorts -------------------------------------------------------


@dataclass(frozen=True)
class SignalSpec:
    """Coefficients of the planted labelling rule.

    A regular patient is positive with probability
    ``sigmoid(risk_weight * (risk_count - max_risk_count / 2)
    + location_weight * g + age_weight * age_z + intercept + N(0, logit_noise^2))``
    where ``g`` is the designated location feature (``feature_01``) of the
    patient's zip and ``age_z = (age - 55) / 20``. The intercept is solved so
    the expected positive fraction equals ``positive_rate``.

    A ``noise_fraction`` of patients are label-noise plants. They live in a
    reserved set of zips whose designated feature is chosen, together with
    their fixed risk count, so that the rule including the intercept is
    close to zero. Their label is an
    independent ``Bernoulli(positive_rate)`` draw. Regular patients never
    share those zips.
    """

    risk_weight: float = 8.0
    location_weight: float = 20.0
    age_weight: float = 0.5
    logit_noise: float = 0.3
    n_risk_codes: int = 8
    max_risk_count: int = 8
    noise_fraction: float = 0.1
    seq_len_min: int = 20
    seq_len_max: int = 20


def generate_synthetic(
    n_patients: int,
    vocab_size: int,
    n_locations: int,
    positive_rate: float,
    seed: int,
    signal: SignalSpec | None = None,
    n_location_features: int = 34,
    out_dir=None,
) -> Cohort:
    """Sample a cohort whose labels follow the rule documented on :class:`SignalSpec`."""
    if not 0.0 < positive_rate < 1.0:
        raise ValueError("positive_rate must lie in (0, 1)")
    if vocab_size <= 10:
        raise ValueError("vocab_size must exceed 10")
    spec = signal or SignalSpec()
    rng = np.random.default_rng(seed)
    n_codes = vocab_size - 2
    code_names = [f"D{i:05d}" for i in range(n_codes)]
    vocab = Vocabulary({c: i + 2 for i, c in enumerate(code_names)})
    code_ids = np.arange(2, vocab_size)
    risk_ids = np.sort(rng.choice(code_ids, size=spec.n_risk_codes, replace=False))
    plain_ids = np.setdiff1d(code_ids, risk_ids)

    zips = [f"{10000 + 37 * k:05d}" for k in range(n_locations)]
    names = [f"feature_{j + 1:02d}" for j in range(n_location_features)]
    loc_table = rng.normal(size=(n_locations, n_location_features))
    signs = np.where(rng.permutation(n_locations) % 2 == 0, 1.0, -1.0)
    loc_table[:, 0] = signs + rng.normal(scale=0.1, size=n_locations)

    noise = rng.random(n_patients) < spec.noise_fraction
    regular = ~noise
    n_noise_zips = min(n_locations - 1, max(1, round(spec.noise_fraction * n_locations))) if spec.noise_fraction > 0 else 0
    noise_zips = rng.permutation(n_locations)[:n_noise_zips]
    regular_zips = np.setdiff1d(np.arange(n_locations), noise_zips)
    zip_idx = regular_zips[rng.integers(0, regular_zips.size, size=n_patients)]
    if n_noise_zips:
        zip_idx = np.where(noise, noise_zips[rng.integers(0, n_noise_zips, size=n_patients)], zip_idx)
    ages = rng.integers(20, 91, size=n_patients).astype(float)
    genders = [GENDERS[g] for g in rng.integers(0, 2, size=n_patients)]
    age_z = (ages - 55.0) / 20.0
    center = spec.max_risk_count / 2.0
    risk = rng.integers(0, spec.max_risk_count + 1, size=n_patients)
    jitter = rng.normal(scale=spec.logit_noise, size=n_patients)

    def rule(risk_count, g):
        return spec.risk_weight * (risk_count - center) + spec.location_weight * g + spec.age_weight * age_z + jitter

    logit = rule(risk, loc_table[zip_idx, 0])
    if regular.any():
        intercept = brentq(lambda b: np.mean(1.0 / (1.0 + np.exp(-(logit[regular] + b)))) - positive_rate, -50, 50)
    else:
        intercept = 0.0
    if n_noise_zips:
        # noise plants sit where the rule (intercept included) is close to zero
        r_cancel = center - intercept / spec.risk_weight if spec.risk_weight else center
        r_noise = int(np.clip(np.rint(r_cancel), 0, spec.max_risk_count))
        residual = intercept + spec.risk_weight * (r_noise - center)
        g_noise = -residual / spec.location_weight if spec.location_weight else 0.0
        loc_table[noise_zips, 0] = g_noise + rng.normal(scale=0.05, size=n_noise_zips)
        risk = np.where(noise, r_noise, risk)
    lengths = rng.integers(spec.seq_len_min, spec.seq_len_max + 1, size=n_patients)
    lengths = np.maximum(lengths, risk + 1)
    prob = np.where(noise, positive_rate, 1.0 / (1.0 + np.exp(-(logit + intercept))))
    labels = (rng.random(n_patients) < prob).astype(int)

    width = len(str(n_patients - 1))
    sequences, features, patient_zips = [], [], []
    for i in range(n_patients):
        codes = np.concatenate([rng.choice(risk_ids, size=risk[i]), rng.choice(plain_ids, size=lengths[i] - risk[i])])
        codes = rng.permutation(codes)
        pid = f"P{i:0{width}d}"
        z = zips[zip_idx[i]]
        sequences.append(MedicalCodeSequence(pid, tuple(int(c) for c in codes), int(labels[i])))
        features.append(TabularFeatures(pid, demographics_vector(ages[i], genders[i], z), loc_table[zip_idx[i]]))
        patient_zips.append(z)
    noise_ids = frozenset(sequences[i].patient_id for i in np.nonzero(noise)[0])
    cohort = Cohort(sequences, features, vocab, patient_zips, names, planted_noise=noise_ids)
    if out_dir is not None:
        signal_record = {
            **spec.__dict__,
            "intercept": float(intercept),
            "risk_codes": [vocab.id_to_code[int(i)] for i in risk_ids],
            "location_feature": names[0],
            "seed": seed,
            "positive_rate": positive_rate,
        }
        write_cohort(cohort, out_dir, ages, genders, signal_record)
    return cohort


# -- splitting ---------------------------------------------------------------


def _largest_remainder(total: int, ratios: Sequence[float]) -> np.ndarray:
    raw = np.asarray(ratios, dtype=float) * total
    counts = np.floor(raw + 1e-9).astype(int)
    order = np.argsort(-(raw - counts), kind="mergesort")
    for k in order[: total - counts.sum()]:
        counts[k] += 1
    return counts


def split(cohort: Cohort, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0) -> Cohort:
    """Stratified random train/val/test assignment with exact global sizes."""
    ratios = np.asarray(ratios, dtype=float)
    if ratios.size != len(SPLITS) or (ratios < 0).any() or not math.isclose(ratios.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("ratios must be three non-negative numbers summing to 1")
    n = len(cohort)
    sizes = _largest_remainder(n, ratios)
    if (sizes == 0).any():
        raise DataError(f"split sizes {sizes.tolist()} leave a split empty")
    labels = cohort.labels
    classes = [np.nonzero(labels == c)[0] for c in (0, 1)]
    quota = np.array([_largest_remainder(len(idx), ratios) for idx in classes])
    # repair per-class quotas so column sums hit the global sizes
    while (quota.sum(axis=0) != sizes).any():
        excess = int(np.argmax(quota.sum(axis=0) - sizes))
        deficit = int(np.argmin(quota.sum(axis=0) - sizes))
        cls = int(np.argmax(quota[:, excess]))
        quota[cls, excess] -= 1
        quota[cls, deficit] += 1
    rng = np.random.default_rng(seed)
    assignment = np.empty(n, dtype=object)
    for c, idx in enumerate(classes):
        perm = rng.permutation(idx)
        start = 0
        for k, name in enumerate(SPLITS):
            assignment[perm[start : start + quota[c, k]]] = name
            start += quota[c, k]
    return replace(cohort, split=assignment.astype(str))

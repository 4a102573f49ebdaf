"""BreakHis-style dataset model: records, manifests, balancing and splits."""

import math
import os
from collections import Counter, OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import BalanceError, IntegrityError, ParseError, SplitError

BENIGN = ("A", "F", "TA", "PT")
MALIGNANT = ("DC", "LC", "MC", "PC")
SUBCLASSES = BENIGN + MALIGNANT
MAGNIFICATIONS = (40, 100, 200, 400)
SUBCLASS_NAMES = {
    "A": "adenosis", "F": "fibroadenoma", "TA": "tubular adenoma", "PT": "phyllodes tumor",
    "DC": "ductal carcinoma", "LC": "lobular carcinoma", "MC": "mucinous carcinoma",
    "PC": "papillary carcinoma",
}

# images per (magnification, subclass) in the public corpus
CORPUS_COUNTS = {
    40: {"A": 114, "F": 253, "TA": 109, "PT": 149, "DC": 864, "LC": 156, "MC": 205, "PC": 145},
    100: {"A": 113, "F": 260, "TA": 121, "PT": 150, "DC": 903, "LC": 170, "MC": 222, "PC": 142},
    200: {"A": 111, "F": 264, "TA": 108, "PT": 140, "DC": 896, "LC": 163, "MC": 196, "PC": 135},
    400: {"A": 106, "F": 237, "TA": 115, "PT": 130, "DC": 788, "LC": 137, "MC": 169, "PC": 138},
}


def main_class_of(subclass):
    if subclass in BENIGN:
        return "benign"
    if subclass in MALIGNANT:
        return "malignant"
    raise IntegrityError(f"unknown subclass {subclass!r}")


def parse_magnification(token):
    text = str(token).strip().upper().removesuffix("X")
    try:
        mag = int(text)
    except ValueError:
        raise ValueError(f"unknown magnification {token!r}") from None
    if mag not in MAGNIFICATIONS:
        raise ValueError(f"unknown magnification {token!r}")
    return mag


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    path: str
    subclass: str
    magnification: int
    patient_id: str
    main_class: str = None

    def __post_init__(self):
        if self.subclass not in SUBCLASSES:
            raise IntegrityError(f"{self.sample_id}: unknown subclass {self.subclass!r}")
        if self.magnification not in MAGNIFICATIONS:
            raise IntegrityError(f"{self.sample_id}: unknown magnification {self.magnification!r}")
        derived = main_class_of(self.subclass)
        if self.main_class is None:
            object.__setattr__(self, "main_class", derived)
        elif self.main_class != derived:
            raise IntegrityError(
                f"{self.sample_id}: subclass {self.subclass} is {derived}, not {self.main_class}")

    @property
    def label(self):
        return SUBCLASSES.index(self.subclass)

    def to_line(self):
        return f"{self.sample_id}|{self.path}|{self.subclass}|{self.magnification}|{self.patient_id}"


class DatasetManifest:
    """Immutable collection of records with a cached (subclass, magnification) histogram."""

    def __init__(self, records=(), root=None):
        self.records = tuple(records)
        self.root = root
        self._index = {}
        for pos, rec in enumerate(self.records):
            if rec.sample_id in self._index:
                raise IntegrityError(f"duplicate sample id {rec.sample_id!r}")
            self._index[rec.sample_id] = pos
        self.counts = Counter((r.subclass, r.magnification) for r in self.records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, sample_id):
        return self.records[self._index[sample_id]]

    def __contains__(self, sample_id):
        return sample_id in self._index

    def __eq__(self, other):
        return isinstance(other, DatasetManifest) and self.records == other.records

    @property
    def ids(self):
        return [r.sample_id for r in self.records]

    @property
    def labels(self):
        return np.array([r.label for r in self.records], dtype=np.int64)

    def count(self, subclass=None, magnification=None):
        return sum(n for (s, m), n in self.counts.items()
                   if (subclass is None or s == subclass) and (magnification is None or m == magnification))

    def table(self):
        """Counts as an array (magnification rows x subclass columns)."""
        return np.array([[self.counts.get((s, m), 0) for s in SUBCLASSES] for m in MAGNIFICATIONS])

    def subset(self, ids):
        keep = set(ids)
        missing = keep - set(self._index)
        if missing:
            raise IntegrityError(f"unknown sample ids: {sorted(missing)[:5]}")
        return DatasetManifest([r for r in self.records if r.sample_id in keep], root=self.root)

    def filter(self, subclasses=None, magnifications=None):
        return DatasetManifest(
            [r for r in self.records
             if (subclasses is None or r.subclass in subclasses)
             and (magnifications is None or r.magnification in magnifications)],
            root=self.root)

    def resolve(self, record):
        if os.path.isabs(record.path) or self.root is None:
            return record.path
        return os.path.join(self.root, record.path)


def load_manifest(path):
    """Parse ``sample_id|path|subclass|magnification|patient_id`` lines."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split("|")]
            if len(parts) != 5:
                raise ParseError(f"expected 5 '|'-separated fields, got {len(parts)}", line=lineno)
            sample_id, img_path, subclass, mag, patient = parts
            if subclass not in SUBCLASSES:
                raise ParseError(f"unknown subclass {subclass!r}", line=lineno)
            try:
                magnification = parse_magnification(mag)
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno) from None
            records.append(SampleRecord(sample_id, img_path, subclass, magnification, patient))
    return DatasetManifest(records, root=os.path.dirname(os.path.abspath(path)))


def save_manifest(manifest, path):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest:
            fh.write(rec.to_line() + "\n")
    return path


def corpus_manifest(patients_per_subclass=None):
    """Placeholder records laid out exactly like the public corpus counts."""
    # 82 patients in total; the per-subclass patient split below is illustrative only
    patients_per_subclass = patients_per_subclass or {
        "A": 4, "F": 10, "TA": 7, "PT": 3, "DC": 38, "LC": 5, "MC": 9, "PC": 6}
    records = []
    for mag in MAGNIFICATIONS:
        for sub in SUBCLASSES:
            n_pat = patients_per_subclass[sub]
            for i in range(CORPUS_COUNTS[mag][sub]):
                sid = f"{sub}-{mag}-{i:04d}"
                records.append(SampleRecord(sid, f"images/{sid}.ppm", sub, mag, f"{sub}-P{i % n_pat:02d}"))
    return DatasetManifest(records)


# -- balancing --------------------------------------------------------------

SCOPES = ("independent", "dependent")


def balance_indices(labels, groups=None, seed=0, group_names=None, label_names=None):
    """Indices that undersample every label to the smallest label count within each group.

    Labels present anywhere must be present in every group. Groups are
    visited in sorted order and labels in sorted order, so the result
    depends only on the inputs' order and ``seed``.
    """
    labels = np.asarray(labels)
    if labels.size == 0:
        raise BalanceError("cannot balance an empty dataset")
    groups = np.zeros(len(labels), dtype=int) if groups is None else np.asarray(groups)
    present = np.unique(labels)
    rng = np.random.default_rng(seed)
    keep = []
    for g in np.unique(groups):
        in_group = groups == g
        members = {lbl: np.flatnonzero(in_group & (labels == lbl)) for lbl in present}
        empty = [label_names(lbl) if label_names else str(lbl)
                 for lbl, idx in members.items() if idx.size == 0]
        if empty:
            name = group_names(g) if group_names else g
            raise BalanceError(f"group {name}: no samples for {', '.join(empty)}")
        target = min(idx.size for idx in members.values())
        for lbl in present:
            idx = members[lbl]
            keep.append(idx[rng.choice(idx.size, size=target, replace=False)])
    return np.sort(np.concatenate(keep))


def undersample_balance(manifest, scope="independent", seed=0):
    """Randomly drop records so every subclass in a scope group matches the smallest.

    ``independent`` pools all magnifications into one group; ``dependent``
    balances each magnification separately. Sampling is uniform without
    replacement and depends only on the seed and the set of ids.
    """
    if scope not in SCOPES:
        raise BalanceError(f"scope must be one of {SCOPES}, got {scope!r}")
    if len(manifest) == 0:
        raise BalanceError("cannot balance an empty manifest")
    recs = sorted(manifest, key=lambda r: r.sample_id)
    labels = [r.label for r in recs]
    groups = [r.magnification for r in recs] if scope == "dependent" else None
    names = (lambda g: f"{g}X") if scope == "dependent" else (lambda g: "all magnifications")
    idx = balance_indices(labels, groups, seed, group_names=names, label_names=SUBCLASSES.__getitem__)
    return manifest.subset(recs[i].sample_id for i in idx)


# -- splitting --------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    train_ids: tuple
    test_ids: tuple
    seed: int
    stratify_by: tuple = ("subclass",)
    test_fraction: float = 0.2
    patient_level: bool = False
    strata: dict = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise SplitError("train and test sets overlap")


STRATA_KEYS = ("subclass", "magnification")


def round_half_up(x):
    return int(math.floor(x + 0.5))


def _stratum_key(record, stratify_by):
    return tuple(getattr(record, k) for k in stratify_by)


def make_split(manifest, test_fraction=0.2, stratify_by=("subclass",), seed=0, patient_level=False):
    """Seeded per-stratum train/test partition.

    Each stratum of size n contributes round(n * test_fraction) test samples,
    clamped to [1, n - 1]. ``patient_level`` keeps every patient entirely on
    one side (stratum fractions then hold only approximately).
    """
    if not 0.0 < test_fraction < 1.0:
        raise SplitError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    stratify_by = tuple(stratify_by)
    for key in stratify_by:
        if key not in STRATA_KEYS:
            raise SplitError(f"cannot stratify by {key!r}; choose from {STRATA_KEYS}")
    strata = OrderedDict()
    for rec in sorted(manifest, key=lambda r: (_stratum_key(r, stratify_by), r.sample_id)):
        strata.setdefault(_stratum_key(rec, stratify_by), []).append(rec)
    rng = np.random.default_rng(seed)
    train, test, sizes = [], [], {}
    for key, recs in strata.items():
        if len(recs) < 2:
            raise SplitError(f"stratum {key} has {len(recs)} sample(s); need at least 2")
        n_test = min(max(round_half_up(len(recs) * test_fraction), 1), len(recs) - 1)
        if patient_level:
            chosen = _patient_test_ids(recs, n_test, rng)
        else:
            order = rng.permutation(len(recs))
            chosen = {recs[i].sample_id for i in order[:n_test]}
        for rec in recs:
            (test if rec.sample_id in chosen else train).append(rec.sample_id)
        sizes[key] = (len(recs), len(chosen))
    order = {sid: i for i, sid in enumerate(manifest.ids)}
    train.sort(key=order.__getitem__)
    test.sort(key=order.__getitem__)
    return SplitPlan(tuple(train), tuple(test), seed, stratify_by, test_fraction, patient_level, sizes)


def _patient_test_ids(recs, n_test, rng):
    patients = sorted({r.patient_id for r in recs})
    if len(patients) < 2:
        raise SplitError(f"patient-level split needs >= 2 patients per stratum, got {patients}")
    chosen = set()
    for idx in rng.permutation(len(patients)):
        if len(chosen) >= n_test:
            break
        members = [r.sample_id for r in recs if r.patient_id == patients[idx]]
        if len(chosen) + len(members) >= len(recs):
            continue
        chosen.update(members)
    if not chosen:
        raise SplitError("patient-level split could not place any patient in the test set")
    return chosen


def write_split(plan, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# seed={plan.seed} stratify={','.join(plan.stratify_by)} "
                 f"test_fraction={plan.test_fraction!r} patient_level={int(plan.patient_level)}\n")
        for sid in plan.train_ids:
            fh.write(f"train|{sid}\n")
        for sid in plan.test_ids:
            fh.write(f"test|{sid}\n")
    return path


def read_split(path):
    train, test, meta = [], [], {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                for item in line[1:].split():
                    if "=" in item:
                        k, v = item.split("=", 1)
                        meta[k] = v
                continue
            side, _, sid = line.partition("|")
            if side == "train":
                train.append(sid)
            elif side == "test":
                test.append(sid)
            else:
                raise ParseError(f"expected 'train|id' or 'test|id', got {line!r}", line=lineno)
    return SplitPlan(
        tuple(train), tuple(test),
        seed=int(meta.get("seed", 0)),
        stratify_by=tuple(meta.get("stratify", "subclass").split(",")),
        test_fraction=float(meta.get("test_fraction", 0.2)),
        patient_level=meta.get("patient_level", "0") == "1",
    )


def partition_by_magnification(manifest):
    """Four disjoint manifests keyed by magnification; absent ones are empty."""
    return OrderedDict((m, manifest.filter(magnifications=(m,))) for m in MAGNIFICATIONS)

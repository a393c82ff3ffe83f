"""Dataset manifest, subject-disjoint fold planning, featurization and batching."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .enhance import EnhanceParams, enhanced_pair
from .errors import ConfigError, FormatError
from .frst import FRSTParams, radial_symmetry_pair
from .imgcore import crop_center, load_image, pfm_bytes, resize_bilinear
from .metrics import COVID, NON_COVID
from .net.model import EARLY, FEATURES, FusionSpec
from .phasefilt import ASSDParams, local_phase_energy

SOURCE_LABELS = {"covid": COVID, "pneumonia": NON_COVID, "regular": NON_COVID}
LABEL_NAMES = {COVID: "COVID", NON_COVID: "NonCOVID"}
MANIFEST_COLUMNS = ("id", "image_path", "subject_id", "source_label")
_SAFE_ID = re.compile(r"^[A-Za-z0-9._-]+$")


@dataclass(frozen=True)
class Sample:
    id: str
    image_path: str
    subject_id: str
    source_label: str
    feature_paths: dict[str, str] = field(default_factory=dict, compare=False)
    feature_hashes: dict[str, str] = field(default_factory=dict, compare=False)

    @property
    def label(self) -> int:
        return SOURCE_LABELS[self.source_label]

    @property
    def label_name(self) -> str:
        return LABEL_NAMES[self.label]

    def to_dict(self) -> dict:
        return {"id": self.id, "image_path": self.image_path, "subject_id": self.subject_id,
                "source_label": self.source_label, "label": self.label_name,
                "feature_paths": dict(self.feature_paths), "feature_hashes": dict(self.feature_hashes)}

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        return cls(d["id"], d["image_path"], d["subject_id"], d["source_label"],
                   dict(d.get("feature_paths", {})), dict(d.get("feature_hashes", {})))


def build_manifest(root, mapping) -> list[Sample]:
    """Parse the mapping CSV; ``image_path`` entries are relative to ``root``."""
    root = Path(root)
    mapping = Path(mapping)
    if not mapping.is_file():
        raise FileNotFoundError(f"manifest CSV not found: {mapping}")
    with open(mapping, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise FormatError(f"{mapping}: missing columns {missing}; header must be {','.join(MANIFEST_COLUMNS)}")
        samples, seen = [], set()
        for lineno, row in enumerate(reader, start=2):
            sid = row["id"].strip()
            if not _SAFE_ID.match(sid):
                raise FormatError(f"{mapping}:{lineno}: id {sid!r} must match {_SAFE_ID.pattern}")
            if sid in seen:
                raise FormatError(f"{mapping}:{lineno}: duplicate sample id {sid!r}")
            seen.add(sid)
            label = row["source_label"].strip().lower()
            if label not in SOURCE_LABELS:
                raise FormatError(f"{mapping}:{lineno}: unknown source_label {row['source_label']!r}; "
                                  f"expected one of {sorted(SOURCE_LABELS)}")
            path = root / row["image_path"].strip()
            if not path.is_file():
                raise FileNotFoundError(f"{mapping}:{lineno}: image file not found: {path}")
            samples.append(Sample(sid, str(path), row["subject_id"].strip(), label))
    return samples


# --------------------------------------------------------------------------- #
# Cross-validation planning
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignments: dict[str, int]

    def test_subjects(self, fold: int) -> set[str]:
        return {s for s, f in self.assignments.items() if f == fold}

    def train_subjects(self, fold: int) -> set[str]:
        return {s for s, f in self.assignments.items() if f != fold}

    def split(self, samples: list[Sample], fold: int, split: str) -> list[Sample]:
        if not 0 <= fold < self.k:
            raise ConfigError(f"fold {fold} outside [0, {self.k})")
        if split not in ("train", "test"):
            raise ConfigError(f"split must be 'train' or 'test', got {split!r}")
        unknown = {s.subject_id for s in samples} - set(self.assignments)
        if unknown:
            raise ConfigError(f"subjects missing from the fold plan: {sorted(unknown)}")
        want_test = split == "test"
        return [s for s in samples if (self.assignments[s.subject_id] == fold) == want_test]

    def check_disjoint(self) -> None:
        for f in range(self.k):
            overlap = self.train_subjects(f) & self.test_subjects(f)
            if overlap:
                raise ConfigError(f"fold {f}: subjects in both train and test: {sorted(overlap)}")

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed, "assignments": dict(sorted(self.assignments.items()))}

    @classmethod
    def from_dict(cls, d: dict) -> "FoldPlan":
        return cls(int(d["k"]), int(d["seed"]), {str(s): int(f) for s, f in d["assignments"].items()})


def subject_kfold(samples: list[Sample], k: int = 5, seed: int = 0) -> FoldPlan:
    """Assign whole subjects to folds.

    Subjects are shuffled with ``seed`` and each goes to the fold currently
    holding the fewest samples of that subject's classes (ties: fewest samples
    overall, fewest subjects, lowest index).
    """
    per_subject: dict[str, np.ndarray] = {}
    for s in samples:
        per_subject.setdefault(s.subject_id, np.zeros(2, dtype=np.int64))[s.label] += 1
    subjects = sorted(per_subject)
    if k < 2:
        raise ConfigError(f"need at least 2 folds, got {k}")
    if len(subjects) < k:
        raise ConfigError(f"only {len(subjects)} distinct subjects for {k} folds")
    order = np.random.default_rng(seed).permutation(len(subjects))
    fold_counts = np.zeros((k, 2), dtype=np.int64)
    fold_subjects = np.zeros(k, dtype=np.int64)
    assignments = {}
    for idx in order:
        subj = subjects[idx]
        counts = per_subject[subj]
        keys = [(int(fold_counts[f] @ counts), int(fold_counts[f].sum()), int(fold_subjects[f]), f)
                for f in range(k)]
        f = min(keys)[3]
        assignments[subj] = f
        fold_counts[f] += counts
        fold_subjects[f] += 1
    plan = FoldPlan(k, seed, assignments)
    plan.check_disjoint()
    return plan


def class_balance_report(plan: FoldPlan, samples: list[Sample]) -> list[dict]:
    """Per fold: deviation of the COVID share from the global share, and the
    largest single-subject sample share within the fold."""
    labels = np.array([s.label for s in samples])
    global_share = labels.mean() if labels.size else 0.0
    out = []
    for f in range(plan.k):
        members = [s for s in samples if plan.assignments[s.subject_id] == f]
        share = np.mean([s.label for s in members]) if members else 0.0
        per_subj: dict[str, int] = {}
        for s in members:
            per_subj[s.subject_id] = per_subj.get(s.subject_id, 0) + 1
        largest = max(per_subj.values()) / len(members) if members else 0.0
        out.append({"fold": f, "gap": abs(float(share) - float(global_share)), "bound": float(largest)})
    return out


# --------------------------------------------------------------------------- #
# Featurization
# --------------------------------------------------------------------------- #

@dataclass(frozen=True)
class PipelineConfig:
    crop_side: int = 334
    crop_offset: tuple[int, int] | None = None
    out_side: int = 512
    phase: ASSDParams = field(default_factory=ASSDParams)
    enhance: EnhanceParams = field(default_factory=EnhanceParams)
    frst: FRSTParams = field(default_factory=FRSTParams)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_offset"] = list(self.crop_offset) if self.crop_offset is not None else None
        d["frst"]["radii"] = list(self.frst.radii)
        d["enhance"]["beta_fractions"] = list(self.enhance.beta_fractions)
        d["enhanced_normalization"] = "min-max rescale to [0,1] before FRST and network ingestion"
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def compute_features(img: np.ndarray, cfg: PipelineConfig) -> dict[str, np.ndarray]:
    """Crop -> LPE -> enhanced pair -> FRST pair, each resized to ``out_side``."""
    cropped = crop_center(img, cfg.crop_side, cfg.crop_offset)
    lpe = local_phase_energy(cropped, cfg.phase)
    e1, e2 = enhanced_pair(lpe, cfg.enhance, normalize=True)
    s1, s2 = radial_symmetry_pair(e1, e2, cfg.frst)
    side = cfg.out_side
    return {name: resize_bilinear(im, side, side)
            for name, im in zip(FEATURES, (cropped, e1, e2, s1, s2))}


def _sha256_file(path: Path) -> str | None:
    try:
        return hashlib.sha256(path.read_bytes()).hexdigest()
    except FileNotFoundError:
        return None


def source_digest(sample: Sample) -> str:
    return hashlib.sha256(Path(sample.image_path).read_bytes()).hexdigest()


def featurize(sample: Sample, cfg: PipelineConfig, out_dir) -> Sample:
    """Write ``<id>_{us,e1,e2,s1,s2}.pfm`` into ``out_dir``.

    Files whose bytes would not change are left untouched. New content goes
    through temporary files that are renamed only after every feature is
    ready; on failure all temporaries are removed.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    feats = compute_features(load_image(sample.image_path), cfg)
    payloads = {name: pfm_bytes(im) for name, im in feats.items()}
    paths, hashes, pending = {}, {}, []
    try:
        for name, raw in payloads.items():
            target = out_dir / f"{sample.id}_{name}.pfm"
            digest = hashlib.sha256(raw).hexdigest()
            paths[name], hashes[name] = str(target), digest
            if _sha256_file(target) == digest:
                continue
            tmp = target.with_name(f".{target.name}.tmp")
            tmp.write_bytes(raw)
            pending.append((tmp, target))
        for tmp, target in pending:
            os.replace(tmp, target)
    except BaseException:
        for tmp, _ in pending:
            tmp.unlink(missing_ok=True)
        raise
    return replace(sample, feature_paths=paths, feature_hashes=hashes)


def _featurize_job(args):
    sample, cfg, out_dir = args
    return featurize(sample, cfg, out_dir)


def featurize_all(samples: list[Sample], cfg: PipelineConfig, out_dir, jobs: int = 1,
                  previous: dict | None = None) -> tuple[list[Sample], dict]:
    """Featurize every sample, skipping ones whose source, config and outputs
    are unchanged since ``previous`` (an enriched manifest document)."""
    digest = cfg.digest()
    known = {}
    if previous and previous.get("config_digest") == digest:
        known = {d["id"]: d for d in previous.get("samples", [])}
    done: dict[str, Sample] = {}
    todo = []
    src_hashes = {}
    for s in samples:
        src_hashes[s.id] = source_digest(s)
        prev = known.get(s.id)
        if prev and prev.get("source_hash") == src_hashes[s.id] and prev.get("feature_hashes") and all(
                _sha256_file(Path(prev["feature_paths"][n])) == prev["feature_hashes"][n] for n in FEATURES):
            done[s.id] = replace(s, feature_paths=prev["feature_paths"], feature_hashes=prev["feature_hashes"])
        else:
            todo.append(s)
    if jobs > 1 and len(todo) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_featurize_job, [(s, cfg, out_dir) for s in todo]))
    else:
        results = [featurize(s, cfg, out_dir) for s in todo]
    for r in results:
        done[r.id] = r
    ordered = [done[s.id] for s in samples]
    doc = {"config": cfg.to_dict(), "config_digest": digest,
           "samples": [dict(s.to_dict(), source_hash=src_hashes[s.id]) for s in ordered]}
    return ordered, doc


def write_manifest_json(path, doc: dict) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest_json(path) -> list[Sample]:
    with open(path) as fh:
        doc = json.load(fh)
    return [Sample.from_dict(d) for d in doc["samples"]]


# --------------------------------------------------------------------------- #
# Batching
# --------------------------------------------------------------------------- #

class FeatureStore:
    """Loads feature rasters on demand and keeps them (float32) in memory."""

    def __init__(self):
        self._cache: dict[tuple[str, str], np.ndarray] = {}

    def get(self, sample: Sample, feature: str) -> np.ndarray:
        key = (sample.id, feature)
        if key not in self._cache:
            path = sample.feature_paths.get(feature)
            if path is None or not Path(path).is_file():
                raise FileNotFoundError(f"sample {sample.id!r}: feature {feature!r} missing ({path})")
            self._cache[key] = load_image(path).astype(np.float32)
        return self._cache[key]

    def stack(self, samples: list[Sample], inputs) -> np.ndarray:
        return np.stack([np.stack([self.get(s, f) for f in inputs]) for s in samples])


def batch_iterator(samples: list[Sample], plan: FoldPlan, fold: int, split: str, fusion: FusionSpec,
                   batch: int = 8, seed: int = 0, epoch: int = 0,
                   store: FeatureStore | None = None) -> Iterator[tuple[object, np.ndarray]]:
    """Yield ``(inputs, labels)`` batches for one fold split.

    Early fusion yields one ``(B, C, S, S)`` array; mid and late fusion yield a
    list of ``C`` arrays of shape ``(B, 1, S, S)``. The train split is shuffled
    by ``(seed, epoch)``; the test split keeps manifest order.
    """
    if batch < 1:
        raise ConfigError(f"batch size must be positive, got {batch}")
    store = store or FeatureStore()
    members = plan.split(samples, fold, split)
    order = np.arange(len(members))
    if split == "train":
        order = np.random.default_rng([seed, epoch]).permutation(len(members))
    for start in range(0, len(order), batch):
        chunk = [members[i] for i in order[start:start + batch]]
        x = store.stack(chunk, fusion.inputs)
        labels = np.array([s.label for s in chunk], dtype=np.int64)
        if fusion.mode == EARLY:
            yield x, labels
        else:
            yield [x[:, i:i + 1] for i in range(x.shape[1])], labels

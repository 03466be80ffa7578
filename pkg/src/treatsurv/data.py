"""Volume samples, synthetic phantoms, normalization, splits and dataset I/O.

Dataset directory layout::

    manifest.json        [{subject_id, treatment, survival_days, file, channels, extent}, ...]
    volumes/<id>.vol     b"VOL1" + 4 x uint32 LE (C, D, H, W) + C*D*H*W float64 LE
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .conditioning import TREATMENTS, TreatmentCode
from .exceptions import ConfigError, FormatError, ValidationError

SURVIVAL_MIN, SURVIVAL_MAX = 5.0, 1767.0
MODALITY_AMPLITUDES = (0.6, 1.0, 0.8, 0.9)
MASK_CHANNEL = 4
VOLUME_MAGIC = b"VOL1"
_HEADER = struct.Struct("<4I")


@dataclass
class VolumeSample:
    subject_id: str
    volume: np.ndarray  # [C, D, H, W]; channel 4, when present, is the tumor mask
    treatment: TreatmentCode
    survival_days: float

    def __post_init__(self):
        self.treatment = TreatmentCode.parse(self.treatment)
        self.volume = np.asarray(self.volume, dtype=np.float64)
        self.survival_days = float(self.survival_days)
        if self.volume.ndim != 4:
            raise ValidationError(f"{self.subject_id}: volume must be [C,D,H,W], got shape {self.volume.shape}")
        if not SURVIVAL_MIN <= self.survival_days <= SURVIVAL_MAX:
            raise ValidationError(
                f"{self.subject_id}: survival {self.survival_days} outside [{SURVIVAL_MIN}, {SURVIVAL_MAX}]")
        if self.has_mask and not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValidationError(f"{self.subject_id}: mask channel is not binary")

    @property
    def has_mask(self) -> bool:
        return self.volume.shape[0] > MASK_CHANNEL

    @property
    def mask(self) -> np.ndarray:
        return self.volume[MASK_CHANNEL]

    def __eq__(self, other):
        if not isinstance(other, VolumeSample):
            return NotImplemented
        return (self.subject_id == other.subject_id and self.treatment == other.treatment
                and self.survival_days == other.survival_days
                and self.volume.shape == other.volume.shape and np.array_equal(self.volume, other.volume))


# ---------------------------------------------------------------------------
# synthetic phantoms


@dataclass
class SyntheticConfig:
    n_subjects: int = 300
    extent: int = 16
    treatment_probs: tuple = (0.504, 0.042, 0.454)
    noise_std: float = 30.0
    seed: int = 0
    include_mask: bool = True
    background_std: float = 0.1
    base_days: float = 450.0
    slope: float = 0.9  # days lost per 0.001 of tumor volume fraction
    gtr_effect: float = 300.0
    str_effect: float = 150.0
    effect_scale: float = 0.02

    def __post_init__(self):
        self.treatment_probs = tuple(float(p) for p in self.treatment_probs)

    def validate(self) -> "SyntheticConfig":
        if self.n_subjects < 3:
            raise ConfigError(f"n_subjects must be >= 3, got {self.n_subjects}")
        if self.extent < 8:
            raise ConfigError(f"extent must be >= 8, got {self.extent}")
        probs = np.asarray(self.treatment_probs)
        if probs.shape != (len(TREATMENTS),) or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
            raise ConfigError(f"treatment_probs must be 3 non-negative numbers summing to 1, got {self.treatment_probs}")
        if self.noise_std < 0 or self.background_std < 0:
            raise ConfigError("noise_std and background_std must be non-negative")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["treatment_probs"] = list(self.treatment_probs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)


def treatment_effect(treatment, nu, cfg: SyntheticConfig | None = None):
    """Days gained by a treatment at tumor volume fraction ``nu``."""
    cfg = cfg or SyntheticConfig()
    label = TreatmentCode.parse(treatment).label
    amplitude = {"GTR": cfg.gtr_effect, "STR": cfg.str_effect, "NA": 0.0}[label]
    return amplitude * np.exp(-np.asarray(nu, dtype=float) / cfg.effect_scale)


def noiseless_survival(treatment, nu, cfg: SyntheticConfig | None = None):
    """Ground-truth survival before noise and clamping."""
    cfg = cfg or SyntheticConfig()
    return cfg.base_days - cfg.slope * np.asarray(nu, dtype=float) * 1000.0 + treatment_effect(treatment, nu, cfg)


def allocate_treatments(n: int, probs, rng: np.random.Generator) -> list:
    """Largest-remainder quotas for each label, then a seeded shuffle."""
    raw = np.asarray(probs, dtype=float) * n
    counts = np.floor(raw).astype(int)
    remainder = raw - counts
    for i in np.argsort(-remainder, kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    labels = np.repeat(np.arange(len(TREATMENTS)), counts)
    return [TREATMENTS[i] for i in rng.permutation(labels)]


def phantom(extent: int, center, radius: float, rng: np.random.Generator, background_std: float,
            include_mask: bool = True):
    """One subject's pseudo-modalities (+ mask) and its tumor volume fraction."""
    grid = np.arange(extent, dtype=float)
    d2 = ((grid[:, None, None] - center[0]) ** 2 + (grid[None, :, None] - center[1]) ** 2
          + (grid[None, None, :] - center[2]) ** 2)
    blob = np.exp(-d2 / (2.0 * radius ** 2))
    channels = [a * blob + rng.normal(0.0, background_std, size=blob.shape) for a in MODALITY_AMPLITUDES]
    mask = (blob > 0.5).astype(float)
    if include_mask:
        channels.append(mask)
    return np.stack(channels), float(mask.sum()) / extent ** 3


def generate_synthetic(cfg: SyntheticConfig) -> list:
    """Phantom cohort whose survival depends on tumor size and treatment jointly.

    Each subject draws from its own stream seeded by ``(seed, index)``; labels
    are allocated by exact quotas so the cohort composition matches
    ``treatment_probs`` as closely as integer counts allow.
    """
    cfg.validate()
    labels = allocate_treatments(cfg.n_subjects, cfg.treatment_probs, np.random.default_rng([cfg.seed, 1]))
    samples = []
    for i, label in enumerate(labels):
        rng = np.random.default_rng([cfg.seed, 0, i])
        radius = rng.uniform(2.0, cfg.extent / 3.0)
        center = rng.uniform(radius, cfg.extent - 1 - radius, size=3)
        volume, nu = phantom(cfg.extent, center, radius, rng, cfg.background_std, cfg.include_mask)
        days = noiseless_survival(label, nu, cfg) + rng.normal(0.0, cfg.noise_std)
        samples.append(VolumeSample(f"S{i:04d}", volume, label,
                                    float(np.clip(days, SURVIVAL_MIN, SURVIVAL_MAX))))
    return samples


def tumor_fraction(sample: VolumeSample) -> float:
    if not sample.has_mask:
        raise ValidationError(f"{sample.subject_id}: no mask channel")
    return float(sample.mask.mean())


def normalize_volume(volume: np.ndarray, subject_id: str = "volume") -> np.ndarray:
    out = np.array(volume, dtype=np.float64, copy=True)
    for c in range(min(out.shape[0], MASK_CHANNEL)):
        ch = out[c]
        std = ch.std()
        if not std > 0:
            raise ValidationError(f"{subject_id}: channel {c} has zero variance and cannot be normalized")
        out[c] = (ch - ch.mean()) / std
    return out


def normalize(sample: VolumeSample) -> VolumeSample:
    """Z-score every non-mask channel over the volume (population std)."""
    return replace(sample, volume=normalize_volume(sample.volume, sample.subject_id))


# ---------------------------------------------------------------------------
# cross-validation split


@dataclass
class FoldSplit:
    k: int
    assignments: dict = field(default_factory=dict)  # subject_id -> fold

    def test_ids(self, fold: int) -> list:
        return [s for s, f in self.assignments.items() if f == fold]

    def train_ids(self, fold: int) -> list:
        return [s for s, f in self.assignments.items() if f != fold]

    def indices(self, samples, fold: int):
        """``(train_index, test_index)`` positions of ``samples`` for one fold."""
        train = [i for i, s in enumerate(samples) if self.assignments[s.subject_id] != fold]
        test = [i for i, s in enumerate(samples) if self.assignments[s.subject_id] == fold]
        return np.asarray(train, dtype=int), np.asarray(test, dtype=int)

    def counts(self, samples) -> np.ndarray:
        """``[k, 3]`` subjects per (fold, treatment)."""
        table = np.zeros((self.k, len(TREATMENTS)), dtype=int)
        for s in samples:
            table[self.assignments[s.subject_id], s.treatment.index] += 1
        return table


def stratified_kfold(samples, k: int, seed: int = 0) -> FoldSplit:
    """Shuffle each treatment group, then deal subjects to folds round-robin.

    Dealing continues where the previous group stopped, so fold sizes stay
    balanced as well as per-treatment counts.
    """
    n = len(samples)
    if k < 2 or k > n:
        raise ConfigError(f"k must satisfy 2 <= k <= {n}, got {k}")
    ids = [s.subject_id for s in samples]
    if len(set(ids)) != n:
        raise ValidationError("subject_id values must be unique")
    rng = np.random.default_rng(seed)
    assignments, position = {}, 0
    for label in TREATMENTS:
        group = sorted(s.subject_id for s in samples if s.treatment.label == label)
        for j in rng.permutation(len(group)):
            assignments[group[j]] = position % k
            position += 1
    return FoldSplit(k, {sid: assignments[sid] for sid in ids})


# ---------------------------------------------------------------------------
# I/O


def write_volume(path, volume: np.ndarray) -> None:
    volume = np.asarray(volume, dtype="<f8")
    if volume.ndim != 4:
        raise ValidationError(f"volume must be [C,D,H,W], got shape {volume.shape}")
    with open(path, "wb") as fh:
        fh.write(VOLUME_MAGIC)
        fh.write(_HEADER.pack(*volume.shape))
        fh.write(np.ascontiguousarray(volume).tobytes())


def read_volume(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[:4] != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {VOLUME_MAGIC!r}", offset=0)
    if len(blob) < 4 + _HEADER.size:
        raise FormatError(f"{path}: truncated header", offset=len(blob))
    shape = _HEADER.unpack_from(blob, 4)
    start = 4 + _HEADER.size
    expected = start + 8 * int(np.prod(shape))
    if len(blob) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for shape {shape}, found {len(blob)}",
                          offset=min(len(blob), expected))
    return np.frombuffer(blob, dtype="<f8", offset=start).reshape(shape).astype(np.float64)


def write_dataset(samples, directory) -> Path:
    directory = Path(directory)
    (directory / "volumes").mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        rel = f"volumes/{s.subject_id}.vol"
        write_volume(directory / rel, s.volume)
        records.append({
            "subject_id": s.subject_id,
            "treatment": s.treatment.label,
            "survival_days": s.survival_days,
            "file": rel,
            "channels": int(s.volume.shape[0]),
            "extent": int(s.volume.shape[1]),
        })
    (directory / "manifest.json").write_text(json.dumps(records, indent=1) + "\n")
    return directory


def read_dataset(directory) -> list:
    directory = Path(directory)
    manifest = directory / "manifest.json"
    try:
        records = json.loads(manifest.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest}: invalid JSON ({exc.msg})", offset=exc.pos) from exc
    if not isinstance(records, list):
        raise FormatError(f"{manifest}: expected a JSON array of records", offset=0)
    samples, seen = [], set()
    for rec in records:
        sid = rec.get("subject_id")
        missing = {"subject_id", "treatment", "survival_days", "file"} - set(rec)
        if missing:
            raise FormatError(f"{manifest}: record {sid!r} lacks {sorted(missing)}")
        if sid in seen:
            raise ValidationError(f"duplicate subject_id {sid!r}")
        seen.add(sid)
        path = directory / rec["file"]
        if not path.is_file():
            raise FileNotFoundError(f"volume file {rec['file']!r} for subject {sid!r} not found")
        volume = read_volume(path)
        if "channels" in rec and volume.shape[0] != rec["channels"]:
            raise FormatError(f"{path}: {volume.shape[0]} channels but manifest says {rec['channels']}", offset=4)
        if "extent" in rec and volume.shape[1] != rec["extent"]:
            raise FormatError(f"{path}: extent {volume.shape[1]} but manifest says {rec['extent']}", offset=8)
        samples.append(VolumeSample(sid, volume, rec["treatment"], rec["survival_days"]))
    return samples


def stack_volumes(samples) -> np.ndarray:
    return np.stack([s.volume for s in samples])


def survival_array(samples) -> np.ndarray:
    return np.array([s.survival_days for s in samples], dtype=np.float64)


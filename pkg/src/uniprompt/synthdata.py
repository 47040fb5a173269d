"""Synthetic multi-modality / multi-platform feature datasets.

Four sources mirror the realized sensor pairs: ground RGB, ground infrared,
UAV RGB and UAV thermal.  A record's feature is

    mu[identity] + gap_modality * u_mod[modality] + gap_platform * u_plat[platform]
    + 0.25 * noise_sigma * cam_offset[source, camera] + noise_sigma * eps

so modality and platform shifts are systematic per source, never per record.
"""
import enum
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

FORMAT_NAME = "uniprompt-dataset"
FORMAT_VERSION = 1


class Modality(enum.IntEnum):
    RGB = 0
    IR = 1
    Thermal = 2


class Platform(enum.IntEnum):
    Ground = 0
    UAV = 1


# name -> (modality, platform); the only four realized sources
SOURCES = {
    "G_R": (Modality.RGB, Platform.Ground),
    "G_I": (Modality.IR, Platform.Ground),
    "U_R": (Modality.RGB, Platform.UAV),
    "U_T": (Modality.Thermal, Platform.UAV),
}
SOURCE_NAMES = tuple(SOURCES)


def source_name(modality, platform):
    for name, pair in SOURCES.items():
        if pair == (modality, platform):
            return name
    raise ValueError(f"({Modality(modality).name}, {Platform(platform).name}) is not a realized source")


class DatasetFormatError(ValueError):
    def __init__(self, msg, line=None):
        self.line = line
        super().__init__(f"line {line}: {msg}" if line is not None else msg)


class DatasetVersionError(DatasetFormatError):
    pass


@dataclass
class FeatureRecord:
    record_id: int
    identity: int
    camera: int
    modality: Modality
    platform: Platform
    feature: np.ndarray


@dataclass(eq=False)
class Dataset:
    """Columnar record store; row k of every array describes one record."""

    record_id: np.ndarray
    identity: np.ndarray
    camera: np.ndarray
    modality: np.ndarray
    platform: np.ndarray
    features: np.ndarray
    d_feat: int
    seed: Optional[int] = None

    def __post_init__(self):
        for name in ("record_id", "identity", "camera", "modality", "platform"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int64).reshape(-1))
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, self.d_feat)
        n = len(self.record_id)
        if any(len(getattr(self, k)) != n for k in ("identity", "camera", "modality", "platform", "features")):
            raise ValueError("dataset columns have different lengths")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features must be finite")
        pairs = set(zip(self.modality.tolist(), self.platform.tolist()))
        bad = pairs - set(SOURCES.values())
        if bad:
            raise ValueError(f"unrealized (modality, platform) pairs: {sorted(bad)}")

    def __len__(self):
        return len(self.record_id)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.d_feat == other.d_feat and self.seed == other.seed
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("record_id", "identity", "camera", "modality", "platform"))
                and self.features.tobytes() == other.features.tobytes())

    @classmethod
    def empty(cls, d_feat, seed=None):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, z, np.zeros((0, d_feat)), d_feat, seed)

    @classmethod
    def from_records(cls, records, d_feat, seed=None):
        records = list(records)
        if not records:
            return cls.empty(d_feat, seed)
        return cls(
            [r.record_id for r in records], [r.identity for r in records],
            [r.camera for r in records], [int(r.modality) for r in records],
            [int(r.platform) for r in records], np.stack([r.feature for r in records]),
            d_feat, seed,
        )

    def records(self):
        for k in range(len(self)):
            yield FeatureRecord(int(self.record_id[k]), int(self.identity[k]), int(self.camera[k]),
                                Modality(self.modality[k]), Platform(self.platform[k]),
                                self.features[k].copy())

    def subset(self, mask_or_index):
        idx = np.asarray(mask_or_index)
        return Dataset(self.record_id[idx], self.identity[idx], self.camera[idx],
                       self.modality[idx], self.platform[idx], self.features[idx],
                       self.d_feat, self.seed)

    def concat(self, other):
        return Dataset(
            np.concatenate([self.record_id, other.record_id]),
            np.concatenate([self.identity, other.identity]),
            np.concatenate([self.camera, other.camera]),
            np.concatenate([self.modality, other.modality]),
            np.concatenate([self.platform, other.platform]),
            np.concatenate([self.features, other.features]),
            self.d_feat, self.seed,
        )

    def source_mask(self, name):
        mod, plat = SOURCES[name]
        return (self.modality == mod) & (self.platform == plat)

    def from_source(self, name):
        return self.subset(self.source_mask(name))

    @property
    def identities(self):
        return np.unique(self.identity)


@dataclass
class SynthConfig:
    n_identities: int = 64
    records_per_identity_per_source: int = 6
    n_cameras_per_source: int = 3
    d_feat: int = 64
    gap_modality: float = 1.0
    gap_platform: float = 1.0
    noise_sigma: float = 0.3
    n_distractor_identities: Optional[int] = None  # None -> 10% of n_identities
    seed: int = 0

    def validate(self):
        if self.n_identities < 2:
            raise ValueError("n_identities must be >= 2")
        for name in ("gap_modality", "gap_platform", "noise_sigma"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be a non-negative number, got {v}")
        if self.records_per_identity_per_source < 1 or self.n_cameras_per_source < 1:
            raise ValueError("need at least one record and one camera per source")
        if self.d_feat < 2:
            raise ValueError("d_feat must be >= 2")
        if self.n_distractor_identities is not None and self.n_distractor_identities < 0:
            raise ValueError("n_distractor_identities must be >= 0")

    @property
    def distractor_count(self):
        if self.n_distractor_identities is None:
            return max(1, int(round(0.1 * self.n_identities)))
        return self.n_distractor_identities


def generate(config):
    """Return ``(train, test, distractor_pool)`` datasets.

    Identities are split 2/3 train, 1/3 test; every train/test identity is seen
    by every source.  Distractor identities get ids above ``n_identities`` and
    each appears in exactly one source.
    """
    config.validate()
    c = config
    rng = np.random.default_rng(c.seed)
    n_dis = c.distractor_count
    n_src = len(SOURCES)
    mu = rng.normal(size=(c.n_identities + n_dis, c.d_feat))
    u_mod = rng.normal(size=(len(Modality), c.d_feat))
    u_plat = rng.normal(size=(len(Platform), c.d_feat))
    cam = rng.normal(size=(n_src, c.n_cameras_per_source, c.d_feat))
    perm = rng.permutation(c.n_identities)
    n_train = int(round(2 * c.n_identities / 3))
    n_train = min(max(n_train, 1), c.n_identities - 1)
    train_ids = np.sort(perm[:n_train])
    test_ids = np.sort(perm[n_train:])
    dis_sources = rng.permutation(np.arange(n_dis) % n_src)

    next_id = 0

    def build(ids, sources_of):
        nonlocal next_id
        rows = []
        for ident in ids:
            for s in sources_of(ident):
                mod, plat = SOURCES[SOURCE_NAMES[s]]
                offset = c.gap_modality * u_mod[mod] + c.gap_platform * u_plat[plat]
                for r in range(c.records_per_identity_per_source):
                    k = r % c.n_cameras_per_source
                    eps = rng.normal(size=c.d_feat)
                    feat = mu[ident] + offset + 0.25 * c.noise_sigma * cam[s, k] + c.noise_sigma * eps
                    rows.append(FeatureRecord(next_id, int(ident), s * c.n_cameras_per_source + k,
                                              mod, plat, feat))
                    next_id += 1
        return Dataset.from_records(rows, c.d_feat, c.seed)

    every = lambda ident: range(n_src)  # noqa: E731
    train = build(train_ids, every)
    test = build(test_ids, every)
    pool = build(np.arange(c.n_identities, c.n_identities + n_dis),
                 lambda ident: [int(dis_sources[ident - c.n_identities])])
    return train, test, pool


def write_dataset(path, dataset):
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "d_feat": dataset.d_feat,
              "seed": dataset.seed, "n_records": len(dataset)}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in dataset.records():
            fh.write(json.dumps({
                "record_id": rec.record_id, "identity": rec.identity, "camera": rec.camera,
                "modality": rec.modality.name, "platform": rec.platform.name,
                "feature": rec.feature.tolist(),
            }) + "\n")


def _parse(line, lineno):
    try:
        return json.loads(line)
    except json.JSONDecodeError as err:
        raise DatasetFormatError(f"invalid JSON ({err.msg})", lineno) from None


def read_dataset(path):
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("missing header", 1)
    header = _parse(lines[0], 1)
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError("not a dataset file", 1)
    if header.get("version") != FORMAT_VERSION:
        raise DatasetVersionError(f"unsupported version {header.get('version')}", 1)
    d_feat, expected = header["d_feat"], header["n_records"]
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        obj = _parse(line, lineno)
        try:
            feat = np.array(obj["feature"], dtype=np.float64)
            rec = FeatureRecord(int(obj["record_id"]), int(obj["identity"]), int(obj["camera"]),
                                Modality[obj["modality"]], Platform[obj["platform"]], feat)
        except (KeyError, TypeError, ValueError) as err:
            raise DatasetFormatError(f"bad record ({err!r})", lineno) from None
        if feat.shape != (d_feat,):
            raise DatasetFormatError(f"feature length {feat.size} != {d_feat}", lineno)
        records.append(rec)
    if len(records) != expected:
        raise DatasetFormatError(f"expected {expected} records, found {len(records)} (truncated?)",
                                 len(lines) + 1)
    try:
        return Dataset.from_records(records, d_feat, header.get("seed"))
    except ValueError as err:
        raise DatasetFormatError(str(err)) from None


def config_dict(config):
    return asdict(config)

"""Datasets, file formats, and the synthetic benchmark generator.

Two interchangeable on-disk formats carry feature data:

* JSONL: one object per line, {"id": str, "label": 0|1|null, "features": [..]}.
* Binary: magic "CEPC", version u16 (=1), u32 rows, u32 cols, float32
  little-endian row-major features, int8 labels (-1 = unlabeled), then
  length-prefixed (u32) UTF-8 ids.

A domain manifest JSON ({"domains": [{name, role, path, dim}], "gold": path?})
wires files into a run; paths resolve relative to the manifest.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError
from .rng import RngStream

MAGIC = b"CEPC"
BINARY_VERSION = 1


@dataclass
class DomainDataset:
    name: str
    role: str  # "source" (labeled) or "target" (unlabeled)
    ids: list[str]
    labels: np.ndarray  # int8, -1 where unlabeled
    features: np.ndarray  # float32, (n, dim)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int8)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.validate()

    def validate(self) -> None:
        if self.role not in ("source", "target"):
            raise DataError(f"unknown role {self.role!r}")
        n = self.features.shape[0] if self.features.ndim == 2 else -1
        if self.features.ndim != 2 or n < 1 or self.features.shape[1] < 1:
            raise DataError(f"features must be a non-empty 2-D array, got {self.features.shape}")
        if not np.isfinite(self.features).all():
            raise DataError(f"dataset {self.name}: non-finite features")
        if len(self.ids) != n or self.labels.shape != (n,):
            raise DataError(f"dataset {self.name}: ids/labels/features row counts differ")
        if len(set(self.ids)) != n:
            raise DataError(f"dataset {self.name}: duplicate document ids")
        bad = set(np.unique(self.labels)) - {-1, 0, 1}
        if bad:
            raise DataError(f"dataset {self.name}: labels outside {{-1,0,1}}: {sorted(bad)}")
        if self.role == "source" and (self.labels == -1).any():
            raise DataError(f"source {self.name} has unlabeled documents")
        if self.role == "target" and (self.labels != -1).any():
            raise DataError(f"target {self.name} has labeled documents")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def label_distribution(self) -> np.ndarray:
        """Fraction of class 0 and class 1 among labeled documents."""
        if (self.labels == -1).any():
            raise DataError(f"dataset {self.name} is unlabeled")
        counts = np.bincount(self.labels, minlength=2).astype(np.float64)
        return counts / counts.sum()


def _infer_role(labels: np.ndarray, where: str) -> str:
    unlabeled = labels == -1
    if unlabeled.all():
        return "target"
    if not unlabeled.any():
        return "source"
    raise DataError(f"{where}: mixed labeled and unlabeled documents")


def load_jsonl(path: str | Path, name: str | None = None, role: str | None = None) -> DomainDataset:
    path = Path(path)
    ids: list[str] = []
    labels: list[int] = []
    rows: list[list[float]] = []
    dim = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({e})") from e
            if not isinstance(obj, dict) or not {"id", "label", "features"} <= set(obj):
                raise DataError(f"{path}: line {lineno}: need id/label/features keys")
            doc_id, label, feats = obj["id"], obj["label"], obj["features"]
            if not isinstance(doc_id, str):
                raise DataError(f"{path}: line {lineno}: id must be a string")
            if label not in (0, 1, None):
                raise DataError(f"{path}: line {lineno}: label must be 0, 1 or null")
            if not isinstance(feats, list) or not feats:
                raise DataError(f"{path}: line {lineno}: features must be a non-empty list")
            if dim is None:
                dim = len(feats)
            elif len(feats) != dim:
                raise DataError(
                    f"{path}: line {lineno}: feature width {len(feats)} != {dim}"
                )
            ids.append(doc_id)
            labels.append(-1 if label is None else int(label))
            rows.append(feats)
    if not ids:
        raise DataError(f"{path}: no documents")
    labels_arr = np.array(labels, dtype=np.int8)
    feats_arr = np.array(rows, dtype=np.float32)
    if role is None:
        role = _infer_role(labels_arr, str(path))
    return DomainDataset(
        name=name or path.stem, role=role, ids=ids, labels=labels_arr, features=feats_arr
    )


def save_jsonl(ds: DomainDataset, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for i in range(ds.n):
            label = None if ds.labels[i] == -1 else int(ds.labels[i])
            obj = {
                "id": ds.ids[i],
                "label": label,
                "features": [float(v) for v in ds.features[i]],
            }
            fh.write(json.dumps(obj) + "\n")


def save_binary(ds: DomainDataset, path: str | Path) -> None:
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", BINARY_VERSION))
        fh.write(struct.pack("<II", ds.n, ds.dim))
        fh.write(np.ascontiguousarray(ds.features, dtype="<f4").tobytes())
        fh.write(ds.labels.astype("<i1").tobytes())
        for doc_id in ds.ids:
            raw = doc_id.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)


def load_binary(path: str | Path, name: str | None = None, role: str | None = None) -> DomainDataset:
    path = Path(path)
    blob = path.read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated while reading {what}")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4, "magic")) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != BINARY_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    rows, cols = struct.unpack("<II", take(8, "shape"))
    if rows < 1 or cols < 1:
        raise FormatError(f"{path}: empty shape {rows}x{cols}")
    feats = np.frombuffer(take(rows * cols * 4, "features"), dtype="<f4").reshape(rows, cols)
    labels = np.frombuffer(take(rows, "labels"), dtype="<i1").copy()
    ids = []
    for i in range(rows):
        (n,) = struct.unpack("<I", take(4, f"id length {i}"))
        ids.append(bytes(take(n, f"id {i}")).decode("utf-8"))
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    if role is None:
        role = _infer_role(labels, str(path))
    return DomainDataset(
        name=name or path.stem, role=role, ids=ids, labels=labels, features=feats.copy()
    )


def load_dataset(path: str | Path, name: str | None = None, role: str | None = None) -> DomainDataset:
    """Load either format; binary is recognized by its magic."""
    path = Path(path)
    with path.open("rb") as fh:
        head = fh.read(4)
    if head == MAGIC:
        return load_binary(path, name=name, role=role)
    return load_jsonl(path, name=name, role=role)


def as_unlabeled(ds: DomainDataset, name: str | None = None) -> DomainDataset:
    return DomainDataset(
        name=name or ds.name,
        role="target",
        ids=list(ds.ids),
        labels=np.full(ds.n, -1, dtype=np.int8),
        features=ds.features.copy(),
    )


@dataclass(frozen=True)
class SynthSpec:
    """Benchmark generator knobs.

    n_domains counts source domains; one target domain is always appended.
    shift_profile gives a per-domain multiplier (length n_domains + 1, target
    last) applied to both shift_magnitude and rotation_angle; the default is
    0, 1, 2, ... so later domains drift further. adversarial_domains lists
    source indices whose class-conditional means are swapped.
    """

    n_domains: int
    docs_per_domain: int
    dim: int
    positive_rate: float = 0.2
    class_sep: float = 2.5
    shift_magnitude: float = 1.0
    rotation_angle: float = 0.0
    noise_scale: float = 0.0
    shift_profile: tuple[float, ...] | None = None
    adversarial_domains: tuple[int, ...] = ()
    seed: int = 0

    def validate(self) -> None:
        if self.n_domains < 1:
            raise DataError("need at least one source domain")
        if self.dim < 2:
            raise DataError("dim must be >= 2 (rotation plane)")
        n_pos = math.floor(self.docs_per_domain * self.positive_rate)
        if not 1 <= n_pos < self.docs_per_domain:
            raise DataError(
                f"positive_rate {self.positive_rate} leaves no usable split "
                f"of {self.docs_per_domain} documents"
            )
        if self.shift_profile is not None and len(self.shift_profile) != self.n_domains + 1:
            raise DataError(
                f"shift_profile needs {self.n_domains + 1} entries "
                f"(sources then target), got {len(self.shift_profile)}"
            )
        for k in self.adversarial_domains:
            if not 0 <= k < self.n_domains:
                raise DataError(f"adversarial domain index {k} out of range")

    def profile(self) -> tuple[float, ...]:
        if self.shift_profile is not None:
            return self.shift_profile
        return tuple(float(k) for k in range(self.n_domains + 1))


def gen_synthetic(spec: SynthSpec) -> list[DomainDataset]:
    """Class-conditional Gaussians at +-mu0, one rotated/shifted copy per domain.

    Returns n_domains source datasets followed by one labeled dataset named
    "target" (strip labels with as_unlabeled before adaptation runs). Every
    domain has exactly floor(n * positive_rate) positives.
    """
    spec.validate()
    profile = spec.profile()
    root = RngStream(spec.seed, "synth")
    mu = np.zeros(spec.dim)
    mu[0] = spec.class_sep
    shift_dir = np.zeros(spec.dim)
    shift_dir[1] = 1.0
    out = []
    for k in range(spec.n_domains + 1):
        is_target = k == spec.n_domains
        name = "target" if is_target else f"s{k}"
        gen = root.child(f"domain/{k}").generator()
        n = spec.docs_per_domain
        n_pos = math.floor(n * spec.positive_rate)
        labels = np.zeros(n, dtype=np.int8)
        labels[:n_pos] = 1
        labels = labels[gen.permutation(n)]
        sign = np.where(labels == 1, 1.0, -1.0)
        if not is_target and k in spec.adversarial_domains:
            sign = -sign
        base = sign[:, None] * mu + gen.standard_normal((n, spec.dim))
        theta = spec.rotation_angle * profile[k]
        rot = np.eye(spec.dim)
        rot[0, 0] = rot[1, 1] = math.cos(theta)
        rot[0, 1] = -math.sin(theta)
        rot[1, 0] = math.sin(theta)
        x = base @ rot.T + spec.shift_magnitude * profile[k] * shift_dir
        if spec.noise_scale > 0:
            x = x + spec.noise_scale * gen.standard_normal((n, spec.dim))
        out.append(
            DomainDataset(
                name=name,
                role="source",
                ids=[f"{name}-{i:05d}" for i in range(n)],
                labels=labels,
                features=x.astype(np.float32),
            )
        )
    return out


def split_oracle(
    ds: DomainDataset, fraction: float = 0.8, rng: RngStream | None = None
) -> tuple[DomainDataset, DomainDataset]:
    """Stratified train/test split of a labeled dataset.

    Class ratios are preserved to within one document; degenerate classes
    (nothing left on either side) are rejected.
    """
    if (ds.labels == -1).any():
        raise DataError(f"dataset {ds.name} must be fully labeled to split")
    if not 0.0 < fraction < 1.0:
        raise DataError(f"fraction must be in (0, 1), got {fraction}")
    gen = (rng or RngStream(0, "split")).generator()
    train_idx: list[int] = []
    test_idx: list[int] = []
    for cls in (0, 1):
        idx = np.flatnonzero(ds.labels == cls)
        if idx.size == 0:
            raise DataError(f"dataset {ds.name}: class {cls} is empty")
        n_train = int(round(idx.size * fraction))
        if n_train == 0 or n_train == idx.size:
            raise DataError(
                f"dataset {ds.name}: class {cls} too small to stratify at {fraction}"
            )
        perm = idx[gen.permutation(idx.size)]
        train_idx.extend(perm[:n_train].tolist())
        test_idx.extend(perm[n_train:].tolist())
    train_idx.sort()
    test_idx.sort()

    def subset(indices: list[int], suffix: str) -> DomainDataset:
        return DomainDataset(
            name=f"{ds.name}-{suffix}",
            role="source",
            ids=[ds.ids[i] for i in indices],
            labels=ds.labels[indices],
            features=ds.features[indices],
        )

    return subset(train_idx, "train"), subset(test_idx, "test")


def load_manifest(
    path: str | Path,
) -> tuple[list[DomainDataset], DomainDataset, DomainDataset | None]:
    """Load (sources, target, optional gold-labeled target) from a manifest."""
    path = Path(path)
    try:
        spec = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed manifest JSON ({e})") from e
    if not isinstance(spec, dict) or "domains" not in spec:
        raise FormatError(f"{path}: manifest needs a 'domains' list")
    sources: list[DomainDataset] = []
    targets: list[DomainDataset] = []
    for entry in spec["domains"]:
        missing = {"name", "role", "path"} - set(entry)
        if missing:
            raise FormatError(f"{path}: domain entry missing {sorted(missing)}")
        ds = load_dataset(path.parent / entry["path"], name=entry["name"], role=entry["role"])
        if "dim" in entry and ds.dim != entry["dim"]:
            raise DataError(
                f"{path}: domain {entry['name']} has dim {ds.dim}, manifest says {entry['dim']}"
            )
        (targets if entry["role"] == "target" else sources).append(ds)
    if len(targets) != 1:
        raise DataError(f"{path}: exactly one target domain required, got {len(targets)}")
    target = targets[0]
    gold = None
    if spec.get("gold"):
        gold = load_dataset(path.parent / spec["gold"], name=f"{target.name}-gold")
        if gold.role != "source":
            raise DataError(f"{path}: gold file must be labeled")
        if set(gold.ids) != set(target.ids):
            raise DataError(f"{path}: gold ids do not match target ids")
        order = {doc_id: i for i, doc_id in enumerate(gold.ids)}
        perm = [order[doc_id] for doc_id in target.ids]
        gold = DomainDataset(
            name=gold.name,
            role="source",
            ids=[gold.ids[i] for i in perm],
            labels=gold.labels[perm],
            features=gold.features[perm],
        )
    return sources, target, gold


def load_synth_spec(path: str | Path) -> SynthSpec:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed spec JSON ({e})") from e
    if not isinstance(raw, dict):
        raise FormatError(f"{path}: spec must be a JSON object")
    known = set(SynthSpec.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise FormatError(f"{path}: unknown spec keys {sorted(unknown)}")
    for key in ("shift_profile", "adversarial_domains"):
        if raw.get(key) is not None:
            raw[key] = tuple(raw[key])
    spec = SynthSpec(**raw)
    spec.validate()
    return spec


def write_benchmark(spec: SynthSpec, out_dir: str | Path) -> Path:
    """Generate a synthetic benchmark on disk and return the manifest path.

    The labeled generator target becomes an unlabeled target file plus a
    separate gold file the manifest points at.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    *sources, labeled_target = gen_synthetic(spec)
    domains = []
    for ds in sources:
        save_jsonl(ds, out / f"{ds.name}.jsonl")
        domains.append({"name": ds.name, "role": "source", "path": f"{ds.name}.jsonl", "dim": ds.dim})
    target = as_unlabeled(labeled_target)
    save_jsonl(target, out / "target.jsonl")
    save_jsonl(labeled_target, out / "gold.jsonl")
    domains.append({"name": target.name, "role": "target", "path": "target.jsonl", "dim": target.dim})
    manifest = out / "manifest.json"
    manifest.write_text(
        json.dumps({"domains": domains, "gold": "gold.jsonl"}, indent=2) + "\n",
        encoding="utf-8",
    )
    return manifest

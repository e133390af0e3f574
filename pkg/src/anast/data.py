"""Feature stores, synthetic embeddings, train/test splits and task manifests.

Two on-disk feature formats are supported:

* binary ``ANFT`` (little-endian)::

      b"ANFT" | version u32 | n u64 | d u64
      | n x (len u32, UTF-8 label bytes) | n*d float64, row-major

* text: one sample per line, comma-separated floats, class label last.
  An optional header line is detected when its leading fields are not numeric.

Manifests are TOML; see ``README.md`` for the schema.
"""

from __future__ import annotations

import csv
import io
import math
import struct
import sys
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .classifier import LabeledFeatures
from .expansion import DEFAULT_OUTPUT_DIM, Activation, ExpansionSpec, Kind

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "FormatError",
    "ManifestError",
    "FeatureStore",
    "SyntheticSpec",
    "TaskSpec",
    "TaskManifest",
    "gen_synthetic",
    "split_train_test",
    "save_features",
    "load_features",
    "encode_features",
    "decode_features",
    "parse_text_features",
    "load_manifest",
    "parse_manifest",
]

FEATURE_MAGIC = b"ANFT"
FEATURE_VERSION = 1


class FormatError(ValueError):
    """Malformed feature file."""


class ManifestError(ValueError):
    """Invalid task manifest."""


@dataclass(frozen=True)
class FeatureStore(LabeledFeatures):
    source_name: str = ""

    def subset(self, mask_or_index) -> "FeatureStore":
        return FeatureStore(self.features[mask_or_index], self.labels[mask_or_index], self.source_name)

    def classes(self) -> list[str]:
        """Distinct labels in first-seen order."""
        return list(dict.fromkeys(self.labels))

    def class_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for label in self.labels:
            counts[label] = counts.get(label, 0) + 1
        return counts


# -- synthetic data --------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    classes: int
    per_class: int
    dim: int
    separation: float = 10.0
    std: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("classes", "per_class", "dim"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {value}")
        if not (math.isfinite(self.separation) and self.separation >= 0):
            raise ValueError(f"separation must be >= 0, got {self.separation}")
        if not (math.isfinite(self.std) and self.std > 0):
            raise ValueError(f"std must be > 0, got {self.std}")
        if self.seed < 0:
            raise ValueError(f"seed must be non-negative, got {self.seed}")


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _class_means(spec: SyntheticSpec) -> np.ndarray:
    # Orthonormal directions give every pair of means the same distance
    # (= separation); with more classes than dims fall back to random unit vectors.
    g = _rng(spec.seed, 0).standard_normal((spec.dim, spec.classes))
    if spec.classes <= spec.dim:
        q, r = np.linalg.qr(g)
        dirs = q * np.sign(np.diag(r))
    else:
        dirs = g / np.linalg.norm(g, axis=0)
    return (spec.separation / math.sqrt(2.0)) * dirs.T


def gen_synthetic(spec: SyntheticSpec) -> FeatureStore:
    """Gaussian class blobs, one per class, labelled ``c0 .. c{C-1}``.

    Rows are grouped by class.  Output depends only on ``spec``.
    """
    means = _class_means(spec)
    blocks, labels = [], []
    for c in range(spec.classes):
        noise = _rng(spec.seed, 1, c).standard_normal((spec.per_class, spec.dim))
        blocks.append(means[c] + spec.std * noise)
        labels.extend([f"c{c}"] * spec.per_class)
    return FeatureStore(np.vstack(blocks), np.array(labels, dtype=object), f"synthetic:{spec.seed}")


# -- splitting -------------------------------------------------------------

def _test_count(n: int, ratio: float) -> int:
    n_test = math.floor(n * (1.0 - ratio) + 1e-9)
    return min(max(n_test, 1), n - 1)


def split_train_test(store: FeatureStore, ratio: float, seed: int) -> tuple[FeatureStore, FeatureStore]:
    """Stratified split; ``ratio`` is the train fraction of every class.

    Each class is shuffled by a generator keyed on ``(seed, crc32(label))`` so a
    class splits the same way whatever else is in the store.  Both halves keep
    the original row order.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"split ratio must lie strictly between 0 and 1, got {ratio}")
    is_test = np.zeros(store.n_rows, dtype=bool)
    for label in store.classes():
        idx = np.flatnonzero(store.labels == label)
        if idx.size < 2:
            raise ValueError(f"class {label!r} has {idx.size} sample(s); at least 2 are needed to split")
        perm = _rng(seed, zlib.crc32(label.encode("utf-8"))).permutation(idx.size)
        is_test[idx[perm[:_test_count(idx.size, ratio)]]] = True
    return store.subset(~is_test), store.subset(is_test)


# -- feature files ---------------------------------------------------------

def encode_features(store: LabeledFeatures) -> bytes:
    out = io.BytesIO()
    out.write(FEATURE_MAGIC)
    out.write(struct.pack("<IQQ", FEATURE_VERSION, store.n_rows, store.feature_dim))
    for label in store.labels:
        raw = label.encode("utf-8")
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
    out.write(np.ascontiguousarray(store.features, dtype="<f8").tobytes())
    return out.getvalue()


def decode_features(buf: bytes, source_name: str = "") -> FeatureStore:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"truncated {what} at byte offset {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != FEATURE_MAGIC:
        raise FormatError("bad magic at byte offset 0: not an ANFT feature file")
    version, n, d = struct.unpack("<IQQ", take(20, "header"))
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported ANFT version {version} at byte offset 4")
    labels = []
    for i in range(n):
        (length,) = struct.unpack("<I", take(4, f"label {i} length"))
        at = pos
        try:
            labels.append(bytes(take(length, f"label {i}")).decode("utf-8"))
        except UnicodeDecodeError:
            raise FormatError(f"label {i} at byte offset {at} is not valid UTF-8") from None
    data = take(n * d * 8, "feature block")
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes at byte offset {pos}")
    feats = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(n, d)
    if not np.isfinite(feats).all():
        row = int(np.argwhere(~np.isfinite(feats))[0][0])
        raise FormatError(f"non-finite feature value in row {row}")
    return FeatureStore(feats, np.array(labels, dtype=object), source_name)


def _is_float(text: str) -> bool:
    try:
        float(text)
    except ValueError:
        return False
    return True


def parse_text_features(text: str, source_name: str = "") -> FeatureStore:
    rows, labels = [], []
    width = None
    for lineno, fields in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not fields or all(not f.strip() for f in fields):
            continue
        fields = [f.strip() for f in fields]
        if len(fields) < 2:
            raise FormatError(f"line {lineno}: expected at least one feature and a label")
        values = fields[:-1]
        if width is None and not rows and not all(_is_float(v) for v in values):
            width = len(fields)  # header line
            continue
        if width is not None and len(fields) != width:
            raise FormatError(f"line {lineno}: expected {width} fields, found {len(fields)}")
        width = len(fields)
        row = []
        for col, v in enumerate(values, start=1):
            try:
                x = float(v)
            except ValueError:
                raise FormatError(f"line {lineno}, field {col}: {v!r} is not a number") from None
            if not math.isfinite(x):
                raise FormatError(f"line {lineno}, field {col}: non-finite value {v!r}")
            row.append(x)
        rows.append(row)
        labels.append(fields[-1])
    d = (width - 1) if width else 0
    feats = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    if d == 0:
        raise FormatError("no feature columns found")
    return FeatureStore(feats, np.array(labels, dtype=object), source_name)


def save_features(store: LabeledFeatures, path) -> None:
    """Write ``store`` as binary ANFT, or as text when the suffix is .csv/.txt."""
    path = Path(path)
    if path.suffix.lower() in (".csv", ".txt"):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            for row, label in zip(store.features, store.labels):
                writer.writerow([repr(float(x)) for x in row] + [label])
    else:
        path.write_bytes(encode_features(store))


def load_features(path) -> FeatureStore:
    """Read a feature file; binary if it starts with the ANFT magic, else text."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] == FEATURE_MAGIC:
        return decode_features(raw, path.name)
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: neither ANFT binary nor UTF-8 text (byte offset {exc.start})") from None
    return parse_text_features(text, path.name)


# -- manifests -------------------------------------------------------------

@dataclass(frozen=True)
class TaskSpec:
    name: str
    classes: tuple[str, ...]
    source: str


@dataclass(frozen=True)
class TaskManifest:
    name: str
    gamma: float
    expansion: ExpansionSpec
    split_ratio: float
    split_seed: int
    tasks: tuple[TaskSpec, ...]
    sources: dict = field(repr=False)  # name -> FeatureStore
    source_config: dict = field(repr=False, default_factory=dict)
    overrides: dict = field(default_factory=dict)

    def task_data(self, task: TaskSpec) -> FeatureStore:
        store = self.sources[task.source]
        mask = np.isin(store.labels, list(task.classes))
        return store.subset(mask)

    def with_overrides(
        self,
        *,
        gamma: float | None = None,
        expansion_size: int | None = None,
        activation: str | None = None,
        expansion_seed: int | None = None,
        split_seed: int | None = None,
        no_expansion: bool = False,
    ) -> "TaskManifest":
        """Return a copy with CLI-style overrides applied and validated."""
        given = {
            "gamma": gamma,
            "expansion_size": expansion_size,
            "activation": activation,
            "expansion_seed": expansion_seed,
            "split_seed": split_seed,
        }
        given = {k: v for k, v in given.items() if v is not None}
        if no_expansion:
            given["no_expansion"] = True
        if not given:
            return self
        exp = self.expansion
        try:
            if no_expansion:
                exp = ExpansionSpec.identity(exp.input_dim)
            if expansion_size is not None:
                if exp.kind is Kind.IDENTITY:
                    raise ValueError("expansion size cannot be set when expansion is disabled")
                exp = replace(exp, output_dim=expansion_size)
            if activation is not None:
                exp = replace(exp, activation=Activation(activation))
            if expansion_seed is not None:
                exp = replace(exp, seed=expansion_seed)
        except ValueError as exc:
            raise ManifestError(f"invalid override: {exc}") from None
        return replace(
            self,
            gamma=_validate_gamma(self.gamma if gamma is None else gamma),
            expansion=exp,
            split_seed=_validate_seed(self.split_seed if split_seed is None else split_seed, "split_seed"),
            overrides={**self.overrides, **given},
        )

    def config(self) -> dict:
        """Everything needed to reproduce a run from this manifest."""
        return {
            "scenario": self.name,
            "gamma": self.gamma,
            "expansion": self.expansion.to_dict(),
            "split_ratio": self.split_ratio,
            "split_seed": self.split_seed,
            "tasks": [
                {"name": t.name, "classes": list(t.classes), "source": t.source} for t in self.tasks
            ],
            "sources": self.source_config,
            "overrides": dict(sorted(self.overrides.items())),
        }


def _validate_gamma(value) -> float:
    try:
        gamma = float(value)
    except (TypeError, ValueError):
        raise ManifestError(f"gamma must be a number, got {value!r}") from None
    if not (math.isfinite(gamma) and gamma > 0):
        raise ManifestError(f"gamma must be positive, got {value!r}")
    return gamma


def _validate_seed(value, what: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or not 0 <= value < 2**64:
        raise ManifestError(f"{what} must be an unsigned 64-bit integer, got {value!r}")
    return value


def _load_source(name: str, cfg, base_dir: Path) -> tuple[FeatureStore, dict]:
    if not isinstance(cfg, dict):
        raise ManifestError(f"source {name!r} must be a table")
    if ("path" in cfg) == ("synthetic" in cfg):
        raise ManifestError(f"source {name!r} needs exactly one of 'path' or 'synthetic'")
    if "path" in cfg:
        path = Path(cfg["path"])
        if not path.is_absolute():
            path = base_dir / path
        try:
            store = load_features(path)
        except OSError as exc:
            raise ManifestError(f"source {name!r}: cannot read {path}: {exc.strerror}") from None
        except FormatError as exc:
            raise ManifestError(f"source {name!r}: {exc}") from None
        return replace(store, source_name=name), {"path": str(cfg["path"])}
    syn = cfg["synthetic"]
    if not isinstance(syn, dict):
        raise ManifestError(f"source {name!r}: 'synthetic' must be a table")
    try:
        spec = SyntheticSpec(**syn)
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"source {name!r}: invalid synthetic spec: {exc}") from None
    return replace(gen_synthetic(spec), source_name=name), {"synthetic": dict(sorted(syn.items()))}


def parse_manifest(doc: dict, base_dir=".") -> TaskManifest:
    base_dir = Path(base_dir)
    known = {"schema", "name", "gamma", "split_ratio", "split_seed", "expansion", "sources", "tasks"}
    unknown = set(doc) - known
    if unknown:
        raise ManifestError(f"unknown top-level keys: {sorted(unknown)}")
    if doc.get("schema", 1) != 1:
        raise ManifestError(f"unsupported manifest schema {doc['schema']!r}")
    name = str(doc.get("name", "scenario"))
    gamma = _validate_gamma(doc.get("gamma", 0.01))
    ratio = doc.get("split_ratio", 0.8)
    if not isinstance(ratio, (int, float)) or not 0 < ratio < 1:
        raise ManifestError(f"split_ratio must lie strictly between 0 and 1, got {ratio!r}")
    split_seed = _validate_seed(doc.get("split_seed", 0), "split_seed")

    raw_sources = doc.get("sources")
    if not isinstance(raw_sources, dict) or not raw_sources:
        raise ManifestError("manifest needs at least one [sources.<name>] table")
    sources, source_config = {}, {}
    for src_name, cfg in raw_sources.items():
        sources[src_name], source_config[src_name] = _load_source(src_name, cfg, base_dir)
    dims = {s.feature_dim for s in sources.values()}
    if len(dims) != 1:
        raise ManifestError(f"sources disagree on feature dimension: {sorted(dims)}")
    input_dim = dims.pop()

    raw_tasks = doc.get("tasks")
    if not isinstance(raw_tasks, list) or not raw_tasks:
        raise ManifestError("manifest needs a non-empty [[tasks]] list")
    tasks, seen_names = [], set()
    for i, t in enumerate(raw_tasks):
        tname = str(t.get("name", f"task{i}"))
        if tname in seen_names:
            raise ManifestError(f"duplicate task name {tname!r}")
        seen_names.add(tname)
        classes = t.get("classes")
        if not isinstance(classes, list) or not classes:
            raise ManifestError(f"task {tname!r} has an empty class list")
        classes = tuple(str(c) for c in classes)
        if len(set(classes)) != len(classes):
            raise ManifestError(f"task {tname!r} lists a class twice")
        src = t.get("source")
        if src is None and len(sources) == 1:
            src = next(iter(sources))
        if src not in sources:
            raise ManifestError(f"task {tname!r} references unknown source {src!r}")
        available = set(sources[src].labels)
        missing = [c for c in classes if c not in available]
        if missing:
            raise ManifestError(f"task {tname!r}: classes {missing} not found in source {src!r}")
        tasks.append(TaskSpec(tname, classes, src))

    exp_cfg = dict(doc.get("expansion", {}))
    try:
        enabled = exp_cfg.pop("enabled", True)
        if not enabled:
            if set(exp_cfg) - {"activation"}:
                raise ValueError("only 'activation' may accompany enabled = false")
            expansion = ExpansionSpec(
                input_dim=input_dim,
                output_dim=input_dim,
                kind=Kind.IDENTITY,
                activation=exp_cfg.get("activation", "identity"),
            )
        else:
            extra = set(exp_cfg) - {"output_dim", "seed", "activation", "scale"}
            if extra:
                raise ValueError(f"unknown expansion keys {sorted(extra)}")
            expansion = ExpansionSpec(
                input_dim=input_dim,
                output_dim=exp_cfg.get("output_dim", DEFAULT_OUTPUT_DIM),
                seed=exp_cfg.get("seed", 0),
                activation=exp_cfg.get("activation", "identity"),
                scale=exp_cfg.get("scale"),
            )
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"invalid [expansion]: {exc}") from None

    return TaskManifest(
        name=name,
        gamma=gamma,
        expansion=expansion,
        split_ratio=float(ratio),
        split_seed=split_seed,
        tasks=tuple(tasks),
        sources=sources,
        source_config=source_config,
    )


def load_manifest(path) -> TaskManifest:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from None
    return parse_manifest(doc, path.parent)

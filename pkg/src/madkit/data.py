"""Synthetic multi-domain benchmark, dataset manifests, and model checkpoints.

Random streams come from Philox4x64-10 (``numpy.random.Philox``) keyed with
``(seed, stream)``; uniforms are 53-bit doubles, normals use numpy's
ziggurat. Each split of each domain draws from its own stream, so adding a
split never perturbs another one.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import blob
from .adapters import decode_adapter, encode_adapter
from .errors import ConfigError, DataError, FormatError
from .model import BackboneSpec, DomainModule, MultiDomainModel
from .tensor import BatchNormParams, FilterBank, Tensor

SCHEMA_VERSION = 1
SPLITS = ("train", "val", "test")
_SPLIT_STREAM = {"train": 1, "val": 2, "test": 3}


def philox(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)]))


# synthetic rendering -------------------------------------------------------------


def _shape_field(shape_id: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Signed 'inside-ness' (> 0 inside) of silhouette ``shape_id`` on a [-1, 1] grid."""
    r = np.sqrt(u**2 + v**2)
    k = shape_id % 10
    if k == 0:  # disc
        return 0.55 - r
    if k == 1:  # square
        return 0.48 - np.maximum(np.abs(u), np.abs(v))
    if k == 2:  # triangle
        return np.minimum(v + 0.4, (0.5 - v) * 0.6 - np.abs(u))
    if k == 3:  # plus
        return np.maximum(
            np.minimum(0.18 - np.abs(u), 0.6 - np.abs(v)), np.minimum(0.18 - np.abs(v), 0.6 - np.abs(u))
        )
    if k == 4:  # ring
        return 0.14 - np.abs(r - 0.42)
    if k == 5:  # diamond
        return 0.62 - (np.abs(u) + np.abs(v))
    if k == 6:  # horizontal bar
        return np.minimum(0.2 - np.abs(v), 0.7 - np.abs(u))
    if k == 7:  # vertical bar
        return np.minimum(0.2 - np.abs(u), 0.7 - np.abs(v))
    if k == 8:  # two dots
        return np.maximum(0.25 - np.sqrt((u - 0.35) ** 2 + v**2), 0.25 - np.sqrt((u + 0.35) ** 2 + v**2))
    # x-cross
    a, b = (u + v) / math.sqrt(2), (u - v) / math.sqrt(2)
    return np.maximum(np.minimum(0.15 - np.abs(a), 0.65 - np.abs(b)), np.minimum(0.15 - np.abs(b), 0.65 - np.abs(a)))


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    h = (h % 360.0) / 60.0
    c = v * s
    x = c * (1 - abs(h % 2 - 1))
    idx = int(h) % 6
    rgb = [(c, x, 0), (x, c, 0), (0, c, x), (0, x, c), (x, 0, c), (c, 0, x)][idx]
    return np.array(rgb) + (v - c)


@dataclass
class SyntheticDomainSpec:
    """Parametric silhouette-classification domain.

    Classes are silhouettes ``(shape_offset + c) % 10``; domains differ in
    palette (hue rotation), stripe texture frequency, pixel noise and
    geometric jitter.
    """

    name: str
    seed: int
    class_count: int = 4
    image_size: int = 32
    channels: int = 3
    train_count: int = 200
    val_count: int = 100
    test_count: int = 100
    palette_rotation: float = 0.0
    texture_frequency: float = 0.0
    noise_level: float = 0.05
    jitter: float = 0.1
    shape_offset: int = 0
    domain_id: str | None = None

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigError(f"{self.name}: class_count must be >= 2")
        if self.class_count > 10:
            raise ConfigError(f"{self.name}: at most 10 silhouette classes are available")
        if self.image_size < 4 or self.channels not in (1, 3):
            raise ConfigError(f"{self.name}: invalid image geometry")
        if self.domain_id is None:
            self.domain_id = self.name

    def count(self, split: str) -> int:
        return {"train": self.train_count, "val": self.val_count, "test": self.test_count}[split]


def render_split(spec: SyntheticDomainSpec, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Images [n, C, H, W] in [0, 1] and labels [n]; a pure function of (spec, split)."""
    rng = philox(spec.seed, _SPLIT_STREAM[split])
    n, S = spec.count(split), spec.image_size
    labels = np.arange(n) % spec.class_count
    labels = labels[rng.permutation(n)]
    grid = (np.arange(S) + 0.5) / S * 2 - 1
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    images = np.empty((n, spec.channels, S, S), np.float32)
    edge = 2.0 / S
    for i in range(n):
        j = spec.jitter
        dx, dy = rng.uniform(-j, j, 2)
        scale = 1.0 + rng.uniform(-j, j) * 0.5
        theta = rng.uniform(-j, j) * math.pi / 4
        ct, st = math.cos(theta), math.sin(theta)
        u = ((xx - dx) * ct + (yy - dy) * st) / scale
        v = (-(xx - dx) * st + (yy - dy) * ct) / scale
        sdf = _shape_field(spec.shape_offset + int(labels[i]), u, v)
        mask = 1.0 / (1.0 + np.exp(-sdf / edge))
        hue = 200.0 + spec.palette_rotation + rng.uniform(-15, 15)
        fg = _hsv_to_rgb(hue, 0.75, 0.95)
        bg = _hsv_to_rgb(hue + 150.0, 0.5, 0.35)
        if spec.texture_frequency > 0:
            phase = rng.uniform(0, 2 * math.pi)
            ang = rng.uniform(0, math.pi)
            tex = 0.5 + 0.5 * np.sin(math.pi * spec.texture_frequency * (xx * math.cos(ang) + yy * math.sin(ang)) + phase)
            bg_tex = 0.6 + 0.4 * tex[None]
        else:
            bg_tex = 1.0
        img = bg[:, None, None] * bg_tex * (1 - mask[None]) + fg[:, None, None] * mask[None]
        if spec.channels == 1:
            img = img.mean(axis=0, keepdims=True)
        img = img + spec.noise_level * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels.astype(np.int64)


# manifests ------------------------------------------------------------------------


@dataclass
class DatasetManifest:
    name: str
    domain_id: str
    class_count: int
    image_shape: list[int]
    splits: dict[str, list[tuple[str, int]]]
    mean: list[float]
    std: list[float]
    root: Path | None = field(default=None, repr=False, compare=False)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        for split, entries in self.splits.items():
            for _, label in entries:
                if not 0 <= label < self.class_count:
                    raise DataError(f"{self.name}/{split}: label {label} outside [0, {self.class_count})")
        seen: set[str] = set()
        for entries in self.splits.values():
            paths = {p for p, _ in entries}
            if paths & seen:
                raise DataError(f"{self.name}: splits share images")
            seen |= paths

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("root")
        d["splits"] = {k: [[p, int(lbl)] for p, lbl in v] for k, v in self.splits.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict, root=None) -> "DatasetManifest":
        if d.get("schema_version") != SCHEMA_VERSION:
            raise FormatError(f"unsupported manifest schema_version {d.get('schema_version')!r}")
        splits = {k: [(str(p), int(lbl)) for p, lbl in v] for k, v in d["splits"].items()}
        fields = {k: d[k] for k in ("name", "domain_id", "class_count", "image_shape", "mean", "std")}
        return cls(splits=splits, root=Path(root) if root else None, **fields)

    def save(self, path) -> None:
        path = Path(path)
        blob.atomic_write(path, json.dumps(self.to_dict(), indent=1).encode())
        self.root = path.parent

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            raw = json.loads(path.read_text())
        except FileNotFoundError:
            raise DataError(f"no manifest at {path}") from None
        except ValueError as exc:
            raise FormatError(f"manifest {path} is not valid JSON: {exc}") from None
        return cls.from_dict(raw, root=path.parent)

    def blob_path(self, rel: str) -> Path:
        return (self.root or Path(".")) / rel


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(axis=(0, 2, 3), dtype=np.float64)
    std = images.std(axis=(0, 2, 3), dtype=np.float64)
    return mean, np.maximum(std, 1e-6)


def write_domain(spec: SyntheticDomainSpec, out_dir) -> DatasetManifest:
    out_dir = Path(out_dir)
    splits, train_images = {}, None
    for split in SPLITS:
        images, labels = render_split(spec, split)
        if split == "train":
            train_images = images
        entries = []
        for i, (img, lbl) in enumerate(zip(images, labels)):
            rel = f"{split}/{i:05d}.mdlt"
            blob.save(out_dir / rel, img)
            entries.append((rel, int(lbl)))
        splits[split] = entries
    mean, std = channel_stats(train_images)
    manifest = DatasetManifest(
        name=spec.name,
        domain_id=str(spec.domain_id),
        class_count=spec.class_count,
        image_shape=[spec.channels, spec.image_size, spec.image_size],
        splits=splits,
        mean=[float(m) for m in mean],
        std=[float(s) for s in std],
    )
    manifest.save(out_dir / "manifest.json")
    return manifest


def generate_synthetic_benchmark(specs, out_dir) -> list[DatasetManifest]:
    """Render every domain under ``out_dir/<name>/`` and return their manifests."""
    specs = list(specs)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("domain names must be unique")
    return [write_domain(s, Path(out_dir) / s.name) for s in specs]


def default_benchmark_specs(
    image_size: int = 32, train_count: int = 200, val_count: int = 100, test_count: int = 100, seed: int = 0
) -> list[SyntheticDomainSpec]:
    """A source domain plus three visually distinct target domains."""
    common = dict(image_size=image_size, train_count=train_count, val_count=val_count, test_count=test_count)
    return [
        SyntheticDomainSpec("source", seed, class_count=6, shape_offset=0, jitter=0.15, noise_level=0.05, **common),
        SyntheticDomainSpec("warm", seed + 1, class_count=4, shape_offset=4, palette_rotation=140,
                            texture_frequency=3.0, noise_level=0.08, jitter=0.2, **common),
        SyntheticDomainSpec("striped", seed + 2, class_count=4, shape_offset=6, palette_rotation=260,
                            texture_frequency=6.0, noise_level=0.1, jitter=0.25, **common),
        SyntheticDomainSpec("noisy", seed + 3, class_count=4, shape_offset=2, palette_rotation=60,
                            texture_frequency=1.5, noise_level=0.2, jitter=0.2, **common),
    ]


# loading ----------------------------------------------------------------------------


def normalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, np.float64)[None, :, None, None]
    std = np.asarray(std, np.float64)[None, :, None, None]
    return ((images - mean) / std).astype(np.float32)


def denormalize(images: np.ndarray, mean, std) -> np.ndarray:
    mean = np.asarray(mean, np.float64)[None, :, None, None]
    std = np.asarray(std, np.float64)[None, :, None, None]
    return (images * std + mean).astype(np.float32)


def _read_image(manifest: DatasetManifest, rel: str) -> np.ndarray:
    path = manifest.blob_path(rel)
    try:
        img = blob.load(path)
    except FileNotFoundError:
        raise DataError(f"missing blob {path}") from None
    if list(img.shape) != list(manifest.image_shape):
        raise DataError(f"blob {path} has shape {img.shape}, manifest says {manifest.image_shape}")
    return img


def load_batch(manifest: DatasetManifest, split: str, indices, normalized: bool = True):
    """(Tensor [B, C, H, W], labels [B]) for ``indices`` of ``split``, in that order."""
    if split not in manifest.splits:
        raise DataError(f"{manifest.name} has no split {split!r}")
    entries = manifest.splits[split]
    idx = [int(i) for i in indices]
    if not idx:
        raise DataError("empty index list")
    for i in idx:
        if not 0 <= i < len(entries):
            raise DataError(f"index {i} outside split {split!r} of size {len(entries)}")
    images = np.stack([_read_image(manifest, entries[i][0]) for i in idx])
    labels = np.array([entries[i][1] for i in idx], np.int64)
    if normalized:
        images = normalize(images, manifest.mean, manifest.std)
    return Tensor(images), labels


@dataclass
class ArraySplit:
    images: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class DomainData:
    name: str
    class_count: int
    train: ArraySplit
    val: ArraySplit
    test: ArraySplit

    def split(self, name: str) -> ArraySplit:
        return getattr(self, name)


def load_domain(manifest: DatasetManifest) -> DomainData:
    """Read every split of a manifest into memory, normalized."""
    splits = {}
    for split in SPLITS:
        n = len(manifest.splits.get(split, []))
        if n == 0:
            splits[split] = ArraySplit(np.zeros((0, *manifest.image_shape), np.float32), np.zeros(0, np.int64))
            continue
        x, y = load_batch(manifest, split, range(n))
        splits[split] = ArraySplit(x.data, y)
    return DomainData(manifest.name, manifest.class_count, **splits)


def domain_from_spec(spec: SyntheticDomainSpec) -> DomainData:
    """In-memory equivalent of ``write_domain`` followed by ``load_domain``."""
    raw = {s: render_split(spec, s) for s in SPLITS}
    mean, std = channel_stats(raw["train"][0])
    mean = np.array([float(m) for m in mean])
    std = np.array([float(s) for s in std])
    splits = {s: ArraySplit(normalize(x, mean, std), y) for s, (x, y) in raw.items()}
    return DomainData(spec.name, spec.class_count, **splits)


# checkpoints ----------------------------------------------------------------------------


def _safe(name: str) -> str:
    return name.replace("/", "_")


def _save_bn(root: Path, rel_dir: str, bn: dict[str, BatchNormParams]) -> dict:
    out = {}
    for name, p in bn.items():
        entry = {"epsilon": p.epsilon}
        for part, arr in (("scale", p.scale.data), ("shift", p.shift.data),
                          ("running_mean", p.running_mean), ("running_var", p.running_var)):
            rel = f"{rel_dir}/{_safe(name)}.{part}.mdlt"
            blob.save(root / rel, arr)
            entry[part] = rel
        out[name] = entry
    return out


def _load_bn(root: Path, entries: dict, trainable: bool) -> dict[str, BatchNormParams]:
    out = {}
    for name, e in entries.items():
        out[name] = BatchNormParams(
            Tensor(_blob(root, e["scale"]), trainable),
            Tensor(_blob(root, e["shift"]), trainable),
            _blob(root, e["running_mean"]),
            _blob(root, e["running_var"]),
            float(e["epsilon"]),
        )
    return out


def _blob(root: Path, rel: str) -> np.ndarray:
    try:
        return blob.load(root / rel)
    except FileNotFoundError:
        raise DataError(f"checkpoint blob missing: {root / rel}") from None


def save_checkpoint(model: MultiDomainModel, path) -> Path:
    """Directory layout: manifest.json, backbone/*.mdlt, domains/<id>/*."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    backbone = {}
    for name, fb in model.backbone.items():
        rel = f"backbone/{_safe(name)}.mdlt"
        blob.save(root / rel, fb.weights.data)
        backbone[name] = rel
    domains = {}
    for did, dm in model.domains.items():
        ddir = f"domains/{_safe(did)}"
        adapters = {}
        for site_name, adapter in dm.adapters.items():
            site = model.sites[site_name]
            rel = f"{ddir}/{_safe(site_name)}.adapter"
            blob.atomic_write(root / rel, encode_adapter(adapter, (site.out_channels, site.in_channels, site.kernel),
                                                         dm.config.get("scheme", "ones")))
            adapters[site_name] = rel
        entry = {
            "kind": dm.kind,
            "class_count": dm.class_count,
            "bn_trainable": dm.bn_trainable,
            "config": dm.config,
            "version": dm.version,
            "adapters": adapters,
            "bn": _save_bn(root, f"{ddir}/bn", dm.bn),
            "head_weight": f"{ddir}/head.weight.mdlt",
            "head_bias": f"{ddir}/head.bias.mdlt",
        }
        blob.save(root / entry["head_weight"], dm.head_weight.data)
        blob.save(root / entry["head_bias"], dm.head_bias.data)
        if dm.own_weights is not None:
            entry["own_weights"] = {}
            for name, fb in dm.own_weights.items():
                rel = f"{ddir}/weights/{_safe(name)}.mdlt"
                blob.save(root / rel, fb.weights.data)
                entry["own_weights"][name] = rel
        domains[did] = entry
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "format": "madkit-checkpoint",
        "backbone_spec": model.spec.to_dict(),
        "backbone": backbone,
        "base_bn": _save_bn(root, "backbone/bn", model.base_bn),
        "domains": domains,
    }
    blob.atomic_write(root / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True).encode())
    return root


def _site_order(entries: dict, order) -> dict:
    """Reorder a name-keyed dict to network order (the manifest stores keys sorted)."""
    rank = {name: i for i, name in enumerate(order)}
    return dict(sorted(entries.items(), key=lambda kv: rank.get(kv[0], len(rank))))


def load_checkpoint(path) -> MultiDomainModel:
    """Inverse of ``save_checkpoint``; raises before returning any partial model."""
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DataError(f"no checkpoint manifest in {root}") from None
    except ValueError as exc:
        raise FormatError(f"checkpoint manifest is not valid JSON: {exc}") from None
    if manifest.get("schema_version") != SCHEMA_VERSION or manifest.get("format") != "madkit-checkpoint":
        raise FormatError(f"unsupported checkpoint (schema_version={manifest.get('schema_version')!r})")
    spec = BackboneSpec.from_dict(manifest["backbone_spec"])
    backbone = {n: FilterBank(Tensor(_blob(root, rel)), frozen=True) for n, rel in manifest["backbone"].items()}
    backbone = _site_order(backbone, [s.name for s in spec.sites()])
    bn_order = [name for name, _ in spec.bn_sites()]
    base_bn = _site_order(_load_bn(root, manifest["base_bn"], trainable=False), bn_order)
    model = MultiDomainModel(spec, backbone, base_bn)
    for did, e in manifest["domains"].items():
        adapters = {}
        for site_name, rel in e["adapters"].items():
            try:
                adapters[site_name], _ = decode_adapter((root / rel).read_bytes())
            except FileNotFoundError:
                raise DataError(f"checkpoint adapter missing: {root / rel}") from None
        own = None
        if "own_weights" in e:
            own = {n: FilterBank(Tensor(_blob(root, rel), True), frozen=False) for n, rel in e["own_weights"].items()}
            own = _site_order(own, model.sites)
        adapters = _site_order(adapters, model.sites)
        model.domains[did] = DomainModule(
            domain_id=did,
            kind=e["kind"],
            class_count=int(e["class_count"]),
            adapters=adapters,
            bn=_site_order(_load_bn(root, e["bn"], trainable=bool(e["bn_trainable"])), bn_order),
            head_weight=Tensor(_blob(root, e["head_weight"]), True),
            head_bias=Tensor(_blob(root, e["head_bias"]), True),
            bn_trainable=bool(e["bn_trainable"]),
            config=e.get("config", {}),
            own_weights=own,
            version=int(e.get("version", 0)),
        )
    return model

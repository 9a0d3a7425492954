"""Synthetic multi-rater segmentation data with a known label distribution.

Each example is a blurred disk image. Every rater independently picks a
mode (an empty mask with probability ``empty_prob``, otherwise one of the
disk modes by its probability) and rasterises it around the example's
centre, so the exact distribution of rater maps is a finite weighted set.

On disk a dataset lives in ``<root>/images``, ``<root>/raters`` and
``<root>/manifest.json``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from ccdm.diffusion import LabelMap
from ccdm.pgm import quantize_image, read_image, read_label_map, write_image, write_label_map

MANIFEST_FORMAT = "ccdm-dataset/1"
_BINOMIAL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


class DatasetError(ValueError):
    pass


def _frac(p) -> Fraction:
    return Fraction(p) if isinstance(p, (int, Fraction)) else Fraction(str(p))


@dataclass(frozen=True)
class Mode:
    probability: str | float
    radius: float
    label: int | None = None


@dataclass(frozen=True)
class GeneratorSpec:
    height: int = 8
    width: int = 8
    num_classes: int = 2
    modes: tuple[Mode, ...] = (Mode("1/2", 1.5), Mode("1/2", 3.0))
    num_raters: int = 4
    noise: float = 0.05
    empty_prob: str | float = 0
    image_radius: float | None = None

    def __post_init__(self):
        modes = tuple(m if isinstance(m, Mode) else Mode(**m) for m in self.modes)
        object.__setattr__(self, "modes", modes)
        if self.height < 1 or self.width < 1:
            raise DatasetError("grid must be non-empty")
        if self.num_classes < 2:
            raise DatasetError("need at least two classes")
        if self.num_raters < 1:
            raise DatasetError("need at least one rater")
        if not modes:
            raise DatasetError("need at least one mode")
        if sum(_frac(m.probability) for m in modes) != 1:
            raise DatasetError("mode probabilities must sum to 1")
        if not 0 <= _frac(self.empty_prob) <= 1:
            raise DatasetError("empty_prob must lie in [0, 1]")
        for m in modes:
            if _frac(m.probability) < 0 or m.radius <= 0:
                raise DatasetError(f"invalid mode {m}")
            if m.label is not None and not 2 <= m.label <= self.num_classes:
                raise DatasetError(f"mode label {m.label} outside 2..{self.num_classes}")
        if self.noise < 0:
            raise DatasetError("noise must be non-negative")
        self.center_range()

    @property
    def disk_radius_for_image(self) -> float:
        if self.image_radius is not None:
            return float(self.image_radius)
        return float(np.mean([m.radius for m in self.modes]))

    def center_range(self) -> tuple[tuple[float, float], tuple[float, float]]:
        r = max([m.radius for m in self.modes] + [self.disk_radius_for_image])
        out = []
        for size in (self.height, self.width):
            lo, hi = r - 0.5, size - 0.5 - r
            if lo > hi:
                raise DatasetError(f"radius {r} does not fit a grid of size {size}")
            out.append((lo, hi))
        return tuple(out)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = [asdict(m) for m in self.modes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise DatasetError(f"unknown spec fields: {sorted(unknown)}")
        if "modes" in d:
            d["modes"] = tuple(Mode(**m) for m in d["modes"])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


TWO_MODE = GeneratorSpec()


@dataclass
class AnnotatedExample:
    id: str
    image: np.ndarray
    rater_maps: list[LabelMap]
    latent: dict | None = field(default=None)

    def __post_init__(self):
        if not self.rater_maps:
            raise DatasetError(f"{self.id}: example needs at least one rater map")
        if self.image.ndim == 2:
            self.image = self.image[None]
        for lm in self.rater_maps:
            if lm.shape != self.image.shape[1:]:
                raise DatasetError(f"{self.id}: rater map {lm.shape} vs image {self.image.shape}")

    @property
    def num_classes(self) -> int:
        return self.rater_maps[0].num_classes


def disk_mask(height: int, width: int, center, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width]
    return (yy - center[0]) ** 2 + (xx - center[1]) ** 2 <= radius ** 2


def blur(image: np.ndarray) -> np.ndarray:
    """Separable 5x5 binomial blur with zero padding."""
    out = np.pad(image, 2)
    out = sum(_BINOMIAL[k] * out[k:k + image.shape[0], :] for k in range(5))
    out = sum(_BINOMIAL[k] * out[:, k:k + image.shape[1]] for k in range(5))
    return out


def _choices(spec: GeneratorSpec) -> list[tuple[Fraction, Mode | None]]:
    empty = _frac(spec.empty_prob)
    out = [(empty, None)]
    out += [((1 - empty) * _frac(m.probability), m) for m in spec.modes]
    return out


def rasterize(spec: GeneratorSpec, mode: Mode | None, center) -> LabelMap:
    labels = np.ones((spec.height, spec.width), dtype=np.int64)
    if mode is not None:
        label = mode.label if mode.label is not None else spec.num_classes
        labels[disk_mask(spec.height, spec.width, center, mode.radius)] = label
    return LabelMap(labels, spec.num_classes)


def generate_example(spec: GeneratorSpec, rng: np.random.Generator, example_id: str) -> AnnotatedExample:
    (ylo, yhi), (xlo, xhi) = spec.center_range()
    center = (float(rng.uniform(ylo, yhi)), float(rng.uniform(xlo, xhi)))
    image = disk_mask(spec.height, spec.width, center, spec.disk_radius_for_image).astype(float)
    image = blur(image)
    image = quantize_image(image + spec.noise * rng.standard_normal(image.shape))
    choices = _choices(spec)
    weights = np.array([float(w) for w, _ in choices])
    picks = rng.choice(len(choices), size=spec.num_raters, p=weights / weights.sum())
    maps = [rasterize(spec, choices[k][1], center) for k in picks]
    latent = {"center": list(center), "rater_choices": [int(k) for k in picks],
              "spec": spec.to_dict()}
    return AnnotatedExample(example_id, image[None], maps, latent)


def generate_dataset(spec: GeneratorSpec, count: int, seed: int) -> list[AnnotatedExample]:
    if count < 1:
        raise DatasetError("count must be >= 1")
    rng = np.random.default_rng(seed)
    return [generate_example(spec, rng, f"ex{i:05d}") for i in range(count)]


def exact_gt_distribution(example: AnnotatedExample) -> tuple[list[LabelMap], list[Fraction]]:
    """Finite support of the rater distribution and its exact probabilities."""
    if not example.latent or "spec" not in example.latent:
        raise DatasetError(f"{example.id}: no generator parameters recorded")
    spec = GeneratorSpec.from_dict(example.latent["spec"])
    center = example.latent["center"]
    support: dict[LabelMap, Fraction] = {}
    for weight, mode in _choices(spec):
        if weight == 0:
            continue
        lm = rasterize(spec, mode, center)
        support[lm] = support.get(lm, Fraction(0)) + weight
    return list(support), list(support.values())


# -- on-disk layout -----------------------------------------------------------


def write_dataset(root, examples: list[AnnotatedExample], spec: GeneratorSpec | None = None) -> Path:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "raters").mkdir(parents=True, exist_ok=True)
    entries = []
    for ex in examples:
        img_rel = f"images/{ex.id}.pgm"
        write_image(root / img_rel, ex.image)
        raters = []
        for r, lm in enumerate(ex.rater_maps):
            rel = f"raters/{ex.id}_r{r}.pgm"
            write_label_map(root / rel, lm)
            raters.append(rel)
        entries.append({"id": ex.id, "image": img_rel, "raters": raters,
                        "num_raters": len(raters), "latent": ex.latent})
    first = examples[0]
    manifest = {
        "format": MANIFEST_FORMAT,
        "num_classes": first.num_classes,
        "grid": list(first.image.shape[1:]),
        "spec_hash": spec.digest() if spec else None,
        "spec": spec.to_dict() if spec else None,
        "examples": entries,
    }
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    tmp.replace(root / "manifest.json")
    return root / "manifest.json"


def load_manifest(path) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != MANIFEST_FORMAT:
        raise DatasetError(f"{path}: unsupported manifest format {manifest.get('format')!r}")
    return manifest, path.parent


def load_dataset(path) -> list[AnnotatedExample]:
    manifest, root = load_manifest(path)
    L = manifest["num_classes"]
    examples = []
    for e in manifest["examples"]:
        for rel in [e["image"], *e["raters"]]:
            if not (root / rel).exists():
                raise DatasetError(f"missing file listed in manifest: {root / rel}")
        if len(e["raters"]) != e["num_raters"]:
            raise DatasetError(f"{e['id']}: rater count mismatch")
        image = read_image(root / e["image"])
        maps = [read_label_map(root / rel, L) for rel in e["raters"]]
        examples.append(AnnotatedExample(e["id"], image, maps, e.get("latent")))
    return examples

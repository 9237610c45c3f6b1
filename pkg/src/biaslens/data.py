"""Procedural families of small image datasets with shared content factors.

Every dataset in a family draws the same kind of scene, a colored disc on a
dark background, controlled by a 4-vector content factor (position x/y,
size, hue). Datasets differ only through their style map (palette shift,
blur, noise, brightness) and an optional content-marginal skew, so the
"same content rendered under different dataset biases" question has a
ground truth to score against.

Rendering pipeline, in order: rasterize disc, add palette shift, add
brightness, add noise, Gaussian blur, clamp to [0, 1]. Blur comes last so
low-quality datasets look smooth rather than grainy. Every sample is a pure
function of (family seed, dataset name, sample index).

Geometry notes: the disc center stays at least one radius inside the
canvas and the hue arc spans 0..120 degrees, where green-minus-red is an
exactly linear function of the hue factor. Both choices keep the content
factors recoverable by the linear probes used for evaluation.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import BiasLensError, StyleRangeError
from .rng import RngStream

IMG_SIZE = 16
CONTENT_DIM = 4
PIXEL_DIM = IMG_SIZE * IMG_SIZE * 3
CONTENT_NAMES = ("pos_x", "pos_y", "size", "hue")

_BG = 0.12
_COLOR_MAX = 0.75
_CENTER = IMG_SIZE / 2.0
_POS_SCALE = 3.0
_RADIUS_MID = 3.75
_RADIUS_SPAN = 0.75

FORMAT_VERSION = 1


@dataclass
class StyleMap:
    """Dataset-specific rendering transform plus optional curation skew.

    `noise` is added before the blur (texture that degrades with quality);
    `grain` is added after it (sensor noise present at any quality level).
    """

    palette: tuple[float, float, float] = (0.0, 0.0, 0.0)
    blur: float = 0.0
    noise: float = 0.0
    grain: float = 0.0
    brightness: float = 0.0
    skew_dim: int | None = None
    skew_weight: float = 1.0

    def validate(self) -> None:
        if not (0.0 <= self.blur <= 4.0):
            raise StyleRangeError(f"blur {self.blur} outside [0, 4]")
        if not (0.0 <= self.noise <= 0.5):
            raise StyleRangeError(f"noise {self.noise} outside [0, 0.5]")
        if not (0.0 <= self.grain <= 0.5):
            raise StyleRangeError(f"grain {self.grain} outside [0, 0.5]")
        if any(abs(p) > 0.25 for p in self.palette):
            raise StyleRangeError(f"palette shift {self.palette} outside [-0.25, 0.25]")
        if abs(self.brightness) > 0.25:
            raise StyleRangeError(f"brightness {self.brightness} outside [-0.25, 0.25]")
        if self.skew_dim is not None and not (0 <= self.skew_dim < CONTENT_DIM):
            raise StyleRangeError(f"skew_dim {self.skew_dim} outside 0..{CONTENT_DIM - 1}")
        if not (0.0 < self.skew_weight <= 16.0):
            raise StyleRangeError(f"skew_weight {self.skew_weight} outside (0, 16]")

    def to_dict(self) -> dict:
        return {
            "palette": list(self.palette),
            "blur": self.blur,
            "noise": self.noise,
            "grain": self.grain,
            "brightness": self.brightness,
            "skew_dim": self.skew_dim,
            "skew_weight": self.skew_weight,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StyleMap":
        return cls(
            palette=tuple(d.get("palette", (0.0, 0.0, 0.0))),
            blur=float(d.get("blur", 0.0)),
            noise=float(d.get("noise", 0.0)),
            grain=float(d.get("grain", 0.0)),
            brightness=float(d.get("brightness", 0.0)),
            skew_dim=d.get("skew_dim"),
            skew_weight=float(d.get("skew_weight", 1.0)),
        )

    def describe(self) -> str:
        parts = [f"blur {self.blur:g}px", f"noise {self.noise:g}"]
        if self.brightness:
            parts.append(f"brightness {self.brightness:+g}")
        if any(self.palette):
            parts.append("palette shift")
        if self.skew_dim is not None and self.skew_weight != 1.0:
            parts.append(f"{CONTENT_NAMES[self.skew_dim]}>0 oversampled {self.skew_weight:g}:1")
        return ", ".join(parts)


@dataclass
class DatasetSpec:
    name: str
    id: int
    style: StyleMap = field(default_factory=StyleMap)
    count: int = 2000

    def to_dict(self) -> dict:
        return {"name": self.name, "id": self.id, "count": self.count, "style": self.style.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(name=d["name"], id=int(d["id"]), style=StyleMap.from_dict(d["style"]), count=int(d["count"]))


def default_family(count: int = 2000) -> list[DatasetSpec]:
    """Three datasets: a blurry one, a clean one, and one with a warm bright
    palette whose content marginal oversamples large discs 1.6:1."""
    return [
        DatasetSpec("lowq", 0, StyleMap(palette=(-0.04, 0.0, 0.04), blur=1.2, grain=0.02), count),
        DatasetSpec("highq", 1, StyleMap(grain=0.02), count),
        DatasetSpec(
            "skewed",
            2,
            StyleMap(
                palette=(0.07, 0.02, 0.0), blur=0.5, grain=0.02, brightness=0.10, skew_dim=2, skew_weight=1.6
            ),
            count,
        ),
    ]


def _hue_color(hue: float) -> np.ndarray:
    """Map hue in [-1, 1] onto a 120-degree red..green arc (max channel 0.75)."""
    deg = 60.0 * (hue + 1.0)
    if deg <= 60.0:
        rgb = np.array([1.0, deg / 60.0, 0.0])
    else:
        rgb = np.array([1.0 - (deg - 60.0) / 60.0, 1.0, 0.0])
    return _COLOR_MAX * rgb


def render(c: np.ndarray, style: StyleMap, rng: RngStream) -> np.ndarray:
    """Draw one observation for content `c` under `style`; returns (16, 16, 3)."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape != (CONTENT_DIM,) or np.any(np.abs(c) > 1.0 + 1e-12):
        raise BiasLensError(f"content factor out of range: {c}")
    style.validate()

    cx = _CENTER + _POS_SCALE * c[0]
    cy = _CENTER + _POS_SCALE * c[1]
    radius = _RADIUS_MID + _RADIUS_SPAN * c[2]
    color = _hue_color(c[3])

    coords = np.arange(IMG_SIZE) + 0.5
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    dist = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2)
    coverage = np.clip(radius + 0.5 - dist, 0.0, 1.0)

    img = _BG + coverage[:, :, None] * (color[None, None, :] - _BG)
    img = img + np.asarray(style.palette)[None, None, :]
    img = img + style.brightness
    if style.noise > 0:
        img = img + style.noise * rng.normal(size=img.shape)
    if style.blur > 0:
        img = gaussian_filter(img, sigma=(style.blur, style.blur, 0.0), mode="nearest", truncate=3.0)
    if style.grain > 0:
        img = img + style.grain * rng.normal(size=img.shape)
    return np.clip(img, 0.0, 1.0)


def sample_content(style: StyleMap, rng: RngStream) -> np.ndarray:
    """Uniform content factor, skewed by rejection when the style asks for it."""
    wmax = max(style.skew_weight, 1.0)
    while True:
        c = rng.uniform(-1.0, 1.0, size=CONTENT_DIM)
        if style.skew_dim is None:
            return c
        w = style.skew_weight if c[style.skew_dim] > 0 else 1.0
        if rng.uniform() * wmax <= w:
            return c


def make_observation(spec: DatasetSpec, seed: int, index: int) -> tuple[np.ndarray, np.ndarray]:
    """(pixels flat (768,), content (4,)) for sample `index`; pure in its arguments."""
    stream = RngStream(seed, f"data/{spec.name}/{index}")
    c = sample_content(spec.style, stream.split("content"))
    img = render(c, spec.style, stream.split("render"))
    return img.reshape(-1), c


@dataclass
class SampleSet:
    """Flat pixel rows plus labels and (evaluation-only) ground-truth content."""

    pixels: np.ndarray  # (n, 768) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    content: np.ndarray  # (n, 4) float64

    def __len__(self) -> int:
        return self.pixels.shape[0]

    def images(self) -> np.ndarray:
        return self.pixels.reshape(-1, IMG_SIZE, IMG_SIZE, 3)

    def subset(self, idx: np.ndarray) -> "SampleSet":
        return SampleSet(self.pixels[idx], self.labels[idx], self.content[idx])

    def for_label(self, label: int) -> "SampleSet":
        return self.subset(np.flatnonzero(self.labels == label))


def generate_dataset(spec: DatasetSpec, seed: int) -> SampleSet:
    pixels = np.empty((spec.count, PIXEL_DIM))
    content = np.empty((spec.count, CONTENT_DIM))
    for i in range(spec.count):
        pixels[i], content[i] = make_observation(spec, seed, i)
    labels = np.full(spec.count, spec.id, dtype=np.int64)
    return SampleSet(pixels, labels, content)


def generate_family(specs: list[DatasetSpec], out_dir: str | Path, seed: int) -> Path:
    """Write one binary sample file per dataset plus manifest.json; returns the
    manifest path. Same specs and seed always produce identical bytes."""
    if len(specs) < 2:
        raise BiasLensError("a family needs at least two dataset specs")
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise BiasLensError(f"duplicate dataset names: {names}")
    if sorted(s.id for s in specs) != list(range(len(specs))):
        raise BiasLensError("dataset ids must be dense 0..n-1")
    for s in specs:
        s.style.validate()

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in sorted(specs, key=lambda s: s.id):
        ds = generate_dataset(spec, seed)
        fname = f"{spec.name}.samples"
        _write_samples(out / fname, ds)
        entry = spec.to_dict()
        entry["file"] = fname
        entries.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": seed,
        "image_size": IMG_SIZE,
        "content_dim": CONTENT_DIM,
        "datasets": entries,
    }
    manifest_path = out / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest_path


def _write_samples(path: Path, ds: SampleSet) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(ds)))
        for i in range(len(ds)):
            f.write(ds.pixels[i].astype("<f8").tobytes())
            f.write(struct.pack("<I", int(ds.labels[i])))
            f.write(ds.content[i].astype("<f8").tobytes())


def _read_samples(path: Path, expect_label: int) -> SampleSet:
    buf = path.read_bytes()
    (count,) = struct.unpack_from("<I", buf, 0)
    rec = 8 * PIXEL_DIM + 4 + 8 * CONTENT_DIM
    if len(buf) != 4 + count * rec:
        raise BiasLensError(f"sample file {path} truncated")
    pixels = np.empty((count, PIXEL_DIM))
    labels = np.empty(count, dtype=np.int64)
    content = np.empty((count, CONTENT_DIM))
    off = 4
    for i in range(count):
        pixels[i] = np.frombuffer(buf, dtype="<f8", count=PIXEL_DIM, offset=off)
        off += 8 * PIXEL_DIM
        (labels[i],) = struct.unpack_from("<I", buf, off)
        off += 4
        content[i] = np.frombuffer(buf, dtype="<f8", count=CONTENT_DIM, offset=off)
        off += 8 * CONTENT_DIM
    if np.any(labels != expect_label):
        raise BiasLensError(f"label mismatch in {path}")
    return SampleSet(pixels, labels, content)


def load_family(data_dir: str | Path) -> tuple[list[DatasetSpec], SampleSet]:
    """Read manifest.json plus sample files; returns (registry, union set)."""
    data_dir = Path(data_dir)
    manifest = json.loads((data_dir / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise BiasLensError(f"unknown manifest format_version {manifest.get('format_version')}")
    specs = [DatasetSpec.from_dict(d) for d in manifest["datasets"]]
    specs.sort(key=lambda s: s.id)
    sets = [_read_samples(data_dir / d["file"], d["id"]) for d in sorted(manifest["datasets"], key=lambda d: d["id"])]
    union = SampleSet(
        np.concatenate([s.pixels for s in sets]),
        np.concatenate([s.labels for s in sets]),
        np.concatenate([s.content for s in sets]),
    )
    return specs, union


def split(ds: SampleSet, ratio: float, seed: int) -> tuple[SampleSet, SampleSet]:
    """Stratified-by-label disjoint (train, val) split; `ratio` is the train share."""
    if not (0.0 < ratio < 1.0):
        raise BiasLensError(f"split ratio {ratio} outside (0, 1)")
    rng = RngStream(seed, "split")
    train_idx, val_idx = [], []
    for label in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == label)
        perm = idx[rng.split(int(label)).permutation(idx.size)]
        k = int(idx.size * ratio)
        train_idx.append(perm[:k])
        val_idx.append(perm[k:])
    train = ds.subset(np.concatenate(train_idx))
    val = ds.subset(np.concatenate(val_idx))
    if len(train) == 0 or len(val) == 0:
        raise BiasLensError("split produced an empty side")
    return train, val

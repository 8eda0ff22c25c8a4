"""Synthetic dual-window images, PGM I/O and manifest ingestion.

Each synthetic image starts as a latent attenuation field in HU-like units
(roughly [-1000, 1000]): textured lung parenchyma, a soft-tissue rim, and a
class-dependent number of dense nodules. The same latent field is rendered
through two intensity windows, giving two domains that share labels and
differ only in contrast.
"""
from __future__ import annotations

import csv
import io
import logging
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ["path", "label", "domain", "split"]


class DataConfigError(ValueError):
    pass


class PGMParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.reason = message
        self.offset = offset


@dataclass(frozen=True)
class WindowSpec:
    center: float
    width: float

    def __post_init__(self):
        if not self.width > 0:
            raise DataConfigError(f"window width must be > 0, got {self.width}")


MEDIASTINAL = WindowSpec(40.0, 400.0)
LUNG = WindowSpec(-600.0, 1500.0)


def window_transform(latent: np.ndarray, window: WindowSpec) -> np.ndarray:
    if not window.width > 0:
        raise DataConfigError(f"window width must be > 0, got {window.width}")
    low = window.center - window.width / 2.0
    return np.clip((np.asarray(latent, dtype=np.float64) - low) / window.width, 0.0, 1.0)


@dataclass(frozen=True)
class SynthDatasetSpec:
    n_images: int = 720
    height: int = 16
    width: int = 16
    n_classes: int = 2
    windows: tuple[WindowSpec, ...] = (MEDIASTINAL, LUNG)
    seed: int = 0
    split: tuple[float, float, float] = (0.7, 0.1, 0.2)

    def validate(self, patch: int | None = None) -> None:
        if self.n_images < 1 or self.n_classes < 2:
            raise DataConfigError("need n_images >= 1 and n_classes >= 2")
        if patch and (self.height % patch or self.width % patch):
            raise DataConfigError(f"image {self.height}x{self.width} not divisible by patch {patch}")
        if abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise DataConfigError(f"split fractions must be >= 0 and sum to 1, got {self.split}")


def _smooth_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    coarse = rng.normal(size=(h // cell + 2, w // cell + 2))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0, x0 = ys.astype(int), xs.astype(int)
    fy, fx = (ys - y0)[:, None], (xs - x0)[None, :]
    c00 = coarse[np.ix_(y0, x0)]
    c01 = coarse[np.ix_(y0, x0 + 1)]
    c10 = coarse[np.ix_(y0 + 1, x0)]
    c11 = coarse[np.ix_(y0 + 1, x0 + 1)]
    return (1 - fy) * ((1 - fx) * c00 + fx * c01) + fy * ((1 - fx) * c10 + fx * c11)


def latent_field(rng: np.random.Generator, h: int, w: int, label: int) -> np.ndarray:
    """One HU-like latent image; class ``label`` carries 1 + 2*label nodules."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    field_ = -850.0 + 110.0 * _smooth_noise(rng, h, w, max(2, h // 4)) + 25.0 * rng.normal(size=(h, w))
    # soft-tissue rim around the lung
    rim = max(1, h // 8)
    edge = (yy < rim) | (yy >= h - rim) | (xx < rim) | (xx >= w - rim)
    field_[edge] = 30.0 + 15.0 * rng.normal(size=int(edge.sum()))
    for _ in range(1 + 2 * label):
        cy = rng.uniform(rim + 1, h - rim - 1)
        cx = rng.uniform(rim + 1, w - rim - 1)
        radius = rng.uniform(0.09, 0.15) * h
        density = rng.uniform(60.0, 160.0)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
        field_ = np.maximum(field_, field_ * (1 - blob) + density * blob)
    return np.clip(field_, -1000.0, 1000.0)


def _assign_splits(n: int, fractions, rng: np.random.Generator) -> list[str]:
    order = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    names = np.empty(n, dtype=object)
    names[order[:n_train]] = "train"
    names[order[n_train : n_train + n_val]] = "val"
    names[order[n_train + n_val :]] = "test"
    return list(names)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def _pgm_token(blob: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(blob):
        ch = blob[pos : pos + 1]
        if ch == b"#":
            end = blob.find(b"\n", pos)
            pos = len(blob) if end < 0 else end + 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(blob) and not blob[pos : pos + 1].isspace() and blob[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PGMParseError("unexpected end of PGM header", start)
    return blob[start:pos], pos


def parse_pgm(blob: bytes) -> np.ndarray:
    """Decode an 8-bit binary PGM into floats in [0, 1]."""
    if blob[:2] != b"P5":
        found = blob[:2].decode("ascii", "replace")
        raise PGMParseError(f"expected PGM magic 'P5', found {found!r}", 0)
    pos = 2
    values = []
    for name in ("width", "height", "maxval"):
        token, new_pos = _pgm_token(blob, pos)
        if not token.isdigit():
            raise PGMParseError(f"PGM {name} is not a number: {token!r}", pos)
        values.append(int(token))
        pos = new_pos
    width, height, maxval = values
    if width < 1 or height < 1:
        raise PGMParseError(f"PGM dimensions must be positive, got {width}x{height}", 2)
    if not 0 < maxval < 256:
        raise PGMParseError(f"only 8-bit PGM is supported, maxval={maxval}", pos)
    if pos >= len(blob) or not blob[pos : pos + 1].isspace():
        raise PGMParseError("missing whitespace after PGM maxval", pos)
    pos += 1
    need = width * height
    if len(blob) - pos != need:
        raise PGMParseError(f"PGM raster has {len(blob) - pos} bytes, expected {need}", pos)
    raster = np.frombuffer(blob, dtype=np.uint8, offset=pos).reshape(height, width)
    return raster.astype(np.float32) / np.float32(maxval)


def read_pgm(path: str | Path) -> np.ndarray:
    return parse_pgm(Path(path).read_bytes())


def generate_synth(spec: SynthDatasetSpec, out_dir: str | Path, force: bool = False) -> Path:
    """Render the dataset to ``out_dir`` as PGM files plus ``manifest.csv``."""
    spec.validate()
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise FileExistsError(f"{out} exists and is not empty; pass --force to overwrite")
        shutil.rmtree(out)
    rng = np.random.default_rng(spec.seed)
    labels = np.arange(spec.n_images) % spec.n_classes
    labels = labels[rng.permutation(spec.n_images)]
    splits = _assign_splits(spec.n_images, spec.split, rng)
    rows = []
    for d in range(len(spec.windows)):
        (out / "images" / f"d{d + 1}").mkdir(parents=True, exist_ok=True)
    for i in range(spec.n_images):
        img_rng = np.random.default_rng([spec.seed, i])
        latent = latent_field(img_rng, spec.height, spec.width, int(labels[i]))
        for d, window in enumerate(spec.windows):
            rel = f"images/d{d + 1}/{i:05d}.pgm"
            write_pgm(out / rel, to_uint8(window_transform(latent, window)))
            rows.append((d, i, {"path": rel, "label": int(labels[i]), "domain": f"d{d + 1}", "split": splits[i]}))
    rows.sort(key=lambda r: (r[0], r[1]))
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
    writer.writeheader()
    for _, _, row in rows:
        writer.writerow(row)
    (out / MANIFEST).write_text(buf.getvalue(), encoding="utf-8", newline="")
    log.info("wrote %d images to %s", len(rows), out)
    return out


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W, C) float32 in [0, 1]
    labels: np.ndarray
    domains: np.ndarray
    splits: np.ndarray
    paths: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, domain: str | None = None, split: str | None = None) -> "Dataset":
        keep = np.ones(len(self), dtype=bool)
        if domain is not None:
            wanted = [domain] if isinstance(domain, str) else list(domain)
            keep &= np.isin(self.domains, wanted)
        if split is not None:
            keep &= self.splits == split
        idx = np.flatnonzero(keep)
        return Dataset(
            self.images[idx], self.labels[idx], self.domains[idx], self.splits[idx], [self.paths[i] for i in idx]
        )


def ingest(path: str | Path, shape: tuple[int, int, int] | None = None) -> Dataset:
    """Load a manifest directory; images are checked against ``shape`` (H, W, C)."""
    root = Path(path)
    manifest = root / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    with manifest.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"path", "label", "domain"} - set(reader.fieldnames or [])
        if missing:
            raise DataConfigError(f"manifest lacks columns {sorted(missing)}")
        rows = list(reader)
    images, labels, domains, splits = [], [], [], []
    for row in rows:
        try:
            img = read_pgm(root / row["path"])
        except PGMParseError as exc:
            raise PGMParseError(f"{row['path']}: {exc.reason}", exc.offset) from None
        img = img[:, :, None]
        if shape is not None and img.shape != tuple(shape):
            raise DataConfigError(f"{row['path']}: image shape {img.shape} does not match model {tuple(shape)}")
        images.append(img)
        labels.append(int(row["label"]))
        domains.append(row["domain"])
        splits.append(row.get("split") or "train")
    if not images:
        raise DataConfigError(f"manifest {manifest} lists no images")
    if len({im.shape for im in images}) != 1:
        raise DataConfigError("images in the manifest have differing shapes")
    return Dataset(
        np.stack(images).astype(np.float32),
        np.array(labels),
        np.array(domains),
        np.array(splits),
        [r["path"] for r in rows],
    )

"""Annotated images, JSONL manifests, PGM/PNG ingestion and synthetic crowds.

Manifest format, one JSON object per line::

    {"id": "img_0001", "image": "images/img_0001.pgm", "heads": [[x, y], ...]}

Image paths are relative to the manifest; head coordinates are pixels with
the origin at the top-left corner.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .density import HeadPoint, as_points
from .errors import DataError
from .tensor import make_rng

MANIFEST_NAME = "manifest.jsonl"


@dataclass
class AnnotatedImage:
    id: str
    image: np.ndarray  # (1, 1, H, W) in [0, 1]
    heads: list[HeadPoint] = field(default_factory=list)

    def __post_init__(self):
        self.heads = as_points(self.heads)
        if self.image.ndim != 4 or self.image.shape[:2] != (1, 1):
            raise DataError(f"{self.id}: image must have shape (1, 1, H, W), got {self.image.shape}")
        if self.image.size and (self.image.min() < 0 or self.image.max() > 1):
            raise DataError(f"{self.id}: image values must lie in [0, 1]")
        H, W = self.shape
        for p in self.heads:
            if not (0 <= p.x < W and 0 <= p.y < H):
                raise DataError(f"{self.id}: head ({p.x}, {p.y}) outside the {W}x{H} image")

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[2], self.image.shape[3]

    @property
    def count(self) -> int:
        return len(self.heads)


@dataclass
class Dataset:
    records: list[AnnotatedImage]
    source: str = ""

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def __iter__(self):
        return iter(self.records)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.records[i] for i in indices], self.source)


# -- image files ------------------------------------------------------------


def _pgm_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError("truncated PGM header")
        tokens.append(data[start:pos])
    return tokens, pos + 1  # a single whitespace byte ends the header


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary (P5) PGM as a float array scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens, pos = _pgm_tokens(data, 4)
    if tokens[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    pixels = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos)
    return pixels.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Write values in [0, 1] as an 8-bit P5 PGM."""
    g = np.asarray(image, dtype=np.float64)
    g = g.reshape(g.shape[-2], g.shape[-1])
    pixels = np.clip(np.rint(g * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P5\n{g.shape[1]} {g.shape[0]}\n255\n".encode("ascii") + pixels.tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Load a PGM or PNG as a (1, 1, H, W) grayscale tensor in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".pnm"):
        g = read_pgm(path)
    else:
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "I;16", "I") else im)
        if arr.ndim == 3:
            arr = arr[..., :3].astype(np.float64) @ np.array([0.299, 0.587, 0.114])
            g = arr / 255.0
        else:
            g = arr.astype(np.float64) / (65535.0 if arr.dtype != np.uint8 else 255.0)
    return g.reshape(1, 1, *g.shape)


# -- manifests --------------------------------------------------------------


def load_dataset(manifest: str | Path) -> Dataset:
    manifest = Path(manifest)
    if not manifest.is_file():
        raise DataError(f"manifest not found: {manifest}")
    records = []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            rec_id, rel, heads = str(entry["id"]), entry["image"], entry["heads"]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise DataError(f"{manifest}:{lineno}: malformed record ({exc})") from exc
        path = manifest.parent / rel
        if not path.is_file():
            raise DataError(f"{manifest}:{lineno}: image not found: {path}")
        try:
            records.append(AnnotatedImage(rec_id, read_image(path), [(float(x), float(y)) for x, y in heads]))
        except (DataError, ValueError, TypeError) as exc:
            raise DataError(f"{manifest}:{lineno}: {exc}") from exc
    if not records:
        raise DataError(f"{manifest}: manifest contains no records")
    return Dataset(records, str(manifest))


def write_dataset(dataset: Dataset, out_dir: str | Path, force: bool = False) -> Path:
    """Write images as 8-bit PGM plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    manifest = out_dir / MANIFEST_NAME
    if manifest.exists() and not force:
        raise FileExistsError(f"{manifest} already exists (pass force=True to overwrite)")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in dataset:
        rel = f"images/{rec.id}.pgm"
        write_pgm(out_dir / rel, rec.image)
        lines.append(json.dumps({"id": rec.id, "image": rel, "heads": [[p.x, p.y] for p in rec.heads]}))
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest


read_dataset = load_dataset


# -- synthetic crowds -------------------------------------------------------

DISC_RADIUS = 2
DISC_DIP = 0.5
MIN_SEPARATION = 4.0
BACKGROUND = 0.8
NOISE_STD = 0.03


def _place_heads(rng: np.random.Generator, count: int, H: int, W: int, max_tries: int) -> list[tuple[int, int]]:
    placed: list[tuple[int, int]] = []
    tries = 0
    while len(placed) < count:
        if tries >= max_tries:
            raise DataError(f"could not place {count} heads {MIN_SEPARATION} px apart in {W}x{H} after {tries} tries")
        tries += 1
        x, y = int(rng.integers(0, W)), int(rng.integers(0, H))
        if all((x - px) ** 2 + (y - py) ** 2 >= MIN_SEPARATION**2 for px, py in placed):
            placed.append((x, y))
    return placed


def render_scene(heads, H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    """Light noisy background with a dark disc (pixels closer than DISC_RADIUS) per head."""
    img = BACKGROUND + NOISE_STD * rng.standard_normal((H, W))
    yy, xx = np.mgrid[0:H, 0:W]
    mask = np.zeros((H, W), dtype=bool)
    for p in as_points(heads):
        mask |= (xx - p.x) ** 2 + (yy - p.y) ** 2 < DISC_RADIUS**2
    img[mask] -= DISC_DIP
    return np.clip(img, 0.0, 1.0).reshape(1, 1, H, W)


def synth_generate(seed: int, n_images: int, H: int, W: int, count_range: tuple[int, int]) -> Dataset:
    lo, hi = count_range
    if not 0 <= lo <= hi <= H * W // 64:
        raise DataError(f"count range {count_range} must satisfy 0 <= min <= max <= {H * W // 64}")
    rng = make_rng(seed)
    records = []
    for i in range(n_images):
        count = int(rng.integers(lo, hi + 1))
        heads = _place_heads(rng, count, H, W, max_tries=1000 + 200 * count)
        points = [HeadPoint(float(x), float(y)) for x, y in heads]
        records.append(AnnotatedImage(f"synth{seed}_{i:04d}", render_scene(points, H, W, rng), points))
    return Dataset(records, f"synth seed={seed}")

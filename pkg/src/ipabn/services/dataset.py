"""Labelled single-channel image sets for the training demo.

Sources: a synthetic two-Gaussian spec (`synthetic` or
`synthetic:n=256,size=8,separation=1.0,seed=0`), a local file, or an http(s)
URL. Files use a small binary layout, little endian:

    b"IPDS" | u32 count | u32 height | u32 width | u32 classes | count*h*w uint8 pixels | count uint8 labels

Pixels decode to [0, 1] (value / 255).
"""

from __future__ import annotations

import hashlib
import logging
import os
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import httpx
import numpy as np
from cachetools import TTLCache

from ipabn.errors import DatasetError

logger = logging.getLogger(__name__)

MAGIC = b"IPDS"
HEADER = struct.Struct("<4sIIII")
MAX_CLASSES = 256
DATASET_CACHE_TTL_SECONDS = 60 * 60 * 24
CACHE_DIR = Path(os.environ.get("IPABN_CACHE_DIR", ".cache"))
HTTP_TIMEOUT = float(os.environ.get("IPABN_HTTP_TIMEOUT", "30"))
MAX_DOWNLOAD_BYTES = 64 * 1024 * 1024

SYNTHETIC_DEFAULTS = {"n": 256, "size": 8, "separation": 1.0, "noise": 1.0, "seed": 0}


@dataclass(frozen=True)
class LabeledImages:
    images: np.ndarray  # (n, 1, h, w) float64
    labels: np.ndarray  # (n,) int64
    classes: int

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1] != 1:
            raise DatasetError(f"images must be (n, 1, h, w), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DatasetError(f"{self.labels.shape[0]} labels for {self.images.shape[0]} images")
        if not 2 <= self.classes <= MAX_CLASSES:
            raise DatasetError(f"class count must lie in [2, {MAX_CLASSES}], got {self.classes}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise DatasetError(f"labels must lie in [0, {self.classes}), got range [{self.labels.min()}, {self.labels.max()}]")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def split(self, eval_fraction: float) -> tuple["LabeledImages", "LabeledImages"]:
        """Head for training, tail held out."""
        if not 0.0 <= eval_fraction < 1.0:
            raise DatasetError(f"eval fraction must lie in [0, 1), got {eval_fraction}")
        cut = len(self) - int(round(len(self) * eval_fraction))
        return (
            LabeledImages(self.images[:cut], self.labels[:cut], self.classes),
            LabeledImages(self.images[cut:], self.labels[cut:], self.classes),
        )


def synthetic_two_gaussians(
    n: int = 256,
    size: int = 8,
    separation: float = 1.0,
    noise: float = 1.0,
    seed: int = 0,
) -> LabeledImages:
    """Balanced two-class images: class 0 pixels ~ N(-separation/2, noise),
    class 1 ~ N(+separation/2, noise), shuffled."""
    if n < 2 or size < 1:
        raise DatasetError(f"synthetic set needs n >= 2 and size >= 1, got n={n}, size={size}")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2).astype(np.int64)
    means = np.where(labels == 1, separation / 2.0, -separation / 2.0)
    images = rng.normal(0.0, noise, (n, 1, size, size)) + means[:, None, None, None]
    return LabeledImages(images, labels, 2)


def parse_synthetic_spec(spec: str) -> LabeledImages:
    _, _, params = spec.partition(":")
    options = dict(SYNTHETIC_DEFAULTS)
    for item in filter(None, (p.strip() for p in params.split(","))):
        key, sep, value = item.partition("=")
        if not sep or key not in options:
            raise DatasetError(f"bad synthetic option {item!r}; known keys {sorted(options)}")
        try:
            options[key] = type(SYNTHETIC_DEFAULTS[key])(value)
        except ValueError:
            raise DatasetError(f"synthetic option {key} needs a number, got {value!r}") from None
    return synthetic_two_gaussians(**options)


def encode_dataset(data: LabeledImages) -> bytes:
    n, _, h, w = data.images.shape
    pixels = np.clip(np.rint(data.images * 255.0), 0, 255).astype(np.uint8)
    return HEADER.pack(MAGIC, n, h, w, data.classes) + pixels.tobytes() + data.labels.astype(np.uint8).tobytes()


def decode_dataset(raw: bytes) -> LabeledImages:
    if len(raw) < HEADER.size:
        raise DatasetError(f"dataset is {len(raw)} bytes, shorter than the {HEADER.size}-byte header")
    magic, n, h, w, classes = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}; expected {MAGIC!r}")
    if n < 1 or h < 1 or w < 1:
        raise DatasetError(f"dataset header declares count={n}, height={h}, width={w}; all must be >= 1")
    expected = HEADER.size + n * h * w + n
    if len(raw) != expected:
        raise DatasetError(f"dataset body is {len(raw)} bytes, header implies {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=HEADER.size)
    labels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=HEADER.size + n * h * w)
    images = pixels.reshape(n, 1, h, w).astype(np.float64) / 255.0
    return LabeledImages(images, labels.astype(np.int64), classes)


def _read_fresh_cache(cache_file: Path) -> bytes | None:
    try:
        if cache_file.exists() and time.time() - cache_file.stat().st_mtime < DATASET_CACHE_TTL_SECONDS:
            return cache_file.read_bytes()
    except OSError:
        pass
    return None


def _write_cache(cache_file: Path, raw: bytes) -> None:
    """Best-effort; a read-only filesystem must not fail the load."""
    try:
        cache_file.parent.mkdir(parents=True, exist_ok=True)
        cache_file.write_bytes(raw)
    except OSError:
        pass


class DatasetLoader:
    def __init__(
        self,
        cache_dir: Path | None = None,
        timeout: float = HTTP_TIMEOUT,
        transport: httpx.BaseTransport | None = None,
    ) -> None:
        self._cache_dir = cache_dir if cache_dir is not None else CACHE_DIR
        self._timeout = timeout
        self._transport = transport
        self._memory: TTLCache = TTLCache(maxsize=8, ttl=DATASET_CACHE_TTL_SECONDS)

    def load(self, source: str) -> LabeledImages:
        if source in self._memory:
            return self._memory[source]
        if source == "synthetic" or source.startswith("synthetic:"):
            data = parse_synthetic_spec(source)
        elif source.startswith(("http://", "https://")):
            data = decode_dataset(self._download(source))
        else:
            try:
                raw = Path(source).read_bytes()
            except OSError as exc:
                raise DatasetError(f"cannot read dataset {source!r} ({type(exc).__name__})") from exc
            data = decode_dataset(raw)
        logger.info("dataset %s: %d images of %s, %d classes", source, len(data), data.images.shape[2:], data.classes)
        self._memory[source] = data
        return data

    def _download(self, url: str) -> bytes:
        cache_file = self._cache_dir / f"dataset-{hashlib.sha256(url.encode()).hexdigest()[:16]}.ipds"
        cached = _read_fresh_cache(cache_file)
        if cached is not None:
            logger.debug("dataset disk cache hit %s", cache_file)
            return cached

        transport = self._transport or httpx.HTTPTransport(retries=2)
        try:
            with httpx.Client(timeout=self._timeout, transport=transport, follow_redirects=True) as client:
                response = client.get(url)
                response.raise_for_status()
        except httpx.HTTPError as exc:
            raise DatasetError(f"dataset download from {url} failed ({type(exc).__name__}); retry or use a local file") from exc
        raw = response.content
        if len(raw) > MAX_DOWNLOAD_BYTES:
            raise DatasetError(f"dataset at {url} is {len(raw)} bytes, above the {MAX_DOWNLOAD_BYTES}-byte limit")
        decode_dataset(raw)
        _write_cache(cache_file, raw)
        logger.info("downloaded dataset %s (%d bytes)", url, len(raw))
        return raw

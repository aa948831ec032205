"""Slice 6: training data: synthetic sets, binary codec, file/URL loading."""

import httpx
import numpy as np
import pytest

from ipabn.errors import DatasetError
from ipabn.services.dataset import (
    HEADER,
    MAGIC,
    DatasetLoader,
    LabeledImages,
    _write_cache,
    decode_dataset,
    encode_dataset,
    parse_synthetic_spec,
    synthetic_two_gaussians,
)


def small_set():
    images = np.linspace(0.0, 1.0, 3 * 2 * 2).reshape(3, 1, 2, 2)
    return LabeledImages(images, np.array([0, 1, 1]), 2)


class TestSynthetic:
    def test_balanced_and_separated(self):
        data = synthetic_two_gaussians(n=200, size=8, separation=2.0, seed=3)
        assert data.images.shape == (200, 1, 8, 8)
        assert np.bincount(data.labels).tolist() == [100, 100]
        means = data.images.mean(axis=(1, 2, 3))
        assert means[data.labels == 1].mean() > 0.5 > means[data.labels == 0].mean() + 1.0

    def test_seeded(self):
        a = synthetic_two_gaussians(seed=5)
        b = synthetic_two_gaussians(seed=5)
        assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)

    def test_spec_options(self):
        data = parse_synthetic_spec("synthetic:n=10,size=4,seed=1")
        assert data.images.shape == (10, 1, 4, 4)

    def test_bad_spec(self):
        with pytest.raises(DatasetError, match="known keys"):
            parse_synthetic_spec("synthetic:width=3")
        with pytest.raises(DatasetError, match="number"):
            parse_synthetic_spec("synthetic:n=many")

    def test_split_keeps_tail(self):
        train, held_out = synthetic_two_gaussians(n=16).split(0.25)
        assert len(train) == 12 and len(held_out) == 4
        with pytest.raises(DatasetError):
            synthetic_two_gaussians(n=16).split(1.0)


class TestCodec:
    def test_layout(self):
        raw = encode_dataset(small_set())
        assert raw[:4] == MAGIC
        assert len(raw) == HEADER.size + 3 * 4 + 3

    def test_decode_quantized_pixels(self):
        data = decode_dataset(encode_dataset(small_set()))
        assert np.allclose(data.images, small_set().images, atol=0.5 / 255)
        assert data.labels.tolist() == [0, 1, 1] and data.classes == 2

    def test_bad_magic(self):
        raw = bytearray(encode_dataset(small_set()))
        raw[:4] = b"NOPE"
        with pytest.raises(DatasetError, match="magic"):
            decode_dataset(bytes(raw))

    def test_truncated(self):
        raw = encode_dataset(small_set())
        with pytest.raises(DatasetError, match="header implies"):
            decode_dataset(raw[:-1])
        with pytest.raises(DatasetError, match="shorter"):
            decode_dataset(raw[:5])

    def test_label_out_of_range(self):
        raw = bytearray(encode_dataset(small_set()))
        raw[-1] = 7
        with pytest.raises(DatasetError, match="labels"):
            decode_dataset(bytes(raw))


class TestLoader:
    def test_synthetic_memoized(self, dataset_loader):
        assert dataset_loader.load("synthetic:n=8") is dataset_loader.load("synthetic:n=8")

    def test_local_file(self, dataset_loader, tmp_path):
        path = tmp_path / "set.ipds"
        path.write_bytes(encode_dataset(small_set()))
        assert len(dataset_loader.load(str(path))) == 3

    def test_missing_file(self, dataset_loader, tmp_path):
        with pytest.raises(DatasetError, match="cannot read"):
            dataset_loader.load(str(tmp_path / "nope.ipds"))

    def test_download_cached_on_disk(self, tmp_path):
        calls = []

        def handler(request):
            calls.append(str(request.url))
            return httpx.Response(200, content=encode_dataset(small_set()))

        transport = httpx.MockTransport(handler)
        loader = DatasetLoader(cache_dir=tmp_path, transport=transport)
        assert len(loader.load("https://example.test/set.ipds")) == 3
        assert len(list(tmp_path.glob("dataset-*.ipds"))) == 1

        fresh = DatasetLoader(cache_dir=tmp_path, transport=transport)
        fresh.load("https://example.test/set.ipds")
        assert calls == ["https://example.test/set.ipds"]

    def test_http_error_is_dataset_error(self, tmp_path):
        loader = DatasetLoader(cache_dir=tmp_path, transport=httpx.MockTransport(lambda r: httpx.Response(503)))
        with pytest.raises(DatasetError, match="retry"):
            loader.load("https://example.test/down.ipds")

    def test_malformed_download_not_cached(self, tmp_path):
        loader = DatasetLoader(
            cache_dir=tmp_path, transport=httpx.MockTransport(lambda r: httpx.Response(200, content=b"<html>"))
        )
        with pytest.raises(DatasetError):
            loader.load("https://example.test/bad.ipds")
        assert not list(tmp_path.glob("dataset-*.ipds"))


def test_write_cache_failure_is_non_fatal(tmp_path, monkeypatch):
    # read-only mount: mkdir/write raise OSError and must not propagate
    def deny(*args, **kwargs):
        raise OSError(30, "Read-only file system")

    monkeypatch.setattr("pathlib.Path.mkdir", deny)
    _write_cache(tmp_path / "ro" / "dataset.ipds", b"data")


def test_dataset_error_is_tool_error():
    from fastmcp.exceptions import ToolError

    assert issubclass(DatasetError, ToolError)

"""Shared DatasetLoader and BenchRunner, built on first request.

The CLI and the server's event loop are the only callers. set_dataset_loader
and set_bench_runner install replacements (the test suite passes fakes).
"""

from __future__ import annotations

from typing import TYPE_CHECKING

if TYPE_CHECKING:
    from ipabn.services.bench_runner import BenchRunner
    from ipabn.services.dataset import DatasetLoader

_dataset_loader: "DatasetLoader | None" = None
_bench_runner: "BenchRunner | None" = None


def dataset_loader() -> "DatasetLoader":
    global _dataset_loader
    if _dataset_loader is None:
        from ipabn.services.dataset import DatasetLoader

        _dataset_loader = DatasetLoader()
    return _dataset_loader


def set_dataset_loader(loader) -> None:
    global _dataset_loader
    _dataset_loader = loader


def bench_runner() -> "BenchRunner":
    global _bench_runner
    if _bench_runner is None:
        from ipabn.services.bench_runner import BenchRunner

        _bench_runner = BenchRunner()
    return _bench_runner


def set_bench_runner(runner) -> None:
    global _bench_runner
    _bench_runner = runner

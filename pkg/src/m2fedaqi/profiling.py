"""Per-round resource accounting: CPU share, resident memory, time and bytes.

CPU percent is process-level with one fully busy core = 100. Sampling never
raises into the training loop: if process statistics are unavailable the
affected fields come back as ``None``.
"""

from __future__ import annotations

import csv
import json
import logging
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

log = logging.getLogger(__name__)

try:
    import psutil
except ImportError:  # pragma: no cover - psutil is a declared dependency
    psutil = None

MIN_INTERVAL = 0.05
COLUMNS = ("round", "train_seconds", "peak_rss_bytes", "mean_cpu_percent", "bytes_up", "bytes_down")


@dataclass
class RoundProfile:
    round: int
    train_seconds: float
    peak_rss_bytes: int | None
    mean_cpu_percent: float | None
    bytes_up: int
    bytes_down: int


class ResourceSampler:
    """Background sampler of this process's CPU share and RSS.

    Use as a context manager, then call :meth:`result`::

        with ResourceSampler(0.1) as s:
            work()
        cpu, rss = s.result()
    """

    def __init__(self, interval: float = 0.1, pid: int | None = None):
        if interval < MIN_INTERVAL:
            raise ValueError(f"sampling interval must be >= {MIN_INTERVAL}s, got {interval}")
        self.interval = interval
        self.pid = pid
        self.cpu_samples: list[float] = []
        self.rss_samples: list[int] = []
        self._stop = threading.Event()
        self._thread = None
        self._proc = None

    def start(self) -> "ResourceSampler":
        try:
            self._proc = psutil.Process(self.pid)
            self._proc.cpu_percent(None)  # prime the delta counter
        except Exception as exc:  # noqa: BLE001 - profiling must not fail a run
            log.debug("process statistics unavailable: %s", exc)
            self._proc = None
            return self
        self._thread = threading.Thread(target=self._loop, name="resource-sampler", daemon=True)
        self._thread.start()
        return self

    def _loop(self) -> None:
        while not self._stop.wait(self.interval):
            try:
                self.cpu_samples.append(float(self._proc.cpu_percent(None)))
                self.rss_samples.append(int(self._proc.memory_info().rss))
            except Exception:  # noqa: BLE001
                return

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join()

    def result(self):
        """``(mean_cpu_percent, peak_rss_bytes)``; each ``None`` without samples."""
        cpu = sum(self.cpu_samples) / len(self.cpu_samples) if self.cpu_samples else None
        rss = max(self.rss_samples) if self.rss_samples else None
        return cpu, rss

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
        return False


def sample_resources(interval: float = 0.1) -> ResourceSampler:
    return ResourceSampler(interval).start()


def finalize(sampler: ResourceSampler):
    sampler.stop()
    return sampler.result()


def export_profiles(profiles, path, fmt: str | None = None) -> Path:
    """Write profiles as CSV (fixed column order) or a JSON array of objects."""
    profiles = list(profiles)
    if not profiles:
        raise ValueError("no profiles to export")
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".").lower()
    rows = [asdict(p) for p in profiles]
    if fmt == "json":
        path.write_text(json.dumps(rows, indent=1))
    elif fmt == "csv":
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=COLUMNS)
            w.writeheader()
            for r in rows:
                w.writerow({k: "" if r[k] is None else r[k] for k in COLUMNS})
    else:
        raise ValueError(f"unknown export format {fmt!r}; use csv or json")
    return path


def load_profiles(path) -> list[RoundProfile]:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return [RoundProfile(**r) for r in json.loads(path.read_text())]
    out = []
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            out.append(
                RoundProfile(
                    int(r["round"]),
                    float(r["train_seconds"]),
                    int(r["peak_rss_bytes"]) if r["peak_rss_bytes"] else None,
                    float(r["mean_cpu_percent"]) if r["mean_cpu_percent"] else None,
                    int(r["bytes_up"]),
                    int(r["bytes_down"]),
                )
            )
    return out

"""Datasets, AQI banding, synthetic generation and non-IID partitioning.

Binary feature file layout (little-endian)::

    b"M2FA"  u8 version  u64 rows  u32 d_tab  u32 d_img
    rows x [ f32 tab[d_tab]  f32 img[d_img]  f32 pm25  u8 class ]

The manifest next to it is a UTF-8 ``key=value`` text file.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, PartitionError
from .rng import stream

MAGIC = b"M2FA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBQII")

NUM_CLASSES = 6
CATEGORY_NAMES = (
    "Good",
    "Moderate",
    "Unhealthy for Sensitive Groups",
    "Unhealthy",
    "Very Unhealthy",
    "Hazardous",
)
# Upper-inclusive band edges: [0,50], (50,100], (100,150], (150,200], (200,300], >300
_BAND_EDGES = np.array([50.0, 100.0, 150.0, 200.0, 300.0])


def aqi_to_category(aqi):
    """Map an AQI value (scalar or array) to its 0-based category index."""
    a = np.asarray(aqi, dtype=np.float64)
    if np.isnan(a).any() or (a < 0).any():
        raise DataError(f"AQI must be a non-negative number, got {aqi!r}")
    cat = np.searchsorted(_BAND_EDGES, a, side="left")
    return int(cat) if cat.ndim == 0 else cat.astype(np.uint8)


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    tab: np.ndarray  # [n, d_tab] float32
    img: np.ndarray  # [n, d_img] float32
    pm25: np.ndarray  # [n] float32
    labels: np.ndarray  # [n] uint8, 0-based
    ids: np.ndarray = None  # [n] uint64

    def __post_init__(self):
        n = self.pm25.shape[0]
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.uint64)
        for name in ("tab", "img"):
            a = getattr(self, name)
            if a.ndim != 2 or a.shape[0] != n:
                raise DataError(f"{name} features have shape {a.shape}, expected ({n}, d)")
        if self.labels.shape != (n,) or self.ids.shape != (n,):
            raise DataError("labels/ids length differs from sample count")

    def __len__(self) -> int:
        return int(self.pm25.shape[0])

    @property
    def d_tab(self) -> int:
        return self.tab.shape[1]

    @property
    def d_img(self) -> int:
        return self.img.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.tab[idx], self.img[idx], self.pm25[idx], self.labels[idx], self.ids[idx])

    def targets(self, task: str):
        return self.labels.astype(np.int64) if task == "classification" else self.pm25

    def equal(self, other: "Dataset") -> bool:
        return all(
            getattr(self, f).tobytes() == getattr(other, f).tobytes()
            for f in ("tab", "img", "pm25", "labels")
        )


def write_features(ds: Dataset, path) -> None:
    n, dt, di = len(ds), ds.d_tab, ds.d_img
    row = np.dtype(
        [("tab", "<f4", (dt,)), ("img", "<f4", (di,)), ("pm25", "<f4"), ("cls", "u1")]
    )
    rec = np.empty(n, dtype=row)
    rec["tab"], rec["img"], rec["pm25"], rec["cls"] = ds.tab, ds.img, ds.pm25, ds.labels
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, dt, di))
        fh.write(rec.tobytes())


def read_features(path) -> Dataset:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    if len(buf) < _HEADER.size:
        raise DataError(f"{path}: truncated header: expected {_HEADER.size} bytes, got {len(buf)}")
    magic, version, n, dt, di = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported format version {version}")
    row = np.dtype(
        [("tab", "<f4", (dt,)), ("img", "<f4", (di,)), ("pm25", "<f4"), ("cls", "u1")]
    )
    expected = _HEADER.size + n * row.itemsize
    if len(buf) != expected:
        raise DataError(f"{path}: file size mismatch: expected {expected} bytes, got {len(buf)}")
    rec = np.frombuffer(buf, dtype=row, count=n, offset=_HEADER.size)
    for name in ("tab", "img", "pm25"):
        finite = np.isfinite(rec[name]).reshape(n, -1).all(axis=1)
        if not finite.all():
            raise DataError(f"{path}: non-finite {name} value in row {int(np.argmin(finite))}")
    bad = np.flatnonzero(rec["cls"] >= NUM_CLASSES)
    if bad.size:
        raise DataError(f"{path}: class label out of range in row {int(bad[0])}")
    return Dataset(
        rec["tab"].astype(np.float32),
        rec["img"].astype(np.float32),
        rec["pm25"].astype(np.float32),
        rec["cls"].astype(np.uint8),
    )


# ---------------------------------------------------------------------------
# Manifest and normalization
# ---------------------------------------------------------------------------


@dataclass
class Manifest:
    name: str
    d_tab: int
    d_img: int
    n: int
    data_path: str
    tab_mean: list = field(default_factory=list)
    tab_std: list = field(default_factory=list)
    target_mean: float = 0.0
    target_std: float = 1.0
    classification: bool = True
    regression: bool = True
    base_dir: Path = field(default=Path("."), compare=False, repr=False)

    def __post_init__(self):
        if self.n <= 0:
            raise DataError(f"manifest {self.name!r}: sample count must be > 0")
        if self.tab_mean and (len(self.tab_mean) != self.d_tab or len(self.tab_std) != self.d_tab):
            raise DataError(f"manifest {self.name!r}: normalization stats length != d_tab={self.d_tab}")

    @property
    def features_file(self) -> Path:
        p = Path(self.data_path)
        return p if p.is_absolute() else self.base_dir / p

    def stats(self) -> "NormStats":
        return NormStats(
            np.array(self.tab_mean, np.float32),
            np.array(self.tab_std, np.float32),
            self.target_mean,
            self.target_std,
        )

    def write(self, path) -> None:
        fl = lambda v: ",".join(repr(float(x)) for x in v)  # noqa: E731
        lines = [
            f"name={self.name}",
            f"format_version={FORMAT_VERSION}",
            f"d_tab={self.d_tab}",
            f"d_img={self.d_img}",
            f"n={self.n}",
            f"data={self.data_path}",
            f"tab_mean={fl(self.tab_mean)}",
            f"tab_std={fl(self.tab_std)}",
            f"target_mean={float(self.target_mean)!r}",
            f"target_std={float(self.target_std)!r}",
            f"task.classification={str(self.classification).lower()}",
            f"task.regression={str(self.regression).lower()}",
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Manifest":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        kv = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise DataError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        floats = lambda s: [float(x) for x in s.split(",") if x]  # noqa: E731
        try:
            if int(kv.get("format_version", FORMAT_VERSION)) != FORMAT_VERSION:
                raise DataError(f"{path}: unsupported manifest version {kv['format_version']}")
            return cls(
                name=kv["name"],
                d_tab=int(kv["d_tab"]),
                d_img=int(kv["d_img"]),
                n=int(kv["n"]),
                data_path=kv["data"],
                tab_mean=floats(kv.get("tab_mean", "")),
                tab_std=floats(kv.get("tab_std", "")),
                target_mean=float(kv.get("target_mean", 0.0)),
                target_std=float(kv.get("target_std", 1.0)),
                classification=kv.get("task.classification", "true") == "true",
                regression=kv.get("task.regression", "true") == "true",
                base_dir=path.parent,
            )
        except KeyError as exc:
            raise DataError(f"{path}: missing manifest key {exc.args[0]!r}") from exc
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{path}: malformed manifest value: {exc}") from exc


@dataclass
class NormStats:
    tab_mean: np.ndarray
    tab_std: np.ndarray
    target_mean: float = 0.0
    target_std: float = 1.0


def compute_stats(ds: Dataset) -> NormStats:
    tab = ds.tab.astype(np.float64)
    std = float(ds.pm25.astype(np.float64).std())
    return NormStats(
        tab.mean(axis=0).astype(np.float32),
        tab.std(axis=0).astype(np.float32),
        float(ds.pm25.astype(np.float64).mean()),
        std if std > 0 else 1.0,
    )


def normalize(ds: Dataset, stats: NormStats) -> Dataset:
    """Z-score tabular features; zero-variance columns map to 0. Images pass through."""
    if stats.tab_mean.shape != (ds.d_tab,):
        raise DataError(f"normalization stats cover {stats.tab_mean.size} features, data has {ds.d_tab}")
    mean = stats.tab_mean.astype(np.float64)
    std = stats.tab_std.astype(np.float64)
    safe = np.where(std > 0, std, 1.0)
    z = (ds.tab.astype(np.float64) - mean) / safe
    z[:, std <= 0] = 0.0
    return replace(ds, tab=z.astype(np.float32))


def load_dataset(manifest: Manifest, normalized: bool = True) -> Dataset:
    ds = read_features(manifest.features_file)
    if ds.d_tab != manifest.d_tab or ds.d_img != manifest.d_img or len(ds) != manifest.n:
        raise DataError(
            f"{manifest.features_file}: shape (n={len(ds)}, d_tab={ds.d_tab}, d_img={ds.d_img}) "
            f"disagrees with manifest (n={manifest.n}, d_tab={manifest.d_tab}, d_img={manifest.d_img})"
        )
    if normalized and manifest.tab_mean:
        ds = normalize(ds, manifest.stats())
    return ds


def save_dataset(ds: Dataset, directory, name: str, stats: NormStats | None = None) -> Path:
    """Write ``<name>.m2fa`` plus ``<name>.manifest`` into ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_features(ds, directory / f"{name}.m2fa")
    stats = stats or compute_stats(ds)
    m = Manifest(
        name=name,
        d_tab=ds.d_tab,
        d_img=ds.d_img,
        n=len(ds),
        data_path=f"{name}.m2fa",
        tab_mean=[float(x) for x in stats.tab_mean],
        tab_std=[float(x) for x in stats.tab_std],
        target_mean=stats.target_mean,
        target_std=stats.target_std,
        base_dir=directory,
    )
    path = directory / f"{name}.manifest"
    m.write(path)
    return path


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

PM25_MAX = 500.0
OBSERVATION_NOISE = 0.1
NUISANCE_SCALE = 0.3
IMG_NOISE_RATIO = 2.0


def generate_synthetic(
    n: int,
    d_tab: int,
    d_img: int = 1280,
    noise: float = 0.05,
    seed: int = 0,
    min_class_count: int | None = None,
    img_noise_ratio: float = IMG_NOISE_RATIO,
) -> Dataset:
    """Draw a two-modality dataset whose target is encoded in both inputs.

    With ``s = pm25 / 250 - 1`` in ``[-1, 1]``:

    * ``tab = Q @ [s + noise*xi, u] + 0.1*noise*eps``, ``u`` standard-normal
      nuisance and ``Q`` a fixed random orthogonal mixing matrix;
    * ``img = relu((s + noise*eta) * b + c) + 0.1*noise*eps'`` with a fixed
      random direction ``b`` and offsets ``c``, a random-ReLU-feature stand-in
      for backbone activations.

    ``xi`` and ``eta`` are independent, so each modality alone pins ``s`` down
    only to within its own noise and the two together do better. With
    ``noise=0`` the target is an exact linear function of ``tab``. ``pm25`` is
    rejection-resampled until every category has at least ``min_class_count``
    samples (default ``n // 12``).
    """
    if n <= 0 or d_tab <= 0 or d_img <= 0:
        raise ConfigError(f"n, d_tab and d_img must be positive, got {n}, {d_tab}, {d_img}")
    if noise < 0:
        raise ConfigError(f"noise must be >= 0, got {noise}")
    min_class_count = n // 12 if min_class_count is None else min_class_count
    if min_class_count * NUM_CLASSES > n:
        raise ConfigError(f"cannot place {min_class_count} samples in each class with n={n}")

    # orthogonal mixing keeps the tabular noise from being amplified on decoding
    mix, _ = np.linalg.qr(stream(seed, "synthetic", "tab_mixing").standard_normal((d_tab, d_tab)))
    direction = stream(seed, "synthetic", "img_direction").standard_normal(d_img)
    offsets = stream(seed, "synthetic", "img_offsets").uniform(-1.0, 1.0, d_img)

    for attempt in range(1000):
        pm25 = stream(seed, "synthetic", "pm25", attempt).uniform(0.0, PM25_MAX, n)
        labels = aqi_to_category(pm25)
        if np.bincount(labels, minlength=NUM_CLASSES).min() >= min_class_count:
            break
    else:  # pragma: no cover - astronomically unlikely for sane inputs
        raise DataError("could not satisfy the per-class minimum; lower min_class_count")

    s = pm25 / (PM25_MAX / 2) - 1.0
    r_tab = stream(seed, "synthetic", "tab_noise")
    latent = np.empty((n, d_tab))
    latent[:, 0] = s + noise * r_tab.standard_normal(n)
    latent[:, 1:] = NUISANCE_SCALE * r_tab.standard_normal((n, d_tab - 1))
    tab = latent @ mix.T + OBSERVATION_NOISE * noise * r_tab.standard_normal((n, d_tab))

    r_img = stream(seed, "synthetic", "img_noise")
    s_img = s + img_noise_ratio * noise * r_img.standard_normal(n)
    img = np.maximum(np.outer(s_img, direction) + offsets, 0.0)
    img += OBSERVATION_NOISE * noise * r_img.standard_normal((n, d_img))

    return Dataset(
        tab.astype(np.float32),
        img.astype(np.float32),
        pm25.astype(np.float32),
        labels.astype(np.uint8),
    )


# ---------------------------------------------------------------------------
# Splits and partitioning
# ---------------------------------------------------------------------------


def holdout_split(n: int, fraction: float, seed: int, name: str = "holdout"):
    """Seeded shuffle split; returns ``(keep_idx, holdout_idx)`` sorted ascending."""
    if not 0.0 <= fraction < 1.0:
        raise ConfigError(f"holdout fraction must be in [0, 1), got {fraction}")
    perm = stream(seed, "split", name).permutation(n)
    k = int(round(n * fraction))
    return np.sort(perm[k:]), np.sort(perm[:k])


@dataclass(frozen=True)
class PartitionConfig:
    num_clients: int
    alpha: float = 0.5
    seed: int = 0
    min_per_client: int = 1
    max_attempts: int = 100

    def __post_init__(self):
        if self.num_clients < 1:
            raise ConfigError(f"num_clients must be >= 1, got {self.num_clients}")
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if self.min_per_client < 1:
            raise ConfigError(f"min_per_client must be >= 1, got {self.min_per_client}")


def largest_remainder(total: int, proportions) -> np.ndarray:
    """Integer counts summing to ``total`` that best follow ``proportions``."""
    p = np.asarray(proportions, dtype=np.float64)
    raw = total * p / p.sum()
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short:
        # stable sort: equal remainders go to the lower client index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_dirichlet(labels, cfg: PartitionConfig) -> list[np.ndarray]:
    """Label-skewed split of sample indices across ``cfg.num_clients`` clients.

    For each class a Dirichlet(alpha) vector decides the share each client
    receives; the class's (shuffled) indices are dealt out in those
    proportions. Draws that leave any client below ``min_per_client`` are
    retried with a fresh stream, up to ``max_attempts`` times.
    """
    labels = np.asarray(labels)
    n, k = labels.shape[0], cfg.num_clients
    if n < k * cfg.min_per_client:
        raise PartitionError(f"{n} samples cannot give {k} clients {cfg.min_per_client} each")
    if k == 1:
        return [np.arange(n)]
    classes = np.unique(labels)
    for attempt in range(cfg.max_attempts):
        rng = stream(cfg.seed, "partition", attempt)
        parts = [[] for _ in range(k)]
        for c in classes:
            idx = np.flatnonzero(labels == c)
            rng.shuffle(idx)
            props = rng.dirichlet(np.full(k, cfg.alpha))
            counts = largest_remainder(idx.size, props)
            for client, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
                parts[client].append(chunk)
        out = [np.sort(np.concatenate(p)) for p in parts]
        if min(len(p) for p in out) >= cfg.min_per_client:
            return out
    raise PartitionError(
        f"no partition gave every one of {k} clients >= {cfg.min_per_client} samples after "
        f"{cfg.max_attempts} attempts (alpha={cfg.alpha}); try a larger alpha or fewer clients"
    )

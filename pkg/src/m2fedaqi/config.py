"""Flat ``section.key=value`` run configuration.

Defaults follow the federated setup used for the benchmark runs (50 rounds,
5 local epochs, lr 5e-4, batch 32, 6 clients).
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

# key -> (type, default)
SCHEMA = {
    "model.d_tab": (int, None),
    "model.d_img": (int, None),
    "model.dropout_p": (float, 0.2),
    "model.task": (str, "classification"),
    "model.use_skip": (bool, True),
    "model.use_film_fusion": (bool, True),
    "model.modalities": (str, "both"),
    "federation.rounds": (int, 50),
    "federation.local_epochs": (int, 5),
    "federation.lr": (float, 5e-4),
    "federation.batch_size": (int, 32),
    "federation.expected_clients": (int, 6),
    "federation.timeout_s": (float, 600.0),
    "federation.seed": (int, 0),
    "federation.optimizer": (str, "adam"),
    "centralized.epochs": (int, 50),
    "centralized.lr": (float, None),
    "transport.endpoint": (str, "127.0.0.1:8443"),
    "transport.root_cert": (Path, None),
    "transport.cert": (Path, None),
    "transport.key": (Path, None),
    "transport.max_frame": (int, 64 * 1024 * 1024),
    "data.manifest": (Path, None),
    "data.test_manifest": (Path, None),
    "data.val_fraction": (float, 0.1),
    "output.dir": (Path, Path("runs")),
}


def _convert(key: str, raw):
    typ = SCHEMA[key][0]
    if raw is None or not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if typ is bool:
            return _BOOL[raw.lower()]
        if raw == "" and SCHEMA[key][1] is None:
            return None
        return typ(raw)
    except (KeyError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot interpret {raw!r} as {typ.__name__}") from None


class RunConfig(dict):
    """Mapping of every schema key to a typed value."""

    def __init__(self, values=None, base_dir: Path | None = None):
        super().__init__({k: d for k, (_, d) in SCHEMA.items()})
        self.base_dir = base_dir
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        value = _convert(key, value)
        if isinstance(value, Path) and self.base_dir is not None and not value.is_absolute():
            value = self.base_dir / value
        self[key] = value

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        """Read ``path`` (if given) and then apply ``key=value`` overrides."""
        cfg = cls()
        if path is not None:
            path = Path(path)
            try:
                text = path.read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            cfg.base_dir = path.resolve().parent
            for lineno, line in enumerate(text.splitlines(), 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
                k, v = line.split("=", 1)
                cfg.set(k.strip(), v)
            cfg.base_dir = None
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must be key=value, got {item!r}")
            k, v = item.split("=", 1)
            cfg.set(k.strip(), v)
        return cfg

    def require(self, *keys) -> None:
        missing = [k for k in keys if self.get(k) is None]
        if missing:
            raise ConfigError(f"missing required config value(s): {', '.join(missing)}")

    def section(self, name: str) -> dict:
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.items() if k.startswith(prefix)}

    def dump(self) -> str:
        return "\n".join(f"{k}={'' if v is None else v}" for k, v in self.items()) + "\n"

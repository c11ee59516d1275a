from pathlib import Path

import numpy as np
import pytest

from m2fedaqi import model as M
from m2fedaqi import store
from m2fedaqi.config import SCHEMA, RunConfig
from m2fedaqi.errors import CodecError, ConfigError, DataError
from m2fedaqi.metrics import MetricsReport
from m2fedaqi.nn import flatten_params


# --- run configuration ------------------------------------------------------------------


def test_defaults_cover_schema():
    cfg = RunConfig()
    assert set(cfg) == set(SCHEMA)
    assert cfg["federation.rounds"] == 50 and cfg["federation.local_epochs"] == 5
    assert cfg["federation.lr"] == 5e-4 and cfg["federation.batch_size"] == 32


def test_load_file_with_comments_and_relative_paths(tmp_path):
    (tmp_path / "sub").mkdir()
    conf = tmp_path / "sub" / "run.conf"
    conf.write_text(
        "# federation\n"
        "federation.rounds = 7\n"
        "model.use_skip=false  # ablate\n"
        "\n"
        "data.manifest = parts/client-0.manifest\n"
        "transport.root_cert = /abs/root.crt\n"
    )
    cfg = RunConfig.load(conf, ["federation.lr=0.01", "model.use_skip=yes"])
    assert cfg["federation.rounds"] == 7
    assert cfg["federation.lr"] == 0.01
    assert cfg["model.use_skip"] is True
    assert cfg["data.manifest"] == conf.parent.resolve() / "parts/client-0.manifest"
    assert cfg["transport.root_cert"] == Path("/abs/root.crt")


@pytest.mark.parametrize(
    "text, match",
    [
        ("federation.roundz=3\n", "unknown config key"),
        ("federation.rounds=three\n", "cannot interpret"),
        ("model.use_skip=maybe\n", "cannot interpret"),
        ("just words\n", "expected key=value"),
    ],
)
def test_bad_config_files(tmp_path, text, match):
    p = tmp_path / "bad.conf"
    p.write_text(text)
    with pytest.raises(ConfigError, match=match) as info:
        RunConfig.load(p)
    assert info.value.exit_code == 2


def test_bad_overrides_and_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["novalue"])
    with pytest.raises(ConfigError, match="cannot read"):
        RunConfig.load(tmp_path / "absent.conf")


def test_require_and_section():
    cfg = RunConfig()
    with pytest.raises(ConfigError, match="transport.cert"):
        cfg.require("transport.cert")
    assert cfg.section("federation")["rounds"] == 50
    dumped = cfg.dump()
    assert "federation.rounds=50\n" in dumped and "transport.cert=\n" in dumped


# --- checkpoints ------------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    cfg = M.ModelConfig(d_tab_in=7, d_img_in=12, task="regression", target_mean=3.0, target_std=2.0)
    params = M.build_model(cfg, seed=5)
    path = store.save_checkpoint(tmp_path / "m.m2ck", params, cfg, {"round": 4})
    back, cfg2, header = store.load_checkpoint(path)
    assert cfg2 == cfg and header["round"] == 4
    assert flatten_params(back).tobytes() == flatten_params(params).tobytes()
    assert list(back.keys()) == list(params.keys())


def test_checkpoint_rejects_foreign_files(tmp_path):
    p = tmp_path / "x.m2ck"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CodecError, match="not a checkpoint"):
        store.load_checkpoint(p)
    p.write_bytes(store.CKPT_MAGIC + bytes([9]) + bytes(8))
    with pytest.raises(CodecError, match="version 9"):
        store.load_checkpoint(p)


# --- history tables ---------------------------------------------------------------------


def _rows(n, acc0=0.5):
    out = []
    for t in range(n):
        rep = MetricsReport("classification", 100, accuracy=acc0 + 0.01 * t, macro_f1=0.4, macro_auc=0.8)
        out.append(store.history_row(t, 1.0 / (t + 1), rep, None, "ab" * 32, 10, 20, 0.5))
    return out


def test_history_csv_and_json_agree(tmp_path):
    rows = _rows(3)
    csv_path, json_path = store.write_history(rows, tmp_path / "out")
    header = csv_path.read_text().splitlines()[0].split(",")
    assert header == store.HISTORY_COLUMNS
    from_csv = store.read_history(csv_path)
    from_json = store.read_history(json_path)
    assert from_csv == from_json == rows


def test_read_history_missing(tmp_path):
    with pytest.raises(DataError):
        store.read_history(tmp_path / "nothing.csv")


def test_long_format_two_runs():
    runs = {"fed": _rows(5), "central": _rows(5, 0.6)}
    table = store.long_format(runs)
    assert len(table) == 2 * 5 * 4
    assert {m for _, _, m, _ in table} == {"loss", "val_accuracy", "val_macro_f1", "val_macro_auc"}
    assert ("central", 2, "val_accuracy", pytest.approx(0.62)) in table


def test_long_format_prefers_test_columns():
    rep = MetricsReport("regression", 10, mae=1.0, rmse=2.0, r2=0.5)
    rows = [store.history_row(0, 0.3, rep, rep)]
    names = [m for _, _, m, _ in store.long_format({"r": rows})]
    assert names == ["loss", "test_mae", "test_rmse", "test_r2"]
    explicit = store.long_format({"r": rows}, metrics=["val_r2"])
    assert explicit == [("r", 0, "val_r2", 0.5)]


def test_history_values_are_plain_numbers():
    row = _rows(1)[0]
    assert isinstance(row["val_accuracy"], float) and not isinstance(row["val_accuracy"], np.floating)

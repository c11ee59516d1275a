"""Command-line entry point: ``m2fedaqi <command> ...``.

Exit codes are a stable contract for scripts: 0 success, 2 config/usage,
3 data, 4 authentication, 5 protocol/timeout.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import socket
import sys
import threading
import time
from pathlib import Path

import numpy as np

from . import data as D
from . import model as M
from .certs import generate_federation, generate_self_signed
from .config import RunConfig
from .errors import AuthError, ConfigError, DataError, FederationAborted, M2FedError, ProtocolError
from .federation import FederationConfig, admit_clients, run_client, server_run
from .profiling import export_profiles
from .store import history_row, load_checkpoint, long_format, read_history, save_checkpoint, write_history
from .training import centralized_train, evaluate
from .transport import TrustConfig, connect_secure, parse_endpoint, secure_handshake, server_context

log = logging.getLogger("m2fedaqi")

EXIT_OK = 0
EXIT_TIMEOUT = 5
CONNECT_RETRY_S = 30.0


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(getattr(args, "config", None), getattr(args, "set", None) or ())
    if getattr(args, "out", None) is not None:
        cfg.set("output.dir", Path(args.out))
    return cfg


def _trust(cfg: RunConfig) -> TrustConfig:
    cfg.require("transport.root_cert", "transport.cert", "transport.key")
    return TrustConfig.from_paths(cfg["transport.root_cert"], cfg["transport.cert"], cfg["transport.key"])


def _endpoint(cfg: RunConfig) -> tuple[str, int]:
    try:
        return parse_endpoint(cfg["transport.endpoint"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _model_config(cfg: RunConfig, manifest: D.Manifest | None) -> M.ModelConfig:
    d_tab, d_img = cfg["model.d_tab"], cfg["model.d_img"]
    if manifest is not None:
        if d_tab is not None and d_tab != manifest.d_tab:
            raise DataError(f"config model.d_tab={d_tab} but manifest {manifest.name} has d_tab={manifest.d_tab}")
        if d_img is not None and d_img != manifest.d_img:
            raise DataError(f"config model.d_img={d_img} but manifest {manifest.name} has d_img={manifest.d_img}")
        d_tab, d_img = manifest.d_tab, manifest.d_img
    if d_tab is None:
        raise ConfigError("model.d_tab is not set and no manifest supplies it")
    return M.ModelConfig(
        d_tab_in=d_tab,
        d_img_in=d_img if d_img is not None else 1280,
        task=cfg["model.task"],
        dropout_p=cfg["model.dropout_p"],
        use_skip=cfg["model.use_skip"],
        use_film_fusion=cfg["model.use_film_fusion"],
        modalities=cfg["model.modalities"],
        target_mean=manifest.target_mean if manifest else 0.0,
        target_std=manifest.target_std if manifest else 1.0,
    )


def _fed_config(cfg: RunConfig) -> FederationConfig:
    return FederationConfig.from_dict(cfg.section("federation"))


def _read_manifest(path) -> D.Manifest:
    if path is None:
        raise ConfigError("no data manifest given")
    return D.Manifest.read(path)


def _split_validation(ds: D.Dataset, fraction: float, seed: int, name: str):
    if fraction <= 0:
        return ds, None
    keep, val = D.holdout_split(len(ds), fraction, seed, f"val-{name}")
    if len(keep) == 0:
        raise DataError(f"{name}: validation fraction {fraction} leaves no training samples")
    return ds.subset(keep), (ds.subset(val) if len(val) else None)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# partition
# ---------------------------------------------------------------------------


def _parse_synthetic(spec: str) -> dict:
    allowed = {"n": int, "d_tab": int, "d_img": int, "noise": float}
    out = {"n": 3000, "d_tab": 10, "d_img": 1280, "noise": 0.05}
    for item in filter(None, (p.strip() for p in spec.split(","))):
        key, sep, value = item.partition("=")
        if not sep or key not in allowed:
            raise ConfigError(f"bad --synthetic item {item!r}; expected keys {sorted(allowed)}")
        try:
            out[key] = allowed[key](value)
        except ValueError:
            raise ConfigError(f"bad --synthetic value {item!r}") from None
    for key in ("n", "d_tab", "d_img"):
        if out[key] <= 0:
            raise ConfigError(f"--synthetic {key} must be > 0")
    if out["noise"] < 0:
        raise ConfigError("--synthetic noise must be >= 0")
    return out


def cmd_partition(args) -> int:
    if not args.alpha > 0:
        raise ConfigError(f"--alpha must be > 0, got {args.alpha}")
    if args.clients < 1:
        raise ConfigError(f"--clients must be >= 1, got {args.clients}")
    if args.synthetic is not None:
        spec = _parse_synthetic(args.synthetic)
        ds = D.generate_synthetic(spec["n"], spec["d_tab"], spec["d_img"], spec["noise"], args.seed)
    elif args.input is not None:
        src = Path(args.input)
        ds = D.load_dataset(D.Manifest.read(src), normalized=False) if src.suffix == ".manifest" else D.read_features(src)
    else:
        raise ConfigError("give either --synthetic SPEC or --input PATH")

    train_idx, test_idx = D.holdout_split(len(ds), args.test_fraction, args.seed, "test")
    train = ds.subset(train_idx)
    stats = D.compute_stats(train)
    parts = D.partition_dirichlet(train.labels, D.PartitionConfig(args.clients, args.alpha, args.seed))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    D.save_dataset(train, out, "train", stats)
    if len(test_idx):
        D.save_dataset(ds.subset(test_idx), out, "test", stats)
    rows = []
    for k, idx in enumerate(parts):
        name = f"{args.prefix}-{k}"
        D.save_dataset(train.subset(idx), out, name, stats)
        hist = np.bincount(train.labels[idx], minlength=D.NUM_CLASSES)
        rows.append([name, len(idx), *hist.tolist()])
    with open(out / "partition_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["client", "n"] + [f"class_{c}" for c in range(D.NUM_CLASSES)])
        w.writerows(rows)
    print(f"wrote {len(parts)} client manifests ({len(train)} train, {len(test_idx)} test samples) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# certgen
# ---------------------------------------------------------------------------


def cmd_certgen(args) -> int:
    if args.clients < 0:
        raise ConfigError("--clients must be >= 0")
    hosts = tuple(h.strip() for h in args.hosts.split(",") if h.strip())
    paths = generate_federation(args.out, args.clients, hosts=hosts, days=args.days, client_prefix=args.prefix)
    for name in args.untrusted or ():
        paths[name] = generate_self_signed(args.out, name)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# server
# ---------------------------------------------------------------------------


def _gather_sessions(listener, ctx, expected: int, deadline: float, max_frame: int):
    """Accept until ``expected`` clients have authenticated or ``deadline`` passes.

    Handshakes run in their own threads so one slow or hostile peer cannot
    stall the others; authentication failures are logged and skipped.
    """
    sessions, lock = [], threading.Lock()

    def handshake(raw, addr):
        try:
            s = secure_handshake(raw, addr, ctx, max(min(30.0, deadline - time.monotonic()), 0.1), max_frame)
        except AuthError as exc:
            log.warning("rejected connection: %s", exc)
            return
        with lock:
            sessions.append(s)
        log.info("client %r authenticated from %s:%d", s.peer, *addr[:2])

    listener.settimeout(0.2)
    while time.monotonic() < deadline:
        with lock:
            if len(sessions) >= expected:
                break
        try:
            raw, addr = listener.accept()
        except socket.timeout:
            continue
        threading.Thread(target=handshake, args=(raw, addr), daemon=True).start()
    with lock:
        got = list(sessions)
    if len(got) < expected:
        for s in got:
            s.close()
        raise FederationAborted(f"timed out waiting for clients: {len(got)} of {expected} authenticated")
    return got[:expected]


def cmd_server(args) -> int:
    cfg = _load_config(args)
    fed = _fed_config(cfg)
    test_manifest = D.Manifest.read(cfg["data.test_manifest"]) if cfg["data.test_manifest"] else None
    model_cfg = _model_config(cfg, test_manifest)
    test_ds = D.load_dataset(test_manifest) if test_manifest else None
    ctx = server_context(_trust(cfg))
    host, port = _endpoint(cfg)
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)

    listener = socket.create_server((host, port))
    try:
        log.info("listening on %s:%d for %d clients", host, listener.getsockname()[1], fed.expected_clients)
        deadline = time.monotonic() + fed.timeout_s
        sessions = _gather_sessions(listener, ctx, fed.expected_clients, deadline, cfg["transport.max_frame"])
    finally:
        listener.close()

    admitted = admit_clients(sessions, model_cfg, fed, timeout=max(deadline - time.monotonic(), 1.0))
    if len(admitted) < fed.expected_clients:
        for s, _ in admitted.values():
            s.close()
        raise FederationAborted(f"only {len(admitted)} of {fed.expected_clients} clients were admitted")
    for cid, (s, req) in admitted.items():
        log.info("client %d = %s (%d samples)", cid, s.peer, req.dataset_size)

    init = M.build_model(model_cfg, fed.seed)
    try:
        params, history = server_run({c: s for c, (s, _) in admitted.items()}, model_cfg, fed, init, test_ds)
    except FederationAborted as exc:
        if exc.history:
            write_history([r.flat() for r in exc.history], out)
        raise
    save_checkpoint(out / "checkpoint.m2ck", params, model_cfg, {"rounds": fed.rounds})
    write_history([r.flat() for r in history], out)
    export_profiles([r.profile for r in history], out / "profile.csv")
    _write_json(out / "config.json", {"model": model_cfg.to_dict(), "federation": fed.to_dict()})
    print(f"federation finished after {len(history)} rounds; outputs in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# client
# ---------------------------------------------------------------------------


def _connect_with_retry(endpoint: str, trust: TrustConfig, max_frame: int, patience: float):
    deadline = time.monotonic() + patience
    while True:
        try:
            return connect_secure(endpoint, trust, timeout=30.0, max_frame=max_frame)
        except (ConnectionRefusedError, socket.timeout) as exc:
            if time.monotonic() >= deadline:
                raise ProtocolError(f"could not reach server at {endpoint}: {exc}") from exc
            time.sleep(0.2)


def cmd_client(args) -> int:
    cfg = _load_config(args)
    if args.manifest is not None:
        cfg.set("data.manifest", Path(args.manifest))
    manifest = _read_manifest(cfg["data.manifest"])
    name = args.name or manifest.name
    ds = D.load_dataset(manifest)
    train_ds, val_ds = _split_validation(ds, cfg["data.val_fraction"], cfg["federation.seed"], name)
    trust = _trust(cfg)
    session = _connect_with_retry(cfg["transport.endpoint"], trust, cfg["transport.max_frame"], args.connect_timeout)
    log.info("connected to %r as %s", session.peer, name)

    def report(round_index, result):
        if result.metrics:
            log.info("round %d aggregated validation: %s", round_index, result.metrics)

    try:
        final_hash, profiles = run_client(session, name, train_ds, val_ds, timeout=cfg["federation.timeout_s"],
                                          on_round=report)
    finally:
        session.close()
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        export_profiles(profiles, out / f"profile-{name}.csv")
    print(f"{name}: shutdown received, final weights {final_hash}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# centralized / evaluate / report
# ---------------------------------------------------------------------------


def cmd_centralized(args) -> int:
    cfg = _load_config(args)
    if args.manifest is not None:
        cfg.set("data.manifest", Path(args.manifest))
    if args.test_manifest is not None:
        cfg.set("data.test_manifest", Path(args.test_manifest))
    manifest = _read_manifest(cfg["data.manifest"])
    model_cfg = _model_config(cfg, manifest)
    seed = cfg["federation.seed"]
    ds = D.load_dataset(manifest)
    train_ds, val_ds = _split_validation(ds, cfg["data.val_fraction"], seed, manifest.name)
    test_ds = D.load_dataset(D.Manifest.read(cfg["data.test_manifest"])) if cfg["data.test_manifest"] else None
    if test_ds is not None and test_ds.d_tab != model_cfg.d_tab_in:
        raise DataError(f"test data has d_tab={test_ds.d_tab}, training data has d_tab={model_cfg.d_tab_in}")
    lr = cfg["centralized.lr"] if cfg["centralized.lr"] is not None else cfg["federation.lr"]

    rows, t_prev = [], [time.perf_counter()]

    def on_epoch(row):
        now = time.perf_counter()
        rows.append(history_row(row["epoch"], row["loss"], row["val"], row.get("test"), seconds=now - t_prev[0]))
        t_prev[0] = now
        log.info("epoch %d: loss %.4f val %.4f", row["epoch"], row["loss"], row["val"].headline())

    params, _ = centralized_train(
        M.build_model(model_cfg, seed), model_cfg, train_ds, cfg["centralized.epochs"], lr,
        cfg["federation.batch_size"], seed, cfg["federation.optimizer"], val_ds, test_ds, on_epoch=on_epoch,
    )
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.m2ck", params, model_cfg, {"epochs": cfg["centralized.epochs"]})
    write_history(rows, out)
    print(f"centralized training finished after {len(rows)} epochs; outputs in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    params, model_cfg, _ = load_checkpoint(args.checkpoint)
    manifest = D.Manifest.read(args.manifest)
    if manifest.d_tab != model_cfg.d_tab_in or manifest.d_img != model_cfg.d_img_in:
        raise DataError(
            f"checkpoint expects d_tab={model_cfg.d_tab_in}, d_img={model_cfg.d_img_in}; "
            f"dataset {manifest.name} has d_tab={manifest.d_tab}, d_img={manifest.d_img}"
        )
    report = evaluate(params, model_cfg, D.load_dataset(manifest))
    print(report.to_json())
    return EXIT_OK


def cmd_report(args) -> int:
    labels = args.label or []
    if labels and len(labels) != len(args.histories):
        raise ConfigError(f"{len(labels)} --label values for {len(args.histories)} history files")
    runs = {}
    for i, path in enumerate(args.histories):
        path = Path(path)
        label = labels[i] if labels else (path.parent.name or path.stem)
        if label in runs:
            label = f"{label}-{i}"
        runs[label] = read_history(path)
    metrics = [m.strip() for m in args.metrics.split(",")] if args.metrics else None
    rows = long_format(runs, metrics)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["run", "round", "metric", "value"])
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "-c", help="key=value run configuration file")
    p.add_argument("--set", "-s", action="append", metavar="KEY=VALUE",
                   help="override one configuration value (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="m2fedaqi", description="Multimodal federated AQI estimation.")
    parser.add_argument("--verbose", "-v", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("partition", help="split a dataset into non-IID client shards and a test split")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--input", help="feature file (.m2fa) or manifest to partition")
    src.add_argument("--synthetic", metavar="SPEC", help="generate data, e.g. n=3000,d_tab=10,noise=0.02")
    p.add_argument("--clients", "-k", type=int, default=6)
    p.add_argument("--alpha", type=float, default=0.5, help="Dirichlet concentration (> 0)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--prefix", default="client", help="client manifest name prefix")
    p.add_argument("--out", "-o", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("certgen", help="create a federation root plus server and client certificates")
    p.add_argument("--out", "-o", required=True)
    p.add_argument("--clients", "-k", type=int, default=6)
    p.add_argument("--hosts", default="localhost,127.0.0.1", help="server certificate host names / IPs")
    p.add_argument("--days", type=int, default=365)
    p.add_argument("--prefix", default="client")
    p.add_argument("--untrusted", action="append", metavar="NAME",
                   help="also write a self-signed identity NAME that the root does not vouch for")
    p.set_defaults(func=cmd_certgen)

    p = sub.add_parser("server", help="run the aggregation server")
    _add_config_args(p)
    p.add_argument("--out", "-o", help="output directory (overrides output.dir)")
    p.set_defaults(func=cmd_server)

    p = sub.add_parser("client", help="run one federated client")
    _add_config_args(p)
    p.add_argument("--manifest", "-m", help="this client's data manifest (overrides data.manifest)")
    p.add_argument("--name", help="client name (defaults to the manifest name)")
    p.add_argument("--out", "-o", help="directory for this client's profile CSV")
    p.add_argument("--connect-timeout", type=float, default=CONNECT_RETRY_S,
                   help="seconds to keep retrying while the server is not up yet")
    p.set_defaults(func=cmd_client)

    p = sub.add_parser("centralized", help="train on pooled data (baseline)")
    _add_config_args(p)
    p.add_argument("--manifest", "-m", help="training manifest (overrides data.manifest)")
    p.add_argument("--test-manifest", help="test manifest (overrides data.test_manifest)")
    p.add_argument("--out", "-o", help="output directory (overrides output.dir)")
    p.set_defaults(func=cmd_centralized)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset and print metrics JSON")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="merge history files into one long-format CSV")
    p.add_argument("histories", nargs="+", help="history .csv or .json files")
    p.add_argument("--label", action="append", help="run label per history file, in order")
    p.add_argument("--metrics", help="comma-separated history columns (default: loss + 3 task metrics)")
    p.add_argument("--out", "-o", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except M2FedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (TimeoutError, ConnectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())

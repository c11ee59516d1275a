"""Synchronous FedAvg: weighted aggregation, client local training and the
server round loop. Transport-agnostic: the server talks to a list of
:class:`~m2fedaqi.transport.Session` objects, whatever carries their bytes.
"""

from __future__ import annotations

import hashlib
import logging
import ssl
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from .errors import AggregationError, AuthError, ConfigError, DataError, FederationAborted, ProtocolError
from .metrics import MetricsReport, weighted_mean_reports
from .nn import Layout, ParameterSet, flatten_params, make_optimizer, restore_params
from .profiling import ResourceSampler, RoundProfile
from .training import evaluate, run_epoch
from .transport import (
    JoinAccept,
    JoinReject,
    JoinRequest,
    RoundResult,
    RoundStart,
    RoundUpdate,
    Session,
    Shutdown,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 50
    local_epochs: int = 5
    lr: float = 5e-4
    batch_size: int = 32
    expected_clients: int = 6
    timeout_s: float = 600.0
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        for name in ("local_epochs", "batch_size", "expected_clients"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not self.timeout_s > 0:
            raise ConfigError(f"timeout_s must be > 0, got {self.timeout_s}")
        make_optimizer(self.optimizer, self.lr)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "FederationConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown federation config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ClientUpdate:
    client_id: int
    weights: np.ndarray = field(repr=False)
    layout_hash: str
    n_samples: int
    train_loss: float
    metrics: MetricsReport | None = None


def weights_hash(vec) -> str:
    return hashlib.sha256(np.asarray(vec, dtype="<f4").tobytes()).hexdigest()[:16]


def aggregate(updates) -> np.ndarray:
    """Sample-count-weighted mean of client weight vectors.

    Accumulates in float64 in ascending client-id order, so the result does
    not depend on the order updates arrived in; emits float32.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise AggregationError("cannot aggregate an empty set of updates")
    ref = updates[0]
    for u in updates:
        if u.layout_hash != ref.layout_hash:
            raise AggregationError(
                f"client {u.client_id} layout {u.layout_hash} differs from {ref.layout_hash}"
            )
        if np.shape(u.weights) != np.shape(ref.weights):
            raise AggregationError(
                f"client {u.client_id} sent {np.size(u.weights)} weights, expected {np.size(ref.weights)}"
            )
        if u.n_samples < 1:
            raise AggregationError(f"client {u.client_id} reports {u.n_samples} samples")
    total = sum(int(u.n_samples) for u in updates)
    acc = np.zeros(np.shape(ref.weights), dtype=np.float64)
    for u in updates:
        acc += (u.n_samples / total) * np.asarray(u.weights, dtype=np.float64)
    return acc.astype(np.float32)


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------


class LocalTrainer:
    """A client's training state: its data, its id and its optimizer.

    The optimizer (and any moment estimates it keeps) persists across rounds
    and never leaves the client.
    """

    def __init__(self, client_id: int, model_cfg: M.ModelConfig, fed_cfg: FederationConfig,
                 train_ds, val_ds=None):
        if len(train_ds) == 0:
            raise DataError(f"client {client_id} has no training samples")
        if train_ds.d_tab != model_cfg.d_tab_in:
            raise DataError(
                f"client {client_id} data has d_tab={train_ds.d_tab}, model expects {model_cfg.d_tab_in}"
            )
        self.client_id = client_id
        self.model_cfg = model_cfg
        self.fed_cfg = fed_cfg
        self.train_ds = train_ds
        self.val_ds = val_ds if val_ds is not None and len(val_ds) else None
        self.optimizer = make_optimizer(fed_cfg.optimizer, fed_cfg.lr)
        self.layout = M.build_model(model_cfg, 0).layout

    def local_train(self, weights, round_index: int) -> ClientUpdate:
        """Validate the received global weights, then train E local epochs."""
        params = restore_params(self.layout, weights)
        metrics = evaluate(params, self.model_cfg, self.val_ds) if self.val_ds is not None else None
        losses = []
        e_count = self.fed_cfg.local_epochs
        for e in range(e_count):
            params, loss = run_epoch(
                params, self.model_cfg, self.train_ds, self.optimizer, self.fed_cfg.batch_size,
                self.fed_cfg.seed, self.client_id, round_index * e_count + e,
            )
            losses.append(loss)
        return ClientUpdate(
            self.client_id,
            flatten_params(params),
            self.layout.digest(),
            len(self.train_ds),
            float(np.mean(losses)),
            metrics,
        )


def client_local_train(weights, model_cfg, fed_cfg, train_ds, val_ds=None, client_id=0,
                       round_index=0) -> ClientUpdate:
    """One-shot local training with a fresh optimizer."""
    return LocalTrainer(client_id, model_cfg, fed_cfg, train_ds, val_ds).local_train(weights, round_index)


def run_client(session: Session, name: str, train_ds, val_ds=None, timeout: float | None = None,
               on_round=None):
    """Drive one client through join, rounds and shutdown over ``session``.

    Returns ``(final_hash, profiles)``. ``on_round(round, RoundResult)`` is
    called after each aggregated result arrives.
    """
    try:
        session.send(JoinRequest(name, int(train_ds.d_tab), len(train_ds)))
        reply = session.recv(timeout)
    except (ssl.SSLError, ConnectionError) as exc:
        # Under TLS 1.3 a server that refuses our certificate only tells us so
        # once we try to read; either way we never got past authentication.
        raise AuthError(f"server dropped the connection before accepting the join: {exc}") from exc
    if isinstance(reply, JoinReject):
        raise DataError(f"server rejected join: {reply.reason}")
    if not isinstance(reply, JoinAccept):
        raise ProtocolError(f"expected JoinAccept, got {type(reply).__name__}")
    model_cfg = M.ModelConfig.from_dict(reply.model_config)
    fed_cfg = FederationConfig.from_dict(reply.federation_config)
    trainer = LocalTrainer(reply.client_id, model_cfg, fed_cfg, train_ds, val_ds)
    profiles = []
    wait = timeout if timeout is not None else fed_cfg.timeout_s
    mark_sent, mark_recv = session.bytes_sent, session.bytes_received
    pending = None
    while True:
        msg = session.recv(wait)
        if isinstance(msg, Shutdown):
            return msg.final_hash, profiles
        if isinstance(msg, RoundResult):
            if pending is not None and pending[0] == msg.round:
                _, train_s, cpu, rss = pending
                profiles.append(
                    RoundProfile(msg.round, train_s, rss, cpu, session.bytes_sent - mark_sent,
                                 session.bytes_received - mark_recv)
                )
                mark_sent, mark_recv = session.bytes_sent, session.bytes_received
                pending = None
            if on_round:
                on_round(msg.round, msg)
            continue
        if not isinstance(msg, RoundStart):
            raise ProtocolError(f"unexpected {type(msg).__name__} during rounds")
        with ResourceSampler() as sampler:
            t0 = time.perf_counter()
            update = trainer.local_train(msg.weights, msg.round)
            train_s = time.perf_counter() - t0
        cpu, rss = sampler.result()
        pending = (msg.round, train_s, cpu, rss)
        session.send(
            RoundUpdate(
                msg.round,
                update.weights,
                update.n_samples,
                update.train_loss,
                update.metrics.to_dict() if update.metrics else None,
                update.layout_hash,
            )
        )


# ---------------------------------------------------------------------------
# Server side
# ---------------------------------------------------------------------------


@dataclass
class RoundRecord:
    round: int
    weights_hash: str
    train_loss: float
    metrics: MetricsReport | None
    test_metrics: MetricsReport | None
    profile: RoundProfile

    def flat(self) -> dict:
        row = {"round": self.round, "weights_hash": self.weights_hash, "loss": self.train_loss}
        for prefix, rep in (("val", self.metrics), ("test", self.test_metrics)):
            if rep is None:
                continue
            for k, v in rep.to_dict().items():
                if k != "task":
                    row[f"{prefix}_{k}"] = v
        row.update(
            bytes_up=self.profile.bytes_up,
            bytes_down=self.profile.bytes_down,
            round_seconds=self.profile.train_seconds,
        )
        return row


def admit_clients(sessions, model_cfg: M.ModelConfig, fed_cfg: FederationConfig, timeout=None):
    """Read a JoinRequest from every session and assign ids by sorted client name.

    Sessions whose request is malformed or incompatible get a JoinReject and
    are dropped. Returns ``{client_id: (session, JoinRequest)}``.
    """
    requests = []
    for s in sessions:
        req = s.recv(timeout if timeout is not None else fed_cfg.timeout_s)
        if not isinstance(req, JoinRequest):
            s.close()
            raise ProtocolError(f"{s.peer}: expected JoinRequest, got {type(req).__name__}")
        if s.peer and req.client_name != s.peer:
            log.warning("client announced %r but its certificate says %r", req.client_name, s.peer)
        name = s.peer or req.client_name
        requests.append((name, s, req))
    admitted, names = {}, set()
    ordered = sorted(requests, key=lambda r: r[0])
    next_id = 0
    for name, s, req in ordered:
        reason = None
        if name in names:
            reason = f"duplicate client name {name!r}"
        elif req.d_tab != model_cfg.d_tab_in:
            reason = f"client d_tab={req.d_tab} but the federation model expects d_tab={model_cfg.d_tab_in}"
        elif req.dataset_size < 1:
            reason = "client has no training data"
        if reason:
            log.warning("rejecting %s: %s", name, reason)
            s.send(JoinReject(reason))
            s.close()
            continue
        names.add(name)
        admitted[next_id] = (s, req)
        next_id += 1
    for cid, (s, _) in admitted.items():
        s.send(JoinAccept(cid, model_cfg.to_dict(), fed_cfg.to_dict()))
    return admitted


def _collect(sessions: dict, round_index: int, deadline: float, layout_hash: str):
    """Receive exactly one RoundUpdate from every session before ``deadline``."""
    results, errors = {}, {}

    def worker(cid, s):
        try:
            msg = s.recv(max(deadline - time.monotonic(), 0.001))
            if not isinstance(msg, RoundUpdate):
                raise ProtocolError(f"expected RoundUpdate, got {type(msg).__name__}")
            if msg.round != round_index:
                raise ProtocolError(f"update for round {msg.round} during round {round_index}")
            results[cid] = ClientUpdate(
                cid, msg.weights, msg.layout_hash, msg.n_samples, msg.loss,
                MetricsReport.from_dict(msg.metrics) if msg.metrics else None,
            )
        except Exception as exc:  # noqa: BLE001 - reported to the coordinator
            errors[cid] = exc

    threads = [threading.Thread(target=worker, args=(cid, s), daemon=True) for cid, s in sessions.items()]
    for t in threads:
        t.start()
    for t in threads:
        t.join(max(deadline - time.monotonic(), 0) + 1.0)
    missing = sorted(set(sessions) - set(results))
    if missing:
        detail = "; ".join(f"client {c}: {errors.get(c, 'timed out')}" for c in missing)
        raise FederationAborted(f"round {round_index}: {len(missing)} update(s) missing ({detail})")
    bad = [u for u in results.values() if u.layout_hash != layout_hash]
    if bad:
        raise AggregationError(f"client {bad[0].client_id} trained a different model layout")
    return [results[c] for c in sorted(results)]


def server_run(sessions: dict, model_cfg: M.ModelConfig, fed_cfg: FederationConfig,
               init_params: ParameterSet | None = None, test_ds=None, on_round=None):
    """Run ``fed_cfg.rounds`` synchronous rounds over already-admitted sessions.

    ``sessions`` maps client id to session. Returns ``(final_params, history)``.
    On a missing update the run aborts with :class:`FederationAborted`
    carrying the rounds completed so far; the remaining clients are closed.
    """
    params = init_params if init_params is not None else M.build_model(model_cfg, fed_cfg.seed)
    layout: Layout = params.layout
    layout_hash = layout.digest()
    weights = flatten_params(params)
    history = []
    try:
        for t in range(fed_cfg.rounds):
            sent0 = sum(s.bytes_sent for s in sessions.values())
            recv0 = sum(s.bytes_received for s in sessions.values())
            t0 = time.perf_counter()
            with ResourceSampler() as sampler:
                for s in sessions.values():
                    s.send(RoundStart(t, weights, layout_hash))
                updates = _collect(sessions, t, time.monotonic() + fed_cfg.timeout_s, layout_hash)
                weights = aggregate(updates)
                counts = [u.n_samples for u in updates]
                reports = [u.metrics for u in updates if u.metrics is not None]
                val = (
                    weighted_mean_reports(reports, [u.n_samples for u in updates if u.metrics is not None])
                    if reports else None
                )
                loss = float(np.average([u.train_loss for u in updates], weights=counts))
                test = evaluate(restore_params(layout, weights), model_cfg, test_ds) if test_ds is not None else None
                for s in sessions.values():
                    s.send(RoundResult(t, val.to_dict() if val else None))
            cpu, rss = sampler.result()
            profile = RoundProfile(
                t,
                time.perf_counter() - t0,
                rss,
                cpu,
                sum(s.bytes_received for s in sessions.values()) - recv0,
                sum(s.bytes_sent for s in sessions.values()) - sent0,
            )
            record = RoundRecord(t, weights_hash(weights), loss, val, test, profile)
            history.append(record)
            log.info("round %d: loss %.4f val %s test %s", t, loss,
                     val.headline() if val else None, test.headline() if test else None)
            if on_round:
                on_round(record)
        for s in sessions.values():
            s.send(Shutdown(weights_hash(weights)))
    except FederationAborted as exc:
        for s in sessions.values():
            s.close()
        raise FederationAborted(str(exc), history) from exc
    except (ProtocolError, AggregationError, ConnectionError, OSError) as exc:
        for s in sessions.values():
            s.close()
        raise FederationAborted(f"round {len(history)}: {exc}", history) from exc
    return restore_params(layout, weights), history


def simulate(model_cfg: M.ModelConfig, fed_cfg: FederationConfig, client_data,
             init_params: ParameterSet | None = None, test_ds=None):
    """In-process FedAvg with the same arithmetic as :func:`server_run`.

    ``client_data`` is a sequence of ``(train_ds, val_ds_or_None)`` indexed by
    client id. Returns ``(final_params, history)`` where history rows are the
    flat dicts of :meth:`RoundRecord.flat` without transport counters.
    """
    params = init_params if init_params is not None else M.build_model(model_cfg, fed_cfg.seed)
    layout = params.layout
    weights = flatten_params(params)
    trainers = [LocalTrainer(k, model_cfg, fed_cfg, tr, va) for k, (tr, va) in enumerate(client_data)]
    history = []
    for t in range(fed_cfg.rounds):
        t0 = time.perf_counter()
        updates = [tr.local_train(weights, t) for tr in trainers]
        weights = aggregate(updates)
        counts = [u.n_samples for u in updates]
        reports = [(u.metrics, u.n_samples) for u in updates if u.metrics is not None]
        val = weighted_mean_reports(*zip(*reports)) if reports else None
        loss = float(np.average([u.train_loss for u in updates], weights=counts))
        test = evaluate(restore_params(layout, weights), model_cfg, test_ds) if test_ds is not None else None
        profile = RoundProfile(t, time.perf_counter() - t0, None, None, 0, 0)
        history.append(RoundRecord(t, weights_hash(weights), loss, val, test, profile))
    return restore_params(layout, weights), history

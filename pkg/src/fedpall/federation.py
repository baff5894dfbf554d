"""Round-based simulation of FedPall and the FedAvg / local-only baselines.

A FedPall round runs three phases:

1. clients upload class prototypes of their current extractor; the server
   aggregates them and broadcasts the global prototypes plus its amplifier;
2. clients train extractor + classifier on CE + mu * KL + delta * InfoNCE with
   the broadcast amplifier frozen;
3. clients upload masked prototype-mixed features; the server trains the
   amplifier (feature -> client id) and the global classifier (feature -> label).

After the last round the global classifier replaces every local classifier
and is fine-tuned on local data with the extractor frozen (phase 4).

Everything that crosses the client/server boundary is serialized, so
mutating a message never touches live model state. Random streams are keyed
by ``(seed, purpose, client_id)``, which makes results independent of the
order in which clients are processed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import ClientDataset, generate_drifted_clients, load_csv_clients
from .errors import DomainError, FedPallError, ProtocolError, TrainingDivergenceError
from .losses import LossWeights, combined_local_loss, cross_entropy
from .neural import (MlpParams, MlpSpec, backward_mlp, deserialize_params, forward_mlp, init_mlp,
                     make_rng, serialize_params, sgd_step, softmax)
from .prototypes import (MixConfig, PrototypeSet, aggregate_global_prototypes, compute_local_prototypes,
                         decode_record_arrays, encode_record_arrays, mix_features)

# random-stream purposes
_S_CLIENT_INIT = 10
_S_CLIENT_TRAIN = 11
_S_CLIENT_MIX = 12
_S_SERVER_INIT = 20
_S_SERVER_AMP = 21
_S_SERVER_CLS = 22

METRICS_HEADER = ["run_id", "seed", "method", "round", "phase", "client_id", "split", "top1",
                  "loss_ce", "loss_kl", "loss_nce"]


# --------------------------------------------------------------------------- messages

@dataclass(frozen=True)
class PrototypeUpload:
    round: int
    client_id: int
    prototypes: PrototypeSet


@dataclass(frozen=True)
class MixedFeatureUpload:
    round: int
    client_id: int
    payload: bytes  # encoded MixedFeatureRecord stream

    def arrays(self):
        return decode_record_arrays(self.payload)


@dataclass(frozen=True)
class GlobalBroadcast:
    round: int
    global_prototypes: PrototypeSet
    amplifier: bytes
    classifier: bytes | None = None


# --------------------------------------------------------------------------- states

@dataclass
class ClientState:
    client_id: int
    dataset: ClientDataset
    extractor: MlpParams
    classifier: MlpParams
    frozen_amplifier: MlpParams | None = None
    global_prototypes: PrototypeSet | None = None
    rng: np.random.Generator | None = None
    mix_rng: np.random.Generator | None = None
    last_losses: dict = field(default_factory=dict)

    def prototype_upload(self, round_index: int, n_classes: int) -> PrototypeUpload:
        z, _ = forward_mlp(self.extractor, self.dataset.train_features)
        protos = compute_local_prototypes(z, self.dataset.train_labels, n_classes)
        return PrototypeUpload(round_index, self.client_id, protos.copy())

    def receive(self, msg: GlobalBroadcast) -> None:
        self.global_prototypes = msg.global_prototypes.copy()
        self.frozen_amplifier = deserialize_params(msg.amplifier)
        if msg.classifier is not None:
            self.classifier = deserialize_params(msg.classifier)

    def mixed_upload(self, round_index: int, cfg: MixConfig) -> MixedFeatureUpload:
        if self.global_prototypes is None:
            raise ProtocolError(f"client {self.client_id} has no global prototypes to mix with")
        z, _ = forward_mlp(self.extractor, self.dataset.train_features)
        mixed = mix_features(z, self.dataset.train_labels, self.global_prototypes, cfg, self.mix_rng)
        labels = self.dataset.train_labels
        payload = encode_record_arrays(mixed, labels, np.full(labels.shape, self.client_id))
        return MixedFeatureUpload(round_index, self.client_id, payload)


@dataclass
class ServerState:
    amplifier: MlpParams
    global_classifier: MlpParams
    n_clients: int
    global_prototypes: PrototypeSet | None = None
    round_index: int = 0
    classifier_trained: bool = False
    amp_rng: np.random.Generator | None = None
    cls_rng: np.random.Generator | None = None

    def __post_init__(self):
        if self.amplifier.spec.output_dim != self.n_clients:
            raise ProtocolError("amplifier output dim must equal the number of clients")

    def broadcast(self, include_classifier: bool = False) -> GlobalBroadcast:
        return GlobalBroadcast(self.round_index, self.global_prototypes.copy(),
                               serialize_params(self.amplifier),
                               serialize_params(self.global_classifier) if include_classifier else None)


@dataclass
class EvalReport:
    per_client: list[float]
    test_ce: list[float] = field(default_factory=list)

    @property
    def macro_avg(self) -> float:
        return float(np.mean(self.per_client))

    @property
    def mean_test_ce(self) -> float:
        """Average over clients of each client's test cross-entropy (the training objective's sum / N)."""
        return float(np.mean(self.test_ce)) if self.test_ce else float("nan")


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    method: str
    round: int
    phase: str
    client_id: int
    split: str
    top1: float
    loss_ce: float = float("nan")
    loss_kl: float = float("nan")
    loss_nce: float = float("nan")


@dataclass
class RunResult:
    report: EvalReport
    metrics: list[MetricsRecord]
    clients: list[ClientState]
    server: ServerState | None = None


# --------------------------------------------------------------------------- helpers

def evaluate_top1(extractor: MlpParams, classifier: MlpParams, features: np.ndarray, labels) -> float:
    """Fraction of rows whose argmax logit matches the label (ties go to the lowest index)."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DomainError("cannot evaluate on an empty test set")
    z, _ = forward_mlp(extractor, features)
    logits, _ = forward_mlp(classifier, z)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def evaluate_test_ce(extractor: MlpParams, classifier: MlpParams, features: np.ndarray, labels) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        raise DomainError("cannot evaluate on an empty test set")
    z, _ = forward_mlp(extractor, features)
    logits, _ = forward_mlp(classifier, z)
    return cross_entropy(softmax(logits), labels).value


def _raise_divergence(loss, weights: LossWeights, client_id) -> None:
    terms = [("ce", loss.ce, True), ("kl", loss.kl, weights.mu > 0), ("infonce", loss.nce, weights.delta > 0)]
    for name, value, active in terms:
        if active and not np.isfinite(value):
            raise TrainingDivergenceError(f"client {client_id}: non-finite {name} loss ({value})")
    raise TrainingDivergenceError(f"client {client_id}: non-finite combined loss ({loss.value})")


def train_local(client: ClientState, weights: LossWeights, epochs: int, batch_size: int, lr: float,
                rng: np.random.Generator | None = None) -> list[dict]:
    """Phase 2: mini-batch SGD on the combined loss; the amplifier is only read.

    Returns one ``{"ce", "kl", "nce", "total"}`` dict of sample-weighted means per epoch.
    """
    rng = rng if rng is not None else client.rng
    x, y = client.dataset.train_features, client.dataset.train_labels
    n = y.shape[0]
    needs_amp = weights.mu > 0
    needs_protos = weights.delta > 0
    if needs_amp and client.frozen_amplifier is None:
        raise ProtocolError(f"client {client.client_id}: KL term enabled but no amplifier received")
    if needs_protos and client.global_prototypes is None:
        raise ProtocolError(f"client {client.client_id}: InfoNCE enabled but no global prototypes received")
    g, h = client.extractor, client.classifier
    trace = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        sums = np.zeros(4)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            z, g_cache = forward_mlp(g, x[idx], cache=True)
            loss = combined_local_loss(z, y[idx], h, client.frozen_amplifier if needs_amp else None,
                                       client.global_prototypes, weights)
            if not np.isfinite(loss.value):
                _raise_divergence(loss, weights, client.client_id)
            g_grads, _ = backward_mlp(g, g_cache, loss.grad_features)
            g = sgd_step(g, g_grads, lr)
            h = sgd_step(h, loss.classifier_grads, lr)
            sums += idx.size * np.array([loss.ce, loss.kl, loss.nce, loss.value])
        mean = sums / max(n, 1)
        trace.append({"ce": mean[0], "kl": mean[1], "nce": mean[2], "total": mean[3]})
    client.extractor, client.classifier = g, h
    if trace:
        client.last_losses = trace[-1]
    return trace


def train_ce(params: MlpParams, features: np.ndarray, targets: np.ndarray, epochs: int, batch_size: int,
             lr: float, rng: np.random.Generator) -> tuple[MlpParams, list[float]]:
    """Plain softmax-CE mini-batch SGD of a single network on fixed inputs."""
    n = targets.shape[0]
    trace = []
    for _ in range(epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            logits, cache = forward_mlp(params, features[idx], cache=True)
            ce = cross_entropy(softmax(logits), targets[idx])
            if not np.isfinite(ce.value):
                raise TrainingDivergenceError(f"non-finite ce loss ({ce.value})")
            grads, _ = backward_mlp(params, cache, ce.grad)
            params = sgd_step(params, grads, lr)
            total += ce.value * idx.size
        trace.append(total / max(n, 1))
    return params, trace


# --------------------------------------------------------------------------- setup

def _dtype(config: ExperimentConfig):
    return np.float32 if config.precision == 32 else np.float64


def load_datasets(config: ExperimentConfig) -> list[ClientDataset]:
    if config.csv_paths:
        clients = load_csv_clients(config.csv_paths, config.test_ratio)
    else:
        clients = generate_drifted_clients(config.drift_spec())
    dt = _dtype(config)
    for c in clients:
        c.train_features = c.train_features.astype(dt, copy=False)
        c.test_features = c.test_features.astype(dt, copy=False)
    return clients


def model_specs(config: ExperimentConfig, input_dim: int, n_classes: int, n_clients: int):
    d = config.feature_dim
    extractor = MlpSpec((input_dim, *config.extractor_hidden, d))
    classifier = MlpSpec((d, *config.classifier_hidden, n_classes))
    amplifier = MlpSpec((d, *config.amplifier_hidden, n_clients))
    return extractor, classifier, amplifier


def _n_classes(datasets: list[ClientDataset]) -> int:
    return int(max(int(ds.train_labels.max()) for ds in datasets)) + 1


def init_clients(config: ExperimentConfig, datasets: list[ClientDataset]) -> list[ClientState]:
    n_classes = _n_classes(datasets)
    g_spec, h_spec, _ = model_specs(config, datasets[0].input_dim, n_classes, len(datasets))
    dt = _dtype(config)
    clients = []
    for ds in datasets:
        cid = ds.client_id
        init_rng = make_rng(config.seed, _S_CLIENT_INIT, cid)
        clients.append(ClientState(
            client_id=cid, dataset=ds,
            extractor=init_mlp(g_spec, init_rng, dt), classifier=init_mlp(h_spec, init_rng, dt),
            rng=make_rng(config.seed, _S_CLIENT_TRAIN, cid),
            mix_rng=make_rng(config.seed, _S_CLIENT_MIX, cid)))
    return clients


def init_server(config: ExperimentConfig, n_clients: int, input_dim: int, n_classes: int) -> ServerState:
    if n_clients < 2:
        raise DomainError("FedPall needs at least 2 clients (the amplifier's KL target is undefined for 1)")
    _, h_spec, a_spec = model_specs(config, input_dim, n_classes, n_clients)
    rng = make_rng(config.seed, _S_SERVER_INIT)
    dt = _dtype(config)
    return ServerState(amplifier=init_mlp(a_spec, rng, dt), global_classifier=init_mlp(h_spec, rng, dt),
                       n_clients=n_clients, amp_rng=make_rng(config.seed, _S_SERVER_AMP),
                       cls_rng=make_rng(config.seed, _S_SERVER_CLS))


def _ordered(clients: list[ClientState], client_order) -> list[ClientState]:
    if client_order is None:
        return list(clients)
    by_id = {c.client_id: c for c in clients}
    order = [by_id[i] for i in client_order]
    if len(order) != len(clients) or len(set(client_order)) != len(clients):
        raise ValueError("client_order must be a permutation of the client ids")
    return order


# --------------------------------------------------------------------------- phases

def phase1_generate_global_prototypes(clients: list[ClientState], server: ServerState,
                                      n_classes: int, client_order=None) -> GlobalBroadcast:
    uploads = [c.prototype_upload(server.round_index, n_classes) for c in _ordered(clients, client_order)]
    dims = {u.prototypes.prototypes.shape for u in uploads}
    if len(dims) != 1:
        raise ProtocolError(f"prototype shapes disagree across clients: {sorted(dims)}")
    # aggregate in client-id order so float summation order never depends on scheduling
    uploads.sort(key=lambda u: u.client_id)
    server.global_prototypes = aggregate_global_prototypes([u.prototypes for u in uploads])
    msg = server.broadcast()
    for c in clients:
        c.receive(msg)
    return msg


def phase2_local_training(client: ClientState, weights: LossWeights, epochs: int, batch_size: int,
                          lr: float, rng: np.random.Generator | None = None) -> list[dict]:
    return train_local(client, weights, epochs, batch_size, lr, rng)


def phase3_server_training(server: ServerState, uploads: list[MixedFeatureUpload], epochs: int,
                           batch_size: int, lr: float, train_amplifier: bool = True,
                           train_classifier: bool = True) -> ServerState:
    if not uploads:
        raise ProtocolError("phase 3 received no uploads")
    feats, labels, cids = [], [], []
    for up in sorted(uploads, key=lambda u: u.client_id):
        if up.round != server.round_index:
            raise ProtocolError(f"upload from client {up.client_id} is tagged round {up.round}, "
                                f"server is in round {server.round_index}")
        f, y, i = up.arrays()
        if f.size and (i >= server.n_clients).any():
            raise ProtocolError(f"record client_id >= {server.n_clients} in upload from client {up.client_id}")
        if f.size and (i != up.client_id).any():
            raise ProtocolError(f"upload from client {up.client_id} carries foreign client ids")
        feats.append(f)
        labels.append(y)
        cids.append(i)
    dt = server.amplifier.dtype
    x = np.concatenate(feats).astype(dt, copy=False)
    if x.shape[1] != server.amplifier.spec.input_dim:
        raise ProtocolError(f"record dim {x.shape[1]} != server model input dim {server.amplifier.spec.input_dim}")
    if train_amplifier:
        server.amplifier, _ = train_ce(server.amplifier, x, np.concatenate(cids), epochs, batch_size, lr,
                                       server.amp_rng)
    if train_classifier:
        server.global_classifier, _ = train_ce(server.global_classifier, x, np.concatenate(labels), epochs,
                                               batch_size, lr, server.cls_rng)
        server.classifier_trained = True
    return server


def phase4_decentralize_and_finetune(clients: list[ClientState], server: ServerState, finetune_epochs: int,
                                     lr: float, batch_size: int = 32) -> list[ClientState]:
    """Replace each local classifier with the global one, then fine-tune it (extractor frozen)."""
    msg = GlobalBroadcast(server.round_index, server.global_prototypes.copy() if server.global_prototypes
                          is not None else PrototypeSet(np.zeros((0, 0)), np.zeros(0)),
                          serialize_params(server.amplifier), serialize_params(server.global_classifier))
    for c in clients:
        c.classifier = deserialize_params(msg.classifier)
        if finetune_epochs > 0:
            z, _ = forward_mlp(c.extractor, c.dataset.train_features)
            c.classifier, _ = train_ce(c.classifier, z, c.dataset.train_labels, finetune_epochs, batch_size,
                                       lr, c.rng)
    return clients


# --------------------------------------------------------------------------- runners

def _eval_record(config, round_index, phase, client: ClientState, top1, losses=None) -> MetricsRecord:
    losses = losses or {}
    return MetricsRecord(config.effective_run_id, config.seed, config.method, round_index, phase,
                         client.client_id, "test", top1, losses.get("ce", float("nan")),
                         losses.get("kl", float("nan")), losses.get("nce", float("nan")))


def _evaluate(clients: list[ClientState]) -> EvalReport:
    ordered = sorted(clients, key=lambda c: c.client_id)
    args = [(c.extractor, c.classifier, c.dataset.test_features, c.dataset.test_labels) for c in ordered]
    return EvalReport([evaluate_top1(*a) for a in args], [evaluate_test_ce(*a) for a in args])


def _final_records(config, clients: list[ClientState], report: EvalReport) -> list[MetricsRecord]:
    ordered = sorted(clients, key=lambda c: c.client_id)
    return [_eval_record(config, config.global_rounds, "final", c, top1, {"ce": ce})
            for c, top1, ce in zip(ordered, report.per_client, report.test_ce)]


def _with_context(phase: str, round_index: int, exc: FedPallError) -> FedPallError:
    new = type(exc)(f"[{phase}, round {round_index}] {exc}")
    new.__cause__ = exc
    return new


def run_fedpall(config: ExperimentConfig, datasets: list[ClientDataset] | None = None,
                client_order=None) -> RunResult:
    """Full FedPall simulation; the headline report is taken after phase 4.

    Phase 3 is skipped when nothing on the server is consumed (KL disabled and
    global classifier disabled); phase 4 is skipped when the global classifier
    is disabled or was never trained (``global_rounds == 0``).
    """
    datasets = datasets if datasets is not None else load_datasets(config)
    n_classes = _n_classes(datasets)
    clients = init_clients(config, datasets)
    server = init_server(config, len(clients), datasets[0].input_dim, n_classes)
    weights = config.loss_weights
    mix = config.mix
    use_gc = config.enable_global_classifier
    run_phase3 = weights.mu > 0 or use_gc
    metrics: list[MetricsRecord] = []

    phase, r = "setup", 0
    try:
        for r in range(config.global_rounds):
            server.round_index = r
            phase = "phase1"
            phase1_generate_global_prototypes(clients, server, n_classes, client_order)
            phase = "phase2"
            for c in _ordered(clients, client_order):
                train_local(c, weights, config.local_epochs, config.batch_size, config.lr)
            for c in sorted(clients, key=lambda c: c.client_id):
                top1 = evaluate_top1(c.extractor, c.classifier, c.dataset.test_features, c.dataset.test_labels)
                metrics.append(_eval_record(config, r, "local", c, top1, c.last_losses))
            if run_phase3:
                phase = "phase3"
                uploads = [c.mixed_upload(r, mix) for c in _ordered(clients, client_order)]
                phase3_server_training(server, uploads, config.server_epochs, config.server_batch_size,
                                       config.server_lr, train_amplifier=weights.mu > 0,
                                       train_classifier=use_gc)
        r = config.global_rounds
        if use_gc and server.classifier_trained:
            phase = "phase4"
            phase4_decentralize_and_finetune(clients, server, config.effective_finetune_epochs, config.lr,
                                             config.batch_size)
    except FedPallError as exc:
        raise _with_context(phase, r, exc) from exc

    report = _evaluate(clients)
    metrics.extend(_final_records(config, clients, report))
    return RunResult(report, metrics, clients, server)


def fedavg_average(params: list[MlpParams], weights) -> MlpParams:
    """Weighted parameter mean (weights are normalized; typically train-set sizes)."""
    if not params:
        raise ProtocolError("nothing to average")
    spec = params[0].spec
    for p in params[1:]:
        if p.spec != spec:
            raise ProtocolError("cannot average models with different architectures")
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    out = params[0].zeros_like()
    for dest_arrays in zip(out.arrays(), *[p.arrays() for p in params]):
        dest, *srcs = dest_arrays
        acc = np.zeros(dest.shape, dtype=np.float64)
        for wi, s in zip(w, srcs):
            acc += wi * s
        dest[...] = acc
    return out


def run_fedavg(config: ExperimentConfig, datasets: list[ClientDataset] | None = None,
               client_order=None) -> RunResult:
    """FedAvg over extractor + classifier; evaluation uses the aggregated global model."""
    datasets = datasets if datasets is not None else load_datasets(config)
    clients = init_clients(config, datasets)
    n_classes = _n_classes(datasets)
    g_spec, h_spec, _ = model_specs(config, datasets[0].input_dim, n_classes, len(clients))
    init_rng = make_rng(config.seed, _S_SERVER_INIT)
    global_g = init_mlp(g_spec, init_rng, _dtype(config))
    global_h = init_mlp(h_spec, init_rng, _dtype(config))
    ce_only = LossWeights(0.0, 0.0, config.tau)
    sizes = [c.dataset.train_labels.shape[0] for c in sorted(clients, key=lambda c: c.client_id)]
    metrics: list[MetricsRecord] = []
    r = 0
    try:
        for r in range(config.global_rounds):
            g_blob, h_blob = serialize_params(global_g), serialize_params(global_h)
            for c in _ordered(clients, client_order):
                c.extractor, c.classifier = deserialize_params(g_blob), deserialize_params(h_blob)
                train_local(c, ce_only, config.local_epochs, config.batch_size, config.lr)
            ordered = sorted(clients, key=lambda c: c.client_id)
            global_g = fedavg_average([deserialize_params(serialize_params(c.extractor)) for c in ordered], sizes)
            global_h = fedavg_average([deserialize_params(serialize_params(c.classifier)) for c in ordered], sizes)
            for c in ordered:
                top1 = evaluate_top1(global_g, global_h, c.dataset.test_features, c.dataset.test_labels)
                metrics.append(_eval_record(config, r, "aggregate", c, top1, c.last_losses))
    except FedPallError as exc:
        raise _with_context("fedavg", r, exc) from exc
    for c in clients:
        c.extractor, c.classifier = global_g.copy(), global_h.copy()
    report = _evaluate(clients)
    metrics.extend(_final_records(config, clients, report))
    return RunResult(report, metrics, clients)


def run_local_only(config: ExperimentConfig, datasets: list[ClientDataset] | None = None,
                   client_order=None) -> RunResult:
    """Each client trains CE-only for ``global_rounds * local_epochs`` epochs, no communication."""
    datasets = datasets if datasets is not None else load_datasets(config)
    clients = init_clients(config, datasets)
    ce_only = LossWeights(0.0, 0.0, config.tau)
    metrics: list[MetricsRecord] = []
    r = 0
    try:
        for r in range(config.global_rounds):
            for c in _ordered(clients, client_order):
                train_local(c, ce_only, config.local_epochs, config.batch_size, config.lr)
            for c in sorted(clients, key=lambda c: c.client_id):
                top1 = evaluate_top1(c.extractor, c.classifier, c.dataset.test_features, c.dataset.test_labels)
                metrics.append(_eval_record(config, r, "local", c, top1, c.last_losses))
    except FedPallError as exc:
        raise _with_context("local", r, exc) from exc
    report = _evaluate(clients)
    metrics.extend(_final_records(config, clients, report))
    return RunResult(report, metrics, clients)


RUNNERS = {"fedpall": run_fedpall, "fedavg": run_fedavg, "local": run_local_only}


def run(config: ExperimentConfig, datasets=None, client_order=None) -> RunResult:
    return RUNNERS[config.method](config, datasets, client_order)


# --------------------------------------------------------------------------- metrics CSV

def _fmt(value) -> str:
    if isinstance(value, float):
        return "nan" if np.isnan(value) else f"{value:.6f}"
    return str(value)


def metrics_to_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for rec in sorted(records, key=lambda m: (m.round, m.client_id)):
        w.writerow([_fmt(getattr(rec, k)) for k in METRICS_HEADER])
    return buf.getvalue()


def write_metrics_csv(records: list[MetricsRecord], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(metrics_to_csv(records))
    return path

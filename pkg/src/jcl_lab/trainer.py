"""Joint contrastive training loop, the source-only baseline and diagnostics.

One epoch of :func:`train_jcl`:

1. encode the target set, run spherical k-means seeded with the per-class
   source feature centroids, and split points into certain / uncertain by
   the dissimilarity threshold ``d``;
2. rebalance source and certain-target sets to flat label histograms;
3. per iteration: sample source, certain-target and uncertain-target
   batches, take two jittered views where keys are needed, compute the
   source cross-entropy on query features, forward the uncertain batch so
   the target normalization statistics keep training, enqueue the merged
   keys, compute the contrastive loss of the merged queries against the
   queue, take an SGD step on ``L_s + gamma * L_c`` and momentum-update the
   key network.

All randomness flows from named streams derived from the root seed, so the
source stream of a JCL run and of a source-only run with the same seed draw
exactly the same batches and augmentations.
"""

from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from jcl_lab import cluster, data, infotheory, moco, nn
from jcl_lab.errors import ContractError, NonFiniteLossError

log = logging.getLogger(__name__)

STREAMS = ("init", "source_batch", "source_aug", "certain_batch", "uncertain_batch",
           "target_aug", "rebalance", "eval", "probe")


def _stream(seed, name):
    return np.random.default_rng([int(seed), STREAMS.index(name)])


def default_task():
    """Three classes 60 degrees apart, target rotated by 30 degrees.

    The rotation puts every target class mean on a source decision boundary,
    so a source-trained classifier transfers poorly.
    """
    return data.SyntheticTaskConfig(angles_deg=(0.0, 60.0, 120.0), rotation_deg=30.0)


@dataclass
class TrainConfig:
    gamma: float = 1.0
    tau: float = 0.05
    d: float = 0.1
    queue_capacity: int = 512
    key_momentum: float = 0.9
    eta0: float = 0.01
    alpha: float = 10.0
    beta: float = 0.75
    sgd_momentum: float = 0.9
    batch_source: int = 32
    batch_certain: int = 32
    batch_uncertain: int = 32
    epochs: int = 10
    iters_per_epoch: int = 100
    warmup_epochs: int = 1
    seed: int = 0
    # jitter std for the two views; None means 5% of the task radius
    aug_sigma: float | None = None
    hidden: tuple = (64, 64)
    feat_dim: int = 16
    proj_dim: int = 8
    # enqueue the batch keys before computing L_c (False: loss over the old queue plus own keys)
    enqueue_before_loss: bool = True
    warm_start_centers: bool = False
    infonce_k: int = 64
    probe_epochs: int = 200
    probe_lr: float = 0.5
    task: data.SyntheticTaskConfig = field(default_factory=lambda: default_task())

    def __post_init__(self):
        if isinstance(self.task, dict):
            self.task = data.SyntheticTaskConfig(**self.task)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.gamma < 0:
            raise ContractError("gamma must be non-negative")
        if self.tau <= 0:
            raise ContractError("tau must be positive")
        if not 0.0 <= self.d <= 2.0:
            raise ContractError("d must lie in [0, 2]")
        if not 0.0 <= self.key_momentum < 1.0:
            raise ContractError("key momentum must lie in [0, 1)")
        if self.epochs < 1 or self.iters_per_epoch < 1:
            raise ContractError("need at least one epoch and one iteration per epoch")
        if min(self.batch_source, self.batch_certain, self.batch_uncertain) < 1:
            raise ContractError("batch sizes must be positive")
        if self.batch_source + self.batch_certain > self.queue_capacity:
            raise ContractError("a merged key batch must fit in the queue")

    @property
    def max_iterations(self):
        return self.epochs * self.iters_per_epoch

    @property
    def sigma(self):
        return 0.05 * self.task.radius if self.aug_sigma is None else self.aug_sigma

    def architecture(self):
        return nn.Architecture(in_dim=2, hidden=self.hidden, feat_dim=self.feat_dim,
                               proj_dim=self.proj_dim, n_classes=self.task.n_classes)

    def to_dict(self):
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        return out

    @classmethod
    def from_dict(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        task = obj.get("task", {})
        if isinstance(task, dict):
            task_known = {f.name for f in fields(data.SyntheticTaskConfig)}
            bad = set(task) - task_known
            if bad:
                raise ContractError(f"unknown task keys: {sorted(bad)}")
        return cls(**obj)


METRIC_COLUMNS = (
    "iteration", "epoch", "loss_source", "loss_contrastive", "lr", "target_acc",
    "pseudo_label_acc", "certain_frac", "infonce", "probe_error",
)


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    loss_source: float
    loss_contrastive: float | None
    lr: float
    target_acc: float | None = None
    pseudo_label_acc: float | None = None
    certain_frac: float | None = None
    infonce: float | None = None
    probe_error: float | None = None


def metrics_to_csv(records):
    """Fixed-header CSV, one row per iteration; blank cells where nothing was measured."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_COLUMNS)
    for rec in records:
        row = []
        for col in METRIC_COLUMNS:
            v = getattr(rec, col)
            row.append("" if v is None else (repr(float(v)) if isinstance(v, float) else v))
        writer.writerow(row)
    return buf.getvalue()


@dataclass
class TrainResult:
    state: nn.MlpState
    key_state: nn.MlpState | None
    metrics: list
    config: TrainConfig
    source: data.DomainDataset
    target: data.DomainDataset
    target_domain_for_eval: str

    @property
    def final_target_acc(self):
        return next(r.target_acc for r in reversed(self.metrics) if r.target_acc is not None)

    @property
    def probe_error(self):
        return self.metrics[-1].probe_error


def param_digest(params):
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name]).tobytes())
    return h.hexdigest()


# --------------------------------------------------------------------------
# evaluation (the only place that reads withheld target labels)


class Evaluator:
    def __init__(self, source, target, cfg, target_domain):
        self._source_truth = data.reveal_labels(source)
        self._target_truth = data.reveal_labels(target)
        self.source = source
        self.target = target
        self.cfg = cfg
        self.target_domain = target_domain

    def target_accuracy(self, state):
        pred = nn.predict(state, self.target.features, self.target_domain)
        return float(np.mean(pred == self._target_truth))

    def pseudo_label_accuracy(self, certain_idx, pseudo_labels):
        if len(certain_idx) == 0:
            return None
        return float(np.mean(self._target_truth[certain_idx] == pseudo_labels))

    def infonce(self, state, rng):
        """InfoNCE between projections of two different same-class source samples."""
        labels = self._source_truth
        k = min(self.cfg.infonce_k, len(labels))
        anchors = rng.choice(len(labels), size=k, replace=False)
        partners = np.array([rng.choice(np.flatnonzero(labels == labels[a])) for a in anchors])
        z, _ = nn.forward(state, self.source.features, data.SOURCE, train_mode=False)
        w, _ = nn.project(state, z)
        scores = w[anchors] @ w[partners].T / self.cfg.tau
        return infotheory.infonce_from_scores(scores)

    def probe(self, state, rng):
        zs, _ = nn.forward(state, self.source.features, data.SOURCE, train_mode=False)
        zt, _ = nn.forward(state, self.target.features, self.target_domain, train_mode=False)
        feats = np.vstack([zs, zt])
        labels = np.concatenate([self._source_truth, self._target_truth])
        return linear_probe(feats, labels, rng, epochs=self.cfg.probe_epochs, lr=self.cfg.probe_lr)


def linear_probe(features, labels, rng, epochs=200, lr=0.5, batch_size=64, n_classes=None):
    """Fit softmax regression on frozen features by minibatch SGD; return the training error rate."""
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ContractError("linear probe needs at least two classes")
    c = int(y.max()) + 1 if n_classes is None else n_classes
    W = np.zeros((x.shape[1], c))
    b = np.zeros(c)
    vW, vb = np.zeros_like(W), np.zeros_like(b)
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            _, dlogits = nn.cross_entropy_loss(x[idx] @ W + b, y[idx])
            vW = 0.9 * vW + x[idx].T @ dlogits
            vb = 0.9 * vb + dlogits.sum(axis=0)
            W -= lr * vW
            b -= lr * vb
    pred = np.argmax(x @ W + b, axis=1)
    return float(np.mean(pred != y))


# --------------------------------------------------------------------------
# pseudo-labelling


def class_centroids(z, labels, n_classes):
    centers = np.stack([z[labels == c].sum(axis=0) for c in range(n_classes)])
    return centers / np.linalg.norm(centers, axis=1, keepdims=True)


def pseudo_label_target(state, source, target, n_classes, d, init_centers=None):
    """Cluster target features; returns ``(ClusterModel, certain_idx, pseudo_labels, uncertain_idx)``."""
    if init_centers is None:
        zs, _ = nn.forward(state, source.features, data.SOURCE, train_mode=False)
        init_centers = class_centroids(zs, source.labels, n_classes)
    zt, _ = nn.forward(state, target.features, data.TARGET, train_mode=False)
    model = cluster.spherical_kmeans(zt, init_centers)
    certain, pseudo, uncertain = cluster.split_certain(model, d)
    return model, certain, pseudo, uncertain


def _assert_flat(labels, classes):
    counts = np.bincount(labels, minlength=max(classes) + 1)[list(classes)]
    if len(set(counts.tolist())) != 1:
        raise AssertionError(f"rebalanced histogram is not flat: {counts.tolist()}")


def _draw(rng, n, size):
    return rng.choice(n, size=size, replace=n < size)


# --------------------------------------------------------------------------
# training


def _train(cfg, contrastive):
    arch = cfg.architecture()
    source, target = data.gen_synthetic_pair(cfg.task)
    # source-only never trains target statistics, so it evaluates the target with source ones
    target_eval_domain = data.TARGET if contrastive else data.SOURCE
    evaluator = Evaluator(source, target, cfg, target_eval_domain)
    # only unlabelled target data goes past this point
    target = data.DomainDataset(target.features, target.labels, data.TARGET)
    C = cfg.task.n_classes

    state = nn.init_state(arch, _stream(cfg.seed, "init"))
    key_state = state.copy() if contrastive else None
    opt = nn.OptimizerState(cfg.eta0, cfg.alpha, cfg.beta, cfg.sgd_momentum)
    queue = moco.KeyQueue(cfg.queue_capacity, arch.proj_dim) if contrastive else None

    rngs = {name: _stream(cfg.seed, name) for name in STREAMS}
    records = []
    prev_centers = None

    for epoch in range(cfg.epochs):
        epoch_info = {}
        source_bal = source.subset(cluster.rebalance_indices(source.labels, range(C), rngs["rebalance"]))
        _assert_flat(source_bal.labels, range(C))
        certain_set = uncertain_set = None
        if contrastive:
            init = prev_centers if (cfg.warm_start_centers and prev_centers is not None) else None
            model, c_idx, pseudo, u_idx = pseudo_label_target(state, source, target, C, cfg.d, init)
            prev_centers = model.centers
            epoch_info["pseudo_label_acc"] = evaluator.pseudo_label_accuracy(c_idx, pseudo)
            epoch_info["certain_frac"] = len(c_idx) / len(target)
            if len(c_idx):
                present = np.unique(pseudo)
                bal = cluster.rebalance_indices(pseudo, present, rngs["rebalance"])
                certain_set = target.subset(c_idx[bal])
                certain_set.pseudo_labels = pseudo[bal]
                _assert_flat(certain_set.pseudo_labels, present)
            if len(u_idx):
                uncertain_set = target.subset(u_idx)
        active = contrastive and epoch >= cfg.warmup_epochs

        for it in range(cfg.iters_per_epoch):
            i = epoch * cfg.iters_per_epoch + it
            opt.p = i / cfg.max_iterations
            lr = opt.lr
            if lr != nn.lr_schedule(i / cfg.max_iterations, cfg.eta0, cfg.alpha, cfg.beta):
                raise AssertionError("learning rate drifted from the schedule")

            s_idx = _draw(rngs["source_batch"], len(source_bal), cfg.batch_source)
            xs_q, xs_k = data.augment(source_bal.features[s_idx], rngs["source_aug"], cfg.sigma)
            ys = source_bal.labels[s_idx]

            zs_q, s_cache = nn.forward(state, xs_q, data.SOURCE, train_mode=True)
            logits, c_cache = nn.classify(state, zs_q)
            loss_s, dlogits = nn.cross_entropy_loss(logits, ys)
            grads, dzs = nn.classify_backward(state, c_cache, dlogits)

            loss_c = None
            if contrastive:
                loss_c, extra, dzs_c = _contrastive_step(
                    cfg, state, key_state, queue, zs_q, xs_k, ys,
                    certain_set, uncertain_set, rngs, active,
                )
                nn.accumulate(grads, extra)
                if dzs_c is not None:
                    dzs = dzs + dzs_c
            nn.accumulate(grads, nn.backward(state, s_cache, dzs))

            for name, value in (("L_s", loss_s), ("L_c", loss_c)):
                if value is not None and not math.isfinite(value):
                    rec = MetricsRecord(i, epoch, loss_s, loss_c, lr)
                    raise NonFiniteLossError(f"{name} is {value} at iteration {i}", rec)
            if loss_s < 0 or (loss_c is not None and loss_c < 0):
                raise AssertionError("losses must be non-negative")

            nn.sgd_step(state, grads, opt)
            if contrastive:
                moco.momentum_update(key_state.params, state.params, cfg.key_momentum)
                if epoch >= cfg.warmup_epochs and not queue.full:
                    raise AssertionError("queue is not full after warm-up")

            records.append(MetricsRecord(i, epoch, loss_s, loss_c, lr))

        first = records[epoch * cfg.iters_per_epoch]
        first.pseudo_label_acc = epoch_info.get("pseudo_label_acc")
        first.certain_frac = epoch_info.get("certain_frac")
        last = records[-1]
        last.target_acc = evaluator.target_accuracy(state)
        last.infonce = evaluator.infonce(state, rngs["eval"])
        log.debug("epoch %d: L_s=%.4f target_acc=%.4f", epoch, last.loss_source, last.target_acc)

    records[-1].probe_error = evaluator.probe(state, rngs["probe"])
    return TrainResult(state, key_state, records, cfg, source, target, target_eval_domain)


def _contrastive_step(cfg, state, key_state, queue, zs_q, xs_k, ys,
                      certain_set, uncertain_set, rngs, active):
    """Target forwards, key encoding, queue update and contrastive loss.

    Returns ``(loss_c, grads for params outside the source encoder path,
    d loss / d source query features or None)``. Gradients are scaled by
    gamma and are all zero while the warm-up is running.
    """
    grads = {}
    ws_q, ps_cache = nn.project(state, zs_q)
    queries = [ws_q]
    labels = [ys]
    zk, _ = nn.forward(key_state, xs_k, data.SOURCE, train_mode=True)
    keys = [nn.project(key_state, zk)[0]]

    t_cache = tp_cache = None
    if certain_set is not None:
        t_idx = _draw(rngs["certain_batch"], len(certain_set), cfg.batch_certain)
        xt_q, xt_k = data.augment(certain_set.features[t_idx], rngs["target_aug"], cfg.sigma)
        yt = certain_set.pseudo_labels[t_idx]
        zt_q, t_cache = nn.forward(state, xt_q, data.TARGET, train_mode=True)
        wt_q, tp_cache = nn.project(state, zt_q)
        zt_k, _ = nn.forward(key_state, xt_k, data.TARGET, train_mode=True)
        queries.append(wt_q)
        labels.append(yt)
        keys.append(nn.project(key_state, zt_k)[0])

    if uncertain_set is not None:
        u_idx = _draw(rngs["uncertain_batch"], len(uncertain_set), cfg.batch_uncertain)
        xu, _ = data.augment(uncertain_set.features[u_idx], rngs["target_aug"], cfg.sigma)
        # statistics-only pass; no gradient flows from it
        nn.forward(state, xu, data.TARGET, train_mode=True)

    w_q = np.vstack(queries)
    q_labels = np.concatenate(labels)
    w_k = np.vstack(keys)
    if cfg.enqueue_before_loss:
        queue.enqueue_batch(w_k, q_labels)
        dict_keys, dict_labels = queue.snapshot()
    else:
        old_keys, old_labels = queue.snapshot()
        dict_keys = np.vstack([old_keys, w_k])
        dict_labels = np.concatenate([old_labels, q_labels])
        queue.enqueue_batch(w_k, q_labels)

    loss_c, dw = nn.contrastive_loss(w_q, q_labels, dict_keys, dict_labels, cfg.tau)
    if not active:
        return loss_c, grads, None

    n_s = len(ys)
    dw = cfg.gamma * dw
    g_ps, dzs = nn.project_backward(state, ps_cache, dw[:n_s])
    nn.accumulate(grads, g_ps)
    if t_cache is not None:
        g_pt, dzt = nn.project_backward(state, tp_cache, dw[n_s:])
        nn.accumulate(grads, g_pt)
        nn.accumulate(grads, nn.backward(state, t_cache, dzt))
    return loss_c, grads, dzs


def train_jcl(cfg):
    """Joint contrastive training. Returns a :class:`TrainResult`."""
    return _train(cfg, contrastive=True)


def train_source_only(cfg):
    """Same loop and sampling streams with no clustering, queue or contrastive term."""
    return _train(cfg, contrastive=False)


def with_seed(cfg, seed):
    """Copy of ``cfg`` whose data draw and training streams both use ``seed``."""
    task = asdict(cfg.task)
    task["seed"] = int(seed)
    return _replace(cfg, seed=int(seed), task=task)


def gamma_sweep(cfg, gammas, seeds=None):
    """Train once per (gamma, seed); returns rows of final target accuracy.

    Each seed redraws the data as well as the training streams.
    """
    seeds = [cfg.seed] if seeds is None else list(seeds)
    rows = []
    for g in gammas:
        if g < 0:
            raise ContractError("gamma values must be non-negative")
        for s in seeds:
            run = train_jcl(_replace(with_seed(cfg, s), gamma=float(g)))
            rows.append({"gamma": float(g), "seed": int(s), "target_acc": run.final_target_acc})
    return rows


def sweep_sensitivity(rows):
    """Max minus min over gammas of the seed-averaged final target accuracy."""
    by_gamma = {}
    for r in rows:
        by_gamma.setdefault(r["gamma"], []).append(r["target_acc"])
    means = [float(np.mean(v)) for v in by_gamma.values()]
    return max(means) - min(means)


def _replace(cfg, **changes):
    obj = cfg.to_dict()
    obj["task"] = asdict(cfg.task)
    obj.update(changes)
    return TrainConfig.from_dict(obj)


def features_to_csv(result):
    """Input coordinates, encoder features and labels for both domains."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    feat_dim = result.config.feat_dim
    writer.writerow(["x", "y"] + [f"z{i}" for i in range(feat_dim)] + ["true_label", "pseudo_label", "domain"])
    C = result.config.task.n_classes
    pseudo_t = None
    if result.key_state is not None:
        _, c_idx, pseudo, _ = pseudo_label_target(result.state, result.source, result.target, C, result.config.d)
        pseudo_t = np.full(len(result.target), -1)
        pseudo_t[c_idx] = pseudo
    for ds, domain in ((result.source, data.SOURCE), (result.target, result.target_domain_for_eval)):
        z, _ = nn.forward(result.state, ds.features, domain, train_mode=False)
        truth = data.reveal_labels(ds) if ds.domain == data.SOURCE else None
        for j in range(len(ds)):
            true_label = int(truth[j]) if truth is not None else -1
            pl = -1 if (ds.domain == data.SOURCE or pseudo_t is None) else int(pseudo_t[j])
            writer.writerow([repr(float(v)) for v in ds.features[j]] + [repr(float(v)) for v in z[j]]
                            + [true_label, pl, ds.domain])
    return buf.getvalue()

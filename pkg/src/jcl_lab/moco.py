"""Momentum key encoder and the labelled FIFO key dictionary."""

from __future__ import annotations

import csv
import io

import numpy as np

from jcl_lab.errors import ContractError, DimensionError

UNIT_TOL = 1e-9


def momentum_update(key_params, query_params, m):
    """``theta_k <- m theta_k + (1 - m) theta_q`` for every shared parameter, in place.

    ``query_params`` is only read. Returns ``key_params``.
    """
    if not 0.0 <= m < 1.0:
        raise ContractError(f"momentum coefficient {m} outside [0, 1)")
    for name, k in key_params.items():
        q = query_params[name]
        if q.shape != k.shape:
            raise DimensionError(f"{name}: key shape {k.shape} != query shape {q.shape}")
        key_params[name] = m * k + (1.0 - m) * q
    return key_params


class KeyQueue:
    """Fixed-capacity FIFO of unit-norm keys with class labels.

    Entries are kept oldest first. ``ids`` records the global insertion
    counter of every stored key.
    """

    def __init__(self, capacity, dim):
        if capacity < 1:
            raise ContractError("queue capacity must be positive")
        self.capacity = int(capacity)
        self.dim = int(dim)
        self.keys = np.empty((0, self.dim))
        self.labels = np.empty(0, dtype=np.int64)
        self.ids = np.empty(0, dtype=np.int64)
        self._counter = 0

    def __len__(self):
        return len(self.labels)

    @property
    def full(self):
        return len(self) == self.capacity

    def enqueue_batch(self, keys, labels):
        """Append a batch, then drop the oldest entries beyond capacity."""
        keys = np.asarray(keys, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        if keys.ndim != 2 or keys.shape[1] != self.dim or labels.shape != (keys.shape[0],):
            raise DimensionError(f"expected ({len(labels)}, {self.dim}) keys with matching labels")
        if len(keys) > self.capacity:
            raise ContractError(f"batch of {len(keys)} exceeds capacity {self.capacity}")
        if len(keys) and np.max(np.abs(np.linalg.norm(keys, axis=1) - 1.0)) > UNIT_TOL:
            raise ContractError("keys must have unit norm")
        new_ids = np.arange(self._counter, self._counter + len(keys))
        self._counter += len(keys)
        self.keys = np.concatenate([self.keys, keys])
        self.labels = np.concatenate([self.labels, labels])
        self.ids = np.concatenate([self.ids, new_ids])
        self.dequeue()
        return self

    def dequeue(self):
        """Evict the oldest entries until the queue fits its capacity."""
        excess = len(self) - self.capacity
        if excess > 0:
            self.keys = self.keys[excess:]
            self.labels = self.labels[excess:]
            self.ids = self.ids[excess:]
        return self

    def partition_by_label(self, query_label):
        """``(positive keys, negative keys)`` relative to ``query_label``."""
        same = self.labels == query_label
        return self.keys[same], self.keys[~same]

    def snapshot(self):
        return self.keys.copy(), self.labels.copy()

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["index", "label"] + [f"k{i}" for i in range(self.dim)])
        for idx, label, key in zip(self.ids, self.labels, self.keys):
            writer.writerow([int(idx), int(label)] + [repr(float(v)) for v in key])
        return buf.getvalue()

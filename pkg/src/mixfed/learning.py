"""Local training, model flattening/fragmentation, and identity-free
fragment aggregation.

The built-in task is a Gaussian-mixture classification problem trained by a
one-hidden-layer network, small enough that a full multi-node scenario runs
on a desk CPU in seconds.  Model updates are flattened to a float vector,
cut into fixed-size fragments tagged only with (epoch, index range), and
aggregated coordinatewise: own value plus every received contribution,
divided by the contributor count, falling back to the local value where
nothing arrived.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

FRAGMENT_HEADER = struct.Struct("<III")  # epoch, range start, range end
ELEMENT_SIZE = 4  # float32 on the wire


class LearningError(Exception):
    pass


class TooFewSamples(LearningError):
    pass


class RangeOutOfBounds(LearningError):
    pass


# ---------------------------------------------------------------------------
# data

@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)


def make_mixture_task(
    rng: np.random.Generator,
    n_classes: int = 4,
    dim: int = 16,
    n_train: int = 6000,
    n_test: int = 2000,
    spread: float = 1.0,
    separation: float = 3.0,
) -> tuple[Dataset, Dataset]:
    """Synthetic Gaussian-mixture classification task."""
    means = rng.normal(size=(n_classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)

    def draw(n):
        y = rng.integers(0, n_classes, size=n)
        x = means[y] + spread * rng.normal(size=(n, dim))
        return Dataset(x, y)

    return draw(n_train), draw(n_test)


def dirichlet_partition(
    data: Dataset, n_nodes: int, alpha: float, rng: np.random.Generator
) -> list[Dataset]:
    """Split a labeled dataset across nodes, class proportions ~ Dirichlet(alpha).

    Partitions are disjoint and cover the dataset.  Raises TooFewSamples if
    some node would end up empty.
    """
    if len(data) == 0:
        raise TooFewSamples("empty dataset")
    assignments: list[list[int]] = [[] for _ in range(n_nodes)]
    for c in np.unique(data.y):
        idx = np.flatnonzero(data.y == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_nodes, alpha))
        counts = np.floor(props * len(idx)).astype(int)
        # hand out the rounding remainder to the largest fractional parts
        rem = len(idx) - counts.sum()
        order = np.argsort(-(props * len(idx) - counts))
        counts[order[:rem]] += 1
        stops = np.cumsum(counts)
        start = 0
        for node, stop in enumerate(stops):
            assignments[node].extend(idx[start:stop])
            start = stop
    parts = []
    for rows in assignments:
        if not rows:
            raise TooFewSamples("a node would receive zero samples")
        rows = np.array(sorted(rows))
        parts.append(Dataset(data.x[rows], data.y[rows]))
    return parts


# ---------------------------------------------------------------------------
# model

@dataclass
class ModelVector:
    values: np.ndarray  # float64, shape (n,)
    shapes: list[tuple[int, ...]]

    @property
    def dim(self) -> int:
        return int(self.values.size)

    def unflatten(self) -> list[np.ndarray]:
        out, off = [], 0
        for shape in self.shapes:
            size = int(np.prod(shape))
            out.append(self.values[off : off + size].reshape(shape))
            off += size
        return out

    def copy(self) -> "ModelVector":
        return ModelVector(self.values.copy(), list(self.shapes))


def flatten(tensors: list[np.ndarray]) -> ModelVector:
    values = np.concatenate([t.ravel() for t in tensors]).astype(np.float64)
    return ModelVector(values, [tuple(t.shape) for t in tensors])


def mnist_cnn_shape_spec() -> list[tuple[int, ...]]:
    """Parameter shapes of a small three-block conv net with a linear head,
    for exercising flattening/fragmentation at realistic dimension."""
    return [
        (32, 1, 3, 3), (32,), (32,), (32,),        # conv + bn block 1
        (64, 32, 3, 3), (64,), (64,), (64,),       # conv + bn block 2
        (128, 64, 3, 3), (128,), (128,), (128,),   # conv + bn block 3
        (10, 128), (10,),                          # classifier
    ]


class MlpClassifier:
    """One hidden layer, tanh activation, softmax cross-entropy."""

    def __init__(self, dim: int, hidden: int, n_classes: int):
        self.dim = dim
        self.hidden = hidden
        self.n_classes = n_classes

    def init(self, rng: np.random.Generator) -> ModelVector:
        scale1 = 1.0 / np.sqrt(self.dim)
        scale2 = 1.0 / np.sqrt(self.hidden)
        return flatten([
            rng.normal(scale=scale1, size=(self.dim, self.hidden)),
            np.zeros(self.hidden),
            rng.normal(scale=scale2, size=(self.hidden, self.n_classes)),
            np.zeros(self.n_classes),
        ])

    def _forward(self, w: ModelVector, x: np.ndarray):
        w1, b1, w2, b2 = w.unflatten()
        a1 = np.tanh(x @ w1 + b1)
        logits = a1 @ w2 + b2
        logits -= logits.max(axis=1, keepdims=True)
        expl = np.exp(logits)
        probs = expl / expl.sum(axis=1, keepdims=True)
        return a1, probs

    def loss_and_grad(
        self, w: ModelVector, x: np.ndarray, y: np.ndarray
    ) -> tuple[float, np.ndarray]:
        n = len(y)
        w1, b1, w2, b2 = w.unflatten()
        a1, probs = self._forward(w, x)
        loss = float(-np.log(probs[np.arange(n), y] + 1e-12).mean())
        dlogits = probs
        dlogits[np.arange(n), y] -= 1.0
        dlogits /= n
        dw2 = a1.T @ dlogits
        db2 = dlogits.sum(axis=0)
        da1 = dlogits @ w2.T
        dz1 = da1 * (1.0 - a1 * a1)
        dw1 = x.T @ dz1
        db1 = dz1.sum(axis=0)
        return loss, flatten([dw1, db1, dw2, db2]).values

    def loss(self, w: ModelVector, x: np.ndarray, y: np.ndarray) -> float:
        _, probs = self._forward(w, x)
        return float(-np.log(probs[np.arange(len(y)), y] + 1e-12).mean())

    def predict(self, w: ModelVector, x: np.ndarray) -> np.ndarray:
        _, probs = self._forward(w, x)
        return probs.argmax(axis=1)


def local_train(
    model: MlpClassifier,
    w: ModelVector,
    data: Dataset,
    tau: int,
    eta: float,
    rng: np.random.Generator,
    batch_size: int = 32,
) -> ModelVector:
    """tau steps of minibatch SGD on the local partition."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    w = w.copy()
    n = len(data)
    for _ in range(tau):
        batch = rng.integers(0, n, size=min(batch_size, n))
        _, grad = model.loss_and_grad(w, data.x[batch], data.y[batch])
        w.values -= eta * grad
    return w


def evaluate(model: MlpClassifier, w: ModelVector, data: Dataset) -> dict:
    if len(data) == 0:
        raise LearningError("empty test set")
    pred = model.predict(w, data.x)
    return {
        "accuracy": float((pred == data.y).mean()),
        "loss": model.loss(w, data.x, data.y),
    }


# ---------------------------------------------------------------------------
# fragments

@dataclass(frozen=True)
class Fragment:
    """Contiguous slice [start, end) of a flattened parameter vector.

    Carries position and epoch only: no sender identity, no total count.
    """
    epoch: int
    start: int
    end: int
    values: bytes  # float32 little-endian, (end-start) elements

    def to_bytes(self) -> bytes:
        return FRAGMENT_HEADER.pack(self.epoch, self.start, self.end) + self.values

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Fragment":
        epoch, start, end = FRAGMENT_HEADER.unpack_from(raw)
        values = raw[FRAGMENT_HEADER.size :]
        if end < start or len(values) != (end - start) * ELEMENT_SIZE:
            raise LearningError("malformed fragment")
        return cls(epoch, start, end, values)

    def array(self) -> np.ndarray:
        return np.frombuffer(self.values, dtype="<f4").astype(np.float64)

    def content_hash(self) -> bytes:
        h = hashlib.sha256()
        h.update(struct.pack("<II", self.start, self.end))
        h.update(self.values)
        return h.digest()


def fragment_model(w: ModelVector, frag_bytes: int, epoch: int) -> list[Fragment]:
    """Cut the flattened vector into contiguous fragments of frag_bytes worth
    of elements (the last may be shorter); reassembly is exact."""
    if frag_bytes < ELEMENT_SIZE:
        raise LearningError("frag_bytes smaller than one element")
    per = frag_bytes // ELEMENT_SIZE
    encoded = w.values.astype("<f4").tobytes()
    n = w.dim
    out = []
    for s in range(0, n, per):
        e = min(n, s + per)
        out.append(Fragment(epoch, s, e, encoded[s * ELEMENT_SIZE : e * ELEMENT_SIZE]))
    return out


def reassemble(fragments: list[Fragment], shapes: list[tuple[int, ...]]) -> ModelVector:
    n = sum(f.end - f.start for f in fragments)
    values = np.empty(n, dtype=np.float64)
    for f in fragments:
        values[f.start : f.end] = f.array()
    return ModelVector(values, shapes)


class FragmentBuffer:
    """Per-epoch inbox, deduplicated by content hash of (range, value bytes)."""

    def __init__(self):
        self._by_epoch: dict[int, dict[bytes, Fragment]] = {}
        self.duplicates = 0

    def add(self, fragment: Fragment) -> bool:
        bucket = self._by_epoch.setdefault(fragment.epoch, {})
        key = fragment.content_hash()
        if key in bucket:
            self.duplicates += 1
            return False
        bucket[key] = fragment
        return True

    def epoch_fragments(self, epoch: int) -> list[Fragment]:
        return list(self._by_epoch.get(epoch, {}).values())

    def count(self, epoch: int) -> int:
        return len(self._by_epoch.get(epoch, {}))

    def drop_epochs_before(self, epoch: int) -> None:
        for e in [e for e in self._by_epoch if e < epoch]:
            del self._by_epoch[e]

    def contributor_counts(self, epoch: int, n: int) -> np.ndarray:
        counts = np.zeros(n, dtype=np.int64)
        for f in self.epoch_fragments(epoch):
            if f.end > n:
                raise RangeOutOfBounds(f"[{f.start},{f.end}) beyond {n}")
            counts[f.start : f.end] += 1
        return counts


@dataclass
class CoverageStats:
    """Per-round fragment coverage: how much of the vector got contributions
    and from how many contributors on average."""
    epoch: int
    covered_fraction: float
    mean_contributors: float

    @classmethod
    def from_counts(cls, epoch: int, c: np.ndarray) -> "CoverageStats":
        covered = c >= 2  # c starts at 1: the local model is a contributor
        frac = float(covered.mean()) if c.size else 0.0
        mean = float(c[covered].mean()) if covered.any() else 0.0
        return cls(epoch, frac, mean)


def fragment_fedavg(
    w: ModelVector, fragments: list[Fragment]
) -> tuple[ModelVector, np.ndarray]:
    """Coordinatewise average of the local vector and every received
    contribution; coordinates nothing arrived for keep the local value.

    Returns (averaged model, contributor count vector c with c_i >= 1).
    """
    n = w.dim
    a = w.values.astype(np.float64).copy()
    c = np.ones(n, dtype=np.int64)
    # canonical accumulation order makes the result independent of arrival order
    for f in sorted(fragments, key=lambda f: (f.start, f.end, f.values)):
        if f.start < 0 or f.end > n or f.start >= f.end:
            raise RangeOutOfBounds(f"[{f.start},{f.end}) beyond {n}")
        a[f.start : f.end] += f.array()
        c[f.start : f.end] += 1
    return ModelVector(a / c, list(w.shapes)), c

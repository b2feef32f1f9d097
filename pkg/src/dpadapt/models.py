"""Loss models, per-example gradients, clipping, and data handling.

Each model exposes per-example losses and gradients over a flat parameter
vector, an optional analytic population gradient, and (when generative) a
sampler for fresh examples. Gradient bounds G and smoothness constants L
are recorded on the model when known.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .streams import stream


# ---------------------------------------------------------------------------
# datasets


class Dataset:
    """A fixed training set: feature matrix, optional labels, provenance."""

    def __init__(self, features: np.ndarray, labels: np.ndarray | None = None,
                 generator_spec: dict | None = None):
        features = np.asarray(features, dtype=float)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError("features must be a nonempty (n, d) array")
        if labels is not None and len(labels) != features.shape[0]:
            raise ValueError("labels length must match number of examples")
        self.features = features
        self.labels = None if labels is None else np.asarray(labels)
        self.generator_spec = dict(generator_spec or {})
        self._feature_mean: np.ndarray | None = None
        self._sq_norm_mean: float | None = None

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_mean(self) -> np.ndarray:
        if self._feature_mean is None:
            self._feature_mean = self.features.mean(axis=0)
        return self._feature_mean

    @property
    def sq_norm_mean(self) -> float:
        if self._sq_norm_mean is None:
            self._sq_norm_mean = float(
                np.einsum("ij,ij->", self.features, self.features) / self.n
            )
        return self._sq_norm_mean

    def subset(self, indices: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
        X = self.features[indices]
        y = None if self.labels is None else self.labels[indices]
        return X, y


@dataclass(frozen=True)
class GradientSample:
    """A raw per-example gradient together with its clipped version.

    Valid samples satisfy |clipped| <= clip_bound, clipped == raw whenever
    the raw norm is within the bound, and clipped parallel to raw.
    """

    raw: np.ndarray
    clipped: np.ndarray
    clip_bound: float

    def __post_init__(self):
        if self.clip_bound <= 0:
            raise ValueError("clip_bound must be positive")
        raw_norm = float(np.linalg.norm(self.raw))
        clipped_norm = float(np.linalg.norm(self.clipped))
        if clipped_norm > self.clip_bound * (1 + 1e-12):
            raise ValueError("clipped gradient exceeds the bound")
        expected = min(raw_norm, self.clip_bound)
        if abs(clipped_norm - expected) > 1e-9 * max(1.0, expected):
            raise ValueError("clipped norm is not min(|raw|, bound)")
        if abs(float(self.clipped @ self.raw) - clipped_norm * raw_norm) \
                > 1e-9 * max(1.0, raw_norm ** 2):
            raise ValueError("clipped gradient is not parallel to raw")

    @classmethod
    def from_raw(cls, raw: np.ndarray, bound: float) -> "GradientSample":
        return cls(np.asarray(raw, dtype=float), clip(raw, bound), bound)


def clip(raw: np.ndarray, bound: float) -> np.ndarray:
    """Rescale ``raw`` onto the ball of radius ``bound``: raw * min(1, bound/|raw|)."""
    if bound <= 0:
        raise ValueError(f"clip bound must be positive, got {bound}")
    norm = float(np.linalg.norm(raw))
    if norm <= bound:
        return np.array(raw, dtype=float, copy=True)
    return np.asarray(raw, dtype=float) * (bound / norm)


def clip_rows(rows: np.ndarray, bound: float) -> np.ndarray:
    """Row-wise clip of an (n, p) gradient matrix."""
    if bound <= 0:
        raise ValueError(f"clip bound must be positive, got {bound}")
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    scale = np.minimum(1.0, bound / np.maximum(norms, 1e-300))
    return rows * scale


# ---------------------------------------------------------------------------
# loss models


class LossModel:
    """Interface: per-example loss/gradient over a flat parameter vector."""

    dimension: int
    lipschitz_L: float | None = None
    grad_bound_G: float | None = None

    def loss(self, w: np.ndarray, X: np.ndarray, y=None) -> np.ndarray:
        raise NotImplementedError

    def gradients(self, w: np.ndarray, X: np.ndarray, y=None) -> np.ndarray:
        """Per-example gradients, shape (n, dimension)."""
        raise NotImplementedError

    def mean_gradient(self, w: np.ndarray, X: np.ndarray, y=None) -> np.ndarray:
        return self.gradients(w, X, y).mean(axis=0)

    def clipped_mean_gradient(self, w, X, y, bound: float) -> np.ndarray:
        return clip_rows(self.gradients(w, X, y), bound).mean(axis=0)

    def population_gradient_exact(self, w: np.ndarray) -> np.ndarray | None:
        return None

    def sample(self, n: int, rng: np.random.Generator):
        """Fresh (X, y) from the model's data distribution, if generative."""
        raise NotImplementedError(f"{type(self).__name__} has no data generator")

    def has_generator(self) -> bool:
        try:
            self.sample(1, np.random.default_rng(0))
            return True
        except NotImplementedError:
            return False

    def initial_point(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(self.dimension)


class QuadraticModel(LossModel):
    """loss(w, z) = 0.5 |w - z|^2 over a product-Bernoulli distribution.

    The population gradient is w - mu exactly, and the empirical-population
    deviation mean(S) - mu is independent of w. G is set by the assumed
    iterate box: |w - z| <= w_radius + sqrt(p).
    """

    def __init__(self, mu: np.ndarray, w_radius: float | None = None):
        mu = np.asarray(mu, dtype=float)
        if mu.ndim != 1:
            raise ValueError("mu must be a vector")
        self.mu = mu
        self.dimension = mu.size
        self.lipschitz_L = 1.0
        radius = math.sqrt(self.dimension) if w_radius is None else w_radius
        self.grad_bound_G = radius + math.sqrt(self.dimension)

    def loss(self, w, X, y=None):
        diff = w[None, :] - X
        return 0.5 * np.einsum("ij,ij->i", diff, diff)

    def gradients(self, w, X, y=None):
        return w[None, :] - X

    def mean_gradient(self, w, X, y=None):
        return w - X.mean(axis=0)

    def full_gradient(self, data: Dataset, w: np.ndarray) -> np.ndarray:
        # O(p) using the dataset's cached feature mean.
        return w - data.feature_mean

    def full_loss(self, data: Dataset, w: np.ndarray) -> float:
        # mean 0.5|w - z|^2 = 0.5|w - mean|^2 + 0.5 (E|z|^2 - |mean|^2)
        m = data.feature_mean
        diff = w - m
        return float(0.5 * diff @ diff + 0.5 * (data.sq_norm_mean - m @ m))

    def population_gradient_exact(self, w):
        return w - self.mu

    def sample(self, n, rng):
        X = (rng.random((n, self.dimension)) < self.mu[None, :]).astype(float)
        return X, None


def _sigmoid(u: np.ndarray) -> np.ndarray:
    out = np.empty_like(u, dtype=float)
    pos = u >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-u[pos]))
    eu = np.exp(u[~pos])
    out[~pos] = eu / (1.0 + eu)
    return out


class SigmoidClusterModel(LossModel):
    """Sigmoid squared error on two antipodal Gaussian clusters.

    loss(w, (x, y)) = (s(w.x) - y)^2 with s the logistic function. Inputs
    are drawn from 0.5 N(+c, (spread^2/1) I) + 0.5 N(-c, ...) with |c| = 1
    and spread = 1/sqrt(p), then rescaled onto |x| <= norm_cap, so that
    E|x|^2 and the label distribution y = s(w_star . x) do not drift with
    dimension. The norm cap certifies G = norm_cap / 2 and
    L = 0.32 norm_cap^2 (max of 2 |(s')^2 + (s-y) s''| is below 0.16).
    """

    def __init__(self, p: int, seed: int = 0, norm_cap: float = 2.0,
                 teacher_scale: float = 2.5):
        rng = stream(seed, "sigmoid-model")
        c = rng.standard_normal(p)
        c /= np.linalg.norm(c)
        self.center = c
        self.spread = 1.0 / math.sqrt(p)
        self.norm_cap = norm_cap
        self.w_star = teacher_scale * c
        self.dimension = p
        self.grad_bound_G = norm_cap / 2.0
        self.lipschitz_L = 0.32 * norm_cap ** 2
        self.generator_seed = seed

    def loss(self, w, X, y=None):
        s = _sigmoid(X @ w)
        return (s - y) ** 2

    def gradients(self, w, X, y=None):
        s = _sigmoid(X @ w)
        coef = 2.0 * (s - y) * s * (1.0 - s)
        return coef[:, None] * X

    def mean_gradient(self, w, X, y=None):
        s = _sigmoid(X @ w)
        coef = 2.0 * (s - y) * s * (1.0 - s)
        return (coef @ X) / X.shape[0]

    def sample(self, n, rng):
        sign = np.where(rng.integers(0, 2, size=n) == 0, 1.0, -1.0)
        X = sign[:, None] * self.center + self.spread * rng.standard_normal((n, self.dimension))
        norms = np.linalg.norm(X, axis=1, keepdims=True)
        X = X * np.minimum(1.0, self.norm_cap / norms)
        return X, _sigmoid(X @ self.w_star)


class MLPModel(LossModel):
    """Fully connected ReLU network with softmax cross-entropy.

    Parameters live in one flat vector (weights then bias per layer).
    Per-example gradients of a dense layer factor as outer(input, delta),
    so per-example norms and clipped sums are computed from the factors
    without materializing n x dimension gradient matrices.
    """

    def __init__(self, input_dim: int, hidden: tuple[int, ...] = (128, 128),
                 n_classes: int = 10):
        self.input_dim = input_dim
        self.hidden = tuple(hidden)
        self.n_classes = n_classes
        dims = [input_dim, *hidden, n_classes]
        self.layer_shapes = [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
        self.dimension = sum(a * b + b for a, b in self.layer_shapes)

    # -- parameter vector packing

    def unpack(self, w: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        params, off = [], 0
        for a, b in self.layer_shapes:
            W = w[off:off + a * b].reshape(a, b)
            off += a * b
            bias = w[off:off + b]
            off += b
            params.append((W, bias))
        return params

    def pack(self, params) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in params])

    def initial_point(self, rng: np.random.Generator | None = None) -> np.ndarray:
        # Glorot-uniform weights, zero biases.
        rng = np.random.default_rng(0) if rng is None else rng
        parts = []
        for a, b in self.layer_shapes:
            bound = math.sqrt(6.0 / (a + b))
            parts.append(rng.uniform(-bound, bound, size=(a, b)).ravel())
            parts.append(np.zeros(b))
        return np.concatenate(parts)

    # -- forward / backward

    def _forward(self, w, X):
        params = self.unpack(w)
        acts = [X]
        h = X
        for W, b in params[:-1]:
            h = np.maximum(h @ W + b, 0.0)
            acts.append(h)
        W, b = params[-1]
        logits = h @ W + b
        return params, acts, logits

    @staticmethod
    def _log_softmax(logits):
        m = logits.max(axis=1, keepdims=True)
        z = logits - m
        return z - np.log(np.exp(z).sum(axis=1, keepdims=True))

    def loss(self, w, X, y=None):
        _, _, logits = self._forward(w, X)
        logp = self._log_softmax(logits)
        return -logp[np.arange(X.shape[0]), np.asarray(y, dtype=int)]

    def _deltas(self, params, acts, logits, y):
        n = logits.shape[0]
        probs = np.exp(self._log_softmax(logits))
        d = probs
        d[np.arange(n), np.asarray(y, dtype=int)] -= 1.0
        deltas = [d]
        for (W, _), act in zip(reversed(params[1:]), reversed(acts[1:])):
            d = (d @ W.T) * (act > 0.0)
            deltas.append(d)
        deltas.reverse()
        return deltas  # deltas[l] pairs with acts[l]

    def _grad_sq_norms(self, acts, deltas):
        # |outer(a, d)|_F^2 = |a|^2 |d|^2; bias contributes |d|^2.
        total = np.zeros(acts[0].shape[0])
        for act, d in zip(acts, deltas):
            a2 = np.einsum("ij,ij->i", act, act)
            d2 = np.einsum("ij,ij->i", d, d)
            total += a2 * d2 + d2
        return total

    def _weighted_mean_gradient(self, acts, deltas, weights):
        n = acts[0].shape[0]
        parts = []
        for act, d in zip(acts, deltas):
            dw = d * weights[:, None]
            parts.append((act.T @ dw).ravel() / n)
            parts.append(dw.sum(axis=0) / n)
        return np.concatenate(parts)

    def mean_gradient(self, w, X, y=None):
        params, acts, logits = self._forward(w, X)
        deltas = self._deltas(params, acts, logits, y)
        return self._weighted_mean_gradient(acts, deltas, np.ones(X.shape[0]))

    def clipped_mean_gradient(self, w, X, y, bound: float):
        if bound <= 0:
            raise ValueError(f"clip bound must be positive, got {bound}")
        params, acts, logits = self._forward(w, X)
        deltas = self._deltas(params, acts, logits, y)
        norms = np.sqrt(self._grad_sq_norms(acts, deltas))
        scale = np.minimum(1.0, bound / np.maximum(norms, 1e-300))
        return self._weighted_mean_gradient(acts, deltas, scale)

    def gradients(self, w, X, y=None):
        # Materializes (n, dimension); intended for small probe batches.
        params, acts, logits = self._forward(w, X)
        deltas = self._deltas(params, acts, logits, y)
        n = X.shape[0]
        parts = []
        for act, d in zip(acts, deltas):
            parts.append(np.einsum("ni,nj->nij", act, d).reshape(n, -1))
            parts.append(d)
        return np.concatenate(parts, axis=1)

    def predict(self, w, X):
        _, _, logits = self._forward(w, X)
        return logits.argmax(axis=1)

    def accuracy(self, w, X, y) -> float:
        return float(np.mean(self.predict(w, X) == np.asarray(y, dtype=int)))


# ---------------------------------------------------------------------------
# gradient oracles


def empirical_gradient(model: LossModel, data: Dataset, w: np.ndarray,
                       batch: np.ndarray | None = None,
                       clip_bound: float | None = None) -> np.ndarray:
    """Mean per-example gradient over a batch (or the full set).

    With ``clip_bound`` each per-example gradient is clipped before
    averaging. Without it the full-batch result equals the gradient of the
    empirical risk.
    """
    if batch is not None:
        batch = np.asarray(batch)
        if batch.size == 0:
            raise ValueError("empty batch")
        if batch.min() < 0 or batch.max() >= data.n:
            raise ValueError("batch indices out of range")
        X, y = data.subset(batch)
    else:
        X, y = data.features, data.labels
    if clip_bound is not None:
        return model.clipped_mean_gradient(w, X, y, clip_bound)
    if batch is None and isinstance(model, QuadraticModel):
        return model.full_gradient(data, w)
    return model.mean_gradient(w, X, y)


@dataclass(frozen=True)
class PopulationGradient:
    value: np.ndarray
    stderr: np.ndarray
    method: str  # "analytic" or "monte-carlo"


def default_mc_budget(n: int) -> int:
    """Default Monte Carlo budget: 100 fresh samples per training example,
    keeping estimator noise well below the concentration radii under test."""
    return 100 * n


def population_gradient(model: LossModel, w: np.ndarray,
                        mc_budget: int | None = None,
                        seed: int = 0) -> PopulationGradient:
    """Population gradient: analytic when the model has one, else Monte Carlo.

    Monte Carlo draws ``mc_budget`` fresh examples from the model's
    generator and reports the per-coordinate standard error of the mean.
    """
    exact = model.population_gradient_exact(w)
    if exact is not None:
        return PopulationGradient(exact, np.zeros_like(exact), "analytic")
    if not model.has_generator():
        raise ValueError(
            f"{type(model).__name__} has neither an analytic population "
            "gradient nor a data generator"
        )
    if mc_budget is None or mc_budget < 1:
        raise ValueError("mc_budget must be a positive integer for Monte Carlo")
    rng = stream(seed, "population-mc")
    total = np.zeros(model.dimension)
    total_sq = np.zeros(model.dimension)
    done = 0
    while done < mc_budget:
        m = min(100_000, mc_budget - done)
        X, y = model.sample(m, rng)
        g = model.gradients(w, X, y)
        total += g.sum(axis=0)
        total_sq += (g * g).sum(axis=0)
        done += m
    mean = total / mc_budget
    var = np.maximum(total_sq / mc_budget - mean ** 2, 0.0)
    stderr = np.sqrt(var / mc_budget)
    return PopulationGradient(mean, stderr, "monte-carlo")


def estimate_bounds(model: LossModel, n_probes: int = 200, seed: int = 0,
                    w_radius: float = 2.0) -> tuple[float, float]:
    """Numeric (G, L) estimates from random probes of the model's generator.

    Returns the largest observed per-example gradient norm and the largest
    observed gradient-difference ratio; recorded alongside any certified
    bounds the model carries.
    """
    rng = stream(seed, "bound-probes")
    X, y = model.sample(n_probes, rng)
    g_max, l_max = 0.0, 0.0
    for _ in range(n_probes):
        w1 = rng.uniform(-w_radius, w_radius, model.dimension)
        w2 = w1 + rng.uniform(-0.1, 0.1, model.dimension)
        g1 = model.gradients(w1, X, y)
        g2 = model.gradients(w2, X, y)
        g_max = max(g_max, float(np.linalg.norm(g1, axis=1).max()))
        num = np.linalg.norm(g1 - g2, axis=1).max()
        l_max = max(l_max, float(num / np.linalg.norm(w1 - w2)))
    return g_max, l_max


# ---------------------------------------------------------------------------
# data generation


def bernoulli_means(p: int, seed: int) -> np.ndarray:
    """Per-coordinate Bernoulli means drawn uniformly from [1/3, 2/3]."""
    return stream(seed, "mu").uniform(1.0 / 3.0, 2.0 / 3.0, size=p)


def sample_cluster_classification(n: int, input_dim: int, n_classes: int,
                                  rng: np.random.Generator,
                                  separation: float = 1.0,
                                  scale_decay: float = 2.0):
    """Gaussian class clusters with unit-radius noise around separated means.

    ``scale_decay`` > 0 rescales coordinate j by 10^(-scale_decay * j / d),
    giving the heterogeneous per-coordinate gradient scales on which
    adaptive step sizes pay off; 0 keeps the task isotropic.
    """
    means = rng.standard_normal((n_classes, input_dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    y = rng.integers(0, n_classes, size=n)
    # noise norm ~ 1 regardless of dimension
    X = means[y] + rng.standard_normal((n, input_dim)) / math.sqrt(input_dim)
    if scale_decay > 0:
        X = X * np.logspace(0, -scale_decay, input_dim)
    return X, y


def build_model_and_data(kind: str, p: int, n: int, seed: int,
                         mu_spec: str = "uniform",
                         **kwargs) -> tuple[LossModel, Dataset]:
    """Construct a built-in model plus a deterministic dataset for it.

    Config keys mirror the run-configuration format: model, p, n, seed,
    mu_spec (quadratic only: "uniform" or comma-separated explicit means).
    """
    data_rng = stream(seed, "data")
    spec = {"model": kind, "p": p, "n": n, "seed": seed}
    if kind == "quadratic":
        if mu_spec == "uniform":
            mu = bernoulli_means(p, seed)
        else:
            mu = np.array([float(v) for v in mu_spec.split(",")], dtype=float)
            if mu.size != p:
                raise ValueError(f"mu_spec lists {mu.size} means for p={p}")
        model = QuadraticModel(mu, w_radius=kwargs.get("w_radius"))
        X, y = model.sample(n, data_rng)
        spec["mu_spec"] = mu_spec
    elif kind == "sigmoid":
        model = SigmoidClusterModel(p, seed=seed, **kwargs)
        X, y = model.sample(n, data_rng)
    elif kind == "mlp":
        n_classes = kwargs.get("n_classes", 10)
        model = MLPModel(p, hidden=kwargs.get("hidden", (128, 128)), n_classes=n_classes)
        X, y = sample_cluster_classification(
            n, p, n_classes, data_rng, separation=kwargs.get("separation", 2.0)
        )
    else:
        raise ValueError(f"unknown model kind: {kind!r}")
    return model, Dataset(X, y, generator_spec=spec)


# ---------------------------------------------------------------------------
# IDX ingestion

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base class for IDX parse failures."""


class IdxBadMagic(IdxFormatError):
    pass


class IdxTruncated(IdxFormatError):
    pass


class IdxCountMismatch(IdxFormatError):
    pass


def _read_be32(buf: bytes, offset: int, path: str) -> int:
    if offset + 4 > len(buf):
        raise IdxTruncated(f"{path}: truncated header")
    return struct.unpack_from(">I", buf, offset)[0]


def _load_idx_images(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    magic = _read_be32(buf, 0, path)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxBadMagic(f"{path}: bad image magic 0x{magic:08x}")
    count = _read_be32(buf, 4, path)
    rows = _read_be32(buf, 8, path)
    cols = _read_be32(buf, 12, path)
    need = 16 + count * rows * cols
    if len(buf) < need:
        raise IdxTruncated(f"{path}: expected {need} bytes, found {len(buf)}")
    pixels = np.frombuffer(buf, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, rows * cols).astype(float)


def _load_idx_labels(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        buf = f.read()
    magic = _read_be32(buf, 0, path)
    if magic != IDX_LABEL_MAGIC:
        raise IdxBadMagic(f"{path}: bad label magic 0x{magic:08x}")
    count = _read_be32(buf, 4, path)
    if len(buf) < 8 + count:
        raise IdxTruncated(f"{path}: expected {8 + count} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=8).astype(int)


def load_idx(path_images: str, path_labels: str,
             stats: tuple[float, float] | None = None) -> Dataset:
    """Load an IDX image/label pair into flat normalized pixel vectors.

    Pixels are standardized by the scalar mean and standard deviation of
    this set, or by ``stats`` (use the training set's stats for test data).
    """
    X = _load_idx_images(path_images)
    y = _load_idx_labels(path_labels)
    if X.shape[0] != y.shape[0]:
        raise IdxCountMismatch(
            f"{path_images} holds {X.shape[0]} images but {path_labels} holds "
            f"{y.shape[0]} labels"
        )
    if stats is None:
        mean, std = float(X.mean()), float(X.std())
    else:
        mean, std = stats
    X = (X - mean) / std
    return Dataset(X, y, generator_spec={
        "source": "idx", "images": path_images, "labels": path_labels,
        "norm_mean": mean, "norm_std": std,
    })

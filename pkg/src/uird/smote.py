"""Per-class SMOTE generators used for pseudo-replay of earlier classes."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import check_beats
from .nn.checkpoint import load_arrays, save_arrays


def knn(query: np.ndarray, store: np.ndarray, k: int, exclude: int | None = None) -> np.ndarray:
    """Indices of the ``k`` nearest rows of ``store`` by Euclidean distance.

    Ties go to the lower index. ``exclude`` removes one row (the query's own
    position); when it is not given, the first row identical to ``query`` is
    treated as the query itself and skipped.
    """
    store = np.asarray(store, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    diff = store - query
    d2 = np.einsum("ij,ij->i", diff, diff)
    if exclude is None:
        same = np.flatnonzero(np.all(store == query, axis=1))
        exclude = int(same[0]) if same.size else None
    order = np.argsort(d2, kind="stable")
    if exclude is not None:
        order = order[order != exclude]
    return order[:k]


class SmoteGenerator(BaseEstimator):
    """Stores one class's samples and synthesizes new ones by neighbour interpolation.

    Each synthetic sample is ``x + lam * (x_nbr - x)`` with ``x`` taken
    round-robin over a seeded permutation of the store, ``x_nbr`` drawn
    uniformly among the ``k`` nearest neighbours of ``x`` and ``lam ~ U[0, 1]``.
    A single stored sample cannot be interpolated; in that case Gaussian
    jitter of scale ``jitter_sigma`` is added instead.
    """

    def __init__(self, class_symbol: str = "", k_neighbors: int = 5, random_state: int = 0,
                 jitter_sigma: float = 0.01):
        self.class_symbol = class_symbol
        self.k_neighbors = k_neighbors
        self.random_state = random_state
        self.jitter_sigma = jitter_sigma

    def fit(self, X, y=None):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        X = check_beats(X, length=None)
        if X.shape[0] == 0:
            raise ValueError("cannot fit a generator on an empty class")
        if y is not None and not self.class_symbol:
            labels = set(np.asarray(y, dtype=object).tolist())
            if len(labels) != 1:
                raise ValueError("a generator models exactly one class")
            self.class_symbol = labels.pop()
        self.store_ = X.copy()
        self.n_features_in_ = X.shape[1]
        self.jitter_mode_ = X.shape[0] < 2
        self.k_effective_ = 0 if self.jitter_mode_ else min(self.k_neighbors, X.shape[0] - 1)
        self._neighbors: dict[int, np.ndarray] = {}
        return self

    def neighbors(self, i: int) -> np.ndarray:
        check_is_fitted(self, "store_")
        nb = self._neighbors.get(i)
        if nb is None:
            nb = knn(self.store_[i], self.store_, self.k_effective_, exclude=i)
            self._neighbors[i] = nb
        return nb

    def sample(self, count: int, random_state: int | None = None, return_parents: bool = False):
        """Draw ``count`` synthetic samples.

        With ``return_parents`` also returns (base index, neighbour index,
        interpolation coefficient) arrays; jitter mode reports neighbour -1.
        """
        check_is_fitted(self, "store_")
        if count < 0:
            raise ValueError("count must be non-negative")
        seed = self.random_state if random_state is None else random_state
        rng = np.random.default_rng(seed)
        n, d = self.store_.shape
        if count == 0:
            out = np.empty((0, d))
            parents = (np.empty(0, np.intp), np.empty(0, np.intp), np.empty(0))
            return (out, *parents) if return_parents else out
        perm = rng.permutation(n)
        base = perm[np.arange(count) % n]
        if self.jitter_mode_:
            out = self.store_[base] + rng.normal(0.0, self.jitter_sigma, size=(count, d))
            nbr = np.full(count, -1, dtype=np.intp)
            lam = np.zeros(count)
        else:
            choice = rng.integers(0, self.k_effective_, size=count)
            nbr = np.array([self.neighbors(int(b))[c] for b, c in zip(base, choice)], dtype=np.intp)
            lam = rng.uniform(0.0, 1.0, size=count)
            x, q = self.store_[base], self.store_[nbr]
            out = x + lam[:, None] * (q - x)
            # rounding must not push a point outside its parent segment's box
            out = np.clip(out, np.minimum(x, q), np.maximum(x, q))
        return (out, base, nbr, lam) if return_parents else out

    def save(self, path) -> None:
        check_is_fitted(self, "store_")
        save_arrays(path, {"store": self.store_},
                    {"class_symbol": self.class_symbol, "k_neighbors": self.k_neighbors,
                     "random_state": self.random_state, "jitter_sigma": self.jitter_sigma})

    @classmethod
    def load(cls, path) -> "SmoteGenerator":
        arrays, meta = load_arrays(path)
        return cls(**meta).fit(arrays["store"])


@dataclass
class GeneratorBank:
    """Generators in class-introduction order."""

    generators: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.generators)

    def __iter__(self):
        return iter(self.generators)

    @property
    def symbols(self) -> list[str]:
        return [g.class_symbol for g in self.generators]

    def append(self, generator: SmoteGenerator) -> None:
        if generator.class_symbol in self.symbols:
            raise ValueError(f"class {generator.class_symbol!r} already has a generator")
        self.generators.append(generator)

    def synthesize(self, counts, random_state: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """Concatenate per-generator samples; ``counts`` is a per-generator sequence or dict."""
        if isinstance(counts, dict):
            counts = [counts.get(s, 0) for s in self.symbols]
        counts = list(counts)
        if len(counts) != len(self.generators):
            raise ValueError("need one count per generator")
        if not self.generators:
            return np.empty((0, 0)), np.empty(0, dtype=object)
        Xs, ys = [], []
        for i, (g, c) in enumerate(zip(self.generators, counts)):
            Xs.append(g.sample(int(c), random_state=random_state + 7919 * i))
            ys.extend([g.class_symbol] * int(c))
        return np.concatenate(Xs), np.array(ys, dtype=object)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, g in enumerate(self.generators):
            g.save(directory / f"{i:02d}_{g.class_symbol}.npz")

    @classmethod
    def load(cls, directory) -> "GeneratorBank":
        return cls([SmoteGenerator.load(p) for p in sorted(Path(directory).glob("*.npz"))])

"""Multi-class 1-D CNN beat classifier."""
from __future__ import annotations

import json
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from ._validation import check_beats, check_labels
from .metrics import TaskReport, build_report
from .nn import engine as E
from .nn.checkpoint import load_arrays, load_module_state, module_state, save_arrays
from .nn.layers import LayerSpec, build_stack


def classifier_specs(n_classes: int, input_length: int, conv_channels=(8, 16), kernel_sizes=(7, 5),
                     strides=(2, 2), hidden=(128, 64), slope: float = 0.2) -> list[LayerSpec]:
    """conv -> LeakyReLU -> conv -> LeakyReLU -> flatten -> three dense layers."""
    specs, c_in, length = [], 1, input_length
    for c, k, s in zip(conv_channels, kernel_sizes, strides):
        specs += [LayerSpec("conv1d", dict(in_channels=c_in, out_channels=c, kernel_size=k, stride=s,
                                           init_slope=slope)),
                  LayerSpec("leaky_relu", dict(slope=slope))]
        c_in, length = c, nn.conv_output_length(length, k, s, 0)
        if length <= 0:
            raise ValueError("classifier convolutions collapse the input")
    specs.append(LayerSpec("flatten"))
    width = c_in * length
    for h in hidden:
        specs += [LayerSpec("dense", dict(in_features=width, out_features=h, init_slope=slope)),
                  LayerSpec("leaky_relu", dict(slope=slope))]
        width = h
    specs.append(LayerSpec("dense", dict(in_features=width, out_features=n_classes, init_slope=slope)))
    return specs


class BeatClassifier(ClassifierMixin, BaseEstimator):
    """CNN over standardized beats.

    ``classes`` fixes the output order (class-introduction order in the
    continual setting); by default the sorted unique training labels are used.
    With ``balanced`` each epoch resamples every class to the size of the
    largest one.
    """

    def __init__(self, classes=None, conv_channels=(8, 16), kernel_sizes=(7, 5), strides=(2, 2),
                 hidden=(128, 64), slope: float = 0.2, epochs: int = 20, batch_size: int = 32,
                 learning_rate: float = 1e-3, balanced: bool = True, random_state: int = 0):
        self.classes = classes
        self.conv_channels = conv_channels
        self.kernel_sizes = kernel_sizes
        self.strides = strides
        self.hidden = hidden
        self.slope = slope
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.balanced = balanced
        self.random_state = random_state

    def _build(self, n_features: int, rng: np.random.Generator):
        specs = classifier_specs(len(self.classes_), n_features, tuple(self.conv_channels),
                                 tuple(self.kernel_sizes), tuple(self.strides), tuple(self.hidden),
                                 self.slope)
        self.network_ = build_stack(specs, rng)
        self.n_features_in_ = n_features

    def _resolve_classes(self, y) -> None:
        if self.classes is None:
            self.classes_ = np.array(sorted(set(y.tolist())), dtype=object)
        else:
            self.classes_ = np.array(list(self.classes), dtype=object)
            if len(set(self.classes_.tolist())) != len(self.classes_):
                raise ValueError("class symbols must be unique")

    def _encode_labels(self, y) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.classes_)}
        unknown = sorted(set(y.tolist()) - set(index))
        if unknown:
            raise ValueError(f"unknown label(s) {unknown}; classifier knows {list(self.classes_)}")
        return np.array([index[v] for v in y], dtype=np.intp)

    def fit(self, X, y):
        X = check_beats(X, length=None, allow_empty=False)
        y = check_labels(y, X.shape[0])
        self._resolve_classes(y)
        targets = self._encode_labels(y)
        missing = [c for i, c in enumerate(self.classes_) if not np.any(targets == i)]
        if missing:
            raise ValueError(f"no training samples for class(es) {missing}")
        rng = np.random.default_rng(self.random_state)
        self._build(X.shape[1], rng)
        self.loss_trace_ = self._train(X, targets, self.epochs, rng)
        return self

    def _epoch_order(self, targets: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if not self.balanced:
            return rng.permutation(targets.size)
        counts = np.bincount(targets, minlength=len(self.classes_))
        present = np.flatnonzero(counts)
        if counts[present].min() == counts[present].max():
            return rng.permutation(targets.size)
        target = counts.max()
        idx = []
        for c in present:
            members = np.flatnonzero(targets == c)
            extra = rng.choice(members, size=target - members.size, replace=True)
            idx.append(np.concatenate([members, extra]))
        idx = np.concatenate(idx)
        return idx[rng.permutation(idx.size)]

    def _train(self, X, targets, epochs: int, rng: np.random.Generator,
               penalty: Callable[[], E.Tensor] | None = None, optimizer: nn.Adam | None = None):
        net = self.network_
        params = net.parameters()
        opt = optimizer or nn.Adam(params, lr=self.learning_rate)
        trace = []
        for _ in range(epochs):
            order = self._epoch_order(targets, rng)
            total, batches = 0.0, 0
            for start in range(0, order.size, self.batch_size):
                b = order[start:start + self.batch_size]
                loss, _ = E.softmax_cross_entropy(net(E.Tensor(X[b][:, None, :])), targets[b])
                if penalty is not None:
                    loss = loss + penalty()
                if not np.isfinite(loss.data):
                    raise FloatingPointError("classifier loss became non-finite")
                E.backward(loss)
                opt.step()
                total += float(loss.data)
                batches += 1
            trace.append(total / batches)
        return trace

    def decision_function(self, X) -> np.ndarray:
        """Raw logits, shape (n, n_classes)."""
        check_is_fitted(self, "network_")
        X = check_beats(X, length=self.n_features_in_)
        if X.shape[0] == 0:
            return np.empty((0, len(self.classes_)))
        return np.concatenate([self.network_(E.Tensor(X[i:i + 512][:, None, :])).data
                               for i in range(0, X.shape[0], 512)])

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        # argmax ties resolve to the lowest class index
        logits = self.decision_function(X)
        return self.classes_[np.argmax(logits, axis=1)]

    def evaluate(self, X, y, task_index: int = 0, class_symbols=None, **kwargs) -> TaskReport:
        """Confusion-matrix report; ``class_symbols`` may list classes the model cannot output."""
        symbols = list(self.classes_) if class_symbols is None else list(class_symbols)
        return build_report(list(y), list(self.predict(X)), symbols, task_index, **kwargs)

    def save(self, path) -> None:
        check_is_fitted(self, "network_")
        params = self.get_params()
        params["classes"] = list(self.classes_)
        meta = {"params": json.loads(json.dumps(params, default=list)),
                "n_features_in": self.n_features_in_,
                "loss_trace": list(getattr(self, "loss_trace_", []))}
        save_arrays(path, module_state(self.network_), meta)

    @classmethod
    def load(cls, path) -> "BeatClassifier":
        arrays, meta = load_arrays(path)
        model = cls(**meta["params"])
        model.classes_ = np.array(meta["params"]["classes"], dtype=object)
        model._build(meta["n_features_in"], np.random.default_rng(0))
        load_module_state(model.network_, arrays)
        model.loss_trace_ = meta["loss_trace"]
        return model

"""Comparison strategies: elastic weight consolidation and joint training.

The replay ablation that trains on stored real beats instead of pseudo data
is a strategy of :class:`uird.pipeline.UIRDPipeline`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import check_beats, check_labels
from .classifier import BeatClassifier
from .nn import engine as E
from .nn.layers import kaiming_uniform


@dataclass
class FisherInfo:
    """Diagonal Fisher values and the parameter snapshot they anchor."""

    fisher: dict
    anchor: dict


def compute_fisher(clf: BeatClassifier, X, y, n_samples: int = 1000,
                   random_state: int = 0) -> FisherInfo:
    """Empirical diagonal Fisher: mean over samples of (d log p(y|x) / d theta)^2."""
    X = check_beats(X, length=clf.n_features_in_, allow_empty=False)
    targets = clf._encode_labels(check_labels(y, X.shape[0]))
    rng = np.random.default_rng(random_state)
    idx = np.arange(X.shape[0])
    if idx.size > n_samples:
        idx = np.sort(rng.choice(idx, size=n_samples, replace=False))
    params = clf.network_.parameters()
    acc = {k: np.zeros_like(p.data) for k, p in params.items()}
    for i in idx:
        loss, _ = E.softmax_cross_entropy(clf.network_(E.Tensor(X[i:i + 1, None, :])), targets[i:i + 1])
        E.backward(loss)
        for k, p in params.items():
            acc[k] += p.grad * p.grad
    fisher = {k: v / idx.size for k, v in acc.items()}
    anchor = {k: p.data.copy() for k, p in params.items()}
    return FisherInfo(fisher, anchor)


def ewc_penalty(params: dict, fishers: list[FisherInfo], lambda_ewc: float) -> E.Tensor:
    """(lambda / 2) * sum_tasks sum_j F_j (theta_j - anchor_j)^2.

    Parameters that grew since an anchor was taken (a widened output layer)
    are penalised only on their anchored leading rows.
    """
    names = list(params)
    tensors = [params[k] for k in names]
    value = 0.0
    grads = [np.zeros_like(t.data) for t in tensors]
    for info in fishers:
        for j, name in enumerate(names):
            if name not in info.anchor:
                continue
            a, f = info.anchor[name], info.fisher[name]
            rows = a.shape[0]
            diff = tensors[j].data[:rows] - a
            value += 0.5 * lambda_ewc * float(np.sum(f * diff * diff))
            grads[j][:rows] += lambda_ewc * f * diff
    return E.custom_op(np.asarray(value), tensors, lambda g: tuple(g * gr for gr in grads))


def widen_head(clf: BeatClassifier, new_classes, rng: np.random.Generator) -> None:
    """Append freshly initialised output rows for ``new_classes``."""
    new_classes = [c for c in new_classes if c not in set(clf.classes_.tolist())]
    if not new_classes:
        return
    head = clf.network_.layers[-1]
    fan_in = head.weight.shape[1]
    rows = kaiming_uniform(rng, (len(new_classes), fan_in), fan_in, clf.slope)
    head.weight = E.Tensor(np.vstack([head.weight.data, rows]), requires_grad=True)
    head.bias = E.Tensor(np.concatenate([head.bias.data, np.zeros(len(new_classes))]), requires_grad=True)
    clf.classes_ = np.array(list(clf.classes_) + list(new_classes), dtype=object)


def ewc_train(clf: BeatClassifier, X, y, fishers: list[FisherInfo], lambda_ewc: float,
              epochs: int | None = None, seed: int = 0) -> BeatClassifier:
    """Continue training ``clf`` on new data under the EWC penalty.

    Labels not yet known widen the output layer first. With no anchors the
    penalty is omitted and this is plain continued training.
    """
    X = check_beats(X, length=clf.n_features_in_, allow_empty=False)
    y = check_labels(y, X.shape[0])
    rng = np.random.default_rng(seed)
    seen = list(dict.fromkeys(y.tolist()))
    widen_head(clf, seen, rng)
    targets = clf._encode_labels(y)
    params = clf.network_.parameters()
    penalty = (lambda: ewc_penalty(params, fishers, lambda_ewc)) if fishers else None
    clf.loss_trace_ = clf._train(X, targets, clf.epochs if epochs is None else epochs, rng, penalty)
    return clf


class EWCClassifier(BeatClassifier):
    """Class-incremental classifier regularised by elastic weight consolidation.

    The first :meth:`partial_fit` call trains from scratch; each later call
    widens the output layer for unseen labels and trains on the new data with
    one quadratic anchor per completed task.
    """

    def __init__(self, classes=None, conv_channels=(8, 16), kernel_sizes=(7, 5), strides=(2, 2),
                 hidden=(128, 64), slope: float = 0.2, epochs: int = 20, batch_size: int = 32,
                 learning_rate: float = 1e-3, balanced: bool = True, random_state: int = 0,
                 lambda_ewc: float = 100.0, fisher_samples: int = 1000):
        super().__init__(classes, conv_channels, kernel_sizes, strides, hidden, slope, epochs,
                         batch_size, learning_rate, balanced, random_state)
        self.lambda_ewc = lambda_ewc
        self.fisher_samples = fisher_samples

    def partial_fit(self, X, y):
        X = check_beats(X, length=None, allow_empty=False)
        y = check_labels(y, X.shape[0])
        if not hasattr(self, "network_"):
            if self.classes is None:
                self.classes = list(dict.fromkeys(y.tolist()))
            super().fit(X, y)
            self.fishers_ = []
        else:
            ewc_train(self, X, y, self.fishers_, self.lambda_ewc,
                      seed=self.random_state + 1000 * len(self.fishers_))
        self.fishers_.append(compute_fisher(self, X, y, self.fisher_samples,
                                            self.random_state + len(self.fishers_)))
        return self


def joint_baseline_train(X, y, classes, seed: int = 0, **params) -> BeatClassifier:
    """Fresh classifier on all real data seen so far (the upper-bound reference)."""
    return BeatClassifier(classes=list(classes), random_state=seed, **params).fit(X, y)

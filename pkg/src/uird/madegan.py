"""Memory-augmented adversarial autoencoder for novel-class detection.

The generator is encoder -> memory -> decoder; the memory returns a convex
combination of trainable prototype latents weighted by a softmax over cosine
similarities. A 1-D convolutional discriminator supplies both the adversarial
signal and the intermediate features used for feature matching. Beats whose
reconstruction error exceeds a calibrated threshold are flagged as novel.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from ._validation import check_beats
from .nn import engine as E
from .nn.checkpoint import load_arrays, load_module_state, module_state, save_arrays
from .nn.layers import LayerSpec, Module, build_stack

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Architecture:
    input_length: int = 320
    channels: tuple = (16, 32, 64, 64)
    latent_dim: int = 64
    memory_slots: int = 100
    kernel_size: int = 4
    stride: int = 2
    padding: int = 1
    slope: float = 0.2

    def stage_lengths(self) -> list[int]:
        lengths = [self.input_length]
        for _ in self.channels:
            lengths.append(nn.conv_output_length(lengths[-1], self.kernel_size, self.stride, self.padding))
        return lengths

    def validate(self) -> None:
        lengths = self.stage_lengths()
        if min(lengths) <= 0:
            raise ValueError(f"encoder stages collapse the signal: {lengths}")
        back = lengths[-1]
        for _ in self.channels:
            back = nn.tconv_output_length(back, self.kernel_size, self.stride, self.padding)
        if back != self.input_length:
            raise ValueError(f"decoder output length {back} != input length {self.input_length}")
        if self.memory_slots < 1 or self.latent_dim < 1:
            raise ValueError("memory_slots and latent_dim must be positive")

    def conv_stack_specs(self) -> list[LayerSpec]:
        specs, c_in = [], 1
        for c in self.channels:
            specs += [LayerSpec("conv1d", dict(in_channels=c_in, out_channels=c, kernel_size=self.kernel_size,
                                                stride=self.stride, padding=self.padding,
                                                init_slope=self.slope)),
                      LayerSpec("leaky_relu", dict(slope=self.slope)),
                      LayerSpec("batchnorm", dict(num_features=c))]
            c_in = c
        return specs

    @property
    def flat_features(self) -> int:
        return self.channels[-1] * self.stage_lengths()[-1]

    def encoder_specs(self) -> list[LayerSpec]:
        return self.conv_stack_specs() + [
            LayerSpec("flatten"),
            LayerSpec("dense", dict(in_features=self.flat_features, out_features=self.latent_dim,
                                    init_slope=self.slope))]

    def decoder_specs(self) -> list[LayerSpec]:
        c_last, l_last = self.channels[-1], self.stage_lengths()[-1]
        specs = [LayerSpec("dense", dict(in_features=self.latent_dim, out_features=self.flat_features,
                                         init_slope=self.slope)),
                 LayerSpec("unflatten", dict(shape=(c_last, l_last))),
                 LayerSpec("leaky_relu", dict(slope=self.slope)),
                 LayerSpec("batchnorm", dict(num_features=c_last))]
        outs = list(reversed(self.channels[:-1])) + [1]
        c_in = c_last
        for i, c in enumerate(outs):
            specs.append(LayerSpec("tconv1d", dict(in_channels=c_in, out_channels=c,
                                                   kernel_size=self.kernel_size, stride=self.stride,
                                                   padding=self.padding, init_slope=self.slope)))
            if i < len(outs) - 1:
                specs += [LayerSpec("leaky_relu", dict(slope=self.slope)),
                          LayerSpec("batchnorm", dict(num_features=c))]
            c_in = c
        return specs

    def discriminator_head_specs(self) -> list[LayerSpec]:
        return [LayerSpec("flatten"),
                LayerSpec("dense", dict(in_features=self.flat_features, out_features=1,
                                        init_slope=self.slope))]


PRESETS = {
    "desk": Architecture(),
    # wide conv stacks and 2000 memory slots; far too slow for CPU tests
    "large": Architecture(channels=(64, 128, 256, 512), latent_dim=100, memory_slots=2000),
    "micro": Architecture(input_length=8, channels=(2, 3), latent_dim=4, memory_slots=3),
}


class MadeGanNetwork(Module):
    """Parameter bundle: encoder, memory matrix, decoder and discriminator."""

    def __init__(self, arch: Architecture, rng: np.random.Generator, use_memory: bool = True,
                 adversarial: bool = True):
        arch.validate()
        self.arch = arch
        self.use_memory = use_memory
        self.adversarial = adversarial
        self.encoder = build_stack(arch.encoder_specs(), rng)
        rows = rng.normal(size=(arch.memory_slots, arch.latent_dim))
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
        self.memory = E.Tensor(rows, requires_grad=True)
        self.decoder = build_stack(arch.decoder_specs(), rng)
        if adversarial:
            self.disc_features = build_stack(arch.conv_stack_specs(), rng)
            self.disc_head = build_stack(arch.discriminator_head_specs(), rng)

    def _children(self):
        yield "encoder", self.encoder
        yield "decoder", self.decoder
        if self.adversarial:
            yield "disc_features", self.disc_features
            yield "disc_head", self.disc_head

    def _own_parameters(self):
        return {"memory": self.memory} if self.use_memory else {}

    def generator_parameters(self) -> dict:
        out = {}
        out.update(self.encoder.parameters("encoder."))
        if self.use_memory:
            out["memory"] = self.memory
        out.update(self.decoder.parameters("decoder."))
        return out

    def discriminator_parameters(self) -> dict:
        if not self.adversarial:
            return {}
        out = self.disc_features.parameters("disc_features.")
        out.update(self.disc_head.parameters("disc_head."))
        return out

    def _as_signal(self, x) -> E.Tensor:
        x = x if isinstance(x, E.Tensor) else E.Tensor(x)
        return E.reshape(x, (x.shape[0], 1, x.shape[-1]))

    def encode(self, x) -> E.Tensor:
        return self.encoder(self._as_signal(x))

    def address(self, z: E.Tensor) -> E.Tensor:
        return E.softmax(E.cosine_similarity(z, self.memory), axis=1)

    def retrieve(self, w: E.Tensor) -> E.Tensor:
        return E.matmul(w, self.memory)

    def decode(self, zhat: E.Tensor) -> E.Tensor:
        out = self.decoder(zhat)
        return E.reshape(out, (out.shape[0], out.shape[-1]))

    def generate(self, x):
        """Return (reconstruction, address weights or None)."""
        z = self.encode(x)
        if not self.use_memory:
            return self.decode(z), None
        w = self.address(z)
        return self.decode(self.retrieve(w)), w

    def discriminate(self, x):
        """Return (probability of being real, flattened last-conv features)."""
        h = self.disc_features(self._as_signal(x))
        feats = E.reshape(h, (h.shape[0], -1))
        logit = self.disc_head(h)
        return E.reshape(E.sigmoid(logit), (-1,)), feats


def _batch_sq_norm(diff: E.Tensor) -> E.Tensor:
    """Mean over the batch of the per-sample squared L2 norm."""
    flat = E.reshape(diff, (diff.shape[0], -1))
    return E.mean(E.tsum(E.square(flat), axis=1))


def generator_losses(net: MadeGanNetwork, x, weights=(1.0, 1.0, 1.0), xhat=None, w=None):
    """Generator objective on a batch.

    Returns (total, components) where total = weighted reconstruction +
    feature matching + sparsity terms plus the non-saturating adversarial
    term ``-mean log F(xhat)``.
    """
    lam_rec, lam_fm, lam_sp = weights
    x = x if isinstance(x, E.Tensor) else E.Tensor(x)
    if xhat is None:
        xhat, w = net.generate(x)
    rec = _batch_sq_norm(x - xhat)
    total = rec * lam_rec
    comps = {"rec": rec}
    if w is not None:
        sp = E.mean(E.tsum(E.absolute(w), axis=1))
        total = total + sp * lam_sp
        comps["sp"] = sp
    if net.adversarial:
        p_fake, h_fake = net.discriminate(xhat)
        _, h_real = net.discriminate(x)
        fm = _batch_sq_norm(h_real - h_fake)
        adv = -E.mean(E.log(p_fake, floor=LOG_FLOOR))
        total = total + fm * lam_fm + adv
        comps["fm"] = fm
        comps["adv"] = adv
    comps["generator"] = total
    return total, comps


def gan_value(net: MadeGanNetwork, x, xhat) -> E.Tensor:
    """Mean of log F(x) + log(1 - F(xhat)); the discriminator ascends this."""
    p_real, _ = net.discriminate(x)
    p_fake, _ = net.discriminate(xhat)
    return E.mean(E.log(p_real, floor=LOG_FLOOR) + E.log(1.0 - p_fake, floor=LOG_FLOOR))


class MadeGAN(OutlierMixin, BaseEstimator):
    """Novel-class detector scoring beats by memory-constrained reconstruction error.

    ``fit`` trains on beats of the known classes only. A ``calibration_fraction``
    of them is held out to set ``threshold_`` at ``threshold_percentile`` of
    their anomaly scores. ``predict`` follows the sklearn outlier convention
    (+1 existing, -1 novel); :meth:`classify_novelty` returns string labels.
    """

    def __init__(self, preset: str = "desk", channels=None, latent_dim=None, memory_slots=None,
                 input_length=None, use_memory: bool = True, adversarial: bool = True,
                 lambda_rec: float = 1.0, lambda_fm: float = 1.0, lambda_sp: float = 1.0,
                 epochs: int = 20, batch_size: int = 32, learning_rate: float = 1e-4,
                 threshold_percentile: float = 95.0, calibration_fraction: float = 0.2,
                 warm_start: bool = False, random_state: int = 0):
        self.preset = preset
        self.channels = channels
        self.latent_dim = latent_dim
        self.memory_slots = memory_slots
        self.input_length = input_length
        self.use_memory = use_memory
        self.adversarial = adversarial
        self.lambda_rec = lambda_rec
        self.lambda_fm = lambda_fm
        self.lambda_sp = lambda_sp
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.threshold_percentile = threshold_percentile
        self.calibration_fraction = calibration_fraction
        self.warm_start = warm_start
        self.random_state = random_state

    # -------------------------------------------------------------- config

    def architecture(self) -> Architecture:
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        arch = PRESETS[self.preset]
        overrides = {k: v for k, v in dict(channels=self.channels, latent_dim=self.latent_dim,
                                           memory_slots=self.memory_slots,
                                           input_length=self.input_length).items() if v is not None}
        if "channels" in overrides:
            overrides["channels"] = tuple(overrides["channels"])
        return replace(arch, **overrides)

    @property
    def loss_weights(self) -> tuple[float, float, float]:
        return (self.lambda_rec, self.lambda_fm if self.adversarial else 0.0, self.lambda_sp)

    # -------------------------------------------------------------- training

    def _split_calibration(self, X, rng):
        n = X.shape[0]
        n_cal = int(round(self.calibration_fraction * n))
        if n_cal < 1 or n - n_cal < 1:
            return X, X
        perm = rng.permutation(n)
        return X[perm[n_cal:]], X[perm[:n_cal]]

    def fit(self, X, y=None):
        X = check_beats(X, length=None, allow_empty=False)
        rng = np.random.default_rng(self.random_state)
        if not (self.warm_start and hasattr(self, "network_")):
            arch = self.architecture()
            if X.shape[1] != arch.input_length:
                raise ValueError(f"beats have length {X.shape[1]}, architecture expects {arch.input_length}")
            self.network_ = MadeGanNetwork(arch, rng, self.use_memory, self.adversarial)
            self.loss_trace_ = []
        X_train, X_cal = self._split_calibration(X, rng)
        self.loss_trace_ = list(getattr(self, "loss_trace_", [])) + self._train(X_train, rng)
        self.n_features_in_ = X.shape[1]
        self.calibrate_threshold(X_cal)
        return self

    def _train(self, X, rng) -> list[dict]:
        net = self.network_
        net.train()
        opt_g = nn.Adam(net.generator_parameters(), lr=self.learning_rate)
        opt_d = nn.Adam(net.discriminator_parameters(), lr=self.learning_rate) if net.adversarial else None
        weights = self.loss_weights
        n = X.shape[0]
        trace = []
        for epoch in range(self.epochs):
            perm = rng.permutation(n)
            sums: dict[str, float] = {}
            n_batches = 0
            for start in range(0, n, self.batch_size):
                xb = E.Tensor(X[perm[start:start + self.batch_size]])
                xhat, w = net.generate(xb)
                if opt_d is not None:
                    value = gan_value(net, xb, E.Tensor(xhat.data))
                    E.backward(-value)
                    opt_d.step()
                    sums["gan"] = sums.get("gan", 0.0) + float(value.data)
                total, comps = generator_losses(net, xb, weights, xhat, w)
                if not np.isfinite(total.data):
                    raise TrainingDivergedError(
                        f"generator loss became non-finite at epoch {epoch}, batch {n_batches}: "
                        + ", ".join(f"{k}={float(v.data):.4g}" for k, v in comps.items()))
                E.backward(total)
                opt_g.step()
                for k, v in comps.items():
                    sums[k] = sums.get(k, 0.0) + float(v.data)
                n_batches += 1
            trace.append({k: v / n_batches for k, v in sums.items()})
            log.debug("madegan epoch %d: %s", epoch, trace[-1])
        net.eval()
        return trace

    # -------------------------------------------------------------- inference

    def _inputs(self, X) -> np.ndarray:
        check_is_fitted(self, "network_")
        X = check_beats(X, length=self.network_.arch.input_length)
        self.network_.eval()
        return X

    def encode(self, X) -> np.ndarray:
        return self.network_.encode(self._inputs(X)).data

    def address(self, Z) -> np.ndarray:
        check_is_fitted(self, "network_")
        return self.network_.address(E.Tensor(np.atleast_2d(Z))).data

    def retrieve(self, W) -> np.ndarray:
        check_is_fitted(self, "network_")
        return self.network_.retrieve(E.Tensor(np.atleast_2d(W))).data

    def reconstruct(self, X, batch_size: int = 256) -> np.ndarray:
        X = self._inputs(X)
        if X.shape[0] == 0:
            return X.copy()
        return np.concatenate([self.network_.generate(X[i:i + batch_size])[0].data
                               for i in range(0, X.shape[0], batch_size)])

    def anomaly_score(self, X) -> np.ndarray:
        """Squared reconstruction error ||x - D(M^T w)||^2 per beat."""
        X = self._inputs(X)
        return np.sum((X - self.reconstruct(X)) ** 2, axis=1)

    def calibrate_threshold(self, X, percentile: float | None = None) -> float:
        q = self.threshold_percentile if percentile is None else percentile
        scores = self.anomaly_score(X)
        if scores.size == 0:
            raise ValueError("threshold calibration needs at least one beat")
        self.threshold_ = float(np.percentile(scores, q))
        return self.threshold_

    def score_samples(self, X) -> np.ndarray:
        return -self.anomaly_score(X)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "threshold_")
        return self.threshold_ - self.anomaly_score(X)

    def predict(self, X) -> np.ndarray:
        return np.where(self.decision_function(X) >= 0, 1, -1)

    def classify_novelty(self, X) -> tuple[np.ndarray, np.ndarray]:
        """(scores, labels) with label "novel" iff score > threshold."""
        check_is_fitted(self, "threshold_")
        scores = self.anomaly_score(X)
        return scores, np.where(scores > self.threshold_, "novel", "existing").astype(object)

    def generator_loss(self, X) -> tuple[float, dict]:
        """Loss components on a batch (training-mode forward, no update)."""
        net = self.network_
        net.train()
        try:
            total, comps = generator_losses(net, check_beats(X, length=None), self.loss_weights)
        finally:
            net.eval()
        return float(total.data), {k: float(v.data) for k, v in comps.items()}

    # -------------------------------------------------------------- persistence

    def copy(self) -> "MadeGAN":
        return copy.deepcopy(self)

    def save(self, path) -> None:
        check_is_fitted(self, "threshold_")
        arch = asdict(self.network_.arch)
        meta = {"params": _jsonable(self.get_params()), "architecture": _jsonable(arch),
                "threshold": self.threshold_, "loss_weights": list(self.loss_weights),
                "loss_trace": self.loss_trace_}
        save_arrays(path, module_state(self.network_), meta)

    @classmethod
    def load(cls, path) -> "MadeGAN":
        arrays, meta = load_arrays(path)
        params = meta["params"]
        if params.get("channels") is not None:
            params["channels"] = tuple(params["channels"])
        model = cls(**params)
        arch = Architecture(**{k: tuple(v) if isinstance(v, list) else v
                               for k, v in meta["architecture"].items()})
        model.network_ = MadeGanNetwork(arch, np.random.default_rng(0), model.use_memory,
                                        model.adversarial)
        load_module_state(model.network_, arrays)
        model.network_.eval()
        model.threshold_ = meta["threshold"]
        model.loss_trace_ = meta["loss_trace"]
        model.n_features_in_ = arch.input_length
        return model


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))

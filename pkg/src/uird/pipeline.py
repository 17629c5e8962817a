"""Class-incremental loop: novelty gate, pseudo-replay, per-task retraining.

Strategies share the gate and the run-directory plumbing and differ only in
how each task's classifier is trained:

``uird``          SMOTE pseudo-samples of every earlier class plus the new detections
``madegan_only``  the stored real detections of every class, no synthesis
``ewc``           one network updated in place under an EWC penalty
``joint``         a fresh network on all real training beats seen so far
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ._validation import check_beats
from .baselines import EWCClassifier, joint_baseline_train
from .classifier import BeatClassifier
from .ingest import stratified_split
from .madegan import MadeGAN
from .metrics import TaskReport
from .smote import GeneratorBank, SmoteGenerator

log = logging.getLogger(__name__)

STRATEGIES = ("uird", "madegan_only", "ewc", "joint")

# per-task sub-seed offsets; task t uses master + TASK_STRIDE * t + role
TASK_STRIDE = 101
_ROLES = {"madegan": 1, "classifier": 2, "synth": 3, "generator": 4, "ewc": 5}


def task_seed(master: int, task: int, role: str) -> int:
    return int(master) + TASK_STRIDE * int(task) + _ROLES[role]


def sample_size_order(counts: Mapping[str, int]) -> list[str]:
    """Most frequent class first; equal counts fall back to symbol order."""
    return sorted(counts, key=lambda s: (-int(counts[s]), s))


@dataclass
class TaskStream:
    """Classes in the order they are introduced, each with its beats."""

    classes: list
    beats: list
    ordering: str = "given"

    def __post_init__(self):
        if len(self.classes) != len(self.beats):
            raise ValueError("one beat array per class is required")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError("class symbols in a stream must be unique")
        self.beats = [check_beats(b, length=None) for b in self.beats]
        empty = [c for c, b in zip(self.classes, self.beats) if b.shape[0] == 0]
        if empty:
            raise ValueError(f"class(es) {empty} have no beats")

    def __len__(self) -> int:
        return len(self.classes)

    def counts(self) -> dict[str, int]:
        return {c: int(b.shape[0]) for c, b in zip(self.classes, self.beats)}

    @classmethod
    def from_labeled(cls, X, y, order=None, ordering: str = "sample_size") -> "TaskStream":
        X = check_beats(X, length=None)
        y = np.asarray(y, dtype=object)
        groups = {s: X[y == s] for s in dict.fromkeys(y.tolist())}
        if order is not None:
            missing = [s for s in order if s not in groups]
            if missing:
                raise ValueError(f"no beats for class(es) {missing}")
            return cls(list(order), [groups[s] for s in order], "given")
        if ordering == "sample_size":
            return order_by_sample_size(groups)
        if ordering == "given":
            return cls(list(groups), list(groups.values()), "given")
        raise ValueError(f"unknown task ordering {ordering!r}")


def order_by_sample_size(class_map: Mapping[str, np.ndarray]) -> TaskStream:
    names = sample_size_order({s: len(b) for s, b in class_map.items()})
    return TaskStream(names, [class_map[s] for s in names], "sample_size")


@dataclass
class PipelineConfig:
    seed: int = 0
    strategy: str = "uird"
    min_novel_count: int = 20
    split_ratio: float = 0.8
    madegan: dict = field(default_factory=lambda: {"preset": "desk", "epochs": 10})
    finetune_epochs: int | None = None
    classifier: dict = field(default_factory=dict)
    smote_k: int = 5
    lambda_ewc: float = 100.0
    fisher_samples: int = 1000

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {list(STRATEGIES)}")
        if self.min_novel_count < 1:
            raise ValueError("min_novel_count must be >= 1")
        if not 0.0 < self.split_ratio < 1.0:
            raise ValueError("split_ratio must lie in (0, 1)")
        if self.smote_k < 1:
            raise ValueError("smote_k must be >= 1")
        if self.lambda_ewc < 0:
            raise ValueError("lambda_ewc must be >= 0")


@dataclass
class PipelineState:
    madegan: MadeGAN
    classes: list
    stores: list                      # detected real beats per learned class
    real_train: list                  # every real training beat per learned class
    test: dict                        # class -> held-out real beats
    generators: GeneratorBank = field(default_factory=GeneratorBank)
    classifier: BeatClassifier | None = None
    reports: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    buffered: dict = field(default_factory=dict)
    seed: int = 0
    tasks_completed: int = 0
    tasks_seen: int = 0


@dataclass
class Detection:
    scores: np.ndarray
    novel: np.ndarray                 # boolean mask
    threshold: float

    @property
    def n_novel(self) -> int:
        return int(self.novel.sum())


class UIRDPipeline:
    """Drives one strategy through a task stream.

    When ``run_dir`` is given every task writes its checkpoints, report,
    novelty scores, predictions and decision log below it, and
    ``manifest.json`` is refreshed with content hashes.
    """

    def __init__(self, config: PipelineConfig | None = None, run_dir=None, config_record=None):
        self.config = config or PipelineConfig()
        self.config.validate()
        self.run_dir = None if run_dir is None else Path(run_dir)
        self.config_record = config_record if config_record is not None else asdict(self.config)
        self.state_: PipelineState | None = None
        self.class_order_: list | None = None

    # ---------------------------------------------------------------- models

    def _madegan(self, task: int) -> MadeGAN:
        return MadeGAN(**{**self.config.madegan, "random_state": task_seed(self.config.seed, task, "madegan")})

    def _classifier_params(self) -> dict:
        return dict(self.config.classifier)

    # ---------------------------------------------------------------- stages

    def init_phase(self, symbol: str, X, X_test=None) -> PipelineState:
        """Fit the first detector and generator on the initial (normal) class."""
        X = check_beats(X, length=None, allow_empty=False)
        cfg = self.config
        madegan = self._madegan(0).fit(X)
        state = PipelineState(madegan=madegan, classes=[symbol], stores=[X], real_train=[X],
                              test={} if X_test is None else {symbol: check_beats(X_test, length=None)},
                              seed=cfg.seed)
        if cfg.strategy == "uird":
            state.generators.append(SmoteGenerator(symbol, cfg.smote_k,
                                                   task_seed(cfg.seed, 0, "generator")).fit(X))
        self._decide(state, f"task 0: initial class {symbol!r}, {X.shape[0]} beats, "
                            f"threshold {madegan.threshold_!r}")
        self.state_ = state
        self._record(0, None, None)
        return state

    def detect_novel_batch(self, X) -> Detection:
        """Score a batch against the current detector and split it at the threshold."""
        state = self._require_state()
        scores, labels = state.madegan.classify_novelty(X)
        return Detection(scores, labels == "novel", state.madegan.threshold_)

    def run_task(self, symbol: str, X, X_test=None) -> TaskReport:
        """One incremental task for a batch believed to hold class ``symbol``."""
        state = self._require_state()
        cfg = self.config
        X = check_beats(X, length=None, allow_empty=False)
        if symbol in state.classes:
            raise ValueError(f"class {symbol!r} was already learned")
        if X_test is not None:
            state.test[symbol] = check_beats(X_test, length=None)
        state.tasks_seen += 1
        t = state.tasks_seen
        det = self.detect_novel_batch(X)
        detected = X[det.novel]
        if symbol in state.buffered:
            detected = np.concatenate([state.buffered[symbol], detected])
        self._decide(state, f"task {t}: class {symbol!r}, {det.n_novel}/{X.shape[0]} beats above "
                            f"threshold {det.threshold!r}")
        if detected.shape[0] < cfg.min_novel_count:
            if detected.shape[0]:
                state.buffered[symbol] = detected
            self._decide(state, f"task {t}: no novel class ({detected.shape[0]} detected, "
                                f"minimum {cfg.min_novel_count}); models unchanged")
            report = self._evaluate(t, state.classes + [symbol], updated=False, n_real=0, n_syn=0,
                                    notes="no novel class")
            self._record(t, det, report, X_batch_labels=symbol)
            return report
        state.buffered.pop(symbol, None)
        Xc, yc, n_real, n_syn = self._training_set(state, t, symbol, detected, X)
        state.classifier = self._train_classifier(state, t, symbol, Xc, yc)

        classes = state.classes + [symbol]
        state.classes = classes
        state.stores.append(detected)
        state.real_train.append(X)

        madegan = state.madegan.copy()
        ft = cfg.finetune_epochs if cfg.finetune_epochs is not None else madegan.epochs
        madegan.set_params(warm_start=True, epochs=ft, random_state=task_seed(cfg.seed, t, "madegan"))
        state.madegan = madegan.fit(np.concatenate(state.stores))
        if cfg.strategy == "uird":
            state.generators.append(SmoteGenerator(symbol, cfg.smote_k,
                                                   task_seed(cfg.seed, t, "generator")).fit(detected))
        state.tasks_completed += 1
        self._decide(state, f"task {t}: trained classifier on {n_real} real + {n_syn} synthetic beats; "
                            f"detector fine-tuned on {sum(s.shape[0] for s in state.stores)} stored beats, "
                            f"new threshold {state.madegan.threshold_!r}")
        report = self._evaluate(t, classes, updated=True, n_real=n_real, n_syn=n_syn)
        self._record(t, det, report, X_batch_labels=symbol)
        return report

    def run_sequence(self, stream: TaskStream, test_stream: TaskStream | None = None) -> list[TaskReport]:
        """Initial phase on the first class, then one task per remaining class.

        Without ``test_stream`` each class is split into train/test with
        ``split_ratio`` under the master seed.
        """
        if len(stream) < 2:
            raise ValueError("need ≥ 2 classes")
        self.class_order_ = list(stream.classes)
        if test_stream is None:
            train, test = split_stream(stream, self.config.split_ratio, self.config.seed)
        else:
            train, test = stream, dict(zip(test_stream.classes, test_stream.beats))
        self.init_phase(train.classes[0], train.beats[0], test.get(train.classes[0]))
        for symbol, X in zip(train.classes[1:], train.beats[1:]):
            self.run_task(symbol, X, test.get(symbol))
        return list(self.state_.reports)

    # ---------------------------------------------------------------- strategy hooks

    def _training_set(self, state: PipelineState, t: int, symbol: str, detected, X_real):
        cfg = self.config
        n_new = detected.shape[0]
        y_new = np.full(n_new, symbol, dtype=object)
        if cfg.strategy == "uird":
            Xs, ys = state.generators.synthesize([n_new] * len(state.generators),
                                                 random_state=task_seed(cfg.seed, t, "synth"))
            return np.concatenate([Xs, detected]), np.concatenate([ys, y_new]), n_new, Xs.shape[0]
        if cfg.strategy == "madegan_only":
            Xs = state.stores + [detected]
            ys = [np.full(s.shape[0], c, dtype=object) for c, s in zip(state.classes, state.stores)] + [y_new]
        elif cfg.strategy == "joint":
            Xs = state.real_train + [X_real]
            ys = [np.full(s.shape[0], c, dtype=object) for c, s in zip(state.classes, state.real_train)]
            ys.append(np.full(X_real.shape[0], symbol, dtype=object))
        else:  # ewc: the first task also sees the initial class; later tasks only the new one
            if state.classifier is None:
                Xs = state.stores + [detected]
                ys = [np.full(s.shape[0], c, dtype=object)
                      for c, s in zip(state.classes, state.stores)] + [y_new]
            else:
                Xs, ys = [detected], [y_new]
        Xc = np.concatenate(Xs)
        return Xc, np.concatenate(ys), Xc.shape[0], 0

    def _train_classifier(self, state: PipelineState, t: int, symbol: str, Xc, yc):
        cfg = self.config
        classes = state.classes + [symbol]
        seed = task_seed(cfg.seed, t, "classifier")
        if cfg.strategy == "joint":
            return joint_baseline_train(Xc, yc, classes, seed=seed, **self._classifier_params())
        if cfg.strategy == "ewc":
            clf = state.classifier
            if clf is None:
                clf = EWCClassifier(classes=classes, random_state=seed, lambda_ewc=cfg.lambda_ewc,
                                    fisher_samples=cfg.fisher_samples, **self._classifier_params())
            return clf.partial_fit(Xc, yc)
        return BeatClassifier(classes=classes, random_state=seed, **self._classifier_params()).fit(Xc, yc)

    # ---------------------------------------------------------------- evaluation and records

    def _evaluate(self, t: int, classes, updated: bool, n_real: int, n_syn: int, notes: str = ""):
        state = self.state_
        missing = [c for c in classes if c not in state.test]
        if missing or state.classifier is None:
            report = TaskReport(t, list(classes), np.zeros((len(classes),) * 2, dtype=int).tolist(),
                                method=self.config.strategy, n_real=n_real, n_synthetic=n_syn,
                                updated=updated,
                                notes=notes or ("no classifier yet" if state.classifier is None
                                                else f"no test beats for {missing}"))
        else:
            X, y = self._test_set(classes)
            report = state.classifier.evaluate(X, y, t, class_symbols=list(classes),
                                               method=self.config.strategy, n_real=n_real,
                                               n_synthetic=n_syn, updated=updated, notes=notes)
        state.reports.append(report)
        return report

    def _test_set(self, classes):
        state = self.state_
        X = np.concatenate([state.test[c] for c in classes])
        y = np.concatenate([np.full(state.test[c].shape[0], c, dtype=object) for c in classes])
        return X, y

    def _decide(self, state: PipelineState, message: str) -> None:
        log.info(message)
        state.decisions.append(message)

    def _require_state(self) -> PipelineState:
        if self.state_ is None:
            raise RuntimeError("call init_phase (or run_sequence) first")
        return self.state_

    def _record(self, t: int, det: Detection | None, report: TaskReport | None, X_batch_labels=None):
        if self.run_dir is None:
            return
        state = self.state_
        d = self.run_dir / f"task_{t}"
        d.mkdir(parents=True, exist_ok=True)
        state.madegan.save(d / "madegan.ckpt")
        if state.classifier is not None:
            state.classifier.save(d / "classifier.ckpt")
        if len(state.generators):
            state.generators.save(d / "generators")
        task_lines = [m for m in state.decisions if m.startswith(f"task {t}:")]
        (d / "decisions.log").write_text("\n".join(task_lines) + "\n", encoding="utf-8")
        if det is not None:
            with open(d / "scores.csv", "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["beat_index", "batch_class", "score", "decision", "threshold"])
                for i, (s, n) in enumerate(zip(det.scores, det.novel)):
                    w.writerow([i, X_batch_labels, repr(float(s)), "novel" if n else "existing",
                                repr(det.threshold)])
        if report is not None:
            (d / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
            if state.classifier is not None and all(c in state.test for c in report.class_symbols):
                self._write_predictions(d / "predictions.csv", report.class_symbols)
        self.write_manifest()

    def _write_predictions(self, path: Path, classes) -> None:
        clf = self.state_.classifier
        X, y = self._test_set(classes)
        proba = clf.predict_proba(X)
        pred = clf.predict(X)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["beat_index", "true", "predicted"] + [f"p_{i}" for i in range(proba.shape[1])])
            for i in range(X.shape[0]):
                w.writerow([i, y[i], pred[i]] + [repr(float(p)) for p in proba[i]])

    def write_manifest(self) -> dict:
        state = self.state_
        artifacts = {}
        for p in sorted(self.run_dir.rglob("*")):
            if p.is_file() and p.name != "manifest.json":
                artifacts[p.relative_to(self.run_dir).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
        manifest = {
            "strategy": self.config.strategy,
            "seed": self.config.seed,
            "class_order": list(self.class_order_ or state.classes),
            "learned_classes": list(state.classes),
            "tasks_completed": state.tasks_completed,
            "tasks_seen": state.tasks_seen,
            "config_hash": config_hash(self.config_record),
            "config": self.config_record,
            "artifacts": artifacts,
        }
        manifest["content_hash"] = hashlib.sha256(
            json.dumps(artifacts, sort_keys=True).encode()).hexdigest()
        (self.run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                                    encoding="utf-8")
        return manifest


def config_hash(record) -> str:
    return hashlib.sha256(json.dumps(record, sort_keys=True, default=str).encode()).hexdigest()


def split_stream(stream: TaskStream, ratio: float, seed: int) -> tuple[TaskStream, dict]:
    """Per-class train/test split; returns the training stream and class -> test beats."""
    X = np.concatenate(stream.beats)
    y = np.concatenate([np.full(b.shape[0], c, dtype=object) for c, b in zip(stream.classes, stream.beats)])
    tr, te = stratified_split(y, ratio, seed)
    tr_beats = [X[tr][y[tr] == c] for c in stream.classes]
    empty = [c for c, b in zip(stream.classes, tr_beats) if b.shape[0] == 0]
    if empty:
        raise ValueError(f"class(es) {empty} have no training beats after the split")
    test = {c: X[te][y[te] == c] for c in stream.classes}
    return TaskStream(stream.classes, tr_beats, stream.ordering), test

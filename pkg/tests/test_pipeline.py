import json

import numpy as np
import pytest

from uird.pipeline import (STRATEGIES, PipelineConfig, TaskStream, UIRDPipeline, sample_size_order, split_stream,
                           task_seed)

CLASSIFIER = dict(conv_channels=(2, 3), kernel_sizes=(3, 3), strides=(2, 2), hidden=(6, 5), epochs=30,
                  learning_rate=1e-2)


def toy_stream(counts=None, seed=0):
    """8-sample beats; the later classes sit far from the first so the micro detector flags them."""
    counts = counts or {"N": 60, "L": 40, "R": 30}
    rng = np.random.default_rng(seed)
    beats = []
    for c, n in enumerate(counts.values()):
        template = np.zeros(8)
        if c:
            template[2 * c - 1: 2 * c + 2] = 3.0 * (-1) ** c
        beats.append(template + 0.2 * rng.normal(size=(n, 8)))
    return TaskStream(list(counts), beats, "given")


def toy_config(**kw):
    params = dict(seed=0, min_novel_count=5, classifier=CLASSIFIER,
                  madegan={"preset": "micro", "epochs": 5, "learning_rate": 1e-2})
    params.update(kw)
    return PipelineConfig(**params)


# ------------------------------------------------------------ ordering and streams


def test_sample_size_order_examples():
    assert sample_size_order({"N": 500, "L": 300, "R": 200}) == ["N", "L", "R"]
    assert sample_size_order({"V": 5, "A": 5, "N": 9}) == ["N", "A", "V"]


def test_from_labeled_orderings():
    X = np.zeros((6, 8))
    y = ["V", "N", "N", "A", "N", "V"]
    assert TaskStream.from_labeled(X, y).classes == ["N", "V", "A"]
    assert TaskStream.from_labeled(X, y, ordering="given").classes == ["V", "N", "A"]
    assert TaskStream.from_labeled(X, y, order=["A", "V", "N"]).counts() == {"A": 1, "V": 2, "N": 3}
    with pytest.raises(ValueError):
        TaskStream.from_labeled(X, y, order=["Q"])
    with pytest.raises(ValueError):
        TaskStream(["N", "N"], [X, X])


def test_split_stream_keeps_every_class():
    train, test = split_stream(toy_stream(), 0.8, seed=1)
    assert train.counts() == {"N": 48, "L": 32, "R": 24}
    assert {c: len(b) for c, b in test.items()} == {"N": 12, "L": 8, "R": 6}


def test_task_seeds_do_not_collide():
    seeds = {task_seed(7, t, r) for t in range(50) for r in ("madegan", "classifier", "synth", "generator", "ewc")}
    assert len(seeds) == 250


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(strategy="replay").validate()
    with pytest.raises(ValueError):
        PipelineConfig(split_ratio=1.0).validate()


def test_single_class_stream_rejected():
    with pytest.raises(ValueError, match="need ≥ 2 classes"):
        UIRDPipeline(toy_config()).run_sequence(toy_stream({"N": 20}))


# ------------------------------------------------------------ the loop


@pytest.fixture(scope="module")
def uird_run(tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("run")
    pipe = UIRDPipeline(toy_config(), run_dir=run_dir)
    reports = pipe.run_sequence(toy_stream())
    return pipe, reports, run_dir


def test_state_grows_one_class_per_task(uird_run):
    pipe, reports, _ = uird_run
    state = pipe.state_
    assert [r.task_index for r in reports] == [1, 2]
    assert all(r.updated for r in reports)
    assert state.classes == ["N", "L", "R"] == pipe.class_order_
    assert len(state.stores) == 3 and state.generators.symbols == ["N", "L", "R"]
    assert state.classifier.classes_.tolist() == ["N", "L", "R"]
    assert reports[-1].class_symbols == ["N", "L", "R"]
    assert state.tasks_completed == state.tasks_seen == 2


def test_pseudo_samples_match_new_class_size(uird_run):
    pipe, reports, _ = uird_run
    assert reports[-1].macro["f_score"] == 1.0
    n_new = pipe.state_.stores[2].shape[0]
    assert reports[1].n_real == n_new and reports[1].n_synthetic == 2 * n_new


def test_run_directory_contents(uird_run):
    pipe, reports, run_dir = uird_run
    for t in (0, 1, 2):
        assert (run_dir / f"task_{t}" / "madegan.ckpt").is_file()
    scores = (run_dir / "task_1" / "scores.csv").read_text().splitlines()
    assert scores[0] == "beat_index,batch_class,score,decision,threshold"
    decisions = [line.split(",")[3] for line in scores[1:]]
    assert len(decisions) == 32  # 40 L beats at 0.8
    assert decisions.count("novel") + decisions.count("existing") == 32
    preds = (run_dir / "task_2" / "predictions.csv").read_text().splitlines()
    assert preds[0] == "beat_index,true,predicted,p_0,p_1,p_2" and len(preds) == 1 + 12 + 8 + 6
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert manifest["class_order"] == ["N", "L", "R"] and manifest["tasks_completed"] == 2
    assert "task_2/report.json" in manifest["artifacts"]
    assert "time" not in json.dumps(manifest)


def test_same_seed_same_run_bytes(uird_run, tmp_path):
    _, _, first = uird_run
    UIRDPipeline(toy_config(), run_dir=tmp_path).run_sequence(toy_stream())
    files = sorted(p.relative_to(first).as_posix() for p in first.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path).as_posix() for p in tmp_path.rglob("*") if p.is_file())
    for f in files:
        assert (first / f).read_bytes() == (tmp_path / f).read_bytes(), f


def _snapshot(model):
    return {k: v.data.copy() for k, v in model.network_.parameters().items()}


def test_known_batch_below_minimum_changes_nothing():
    stream = toy_stream({"N": 80, "L": 40})
    pipe = UIRDPipeline(toy_config(min_novel_count=50))
    pipe.init_phase("N", stream.beats[0][:60])
    before = _snapshot(pipe.state_.madegan)
    tau = pipe.state_.madegan.threshold_
    report = pipe.run_task("L", stream.beats[0][60:70])
    assert not report.updated and report.notes == "no novel class"
    assert pipe.state_.classes == ["N"] and pipe.state_.classifier is None
    assert pipe.state_.madegan.threshold_ == tau
    after = _snapshot(pipe.state_.madegan)
    assert all(np.array_equal(before[k], after[k]) for k in before)
    # the next batch of the same class gets the next index
    report = pipe.run_task("L", stream.beats[0][70:80])
    assert report.task_index == 2 and pipe.state_.tasks_completed == 0


def test_buffered_detections_are_merged():
    stream = toy_stream({"N": 60, "L": 40})
    pipe = UIRDPipeline(toy_config(min_novel_count=30))
    pipe.init_phase("N", stream.beats[0])
    assert not pipe.run_task("L", stream.beats[1][:20]).updated
    assert pipe.state_.buffered["L"].shape[0] == pipe.detect_novel_batch(stream.beats[1][:20]).n_novel
    report = pipe.run_task("L", stream.beats[1][20:])
    assert report.updated and report.task_index == 2
    assert pipe.state_.stores[1].shape[0] >= 30 and "L" not in pipe.state_.buffered


def test_learned_class_cannot_be_relearned(uird_run):
    pipe, _, _ = uird_run
    with pytest.raises(ValueError, match="already learned"):
        pipe.run_task("N", np.zeros((5, 8)))


def test_run_task_before_init_fails():
    with pytest.raises(RuntimeError):
        UIRDPipeline(toy_config()).run_task("L", np.zeros((5, 8)))


@pytest.mark.parametrize("strategy", [s for s in STRATEGIES if s != "uird"])
def test_baseline_strategies_complete(strategy):
    pipe = UIRDPipeline(toy_config(strategy=strategy, fisher_samples=50))
    reports = pipe.run_sequence(toy_stream())
    assert len(reports) == 2 and all(r.method == strategy for r in reports)
    assert all(r.n_synthetic == 0 for r in reports)
    assert pipe.state_.classifier.classes_.tolist() == ["N", "L", "R"]
    assert len(pipe.state_.generators) == 0
    if strategy == "joint":
        assert [r.n_real for r in reports] == [48 + 32, 48 + 32 + 24]
    if strategy == "ewc":
        assert len(pipe.state_.classifier.fishers_) == 2
        assert reports[1].n_real == pipe.state_.stores[2].shape[0]


def test_strategy_comparisons_on_a_separable_stream(uird_run):
    _, uird, _ = uird_run
    joint = UIRDPipeline(toy_config(strategy="joint")).run_sequence(toy_stream())
    stored = UIRDPipeline(toy_config(strategy="madegan_only")).run_sequence(toy_stream())
    for j, u in zip(joint, uird):
        assert j.macro["f_score"] >= u.macro["f_score"] - 0.05
    assert stored[-1].per_class["N"]["f_score"] <= uird[-1].per_class["N"]["f_score"] + 0.05


def test_reports_only_use_real_held_out_beats(uird_run):
    pipe, reports, _ = uird_run
    held_out = {c: len(b) for c, b in pipe.state_.test.items()}
    for r in reports:
        assert np.asarray(r.confusion).sum() == sum(held_out[c] for c in r.class_symbols)

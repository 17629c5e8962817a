"""Acceptance checks, one test per criterion.

Each test prints a ``criterion N: PASS|FAIL|SKIP`` line and the lines are
repeated in the terminal summary. Criterion 9 needs real MIT-BIH records:
set ``UIRD_MITDB`` to a directory holding ``<record>.dat`` files with
``<record>.ann`` sidecars (optionally ``UIRD_MITDB_RECORDS=100,101,...`` and
``UIRD_MITDB_CLASSES=N,L,R,V,A``).

Run standalone with ``python3 tests/test_acceptance.py``.
"""
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import yaml
from sklearn.metrics import roc_auc_score

from uird.cli import main as cli_main
from uird.classifier import BeatClassifier, classifier_specs
from uird.ingest import decode_212, detect_r_peaks, encode_212
from uird.madegan import PRESETS, MadeGAN, MadeGanNetwork, gan_value, generator_losses
from uird.metrics import emit_forgetting_table, forgetting_cells, precision_recall_f
from uird.nn import engine as E
from uird.nn.gradcheck import finite_diff_check
from uird.nn.layers import build_stack
from uird.smote import GeneratorBank, SmoteGenerator, knn
from uird.synthetic import gaussian_derivative_train, make_beats

ROOT = Path(__file__).resolve().parents[1]
SYNTHETIC_CONFIG = ROOT / "configs" / "synthetic_3class.yaml"


# ------------------------------------------------------------------ 1


def _op_cases(rng):
    t = lambda *s: E.Tensor(rng.normal(size=s), requires_grad=True)  # noqa: E731
    a, b, m = t(3, 4), t(3, 4), t(4, 2)
    pos = E.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True)
    x, w, bias = t(2, 2, 11), t(3, 2, 4), t(3)
    xt, wt, bt = t(2, 3, 5), t(3, 2, 4), t(2)
    xb, g, be = t(5, 3, 4), t(3), t(3)
    xe = t(5, 3)
    logits, targets = t(6, 4), rng.integers(0, 4, size=6)
    z, mem = t(4, 5), t(3, 5)
    coef = E.Tensor(rng.normal(size=(3, 4)))
    s = E.tsum
    return {
        "add": (lambda: s(E.add(a, b) * coef), [a, b]),
        "sub": (lambda: s(E.sub(a, b) * coef), [a, b]),
        "mul": (lambda: s(E.mul(a, b)), [a, b]),
        "div": (lambda: s(E.div(a, pos)), [a, pos]),
        "power": (lambda: s(E.power(pos, 2.5)), [pos]),
        "square": (lambda: s(E.square(a) * coef), [a]),
        "sqrt": (lambda: s(E.sqrt(pos)), [pos]),
        "exp": (lambda: s(E.exp(a)), [a]),
        "log": (lambda: s(E.log(pos, floor=1e-12)), [pos]),
        "sigmoid": (lambda: s(E.sigmoid(a) * coef), [a]),
        "leaky_relu": (lambda: s(E.leaky_relu(a, 0.2) * coef), [a]),
        "absolute": (lambda: s(E.absolute(a) * coef), [a]),
        "sum/mean": (lambda: s(E.square(E.mean(a, axis=1))) + s(E.tsum(b, axis=0, keepdims=True) ** 2), [a, b]),
        "reshape/transpose": (lambda: s(E.transpose(E.reshape(a, (4, 3))) * coef), [a]),
        "concat": (lambda: s(E.square(E.concat([a, b], axis=1))), [a, b]),
        "matmul": (lambda: s(E.square(E.matmul(a, m))), [a, m]),
        "dense": (lambda: s(E.square(E.dense(a, E.transpose(m), None))), [a, m]),
        "conv1d": (lambda: s(E.square(E.conv1d(x, w, bias, stride=2, padding=1))), [x, w, bias]),
        "tconv1d": (lambda: s(E.square(E.tconv1d(xt, wt, bt, stride=2, padding=1))), [xt, wt, bt]),
        "batchnorm": (lambda: s(E.batchnorm(xb, g, be, np.zeros(3), np.ones(3), training=True) ** 2
                                * E.Tensor(np.arange(60.0).reshape(5, 3, 4))), [xb, g, be]),
        "softmax": (lambda: s(E.softmax(xe) * E.Tensor(np.arange(15.0).reshape(5, 3))), [xe]),
        "softmax_cross_entropy": (lambda: E.softmax_cross_entropy(logits, targets)[0], [logits]),
        "cosine_similarity": (lambda: s(E.cosine_similarity(z, mem) * E.Tensor(np.arange(12.0).reshape(4, 3))),
                              [z, mem]),
    }


def _model_cases(rng):
    cases = {}
    for memory in (True, False):
        net = MadeGanNetwork(PRESETS["micro"], np.random.default_rng(1), use_memory=memory)
        net.train()
        xg = E.Tensor(rng.normal(size=(5, 8)))
        cases[f"madegan generator (memory={memory})"] = (
            lambda net=net, xg=xg: generator_losses(net, xg)[0], net.generator_parameters())
    net = MadeGanNetwork(PRESETS["micro"], np.random.default_rng(2))
    net.train()
    xr, xf = E.Tensor(rng.normal(size=(5, 8))), E.Tensor(rng.normal(size=(5, 8)))
    cases["madegan discriminator"] = (lambda: gan_value(net, xr, xf), net.discriminator_parameters())
    clf = build_stack(classifier_specs(3, 8, conv_channels=(2, 3), kernel_sizes=(3, 3), hidden=(5, 4)),
                      np.random.default_rng(3))
    xc, yc = E.Tensor(rng.normal(size=(6, 1, 8))), np.array([0, 1, 2, 2, 1, 0])
    cases["classifier"] = (lambda: E.softmax_cross_entropy(clf(xc), yc)[0], clf.parameters())
    return cases


def test_criterion_1_gradient_integrity(acceptance):
    start = time.process_time()
    rng = np.random.default_rng(0)
    worst_op, worst_model, failures = 0.0, 0.0, []
    for name, (fn, params) in _op_cases(rng).items():
        rep = finite_diff_check(fn, {str(i): p for i, p in enumerate(params)}, tolerance=1e-5, n_samples=400)
        worst_op = max(worst_op, rep.max_rel_error)
        if not rep.passed:
            failures.append(name)
    for name, (fn, params) in _model_cases(rng).items():
        rep = finite_diff_check(fn, params, tolerance=1e-4, n_samples=400)
        worst_model = max(worst_model, rep.max_rel_error)
        if not rep.passed:
            failures.append(name)
    elapsed = time.process_time() - start
    acceptance(1, not failures and elapsed < 120,
               f"ops max rel err {worst_op:.1e} (< 1e-5), models {worst_model:.1e} (< 1e-4), "
               f"{elapsed:.0f}s CPU{'; failed: ' + ', '.join(failures) if failures else ''}")


# ------------------------------------------------------------------ 2


def test_criterion_2_memory_addressing(acceptance):
    rng = np.random.default_rng(0)
    net = MadeGanNetwork(PRESETS["micro"], rng)
    simplex_err = sum_err = 0.0
    for _ in range(1000):
        k, d = int(rng.integers(1, 12)), int(rng.integers(1, 9))
        net.memory = E.Tensor(rng.normal(size=(k, d)) * rng.uniform(0.1, 10))
        w = net.address(E.Tensor(rng.normal(size=(4, d)))).data
        simplex_err = max(simplex_err, float(np.max(np.abs(w.sum(axis=1) - 1.0))), float(-min(w.min(), 0.0)))
        explicit = np.array([[sum(w[n, i] * net.memory.data[i, j] for i in range(k)) for j in range(d)]
                             for n in range(4)])
        sum_err = max(sum_err, float(np.max(np.abs(net.retrieve(E.Tensor(w)).data - explicit))))
    net.memory = E.Tensor(np.array([[1.0, 0.0], [-1.0, 0.0]]))
    w2 = net.address(E.Tensor(np.array([[3.0, 0.0]]))).data[0]
    hand = np.exp([1.0, -1.0]) / np.exp([1.0, -1.0]).sum()
    example_ok = np.allclose(w2, hand, atol=1e-12) and np.allclose(w2, [0.881, 0.119], atol=5e-4)
    acceptance(2, simplex_err < 1e-9 and sum_err < 1e-10 and example_ok,
               f"simplex err {simplex_err:.1e}, retrieval err {sum_err:.1e}, 2-slot w = "
               f"({w2[0]:.3f}, {w2[1]:.3f})")


# ------------------------------------------------------------------ 3


def test_criterion_3_smote_geometry(acceptance):
    rng = np.random.default_rng(0)
    worst_resid, t_ok, produced = 0.0, True, 0
    while produced < 10_000:
        n, d = int(rng.integers(2, 50)), int(rng.integers(1, 16))
        store = rng.normal(size=(n, d))
        gen = SmoteGenerator(k_neighbors=int(rng.integers(1, 8)), random_state=int(rng.integers(1 << 30))).fit(store)
        pts, base, nbr, _ = gen.sample(1000, return_parents=True)
        for p, i, j in zip(pts, base, nbr):
            seg = store[j] - store[i]
            dd = float(seg @ seg)
            t = float((p - store[i]) @ seg) / dd if dd else 0.0
            worst_resid = max(worst_resid, float(np.linalg.norm(p - store[i] - t * seg)))
            t_ok &= -1e-12 <= t <= 1 + 1e-12
        produced += pts.shape[0]

    knn_ok = True
    for trial in range(20):
        store = rng.integers(0, 5, size=(200, 3)).astype(float)  # many equal distances
        q = int(rng.integers(200))
        dist = sorted((float(np.sum((store[i] - store[q]) ** 2)), i) for i in range(200) if i != q)
        knn_ok &= knn(store[q], store, 7, exclude=q).tolist() == [i for _, i in dist[:7]]

    bank = GeneratorBank([SmoteGenerator(c, random_state=i).fit(rng.normal(size=(9, 4)))
                          for i, c in enumerate("NLR")])
    want = {"N": 17, "L": 0, "R": 333}
    _, y = bank.synthesize(want, random_state=1)
    counts_ok = {c: int(np.sum(y == c)) for c in want} == want
    acceptance(3, worst_resid < 1e-9 and t_ok and knn_ok and counts_ok,
               f"{produced} points, max residual {worst_resid:.1e}, t in [0,1]: {t_ok}, "
               f"knn oracle: {knn_ok}, counts exact: {counts_ok}")


# ------------------------------------------------------------------ 4


def test_criterion_4_parser_exactness(acceptance):
    rng = np.random.default_rng(0)
    values = rng.integers(-2048, 2048, size=20_000)
    identity = np.array_equal(decode_212(encode_212(values)), values)
    raw = rng.integers(0, 256, size=30_000, dtype=np.uint8).tobytes()
    reencoded = encode_212(decode_212(raw)) == raw
    worked = decode_212(bytes([0xFF, 0x0F, 0x00])).tolist()
    acceptance(4, identity and reencoded and worked == [-1, 0],
               f"10,000 frames round trip: {identity}, byte stream round trip: {reencoded}, "
               f"worked frame -> {tuple(worked)}")


# ------------------------------------------------------------------ 5


def _recovered(peaks, centers, tol=15):
    peaks = np.asarray(peaks)
    return sum(bool(peaks.size and np.min(np.abs(peaks - c)) <= tol) for c in centers)


def test_criterion_5_peak_recovery(acceptance):
    start = time.process_time()
    sig, centers = gaussian_derivative_train()
    clean = _recovered(detect_r_peaks(sig), centers) / len(centers)
    noisy = []
    for seed in range(5):
        sig, centers = gaussian_derivative_train(snr_db=20, seed=seed)
        noisy.append(_recovered(detect_r_peaks(sig), centers) / len(centers))
    elapsed = time.process_time() - start
    acceptance(5, clean == 1.0 and min(noisy) >= 0.95 and elapsed < 10,
               f"clean {clean:.0%}, 20 dB worst of 5 noise draws {min(noisy):.0%}, {elapsed:.1f}s CPU")


# ------------------------------------------------------------------ 6


def test_criterion_6_desk_novelty(acceptance):
    start = time.process_time()
    rng = np.random.default_rng(0)
    model = MadeGAN(preset="desk", epochs=10, random_state=0).fit(make_beats("N", 500, rng))
    held_a, novel_b = make_beats("N", 200, rng), make_beats("L", 200, rng)
    scores = np.concatenate([model.anomaly_score(held_a), model.anomaly_score(novel_b)])
    auroc = roc_auc_score(np.r_[np.zeros(200), np.ones(200)], scores)
    flagged = float(np.mean(model.classify_novelty(novel_b)[1] == "novel"))
    elapsed = time.process_time() - start
    acceptance(6, auroc >= 0.95 and flagged >= 0.80 and elapsed < 180,
               f"AUROC {auroc:.3f} (>= 0.95), B flagged {flagged:.0%} (>= 80%), {elapsed:.0f}s CPU")


# ------------------------------------------------------------------ 7 and 8


def _cli_run(config, out_root, strategy):
    argv = ["run-uird"] if strategy == "uird" else ["run-baseline", "--strategy", strategy]
    rc = cli_main(argv + ["--config", str(config), "--set", f"output_dir={out_root}", "--set", f"name={strategy}"])
    assert rc == 0, f"{strategy} run exited with {rc}"
    return out_root / strategy


def _final_report(run_dir):
    last = max(run_dir.glob("task_*/report.json"), key=lambda p: int(p.parent.name.split("_")[1]))
    return json.loads(last.read_text())


@pytest.fixture(scope="module")
def loop_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    times = {}
    for strategy in ("uird", "ewc"):
        start = time.process_time()
        _cli_run(SYNTHETIC_CONFIG, root / "runs", strategy)
        times[strategy] = time.process_time() - start
    return root, times


def test_criterion_7_full_loop(acceptance, loop_runs):
    root, times = loop_runs
    cfg = yaml.safe_load(SYNTHETIC_CONFIG.read_text())
    first = max(cfg["data"]["synthetic_counts"].items(), key=lambda kv: kv[1])[0]
    uird, ewc = _final_report(root / "runs" / "uird"), _final_report(root / "runs" / "ewc")
    macro = uird["macro"]["f_score"]
    f0_uird, f0_ewc = uird["per_class"][first]["f_score"], ewc["per_class"][first]["f_score"]
    total = sum(times.values())
    acceptance(7, macro >= 0.90 and f0_uird >= 0.90 and f0_uird - f0_ewc >= 0.10 and total < 600,
               f"UIRD macro-F {macro:.3f}, class-0 ({first}) F {f0_uird:.3f}; EWC class-0 F {f0_ewc:.3f} "
               f"(gap {f0_uird - f0_ewc:.3f} >= 0.10); {times['uird']:.0f}s + {times['ewc']:.0f}s CPU")


def test_criterion_8_determinism(acceptance, loop_runs):
    root, _ = loop_runs
    first = root / "first_uird"
    shutil.copytree(root / "runs" / "uird", first)
    shutil.rmtree(root / "runs" / "uird")
    second = _cli_run(SYNTHETIC_CONFIG, root / "runs", "uird")
    files = sorted(p.relative_to(first).as_posix() for p in first.rglob("*") if p.is_file())
    again = sorted(p.relative_to(second).as_posix() for p in second.rglob("*") if p.is_file())
    differing = [f for f in files if f not in again or (first / f).read_bytes() != (second / f).read_bytes()]
    acceptance(8, files == again and not differing,
               f"{len(files)} files compared byte for byte, {len(differing)} differ"
               + (f": {differing[:5]}" if differing else ""))


# ------------------------------------------------------------------ 9


def test_criterion_9_mitdb(acceptance, tmp_path):
    root = os.environ.get("UIRD_MITDB")
    if not root:
        acceptance(9, None, "UIRD_MITDB not set; MIT-BIH records not supplied")
    root = Path(root)
    records = os.environ.get("UIRD_MITDB_RECORDS")
    records = records.split(",") if records else sorted(p.stem for p in root.glob("*.dat")
                                                        if (root / f"{p.stem}.ann").is_file())
    classes = os.environ.get("UIRD_MITDB_CLASSES", "N,L,R,V,A").split(",")
    config = {"seed": 0, "name": "mitdb", "output_dir": str(tmp_path),
              "data": {"format": "wfdb", "path": str(root), "records": records,
                       "classes": classes, "task_order": "given"}}
    path = tmp_path / "mitdb.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    assert cli_main(["run-uird", "--config", str(path)]) == 0
    run = tmp_path / "mitdb"
    reports = sorted(run.glob("task_*/report.json"), key=lambda p: int(p.parent.name.split("_")[1]))
    from uird.metrics import TaskReport
    reports = [TaskReport.from_json(p.read_text()) for p in reports]
    task1 = reports[0].macro["f_score"]
    cells = forgetting_cells(reports)
    trend = cells[classes[0]]
    declining = [v for v in trend.values() if v is not None]
    print(emit_forgetting_table(reports))
    acceptance(9, task1 >= 0.95 and declining[-1] <= declining[0],
               f"task 1 {classes[0]}-vs-{classes[1]} macro-F {task1:.3f} (>= 0.95); "
               f"{classes[0]} F across tasks {[round(v, 2) for v in declining]}")


# ------------------------------------------------------------------ 10


def test_criterion_10_metric_arithmetic(acceptance):
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(100):
        c = int(rng.integers(2, 8))
        cm = rng.integers(0, 30, size=(c, c))
        cm[rng.random((c, c)) < 0.25] = 0
        for i in range(c):
            tp = int(cm[i, i])
            col, row = int(sum(cm[r, i] for r in range(c))), int(sum(cm[i, r] for r in range(c)))
            p = tp / col if col else 0.0
            r = tp / row if row else 0.0
            f = 2 * p * r / (p + r) if p + r else 0.0
            mismatches += precision_recall_f(cm, i) != (p, r, f)
    zero = precision_recall_f(np.array([[0, 0], [0, 5]]), 0) == (0.0, 0.0, 0.0)
    acceptance(10, mismatches == 0 and zero,
               f"{mismatches} mismatches over 100 confusions; zero-denominator -> 0: {zero}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-rA"]))

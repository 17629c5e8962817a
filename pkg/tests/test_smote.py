import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uird.smote import GeneratorBank, SmoteGenerator, knn


def brute_knn(query, store, k, exclude):
    dist = [(float(np.sum((row - query) ** 2)), i) for i, row in enumerate(store) if i != exclude]
    return [i for _, i in sorted(dist)[:k]]


def segment_residual(p, x, q):
    """(orthogonal distance of p from line x->q, projection coefficient)."""
    d = q - x
    dd = float(d @ d)
    if dd == 0.0:
        return float(np.linalg.norm(p - x)), 0.0
    t = float((p - x) @ d) / dd
    return float(np.linalg.norm(p - (x + t * d))), t


def test_knn_matches_brute_force_with_ties():
    rng = np.random.default_rng(0)
    # integer grid forces many exact distance ties
    store = rng.integers(0, 4, size=(200, 3)).astype(float)
    for i in range(0, 200, 7):
        assert knn(store[i], store, 5, exclude=i).tolist() == brute_knn(store[i], store, 5, i)


def test_knn_excludes_query_when_it_is_in_store():
    store = np.array([[0.0], [1.0], [0.0], [3.0]])
    assert knn(store[0], store, 2).tolist() == [2, 1]
    assert knn(np.array([0.5]), store, 2).tolist() == [0, 1]


def test_synthetic_points_lie_on_parent_segments():
    rng = np.random.default_rng(1)
    total = 0
    for trial in range(20):
        n, d = int(rng.integers(2, 40)), int(rng.integers(1, 12))
        store = rng.normal(size=(n, d))
        g = SmoteGenerator(k_neighbors=int(rng.integers(1, 8)), random_state=trial).fit(store)
        out, base, nbr, lam = g.sample(500, return_parents=True)
        assert out.shape == (500, d)
        for p, b, q, l in zip(out, base, nbr, lam):
            assert q in g.neighbors(int(b))
            resid, t = segment_residual(p, store[b], store[q])
            assert resid < 1e-9
            assert -1e-12 <= t <= 1 + 1e-12
            assert abs(t - l) < 1e-9 or np.allclose(store[b], store[q])
        total += out.shape[0]
    assert total == 10_000


def test_round_robin_parent_coverage():
    store = np.random.default_rng(2).normal(size=(7, 3))
    _, base, _, _ = SmoteGenerator(random_state=5).fit(store).sample(21, return_parents=True)
    assert np.bincount(base, minlength=7).tolist() == [3] * 7


def test_same_seed_same_samples_and_different_seed_differs():
    store = np.random.default_rng(3).normal(size=(10, 4))
    g = SmoteGenerator(random_state=9).fit(store)
    np.testing.assert_array_equal(g.sample(30), g.sample(30))
    assert not np.array_equal(g.sample(30), g.sample(30, random_state=10))


def test_single_sample_uses_jitter():
    g = SmoteGenerator(jitter_sigma=0.01, random_state=0).fit(np.zeros((1, 320)))
    assert g.jitter_mode_
    out = g.sample(200)
    assert abs(out.std() - 0.01) < 0.001


def test_k_is_capped_by_store_size():
    g = SmoteGenerator(k_neighbors=10).fit(np.random.default_rng(0).normal(size=(4, 2)))
    assert g.k_effective_ == 3


def test_invalid_inputs():
    with pytest.raises(ValueError):
        SmoteGenerator().fit(np.empty((0, 5)))
    with pytest.raises(ValueError):
        SmoteGenerator(k_neighbors=0).fit(np.zeros((3, 2)))
    with pytest.raises(ValueError):
        SmoteGenerator().fit(np.zeros((3, 2))).sample(-1)
    with pytest.raises(ValueError):
        SmoteGenerator().fit(np.zeros((2, 2)), ["N", "V"])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 50), st.integers(1, 6))
def test_counts_are_exact(count, n_classes):
    rng = np.random.default_rng(count)
    bank = GeneratorBank()
    for c in range(n_classes):
        bank.append(SmoteGenerator(f"c{c}", random_state=c).fit(rng.normal(size=(5, 3))))
    X, y = bank.synthesize([count] * n_classes, random_state=1)
    assert X.shape == (count * n_classes, 3)
    assert all((y == f"c{c}").sum() == count for c in range(n_classes))


def test_bank_rejects_duplicate_class_and_round_trips(tmp_path):
    rng = np.random.default_rng(0)
    bank = GeneratorBank([SmoteGenerator("N").fit(rng.normal(size=(6, 320))),
                          SmoteGenerator("V").fit(rng.normal(size=(4, 320)))])
    with pytest.raises(ValueError):
        bank.append(SmoteGenerator("N").fit(rng.normal(size=(2, 320))))
    bank.save(tmp_path)
    back = GeneratorBank.load(tmp_path)
    assert back.symbols == ["N", "V"]
    a, _ = bank.synthesize({"N": 5, "V": 3}, random_state=4)
    b, _ = back.synthesize({"N": 5, "V": 3}, random_state=4)
    np.testing.assert_array_equal(a, b)

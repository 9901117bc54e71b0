import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nlbench import noise
from nlbench.noise import NoiseSpec, TransitionMatrix
from nlbench.presets import profile


def test_symmetric_three_class_half():
    m = noise.build_symmetric_matrix(3, 0.5).entries
    np.testing.assert_allclose(np.diag(m), 0.5)
    np.testing.assert_allclose(m[~np.eye(3, dtype=bool)], 0.25)


def test_symmetric_zero_is_identity():
    np.testing.assert_array_equal(noise.build_symmetric_matrix(5, 0.0).entries, np.eye(5))


def test_symmetric_at_threshold_is_uniform():
    m = noise.build_symmetric_matrix(9, 8 / 9).entries
    np.testing.assert_allclose(m, np.full((9, 9), 1 / 9), atol=1e-15)


def test_symmetric_needs_two_classes():
    with pytest.raises(ValueError):
        noise.build_symmetric_matrix(1, 0.1)


def test_covid_dependent_rows():
    p = profile("covid")
    m = noise.build_dependent_matrix(3, 0.3, p.dependency_index_groups()).entries
    np.testing.assert_allclose(m[0], [0.7, 0.3, 0.0])
    np.testing.assert_allclose(m[1], [0.3, 0.7, 0.0])
    np.testing.assert_array_equal(m[2], [0.0, 0.0, 1.0])


def test_fetal_spread_three():
    p = profile("fetal")
    m = noise.build_dependent_matrix(6, 0.6, p.dependency_index_groups()).entries
    np.testing.assert_allclose(m[0], [0.4, 0.2, 0.2, 0.2, 0.0, 0.0])
    np.testing.assert_array_equal(m[4], np.eye(6)[4])
    np.testing.assert_array_equal(m[5], np.eye(6)[5])


def test_ungrouped_class_is_identity_row():
    m = noise.build_dependent_matrix(4, 0.5, [[0, 1]]).entries
    np.testing.assert_array_equal(m[2], [0, 0, 1, 0])
    np.testing.assert_array_equal(m[3], [0, 0, 0, 1])


@pytest.mark.parametrize("groups", [[[0, 1], [1, 2]], [[0, 5]]])
def test_dependent_rejects_bad_groups(groups):
    with pytest.raises(ValueError):
        noise.build_dependent_matrix(3, 0.5, groups)


def test_transition_matrix_validates_rows():
    with pytest.raises(ValueError):
        TransitionMatrix(np.array([[0.5, 0.4], [0.0, 1.0]]))


def test_matrix_text_export():
    text = noise.build_symmetric_matrix(2, 0.25).to_text(["a", "b"])
    assert text.splitlines()[1] == "a,0.75,0.25"


def test_inject_identity_no_flips():
    labels = np.arange(100) % 4
    out = noise.inject(labels, noise.build_symmetric_matrix(4, 0.0), seed=3)
    np.testing.assert_array_equal(out.observed, labels)
    assert not out.flipped.any()


def test_inject_flip_rate_within_three_sigma():
    labels = np.arange(100_000) % 3
    out = noise.inject(labels, noise.build_symmetric_matrix(3, 0.5), seed=11)
    sigma = np.sqrt(0.25 / 1e5)
    assert abs(out.flipped.mean() - 0.5) <= 3 * sigma


def test_inject_deterministic_and_order_independent():
    labels = np.random.default_rng(0).integers(0, 5, 2000)
    m = noise.build_symmetric_matrix(5, 0.4)
    a = noise.inject(labels, m, seed=7).observed
    b = noise.inject(labels, m, seed=7).observed
    assert a.tobytes() == b.tobytes()
    # each sample depends only on (seed, index): a prefix gives the same prefix
    np.testing.assert_array_equal(noise.inject(labels[:500], m, seed=7).observed, a[:500])
    assert not np.array_equal(noise.inject(labels, m, seed=8).observed, a)


def test_inject_rejects_bad_label():
    with pytest.raises(ValueError):
        noise.inject([0, 3], noise.build_symmetric_matrix(3, 0.1), seed=0)


def test_flipped_mask_matches_observed():
    labels = np.arange(3000) % 3
    out = noise.inject(labels, noise.build_symmetric_matrix(3, 0.7), seed=1)
    np.testing.assert_array_equal(out.flipped, out.observed != labels)


def test_dependent_injection_stays_in_group():
    p = profile("mura")
    groups = p.dependency_index_groups()
    m = noise.build_dependent_matrix(7, 0.7, groups)
    labels = np.arange(20_000) % 7
    obs = noise.inject(labels, m, seed=5).observed
    group_of = {c: i for i, g in enumerate(groups) for c in g}
    assert all(group_of[a] == group_of[b] for a, b in zip(labels, obs))


def test_audit_no_flips_identity():
    labels = np.arange(30) % 3
    res = noise.audit(labels, labels, num_classes=3)
    np.testing.assert_array_equal(res.matrix, np.eye(3))
    assert not res.empty_rows.any()


def test_audit_empty_class_flagged():
    res = noise.audit([0, 0, 2], [0, 2, 2], num_classes=3)
    np.testing.assert_array_equal(res.matrix[1], 0)
    assert res.empty_rows.tolist() == [False, True, False]


def test_audit_length_mismatch():
    with pytest.raises(ValueError):
        noise.audit([0, 1], [0])


def test_audit_converges_to_matrix():
    m = noise.build_dependent_matrix(4, 0.45, [[0, 1, 2]])
    labels = np.arange(100_000) % 4
    res = noise.audit(labels, noise.inject(labels, m, seed=2), 4)
    n = res.counts.sum(axis=1, keepdims=True)
    sigma = np.sqrt(m.entries * (1 - m.entries) / n)
    assert np.all(np.abs(res.matrix - m.entries) <= 3 * sigma + 1e-15)


def test_noisy_posterior_hand_value():
    out = noise.noisy_posterior([0.6, 0.3, 0.1], noise.build_symmetric_matrix(3, 0.5))
    np.testing.assert_allclose(out, [0.40, 0.325, 0.275], atol=1e-15)


def test_noisy_posterior_identity_and_uniform():
    p = np.array([0.2, 0.5, 0.3])
    np.testing.assert_allclose(noise.noisy_posterior(p, noise.build_symmetric_matrix(3, 0.0)), p)
    np.testing.assert_allclose(noise.noisy_posterior(p, noise.build_symmetric_matrix(3, 2 / 3)), [1 / 3] * 3)


def test_noisy_posterior_rejects_unnormalised():
    with pytest.raises(ValueError):
        noise.noisy_posterior([0.5, 0.6], noise.build_symmetric_matrix(2, 0.1))


def test_flipping_thresholds():
    assert noise.flipping_threshold(NoiseSpec("symmetric", 0.1), 9) == pytest.approx(8 / 9)
    assert round(noise.flipping_threshold(NoiseSpec("symmetric", 0.1), 9), 2) == 0.89
    assert noise.flipping_threshold(NoiseSpec("symmetric", 0.1), 2) == 0.5
    assert noise.flipping_threshold(NoiseSpec("class_dependent", 0.1, groups=[[0, 1]]), 3) == 0.5
    assert noise.flipping_threshold(NoiseSpec("class_dependent", 0.1, groups=[[0, 1, 2, 3], [4]]), 6) == 0.75
    with pytest.raises(ValueError):
        noise.flipping_threshold(NoiseSpec("class_dependent", 0.1, groups=[[0]]), 3)


def test_noise_spec_round_trip():
    s = NoiseSpec("class_dependent", 0.3, groups=[[0, 1]], seed=4)
    assert NoiseSpec.from_dict(s.to_dict()) == s


@settings(max_examples=200, deadline=None)
@given(c=st.integers(2, 12), eps=st.floats(0, 1))
def test_row_stochastic_property(c, eps):
    m = noise.build_symmetric_matrix(c, eps).entries
    assert np.all(np.abs(m.sum(axis=1) - 1) <= 1e-12)


@settings(max_examples=200, deadline=None)
@given(sizes=st.lists(st.integers(1, 4), min_size=1, max_size=4), eps=st.floats(0, 1))
def test_dependent_row_stochastic_and_zero_outside_group(sizes, eps):
    groups, start = [], 0
    for s in sizes:
        groups.append(list(range(start, start + s)))
        start += s
    c = start + 1
    m = noise.build_dependent_matrix(c, eps, groups).entries
    assert np.all(np.abs(m.sum(axis=1) - 1) <= 1e-12)
    for g in groups:
        outside = [i for i in range(c) if i not in g]
        assert np.all(m[np.ix_(g, outside)] == 0)

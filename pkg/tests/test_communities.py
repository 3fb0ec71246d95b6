"""Community extraction, tensor baseline and robustness protocol tests."""

import itertools
import warnings

import numpy as np
import pytest

from dglstm.communities import (CommunitySet, build_tensor,
                                correlation_matrix, dsc, extract_communities,
                                kmeans_1d, nn_parafac_symmetric, robustness,
                                split_two_means, tensor_communities)
from dglstm.errors import ConfigError, DataError, DegenerateStatsError


def exhaustive_two_means(values):
    """Check every threshold split directly from the definition."""
    v = np.asarray(values, dtype=float)
    order = np.argsort(v, kind="stable")
    best_sse, best_mask = np.inf, None
    for m in range(1, v.size):
        low, high = v[order[:m]], v[order[m:]]
        sse = np.sum((low - low.mean()) ** 2) + np.sum((high - high.mean()) ** 2)
        if sse < best_sse - 1e-15:
            best_sse = sse
            best_mask = np.zeros(v.size, dtype=bool)
            best_mask[order[m:]] = True
    return best_mask, best_sse


def test_split_two_means_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for _ in range(40):
        v = rng.normal(size=int(rng.integers(2, 25)))
        mask, sse = split_two_means(v)
        omask, osse = exhaustive_two_means(v)
        np.testing.assert_allclose(sse, osse, rtol=0, atol=1e-9)
        # same SSE; cluster split must agree where the optimum is unique
        assert v[mask].mean() > v[~mask].mean()


def test_split_two_means_worked_example():
    mask, sse = split_two_means(np.array([0.0, 0.0, 0.0, 5.0, 5.0]))
    np.testing.assert_array_equal(mask, [False, False, False, True, True])
    assert sse == 0.0


def test_split_two_means_scale_and_shift_invariance():
    rng = np.random.default_rng(1)
    v = rng.normal(size=15)
    mask, _ = split_two_means(v)
    mask2, _ = split_two_means(3.0 * v + 7.0)
    np.testing.assert_array_equal(mask, mask2)


def test_split_two_means_too_few():
    with pytest.raises(ConfigError):
        split_two_means(np.array([1.0]))


def test_kmeans_1d_agrees_with_exact_split():
    rng = np.random.default_rng(2)
    for _ in range(20):
        v = np.concatenate([rng.normal(0, 0.3, 8), rng.normal(4, 0.3, 6)])
        rng.shuffle(v)
        mask, sse = split_two_means(v)
        labels, centers, ksse = kmeans_1d(v, k=2, seed=3)
        np.testing.assert_allclose(ksse, sse, rtol=0, atol=1e-9)
        high = labels == int(np.argmax(centers))
        np.testing.assert_array_equal(high, mask)


def test_extract_communities_members_from_columns():
    # column k of the (R x K) weight matrix defines community k
    w = np.array([[0.0, 1.0],
                  [0.1, 0.9],
                  [0.9, 0.0],
                  [1.1, 0.1],
                  [0.05, 0.0]])
    cs = extract_communities(w)
    assert cs.k == 2 and cs.r == 5
    assert cs.members[0] == {3, 4}
    assert cs.members[1] == {1, 2}
    assert cs.source == "lstm"
    np.testing.assert_array_equal(cs.weights, w.T)


def test_extract_communities_constant_column_degenerate():
    w = np.array([[0.5, 1.0], [0.5, 0.2], [0.5, 0.1]])
    with pytest.warns(UserWarning, match="community 1"):
        cs = extract_communities(w)
    assert cs.members[0] == set()
    assert cs.degenerate[0] and not cs.degenerate[1]


def test_extract_communities_rejects_negative():
    with pytest.raises(ConfigError):
        extract_communities(np.array([[1.0, -0.1], [0.2, 0.3]]))


def test_community_set_validates_members():
    with pytest.raises(ConfigError):
        CommunitySet(weights=np.ones((1, 3)), members=[{0}], source="lstm")
    with pytest.raises(ConfigError):
        CommunitySet(weights=np.ones((1, 3)), members=[{4}], source="lstm")
    with pytest.raises(ConfigError):
        CommunitySet(weights=np.ones((1, 3)), members=[{1}], source="nope")


def test_community_set_json_round_trip(tmp_path):
    cs = CommunitySet(weights=np.array([[1.0, 0.0, 2.0], [0.5, 3.0, 0.0]]),
                      members=[{1, 3}, {2}], source="cd")
    path = tmp_path / "comm.json"
    cs.save(str(path))
    back = CommunitySet.load(str(path))
    np.testing.assert_array_equal(back.weights, cs.weights)
    assert back.members == cs.members
    assert back.source == "cd"


def test_correlation_matrix_definitional_oracle():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(17, 5))
    corr = correlation_matrix(w)
    t = w.shape[0]
    for i in range(5):
        for j in range(5):
            xi = w[:, i] - w[:, i].mean()
            xj = w[:, j] - w[:, j].mean()
            expected = (xi * xj).sum() / t / (
                np.sqrt((xi ** 2).sum() / t) * np.sqrt((xj ** 2).sum() / t))
            np.testing.assert_allclose(corr[i, j], min(max(expected, -1), 1),
                                       rtol=0, atol=1e-12)
    np.testing.assert_allclose(np.diag(corr), 1.0, rtol=0, atol=0)
    np.testing.assert_array_equal(corr, corr.T)


def test_correlation_matrix_anticorrelated():
    t = np.linspace(0, 1, 10)
    w = np.stack([t, -t], axis=1)
    corr = correlation_matrix(w)
    np.testing.assert_allclose(corr[0, 1], -1.0, rtol=0, atol=1e-12)


def test_correlation_matrix_errors():
    with pytest.raises(DataError, match="column 2"):
        correlation_matrix(np.column_stack([np.arange(5.), np.ones(5)]))
    with pytest.raises(DataError):
        correlation_matrix(np.ones((2, 3)))


def test_build_tensor_clamps_and_stacks():
    rng = np.random.default_rng(5)
    wins = [rng.normal(size=(12, 4)) for _ in range(3)]
    tensor = build_tensor(wins)
    assert tensor.shape == (4, 4, 3)
    assert tensor.min() >= 0.0
    for s, w in enumerate(wins):
        np.testing.assert_allclose(tensor[:, :, s],
                                   np.maximum(correlation_matrix(w), 0.0),
                                   rtol=0, atol=0)


def test_build_tensor_error_names_window():
    rng = np.random.default_rng(6)
    wins = [rng.normal(size=(10, 3)), np.ones((10, 3))]
    with pytest.raises(DataError, match="window 1"):
        build_tensor(wins)
    with pytest.raises(DataError):
        build_tensor([])


def planted_tensor(r=8, s=10, k=3, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    a = np.zeros((r, k))
    for j in range(k):
        a[rng.permutation(r)[: r // k + 1], j] = rng.uniform(0.5, 1.5, r // k + 1)
    c = rng.uniform(0.5, 2.0, size=(s, k))
    t = np.einsum("ik,jk,sk->ijs", a, a, c)
    if noise:
        e = rng.normal(0, noise, t.shape)
        t = np.maximum(t + 0.5 * (e + e.transpose(1, 0, 2)), 0.0)
    return t, a, c


def test_parafac_recovers_planted_rank3():
    tensor, a_true, _ = planted_tensor()
    result = nn_parafac_symmetric(tensor, k=3, seed=1)
    assert result.fit >= 0.99
    # every true factor column is matched by some estimated column (cosine)
    for j in range(3):
        cos = [
            float(a_true[:, j] @ result.a[:, m]
                  / (np.linalg.norm(a_true[:, j]) * np.linalg.norm(result.a[:, m]) + 1e-300))
            for m in range(3)]
        assert max(cos) > 0.99


def test_parafac_rank1_exact():
    rng = np.random.default_rng(7)
    a = rng.uniform(0.1, 1.0, size=(6, 1))
    c = rng.uniform(0.5, 2.0, size=(4, 1))
    tensor = np.einsum("ik,jk,sk->ijs", a, a, c)
    result = nn_parafac_symmetric(tensor, k=1, seed=0)
    assert result.fit > 0.999
    cos = float(a[:, 0] @ result.a[:, 0]
                / (np.linalg.norm(a) * np.linalg.norm(result.a)))
    assert cos > 0.999


def test_parafac_fit_monotone_nondecreasing():
    rng = np.random.default_rng(8)
    for trial in range(5):
        tensor, _, _ = planted_tensor(seed=10 + trial, noise=0.2)
        result = nn_parafac_symmetric(tensor, k=3, max_sweeps=60,
                                      seed=trial)
        hist = np.asarray(result.fit_history)
        assert np.all(np.diff(hist) >= -1e-10)


def test_parafac_factors_nonnegative_and_converged_flag():
    tensor, _, _ = planted_tensor(seed=3)
    result = nn_parafac_symmetric(tensor, k=3, seed=2)
    assert result.a.min() >= 0.0 and result.c.min() >= 0.0
    assert result.converged
    assert result.sweeps == len(result.fit_history)


def test_parafac_invalid_inputs():
    with pytest.raises(DegenerateStatsError):
        nn_parafac_symmetric(np.zeros((4, 4, 3)), k=2)
    with pytest.raises(ConfigError):
        nn_parafac_symmetric(np.ones((4, 5, 3)), k=2)
    with pytest.raises(ConfigError):
        nn_parafac_symmetric(np.ones((4, 4, 3)), k=0)
    with pytest.raises(ConfigError):
        nn_parafac_symmetric(-np.ones((4, 4, 3)), k=2)
    lopsided = np.ones((4, 4, 3))
    lopsided[0, 1, 0] = 2.0
    with pytest.raises(ConfigError, match="symmetric"):
        nn_parafac_symmetric(lopsided, k=2)


def test_tensor_communities_source_tag():
    tensor, _, _ = planted_tensor(seed=5)
    cs = tensor_communities(nn_parafac_symmetric(tensor, k=3, seed=0))
    assert cs.source == "cd"
    assert cs.k == 3 and cs.r == 8


def test_dsc_cases():
    assert dsc({1, 2, 3}, {1, 2, 3}) == 1.0
    assert dsc({1, 2}, {3, 4}) == 0.0
    assert dsc({1, 2, 3}, {2, 3, 4}) == pytest.approx(4.0 / 6.0)
    assert dsc({1}, {1, 2, 3}) == pytest.approx(0.5)
    assert dsc(set(), {1}) == 0.0
    with pytest.warns(UserWarning):
        assert dsc(set(), set()) == 0.0
    assert dsc({1, 2}, {2, 1}) == dsc({2, 1}, {1, 2})


def make_set(weights, source="lstm"):
    members = []
    for k in range(weights.shape[0]):
        mask, _ = split_two_means(weights[k])
        members.append({int(i) + 1 for i in np.flatnonzero(mask)})
    return CommunitySet(weights=weights, members=members, source=source)


def test_robustness_self_match_is_perfect():
    rng = np.random.default_rng(9)
    ref = make_set(rng.uniform(0, 1, size=(4, 12)))
    perm = np.array([2, 0, 3, 1])
    shuffled = CommunitySet(weights=ref.weights[perm],
                            members=[ref.members[i] for i in perm],
                            source="cd")
    rep = robustness(ref, shuffled)
    np.testing.assert_allclose(rep.best_corr, 1.0, rtol=0, atol=1e-12)
    np.testing.assert_allclose(rep.best_dsc, 1.0, rtol=0, atol=0)
    assert rep.mean_corr == pytest.approx(1.0, abs=1e-12)
    assert rep.mean_dsc == 1.0
    assert rep.ref_source == "lstm" and rep.other_source == "cd"


def test_robustness_matches_brute_force():
    rng = np.random.default_rng(10)
    ref = make_set(rng.uniform(0, 1, size=(3, 10)))
    other = make_set(rng.uniform(0, 1, size=(5, 10)), source="cd")
    rep = robustness(ref, other)
    for k in range(ref.k):
        corrs, dscs = [], []
        for j in range(other.k):
            u, v = ref.weights[k], other.weights[j]
            corrs.append(np.corrcoef(u, v)[0, 1])
            dscs.append(dsc(ref.members[k], other.members[j]))
        np.testing.assert_allclose(rep.best_corr[k], max(corrs), rtol=0,
                                   atol=1e-12)
        assert rep.best_dsc[k] == max(dscs)


def test_robustness_independent_matching():
    # the best-corr partner and best-dsc partner may be different communities
    ref = CommunitySet(weights=np.array([[1.0, 0.9, 0.1, 0.0]]),
                       members=[{1, 2}], source="lstm")
    other = CommunitySet(
        weights=np.array([[0.9, 1.0, 0.0, 0.1],    # high corr, members {1,2}
                          [0.0, 0.1, 1.0, 0.9]]),  # low corr, members {3,4}
        members=[{1, 2}, {3, 4}], source="cd")
    rep = robustness(ref, other)
    assert rep.best_dsc[0] == 1.0
    assert rep.best_corr[0] > 0.9


def test_robustness_adding_true_match_never_hurts():
    rng = np.random.default_rng(11)
    ref = make_set(rng.uniform(0, 1, size=(3, 8)))
    other = make_set(rng.uniform(0, 1, size=(2, 8)), source="cd")
    before = robustness(ref, other)
    widened = CommunitySet(
        weights=np.vstack([other.weights, ref.weights[0][None, :]]),
        members=other.members + [ref.members[0]], source="cd")
    after = robustness(ref, widened)
    assert all(a >= b - 1e-15 for a, b in zip(after.best_corr, before.best_corr))
    assert all(a >= b for a, b in zip(after.best_dsc, before.best_dsc))
    assert after.best_dsc[0] == 1.0


def test_robustness_roi_mismatch():
    rng = np.random.default_rng(12)
    a = make_set(rng.uniform(0, 1, size=(2, 8)))
    b = make_set(rng.uniform(0, 1, size=(2, 9)), source="cd")
    with pytest.raises(ConfigError):
        robustness(a, b)


def test_robustness_report_csv(tmp_path):
    rng = np.random.default_rng(13)
    ref = make_set(rng.uniform(0, 1, size=(2, 6)))
    rep = robustness(ref, ref)
    path = tmp_path / "rob.csv"
    rep.save_csv(str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "community,ref_size,best_match_corr,best_match_dsc"
    assert len(lines) == 4  # header + 2 communities + mean row
    assert lines[-1].startswith("mean,")

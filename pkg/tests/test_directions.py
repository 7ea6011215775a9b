import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from losscape.autodiff import FlatParams, ParamGroup, ParamLayout, dense_hessian_oracle
from losscape.directions import (DirectionPair, eigen_directions, eigen_pair, filter_normalize,
                                 load_direction, normalize_pair, pca_directions, random_direction,
                                 random_pair, save_direction, user_pair)
from losscape.errors import DegenerateDirectionError, LayoutError, RankDeficiencyError
from losscape.spectral import DiagonalOperator, HessianOperator

KINDS = ["conv_filter", "fc_row", "bias", "batchnorm"]


@st.composite
def layouts(draw):
    specs = draw(st.lists(st.tuples(st.sampled_from(KINDS), st.integers(1, 12)), min_size=1, max_size=12))
    groups, off = [], 0
    for i, (kind, count) in enumerate(specs):
        shape = (count,) if kind in ("conv_filter", "fc_row") else ()
        groups.append(ParamGroup(f"g{i}", off, count, kind, shape))
        off += count
    return ParamLayout(tuple(groups))


@st.composite
def layout_and_vectors(draw):
    lay = draw(layouts())
    rng = np.random.default_rng(draw(st.integers(0, 2**32 - 1)))
    d = rng.standard_normal(lay.total_count) * draw(st.floats(1e-3, 1e3))
    theta = rng.standard_normal(lay.total_count)
    # some parameter groups are exactly zero (e.g. freshly zeroed biases)
    for g in lay.groups:
        if rng.random() < 0.2:
            theta[g.offset:g.offset + g.count] = 0.0
    return lay, FlatParams(d, lay), FlatParams(theta, lay)


def _norms(v, lay):
    return np.array([np.linalg.norm(v.values[g.offset:g.offset + g.count]) for g in lay.groups])


@given(layout_and_vectors())
def test_group_norms_match_theta(case):
    lay, d, theta = case
    out = filter_normalize(d, theta)
    on, tn = _norms(out, lay), _norms(theta, lay)
    for g, a, b in zip(lay.groups, on, tn):
        if g.kind == "batchnorm":
            assert np.all(out.values[g.offset:g.offset + g.count] == 0.0)
        else:
            assert abs(a - b) <= 1e-12 * max(b, 1.0)


@given(layout_and_vectors())
def test_idempotent(case):
    lay, d, theta = case
    once = filter_normalize(d, theta)
    twice = filter_normalize(once, theta)
    assert np.allclose(twice.values, once.values, rtol=1e-12, atol=1e-12)


@given(layout_and_vectors(), st.floats(1e-6, 1e6))
def test_scale_invariant(case, c):
    lay, d, theta = case
    a = filter_normalize(FlatParams(c * d.values, lay), theta)
    b = filter_normalize(d, theta)
    assert np.allclose(a.values, b.values, rtol=1e-13, atol=1e-15)


def test_hand_example():
    lay = ParamLayout((ParamGroup("w", 0, 2, "fc_row", (2,)), ParamGroup("bn", 2, 2, "batchnorm")))
    out = filter_normalize(FlatParams(np.array([3.0, 4.0, 1.0, 2.0]), lay),
                           FlatParams(np.array([1.0, 0.0, 5.0, 5.0]), lay))
    np.testing.assert_allclose(out.values[:2], [0.6, 0.8], rtol=1e-15)
    assert out.values[2] == 0.0 and out.values[3] == 0.0


def test_degenerate_group():
    lay = ParamLayout((ParamGroup("a", 0, 2, "fc_row", (2,)), ParamGroup("b", 2, 2, "fc_row", (2,))))
    d = FlatParams(np.array([1.0, 1.0, 0.0, 0.0]), lay)
    theta = FlatParams(np.array([1.0, 2.0, 3.0, 4.0]), lay)
    with pytest.raises(DegenerateDirectionError) as err:
        filter_normalize(d, theta)
    assert err.value.group == "b"
    skipped = []
    out = filter_normalize(d, theta, degenerate="zero", skipped=skipped)
    assert skipped == ["b"] and np.all(out.values[2:] == 0.0)
    # zero direction on a zero parameter group is fine
    filter_normalize(d, FlatParams(np.array([1.0, 2.0, 0.0, 0.0]), lay))


def test_layout_mismatch(lenet, tiny_mlp):
    from losscape.autodiff import init_params
    with pytest.raises(LayoutError):
        filter_normalize(random_direction(lenet.layout, 0), init_params(tiny_mlp, 0))


def test_random_direction_statistics():
    lay = ParamLayout((ParamGroup("b", 0, 100_000, "bias"),))
    a, b = random_direction(lay, 1), random_direction(lay, 2)
    assert np.array_equal(a.values, random_direction(lay, 1).values)
    assert abs(a.values.mean()) <= 0.01
    cos = a.values @ b.values / (np.linalg.norm(a.values) * np.linalg.norm(b.values))
    assert abs(cos) <= 0.05


def _principal_angle(U, V):
    """Largest principal angle between column spaces, via the projection residual (accurate near 0)."""
    Qu, _ = np.linalg.qr(U)
    Qv, _ = np.linalg.qr(V)
    resid = Qu - Qv @ (Qv.T @ Qu)
    return float(np.arcsin(min(np.linalg.norm(resid, 2), 1.0)))


def _snapshots(n, N, seed):
    rng = np.random.default_rng(seed)
    lay = ParamLayout((ParamGroup("b", 0, N, "bias"),))
    # a smooth random walk with decaying steps, like a training path
    steps = rng.standard_normal((n, N)) * np.linspace(1.0, 0.1, n)[:, None]
    return [FlatParams(v, lay) for v in np.cumsum(steps, axis=0)]


def test_pca_matches_dense_svd():
    snaps = _snapshots(10, 500, 0)
    pair = pca_directions(snaps)
    D = np.stack([s.values - snaps[-1].values for s in snaps[:-1]], axis=1)
    U, S, _ = np.linalg.svd(D, full_matrices=False)
    got = np.stack([pair.phi1.values, pair.phi2.values], axis=1)
    assert _principal_angle(got, U[:, :2]) <= 1e-8
    assert abs(abs(pair.phi1.values @ U[:, 0]) - 1) < 1e-10
    assert abs(pair.phi1.values @ pair.phi2.values) <= 1e-10
    np.testing.assert_allclose(np.linalg.norm(got, axis=0), 1.0, rtol=1e-14)
    np.testing.assert_allclose(pair.meta["singular_values"], S[:2], rtol=1e-10)
    for v in (pair.phi1.values, pair.phi2.values):
        assert v[np.argmax(np.abs(v))] > 0


def test_pca_axis_aligned():
    lay = ParamLayout((ParamGroup("b", 0, 5, "bias"),))
    e1, e2 = np.eye(5)[0], np.eye(5)[1]
    snaps = [FlatParams(a * e1 + b * e2, lay) for a, b in [(4, 0.01), (-3, -0.02), (2, 0.03), (0, 0)]]
    pair = pca_directions(snaps)
    assert abs(pair.phi1.values[0]) > 0.999 and abs(pair.phi2.values[1]) > 0.999


def test_pca_rank_deficient():
    lay = ParamLayout((ParamGroup("b", 0, 4, "bias"),))
    line = [FlatParams(t * np.ones(4), lay) for t in range(5)]
    with pytest.raises(RankDeficiencyError):
        pca_directions(line)
    with pytest.raises(RankDeficiencyError):
        pca_directions(line[:2])


def test_pca_centered_flag():
    snaps = _snapshots(8, 50, 1)
    a, b = pca_directions(snaps), pca_directions(snaps, centered=True)
    assert b.meta["centered"] and not a.meta["centered"]
    assert not np.allclose(a.phi1.values, b.phi1.values)


def test_eigen_directions_diagonal():
    diag = np.concatenate([[5.0, 2.0], np.linspace(0.0, 1.0, 40)])
    res = eigen_directions(DiagonalOperator(diag), 2, m=42)
    assert abs(res.vectors[0][0]) >= 1 - 1e-8 and abs(res.vectors[1][1]) >= 1 - 1e-8


def test_eigen_directions_match_dense_oracle(tiny_mlp, mlp_params, tiny_batch):
    H = dense_hessian_oracle(tiny_mlp, mlp_params, tiny_batch)
    w, V = np.linalg.eigh(H)
    op = HessianOperator(tiny_mlp, mlp_params, tiny_batch)
    res = eigen_directions(op, 2, m=60, seed=1)
    assert isinstance(res.vectors[0], FlatParams)
    assert abs(res.vectors[0].values @ V[:, -1]) >= 0.999
    assert abs(res.vectors[0].values @ res.vectors[1].values) <= 1e-8
    assert np.all(res.residuals / np.abs(res.values) <= 1e-4)
    pair = eigen_pair(op, m=60, seed=1)
    assert pair.provenance == "eigen" and pair.meta["eigenvalues"][0] == pytest.approx(w[-1], rel=1e-8)


def test_pair_validation_and_user_files(tmp_path, lenet):
    pair = random_pair(lenet.layout, 4)
    assert not np.array_equal(pair.phi1.values, pair.phi2.values)
    with pytest.raises(ValueError):
        DirectionPair(pair.phi1, pair.phi2, "magic")
    save_direction(tmp_path / "a.gvck", pair.phi1)
    save_direction(tmp_path / "b.gvck", pair.phi2)
    up = user_pair(tmp_path / "a.gvck", tmp_path / "b.gvck", lenet.layout)
    assert up.provenance == "user" and np.array_equal(up.phi1.values, pair.phi1.values)
    bad = FlatParams(np.full(lenet.num_params, np.nan), lenet.layout)
    save_direction(tmp_path / "nan.gvck", bad)
    with pytest.raises(LayoutError):
        load_direction(tmp_path / "nan.gvck")


def test_normalize_pair_records(lenet_traj):
    pair = normalize_pair(random_pair(lenet_traj.layout, 0), lenet_traj.final)
    assert pair.normalized and pair.describe()["provenance"] == "random"

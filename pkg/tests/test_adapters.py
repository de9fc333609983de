"""Adapter init, identity, sharing structure, and parameter accounting."""

import numpy as np
import pytest

from styletune import adapters as ap
from styletune import autodiff as ad


def materialized(cfg, seed=0):
    params = ap.init_adapter(cfg, seed=seed)
    return params, [
        [ap.materialize_site(params, s, l) for s in range(cfg.n_sites_per_layer)]
        for l in range(cfg.n_layer)
    ]


@pytest.mark.parametrize("shared", [False, True])
def test_fresh_adapter_is_exact_identity(shared):
    cfg = ap.AdapterConfig(d_emb=16, d_prj=4, n_layer=3, is_shared=shared)
    params, mats = materialized(cfg, seed=7)
    rng = np.random.default_rng(0)
    for l in range(cfg.n_layer):
        for s in range(cfg.n_sites_per_layer):
            wd, wu = mats[l][s]
            emb = ad.Tensor(rng.normal(size=(10, cfg.d_emb)))
            out = ap.apply_adapter(emb, wd, wu)
            assert np.max(np.abs(out.data - emb.data)) == 0.0


def test_hand_derived_example():
    # D=2, H=1: emb=[1,0], wd=[[1],[0]], wu=[[0.5,-0.5]]
    # gelu(1) = 0.8413447  ->  out = [1 + 0.42067, 0 - 0.42067]
    out = ap.apply_adapter(
        ad.Tensor(np.array([[1.0, 0.0]])),
        ad.Tensor(np.array([[1.0], [0.0]])),
        ad.Tensor(np.array([[0.5, -0.5]])),
    )
    np.testing.assert_allclose(out.data[0], [1.4206724, -0.4206724], atol=1e-6)


def test_init_statistics_and_bounds():
    cfg = ap.AdapterConfig(d_emb=64, d_prj=8, n_layer=4, is_shared=False)
    params = ap.init_adapter(cfg, seed=1)
    wd = params.tensors["site0.wd"].data
    assert np.max(np.abs(wd)) <= 2.0 * ap.TRUNC_STD
    assert 0.01 < wd.std() < 0.03
    assert np.all(params.tensors["site0.wu"].data == 0.0)
    assert np.all(params.tensors["site1.wu"].data == 0.0)

    shared = ap.init_adapter(ap.AdapterConfig(64, 8, 4, True), seed=1)
    assert np.max(np.abs(shared.tensors["site0.base_d"].data)) <= 2.0 * ap.TRUNC_STD
    for name in ("depth_d", "base_u", "depth_u"):
        assert np.all(shared.tensors[f"site0.{name}"].data == 0.0)


def test_init_deterministic_per_seed():
    cfg = ap.AdapterConfig(32, 4, 2, False)
    a = ap.init_adapter(cfg, seed=5).named_arrays()
    b = ap.init_adapter(cfg, seed=5).named_arrays()
    c = ap.init_adapter(cfg, seed=6).named_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert not np.array_equal(a["site0.wd"], c["site0.wd"])


def test_shared_layer_difference_is_rank_one():
    cfg = ap.AdapterConfig(d_emb=12, d_prj=3, n_layer=4, is_shared=True)
    params = ap.init_adapter(cfg, seed=2)
    rng = np.random.default_rng(3)
    params.tensors["site0.depth_d"].data[:] = rng.normal(size=(4, 3))
    wd0, _ = ap.materialize_site(params, 0, 0)
    wd2, _ = ap.materialize_site(params, 0, 2)
    diff = wd0.data - wd2.data  # (D, H): every row equals depth_d[0]-depth_d[2]
    assert np.allclose(diff, diff[0][None, :], atol=0.0)
    want = params.tensors["site0.depth_d"].data[0] - params.tensors["site0.depth_d"].data[2]
    np.testing.assert_array_equal(diff[0], want)


def test_count_params_spot_values():
    assert ap.count_params(ap.AdapterConfig(64, 4, 4, False)) == 4096
    assert ap.count_params(ap.AdapterConfig(64, 4, 4, True)) == 1568
    # Tiny configs make sharing the *larger* parameterization (both sites counted).
    assert ap.count_params(ap.AdapterConfig(2, 1, 1, False)) == 8
    assert ap.count_params(ap.AdapterConfig(2, 1, 1, True)) == 14
    assert ap.count_params(ap.AdapterConfig(2, 1, 1, False)) < ap.count_params(
        ap.AdapterConfig(2, 1, 1, True)
    )


def test_count_params_matches_enumeration():
    rng = np.random.default_rng(11)
    for _ in range(50):
        cfg = ap.AdapterConfig(
            d_emb=int(rng.integers(1, 40)),
            d_prj=int(rng.integers(1, 12)),
            n_layer=int(rng.integers(1, 7)),
            is_shared=bool(rng.integers(0, 2)),
        )
        params = ap.init_adapter(cfg, seed=0)
        total = sum(t.data.size for t in params.tensors.values())
        assert total == ap.count_params(cfg)


def test_gradients_reach_factor_tables():
    cfg = ap.AdapterConfig(d_emb=8, d_prj=2, n_layer=2, is_shared=True)
    params = ap.init_adapter(cfg, seed=0)
    # Give the up-projection some mass so wd-side gradients are non-zero.
    params.tensors["site0.base_u"].data[:] = 0.1
    wd, wu = ap.materialize_site(params, 0, 1)
    emb = ad.Tensor(np.random.default_rng(4).normal(size=(5, 8)))
    loss = ad.tsum(ad.mul(ap.apply_adapter(emb, wd, wu), 1.0))
    loss.backward()
    for name in ("base_d", "depth_d", "base_u", "depth_u"):
        g = params.tensors[f"site0.{name}"].grad
        assert g is not None and np.any(g != 0.0), name
    # Depth rows other than the materialized layer stay untouched.
    assert np.all(params.tensors["site0.depth_d"].grad[0] == 0.0)
    assert np.any(params.tensors["site0.depth_d"].grad[1] != 0.0)

"""Residual bottleneck adapters with optional cross-layer weight sharing.

Each transformer layer carries two adapter sites (one after the
cross-attention block, one after the MLP block).  A site applies

    out = emb + gelu(emb @ wd) @ wu

with ``wd: (D, H)`` down and ``wu: (H, D)`` up projections.  In unshared
mode every (site, layer) owns its projections outright, stored as embedding
tables of shape ``(L, D*H)`` / ``(L, H*D)``.  In shared mode a site owns one
base pair plus per-layer depth offsets:

    wd[l][d][h] = base_d[d][h] + depth_d[l][h]      (broadcast over D)
    wu[l][h][d] = base_u[h][d] + depth_u[l][d]      (broadcast over H)

Up-projection tables initialize to zero, so a fresh adapter is exactly the
identity; down projections draw from a truncated normal (sigma 0.02,
clipped at two sigma).  Materialization happens inside the autodiff graph
so tuning reaches the factor tables directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

N_SITES_PER_LAYER = 2
TRUNC_STD = 0.02


@dataclass(frozen=True)
class AdapterConfig:
    d_emb: int
    d_prj: int
    n_layer: int
    is_shared: bool
    n_sites_per_layer: int = N_SITES_PER_LAYER

    def __post_init__(self):
        if min(self.d_emb, self.d_prj, self.n_layer, self.n_sites_per_layer) < 1:
            raise ValueError("adapter dimensions must be positive")


@dataclass
class AdapterParams:
    cfg: AdapterConfig
    tensors: dict  # name -> ad.Tensor

    def named_arrays(self) -> dict:
        return {k: t.data for k, t in self.tensors.items()}


def truncated_normal(rng: np.random.Generator, shape, std: float = TRUNC_STD) -> np.ndarray:
    """Normal(0, std) redrawn until inside +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_adapter(cfg: AdapterConfig, seed: int = 0) -> AdapterParams:
    rng = np.random.default_rng(seed)
    D, H, L = cfg.d_emb, cfg.d_prj, cfg.n_layer
    tensors = {}
    for s in range(cfg.n_sites_per_layer):
        if cfg.is_shared:
            tensors[f"site{s}.base_d"] = ad.param(truncated_normal(rng, (1, D * H)))
            tensors[f"site{s}.depth_d"] = ad.param(np.zeros((L, H)))
            tensors[f"site{s}.base_u"] = ad.param(np.zeros((1, H * D)))
            tensors[f"site{s}.depth_u"] = ad.param(np.zeros((L, D)))
        else:
            tensors[f"site{s}.wd"] = ad.param(truncated_normal(rng, (L, D * H)))
            tensors[f"site{s}.wu"] = ad.param(np.zeros((L, H * D)))
    return AdapterParams(cfg=cfg, tensors=tensors)


def materialize_site(params: AdapterParams, site: int, layer: int):
    """(wd, wu) Tensors for one site of one layer, inside the graph."""
    cfg = params.cfg
    D, H = cfg.d_emb, cfg.d_prj
    t = params.tensors
    idx = np.array([layer])
    if cfg.is_shared:
        wd = ad.add(
            ad.reshape(t[f"site{site}.base_d"], (D, H)),
            ad.gather_rows(t[f"site{site}.depth_d"], idx),
        )
        wu = ad.add(
            ad.reshape(t[f"site{site}.base_u"], (H, D)),
            ad.gather_rows(t[f"site{site}.depth_u"], idx),
        )
        return wd, wu
    wd = ad.reshape(ad.gather_rows(t[f"site{site}.wd"], idx), (D, H))
    wu = ad.reshape(ad.gather_rows(t[f"site{site}.wu"], idx), (H, D))
    return wd, wu


def apply_adapter(emb, wd, wu):
    """emb + gelu(emb @ wd) @ wu; identity whenever wu is all zeros."""
    return ad.add(emb, ad.matmul(ad.gelu(ad.matmul(emb, wd)), wu))


def count_params(cfg: AdapterConfig) -> int:
    D, H, L, S = cfg.d_emb, cfg.d_prj, cfg.n_layer, cfg.n_sites_per_layer
    if cfg.is_shared:
        return S * (2 * D * H + L * (D + H))
    return S * 2 * L * D * H

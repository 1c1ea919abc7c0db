"""Gated autoencoder: parameters, forward passes, losses, and analytic gradients.

The model relates an image pair (x, y) through a hidden mapping vector m:

    m  = sigma(W P (Ux * Vy))          (mapping inference)
    x~ = U^T (P^T W^T m * Vy)          (reconstruct x from y and m)
    y~ = V^T (P^T W^T m * Ux)          (reconstruct y from x and m)

U and V hold filter pairs (one row per factor), P is a fixed band-diagonal
matrix pooling adjacent factor pairs into subspaces, and W mixes pooled
subspace responses into mapping units.

Shape convention: u and v are (num_factors, input_dim) so that `u @ x` is a
length-num_factors vector; w is (num_mappings, num_factors // 2); pool is
(num_factors // 2, num_factors).  All forward functions accept a single
vector or a batch of row vectors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericalError, ShapeError

NONLINEARITIES = ("sigmoid", "tanh")


@dataclass(frozen=True)
class GaeConfig:
    """Static model dimensions and the mapping-unit nonlinearity."""

    input_dim: int
    num_factors: int
    num_mappings: int
    mapping_nonlinearity: str = "sigmoid"

    def __post_init__(self):
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.num_factors < 2 or self.num_factors % 2 != 0:
            raise ConfigError(
                f"num_factors must be a positive even integer, got {self.num_factors}"
            )
        if self.num_mappings < 1:
            raise ConfigError(f"num_mappings must be >= 1, got {self.num_mappings}")
        if self.mapping_nonlinearity not in NONLINEARITIES:
            raise ConfigError(
                f"mapping_nonlinearity must be one of {NONLINEARITIES}, "
                f"got {self.mapping_nonlinearity!r}"
            )

    @property
    def num_pooled(self) -> int:
        return self.num_factors // 2


def build_pooling_matrix(num_factors: int, dtype=np.float64) -> np.ndarray:
    """Band-diagonal matrix summing adjacent factor pairs.

    Row r has ones at columns 2r and 2r+1 and zeros elsewhere.
    """
    if num_factors < 2 or num_factors % 2 != 0:
        raise ConfigError(
            f"num_factors must be a positive even integer, got {num_factors}"
        )
    half = num_factors // 2
    pool = np.zeros((half, num_factors), dtype=dtype)
    rows = np.arange(half)
    pool[rows, 2 * rows] = 1.0
    pool[rows, 2 * rows + 1] = 1.0
    return pool


@dataclass
class GaeParams:
    """Learnable weights plus the fixed pooling matrix."""

    config: GaeConfig
    u: np.ndarray  # (num_factors, input_dim)
    v: np.ndarray  # (num_factors, input_dim)
    w: np.ndarray  # (num_mappings, num_factors // 2)
    pool: np.ndarray = field(default=None)  # (num_factors // 2, num_factors)

    def __post_init__(self):
        cfg = self.config
        if self.pool is None:
            self.pool = build_pooling_matrix(cfg.num_factors, dtype=self.u.dtype)
        expected = {
            "u": (cfg.num_factors, cfg.input_dim),
            "v": (cfg.num_factors, cfg.input_dim),
            "w": (cfg.num_mappings, cfg.num_pooled),
            "pool": (cfg.num_pooled, cfg.num_factors),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")

    @classmethod
    def init_random(cls, config: GaeConfig, rng: np.random.Generator,
                    dtype=np.float32) -> "GaeParams":
        """Uniform init in [-a, a], a = 1/sqrt(fan-in of the matrix)."""
        a_uv = 1.0 / np.sqrt(config.input_dim)
        a_w = 1.0 / np.sqrt(config.num_pooled)
        u = rng.uniform(-a_uv, a_uv, (config.num_factors, config.input_dim))
        v = rng.uniform(-a_uv, a_uv, (config.num_factors, config.input_dim))
        w = rng.uniform(-a_w, a_w, (config.num_mappings, config.num_pooled))
        return cls(config, u.astype(dtype), v.astype(dtype), w.astype(dtype))

    def copy(self) -> "GaeParams":
        return GaeParams(self.config, self.u.copy(), self.v.copy(),
                         self.w.copy(), self.pool.copy())


@dataclass
class GaeGradients:
    """Gradients w.r.t. u, v, w (same shapes as the parameters)."""

    du: np.ndarray
    dv: np.ndarray
    dw: np.ndarray

    @classmethod
    def zeros_like(cls, params: GaeParams) -> "GaeGradients":
        return cls(np.zeros_like(params.u), np.zeros_like(params.v),
                   np.zeros_like(params.w))


@dataclass
class LossBreakdown:
    """Components of the training objective for one batch (or epoch mean)."""

    sre: float
    scre: float
    penalties: float
    total: float


@dataclass(frozen=True)
class PenaltyConfig:
    """Coefficients for the auxiliary penalty terms."""

    mapping_sparsity: float = 0.0
    factor_sparsity: float = 0.0
    weight_decay: float = 0.0
    filter_norm: float = 0.0


def _nonlin(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sigmoid":
        # split by sign for numerical stability
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if kind == "tanh":
        return np.tanh(z)
    raise ConfigError(f"unknown nonlinearity {kind!r}")


def _nonlin_deriv_from_output(m: np.ndarray, kind: str) -> np.ndarray:
    if kind == "sigmoid":
        return m * (1.0 - m)
    if kind == "tanh":
        return 1.0 - m * m
    raise ConfigError(f"unknown nonlinearity {kind!r}")


def _check_input(params: GaeParams, arr: np.ndarray, name: str) -> None:
    if arr.shape[-1] != params.config.input_dim:
        raise ShapeError(
            f"{name} has last dimension {arr.shape[-1]}, "
            f"expected input_dim={params.config.input_dim}"
        )


def pooled_factors(params: GaeParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """P (Ux * Vy): pooled subspace responses, shape (..., num_factors // 2)."""
    _check_input(params, x, "x")
    _check_input(params, y, "y")
    factors = (x @ params.u.T) * (y @ params.v.T)
    return factors @ params.pool.T


def infer_mapping(params: GaeParams, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mapping code m = sigma(W P (Ux * Vy)); accepts vectors or batches."""
    pooled = pooled_factors(params, x, y)
    return _nonlin(pooled @ params.w.T, params.config.mapping_nonlinearity)


def _gating(params: GaeParams, m: np.ndarray) -> np.ndarray:
    """P^T W^T m, the factor-space gating signal, shape (..., num_factors)."""
    if m.shape[-1] != params.config.num_mappings:
        raise ShapeError(
            f"mapping code has last dimension {m.shape[-1]}, "
            f"expected num_mappings={params.config.num_mappings}"
        )
    return (m @ params.w) @ params.pool


def reconstruct_x(params: GaeParams, m: np.ndarray, y: np.ndarray) -> np.ndarray:
    """x~ = U^T (P^T W^T m * Vy); linear in y for fixed m."""
    _check_input(params, y, "y")
    return (_gating(params, m) * (y @ params.v.T)) @ params.u


def reconstruct_y(params: GaeParams, m: np.ndarray, x: np.ndarray) -> np.ndarray:
    """y~ = V^T (P^T W^T m * Ux); linear in x for fixed m."""
    _check_input(params, x, "x")
    return (_gating(params, m) * (x @ params.u.T)) @ params.v


def symmetric_recon_error(params: GaeParams, x: np.ndarray, y: np.ndarray,
                          x_corrupt: np.ndarray, y_corrupt: np.ndarray):
    """||x - x~||^2 + ||y - y~||^2 with the mapping inferred from the
    corrupted inputs and reconstructions gated against the clean pair."""
    m = infer_mapping(params, x_corrupt, y_corrupt)
    xr = reconstruct_x(params, m, y)
    yr = reconstruct_y(params, m, x)
    return np.sum((x - xr) ** 2, axis=-1) + np.sum((y - yr) ** 2, axis=-1)


def cross_reconstruct(params: GaeParams, m_partner: np.ndarray,
                      x: np.ndarray, y: np.ndarray):
    """Reconstruct (x, y) using another pair's mapping code (linear output)."""
    return reconstruct_x(params, m_partner, y), reconstruct_y(params, m_partner, x)


def symmetric_cross_recon_error(params: GaeParams, m_partner: np.ndarray,
                                x: np.ndarray, y: np.ndarray):
    """||x - x~'||^2 + ||y - y~'||^2 with the partner's mapping code."""
    xr, yr = cross_reconstruct(params, m_partner, x, y)
    return np.sum((x - xr) ** 2, axis=-1) + np.sum((y - yr) ** 2, axis=-1)


def combined_loss(sre, scre, lam: float):
    """(1 - lambda) * sre + lambda * scre."""
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    return (1.0 - lam) * sre + lam * scre


def _filter_norm_penalty(mat: np.ndarray):
    """Sum over rows of (||row|| - mean row norm)^2 + (mean of row entries)^2."""
    norms = np.sqrt(np.sum(mat ** 2, axis=1))
    means = np.mean(mat, axis=1)
    return np.sum((norms - norms.mean()) ** 2) + np.sum(means ** 2)


def _filter_norm_penalty_grad(mat: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(mat ** 2, axis=1))
    means = np.mean(mat, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    # d/dM of sum_r (n_r - nbar)^2 collapses to 2 (n_r - nbar) M_rp / n_r
    # because the nbar cross terms sum to zero.
    g = 2.0 * ((norms - norms.mean()) / safe)[:, None] * mat
    g += (2.0 * means / mat.shape[1])[:, None]
    return g


def penalty_value(params: GaeParams, pooled: np.ndarray, codes: np.ndarray,
                  pcfg: PenaltyConfig) -> float:
    """Auxiliary penalties: activation L1 terms (mean per pair), weight decay,
    and the filter norm/mean penalty on the rows of u and v."""
    pooled = np.atleast_2d(pooled)
    codes = np.atleast_2d(codes)
    total = 0.0
    if pcfg.mapping_sparsity:
        total += pcfg.mapping_sparsity * float(np.mean(np.sum(np.abs(codes), axis=1)))
    if pcfg.factor_sparsity:
        total += pcfg.factor_sparsity * float(np.mean(np.sum(np.abs(pooled), axis=1)))
    if pcfg.weight_decay:
        total += pcfg.weight_decay * float(
            np.sum(params.u ** 2) + np.sum(params.v ** 2) + np.sum(params.w ** 2)
        )
    if pcfg.filter_norm:
        total += pcfg.filter_norm * float(
            _filter_norm_penalty(params.u) + _filter_norm_penalty(params.v)
        )
    return total


def batch_loss(params: GaeParams, x, y, x_corrupt, y_corrupt,
               partner_codes, lam: float,
               pcfg: PenaltyConfig = PenaltyConfig()) -> LossBreakdown:
    """Mean training objective over a batch (no gradients)."""
    breakdown, _ = loss_and_gradients(
        params, x, y, x_corrupt, y_corrupt, partner_codes, lam, pcfg,
        want_gradients=False,
    )
    return breakdown


def loss_gradients(params: GaeParams, x, y, x_corrupt, y_corrupt,
                   partner_codes, lam: float,
                   pcfg: PenaltyConfig = PenaltyConfig()) -> GaeGradients:
    """Gradients of the mean batch objective w.r.t. u, v, w."""
    _, grads = loss_and_gradients(
        params, x, y, x_corrupt, y_corrupt, partner_codes, lam, pcfg,
        want_gradients=True,
    )
    return grads


def loss_and_gradients(params: GaeParams, x, y, x_corrupt, y_corrupt,
                       partner_codes, lam: float,
                       pcfg: PenaltyConfig = PenaltyConfig(),
                       want_gradients: bool = True):
    """Forward and backward pass for one batch.

    The objective is  mean_i [(1-lam) sre_i + lam scre_i]  plus penalties.
    Partner codes are constants: no gradient flows into the partner pair.
    Returns (LossBreakdown, GaeGradients or None).
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    x = np.atleast_2d(x)
    y = np.atleast_2d(y)
    x_corrupt = np.atleast_2d(x_corrupt)
    y_corrupt = np.atleast_2d(y_corrupt)
    if lam > 0.0 and partner_codes is None:
        raise ConfigError("partner_codes required when lambda > 0")
    _check_input(params, x, "x")
    _check_input(params, y, "y")
    n = x.shape[0]
    u, v, w, pool = params.u, params.v, params.w, params.pool
    kind = params.config.mapping_nonlinearity

    # forward: mapping from corrupted inputs
    a_c = x_corrupt @ u.T                 # (n, O)
    b_c = y_corrupt @ v.T
    factors = a_c * b_c
    pooled = factors @ pool.T             # (n, O/2)
    z = pooled @ w.T                      # (n, L)
    m = _nonlin(z, kind)

    # reconstructions gate against the clean pair
    a = x @ u.T
    b = y @ v.T
    g = (m @ w) @ pool                    # (n, O)
    xr = (g * b) @ u
    yr = (g * a) @ v
    rx = xr - x
    ry = yr - y
    sre_each = np.sum(rx ** 2, axis=1) + np.sum(ry ** 2, axis=1)
    sre = float(np.mean(sre_each))

    if lam > 0.0:
        mp = np.atleast_2d(partner_codes)
        gp = (mp @ w) @ pool
        xrp = (gp * b) @ u
        yrp = (gp * a) @ v
        rxp = xrp - x
        ryp = yrp - y
        scre = float(np.mean(np.sum(rxp ** 2, axis=1) + np.sum(ryp ** 2, axis=1)))
    else:
        scre = 0.0

    penalties = penalty_value(params, pooled, m, pcfg)
    total = combined_loss(sre, scre, lam) + penalties
    breakdown = LossBreakdown(sre=sre, scre=scre, penalties=penalties, total=total)
    if not want_gradients:
        return breakdown, None

    c_sre = (1.0 - lam) / n
    du = np.zeros_like(u)
    dv = np.zeros_like(v)
    dw = np.zeros_like(w)
    dg = np.zeros_like(g)

    # sre branch
    drx = 2.0 * c_sre * rx                # d total / d xr
    dry = 2.0 * c_sre * ry
    hx = g * b
    hy = g * a
    du += hx.T @ drx
    dv += hy.T @ dry
    dhx = drx @ u.T
    dhy = dry @ v.T
    dv += (dhx * g).T @ y                 # through b = Vy
    du += (dhy * g).T @ x                 # through a = Ux
    dg += dhx * b + dhy * a

    # scre branch (partner gating is constant)
    if lam > 0.0:
        c_scre = lam / n
        drxp = 2.0 * c_scre * rxp
        dryp = 2.0 * c_scre * ryp
        du += (gp * b).T @ drxp
        dv += (gp * a).T @ dryp
        dhxp = drxp @ u.T
        dhyp = dryp @ v.T
        dv += (dhxp * gp).T @ y
        du += (dhyp * gp).T @ x
        # w still enters the partner gating gp = P^T W^T m_j even though
        # m_j itself is a constant
        dgp = dhxp * b + dhyp * a
        dw += mp.T @ (dgp @ pool.T)

    # back through g = P^T W^T m for the pair's own code
    dg_pooled = dg @ pool.T               # (n, O/2)
    dm = dg_pooled @ w.T
    dw += m.T @ dg_pooled

    # activation sparsity penalties
    if pcfg.mapping_sparsity:
        dm = dm + (pcfg.mapping_sparsity / n) * np.sign(m)
    dz = dm * _nonlin_deriv_from_output(m, kind)
    dw += dz.T @ pooled
    dpooled = dz @ w
    if pcfg.factor_sparsity:
        dpooled = dpooled + (pcfg.factor_sparsity / n) * np.sign(pooled)
    dfactors = dpooled @ pool
    du += (dfactors * b_c).T @ x_corrupt
    dv += (dfactors * a_c).T @ y_corrupt

    # weight penalties
    if pcfg.weight_decay:
        du += 2.0 * pcfg.weight_decay * u
        dv += 2.0 * pcfg.weight_decay * v
        dw += 2.0 * pcfg.weight_decay * w
    if pcfg.filter_norm:
        du += pcfg.filter_norm * _filter_norm_penalty_grad(u)
        dv += pcfg.filter_norm * _filter_norm_penalty_grad(v)

    for name, arr in (("u", du), ("v", dv), ("w", dw)):
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite gradient entries for parameter {name}")
    return breakdown, GaeGradients(du, dv, dw)

"""SGD training loop with denoising corruption, auxiliary penalties,
constraint projection, the CIR ramp, and deterministic checkpointing.

Checkpoint files use the GAECKPT1 binary format:
    magic "GAECKPT1" | u64 meta_len | UTF-8 JSON metadata
    | u f32 | v f32 | w f32 (row-major little-endian)
    | u64 rng_len | UTF-8 JSON rng state
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model as gm
from .cir import CirSchedule, sample_partners_in_batch, schedule_at
from .data import PairDataset
from .errors import ConfigError, FormatError, NumericalError, TruncationError
from .model import (GaeConfig, GaeGradients, GaeParams, LossBreakdown,
                    PenaltyConfig)

CKPT_MAGIC = b"GAECKPT1"


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer, corruption, penalty, and schedule settings."""

    learning_rate: float = 0.01
    batch_size: int = 100
    epochs: int = 600
    input_dropout_rate: float = 0.5
    mapping_sparsity_coeff: float = 1e-3
    factor_sparsity_coeff: float = 1e-3
    weight_decay_coeff: float = 1e-4
    max_weight_norm: Optional[float] = None
    grad_clip_norm: Optional[float] = None
    filter_norm_penalty_coeff: float = 1e-2
    cir: CirSchedule = field(default_factory=CirSchedule)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.input_dropout_rate < 1.0:
            raise ConfigError(
                f"input_dropout_rate must lie in [0, 1), got {self.input_dropout_rate}"
            )
        for name in ("mapping_sparsity_coeff", "factor_sparsity_coeff",
                     "weight_decay_coeff", "filter_norm_penalty_coeff"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {val}")
        if self.cir.lambda_max > 0 and self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 when CIR is active")

    def penalties(self) -> PenaltyConfig:
        return PenaltyConfig(
            mapping_sparsity=self.mapping_sparsity_coeff,
            factor_sparsity=self.factor_sparsity_coeff,
            weight_decay=self.weight_decay_coeff,
            filter_norm=self.filter_norm_penalty_coeff,
        )


def corrupt_inputs(x: np.ndarray, y: np.ndarray, rate: float,
                   rng: np.random.Generator):
    """Independent zero-masks on x and y (targets stay clean at the caller)."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return x, y
    x_mask = rng.random(x.shape) >= rate
    y_mask = rng.random(y.shape) >= rate
    return x * x_mask.astype(x.dtype), y * y_mask.astype(y.dtype)


def auxiliary_penalties(params: GaeParams, factors: np.ndarray,
                        mapping_codes: np.ndarray, config: TrainConfig) -> float:
    """Value of the sparsity, weight-decay, and filter-norm penalty terms."""
    return gm.penalty_value(params, factors, mapping_codes, config.penalties())


def clip_gradients(grads: GaeGradients, max_norm: Optional[float]) -> GaeGradients:
    """Rescale so the global L2 norm over (du, dv, dw) is at most max_norm."""
    if max_norm is None:
        return grads
    total = np.sqrt(sum(float(np.sum(g ** 2))
                        for g in (grads.du, grads.dv, grads.dw)))
    if total <= max_norm or total == 0.0:
        return grads
    scale = np.asarray(max_norm / total, dtype=grads.du.dtype)
    return GaeGradients(grads.du * scale, grads.dv * scale, grads.dw * scale)


def limit_weight_norms(params: GaeParams, max_norm: Optional[float]) -> None:
    """Project each of u, v, w back to Frobenius norm <= max_norm, in place."""
    if max_norm is None:
        return
    for name in ("u", "v", "w"):
        mat = getattr(params, name)
        norm = float(np.sqrt(np.sum(mat ** 2)))
        if norm > max_norm:
            mat *= np.asarray(max_norm / norm, dtype=mat.dtype)


@dataclass
class TrainState:
    """Mutable state of one training run."""

    params: GaeParams
    config: TrainConfig
    rng: np.random.Generator
    epoch: int = 0
    loss_history: list = field(default_factory=list)

    @classmethod
    def new(cls, gae_config: GaeConfig, config: TrainConfig) -> "TrainState":
        init_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0)))
        params = GaeParams.init_random(gae_config, init_rng, dtype=np.float32)
        train_rng = np.random.default_rng(np.random.SeedSequence((config.seed, 1)))
        return cls(params=params, config=config, rng=train_rng)


def _batch_slices(n: int, batch_size: int):
    starts = list(range(0, n, batch_size))
    slices = [(s, min(s + batch_size, n)) for s in starts]
    # fold a trailing singleton into the previous batch so partner sampling
    # always has at least two pairs
    if len(slices) > 1 and slices[-1][1] - slices[-1][0] == 1:
        slices[-2] = (slices[-2][0], slices[-1][1])
        slices.pop()
    return slices


def train_epoch(state: TrainState, dataset: PairDataset, epoch: int) -> LossBreakdown:
    """One shuffled pass over the dataset; returns the epoch-mean losses."""
    cfg = state.config
    params = state.params
    lam, k = schedule_at(cfg.cir, epoch)
    pcfg = cfg.penalties()
    n = len(dataset)
    perm = state.rng.permutation(n)

    sums = np.zeros(4)
    for batch_idx, (lo, hi) in enumerate(_batch_slices(n, cfg.batch_size)):
        idx = perm[lo:hi]
        xb = dataset.x[idx]
        yb = dataset.y[idx]
        xc, yc = corrupt_inputs(xb, yb, cfg.input_dropout_rate, state.rng)
        if lam > 0.0:
            codes = gm.infer_mapping(params, xc, yc)
            partner_idx = sample_partners_in_batch(codes, k, state.rng)
            partner_codes = codes[partner_idx]
        else:
            partner_codes = None
        breakdown, grads = gm.loss_and_gradients(
            params, xb, yb, xc, yc, partner_codes, lam, pcfg)
        if not np.isfinite(breakdown.total):
            raise NumericalError(
                f"non-finite loss at epoch {epoch}, batch {batch_idx}: "
                f"sre={breakdown.sre} scre={breakdown.scre} "
                f"penalties={breakdown.penalties}"
            )
        grads = clip_gradients(grads, cfg.grad_clip_norm)
        lr = np.asarray(cfg.learning_rate, dtype=params.u.dtype)
        params.u -= lr * grads.du
        params.v -= lr * grads.dv
        params.w -= lr * grads.dw
        limit_weight_norms(params, cfg.max_weight_norm)
        weight = hi - lo
        sums += weight * np.array([breakdown.sre, breakdown.scre,
                                   breakdown.penalties, breakdown.total])

    mean = sums / n
    result = LossBreakdown(sre=float(mean[0]), scre=float(mean[1]),
                           penalties=float(mean[2]), total=float(mean[3]))
    state.loss_history.append(result)
    state.epoch = epoch + 1
    return result


@dataclass
class Checkpoint:
    """Everything needed to resume a run deterministically."""

    gae_config: GaeConfig
    train_config: TrainConfig
    params: GaeParams
    epoch: int
    rng_state: dict
    loss_history: list  # of LossBreakdown

    @classmethod
    def from_state(cls, state: TrainState) -> "Checkpoint":
        return cls(
            gae_config=state.params.config,
            train_config=state.config,
            params=state.params,
            epoch=state.epoch,
            rng_state=state.rng.bit_generator.state,
            loss_history=list(state.loss_history),
        )

    def to_state(self) -> TrainState:
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return TrainState(params=self.params, config=self.train_config,
                          rng=rng, epoch=self.epoch,
                          loss_history=list(self.loss_history))


def _cir_to_dict(cir: CirSchedule) -> dict:
    d = dataclasses.asdict(cir)
    if d["step_points"] is not None:
        d["step_points"] = [list(p) for p in d["step_points"]]
    return d


def _cir_from_dict(d: dict) -> CirSchedule:
    d = dict(d)
    if d.get("step_points") is not None:
        d["step_points"] = tuple(tuple(p) for p in d["step_points"])
    return CirSchedule(**d)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    """Write a checkpoint; save -> load -> save is byte-identical."""
    gcfg = checkpoint.gae_config
    tcfg = dataclasses.asdict(checkpoint.train_config)
    tcfg["cir"] = _cir_to_dict(checkpoint.train_config.cir)
    meta = {
        "gae_config": dataclasses.asdict(gcfg),
        "train_config": tcfg,
        "epoch": checkpoint.epoch,
        "loss_history": [[lb.sre, lb.scre, lb.penalties, lb.total]
                         for lb in checkpoint.loss_history],
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    rng_bytes = json.dumps(checkpoint.rng_state, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        for mat in (checkpoint.params.u, checkpoint.params.v, checkpoint.params.w):
            fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())
        fh.write(struct.pack("<Q", len(rng_bytes)))
        fh.write(rng_bytes)


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a GAECKPT1 file."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if len(magic) < 8 or magic != CKPT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r} in {path}")
        raw = fh.read(8)
        if len(raw) != 8:
            raise TruncationError("checkpoint header: expected 8 bytes, got "
                                  f"{len(raw)}")
        (meta_len,) = struct.unpack("<Q", raw)
        meta_bytes = fh.read(meta_len)
        if len(meta_bytes) != meta_len:
            raise TruncationError(
                f"checkpoint metadata: expected {meta_len} bytes, got {len(meta_bytes)}"
            )
        try:
            meta = json.loads(meta_bytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint metadata is not valid JSON: {exc}") from exc
        try:
            gcfg = GaeConfig(**meta["gae_config"])
            tdict = dict(meta["train_config"])
            tdict["cir"] = _cir_from_dict(tdict["cir"])
            tcfg = TrainConfig(**tdict)
        except (KeyError, TypeError) as exc:
            raise FormatError(f"checkpoint metadata incomplete: {exc}") from exc

        shapes = [(gcfg.num_factors, gcfg.input_dim),
                  (gcfg.num_factors, gcfg.input_dim),
                  (gcfg.num_mappings, gcfg.num_pooled)]
        mats = []
        for shape in shapes:
            nbytes = 4 * shape[0] * shape[1]
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise TruncationError(
                    f"checkpoint payload: expected {nbytes} bytes, got {len(raw)}"
                )
            mats.append(np.frombuffer(raw, dtype="<f4").reshape(shape).copy())
        raw = fh.read(8)
        if len(raw) != 8:
            raise TruncationError(f"rng-state header: expected 8 bytes, got {len(raw)}")
        (rng_len,) = struct.unpack("<Q", raw)
        rng_bytes = fh.read(rng_len)
        if len(rng_bytes) != rng_len:
            raise TruncationError(
                f"rng state: expected {rng_len} bytes, got {len(rng_bytes)}"
            )
        if fh.read(1):
            raise FormatError("trailing bytes after checkpoint payload")

    params = GaeParams(gcfg, mats[0], mats[1], mats[2],
                       pool=gm.build_pooling_matrix(gcfg.num_factors,
                                                    dtype=np.float32))
    history = [LossBreakdown(*row) for row in meta["loss_history"]]
    return Checkpoint(gae_config=gcfg, train_config=tcfg, params=params,
                      epoch=int(meta["epoch"]),
                      rng_state=json.loads(rng_bytes.decode("utf-8")),
                      loss_history=history)


def train(state: TrainState, dataset: PairDataset,
          epochs: Optional[int] = None, callback=None) -> TrainState:
    """Run epochs state.epoch .. epochs-1 (resume-aware)."""
    target = epochs if epochs is not None else state.config.epochs
    for epoch in range(state.epoch, target):
        result = train_epoch(state, dataset, epoch)
        if callback is not None:
            callback(epoch, result, state)
    return state

"""One-shot weight pruning: four scoring metrics, per-output-neuron mask
selection under unstructured or N:M sparsity, the OBS compensation sweep, and
the layer-by-layer orchestration over a model.

Scoring/masking operate in (output neuron x input feature) orientation: each
row is one output neuron's comparison group and score columns line up with the
input-norm vectors. The model stores weights as (d_in, d_out), so the
orchestrator transposes in and out; persisted masks are aligned to the stored
weight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .calibration import (
    CalibrationStats,
    HessianAccumulator,
    ScaledNormAccumulator,
)
from .errors import ConfigError, ContractError, NumericalError, ShapeError
from .model import MoEModel, model_forward
from .numerics import spd_inverse

__all__ = [
    "SparsityTarget",
    "SparsityMask",
    "PruneReport",
    "score_magnitude",
    "score_wanda",
    "score_moe_pruner",
    "score_sparsegpt",
    "select_mask",
    "obs_update",
    "reconstruction_error",
    "prune_model",
    "METHODS",
]

METHODS = ("magnitude", "wanda", "moe-pruner", "sparsegpt")


@dataclass(frozen=True)
class SparsityTarget:
    """Unstructured fraction p in [0,1) or semi-structured n_keep:m_group."""

    p: float | None = None
    n_keep: int | None = None
    m_group: int | None = None

    def __post_init__(self):
        if (self.p is None) == (self.n_keep is None):
            raise ConfigError("specify exactly one of unstructured p or n:m pattern")
        if self.p is not None and not 0.0 <= self.p < 1.0:
            raise ConfigError(f"sparsity fraction must be in [0, 1), got {self.p}")
        if self.n_keep is not None:
            if self.m_group is None or not 0 < self.n_keep < self.m_group:
                raise ConfigError(
                    f"n:m pattern needs 0 < n_keep < m_group, got {self.n_keep}:{self.m_group}"
                )

    @classmethod
    def unstructured(cls, p: float) -> "SparsityTarget":
        return cls(p=float(p))

    @classmethod
    def semi_structured(cls, n_keep: int, m_group: int) -> "SparsityTarget":
        return cls(n_keep=int(n_keep), m_group=int(m_group))

    @classmethod
    def parse(cls, text: str) -> "SparsityTarget":
        if ":" in text:
            n, m = text.split(":", 1)
            return cls.semi_structured(int(n), int(m))
        return cls.unstructured(float(text))

    def describe(self) -> str:
        return f"{self.n_keep}:{self.m_group}" if self.p is None else f"p={self.p}"


@dataclass
class SparsityMask:
    """Binary keep-mask (1 = kept, 0 = pruned) aligned to one weight matrix."""

    target: str
    bits: np.ndarray


def score_magnitude(w: np.ndarray) -> np.ndarray:
    """S_ij = |W_ij|."""
    return np.abs(w)


def score_wanda(w: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """S_ij = |W_ij| * ||X_j|| with norms over unscaled calibration inputs."""
    norms = np.asarray(norms, dtype=np.float64).ravel()
    if norms.size != w.shape[1]:
        raise ShapeError(f"norms length {norms.size} != weight columns {w.shape[1]}")
    return np.abs(w) * norms[None, :]


def score_moe_pruner(
    w: np.ndarray, scaled_norms: ScaledNormAccumulator, target: str | None = None
) -> np.ndarray:
    """S_ij = |W_ij| * ||X_j * Gate_j||: weight magnitude times the norm of
    gate-weighted input activations."""
    if target is not None and scaled_norms.target != target:
        raise ContractError(
            f"accumulator target {scaled_norms.target!r} does not match weight {target!r}"
        )
    if scaled_norms.sum_sq.size != w.shape[1]:
        raise ShapeError(
            f"accumulator width {scaled_norms.sum_sq.size} != weight columns {w.shape[1]}"
        )
    return np.abs(w) * scaled_norms.norms()[None, :]


def score_sparsegpt(
    w: np.ndarray, h: HessianAccumulator | np.ndarray, damp_frac: float = 0.01
) -> tuple[np.ndarray, np.ndarray]:
    """S_ij = W_ij^2 / [H'^-1]_jj with H' = H + damp_frac * mean(diag H) * I.

    Returns the scores and H'^-1 (the OBS update consumes its rows).
    damp_frac=0 is a test hook; the 0.01 default follows common practice.
    """
    if damp_frac < 0:
        raise ConfigError(f"damp_frac must be >= 0, got {damp_frac}")
    hm = h.h if isinstance(h, HessianAccumulator) else np.asarray(h, dtype=np.float64)
    if hm.shape != (w.shape[1], w.shape[1]):
        raise ShapeError(f"Hessian shape {hm.shape} != ({w.shape[1]}, {w.shape[1]})")
    damped = hm + damp_frac * float(np.mean(np.diag(hm))) * np.eye(hm.shape[0])
    h_inv = spd_inverse(damped)
    return (w * w) / np.diag(h_inv)[None, :], h_inv


def select_mask(scores: np.ndarray, target: SparsityTarget) -> np.ndarray:
    """Keep-mask per comparison group: per row for unstructured, per aligned
    m-column group for n:m. Ties prune the lower column index first."""
    rows, cols = scores.shape
    mask = np.ones((rows, cols), dtype=np.uint8)
    if target.p is not None:
        k = math.floor(target.p * cols)
        if k == 0:
            return mask
        order = np.argsort(scores, axis=1, kind="stable")
        np.put_along_axis(mask, order[:, :k], 0, axis=1)
        return mask
    m = target.m_group
    if cols % m != 0:
        raise ShapeError(f"column count {cols} not divisible by group size {m}")
    drop = m - target.n_keep
    grouped = scores.reshape(rows, cols // m, m)
    gmask = mask.reshape(rows, cols // m, m)
    order = np.argsort(grouped, axis=2, kind="stable")
    np.put_along_axis(gmask, order[:, :, :drop], 0, axis=2)
    return mask


def obs_update(w: np.ndarray, mask: np.ndarray, h_inv: np.ndarray) -> np.ndarray:
    """Sequential column sweep: zero each pruned weight and compensate the
    surviving weights to its right using rows of H^-1."""
    if mask.shape != w.shape:
        raise ShapeError(f"mask shape {mask.shape} != weight shape {w.shape}")
    if h_inv.shape != (w.shape[1], w.shape[1]):
        raise ShapeError(f"H^-1 shape {h_inv.shape} != ({w.shape[1]}, {w.shape[1]})")
    out = w.copy()
    for j in range(w.shape[1]):
        d = h_inv[j, j]
        if d <= 0:
            raise NumericalError(f"H^-1 diagonal entry {j} is {d}; not positive")
        pruned = mask[:, j] == 0
        if not pruned.any():
            continue
        err = out[pruned, j] / d
        out[np.ix_(pruned, np.arange(j + 1, w.shape[1]))] -= np.outer(err, h_inv[j, j + 1 :])
        out[pruned, j] = 0.0
    return out


def reconstruction_error(w: np.ndarray, w_pruned: np.ndarray, x: np.ndarray) -> float:
    """Frobenius norm of (W - W_pruned) X^T over calibration inputs x (tokens, d_in)."""
    if w.shape != w_pruned.shape:
        raise ShapeError(f"weight shapes differ: {w.shape} vs {w_pruned.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input width {x.shape[1]} != weight columns {w.shape[1]}")
    if x.shape[0] == 0:
        return 0.0
    return float(np.linalg.norm((w - w_pruned) @ x.T))


# ---------------------------------------------------------------------------
# Layer-by-layer orchestration
# ---------------------------------------------------------------------------


@dataclass
class PruneReport:
    method: str
    sparsity: str
    propagate: str
    targets: list[dict] = field(default_factory=list)
    totals: dict = field(default_factory=dict)

    def finalize(self) -> "PruneReport":
        total = sum(t["weights"] for t in self.targets)
        zeros = sum(t["zeros"] for t in self.targets)
        self.totals = {
            "weights": total,
            "zeros": zeros,
            "sparsity_achieved": (zeros / total) if total else 0.0,
            "recon_error_before_update": sum(t["recon_error_before_update"] for t in self.targets),
            "recon_error_after_update": sum(t["recon_error_after_update"] for t in self.targets),
        }
        return self

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "sparsity": self.sparsity,
            "propagate": self.propagate,
            "totals": self.totals,
            "targets": self.targets,
        }


def _layer_pass(model: MoEModel, sequences, layer: int):
    """One pass over the calibration sequences capturing layer `layer` only:
    accumulators plus stacked routed inputs per target of that layer."""
    cfg = model.config
    names = []
    for e in range(cfg.n_experts):
        base = f"layers.{layer}.experts.{e}"
        names += [(f"{base}.w_gate", cfg.d_model), (f"{base}.w_up", cfg.d_model),
                  (f"{base}.w_down", cfg.d_ff)]
    scaled = {n: ScaledNormAccumulator.empty(n, d) for n, d in names}
    unscaled = {n: ScaledNormAccumulator.empty(n, d) for n, d in names}
    hess = {n: HessianAccumulator.empty(n, d) for n, d in names}
    parts: dict[str, list[np.ndarray]] = {n: [] for n, _ in names}
    for seq in sequences:
        lt = model_forward(model, seq).layers[layer]
        for e in range(cfg.n_experts):
            idx = lt.expert_tokens[e]
            if idx.size == 0:
                continue
            g = lt.gates.values[idx, e]
            ones = np.ones(idx.size)
            base = f"layers.{layer}.experts.{e}"
            for tgt, x in ((f"{base}.w_gate", lt.moe_input[idx]),
                           (f"{base}.w_up", lt.moe_input[idx]),
                           (f"{base}.w_down", lt.expert_hidden[e])):
                scaled[tgt].add(x, g)
                unscaled[tgt].add(x, ones)
                hess[tgt].add(x)
                parts[tgt].append(x)
    captured = {n: (np.vstack(p) if p else np.zeros((0, d))) for (n, d), p in zip(names, parts.values())}
    return scaled, unscaled, hess, captured


def _score_target(
    method: str,
    wp: np.ndarray,
    name: str,
    scaled: dict[str, ScaledNormAccumulator],
    unscaled: dict[str, ScaledNormAccumulator],
    hess: dict[str, HessianAccumulator],
    damp_frac: float,
) -> tuple[np.ndarray, np.ndarray | None, str]:
    """Scores in pruning orientation, plus H^-1 when the method updates weights."""
    if method == "magnitude":
        return score_magnitude(wp), None, method
    if method == "wanda":
        return score_wanda(wp, unscaled[name].norms()), None, method
    if method == "moe-pruner":
        return score_moe_pruner(wp, scaled[name], target=name), None, method
    if method == "sparsegpt":
        if hess[name].tokens_seen == 0:
            # dead expert: the Hessian is all-zero and cannot be inverted even
            # with dampening; fall back to magnitude with no update
            return score_magnitude(wp), None, "sparsegpt(magnitude-fallback:no-tokens)"
        s, h_inv = score_sparsegpt(wp, hess[name], damp_frac)
        return s, h_inv, method
    raise ConfigError(f"unknown pruning method {method!r}; choose from {METHODS}")


def prune_model(
    model: MoEModel,
    stats: CalibrationStats,
    method: str,
    target: SparsityTarget,
    propagate: str = "dense",
    damp_frac: float = 0.01,
) -> tuple[MoEModel, dict[str, np.ndarray], PruneReport]:
    """Prune every expert matrix, layer by layer.

    propagate="dense" scores each layer from activations of the unpruned
    model (the calibration pass feeding `stats`); "recompute" re-runs the
    calibration inputs through the already-pruned layers before scoring.
    Attention and router matrices are untouched. Returns the pruned model, the
    keep-masks aligned to the stored weights, and a report.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown pruning method {method!r}; choose from {METHODS}")
    if propagate not in ("dense", "recompute"):
        raise ConfigError(f"propagate must be 'dense' or 'recompute', got {propagate!r}")
    stats.validate_for_model(model)
    for name in model.expert_param_names():
        if name not in stats.scaled:
            raise ContractError(f"stats are missing accumulator for target {name!r}")

    cfg = model.config
    pruned = model.copy()
    masks: dict[str, np.ndarray] = {}
    report = PruneReport(method=method, sparsity=target.describe(), propagate=propagate)

    for i in range(cfg.n_layers):
        source = model if propagate == "dense" else pruned
        layer_scaled, layer_unscaled, layer_hess, captured = _layer_pass(
            source, stats.sequences, i
        )
        if propagate == "dense":
            layer_scaled, layer_unscaled, layer_hess = stats.scaled, stats.unscaled, stats.hessians
        for e in range(cfg.n_experts):
            for part in ("w_gate", "w_up", "w_down"):
                name = f"layers.{i}.experts.{e}.{part}"
                wp = pruned.params[name].T.copy()  # (out, in) pruning orientation
                scores, h_inv, method_used = _score_target(
                    method, wp, name, layer_scaled, layer_unscaled, layer_hess, damp_frac
                )
                keep = select_mask(scores, target)
                x = captured[name]
                zeroed = wp * keep
                before = reconstruction_error(wp, zeroed, x)
                if h_inv is not None:
                    updated = obs_update(wp, keep, h_inv)
                else:
                    updated = zeroed
                after = reconstruction_error(wp, updated, x)
                pruned.params[name] = np.ascontiguousarray(updated.T)
                masks[name] = np.ascontiguousarray(keep.T.astype(np.uint8))
                report.targets.append({
                    "name": name,
                    "method": method_used,
                    "rows": int(wp.shape[0]),
                    "cols": int(wp.shape[1]),
                    "weights": int(wp.size),
                    "zeros": int(keep.size - int(keep.sum())),
                    "sparsity_achieved": 1.0 - float(keep.sum()) / keep.size,
                    "tokens_seen": int(layer_scaled[name].tokens_seen),
                    "recon_error_before_update": before,
                    "recon_error_after_update": after,
                })
    return pruned, masks, report.finalize()

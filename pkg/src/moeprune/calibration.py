"""Calibration statistics: gate-scaled input norms, plain input norms,
Hessians (X^T X), and dispatch frequencies, streamed over a token sample.

For each expert matrix there is one scaled and one unscaled norm accumulator
and one Hessian accumulator. w_gate/w_up see the MoE-layer input restricted to
the tokens routed to that expert; w_down sees the SwiGLU intermediate. Scaled
accumulators weight each token's features by that token's normalized gate
before squaring; Hessians always use unscaled inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .container import read_container, write_container
from .errors import InputError, ShapeError
from .model import MoEModel, ModelConfig, model_forward
from .numerics import SeededRng

__all__ = [
    "CalibrationSet",
    "ScaledNormAccumulator",
    "HessianAccumulator",
    "FrequencyTable",
    "CalibrationStats",
    "build_calibration_set",
    "collect",
    "export_stats",
    "import_stats",
    "corpus_tokens",
    "nonoverlapping_windows",
]

STATS_MAGIC = b"MOEPSTAT"


def corpus_tokens(corpus: bytes | str) -> np.ndarray:
    """Byte-level tokenization: UTF-8 text read as raw bytes, vocab 256."""
    if isinstance(corpus, str):
        corpus = corpus.encode("utf-8")
    return np.frombuffer(corpus, dtype=np.uint8).astype(np.intp)


def nonoverlapping_windows(corpus: bytes | str, seq_len: int) -> list[np.ndarray]:
    """Consecutive seq_len windows, tail remainder dropped."""
    toks = corpus_tokens(corpus)
    n = toks.size // seq_len
    if n == 0:
        raise InputError(f"corpus has {toks.size} tokens, shorter than seq_len={seq_len}")
    return [toks[i * seq_len : (i + 1) * seq_len] for i in range(n)]


@dataclass
class CalibrationSet:
    sequences: list[np.ndarray]
    nsamples: int
    seed: int


def build_calibration_set(corpus: bytes | str, nsamples: int, seq_len: int, seed: int) -> CalibrationSet:
    """nsamples windows of seq_len tokens at seeded-random offsets."""
    toks = corpus_tokens(corpus)
    if toks.size < seq_len:
        raise InputError(f"corpus has {toks.size} tokens, shorter than seq_len={seq_len}")
    if toks.size < nsamples * seq_len:
        raise InputError(
            f"corpus too short: {toks.size} tokens cannot supply "
            f"{nsamples} non-overlapping windows of {seq_len}"
        )
    rng = SeededRng(seed)
    offsets = rng.integers(0, toks.size - seq_len + 1, size=nsamples)
    seqs = [toks[o : o + seq_len].copy() for o in np.asarray(offsets)]
    return CalibrationSet(sequences=seqs, nsamples=nsamples, seed=seed)


@dataclass
class ScaledNormAccumulator:
    """Streaming sum over tokens of (x_j * g)^2 per input feature j."""

    target: str
    sum_sq: np.ndarray
    tokens_seen: int = 0

    @classmethod
    def empty(cls, target: str, d_in: int) -> "ScaledNormAccumulator":
        return cls(target=target, sum_sq=np.zeros(d_in))

    def add(self, x: np.ndarray, gates: np.ndarray) -> None:
        if x.shape[1] != self.sum_sq.size:
            raise ShapeError(f"{self.target}: input width {x.shape[1]} != {self.sum_sq.size}")
        scaled = x * gates[:, None]
        self.sum_sq += (scaled * scaled).sum(axis=0)
        self.tokens_seen += x.shape[0]

    def norms(self) -> np.ndarray:
        return np.sqrt(self.sum_sq)


@dataclass
class HessianAccumulator:
    """Streaming X^T X over routed (unscaled) calibration inputs."""

    target: str
    h: np.ndarray
    tokens_seen: int = 0

    @classmethod
    def empty(cls, target: str, d_in: int) -> "HessianAccumulator":
        return cls(target=target, h=np.zeros((d_in, d_in)))

    def add(self, x: np.ndarray) -> None:
        if x.shape[1] != self.h.shape[0]:
            raise ShapeError(f"{self.target}: input width {x.shape[1]} != {self.h.shape[0]}")
        self.h += x.T @ x
        self.tokens_seen += x.shape[0]


@dataclass
class FrequencyTable:
    """Per-layer dispatch counts f_i; argmax mode counts each token once
    (argmax of full router softmax), topk mode counts every selected expert."""

    counts: np.ndarray  # (n_layers, n_experts) int64
    mode: str
    total_tokens: int = 0

    @classmethod
    def empty(cls, n_layers: int, n_experts: int, mode: str) -> "FrequencyTable":
        if mode not in ("argmax", "topk"):
            raise InputError(f"unknown frequency mode {mode!r}")
        return cls(counts=np.zeros((n_layers, n_experts), dtype=np.int64), mode=mode)

    def layer_frequencies(self, i: int) -> np.ndarray:
        return self.counts[i]


@dataclass
class CalibrationStats:
    model_config: ModelConfig
    scaled: dict[str, ScaledNormAccumulator]
    unscaled: dict[str, ScaledNormAccumulator]
    hessians: dict[str, HessianAccumulator]
    frequencies: FrequencyTable
    sequences: list[np.ndarray]
    # X^T X over gate-weighted inputs: the non-paper hybrid behind the
    # --gate-scaled-hessian flag
    scaled_hessians: dict[str, HessianAccumulator] | None = None
    captured: dict[str, np.ndarray] | None = None

    def validate_for_model(self, model: MoEModel) -> None:
        mc, sc = model.config, self.model_config
        same = (
            mc.d_model == sc.d_model and mc.n_layers == sc.n_layers
            and mc.n_experts == sc.n_experts and mc.d_ff == sc.d_ff
            and mc.vocab_size == sc.vocab_size
        )
        if not same:
            raise ShapeError(
                f"stats collected for architecture {sc.to_dict()} do not match "
                f"model architecture {mc.to_dict()}"
            )


def _expert_targets(cfg: ModelConfig) -> list[tuple[str, int]]:
    """(target name, input width) for every expert matrix."""
    out = []
    for i in range(cfg.n_layers):
        for e in range(cfg.n_experts):
            base = f"layers.{i}.experts.{e}"
            out += [(f"{base}.w_gate", cfg.d_model), (f"{base}.w_up", cfg.d_model),
                    (f"{base}.w_down", cfg.d_ff)]
    return out


def collect(
    model: MoEModel,
    cal: CalibrationSet,
    freq_mode: str = "argmax",
    gate_override: float | None = None,
    capture_inputs: bool = False,
) -> CalibrationStats:
    """One streaming pass over the calibration set, fixed sequence order.

    gate_override forces every gate weight to a constant (router bypass test
    hook: with override 1.0 the scaled statistic degenerates to the plain
    input-norm statistic). capture_inputs retains the stacked routed inputs
    per target, for verification only.
    """
    cfg = model.config
    targets = _expert_targets(cfg)
    scaled = {n: ScaledNormAccumulator.empty(n, d) for n, d in targets}
    unscaled = {n: ScaledNormAccumulator.empty(n, d) for n, d in targets}
    hessians = {n: HessianAccumulator.empty(n, d) for n, d in targets}
    scaled_hessians = {n: HessianAccumulator.empty(n, d) for n, d in targets}
    freq = FrequencyTable.empty(cfg.n_layers, cfg.n_experts, freq_mode)
    caught: dict[str, list[np.ndarray]] | None = {n: [] for n, _ in targets} if capture_inputs else None

    for seq in cal.sequences:
        res = model_forward(model, seq)
        freq.total_tokens += len(seq)
        for i, layer in enumerate(res.layers):
            gm = layer.gates
            if freq.mode == "argmax":
                np.add.at(freq.counts[i], np.argmax(gm.probs, axis=1), 1)
            else:
                np.add.at(freq.counts[i], gm.selected.ravel(), 1)
            for e in range(cfg.n_experts):
                idx = layer.expert_tokens[e]
                if idx.size == 0:
                    continue
                g = gm.values[idx, e]
                if gate_override is not None:
                    g = np.full(idx.size, float(gate_override))
                ones = np.ones(idx.size)
                x_in = layer.moe_input[idx]
                hid = layer.expert_hidden[e]
                base = f"layers.{i}.experts.{e}"
                for tgt, x in ((f"{base}.w_gate", x_in), (f"{base}.w_up", x_in),
                               (f"{base}.w_down", hid)):
                    scaled[tgt].add(x, g)
                    unscaled[tgt].add(x, ones)
                    hessians[tgt].add(x)
                    scaled_hessians[tgt].add(x * g[:, None])
                    if caught is not None:
                        caught[tgt].append(x)

    captured = None
    if caught is not None:
        captured = {
            n: (np.vstack(parts) if parts else np.zeros((0, d)))
            for (n, d), parts in zip(targets, caught.values())
        }
    return CalibrationStats(
        model_config=cfg, scaled=scaled, unscaled=unscaled, hessians=hessians,
        frequencies=freq, sequences=list(cal.sequences), captured=captured,
    )


# ---------------------------------------------------------------------------
# Stats file (magic MOEPSTAT): JSON manifest + raw little-endian float64
# ---------------------------------------------------------------------------


def export_stats(stats: CalibrationStats, path) -> None:
    """Lossless round-trip serialization of all accumulators."""
    chunks: list[bytes] = []
    offset = 0
    entries = []
    for name in stats.scaled:
        arrays = {
            "scaled": stats.scaled[name].sum_sq,
            "unscaled": stats.unscaled[name].sum_sq,
            "hessian": stats.hessians[name].h,
        }
        entry: dict = {
            "name": name,
            "d_in": int(stats.scaled[name].sum_sq.size),
            "tokens_seen": int(stats.scaled[name].tokens_seen),
        }
        for key, arr in arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            entry[f"{key}_offset"] = offset
            entry[f"{key}_shape"] = list(arr.shape)
            chunks.append(raw)
            offset += len(raw)
        entries.append(entry)
    manifest = {
        "kind": "calibration-stats",
        "model_config": stats.model_config.to_dict(),
        "targets": entries,
        "freq_mode": stats.frequencies.mode,
        "freq_counts": stats.frequencies.counts.tolist(),
        "freq_total_tokens": int(stats.frequencies.total_tokens),
        "sequences": [s.tolist() for s in stats.sequences],
    }
    write_container(path, STATS_MAGIC, manifest, b"".join(chunks))


def import_stats(path) -> CalibrationStats:
    manifest, payload = read_container(path, STATS_MAGIC)
    try:
        cfg = ModelConfig.from_dict(manifest["model_config"])
        scaled: dict[str, ScaledNormAccumulator] = {}
        unscaled: dict[str, ScaledNormAccumulator] = {}
        hessians: dict[str, HessianAccumulator] = {}
        for entry in manifest["targets"]:
            name = entry["name"]
            tokens = int(entry["tokens_seen"])
            arrs = {}
            for key in ("scaled", "unscaled", "hessian"):
                shape = tuple(entry[f"{key}_shape"])
                n = int(np.prod(shape))
                off = entry[f"{key}_offset"]
                raw = payload[off : off + 8 * n]
                if len(raw) != 8 * n:
                    raise ShapeError(f"payload truncated for target {name}")
                arrs[key] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            scaled[name] = ScaledNormAccumulator(name, arrs["scaled"], tokens)
            unscaled[name] = ScaledNormAccumulator(name, arrs["unscaled"], tokens)
            hessians[name] = HessianAccumulator(name, arrs["hessian"], tokens)
        freq = FrequencyTable(
            counts=np.asarray(manifest["freq_counts"], dtype=np.int64),
            mode=manifest["freq_mode"],
            total_tokens=int(manifest["freq_total_tokens"]),
        )
        sequences = [np.asarray(s, dtype=np.intp) for s in manifest["sequences"]]
    except (KeyError, TypeError, ValueError) as exc:
        from .errors import FormatError

        raise FormatError(f"{path}: malformed stats manifest: {exc}") from exc
    return CalibrationStats(
        model_config=cfg, scaled=scaled, unscaled=unscaled, hessians=hessians,
        frequencies=freq, sequences=sequences,
    )

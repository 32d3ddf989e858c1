"""Forward-pass-only importance estimation.

Width axes (attention heads, MLP neurons, embedding channels) are scored
from activations captured on a calibration batch; depth is scored either by
the perplexity of the model with one block removed or by block influence
(one minus the expected input/output cosine similarity). No API here ever
records onto a gradient tape — callers inside a tape context get an error.

Per-head and per-neuron scores are ranked within their own layer; embedding
channel scores are aggregated per LayerNorm site and then summed across all
sites network-wide, since the residual stream shares channel identity.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, PruneError
from .model import CaptureSpec, Model, forward, perplexity

_AGG_ALIASES = {"mean": "mean_abs", "var": "variance", "l2": "l2"}
_AGG_NAMES = ("mean_abs", "l2", "variance")


def _canon_agg(name: str) -> str:
    name = _AGG_ALIASES.get(name, name)
    if name not in _AGG_NAMES:
        raise ConfigError(f"unknown aggregation function {name!r}; use {_AGG_NAMES}")
    return name


def _apply_agg(name: str, values: np.ndarray, axis: int) -> np.ndarray:
    if name == "mean_abs":
        return np.abs(values).mean(axis=axis)
    if name == "l2":
        return np.sqrt((values * values).sum(axis=axis))
    return values.var(axis=axis)


@dataclass(frozen=True)
class AggregationSpec:
    """Reduction pair: ``seq_fn`` collapses the sequence axis per sample,
    ``batch_fn`` then collapses the sample axis."""

    batch_fn: str = "l2"
    seq_fn: str = "mean_abs"

    def __post_init__(self):
        object.__setattr__(self, "batch_fn", _canon_agg(self.batch_fn))
        object.__setattr__(self, "seq_fn", _canon_agg(self.seq_fn))

    def to_dict(self):
        return {"batch_fn": self.batch_fn, "seq_fn": self.seq_fn}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def aggregate(scores: np.ndarray, spec: AggregationSpec) -> float:
    """Collapse per-token scores ``[batch, seq]`` to one scalar."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.size == 0:
        raise DataError("aggregate expects a non-empty [batch, seq] array")
    per_sample = _apply_agg(spec.seq_fn, scores, axis=1)
    return float(_apply_agg(spec.batch_fn, per_sample, axis=0))


def _aggregate_channels(values: np.ndarray, spec: AggregationSpec) -> np.ndarray:
    """Vectorized :func:`aggregate` over the trailing channel axis of
    ``[batch, seq, channels]``."""
    values = values.astype(np.float64)
    per_sample = _apply_agg(spec.seq_fn, values, axis=1)  # [B, C]
    return _apply_agg(spec.batch_fn, per_sample, axis=0)  # [C]


def _require_no_tape(op: str) -> None:
    if ad.active_tape() is not None:
        raise ConfigError(
            f"{op} is forward-only and must not run under an active gradient tape"
        )


def _captured_forward(model: Model, calib: np.ndarray, capture: CaptureSpec, chunk=32):
    """Run the calibration set through the model in chunks, concatenating
    captured arrays along the batch axis."""
    calib = np.asarray(calib)
    if calib.ndim != 2 or calib.shape[0] == 0:
        raise DataError("calibration set must be a non-empty [n, seq] token array")
    records = []
    for i in range(0, calib.shape[0], chunk):
        _, rec = forward(model, calib[i : i + chunk], capture=capture)
        records.append(rec)
    return records


def head_importance(
    model: Model, calib: np.ndarray, spec: AggregationSpec
) -> np.ndarray:
    """Per-token L2 norm of each head's output vector (before the output
    projection), aggregated to ``[layer, head]`` scores."""
    _require_no_tape("head_importance")
    records = _captured_forward(model, calib, CaptureSpec(attn_head_out=True))
    layers, heads = model.config.num_layers, model.config.num_heads
    scores = np.zeros((layers, heads))
    for layer in range(layers):
        out = np.concatenate([r.attn_head_out[layer].data for r in records])
        norms = np.sqrt((out.astype(np.float64) ** 2).sum(axis=-1))  # [B,S,H]
        scores[layer] = _aggregate_channels(norms, spec)
    return scores


def neuron_importance(
    model: Model, calib: np.ndarray, spec: AggregationSpec
) -> np.ndarray:
    """Pre-activation of each MLP hidden channel, aggregated per layer."""
    _require_no_tape("neuron_importance")
    records = _captured_forward(model, calib, CaptureSpec(mlp_pre=True))
    layers = model.config.num_layers
    scores = np.zeros((layers, model.config.d_hidden))
    for layer in range(layers):
        pre = np.concatenate([r.mlp_pre[layer].data for r in records])
        scores[layer] = _aggregate_channels(pre, spec)
    return scores


def emb_importance(
    model: Model, calib: np.ndarray, spec: AggregationSpec
) -> np.ndarray:
    """Per-channel score of every LayerNorm output, aggregated per site and
    summed over all sites (both block norms plus the final norm)."""
    _require_no_tape("emb_importance")
    records = _captured_forward(
        model, calib, CaptureSpec(ln1=True, ln2=True, final_ln=True)
    )
    total = np.zeros(model.config.d_model)
    for layer in range(model.config.num_layers):
        for field in ("ln1", "ln2"):
            states = np.concatenate(
                [getattr(r, field)[layer].data for r in records]
            )
            total += _aggregate_channels(states, spec)
    final = np.concatenate([r.final_ln.data for r in records])
    total += _aggregate_channels(final, spec)
    return total


def layer_importance_ppl(model: Model, calib: np.ndarray) -> np.ndarray:
    """Perplexity of the model with each single block removed; higher means
    the block mattered more. One evaluation sweep per layer."""
    _require_no_tape("layer_importance_ppl")
    if model.config.num_layers < 2:
        raise PruneError("layer importance needs at least two layers")
    return np.array(
        [
            perplexity(model, calib, skip_layers={i})
            for i in range(model.config.num_layers)
        ]
    )


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a.reshape(-1, a.shape[-1]).astype(np.float64)
    b = b.reshape(-1, b.shape[-1]).astype(np.float64)
    num = (a * b).sum(axis=-1)
    den = np.linalg.norm(a, axis=-1) * np.linalg.norm(b, axis=-1)
    return num / np.maximum(den, np.finfo(np.float64).tiny)


def layer_importance_bi(model: Model, calib: np.ndarray) -> np.ndarray:
    """Block influence: 1 - E[cos(X_i, X_{i+1})] over all (sample, token)
    rows. All layers come from a single forward pass."""
    _require_no_tape("layer_importance_bi")
    records = _captured_forward(model, calib, CaptureSpec(block_inputs=True))
    layers = model.config.num_layers
    scores = np.zeros(layers)
    for i in range(layers):
        cos = np.concatenate(
            [_cosine_rows(r.block_inputs[i].data, r.block_inputs[i + 1].data)
             for r in records]
        )
        scores[i] = 1.0 - cos.mean()
    return scores


def block_bi(model: Model, calib: np.ndarray, start: int, length: int) -> float:
    """Block influence of ``length`` contiguous blocks starting at ``start``."""
    _require_no_tape("block_bi")
    n = model.config.num_layers
    if length < 1 or start < 0 or start + length > n:
        raise PruneError(
            f"block ({start}, {length}) out of range for {n} layers"
        )
    records = _captured_forward(model, calib, CaptureSpec(block_inputs=True))
    cos = np.concatenate(
        [_cosine_rows(r.block_inputs[start].data, r.block_inputs[start + length].data)
         for r in records]
    )
    return float(1.0 - cos.mean())


@dataclass
class ImportanceReport:
    """Score vectors per axis plus the spec and calibration fingerprint.

    Rankings are derived, not stored: stable argsort, descending score,
    lower index first on ties.
    """

    head_scores: np.ndarray  # [layer, head]
    neuron_scores: np.ndarray  # [layer, channel]
    emb_scores: np.ndarray  # [channel]
    layer_scores_ppl: np.ndarray | None
    layer_scores_bi: np.ndarray | None
    block_bi_scores: dict[tuple[int, int], float]
    agg: AggregationSpec
    calibration_checksum: str

    @staticmethod
    def _rank_desc(scores: np.ndarray) -> np.ndarray:
        # Stable sort on negated scores: descending, ties by lower index.
        return np.argsort(-np.asarray(scores), kind="stable")

    def heads_ranked(self, layer: int) -> np.ndarray:
        return self._rank_desc(self.head_scores[layer])

    def neurons_ranked(self, layer: int) -> np.ndarray:
        return self._rank_desc(self.neuron_scores[layer])

    def emb_ranked(self) -> np.ndarray:
        return self._rank_desc(self.emb_scores)

    def layers_ranked(self, metric: str = "ppl") -> np.ndarray:
        scores = self.layer_scores_ppl if metric == "ppl" else self.layer_scores_bi
        if scores is None:
            raise DataError(f"report is missing {metric} layer scores")
        return self._rank_desc(scores)

    def to_json(self) -> str:
        payload = {
            "aggregation": self.agg.to_dict(),
            "calibration_checksum": self.calibration_checksum,
            "head_scores": self.head_scores.tolist(),
            "neuron_scores": self.neuron_scores.tolist(),
            "emb_scores": self.emb_scores.tolist(),
            "layer_scores_ppl": (
                None if self.layer_scores_ppl is None else self.layer_scores_ppl.tolist()
            ),
            "layer_scores_bi": (
                None if self.layer_scores_bi is None else self.layer_scores_bi.tolist()
            ),
            "block_bi": [
                {"start": s, "length": ln, "score": v}
                for (s, ln), v in sorted(self.block_bi_scores.items())
            ],
            "rankings": {
                "heads": [self.heads_ranked(i).tolist() for i in range(len(self.head_scores))],
                "neurons": [self.neurons_ranked(i).tolist() for i in range(len(self.neuron_scores))],
                "emb": self.emb_ranked().tolist(),
            },
        }
        return json.dumps(payload, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "ImportanceReport":
        d = json.loads(text)
        return cls(
            head_scores=np.array(d["head_scores"]),
            neuron_scores=np.array(d["neuron_scores"]),
            emb_scores=np.array(d["emb_scores"]),
            layer_scores_ppl=(
                None if d["layer_scores_ppl"] is None else np.array(d["layer_scores_ppl"])
            ),
            layer_scores_bi=(
                None if d["layer_scores_bi"] is None else np.array(d["layer_scores_bi"])
            ),
            block_bi_scores={
                (e["start"], e["length"]): e["score"] for e in d.get("block_bi", [])
            },
            agg=AggregationSpec.from_dict(d["aggregation"]),
            calibration_checksum=d["calibration_checksum"],
        )

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def load(cls, path: str) -> "ImportanceReport":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())


def calibration_checksum(calib: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(calib, dtype="<i8").tobytes()).hexdigest()


def compute_importance_report(
    model: Model,
    calib: np.ndarray,
    spec: AggregationSpec | None = None,
    include_ppl: bool = True,
    include_bi: bool = True,
    blocks: list[tuple[int, int]] | None = None,
) -> ImportanceReport:
    """Score every axis in one go. The per-layer perplexity sweep dominates
    the cost; disable it when only width axes are needed."""
    spec = spec or AggregationSpec()
    return ImportanceReport(
        head_scores=head_importance(model, calib, spec),
        neuron_scores=neuron_importance(model, calib, spec),
        emb_scores=emb_importance(model, calib, spec),
        layer_scores_ppl=layer_importance_ppl(model, calib) if include_ppl else None,
        layer_scores_bi=layer_importance_bi(model, calib) if include_bi else None,
        block_bi_scores={
            (s, ln): block_bi(model, calib, s, ln) for (s, ln) in (blocks or [])
        },
        agg=spec,
        calibration_checksum=calibration_checksum(calib),
    )


_ITER_AXES = ("heads", "neurons", "emb", "layers")


def iterative_importance(
    model: Model,
    calib: np.ndarray,
    axis_targets: dict[str, int],
    T: int,
    spec: AggregationSpec | None = None,
    depth_metric: str = "ppl",
) -> Model:
    """Alternate importance estimation and partial pruning for ``T`` rounds.

    Each axis shrinks by (source - target) / T per round, which must divide
    evenly. ``T=1`` is exactly single-shot pruning.
    """
    from .pruning import apply_candidate, resolve_query_groups  # deferred: pruning imports this module

    spec = spec or AggregationSpec()
    if T < 1:
        raise ConfigError("iteration count T must be >= 1")
    unknown = set(axis_targets) - set(_ITER_AXES)
    if unknown:
        raise ConfigError(f"unknown pruning axes {sorted(unknown)}; use {_ITER_AXES}")
    cfg = model.config
    current = {
        "heads": cfg.num_heads,
        "neurons": cfg.d_hidden,
        "emb": cfg.d_model,
        "layers": cfg.num_layers,
    }
    steps = {}
    for axis, target in axis_targets.items():
        delta = current[axis] - target
        if delta < 0:
            raise PruneError(f"{axis} target {target} exceeds source {current[axis]}")
        if delta % T != 0:
            raise PruneError(
                f"{axis} reduction {delta} is not divisible by T={T}"
            )
        steps[axis] = delta // T
    for _ in range(T):
        for axis in steps:
            current[axis] -= steps[axis]
        target_cfg = model.config.with_(
            num_heads=current["heads"],
            d_hidden=current["neurons"],
            d_model=current["emb"],
            num_layers=current["layers"],
            num_query_groups=resolve_query_groups(
                model.config.num_query_groups, current["heads"]
            ),
        )
        if target_cfg == model.config:
            continue
        needs_depth = target_cfg.num_layers < model.config.num_layers
        report = compute_importance_report(
            model,
            calib,
            spec,
            include_ppl=needs_depth and depth_metric == "ppl",
            include_bi=needs_depth and depth_metric == "bi",
        )
        model = apply_candidate(model, target_cfg, report, depth_metric=depth_metric)
    return model

"""Forward-only toy decoder-only transformer.

Hosts dense or factored linear layers in named slots, captures per-layer
output statistics during calibration passes, applies compression plans, and
scores perplexity. Hidden states are column batches (hidden x tokens), so a
layer slot is applied as W @ h, matching the factored B(A h) contract.

Synthesis is deterministic from a seed. The spectral-decay initializer gives
each linear weight power-law singular values, standing in for the low-rank
output structure trained transformers exhibit.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .decompose import DenseLayer, FactoredLayer, LayerGroup, decompose_afm, decompose_group, decompose_svd
from .errors import CalibrationError, ShapeError, UsageError
from .linalg import OutputStats
from .planner import (
    ArchDescriptor,
    CompressionPlan,
    GroupSpec,
    group_layers,
    tensor_census,
)

__all__ = [
    "CalibrationCapture",
    "TokenCorpus",
    "ToyModel",
    "apply_plan",
    "calibrate",
    "count_params",
    "perplexity",
    "synth_corpus",
    "synth_model",
]

_LN_EPS = 1e-5


@dataclass
class TokenCorpus:
    """Token-id sequences over a fixed vocabulary."""

    vocab: int
    sequences: list[np.ndarray]

    def __post_init__(self):
        for i, seq in enumerate(self.sequences):
            if len(seq) and int(seq.max()) >= self.vocab:
                raise UsageError(
                    f"corpus sequence {i} contains token {int(seq.max())} >= vocab {self.vocab}"
                )

    def total_tokens(self) -> int:
        return sum(len(s) for s in self.sequences)

    def filtered(self, min_tokens: int) -> "TokenCorpus":
        """Drop sequences shorter than min_tokens (calibration-style filtering)."""
        return TokenCorpus(
            vocab=self.vocab,
            sequences=[s for s in self.sequences if len(s) >= min_tokens],
        )


def synth_corpus(
    vocab: int,
    n_tokens: int,
    seed: int,
    seq_len: int = 256,
    zipf_exponent: float = 1.0,
) -> TokenCorpus:
    """Deterministic synthetic corpus with a roughly Zipfian unigram shape.

    Token id equals frequency rank (0 = most frequent). Each step either
    resamples from the global Zipf weights or makes a short Markov hop to a
    nearby id, so sequences carry local structure without disturbing the
    marginal much.
    """
    if vocab < 4:
        raise UsageError(f"vocab must be >= 4, got {vocab}")
    if n_tokens < 1:
        raise UsageError("n_tokens must be positive")
    rng = np.random.default_rng(seed)
    global_w = (np.arange(1, vocab + 1, dtype=np.float64)) ** (-zipf_exponent)
    global_cdf = np.cumsum(global_w / global_w.sum())
    hop = 16
    local_w = (np.arange(1, hop + 1, dtype=np.float64)) ** (-zipf_exponent)
    local_cdf = np.cumsum(local_w / local_w.sum())
    mix = 0.25

    takes_hop = rng.random(n_tokens) < mix
    global_draw = np.searchsorted(global_cdf, rng.random(n_tokens))
    hop_draw = np.searchsorted(local_cdf, rng.random(n_tokens)) + 1

    tokens = np.empty(n_tokens, dtype=np.int32)
    cur = int(global_draw[0])
    tokens[0] = cur
    for t in range(1, n_tokens):
        if takes_hop[t]:
            cur = (cur + int(hop_draw[t])) % vocab
        else:
            cur = int(global_draw[t])
        tokens[t] = cur

    sequences = [
        tokens[i : i + seq_len].copy() for i in range(0, n_tokens, seq_len)
    ]
    return TokenCorpus(vocab=vocab, sequences=sequences)


@dataclass
class CalibrationCapture:
    """Output statistics per targeted layer or group, from one calibration pass."""

    stats: dict[str, OutputStats]

    def token_count(self) -> int:
        counts = {s.count for s in self.stats.values()}
        if len(counts) > 1:
            raise CalibrationError(f"capture has unequal token counts per target: {counts}")
        return counts.pop() if counts else 0

    def merge(self, other: "CalibrationCapture") -> "CalibrationCapture":
        if set(self.stats) != set(other.stats):
            raise CalibrationError("cannot merge captures with different target sets")
        return CalibrationCapture(
            stats={k: self.stats[k].merge(other.stats[k]) for k in self.stats}
        )


def _gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation, good to ~1e-3 and dependency-free
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x * x * x)))


def _silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def _layer_norm(h: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mean = h.mean(axis=0, keepdims=True)
    var = h.var(axis=0, keepdims=True)
    return ((h - mean) / np.sqrt(var + _LN_EPS)) * weight[:, None] + bias[:, None]


def _softmax_causal(scores: np.ndarray) -> np.ndarray:
    """Row softmax of (heads, T, T) scores with the upper triangle masked out."""
    t = scores.shape[-1]
    mask = np.triu(np.ones((t, t), dtype=bool), k=1)
    scores = np.where(mask[None, :, :], -np.inf, scores)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class ToyModel:
    """Descriptor plus realized tensors: aux arrays and linear-layer slots."""

    arch: ArchDescriptor
    aux: dict[str, np.ndarray]
    slots: dict[str, DenseLayer | FactoredLayer]

    def with_slot(self, name: str, layer: DenseLayer | FactoredLayer) -> "ToyModel":
        if name not in self.slots:
            raise UsageError(f"unknown layer slot {name!r}")
        slots = dict(self.slots)
        slots[name] = layer
        return ToyModel(arch=self.arch, aux=self.aux, slots=slots)

    def _attention(self, u: np.ndarray, i: int, capture: dict | None) -> np.ndarray:
        arch = self.arch
        d, nh, dh = arch.hidden, arch.n_heads, arch.head_dim
        t = u.shape[1]
        qkv = self.slots[f"blocks.{i}.attn_qkv"].forward(u)
        _record(capture, f"blocks.{i}.attn_qkv", qkv)
        q = qkv[:d].reshape(nh, dh, t)
        if arch.attention == "mqa":
            k = np.broadcast_to(qkv[d : d + dh], (nh, dh, t))
            v = np.broadcast_to(qkv[d + dh : d + 2 * dh], (nh, dh, t))
        else:
            k = qkv[d : 2 * d].reshape(nh, dh, t)
            v = qkv[2 * d : 3 * d].reshape(nh, dh, t)
        scores = np.einsum("hdt,hds->hts", q, k) / math.sqrt(dh)
        attn = _softmax_causal(scores)
        mixed = np.einsum("hts,hds->hdt", attn, v).reshape(d, t)
        out = self.slots[f"blocks.{i}.attn_out"].forward(mixed.astype(np.float32))
        _record(capture, f"blocks.{i}.attn_out", out)
        return out

    def _mlp(self, u: np.ndarray, i: int, capture: dict | None) -> np.ndarray:
        if self.arch.mlp == "swiglu":
            gate_l = self.slots[f"blocks.{i}.mlp_gate"]
            up_l = self.slots[f"blocks.{i}.mlp_up"]
            if (
                isinstance(gate_l, FactoredLayer)
                and isinstance(up_l, FactoredLayer)
                and gate_l.a is up_l.a
            ):
                # grouped factorization: one shared bottleneck product
                z = gate_l.a @ u
                gate = gate_l.b_mat @ z
                if gate_l.bias_tilde is not None:
                    gate = gate + gate_l.bias_tilde[:, None]
                up = up_l.b_mat @ z
                if up_l.bias_tilde is not None:
                    up = up + up_l.bias_tilde[:, None]
            else:
                gate = gate_l.forward(u)
                up = up_l.forward(u)
            _record(capture, f"blocks.{i}.mlp_gate", gate)
            _record(capture, f"blocks.{i}.mlp_up", up)
            if capture is not None and f"blocks.{i}.mlp_gate_up" in capture:
                _record(
                    capture,
                    f"blocks.{i}.mlp_gate_up",
                    np.concatenate([gate, up], axis=0),
                )
            hidden = _silu(gate) * up
        else:
            up = self.slots[f"blocks.{i}.mlp_up"].forward(u)
            _record(capture, f"blocks.{i}.mlp_up", up)
            hidden = _gelu(up)
        down = self.slots[f"blocks.{i}.mlp_down"].forward(hidden.astype(np.float32))
        _record(capture, f"blocks.{i}.mlp_down", down)
        return down

    def forward(self, tokens: np.ndarray, capture: dict | None = None) -> np.ndarray:
        """Logits (vocab x T) for a token sequence; causal by construction."""
        arch = self.arch
        tokens = np.asarray(tokens)
        if tokens.ndim != 1 or len(tokens) == 0:
            raise UsageError("forward expects a non-empty 1-D token array")
        t = len(tokens)
        if int(tokens.max()) >= arch.vocab or int(tokens.min()) < 0:
            raise UsageError(
                f"token id out of range for vocab {arch.vocab}: "
                f"[{int(tokens.min())}, {int(tokens.max())}]"
            )
        if arch.context == 0:
            raise UsageError(
                f"arch {arch.name} has no positional table (context=0); "
                "forward inference needs a positional context"
            )
        if t > arch.context:
            raise UsageError(f"sequence length {t} exceeds context {arch.context}")

        h = self.aux["emb.tok"][tokens].T + self.aux["emb.pos"][:t].T
        h = h.astype(np.float32)
        for i in range(arch.n_layers):
            p = f"blocks.{i}"
            if arch.block_style == "sequential":
                u = _layer_norm(h, self.aux[f"{p}.ln1.weight"], self.aux[f"{p}.ln1.bias"])
                h = h + self._attention(u.astype(np.float32), i, capture)
                u = _layer_norm(h, self.aux[f"{p}.ln2.weight"], self.aux[f"{p}.ln2.bias"])
                h = h + self._mlp(u.astype(np.float32), i, capture)
            else:
                u = _layer_norm(h, self.aux[f"{p}.ln1.weight"], self.aux[f"{p}.ln1.bias"])
                u = u.astype(np.float32)
                h = h + self._attention(u, i, capture) + self._mlp(u, i, capture)
        h = _layer_norm(h, self.aux["final_ln.weight"], self.aux["final_ln.bias"])
        h = h.astype(np.float32)
        if self.arch.tied_embedding:
            logits = self.aux["emb.tok"] @ h
        else:
            logits = self.aux["lm_head.w"] @ h
            if "lm_head.bias" in self.aux:
                logits = logits + self.aux["lm_head.bias"][:, None]
        return logits.astype(np.float32)


def _record(capture: dict | None, name: str, out: np.ndarray) -> None:
    if capture is not None and name in capture:
        capture[name] = capture[name].update(out.astype(np.float64))


def count_params(model: ToyModel) -> int:
    """Realized parameter count; arrays shared between slots count once."""
    seen: set[int] = set()
    total = 0
    arrays: list[np.ndarray] = list(model.aux.values())
    for slot in model.slots.values():
        if isinstance(slot, DenseLayer):
            arrays.append(slot.w)
            if slot.bias is not None:
                arrays.append(slot.bias)
        else:
            arrays.append(slot.a)
            arrays.append(slot.b_mat)
            if slot.bias_tilde is not None:
                arrays.append(slot.bias_tilde)
    for arr in arrays:
        if id(arr) not in seen:
            seen.add(id(arr))
            total += arr.size
    return total


def _parse_init(init: str) -> tuple[str, float]:
    if init == "gaussian":
        return "gaussian", 0.0
    if init.startswith("spectral-decay"):
        _, _, arg = init.partition(":")
        p = float(arg) if arg else 2.0
        if p < 0:
            raise UsageError(f"spectral-decay exponent must be >= 0, got {p}")
        return "spectral-decay", p
    raise UsageError(f"unknown init {init!r}; use gaussian or spectral-decay:P")


def _decay_weight(rng: np.random.Generator, d1: int, d2: int, p: float) -> np.ndarray:
    """d1 x d2 weight with singular values proportional to i^-p."""
    k = min(d1, d2)
    q1, _ = np.linalg.qr(rng.standard_normal((d1, k)))
    q2, _ = np.linalg.qr(rng.standard_normal((d2, k)))
    sigma = np.arange(1, k + 1, dtype=np.float64) ** (-p)
    w = (q1 * sigma[None, :]) @ q2.T
    # match the Frobenius norm a fan-in gaussian init would have
    return w * (math.sqrt(d1) / np.linalg.norm(sigma))


def synth_model(arch: ArchDescriptor, seed: int, init: str = "gaussian") -> ToyModel:
    """Deterministic random model at desk scale.

    init is "gaussian" or "spectral-decay:P" (default P=2.0); spectral decay
    shapes every linear weight's spectrum as i^-P so layer outputs concentrate
    in a low-dimensional subspace, the way trained models behave.
    """
    kind, p = _parse_init(init)
    if arch.hidden * max(arch.mlp_dim, arch.qkv_rows) > 64_000_000:
        raise UsageError(
            f"arch {arch.name} is too large to synthesize; this generator is for "
            "desk-scale experiments"
        )
    rng = np.random.default_rng(seed)
    slots_spec, aux_spec = tensor_census(arch)
    aux: dict[str, np.ndarray] = {}
    for spec in aux_spec:
        if spec.name.endswith(".weight"):
            aux[spec.name] = np.ones(spec.shape, dtype=np.float32)
        elif spec.name.endswith(".bias") and spec.name != "lm_head.bias":
            aux[spec.name] = np.zeros(spec.shape, dtype=np.float32)
        elif spec.name == "lm_head.bias":
            aux[spec.name] = np.zeros(spec.shape, dtype=np.float32)
        else:
            scale = 1.0 / math.sqrt(arch.hidden)
            aux[spec.name] = (rng.standard_normal(spec.shape) * scale).astype(np.float32)
    slots: dict[str, DenseLayer | FactoredLayer] = {}
    for spec in slots_spec:
        if kind == "gaussian":
            w = rng.standard_normal((spec.d1, spec.d2)) / math.sqrt(spec.d2)
        else:
            w = _decay_weight(rng, spec.d1, spec.d2, p)
        bias = None
        if spec.bias:
            bias = (rng.standard_normal(spec.d1) * 0.01).astype(np.float32)
        slots[spec.name] = DenseLayer(name=spec.name, w=w.astype(np.float32), bias=bias)
    return ToyModel(arch=arch, aux=aux, slots=slots)


def _group_menu(arch: ArchDescriptor) -> dict[str, GroupSpec]:
    return {g.name: g for g in group_layers(arch)}


def _parse_target(model: ToyModel, target: str) -> tuple[int, GroupSpec]:
    parts = target.split(".")
    menu = _group_menu(model.arch)
    if len(parts) != 3 or parts[0] != "blocks":
        raise UsageError(f"bad target name {target!r}; expected blocks.<i>.<group>")
    try:
        idx = int(parts[1])
    except ValueError:
        raise UsageError(f"bad block index in target {target!r}") from None
    if not 0 <= idx < model.arch.n_layers:
        raise UsageError(f"target {target!r}: block index out of range")
    if parts[2] not in menu:
        raise UsageError(
            f"target {target!r}: unknown group {parts[2]!r}; choose from {sorted(menu)}"
        )
    return idx, menu[parts[2]]


def calibrate(
    model: ToyModel,
    corpus: TokenCorpus,
    targets: list[str],
    max_tokens: int | None = None,
) -> CalibrationCapture:
    """Run the calibration corpus and accumulate per-token output statistics
    for every named layer/group target."""
    if not targets:
        raise UsageError("calibrate: empty target list")
    capture: dict[str, OutputStats] = {}
    for target in targets:
        idx, spec = _parse_target(model, target)
        capture[target] = OutputStats.empty(spec.d1)
        if max_tokens is not None and max_tokens < spec.d1:
            warnings.warn(
                f"max_tokens={max_tokens} is below the output dim {spec.d1} of "
                f"{target}; its covariance will be rank-deficient",
                stacklevel=2,
            )
    budget = max_tokens if max_tokens is not None else corpus.total_tokens()
    used = 0
    for seq in corpus.sequences:
        if used >= budget:
            break
        take = min(len(seq), budget - used, model.arch.context)
        if take == 0:
            continue
        model.forward(seq[:take], capture=capture)
        used += take
    if used == 0:
        raise UsageError("calibrate: corpus contributed no tokens")
    return CalibrationCapture(stats=capture)


def apply_plan(
    model: ToyModel,
    plan: CompressionPlan,
    capture: CalibrationCapture | None = None,
    bias_mode: str = "exact",
    centering: str = "centered",
) -> ToyModel:
    """Replace every planned slot with its factored layer; returns a new model.

    Non-targeted tensors are shared with the input model, hence bit-identical.
    """
    if plan.arch.to_dict() != model.arch.to_dict():
        raise ShapeError(
            f"plan was built for arch {plan.arch.name!r}, model is {model.arch.name!r} "
            "or differs in configuration"
        )
    new_slots = dict(model.slots)
    for entry in plan.entries:
        idx, spec = _parse_target(model, entry.target)
        member_names = [f"blocks.{idx}.{suffix}" for suffix in spec.member_suffixes]
        members = []
        for name in member_names:
            slot = new_slots[name]
            if not isinstance(slot, DenseLayer):
                raise ShapeError(f"plan mismatch: slot {name} is already factored")
            members.append(slot)
        stacked_d1 = sum(m.d1 for m in members)
        if (stacked_d1, members[0].d2) != (entry.d1, entry.d2):
            raise ShapeError(
                f"plan mismatch: entry {entry.target} expects {entry.d1}x{entry.d2}, "
                f"model has {stacked_d1}x{members[0].d2}"
            )
        stats = None
        if plan.method == "afm":
            if capture is None or entry.target not in capture.stats:
                raise CalibrationError(
                    f"no calibration statistics for {entry.target}; run calibrate "
                    "with this plan first"
                )
            stats = capture.stats[entry.target]
        if len(members) == 1:
            if plan.method == "afm":
                factored = [
                    decompose_afm(members[0], stats, entry.rank, bias_mode, centering)
                ]
            else:
                factored = [decompose_svd(members[0], entry.rank)]
        else:
            group = LayerGroup.from_members(members)
            factored = decompose_group(
                group,
                [m.bias for m in members],
                stats,
                entry.rank,
                method=plan.method,
                bias_mode=bias_mode,
                centering=centering,
            )
        for name, layer in zip(member_names, factored):
            new_slots[name] = layer
    out = ToyModel(arch=model.arch, aux=model.aux, slots=new_slots)
    realized = count_params(out)
    if realized != plan.total_after:
        raise ShapeError(
            f"realized parameter count {realized} != plan prediction {plan.total_after}"
        )
    return out


def perplexity(
    model: ToyModel,
    corpus: TokenCorpus,
    seq_len: int = 256,
    stride: int | None = None,
) -> float:
    """exp(mean next-token negative log-likelihood) over all scored positions.

    Sequences are cut into windows of seq_len advancing by stride (default:
    stride = seq_len, non-overlapping). With overlapping windows only
    positions not already scored by an earlier window are counted.
    """
    if stride is None:
        stride = seq_len
    if seq_len < 2 or stride < 1:
        raise UsageError(f"need seq_len >= 2 and stride >= 1, got {seq_len}/{stride}")
    total_nll = 0.0
    positions = 0
    for seq in corpus.sequences:
        n = len(seq)
        next_unscored = 1
        for begin in range(0, max(n - 1, 0), stride):
            window = seq[begin : begin + seq_len]
            if len(window) < 2:
                break
            logits = model.forward(window).astype(np.float64)
            shifted = logits - logits.max(axis=0, keepdims=True)
            logp = shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))
            first = max(begin + 1, next_unscored)
            for t in range(first, begin + len(window)):
                total_nll += -logp[int(seq[t]), t - begin - 1]
                positions += 1
            next_unscored = begin + len(window)
            if begin + len(window) >= n:
                break
    if positions == 0:
        raise UsageError("perplexity: corpus has no scorable positions")
    return float(math.exp(total_nll / positions))

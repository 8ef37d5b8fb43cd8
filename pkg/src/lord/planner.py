"""Compression planning: which layers to factor, at what rank, and what it
costs in parameters.

All parameter accounting is exact integer arithmetic derived from a single
tensor census per architecture, so plan predictions match realized models
to the parameter.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources

from .errors import ShapeError, UsageError

__all__ = [
    "ArchDescriptor",
    "CompressionPlan",
    "GroupSpec",
    "LayerKind",
    "PlanEntry",
    "PlanPolicy",
    "aspect_ratio",
    "baseline_params",
    "build_plan",
    "builtin_arch",
    "builtin_arch_names",
    "group_layers",
    "parity_rank",
    "parity_reduction",
    "percent_param_change",
    "round_rank",
]

# Layers whose aspect ratio exceeds this are skipped unless explicitly allowed:
# near-square matrices need >50% rank reduction before they shrink at all.
HIGH_ASPECT_THRESHOLD = 0.9


class LayerKind(str, Enum):
    ATTN_QKV = "attn_qkv"
    ATTN_OUT = "attn_out"
    MLP_UP = "mlp_up"
    MLP_DOWN = "mlp_down"
    MLP_GATE = "mlp_gate"
    EMBEDDING = "embedding"
    LM_HEAD = "lm_head"


@dataclass(frozen=True)
class ArchDescriptor:
    """Decoder-only transformer architecture, enough to derive every tensor shape."""

    name: str
    hidden: int
    n_layers: int
    vocab: int
    context: int
    n_heads: int
    attention: str  # "mha" | "mqa"
    mlp: str  # "gelu4x" | "swiglu"
    mlp_expansion: float = 4.0
    attn_bias: bool = True
    mlp_bias: bool = True
    tied_embedding: bool = True
    lm_head_bias: bool = False
    block_style: str = "sequential"  # "sequential" | "parallel"
    intermediate: int | None = None

    def __post_init__(self):
        if min(self.hidden, self.n_layers, self.vocab, self.n_heads) < 1:
            raise UsageError(f"arch {self.name}: dims must be positive")
        if self.context < 0:
            raise UsageError(f"arch {self.name}: context must be >= 0")
        if self.hidden % self.n_heads != 0:
            raise UsageError(
                f"arch {self.name}: hidden {self.hidden} not divisible by "
                f"{self.n_heads} heads"
            )
        if self.attention not in ("mha", "mqa"):
            raise UsageError(f"arch {self.name}: unknown attention {self.attention!r}")
        if self.mlp not in ("gelu4x", "swiglu"):
            raise UsageError(f"arch {self.name}: unknown mlp {self.mlp!r}")
        if self.block_style not in ("sequential", "parallel"):
            raise UsageError(f"arch {self.name}: unknown block_style {self.block_style!r}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    @property
    def mlp_dim(self) -> int:
        if self.intermediate is not None:
            return self.intermediate
        return round(self.mlp_expansion * self.hidden)

    @property
    def qkv_rows(self) -> int:
        """Output dim of the fused query/key/value projection."""
        if self.attention == "mqa":
            return self.hidden + 2 * self.head_dim
        return 3 * self.hidden

    def to_dict(self) -> dict:
        d = {
            "name": self.name,
            "hidden": self.hidden,
            "n_layers": self.n_layers,
            "vocab": self.vocab,
            "context": self.context,
            "n_heads": self.n_heads,
            "attention": self.attention,
            "mlp": self.mlp,
            "mlp_expansion": self.mlp_expansion,
            "attn_bias": self.attn_bias,
            "mlp_bias": self.mlp_bias,
            "tied_embedding": self.tied_embedding,
            "lm_head_bias": self.lm_head_bias,
            "block_style": self.block_style,
        }
        if self.intermediate is not None:
            d["intermediate"] = self.intermediate
        return d

    @staticmethod
    def from_dict(d: dict) -> "ArchDescriptor":
        try:
            return ArchDescriptor(**d)
        except TypeError as exc:
            raise UsageError(f"bad architecture descriptor: {exc}") from exc


@dataclass(frozen=True)
class SlotSpec:
    """One decomposable linear layer in the census."""

    name: str
    kind: LayerKind
    d1: int
    d2: int
    bias: bool

    def param_count(self) -> int:
        return self.d1 * self.d2 + (self.d1 if self.bias else 0)


@dataclass(frozen=True)
class AuxSpec:
    """A non-decomposable tensor (embeddings, norms, head)."""

    name: str
    shape: tuple[int, ...]

    def param_count(self) -> int:
        return math.prod(self.shape)


def tensor_census(arch: ArchDescriptor) -> tuple[list[SlotSpec], list[AuxSpec]]:
    """Every tensor the architecture owns, by name and shape.

    This is the single source of truth for both parameter accounting and
    model synthesis; tied embeddings contribute one tensor.
    """
    d, m = arch.hidden, arch.mlp_dim
    slots: list[SlotSpec] = []
    aux: list[AuxSpec] = [AuxSpec("emb.tok", (arch.vocab, d))]
    if arch.context > 0:
        aux.append(AuxSpec("emb.pos", (arch.context, d)))
    for i in range(arch.n_layers):
        p = f"blocks.{i}"
        aux.append(AuxSpec(f"{p}.ln1.weight", (d,)))
        aux.append(AuxSpec(f"{p}.ln1.bias", (d,)))
        if arch.block_style == "sequential":
            aux.append(AuxSpec(f"{p}.ln2.weight", (d,)))
            aux.append(AuxSpec(f"{p}.ln2.bias", (d,)))
        slots.append(SlotSpec(f"{p}.attn_qkv", LayerKind.ATTN_QKV, arch.qkv_rows, d, arch.attn_bias))
        slots.append(SlotSpec(f"{p}.attn_out", LayerKind.ATTN_OUT, d, d, arch.attn_bias))
        if arch.mlp == "swiglu":
            slots.append(SlotSpec(f"{p}.mlp_gate", LayerKind.MLP_GATE, m, d, arch.mlp_bias))
        slots.append(SlotSpec(f"{p}.mlp_up", LayerKind.MLP_UP, m, d, arch.mlp_bias))
        slots.append(SlotSpec(f"{p}.mlp_down", LayerKind.MLP_DOWN, d, m, arch.mlp_bias))
    aux.append(AuxSpec("final_ln.weight", (d,)))
    aux.append(AuxSpec("final_ln.bias", (d,)))
    if not arch.tied_embedding:
        aux.append(AuxSpec("lm_head.w", (arch.vocab, d)))
        if arch.lm_head_bias:
            aux.append(AuxSpec("lm_head.bias", (arch.vocab,)))
    return slots, aux


def baseline_params(arch: ArchDescriptor) -> int:
    slots, aux = tensor_census(arch)
    return sum(s.param_count() for s in slots) + sum(a.param_count() for a in aux)


def aspect_ratio(d1: int, d2: int) -> float:
    """d_min / d_max of a weight matrix, in (0, 1]."""
    if d1 < 1 or d2 < 1:
        raise UsageError(f"aspect_ratio dims must be positive, got {d1}x{d2}")
    return min(d1, d2) / max(d1, d2)


def percent_param_change(d1: int, d2: int, r: int) -> float:
    """Percent change in parameters when a d1 x d2 matrix is factored at rank r.

    Positive means the factored form is larger than the dense one.
    """
    if r < 1:
        raise UsageError(f"rank must be >= 1, got {r}")
    return 100.0 * (r * (d1 + d2) - d1 * d2) / (d1 * d2)


def parity_rank(d1: int, d2: int) -> int:
    """Largest rank at which the factored form is no larger than dense."""
    if d1 < 1 or d2 < 1:
        raise UsageError(f"parity_rank dims must be positive, got {d1}x{d2}")
    return (d1 * d2) // (d1 + d2)


def parity_reduction(alpha: float) -> float:
    """Percent rank reduction needed to reach the parity point, 100α/(1+α)."""
    if alpha <= 0:
        raise UsageError(f"aspect ratio must be positive, got {alpha}")
    return 100.0 * alpha / (1.0 + alpha)


def round_rank(
    r_target: float,
    multiple: int = 128,
    *,
    d_min: int,
    parity: int | None = None,
) -> int:
    """Round a target rank to the nearest multiple (ties up), clamped to [multiple, d_min]."""
    if multiple < 1:
        raise UsageError(f"multiple must be >= 1, got {multiple}")
    if d_min < multiple:
        raise UsageError(f"d_min {d_min} smaller than rounding multiple {multiple}")
    low = math.floor(r_target / multiple) * multiple
    high = low + multiple
    r = low if (r_target - low) < (high - r_target) else high
    r = max(multiple, min(r, d_min))
    if parity is not None and r > parity:
        warnings.warn(
            f"rounded rank {r} exceeds parity rank {parity}; factored layer will "
            "be larger than dense",
            stacklevel=2,
        )
    return r


@dataclass(frozen=True)
class GroupSpec:
    """A decomposition target: one layer, or a stack of layers sharing an input."""

    name: str  # target token, e.g. "attn_qkv" or "mlp_gate_up"
    member_suffixes: tuple[str, ...]
    d1: int  # stacked output rows
    d2: int

    @property
    def alpha(self) -> float:
        return aspect_ratio(self.d1, self.d2)

    @property
    def d_min(self) -> int:
        return min(self.d1, self.d2)


def group_layers(arch: ArchDescriptor) -> list[GroupSpec]:
    """The decomposable targets of an architecture, per transformer block.

    Layers sharing an input are presented as one stacked target: the fused
    query/key/value projection (already stacked in storage) and, for gated
    MLPs, the gate+up pair. Embeddings and the LM head are never offered.
    """
    d, m = arch.hidden, arch.mlp_dim
    specs = [
        GroupSpec("attn_qkv", ("attn_qkv",), arch.qkv_rows, d),
        GroupSpec("attn_out", ("attn_out",), d, d),
    ]
    if arch.mlp == "swiglu":
        specs.append(GroupSpec("mlp_gate_up", ("mlp_gate", "mlp_up"), 2 * m, d))
    else:
        specs.append(GroupSpec("mlp_up", ("mlp_up",), m, d))
    specs.append(GroupSpec("mlp_down", ("mlp_down",), d, m))
    return specs


def resolve_targets(arch: ArchDescriptor, tokens: list[str]) -> list[GroupSpec]:
    """Map user target tokens to group specs; gate/up aliases fold into their group."""
    if not tokens:
        raise UsageError("empty target set: name at least one layer kind to decompose")
    menu = {g.name: g for g in group_layers(arch)}
    aliases = {}
    if arch.mlp == "swiglu":
        aliases = {"mlp_gate": "mlp_gate_up", "mlp_up": "mlp_gate_up"}
    picked: dict[str, GroupSpec] = {}
    for tok in tokens:
        if tok in (LayerKind.EMBEDDING.value, LayerKind.LM_HEAD.value):
            raise UsageError(
                f"target {tok!r} is never decomposed (excluded by policy)"
            )
        name = aliases.get(tok, tok)
        if name not in menu:
            raise UsageError(
                f"unknown target {tok!r} for arch {arch.name}; "
                f"choose from {sorted(menu)}"
            )
        picked[name] = menu[name]
    return [picked[n] for n in sorted(picked, key=lambda n: list(menu).index(n))]


@dataclass
class PlanPolicy:
    """What to decompose and how far."""

    targets: list[str]
    rank: int | None = None
    rank_reduction_pct: float | None = None
    multiple: int = 128
    method: str = "afm"
    allow_high_aspect: bool = False
    max_parity_violation: float | None = None  # max allowed +% param change per entry

    def __post_init__(self):
        if (self.rank is None) == (self.rank_reduction_pct is None):
            raise UsageError("policy needs exactly one of rank or rank_reduction_pct")
        if self.method not in ("afm", "svd"):
            raise UsageError(f"unknown method {self.method!r}")


@dataclass
class PlanEntry:
    target: str
    d1: int
    d2: int
    alpha: float
    rank: int
    pct_rank_reduction: float
    pct_param_change: float
    parity_rank: int
    params_before: int
    params_after: int
    warning: str | None = None

    def to_dict(self) -> dict:
        d = {
            "target": self.target,
            "d1": self.d1,
            "d2": self.d2,
            "alpha": self.alpha,
            "rank": self.rank,
            "pct_rank_reduction": self.pct_rank_reduction,
            "pct_param_change": self.pct_param_change,
            "parity_rank": self.parity_rank,
            "params_before": self.params_before,
            "params_after": self.params_after,
        }
        if self.warning is not None:
            d["warning"] = self.warning
        return d

    @staticmethod
    def from_dict(d: dict) -> "PlanEntry":
        return PlanEntry(
            target=d["target"],
            d1=int(d["d1"]),
            d2=int(d["d2"]),
            alpha=float(d["alpha"]),
            rank=int(d["rank"]),
            pct_rank_reduction=float(d["pct_rank_reduction"]),
            pct_param_change=float(d["pct_param_change"]),
            parity_rank=int(d["parity_rank"]),
            params_before=int(d["params_before"]),
            params_after=int(d["params_after"]),
            warning=d.get("warning"),
        )


@dataclass
class CompressionPlan:
    arch: ArchDescriptor
    method: str
    entries: list[PlanEntry]
    total_before: int
    total_after: int

    def to_dict(self) -> dict:
        return {
            "arch": self.arch.to_dict(),
            "method": self.method,
            "entries": [e.to_dict() for e in self.entries],
            "totals": {"before": self.total_before, "after": self.total_after},
        }

    @staticmethod
    def from_dict(d: dict) -> "CompressionPlan":
        try:
            return CompressionPlan(
                arch=ArchDescriptor.from_dict(d["arch"]),
                method=d["method"],
                entries=[PlanEntry.from_dict(e) for e in d["entries"]],
                total_before=int(d["totals"]["before"]),
                total_after=int(d["totals"]["after"]),
            )
        except (KeyError, TypeError) as exc:
            raise UsageError(f"bad plan document: missing {exc}") from exc


def build_plan(arch: ArchDescriptor, policy: PlanPolicy) -> CompressionPlan:
    """One plan entry per targeted group per transformer block, exact totals."""
    specs = resolve_targets(arch, policy.targets)
    for spec in specs:
        if spec.alpha > HIGH_ASPECT_THRESHOLD and not policy.allow_high_aspect:
            raise UsageError(
                f"target {spec.name!r} has aspect ratio {spec.alpha:.2f} > "
                f"{HIGH_ASPECT_THRESHOLD}; near-square layers need >50% rank "
                "reduction to shrink (pass allow_high_aspect to override)"
            )

    entries: list[PlanEntry] = []
    for spec in specs:
        d1, d2, d_min = spec.d1, spec.d2, spec.d_min
        if policy.rank is not None:
            r_target = float(policy.rank)
        else:
            r_target = d_min * (1.0 - policy.rank_reduction_pct / 100.0)
        parity = parity_rank(d1, d2)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rank = round_rank(r_target, policy.multiple, d_min=d_min, parity=parity)
        pct_change = percent_param_change(d1, d2, rank)
        warning = None
        if rank >= d_min:
            warning = f"rank {rank} equals d_min {d_min}: factorization only adds parameters"
        elif rank >= parity:
            warning = (
                f"rank {rank} at or above parity rank {parity}: no compression "
                f"({pct_change:+.2f}% parameters)"
            )
        if (
            policy.max_parity_violation is not None
            and pct_change > policy.max_parity_violation
        ):
            raise UsageError(
                f"target {spec.name!r} at rank {rank} grows parameters by "
                f"{pct_change:.2f}%, above the allowed {policy.max_parity_violation}%"
            )
        for i in range(arch.n_layers):
            entries.append(
                PlanEntry(
                    target=f"blocks.{i}.{spec.name}",
                    d1=d1,
                    d2=d2,
                    alpha=spec.alpha,
                    rank=rank,
                    pct_rank_reduction=100.0 * (d_min - rank) / d_min,
                    pct_param_change=pct_change,
                    parity_rank=parity,
                    params_before=d1 * d2,
                    params_after=rank * (d1 + d2),
                    warning=warning,
                )
            )

    before = baseline_params(arch)
    after = before + sum(e.params_after - e.params_before for e in entries)
    return CompressionPlan(
        arch=arch, method=policy.method, entries=entries,
        total_before=before, total_after=after,
    )


def builtin_arch_names() -> list[str]:
    root = resources.files("lord").joinpath("data/archs")
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def builtin_arch(name: str) -> ArchDescriptor:
    """Load one of the architecture descriptors shipped with the package."""
    path = resources.files("lord").joinpath(f"data/archs/{name}.json")
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise UsageError(
            f"no builtin architecture {name!r}; available: {builtin_arch_names()}"
        ) from None
    return ArchDescriptor.from_dict(json.loads(text))

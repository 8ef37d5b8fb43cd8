"""Turn dense linear layers into factored low-rank layers.

Two routes: plain truncated SVD of the weight, and calibration-based
decomposition from the eigenvectors of the layer's output covariance.
Layers that consume the same input can be stacked into a group so the
factored members share a single bottleneck matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, RankError, ShapeError, UsageError
from .linalg import OutputStats, eig_sym, svd_truncate

__all__ = [
    "DenseLayer",
    "FactoredLayer",
    "LayerGroup",
    "decompose_afm",
    "decompose_group",
    "decompose_svd",
    "factored_forward",
]

# Covariance eigenvalues below -1e-6 * max eigenvalue indicate a broken
# accumulator rather than floating-point noise.
_EIGENVALUE_FLOOR = -1e-6


@dataclass
class DenseLayer:
    """A dense linear layer y = W x + b, weight d1 x d2, optional bias d1."""

    name: str
    w: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        if self.w.ndim != 2:
            raise ShapeError(f"layer {self.name}: weight must be 2-D, got {self.w.shape}")
        if self.bias is not None and self.bias.shape != (self.w.shape[0],):
            raise ShapeError(
                f"layer {self.name}: bias shape {self.bias.shape} does not match "
                f"output dim {self.w.shape[0]}"
            )

    @property
    def d1(self) -> int:
        return self.w.shape[0]

    @property
    def d2(self) -> int:
        return self.w.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape[0] != self.d2:
            raise ShapeError(f"layer {self.name}: input dim {x.shape[0]} != {self.d2}")
        y = self.w @ x
        if self.bias is not None:
            y = y + self.bias[:, None]
        return y

    def param_count(self) -> int:
        n = self.w.size
        if self.bias is not None:
            n += self.bias.size
        return n


@dataclass
class FactoredLayer:
    """A factored layer y = B (A x) + b̃ of rank r.

    The product B·A is never materialized during inference; forward runs the
    two smaller products in sequence.
    """

    name: str
    a: np.ndarray
    b_mat: np.ndarray
    bias_tilde: np.ndarray | None
    rank: int

    def __post_init__(self):
        r = self.rank
        if self.a.shape[0] != r or self.b_mat.shape[1] != r:
            raise ShapeError(
                f"layer {self.name}: factor shapes {self.b_mat.shape} x {self.a.shape} "
                f"inconsistent with rank {r}"
            )

    @property
    def d1(self) -> int:
        return self.b_mat.shape[0]

    @property
    def d2(self) -> int:
        return self.a.shape[1]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return factored_forward(self, x)

    def param_count(self) -> int:
        n = self.a.size + self.b_mat.size
        if self.bias_tilde is not None:
            n += self.bias_tilde.size
        return n


def factored_forward(layer: FactoredLayer, x: np.ndarray) -> np.ndarray:
    """Apply a factored layer to a batch of column vectors (d2 x n)."""
    if x.shape[0] != layer.d2:
        raise ShapeError(f"layer {layer.name}: input dim {x.shape[0]} != {layer.d2}")
    y = layer.b_mat @ (layer.a @ x)
    if layer.bias_tilde is not None:
        y = y + layer.bias_tilde[:, None]
    return y


def decompose_svd(layer: DenseLayer, r: int) -> FactoredLayer:
    """Rank-r factorization of the weight: B = U_r diag(S_r), A = V_rᵀ.

    Optimal in Frobenius norm among rank-r factorizations; the bias passes
    through unchanged.
    """
    f = svd_truncate(layer.w, r)
    b_mat = (f.u * f.s[None, :]).astype(np.float32)
    a = f.v.T.copy()
    bias = None if layer.bias is None else layer.bias.copy()
    return FactoredLayer(name=layer.name, a=a, b_mat=b_mat, bias_tilde=bias, rank=r)


def _top_output_directions(stats: OutputStats, r: int, centering: str) -> np.ndarray:
    cov = stats.covariance() if centering == "centered" else stats.second_moment()
    factors = eig_sym(cov, r)
    lmax = max(float(factors.l[0]), 0.0)
    if factors.l[-1] < _EIGENVALUE_FLOOR * max(1.0, lmax):
        raise CalibrationError(
            f"output covariance has eigenvalue {factors.l[-1]:.3e}, "
            "far below zero; statistics look corrupted"
        )
    return factors.q


def decompose_afm(
    layer: DenseLayer,
    stats: OutputStats,
    r: int,
    bias_mode: str = "exact",
    centering: str = "centered",
) -> FactoredLayer:
    """Calibration-based rank-r factorization from output statistics.

    B is the top-r eigenvector block Q̂ of the layer-output covariance and
    A = Q̂ᵀ W, so the factored output lives in the dominant output subspace
    observed on the calibration data. bias_mode "exact" keeps b̃ = b;
    "projected" uses Q̂ Q̂ᵀ b. centering "uncentered" eigendecomposes the raw
    second moment instead of the covariance.
    """
    if bias_mode not in ("exact", "projected"):
        raise UsageError(f"unknown bias_mode {bias_mode!r}")
    if centering not in ("centered", "uncentered"):
        raise UsageError(f"unknown centering {centering!r}")
    if stats.dim != layer.d1:
        raise ShapeError(
            f"layer {layer.name}: stats dim {stats.dim} != output dim {layer.d1}"
        )
    if not 1 <= r <= min(layer.d1, layer.d2):
        raise RankError(
            f"layer {layer.name}: rank {r} out of range [1, {min(layer.d1, layer.d2)}]"
        )
    if stats.count < r:
        raise CalibrationError(
            f"layer {layer.name}: {stats.count} calibration tokens cannot support "
            f"rank {r}; covariance would be rank-deficient below the target"
        )
    q = _top_output_directions(stats, r, centering)
    a = (q.T.astype(np.float64) @ layer.w.astype(np.float64)).astype(np.float32)
    if layer.bias is None:
        bias = None
    elif bias_mode == "exact":
        bias = layer.bias.copy()
    else:
        bias = (q @ (q.T @ layer.bias)).astype(np.float32)
    return FactoredLayer(name=layer.name, a=a, b_mat=q, bias_tilde=bias, rank=r)


@dataclass
class LayerGroup:
    """Several layers sharing one input, stacked into a single tall matrix."""

    names: list[str]
    stacked_w: np.ndarray
    row_offsets: list[int]

    @staticmethod
    def from_members(members: list[DenseLayer]) -> "LayerGroup":
        if not members:
            raise UsageError("layer group needs at least one member")
        d2 = members[0].d2
        for m in members:
            if m.d2 != d2:
                raise ShapeError(
                    f"group members must share the input dim; {m.name} has "
                    f"{m.d2}, expected {d2}"
                )
        offsets = [0]
        for m in members:
            offsets.append(offsets[-1] + m.d1)
        stacked = np.concatenate([m.w for m in members], axis=0)
        return LayerGroup(
            names=[m.name for m in members], stacked_w=stacked, row_offsets=offsets
        )


def decompose_group(
    group: LayerGroup,
    biases: list[np.ndarray | None],
    stats: OutputStats | None,
    r: int,
    method: str = "afm",
    bias_mode: str = "exact",
    centering: str = "centered",
) -> list[FactoredLayer]:
    """Factor a stacked layer group so all members share one bottleneck A.

    Identical to decomposing the stacked matrix and slicing B row-wise per
    member; each returned layer holds the same `a` array object.
    """
    if len(biases) != len(group.names):
        raise ShapeError(
            f"group has {len(group.names)} members but {len(biases)} biases given"
        )
    stacked_bias = None
    if any(b is not None for b in biases):
        parts = []
        for name, b, lo, hi in zip(
            group.names, biases, group.row_offsets[:-1], group.row_offsets[1:]
        ):
            if b is None:
                parts.append(np.zeros(hi - lo, dtype=np.float32))
            elif b.shape != (hi - lo,):
                raise ShapeError(f"group member {name}: bias shape {b.shape} != ({hi - lo},)")
            else:
                parts.append(b)
        stacked_bias = np.concatenate(parts)

    stacked_layer = DenseLayer(name="+".join(group.names), w=group.stacked_w, bias=stacked_bias)
    if method == "afm":
        if stats is None:
            raise CalibrationError(
                f"group {stacked_layer.name}: calibration statistics required for "
                "covariance-based decomposition"
            )
        whole = decompose_afm(stacked_layer, stats, r, bias_mode=bias_mode, centering=centering)
    elif method == "svd":
        whole = decompose_svd(stacked_layer, r)
    else:
        raise UsageError(f"unknown decomposition method {method!r}")

    out = []
    for name, orig_bias, lo, hi in zip(
        group.names, biases, group.row_offsets[:-1], group.row_offsets[1:]
    ):
        if stacked_bias is None:
            member_bias = None
        elif bias_mode == "exact" or method == "svd":
            member_bias = None if orig_bias is None else orig_bias.copy()
        else:
            # Projection mixes rows across members, so every member takes its
            # slice of the projected stacked bias.
            member_bias = whole.bias_tilde[lo:hi].copy()
        out.append(
            FactoredLayer(
                name=name,
                a=whole.a,
                b_mat=whole.b_mat[lo:hi].copy(),
                bias_tilde=member_bias,
                rank=r,
            )
        )
    return out

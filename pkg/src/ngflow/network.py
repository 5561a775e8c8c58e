"""Residual networks built from perturbed-identity blocks.

A block maps ``z`` (length ``d_in``) to ``J z + tanh(W z + b)`` with
``W`` of shape ``(d_out, d_in)``. ``J`` keeps the first ``d_out``
coordinates of ``z`` when ``d_out <= d_in`` and pads ``z`` with zeros
otherwise, so all-zero weights give the identity or the canonical
injection. The network output is ``zeta . z_L`` with no output bias.

Parameters are flattened in a fixed order: for each block ``W``
(row-major) then ``b``, and finally the closing vector ``zeta``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "Architecture",
    "BlockParams",
    "EvalBundle",
    "NetworkParams",
    "add_layer",
    "add_width",
    "eval_bundle",
    "features_batch",
    "features_with_dx",
    "forward",
    "forward_batch",
    "init_params",
    "jacobians",
    "load_checkpoint",
    "save_checkpoint",
]

ORDERING_TAG = "blocks(W row-major, b) then zeta; v1"
_ACTIVATIONS = ("tanh",)


@dataclass(frozen=True)
class Architecture:
    input_dim: int
    widths: tuple[int, ...]
    activation: str = "tanh"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if len(self.widths) < 1 or min(self.widths) < 1:
            raise ValueError("need at least one block and all widths >= 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unsupported activation {self.activation!r}")

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim,) + self.widths

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum(d[j + 1] * (d[j] + 1) for j in range(self.depth)) + d[-1]

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "widths": list(self.widths),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(int(d["input_dim"]), tuple(d["widths"]), d.get("activation", "tanh"))


@dataclass
class BlockParams:
    W: np.ndarray
    b: np.ndarray


@dataclass
class NetworkParams:
    """Weights of a residual network plus a mask of trainable entries."""

    arch: Architecture
    blocks: list[BlockParams]
    closing: np.ndarray
    active_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        dims = self.arch.dims
        if len(self.blocks) != self.arch.depth:
            raise ValueError("number of blocks does not match architecture")
        for j, blk in enumerate(self.blocks):
            blk.W = np.asarray(blk.W, dtype=np.float64)
            blk.b = np.asarray(blk.b, dtype=np.float64)
            if blk.W.shape != (dims[j + 1], dims[j]) or blk.b.shape != (dims[j + 1],):
                raise ValueError(
                    f"block {j}: got W{blk.W.shape}, b{blk.b.shape}; expected "
                    f"W{(dims[j + 1], dims[j])}, b{(dims[j + 1],)}"
                )
        self.closing = np.asarray(self.closing, dtype=np.float64)
        if self.closing.shape != (dims[-1],):
            raise ValueError(f"closing vector must have length {dims[-1]}")
        if self.active_mask is None:
            self.active_mask = np.ones(self.arch.n_params, dtype=bool)
        self.active_mask = np.asarray(self.active_mask, dtype=bool)
        if self.active_mask.shape != (self.arch.n_params,):
            raise ValueError("active_mask length does not match parameter count")

    @property
    def n_params(self) -> int:
        return self.arch.n_params

    @property
    def active_indices(self) -> np.ndarray:
        return np.flatnonzero(self.active_mask)

    def block_slices(self) -> list[tuple[slice, slice]]:
        """Flat-vector slices ``(W, b)`` of every block."""
        out, pos = [], 0
        dims = self.arch.dims
        for j in range(self.arch.depth):
            nw = dims[j + 1] * dims[j]
            out.append((slice(pos, pos + nw), slice(pos + nw, pos + nw + dims[j + 1])))
            pos += nw + dims[j + 1]
        return out

    def closing_slice(self) -> slice:
        n = self.n_params
        return slice(n - self.arch.widths[-1], n)

    def flatten(self) -> np.ndarray:
        parts = []
        for blk in self.blocks:
            parts.append(blk.W.ravel())
            parts.append(blk.b)
        parts.append(self.closing)
        return np.concatenate(parts)

    def with_flat(self, theta: np.ndarray) -> "NetworkParams":
        return NetworkParams.from_flat(self.arch, theta, self.active_mask.copy())

    @classmethod
    def from_flat(cls, arch: Architecture, theta, active_mask=None) -> "NetworkParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (arch.n_params,):
            raise ValueError(f"expected {arch.n_params} parameters, got {theta.shape}")
        dims = arch.dims
        blocks, pos = [], 0
        for j in range(arch.depth):
            nw = dims[j + 1] * dims[j]
            W = theta[pos:pos + nw].reshape(dims[j + 1], dims[j]).copy()
            pos += nw
            b = theta[pos:pos + dims[j + 1]].copy()
            pos += dims[j + 1]
            blocks.append(BlockParams(W, b))
        return cls(arch, blocks, theta[pos:].copy(), active_mask)

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            self.arch,
            [BlockParams(b.W.copy(), b.b.copy()) for b in self.blocks],
            self.closing.copy(),
            self.active_mask.copy(),
        )

    def with_active(self, indices=None) -> "NetworkParams":
        """Copy with only ``indices`` trainable (all when ``None``)."""
        mask = np.zeros(self.n_params, dtype=bool)
        if indices is None:
            mask[:] = True
        else:
            mask[np.asarray(indices, dtype=int)] = True
        out = self.copy()
        out.active_mask = mask
        return out

    def last_layers_indices(self, n_blocks: int = 1) -> np.ndarray:
        """Flat indices of the last ``n_blocks`` blocks and the closing vector."""
        sl = self.block_slices()[-n_blocks:]
        start = sl[0][0].start
        return np.arange(start, self.n_params)


@dataclass
class EvalBundle:
    value: float
    dvalue_dx: Optional[float]
    jac_theta: np.ndarray
    jac_mixed: Optional[np.ndarray]


def init_params(arch: Architecture, rng: np.random.Generator) -> NetworkParams:
    """Uniform ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]`` initialization."""
    dims = arch.dims
    blocks = []
    for j in range(arch.depth):
        bound = 1.0 / np.sqrt(dims[j])
        W = rng.uniform(-bound, bound, size=(dims[j + 1], dims[j]))
        b = rng.uniform(-bound, bound, size=dims[j + 1])
        blocks.append(BlockParams(W, b))
    bound = 1.0 / np.sqrt(dims[-1])
    closing = rng.uniform(-bound, bound, size=dims[-1])
    return NetworkParams(arch, blocks, closing)


def _inject(z: np.ndarray, d_out: int) -> np.ndarray:
    d_in = z.shape[1]
    if d_out <= d_in:
        return z[:, :d_out]
    out = np.zeros((z.shape[0], d_out))
    out[:, :d_in] = z
    return out


def _inject_T(g: np.ndarray, d_in: int) -> np.ndarray:
    d_out = g.shape[1]
    if d_out >= d_in:
        return g[:, :d_in]
    out = np.zeros((g.shape[0], d_in))
    out[:, :d_out] = g
    return out


def _as_batch(params: NetworkParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(-1, params.arch.input_dim) if params.arch.input_dim > 1 else X[:, None]
    if X.ndim != 2 or X.shape[1] != params.arch.input_dim:
        raise ValueError(
            f"inputs must have {params.arch.input_dim} columns, got shape {X.shape}"
        )
    return X


def features_batch(params: NetworkParams, X, upto: Optional[int] = None) -> np.ndarray:
    """Outputs of the first ``upto`` blocks (all when ``None``), shape (n, d)."""
    z = _as_batch(params, X)
    blocks = params.blocks if upto is None else params.blocks[:upto]
    for blk in blocks:
        z = _inject(z, blk.W.shape[0]) + np.tanh(z @ blk.W.T + blk.b)
    return z


def forward_batch(params: NetworkParams, X) -> np.ndarray:
    return features_batch(params, X) @ params.closing


def forward(params: NetworkParams, x) -> float:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    if x.shape[1] != params.arch.input_dim:
        raise ValueError(f"x must have length {params.arch.input_dim}")
    return float(forward_batch(params, x)[0])


@dataclass
class BatchJacobians:
    """Per-sample values and derivatives; columns follow the active ordering."""

    value: np.ndarray
    jac: np.ndarray
    dvalue_dx: Optional[np.ndarray] = None
    jac_mixed: Optional[np.ndarray] = None


def jacobians(params: NetworkParams, X, dx: Optional[int] = None,
              columns=None) -> BatchJacobians:
    """Values and parameter Jacobians of the network at every row of ``X``.

    With ``dx`` set to an input coordinate, the spatial derivative of the
    output and of every Jacobian column is returned as well (a tangent
    in that coordinate carried through the forward and reverse sweeps).
    ``columns`` selects flat parameter indices; the default is the
    active mask.
    """
    X = _as_batch(params, X)
    n = X.shape[0]
    if dx is not None and not 0 <= dx < params.arch.input_dim:
        raise ValueError(f"dx={dx} is not a valid input coordinate")
    cols = params.active_indices if columns is None else np.asarray(columns, dtype=int)
    want = dx is not None
    D = params.n_params
    slices = params.block_slices()
    lowest = params.arch.depth
    if cols.size:
        first = int(cols.min())
        lowest = next(
            (j for j, (sw, sb) in enumerate(slices) if first < sb.stop), len(slices)
        )

    zs, sps, ss, ads = [X], [], [], []
    zds = [None]
    if want:
        zd = np.zeros_like(X)
        zd[:, dx] = 1.0
        zds = [zd]
    z = X
    for blk in params.blocks:
        a = z @ blk.W.T + blk.b
        s = np.tanh(a)
        sp = 1.0 - s * s
        z_new = _inject(z, blk.W.shape[0]) + s
        ss.append(s)
        sps.append(sp)
        if want:
            ad = zds[-1] @ blk.W.T
            ads.append(ad)
            zds.append(_inject(zds[-1], blk.W.shape[0]) + sp * ad)
        z = z_new
        zs.append(z)

    zeta = params.closing
    value = zs[-1] @ zeta
    full = np.zeros((n, D))
    full_mixed = np.zeros((n, D)) if want else None
    csl = params.closing_slice()
    full[:, csl] = zs[-1]
    if want:
        full_mixed[:, csl] = zds[-1]
        dvalue = zds[-1] @ zeta
        gd = np.zeros_like(zs[-1])
    g = np.broadcast_to(zeta, zs[-1].shape)
    for j in range(params.arch.depth - 1, lowest - 1, -1):
        blk = params.blocks[j]
        sp = sps[j]
        delta = g * sp
        sw, sb = slices[j]
        zin = zs[j]
        full[:, sw] = (delta[:, :, None] * zin[:, None, :]).reshape(n, -1)
        full[:, sb] = delta
        if want:
            spp = -2.0 * ss[j] * sp
            deltad = gd * sp + g * spp * ads[j]
            full_mixed[:, sw] = (
                deltad[:, :, None] * zin[:, None, :] + delta[:, :, None] * zds[j][:, None, :]
            ).reshape(n, -1)
            full_mixed[:, sb] = deltad
            gd = _inject_T(gd, zin.shape[1]) + deltad @ blk.W
        g = _inject_T(g, zin.shape[1]) + delta @ blk.W

    out = BatchJacobians(value=value, jac=full[:, cols])
    if want:
        out.dvalue_dx = dvalue
        out.jac_mixed = full_mixed[:, cols]
    return out


def eval_bundle(params: NetworkParams, x, want_dx: Optional[int] = None) -> EvalBundle:
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    bj = jacobians(params, x, dx=want_dx)
    return EvalBundle(
        value=float(bj.value[0]),
        dvalue_dx=None if bj.dvalue_dx is None else float(bj.dvalue_dx[0]),
        jac_theta=bj.jac[0],
        jac_mixed=None if bj.jac_mixed is None else bj.jac_mixed[0],
    )


def add_layer(params: NetworkParams, m: Optional[int] = None) -> tuple[NetworkParams, np.ndarray]:
    """Insert a zero-weight block before the closing layer.

    The closing vector is kept (its update starts at zero), so ``m`` must
    equal the current last width. Returns the expanded parameters and
    the flat indices of the new block. Old trainable flags are kept and
    the new block is marked trainable.
    """
    dL = params.arch.widths[-1]
    m = dL if m is None else int(m)
    if m != dL:
        raise ValueError(
            f"add_layer keeps the closing vector, so the new width must equal {dL}"
        )
    arch = Architecture(params.arch.input_dim, params.arch.widths + (m,), params.arch.activation)
    blocks = [BlockParams(b.W.copy(), b.b.copy()) for b in params.blocks]
    blocks.append(BlockParams(np.zeros((m, dL)), np.zeros(m)))
    n_old_body = params.n_params - dL
    n_new = m * (dL + 1)
    mask = np.concatenate([
        params.active_mask[:n_old_body],
        np.ones(n_new, dtype=bool),
        params.active_mask[n_old_body:],
    ])
    new = NetworkParams(arch, blocks, params.closing.copy(), mask)
    return new, np.arange(n_old_body, n_old_body + n_new)


def add_width(params: NetworkParams, d_e: int, seed_values: Optional[dict] = None
              ) -> tuple[NetworkParams, np.ndarray]:
    """Append ``d_e`` neurons to the last block and extend the closing vector.

    ``seed_values`` may hold ``W`` (``d_e`` x ``d_{L-1}``), ``b`` and ``xi``
    for the new rows and closing entries; missing entries are zero.
    When the widened block is still narrower than its input, the new
    neurons also carry identity pass-through terms.
    Returns the expanded parameters and the flat indices of all new
    entries.
    """
    if d_e < 1:
        raise ValueError("d_e must be >= 1")
    seed_values = seed_values or {}
    dims = params.arch.dims
    d_prev, dL = dims[-2], dims[-1]
    W_new = np.asarray(seed_values.get("W", np.zeros((d_e, d_prev))), dtype=np.float64)
    b_new = np.asarray(seed_values.get("b", np.zeros(d_e)), dtype=np.float64)
    xi = np.asarray(seed_values.get("xi", np.zeros(d_e)), dtype=np.float64)
    widths = params.arch.widths[:-1] + (dL + d_e,)
    arch = Architecture(params.arch.input_dim, widths, params.arch.activation)
    blocks = [BlockParams(b.W.copy(), b.b.copy()) for b in params.blocks]
    last = blocks[-1]
    blocks[-1] = BlockParams(np.vstack([last.W, W_new]), np.concatenate([last.b, b_new]))
    closing = np.concatenate([params.closing, xi])

    old_mask = params.active_mask
    sw, sb = params.block_slices()[-1]
    mask = np.concatenate([
        old_mask[:sw.stop], np.ones(d_e * d_prev, dtype=bool),
        old_mask[sb], np.ones(d_e, dtype=bool),
        old_mask[params.closing_slice()], np.ones(d_e, dtype=bool),
    ])
    new = NetworkParams(arch, blocks, closing, mask)
    nsw, nsb = new.block_slices()[-1]
    new_idx = np.concatenate([
        np.arange(sw.stop, nsw.stop),
        np.arange(nsb.stop - d_e, nsb.stop),
        np.arange(new.n_params - d_e, new.n_params),
    ])
    return new, new_idx


def save_checkpoint(params: NetworkParams, path) -> None:
    doc = {
        "format": "ngflow-checkpoint",
        "ordering": ORDERING_TAG,
        "arch": params.arch.to_dict(),
        "theta": params.flatten().tolist(),
        "active_mask": params.active_mask.astype(int).tolist(),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path) -> NetworkParams:
    doc = json.loads(Path(path).read_text())
    if doc.get("ordering") != ORDERING_TAG:
        raise ValueError(f"unknown parameter ordering {doc.get('ordering')!r}")
    arch = Architecture.from_dict(doc["arch"])
    return NetworkParams.from_flat(arch, doc["theta"], np.asarray(doc["active_mask"], dtype=bool))


def features_with_dx(params: NetworkParams, X, dx: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Last-block features and their derivative in input coordinate ``dx``."""
    z = _as_batch(params, X)
    zd = np.zeros_like(z)
    zd[:, dx] = 1.0
    for blk in params.blocks:
        s = np.tanh(z @ blk.W.T + blk.b)
        d_out = blk.W.shape[0]
        zd = _inject(zd, d_out) + (1.0 - s * s) * (zd @ blk.W.T)
        z = _inject(z, d_out) + s
    return z, zd

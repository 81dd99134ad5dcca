"""Dynamic neural representational decoding.

Each coarse-grid location carries a flat parameter vector that defines a tiny
three-layer per-position network ``g``. Evaluated on a shared ``s x s``
coordinate grid (optionally concatenated with a guidance patch), ``g`` yields
``s x s x C`` logits, which are bilinearly upsampled to the ``r x r`` patch the
location is responsible for. The patches tile the full-resolution output.

Flat parameter order: layer-major; within a layer the weight matrix in
``(out, in)`` row-major order, then the bias.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .ops import ContractError

LOW_LEVEL_RATIO = 4


@dataclass(frozen=True)
class NrdConfig:
    r: int = 32
    num_classes: int = 19
    hidden: int = 16  # C_r
    guidance_channels: int = 16  # C_m; 0 disables guidance
    use_coords: bool = True
    low_level_ratio: int = LOW_LEVEL_RATIO

    def __post_init__(self):
        if self.r % self.low_level_ratio or self.r < self.low_level_ratio:
            raise ContractError(f"r={self.r} must be a positive multiple of {self.low_level_ratio}")
        if self.num_classes < 2:
            raise ContractError("need at least two classes")
        if self.hidden < 1 or self.guidance_channels < 0:
            raise ContractError("invalid channel counts")
        if not self.use_coords and self.guidance_channels == 0:
            raise ContractError("the representational network needs coordinates or guidance")

    @property
    def s(self):
        return self.r // self.low_level_ratio

    @property
    def in_channels(self):
        return 2 * int(self.use_coords) + self.guidance_channels


@dataclass(frozen=True)
class LayerSlot:
    in_ch: int
    out_ch: int
    w_offset: int
    b_offset: int

    @property
    def end(self):
        return self.b_offset + self.out_ch


@dataclass(frozen=True)
class ParamLayout:
    layers: tuple
    total: int

    @property
    def mult_per_position(self):
        """Multiplies of one per-position evaluation (weights only)."""
        return sum(l.in_ch * l.out_ch for l in self.layers)


def build_param_layout(cfg):
    dims = [(cfg.in_channels, cfg.hidden), (cfg.hidden, cfg.hidden), (cfg.hidden, cfg.num_classes)]
    layers = []
    off = 0
    for cin, cout in dims:
        w_off = off
        off += cin * cout
        layers.append(LayerSlot(cin, cout, w_off, off))
        off += cout
    return ParamLayout(tuple(layers), off)


def split_params(theta, layout):
    """Views ``[(W, b), ...]`` into ``theta`` (last axis = flat vector).

    ``W`` has shape ``(..., out, in)`` and ``b`` shape ``(..., out)``.
    """
    theta = np.asarray(theta)
    if theta.shape[-1] != layout.total:
        raise ContractError(f"theta length {theta.shape[-1]} != layout total {layout.total}")
    lead = theta.shape[:-1]
    pieces = []
    for l in layout.layers:
        w = theta[..., l.w_offset : l.b_offset].reshape(lead + (l.out_ch, l.in_ch))
        b = theta[..., l.b_offset : l.end]
        pieces.append((w, b))
    return pieces


def join_params(pieces):
    flat = []
    for w, b in pieces:
        lead = w.shape[:-2]
        flat.append(w.reshape(lead + (-1,)))
        flat.append(b)
    return np.concatenate(flat, axis=-1)


def make_coordinate_map(s, dtype=None):
    """``s x s x 2`` grid with channel 0 = x = j/s (column), channel 1 = y = i/s (row)."""
    if s < 1:
        raise ContractError("s must be >= 1")
    dtype = dtype or ops.default_dtype()
    ramp = np.arange(s, dtype=np.float64) / s
    q = np.empty((s, s, 2))
    q[..., 0] = ramp[None, :]
    q[..., 1] = ramp[:, None]
    return q.astype(dtype)


# ------------------------------------------------------ representational net


def _repr_inputs(coord_map, guidance, n_batch, s, dtype):
    parts = []
    if coord_map is not None:
        parts.append(np.broadcast_to(coord_map.reshape(1, s * s, 2).astype(dtype, copy=False), (n_batch, s * s, 2)))
    if guidance is not None:
        parts.append(guidance.reshape(n_batch, s * s, -1).astype(dtype, copy=False))
    return np.concatenate(parts, axis=-1)


def repr_forward(theta, layout, x):
    """Batched per-position chain.

    ``theta``: ``B x total``; ``x``: ``B x P x in``. Returns ``(out, acts)``
    where ``acts`` holds each layer's input and pre-activation for backward.
    """
    pieces = split_params(theta, layout)
    acts = []
    a = x
    for idx, (w, b) in enumerate(pieces):
        z = np.matmul(a, w.transpose(0, 2, 1)) + b[:, None, :]
        acts.append((a, z))
        a = ops.relu(z) if idx < len(pieces) - 1 else z
    return a, acts


def repr_backward(theta, layout, acts, dout):
    """Returns ``(dtheta, dx)`` for :func:`repr_forward`."""
    pieces = split_params(theta, layout)
    grads = [None] * len(pieces)
    dz = dout
    for idx in range(len(pieces) - 1, -1, -1):
        a, _ = acts[idx]
        w, _ = pieces[idx]
        grads[idx] = (np.matmul(dz.transpose(0, 2, 1), a), dz.sum(axis=1))
        da = np.matmul(dz, w)
        if idx > 0:
            dz = ops.relu_grad(acts[idx - 1][1], da)
    return join_params(grads), da


def eval_repr_network(theta, layout, coord_map=None, guidance_patch=None):
    """Evaluate ``g`` on one ``s x s`` grid; returns ``s x s x C`` logits."""
    if coord_map is None and guidance_patch is None:
        raise ContractError("need a coordinate map or a guidance patch")
    ref = coord_map if coord_map is not None else guidance_patch
    s = ref.shape[0]
    for m in (coord_map, guidance_patch):
        if m is not None and m.shape[:2] != (s, s):
            raise ContractError("coordinate and guidance maps must share their extent")
    theta = np.asarray(theta)
    n_in = (2 if coord_map is not None else 0) + (guidance_patch.shape[-1] if guidance_patch is not None else 0)
    if n_in != layout.layers[0].in_ch:
        raise ContractError(f"input has {n_in} channels, layout expects {layout.layers[0].in_ch}")
    dtype = np.result_type(theta.dtype, ref.dtype)
    x = _repr_inputs(coord_map, None if guidance_patch is None else guidance_patch[None], 1, s, dtype)
    out, _ = repr_forward(theta.reshape(1, -1).astype(dtype, copy=False), layout, x)
    return out.reshape(s, s, -1)


# ------------------------------------------------------------ patch plumbing


def extract_guidance_patches(guidance, s):
    """``(N) x (H'*s) x (W'*s) x Cm`` -> ``(N) x H' x W' x s x s x Cm``."""
    g, squeeze = ops._as_batch(guidance)
    n, h, w, c = g.shape
    if h % s or w % s:
        raise ContractError(f"guidance extent {h}x{w} not divisible by s={s}")
    p = g.reshape(n, h // s, s, w // s, s, c).transpose(0, 1, 3, 2, 4, 5)
    return p[0] if squeeze else p


def merge_patches(patches):
    """``(N) x H' x W' x r x r x C`` -> ``(N) x (H'*r) x (W'*r) x C``."""
    p = np.asarray(patches)
    squeeze = p.ndim == 5
    if squeeze:
        p = p[None]
    if p.ndim != 6:
        raise ContractError(f"expected 5-D or 6-D patches, got shape {p.shape}")
    n, hp, wp, r1, r2, c = p.shape
    out = p.transpose(0, 1, 3, 2, 4, 5).reshape(n, hp * r1, wp * r2, c)
    return out[0] if squeeze else out


def split_patches(x, r):
    """Inverse of :func:`merge_patches`."""
    return extract_guidance_patches(x, r)


assemble_guidance_patches = merge_patches


# -------------------------------------------------------------------- decode


def nrd_decode_fwd(theta_map, guidance, cfg, layout=None):
    """Batched decode. ``theta_map``: ``N x H' x W' x total``.

    Returns ``(logits, cache)``.
    """
    layout = layout or build_param_layout(cfg)
    n, hp, wp, total = theta_map.shape
    if total != layout.total:
        raise ContractError(f"theta map has {total} channels, layout needs {layout.total}")
    s, r = cfg.s, cfg.r
    dtype = theta_map.dtype
    patches = None
    if cfg.guidance_channels:
        if guidance is None:
            raise ContractError("config expects a guidance map")
        expected = (n, hp * s, wp * s, cfg.guidance_channels)
        if guidance.shape != expected:
            raise ContractError(f"guidance shape {guidance.shape} != {expected}")
        patches = extract_guidance_patches(guidance, s).reshape(n * hp * wp, s, s, -1)
    elif guidance is not None:
        raise ContractError("guidance given but config has guidance_channels=0")
    coords = make_coordinate_map(s, dtype) if cfg.use_coords else None
    bsz = n * hp * wp
    x = _repr_inputs(coords, patches, bsz, s, dtype)
    theta = theta_map.reshape(bsz, total)
    g, acts = repr_forward(theta, layout, x)
    g = g.reshape(bsz, s, s, cfg.num_classes)
    up = ops.bilinear_resize(g, r, r)
    logits = merge_patches(up.reshape(n, hp, wp, r, r, cfg.num_classes))
    cache = (theta, acts, layout, theta_map.shape, None if guidance is None else guidance.shape)
    return logits, cache


def nrd_decode_bwd(cache, dlogits, cfg):
    """Returns ``(dtheta_map, dguidance)``; ``dguidance`` is None without guidance."""
    theta, acts, layout, tshape, gshape = cache
    n, hp, wp, total = tshape
    s, r = cfg.s, cfg.r
    dup = split_patches(dlogits, r).reshape(n * hp * wp, r, r, cfg.num_classes)
    dg = ops.bilinear_resize_grad((s, s, cfg.num_classes), dup)
    dtheta, dx = repr_backward(theta, layout, acts, dg.reshape(n * hp * wp, s * s, cfg.num_classes))
    dguid = None
    if gshape is not None:
        off = 2 if cfg.use_coords else 0
        dp = dx[..., off:].reshape(n, hp, wp, s, s, cfg.guidance_channels)
        dguid = merge_patches(dp)
    return dtheta.reshape(tshape), dguid


def nrd_decode(theta_map, guidance, cfg):
    """Decode a ``(N) x H' x W' x total`` theta map into full-resolution logits."""
    tm = np.asarray(theta_map)
    squeeze = tm.ndim == 3
    if squeeze:
        tm = tm[None]
        guidance = None if guidance is None else np.asarray(guidance)[None]
    logits, _ = nrd_decode_fwd(tm, guidance, cfg)
    return logits[0] if squeeze else logits


def nrd_decode_grad(theta_map, guidance, cfg, dlogits):
    tm = np.asarray(theta_map)
    squeeze = tm.ndim == 3
    if squeeze:
        tm = tm[None]
        guidance = None if guidance is None else np.asarray(guidance)[None]
        dlogits = np.asarray(dlogits)[None]
    _, cache = nrd_decode_fwd(tm, guidance, cfg)
    dtheta, dguid = nrd_decode_bwd(cache, dlogits, cfg)
    if squeeze:
        dtheta = dtheta[0]
        dguid = None if dguid is None else dguid[0]
    return dtheta, dguid

"""Strided encoder, guidance head, controller and the assembled segmenter.

Parameter names (weights ``Cout x Cin x k x k``, biases ``Cout``)::

    enc.stage{1..5}.conv1.{w,b}   3x3 stride 2
    enc.stage{1..5}.conv2.{w,b}   3x3 stride 1
    enc.neck.{w,b}                1x1, only when ``neck`` is on
    guide.conv{1,2}.{w,b}         3x3, NRD with guidance
    ctrl.conv1.{w,b}              3x3 -> controller_hidden
    ctrl.conv2.{w,b}              1x1 -> layout.total
    head.bilinear.{w,b}           1x1 -> C
    head.duc.{w,b}                1x1 -> r*r*C

Shapes for an ``H x W`` input (``H, W`` divisible by 32)::

    stage l output    H/2^l x W/2^l x widths[l-1]
    low_level         H/4  x W/4  x widths[1]
    F                 H/32 x W/32 x widths[4]
    guidance          H/4  x W/4  x C_m
    theta map         H/32 x W/32 x layout.total
    logits            H    x W    x C
"""

from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import baselines, core, ops
from .tape import Tape, replay_backward
from .ops import ContractError

ENCODER_STRIDE = 32
LOW_LEVEL_STAGE = 2
DECODERS = ("nrd", "bilinear", "duc")


@dataclass(frozen=True)
class EncoderConfig:
    widths: tuple = (16, 32, 64, 128, 256)
    controller_hidden: int = 512
    guidance_hidden: int = 32
    neck: bool = False
    in_channels: int = 3

    def __post_init__(self):
        if len(self.widths) != 5:
            raise ContractError("the encoder has exactly five stride-2 stages")

    @property
    def out_channels(self):
        return self.widths[-1]

    @property
    def low_level_channels(self):
        return self.widths[LOW_LEVEL_STAGE - 1]


@dataclass(frozen=True)
class ModelConfig:
    decoder: str = "nrd"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    nrd: core.NrdConfig = field(default_factory=lambda: core.NrdConfig(r=ENCODER_STRIDE))

    def __post_init__(self):
        if self.decoder not in DECODERS:
            raise ContractError(f"unknown decoder {self.decoder!r}; choose from {DECODERS}")
        if self.nrd.r != ENCODER_STRIDE:
            raise ContractError(f"patch size must equal the encoder stride {ENCODER_STRIDE}")

    @property
    def num_classes(self):
        return self.nrd.num_classes

    @property
    def uses_guidance(self):
        return self.decoder == "nrd" and self.nrd.guidance_channels > 0


# --------------------------------------------------------------- param schema


def param_shapes(cfg):
    """Ordered ``name -> shape`` table, derivable from the config alone."""
    enc = cfg.encoder
    shapes = OrderedDict()

    def conv(name, cin, cout, k):
        shapes[name + ".w"] = (cout, cin, k, k)
        shapes[name + ".b"] = (cout,)

    cin = enc.in_channels
    for i, width in enumerate(enc.widths, start=1):
        conv(f"enc.stage{i}.conv1", cin, width, 3)
        conv(f"enc.stage{i}.conv2", width, width, 3)
        cin = width
    if enc.neck:
        conv("enc.neck", cin, cin, 1)
    c = cfg.num_classes
    if cfg.decoder == "nrd":
        if cfg.uses_guidance:
            conv("guide.conv1", enc.low_level_channels, enc.guidance_hidden, 3)
            conv("guide.conv2", enc.guidance_hidden, cfg.nrd.guidance_channels, 3)
        layout = core.build_param_layout(cfg.nrd)
        conv("ctrl.conv1", enc.out_channels, enc.controller_hidden, 3)
        conv("ctrl.conv2", enc.controller_hidden, layout.total, 1)
    elif cfg.decoder == "bilinear":
        conv("head.bilinear", enc.out_channels, c, 1)
    else:
        conv("head.duc", enc.out_channels, ENCODER_STRIDE * ENCODER_STRIDE * c, 1)
    return shapes


# layers whose output feeds a ReLU get He-uniform init, linear outputs LeCun-uniform
_LINEAR_OUTPUTS = ("guide.conv2", "head.bilinear", "head.duc")


def init_params(cfg, rng, dtype=None):
    dtype = dtype or ops.default_dtype()
    params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        layer, kind = name.rsplit(".", 1)
        if kind == "b":
            params[name] = np.zeros(shape, dtype=dtype)
        elif layer == "ctrl.conv2":
            params[name] = (0.01 * rng.standard_normal(shape)).astype(dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            gain = 3.0 if layer in _LINEAR_OUTPUTS else 6.0
            bound = np.sqrt(gain / fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return params


def check_params(cfg, params):
    expected = param_shapes(cfg)
    if list(params) != list(expected):
        missing = set(expected) - set(params)
        extra = set(params) - set(expected)
        raise ContractError(f"parameter schema mismatch; missing={sorted(missing)} extra={sorted(extra)}")
    for name, shape in expected.items():
        if tuple(params[name].shape) != shape:
            raise ContractError(f"{name}: shape {params[name].shape} != {shape}")


# ------------------------------------------------------------------- encoder


def _encoder(x, params, cfg, tape):
    if x.shape[1] % ENCODER_STRIDE or x.shape[2] % ENCODER_STRIDE:
        raise ContractError(f"input extent {x.shape[1]}x{x.shape[2]} must be divisible by {ENCODER_STRIDE}")
    low_level = None
    for i in range(1, 6):
        x = tape.relu(tape.conv(params, f"enc.stage{i}.conv1", x, stride=2))
        x = tape.relu(tape.conv(params, f"enc.stage{i}.conv2", x))
        if i == LOW_LEVEL_STAGE:
            low_level = x
            low_mark = len(tape.steps)
    if cfg.encoder.neck:
        x = tape.relu(tape.conv(params, "enc.neck", x))
    return x, low_level, low_mark


def encoder_forward(image, params, cfg):
    """Returns ``(F, low_level)`` for an ``(N) x H x W x 3`` image."""
    x, squeeze = ops._as_batch(image)
    f, low, _ = _encoder(x, params, cfg, Tape())
    return (f[0], low[0]) if squeeze else (f, low)


def guidance_head_forward(low_level, params, cfg=None):
    x, squeeze = ops._as_batch(low_level)
    tape = Tape()
    g = tape.conv(params, "guide.conv2", tape.relu(tape.conv(params, "guide.conv1", x)))
    return g[0] if squeeze else g


def controller_forward(features, params, layout=None):
    """``(N) x H' x W' x D`` features -> theta map with ``layout.total`` channels."""
    x, squeeze = ops._as_batch(features)
    if layout is not None and params["ctrl.conv2.w"].shape[0] != layout.total:
        raise ContractError(f"controller emits {params['ctrl.conv2.w'].shape[0]} values, layout needs {layout.total}")
    tape = Tape()
    t = tape.conv(params, "ctrl.conv2", tape.relu(tape.conv(params, "ctrl.conv1", x)))
    return t[0] if squeeze else t


# ------------------------------------------------------------- NRD decoder


def nrd_decoder_fwd(features, low_level, params, cfg):
    tape = Tape()
    guidance = None
    guide_steps = []
    if cfg.uses_guidance:
        gtape = Tape()
        guidance = gtape.conv(params, "guide.conv2", gtape.relu(gtape.conv(params, "guide.conv1", low_level)))
        guide_steps = gtape.steps
    theta = tape.conv(params, "ctrl.conv2", tape.relu(tape.conv(params, "ctrl.conv1", features)))
    logits, dcache = core.nrd_decode_fwd(theta, guidance, cfg.nrd)
    return logits, (tape.steps, guide_steps, dcache)


def nrd_decoder_bwd(params, cache, dlogits, cfg, grads):
    steps, guide_steps, dcache = cache
    dtheta, dguid = core.nrd_decode_bwd(dcache, dlogits, cfg.nrd)
    df = replay_backward(params, steps, dtheta, grads)
    dlow = None
    if guide_steps:
        dlow = replay_backward(params, guide_steps, dguid, grads)
    return df, dlow


def nrd_decoder(features, low_level, params, cfg):
    f, squeeze = ops._as_batch(features)
    low = None if low_level is None else ops._as_batch(low_level)[0]
    logits, _ = nrd_decoder_fwd(f, low, params, cfg)
    return logits[0] if squeeze else logits


_DECODER_FWD = {
    "nrd": nrd_decoder_fwd,
    "bilinear": baselines.bilinear_decoder_fwd,
    "duc": baselines.duc_decoder_fwd,
}
_DECODER_BWD = {
    "nrd": nrd_decoder_bwd,
    "bilinear": baselines.bilinear_decoder_bwd,
    "duc": baselines.duc_decoder_bwd,
}


# -------------------------------------------------------------- full model


def forward(params, images, cfg):
    """Full segmenter. Returns ``(logits, cache)`` for an ``N x H x W x 3`` batch."""
    tape = Tape()
    f, low, low_mark = _encoder(images, params, cfg, tape)
    logits, dcache = _DECODER_FWD[cfg.decoder](f, low, params, cfg)
    return logits, (tape.steps, low_mark, dcache)


def backward(params, cache, dlogits, cfg):
    """Parameter gradients, ordered like ``params``."""
    steps, low_mark, dcache = cache
    grads = {}
    df, dlow = _DECODER_BWD[cfg.decoder](params, dcache, dlogits, cfg, grads)
    # split the encoder tape at the low-level tap so its gradient joins there
    dx = replay_backward(params, steps[low_mark:], df, grads)
    if dlow is not None:
        dx = dx + dlow
    replay_backward(params, steps[:low_mark], dx, grads, need_input=False)
    return OrderedDict((name, grads[name].astype(params[name].dtype, copy=False)) for name in params)


def predict(params, images, cfg):
    logits, _ = forward(params, images, cfg)
    return logits.argmax(axis=-1)


def relu_pattern(params, images, cfg):
    """Sign pattern of every ReLU input in a forward pass, flattened.

    Finite-difference checks compare patterns at ``x + h`` and ``x - h`` to
    reject probes that straddle a kink.
    """
    logits, (steps, _, dcache) = forward(params, images, cfg)
    parts = [s[1].ravel() > 0 for s in steps if s[0] == "relu"]
    if cfg.decoder == "nrd":
        ctrl_steps, guide_steps, (_, acts, *_rest) = dcache
        parts += [s[1].ravel() > 0 for s in ctrl_steps + guide_steps if s[0] == "relu"]
        parts += [z.ravel() > 0 for _, z in acts[:-1]]
    return np.concatenate(parts)

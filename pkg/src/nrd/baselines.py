"""Comparison decoders: 1x1 conv + bilinear upsampling, and 1x1 conv + depth-to-space.

Both share the NRD decoder's signature ``(F, low_level, params, cfg)`` and
ignore ``low_level``.
"""

import enum

from . import ops
from .tape import Tape, replay_backward

STRIDE = 32


class BaselineKind(enum.Enum):
    BILINEAR = "bilinear"
    DEPTH_TO_SPACE = "duc"


def bilinear_decoder_fwd(features, low_level, params, cfg):
    tape = Tape()
    coarse = tape.conv(params, "head.bilinear", features)
    _, h, w, _ = coarse.shape
    logits = ops.bilinear_resize(coarse, h * STRIDE, w * STRIDE)
    return logits, (tape.steps, coarse.shape)


def bilinear_decoder_bwd(params, cache, dlogits, cfg, grads):
    steps, coarse_shape = cache
    dcoarse = ops.bilinear_resize_grad(coarse_shape, dlogits)
    return replay_backward(params, steps, dcoarse, grads), None


def duc_decoder_fwd(features, low_level, params, cfg):
    tape = Tape()
    packed = tape.conv(params, "head.duc", features)
    return ops.depth_to_space(packed, STRIDE), tape.steps


def duc_decoder_bwd(params, cache, dlogits, cfg, grads):
    dpacked = ops.depth_to_space_grad(dlogits, STRIDE)
    return replay_backward(params, cache, dpacked, grads), None


def _single(fwd, features, low_level, params, cfg):
    f, squeeze = ops._as_batch(features)
    logits, _ = fwd(f, None, params, cfg)
    return logits[0] if squeeze else logits


def bilinear_decoder(features, low_level, params, cfg):
    """1x1 conv to class logits, then bilinear upsampling by the encoder stride."""
    return _single(bilinear_decoder_fwd, features, low_level, params, cfg)


def duc_decoder(features, low_level, params, cfg):
    """1x1 conv to ``r*r*C`` channels, then depth-to-space by ``r``."""
    return _single(duc_decoder_fwd, features, low_level, params, cfg)


def duc_head_param_count(d, r, c):
    """``(weights, biases)`` of the depth-to-space head."""
    return d * r * r * c, r * r * c

"""Segmentation metrics and the symbolic decoder cost model.

Cost convention: one MAC per multiply-accumulate, reported 1:1 as a "FLOP".
Convolutions cost ``Ho*Wo*Cout*Cin*k*k``; the representational network costs
``H'*W'*s*s*sum(in*out)``; bilinear resizing costs 4 MACs per output value;
depth-to-space, ReLU and patch merging are free.
"""

import csv
import io
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import core
from .model import ENCODER_STRIDE, LOW_LEVEL_STAGE
from .ops import ContractError
from .tensors import IGNORE

# ---------------------------------------------------------------- confusion


def accumulate_confusion(pred, gt, num_classes, mask=None):
    """``C x C`` int64 counts, entry ``(g, p)``; IGNORE ground truth is skipped."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and ground truth {gt.shape} differ in extent")
    valid = gt != IGNORE
    if mask is not None:
        valid &= mask
    g = gt[valid].astype(np.int64)
    p = pred[valid].astype(np.int64)
    if g.size and (g.max() >= num_classes or p.max() >= num_classes or p.min() < 0 or g.min() < 0):
        raise ContractError("class id outside [0, C)")
    return np.bincount(g * num_classes + p, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def class_iou(cm):
    cm = np.asarray(cm, dtype=np.float64)
    diag = np.diag(cm)
    union = cm.sum(axis=1) + cm.sum(axis=0) - diag
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(union > 0, diag / np.where(union > 0, union, 1), np.nan)


def miou(cm):
    """Mean IoU over classes present in the ground truth; None for an empty matrix."""
    cm = np.asarray(cm)
    present = cm.sum(axis=1) > 0
    if not present.any():
        return None
    return float(np.mean(class_iou(cm)[present]))


# ------------------------------------------------------------------- trimap


def boundary_map(gt):
    """Pixels with a 4-neighbour of a different class; IGNORE on either side never counts."""
    gt = np.asarray(gt)
    b = np.zeros(gt.shape, dtype=bool)
    valid = gt != IGNORE
    vert = (gt[1:] != gt[:-1]) & valid[1:] & valid[:-1]
    horiz = (gt[:, 1:] != gt[:, :-1]) & valid[:, 1:] & valid[:, :-1]
    b[1:] |= vert
    b[:-1] |= vert
    b[:, 1:] |= horiz
    b[:, :-1] |= horiz
    return b


def trimap_mask(gt, width):
    """Pixels whose Chebyshev distance to the nearest boundary pixel is ``< width``."""
    if width < 1:
        raise ContractError("trimap width must be >= 1")
    b = boundary_map(gt)
    if not b.any():
        return b
    return ndimage.maximum_filter(b, size=2 * int(width) - 1, mode="constant", cval=False)


def trimap_confusion(pred, gt, num_classes, width):
    return accumulate_confusion(pred, gt, num_classes, mask=trimap_mask(gt, width))


# --------------------------------------------------------------- cost model


@dataclass
class CostReport:
    decoder: str
    height: int
    width: int
    components: OrderedDict = field(default_factory=OrderedDict)
    decoder_parts: tuple = ()

    @property
    def decoder_macs(self):
        return sum(v for k, v in self.components.items() if k in self.decoder_parts)

    @property
    def total(self):
        return sum(self.components.values())

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "macs"])
        for k, v in self.components.items():
            w.writerow([k, v])
        w.writerow(["decoder_total", self.decoder_macs])
        w.writerow(["total", self.total])
        return buf.getvalue()

    def pretty(self):
        lines = [f"decoder={self.decoder} input={self.height}x{self.width}"]
        for k, v in self.components.items():
            tag = " (decoder)" if k in self.decoder_parts else ""
            lines.append(f"  {k:<16}{v / 1e9:10.4f} GMACs{tag}")
        lines.append(f"  {'decoder total':<16}{self.decoder_macs / 1e9:10.4f} GMACs")
        lines.append(f"  {'total':<16}{self.total / 1e9:10.4f} GMACs")
        return "\n".join(lines)


def conv_macs(h_out, w_out, cin, cout, k):
    return h_out * w_out * cout * cin * k * k


def count_macs(model_cfg, height, width):
    """Symbolic per-component MAC counts for one ``height x width`` image."""
    if height % ENCODER_STRIDE or width % ENCODER_STRIDE:
        raise ContractError(f"extent {height}x{width} must be divisible by {ENCODER_STRIDE}")
    enc = model_cfg.encoder
    comp = OrderedDict()
    h, w, cin = height, width, enc.in_channels
    encoder = 0
    for i, cout in enumerate(enc.widths, start=1):
        h, w = h // 2, w // 2
        encoder += conv_macs(h, w, cin, cout, 3) + conv_macs(h, w, cout, cout, 3)
        cin = cout
        if i == LOW_LEVEL_STAGE:
            low_h, low_w = h, w
    comp["encoder"] = encoder
    if enc.neck:
        comp["neck"] = conv_macs(h, w, cin, cin, 1)
    d, c = enc.out_channels, model_cfg.num_classes
    if model_cfg.decoder == "nrd":
        nrd = model_cfg.nrd
        layout = core.build_param_layout(nrd)
        if model_cfg.uses_guidance:
            comp["guidance_head"] = conv_macs(low_h, low_w, enc.low_level_channels, enc.guidance_hidden, 3) + conv_macs(
                low_h, low_w, enc.guidance_hidden, nrd.guidance_channels, 3
            )
        comp["controller"] = conv_macs(h, w, d, enc.controller_hidden, 3) + conv_macs(
            h, w, enc.controller_hidden, layout.total, 1
        )
        comp["repr_network"] = h * w * nrd.s * nrd.s * layout.mult_per_position
        comp["upsample"] = 4 * height * width * c
        comp["merge"] = 0
    elif model_cfg.decoder == "bilinear":
        comp["head"] = conv_macs(h, w, d, c, 1)
        comp["upsample"] = 4 * height * width * c
    else:
        comp["head"] = conv_macs(h, w, d, ENCODER_STRIDE * ENCODER_STRIDE * c, 1)
        comp["depth_to_space"] = 0
    decoder_parts = tuple(k for k in comp if k not in ("encoder", "neck"))
    return CostReport(model_cfg.decoder, height, width, comp, decoder_parts)

"""SGD training loop, checkpoints and single-patch fitting.

Randomness comes from named streams of the run seed: ``init`` for parameter
initialisation, ``data/epoch<k>`` for the sample order of epoch ``k`` and
``augment/<iter>`` for the flips and crops of one iteration. Because every
stream is keyed by position rather than carried state, resuming from a
checkpoint replays exactly the batches an uninterrupted run would see.

Checkpoint entries: ``param/<name>``, ``opt/<name>`` (momentum buffers),
``meta/iter`` and ``meta/config`` (the run config as text).
"""

import logging
import os
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import config as config_mod
from . import core, evaluation, model, ops, tensors
from .tensors import IGNORE

log = logging.getLogger(__name__)

METRICS_HEADER = "iter,lr,loss,val_miou"


class TrainingDiverged(RuntimeError):
    pass


def poly_lr(it, max_iters, base_lr, power=0.9):
    if not 0 <= it <= max_iters:
        raise ValueError(f"iteration {it} outside [0, {max_iters}]")
    return base_lr * (1.0 - it / max_iters) ** power


@dataclass
class OptimizerState:
    buffers: OrderedDict = field(default_factory=OrderedDict)
    iteration: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(OrderedDict((k, np.zeros_like(v)) for k, v in params.items()))


def decays(name):
    # weights only; biases are exempt
    return name.endswith(".w")


def sgd_step(params, grads, state, lr, momentum=0.9, weight_decay=0.0):
    """Momentum SGD with L2 weight decay, in place; returns ``(params, state)``.

    ``g' = g + wd * p``, ``v = momentum * v + g'``, ``p = p - lr * v``.
    """
    if list(grads) != list(params) or list(state.buffers) != list(params):
        raise ValueError("params, grads and optimizer buffers must share names and order")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != {p.shape}")
        if weight_decay and decays(name):
            g = g + weight_decay * p
        v = state.buffers[name]
        v *= momentum
        v += g
        p -= p.dtype.type(lr) * v
    state.iteration += 1
    return params, state


# -------------------------------------------------------------- checkpoints


def save_checkpoint(path, params, state, run_cfg):
    entries = [(f"param/{k}", v) for k, v in params.items()]
    entries += [(f"opt/{k}", v) for k, v in state.buffers.items()]
    entries.append(("meta/iter", np.array(state.iteration, dtype=np.float64)))
    entries.append(("meta/config", tensors.text_to_tensor(config_mod.dump_config(run_cfg))))
    tensors.bundle_write(entries, path)


def load_checkpoint(path):
    """Returns ``(params, state, run_cfg)``."""
    b = tensors.bundle_read(path)
    params = OrderedDict((k[6:], v) for k, v in b.items() if k.startswith("param/"))
    buffers = OrderedDict((k[4:], v) for k, v in b.items() if k.startswith("opt/"))
    run_cfg = config_mod.parse_config(tensors.tensor_to_text(b["meta/config"]))
    state = OptimizerState(buffers, int(b["meta/iter"]))
    model.check_params(run_cfg.model_config(), params)
    return params, state, run_cfg


# --------------------------------------------------------------------- data


def pad_to_multiple(images, labels, multiple=32):
    """Pad extents up to ``multiple``: zeros for images, IGNORE for labels."""
    h, w = images.shape[1:3]
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        images = np.pad(images, ((0, 0), (0, ph), (0, pw), (0, 0)))
        labels = np.pad(labels, ((0, 0), (0, ph), (0, pw)), constant_values=IGNORE)
    return images, labels


def batch_indices(seed, it, n, batch_size):
    """Sample indices of iteration ``it``: consecutive slices of per-epoch permutations."""
    out = []
    pos = it * batch_size
    while len(out) < batch_size:
        epoch, offset = divmod(pos, n)
        perm = tensors.seeded_rng(seed, f"data/epoch{epoch}").permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(perm[offset : offset + take])
        pos += take
    return np.array(out)


def augment(images, labels, rng, crop, hflip=True):
    n, h, w, _ = images.shape
    out_i = np.zeros((n, crop, crop, images.shape[-1]), dtype=images.dtype)
    out_l = np.full((n, crop, crop), IGNORE, dtype=labels.dtype)
    for k in range(n):
        img, lbl = images[k], labels[k]
        if hflip and rng.random() < 0.5:
            img, lbl = img[:, ::-1], lbl[:, ::-1]
        y0 = int(rng.integers(0, h - crop + 1)) if h > crop else 0
        x0 = int(rng.integers(0, w - crop + 1)) if w > crop else 0
        ch, cw = min(crop, h), min(crop, w)
        out_i[k, :ch, :cw] = img[y0 : y0 + ch, x0 : x0 + cw]
        out_l[k, :ch, :cw] = lbl[y0 : y0 + ch, x0 : x0 + cw]
    return out_i, out_l


# --------------------------------------------------------------- evaluation


def evaluate(params, model_cfg, images, labels, trimap_width=3, batch_size=16):
    """Returns ``(miou, trimap_miou, cm, trimap_cm)`` over the given samples."""
    c = model_cfg.num_classes
    cm = np.zeros((c, c), dtype=np.int64)
    tcm = np.zeros((c, c), dtype=np.int64)
    h, w = images.shape[1:3]
    imgs, lbls = pad_to_multiple(images, labels)
    for start in range(0, len(imgs), batch_size):
        pred = model.predict(params, imgs[start : start + batch_size], model_cfg)[:, :h, :w]
        for p, g in zip(pred, labels[start : start + batch_size]):
            cm += evaluation.accumulate_confusion(p, g, c)
            tcm += evaluation.trimap_confusion(p, g, c, trimap_width)
    return evaluation.miou(cm), evaluation.miou(tcm), cm, tcm


# -------------------------------------------------------------------- train


def train(run_cfg, images, labels, out_dir, val=None, resume=None, on_iter=None):
    """Train from scratch (or from ``resume``) and write checkpoints and ``metrics.csv``.

    ``val`` is an optional ``(images, labels)`` pair evaluated every
    ``val_interval`` iterations and at the end. Returns ``(params, state)``.
    """
    run_cfg.validate()
    mcfg = run_cfg.model_config()
    if len(images) == 0:
        raise ValueError("training set is empty")
    if images.shape[1] % 32 or images.shape[2] % 32:
        images, labels = pad_to_multiple(images, labels)
    os.makedirs(out_dir, exist_ok=True)
    dtype = ops.default_dtype()

    if resume is not None:
        params, state, saved = load_checkpoint(resume)
        if config_mod.dump_config(saved) != config_mod.dump_config(run_cfg):
            raise ValueError("checkpoint config differs from the requested run config")
    else:
        params = model.init_params(mcfg, tensors.seeded_rng(run_cfg.seed, "init"), dtype)
        state = OptimizerState.zeros_like(params)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    if resume is None or not os.path.exists(metrics_path):
        with open(metrics_path, "w") as f:
            f.write(METRICS_HEADER + "\n")

    n = len(images)
    while state.iteration < run_cfg.max_iters:
        it = state.iteration
        idx = batch_indices(run_cfg.seed, it, n, run_cfg.batch_size)
        rng = tensors.seeded_rng(run_cfg.seed, f"augment/{it}")
        x, y = augment(images[idx], labels[idx], rng, run_cfg.crop, run_cfg.hflip)
        x = x.astype(dtype, copy=False)
        logits, cache = model.forward(params, x, mcfg)
        loss, dlogits, _ = ops.softmax_cross_entropy(logits, y)
        if not np.isfinite(loss):
            dump = os.path.join(out_dir, f"diverged_iter{it:06d}.nrdb")
            tensors.bundle_write([("images", x), ("labels", y.astype(np.float32))], dump)
            raise TrainingDiverged(f"non-finite loss at iteration {it}; batch written to {dump}")
        grads = model.backward(params, cache, dlogits.astype(dtype, copy=False), mcfg)
        lr = poly_lr(it, run_cfg.max_iters, run_cfg.base_lr, run_cfg.poly_power)
        sgd_step(params, grads, state, lr, run_cfg.momentum, run_cfg.weight_decay)

        done = state.iteration
        val_miou = ""
        last = done == run_cfg.max_iters
        if val is not None and len(val[0]) and (last or (run_cfg.val_interval and done % run_cfg.val_interval == 0)):
            m, _, _, _ = evaluate(params, mcfg, val[0], val[1], run_cfg.trimap_width)
            val_miou = "" if m is None else f"{m:.6f}"
        with open(metrics_path, "a") as f:
            f.write(f"{done},{lr:.8g},{loss:.6f},{val_miou}\n")
        if on_iter is not None:
            on_iter(done, loss)
        if run_cfg.checkpoint_interval and done % run_cfg.checkpoint_interval == 0 and not last:
            save_checkpoint(os.path.join(out_dir, f"ckpt_{done:06d}.nrdb"), params, state, run_cfg)

    save_checkpoint(os.path.join(out_dir, "final.nrdb"), params, state, run_cfg)
    return params, state


# ---------------------------------------------------------------- fit patch


def init_theta(layout, rng, dtype=np.float64):
    """He-uniform weights, zero biases, packed in the flat layout."""
    pieces = []
    for l in layout.layers:
        bound = np.sqrt(6.0 / l.in_ch)
        pieces.append((rng.uniform(-bound, bound, size=(l.out_ch, l.in_ch)), np.zeros(l.out_ch)))
    return core.join_params(pieces).astype(dtype)


def fit_patch(patch, nrd_cfg, steps=500, lr=0.1, momentum=0.9, seed=0, guidance_patch=None):
    """Fit one flat theta directly to an ``r x r`` label patch.

    Returns ``(theta, accuracy, losses)`` where ``accuracy[k]`` is the pixel
    accuracy after ``k`` updates (``accuracy[0]`` is the initial network).
    """
    patch = np.asarray(patch).astype(np.int64)
    r = nrd_cfg.r
    if patch.shape != (r, r):
        raise ValueError(f"patch must be {r}x{r}, got {patch.shape}")
    layout = core.build_param_layout(nrd_cfg)
    theta = init_theta(layout, tensors.seeded_rng(seed, "fit_patch/init"))
    if nrd_cfg.guidance_channels:
        if guidance_patch is None:
            guidance_patch = np.zeros((nrd_cfg.s, nrd_cfg.s, nrd_cfg.guidance_channels))
        guidance = np.asarray(guidance_patch, dtype=np.float64)[None]
    else:
        guidance = None
    velocity = np.zeros_like(theta)
    valid = patch != IGNORE
    accuracy, losses = [], []
    for step in range(steps + 1):
        logits, cache = core.nrd_decode_fwd(theta[None, None, None], guidance, nrd_cfg, layout)
        pred = logits[0].argmax(axis=-1)
        accuracy.append(float(np.mean(pred[valid] == patch[valid])) if valid.any() else 1.0)
        loss, dlogits, _ = ops.softmax_cross_entropy(logits, patch[None])
        losses.append(loss)
        if step == steps:
            break
        dtheta, _ = core.nrd_decode_bwd(cache, dlogits, nrd_cfg)
        velocity = momentum * velocity + dtheta[0, 0, 0]
        theta = theta - lr * velocity
    return theta, np.array(accuracy), np.array(losses)

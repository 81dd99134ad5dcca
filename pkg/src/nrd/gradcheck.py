"""Central finite-difference checks for every differentiable op.

Each case builds a random float64 instance and a scalar loss (a random linear
readout of the op's output, or the op itself for the loss function), the
analytic gradients, and optionally a ReLU sign-pattern probe. A probe whose
``x + h`` and ``x - h`` patterns differ straddles a kink and is redrawn.
"""

from dataclasses import dataclass

import numpy as np

from . import baselines, core, model, ops

STEP = 1e-5
TOLERANCE = 1e-4
# gradients smaller than this are compared in absolute terms
SCALE_FLOOR = 1e-6


@dataclass
class Instance:
    args: dict
    loss: object
    grads: dict
    pattern: object = None


@dataclass
class CheckReport:
    op: str
    trials: int
    probes: int
    max_rel_error: float

    @property
    def passed(self):
        return self.max_rel_error < TOLERANCE


def _readout(rng, shape):
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------- cases


def _conv_case(k, stride):
    def make(rng):
        h, w = rng.integers(3, 7, size=2)
        cin, cout = rng.integers(1, 5, size=2)
        spec = ops.ConvSpec(int(cin), int(cout), k, stride)
        x = rng.standard_normal((int(h), int(w), int(cin)))
        wt = rng.standard_normal(spec.weight_shape)
        b = rng.standard_normal(cout)
        out = ops.conv2d(x, spec, wt, b)
        r = _readout(rng, out.shape)

        def loss(a):
            return float(np.sum(ops.conv2d(a["x"], spec, a["w"], a["b"]) * r))

        g = ops.conv2d_grad(x, spec, wt, b, r)
        return Instance({"x": x, "w": wt, "b": b}, loss, {"x": g.d_input, "w": g.d_weights, "b": g.d_bias})

    return make


def _relu_case(rng):
    x = rng.standard_normal((4, 5, 3))
    # keep every entry at least 1e-3 away from the kink
    x = np.where(np.abs(x) < 1e-3, np.sign(x) * 1e-3 + 1e-3 * (x == 0), x)
    r = _readout(rng, x.shape)
    return Instance(
        {"x": x},
        lambda a: float(np.sum(ops.relu(a["x"]) * r)),
        {"x": ops.relu_grad(x, r)},
        lambda a: a["x"].ravel() > 0,
    )


def _bilinear_case(rng):
    h, w, oh, ow = (int(v) for v in rng.integers(1, 9, size=4))
    x = rng.standard_normal((h, w, 3))
    r = _readout(rng, (oh, ow, 3))
    return Instance(
        {"x": x},
        lambda a: float(np.sum(ops.bilinear_resize(a["x"], oh, ow) * r)),
        {"x": ops.bilinear_resize_grad(x.shape, r)},
    )


def _depth_to_space_case(rng):
    f = int(rng.integers(1, 4))
    x = rng.standard_normal((2, 3, f * f * 2))
    r = _readout(rng, (2 * f, 3 * f, 2))
    return Instance(
        {"x": x},
        lambda a: float(np.sum(ops.depth_to_space(a["x"], f) * r)),
        {"x": ops.depth_to_space_grad(r, f)},
    )


def _cross_entropy_case(rng):
    logits = 2 * rng.standard_normal((4, 4, 3))
    labels = rng.integers(0, 3, size=(4, 4))
    labels[rng.integers(0, 4), rng.integers(0, 4)] = 255
    _, g, _ = ops.softmax_cross_entropy(logits, labels)
    return Instance(
        {"logits": logits},
        lambda a: ops.softmax_cross_entropy(a["logits"], labels)[0],
        {"logits": g},
    )


def _repr_case(rng):
    cfg = core.NrdConfig(r=16, num_classes=5, hidden=4, guidance_channels=3)
    layout = core.build_param_layout(cfg)
    theta = rng.standard_normal(layout.total)
    q = core.make_coordinate_map(cfg.s, np.float64)
    m = rng.standard_normal((cfg.s, cfg.s, 3))
    r = _readout(rng, (cfg.s, cfg.s, 5))
    x = np.concatenate([q, m], axis=-1).reshape(1, -1, 5)
    _, acts = core.repr_forward(theta[None], layout, x)
    dtheta, dx = core.repr_backward(theta[None], layout, acts, r.reshape(1, -1, 5))

    def pattern(a):
        xi = np.concatenate([q, a["guidance"]], axis=-1).reshape(1, -1, 5)
        _, ac = core.repr_forward(a["theta"][None], layout, xi)
        return np.concatenate([z.ravel() > 0 for _, z in ac[:-1]])

    return Instance(
        {"theta": theta, "guidance": m},
        lambda a: float(np.sum(core.eval_repr_network(a["theta"], layout, q, a["guidance"]) * r)),
        {"theta": dtheta[0], "guidance": dx[0, :, 2:].reshape(m.shape)},
        pattern,
    )


def _decode_case(rng):
    cfg = core.NrdConfig(r=8, num_classes=3, hidden=4, guidance_channels=2)
    layout = core.build_param_layout(cfg)
    theta = rng.standard_normal((2, 2, layout.total))
    guid = rng.standard_normal((2 * cfg.s, 2 * cfg.s, 2))
    r = _readout(rng, (16, 16, 3))
    dtheta, dguid = core.nrd_decode_grad(theta, guid, cfg, r)

    def pattern(a):
        _, cache = core.nrd_decode_fwd(a["theta"][None], a["guidance"][None], cfg)
        return np.concatenate([z.ravel() > 0 for _, z in cache[1][:-1]])

    return Instance(
        {"theta": theta, "guidance": guid},
        lambda a: float(np.sum(core.nrd_decode(a["theta"], a["guidance"], cfg) * r)),
        {"theta": dtheta, "guidance": dguid},
        pattern,
    )


def tiny_model_config(decoder="nrd", guidance_channels=2, classes=3):
    return model.ModelConfig(
        decoder=decoder,
        encoder=model.EncoderConfig(widths=(3, 4, 4, 5, 6), controller_hidden=5, guidance_hidden=3),
        nrd=core.NrdConfig(r=32, num_classes=classes, hidden=4, guidance_channels=guidance_channels),
    )


def _model_case(decoder, guidance_channels=2):
    def make(rng):
        cfg = tiny_model_config(decoder, guidance_channels)
        params = model.init_params(cfg, rng, np.float64)
        # lift the near-zero controller output so every path carries signal
        for k in params:
            params[k] = params[k] + 0.1 * rng.standard_normal(params[k].shape)
        x = rng.standard_normal((1, 32, 32, 3))
        labels = rng.integers(0, 3, size=(1, 32, 32))
        labels[0, :2, :2] = 255
        logits, cache = model.forward(params, x, cfg)
        _, dl, _ = ops.softmax_cross_entropy(logits, labels)
        grads = model.backward(params, cache, dl, cfg)

        def loss(a):
            lg, _ = model.forward(a, x, cfg)
            return ops.softmax_cross_entropy(lg, labels)[0]

        return Instance(dict(params), loss, dict(grads), lambda a: model.relu_pattern(a, x, cfg))

    return make


def _encoder_case(rng):
    cfg = tiny_model_config("bilinear")
    params = model.init_params(cfg, rng, np.float64)
    x = rng.standard_normal((1, 32, 32, 3))
    r = _readout(rng, (1, 1, 1, 6))

    def loss(a):
        f, _ = model.encoder_forward(x, a, cfg)
        return float(np.sum(f * r))

    # readout of F only, replayed in two halves split at the low-level tap like the full model
    tape = model.Tape()
    _, _, mark = model._encoder(x, params, cfg, tape)
    grads = {}
    dx = model.replay_backward(params, tape.steps[mark:], r, grads)
    model.replay_backward(params, tape.steps[:mark], dx, grads, need_input=False)
    names = [n for n in params if n.startswith("enc.stage1.")]
    return Instance(dict(params), loss, {n: grads[n] for n in names}, lambda a: _encoder_pattern(a, x, cfg))


def _encoder_pattern(params, x, cfg):
    tape = model.Tape()
    model._encoder(x, params, cfg, tape)
    return np.concatenate([s[1].ravel() > 0 for s in tape.steps if s[0] == "relu"])


def _guidance_case(rng):
    cfg = tiny_model_config("nrd", guidance_channels=3)
    params = model.init_params(cfg, rng, np.float64)
    names = ["guide.conv1.w", "guide.conv1.b", "guide.conv2.w", "guide.conv2.b"]
    sub = {n: params[n] for n in names}
    low = rng.standard_normal((8, 8, 4))
    r = _readout(rng, (8, 8, 3))
    tape = model.Tape()
    tape.conv(sub, "guide.conv2", tape.relu(tape.conv(sub, "guide.conv1", low[None])))
    grads = {}
    dlow = model.replay_backward(sub, tape.steps, r[None], grads)
    args = dict(sub)
    args["low_level"] = low
    grads["low_level"] = dlow[0]

    def loss(a):
        return float(np.sum(model.guidance_head_forward(a["low_level"], a) * r))

    def pattern(a):
        t = model.Tape()
        t.conv(a, "guide.conv2", t.relu(t.conv(a, "guide.conv1", a["low_level"][None])))
        return t.steps[1][1].ravel() > 0

    return Instance(args, loss, grads, pattern)


def _baseline_case(decoder):
    def make(rng):
        cfg = tiny_model_config(decoder)
        params = model.init_params(cfg, rng, np.float64)
        head = [n for n in params if n.startswith("head.")]
        sub = {n: params[n] for n in head}
        feats = rng.standard_normal((1, 2, 2, 6))
        fwd = baselines.bilinear_decoder_fwd if decoder == "bilinear" else baselines.duc_decoder_fwd
        bwd = baselines.bilinear_decoder_bwd if decoder == "bilinear" else baselines.duc_decoder_bwd
        logits, cache = fwd(feats, None, sub, cfg)
        r = _readout(rng, logits.shape)
        grads = {}
        dfeat, _ = bwd(sub, cache, r, cfg, grads)
        args = dict(sub)
        args["features"] = feats
        grads["features"] = dfeat

        def loss(a):
            return float(np.sum(fwd(a["features"], None, a, cfg)[0] * r))

        return Instance(args, loss, grads)

    return make


CASES = {
    "conv2d_1x1": _conv_case(1, 1),
    "conv2d_3x3": _conv_case(3, 1),
    "conv2d_3x3_s2": _conv_case(3, 2),
    "relu": _relu_case,
    "bilinear_resize": _bilinear_case,
    "depth_to_space": _depth_to_space_case,
    "softmax_cross_entropy": _cross_entropy_case,
    "eval_repr_network": _repr_case,
    "nrd_decode": _decode_case,
    "encoder": _encoder_case,
    "guidance_head": _guidance_case,
    "bilinear_decoder": _baseline_case("bilinear"),
    "duc_decoder": _baseline_case("duc"),
    "model_nrd": _model_case("nrd", 2),
    "model_nrd_coords": _model_case("nrd", 0),
    "model_bilinear": _model_case("bilinear"),
    "model_duc": _model_case("duc"),
}


# ----------------------------------------------------------------- the check


def _probe(inst, name, idx, step):
    args = {k: v.copy() if k == name else v for k, v in inst.args.items()}
    base = args[name][idx]
    args[name][idx] = base + step
    f_plus = inst.loss(args)
    pat_plus = inst.pattern(args) if inst.pattern else None
    args[name][idx] = base - step
    f_minus = inst.loss(args)
    if inst.pattern is not None and not np.array_equal(pat_plus, inst.pattern(args)):
        return None
    return (f_plus - f_minus) / (2 * step)


def relative_error(numeric, analytic):
    return abs(numeric - analytic) / max(abs(numeric), abs(analytic), SCALE_FLOOR)


def check_op(op, trials=20, probes_per_arg=2, seed=0, step=STEP):
    """Run ``trials`` random instances of ``op``; returns a :class:`CheckReport`."""
    rng = np.random.default_rng([seed, sorted(CASES).index(op)])
    worst = 0.0
    probes = 0
    with ops.precision("real64"):
        for _ in range(trials):
            inst = CASES[op](rng)
            for name, grad in inst.grads.items():
                arr = inst.args[name]
                done = attempts = 0
                while done < probes_per_arg and attempts < 50 * probes_per_arg:
                    attempts += 1
                    idx = tuple(int(rng.integers(0, n)) for n in arr.shape)
                    numeric = _probe(inst, name, idx, step)
                    if numeric is None:
                        continue
                    worst = max(worst, relative_error(numeric, float(np.asarray(grad)[idx])))
                    done += 1
                    probes += 1
    return CheckReport(op, trials, probes, worst)


def run_suite(op="all", trials=20, seed=0):
    names = sorted(CASES) if op == "all" else [op]
    for name in names:
        if name not in CASES:
            raise KeyError(f"unknown op {name!r}; known: {', '.join(sorted(CASES))}")
    return [check_op(name, trials=trials, seed=seed) for name in names]

"""Minimal record-and-replay of conv/ReLU chains for backpropagation."""

from . import ops


class Tape:
    """Records conv/relu steps so the backward pass can replay them."""

    def __init__(self):
        self.steps = []

    def conv(self, params, name, x, stride=1):
        w, b = params[name + ".w"], params[name + ".b"]
        out, cols = ops.conv2d_fwd(x, w, b, stride)
        self.steps.append(("conv", name, stride, x.shape, cols))
        return out

    def relu(self, x):
        self.steps.append(("relu", x))
        return ops.relu(x)


def replay_backward(params, steps, dout, grads, need_input=True):
    """Walk ``steps`` in reverse, accumulating parameter gradients in ``grads``."""
    for i in range(len(steps) - 1, -1, -1):
        step = steps[i]
        if step[0] == "relu":
            dout = ops.relu_grad(step[1], dout)
            continue
        _, name, stride, x_shape, cols = step
        first = i == 0
        dx, dw, db = ops.conv2d_bwd(x_shape, cols, params[name + ".w"], stride, dout, need_input or not first)
        grads[name + ".w"] = grads.get(name + ".w", 0) + dw
        grads[name + ".b"] = grads.get(name + ".b", 0) + db
        dout = dx
    return dout

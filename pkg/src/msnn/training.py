"""Squared-error backpropagation for the multi-subspace network.

Sensitivities are derivatives of the per-sample loss with respect to a
layer's pre-activation. The single-sample functions below cover every
layer adjacency; :func:`batch_gradients` is the vectorized path used for
training and is checked against :func:`sample_gradients`.
"""
import csv
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from .network import FcStage, as_activation, forward_batch, network_forward
from .tensor import DimensionError, full_convolve, full_cross_correlate, upsample_uniform

log = logging.getLogger(__name__)


class TrainingError(ValueError):
    pass


def loss(y, t):
    y = np.asarray(y, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if y.shape != t.shape:
        raise DimensionError(f"prediction {y.shape} and target {t.shape} differ")
    return 0.5 * float(((t - y) ** 2).sum())


def output_sensitivity(u_out, t, f):
    f = as_activation(f)
    u_out = np.asarray(u_out, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if u_out.shape != t.shape:
        raise DimensionError(f"output {u_out.shape} and target {t.shape} differ")
    return (f(u_out) - t) * f.deriv(u_out)


def fc_backward(eps_above, stage_above, u_here, f):
    """``(W_above^T eps_above) * f'(u_here)``."""
    eps_above = np.asarray(eps_above, dtype=np.float64)
    if eps_above.shape != (stage_above.out_dim,):
        raise DimensionError(f"sensitivity {eps_above.shape} vs stage output {stage_above.out_dim}")
    return (stage_above.weights.T @ eps_above) * as_activation(f).deriv(u_here)


def fc_param_grads(eps, x_below):
    eps = np.asarray(eps, dtype=np.float64)
    return np.outer(eps, x_below), eps.copy()


def pool_backward(eps_above, context, *, stage=None, shapes=None, kernels=None):
    """Sensitivity of a pooling layer's output maps.

    ``context`` names the layer fed by the pooling output:

    ``"fc"``
        ``eps_above`` is the next stage's sensitivity; ``W^T eps`` is cut into
        maps of the given ``shapes``. Pooling has no activation, so there is no
        derivative factor.
    ``"merging"``
        ``eps_above`` is the merge layer's sensitivity map; map ``j`` receives
        its full correlation with merge kernel ``j``.
    ``"inner_product"``
        ``eps_above`` is a list of ``n`` sensitivity maps of an inner-product
        layer; their full convolutions with the mean-removed kernels are summed
        into one map (window demeaning equals correlating with a zero-mean kernel).
    """
    if context == "fc":
        flat = stage.weights.T @ np.asarray(eps_above, dtype=np.float64)
        out, pos = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            out.append(flat[pos:pos + size].reshape(shape))
            pos += size
        if pos != len(flat):
            raise DimensionError(f"map shapes cover {pos} of {len(flat)} units")
        return out
    if context == "merging":
        return [full_cross_correlate(eps_above, kern) for kern in kernels]
    if context == "inner_product":
        return [sum(full_convolve(e, kern - kern.mean()) for e, kern in zip(eps_above, kernels))]
    raise ValueError(f"unknown layer context {context!r}")


def merge_backward(eps_above, context, u_merge, f, *, pool_scale=None, stage=None,
                   kernels=None):
    """Sensitivity of the merge layer's pre-activation.

    ``"pooling"`` above: the average-pool Jacobian spreads each unit evenly,
    ``upsample(eps, p) / p**2``. ``"fc"`` above: ``W^T eps`` reshaped to the
    map. ``"inner_product"`` above: summed full convolutions with the
    mean-removed kernels. Each case is multiplied by ``f'(u_merge)``.
    """
    fprime = as_activation(f).deriv(u_merge)
    if context == "pooling":
        grad = upsample_uniform(eps_above, pool_scale, 1.0 / pool_scale ** 2)
    elif context == "fc":
        grad = (stage.weights.T @ np.asarray(eps_above, dtype=np.float64)).reshape(u_merge.shape)
    elif context == "inner_product":
        grad = sum(full_convolve(e, kern - kern.mean()) for e, kern in zip(eps_above, kernels))
    else:
        raise ValueError(f"unknown layer context {context!r}")
    if grad.shape != np.shape(u_merge):
        raise DimensionError(f"sensitivity {grad.shape} does not match merge map {np.shape(u_merge)}")
    return grad * fprime


def merge_param_grads(eps_merge, pooled_inputs):
    """Kernel and bias gradients of a merge layer.

    ``d_kernel[a, b] = sum_uv eps[u, v] * pooled[u + k-1-a, v + k-1-b]``: the
    sensitivity correlated with the input, then flipped, because the forward
    pass convolves (flips) the kernel.
    """
    eps_merge = np.asarray(eps_merge, dtype=np.float64)
    m = eps_merge.shape[0]
    d_kernels = []
    for pooled in pooled_inputs:
        k = pooled.shape[0] - m + 1
        if k < 1 or pooled.shape[1] - eps_merge.shape[1] + 1 != k:
            raise DimensionError(f"pooled map {pooled.shape} inconsistent with sensitivity {eps_merge.shape}")
        g = np.empty((k, k))
        for a in range(k):
            for b in range(k):
                g[a, b] = (eps_merge * pooled[a:a + m, b:b + eps_merge.shape[1]]).sum()
        d_kernels.append(g[::-1, ::-1].copy())
    return d_kernels, float(eps_merge.sum())


@dataclass
class Gradients:
    merge_kernels: np.ndarray  # (B, n, k, k)
    merge_bias: np.ndarray     # (B,)
    hidden_w: np.ndarray
    hidden_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray

    names = ("merge_kernels", "merge_bias", "hidden_w", "hidden_b", "out_w", "out_b")

    def __add__(self, other):
        return Gradients(*(getattr(self, n) + getattr(other, n) for n in self.names))

    def scale(self, c):
        return Gradients(*(getattr(self, n) * c for n in self.names))


def sample_gradients(net, image, target):
    """Per-sample gradients assembled from the layer-wise sensitivity functions."""
    f = net.activation
    tr = network_forward(image, net)
    hidden = FcStage(net.hidden_w, net.hidden_b, f)
    output = FcStage(net.out_w, net.out_b, f)
    eps_out = output_sensitivity(tr.out_u, target, f)
    d_out_w, d_out_b = fc_param_grads(eps_out, tr.hidden_x)
    eps_hidden = fc_backward(eps_out, output, tr.hidden_u, f)
    d_hidden_w, d_hidden_b = fc_param_grads(eps_hidden, tr.features)
    eps_pool2 = pool_backward(eps_hidden, "fc", stage=hidden,
                              shapes=[bt.out.shape for bt in tr.blocks])
    d_kernels, d_bias = [], []
    p = net.arch.pool_scale
    for bt, eps in zip(tr.blocks, eps_pool2):
        eps_m = merge_backward(eps, "pooling", bt.merge_u, f, pool_scale=p)
        dk, db = merge_param_grads(eps_m, bt.pooled)
        d_kernels.append(np.stack(dk))
        d_bias.append(db)
    return Gradients(np.stack(d_kernels), np.array(d_bias), d_hidden_w, d_hidden_b,
                     d_out_w, d_out_b)


def batch_gradients(net, images, targets, trace=None):
    """Mean gradients over a batch; returns ``(grads, per-sample losses, trace)``."""
    targets = np.asarray(targets, dtype=np.float64)
    f = net.activation
    a = net.arch
    p, k = a.pool_scale, a.kernel_side
    tr = forward_batch(net, images) if trace is None else trace
    count = len(targets)
    losses = 0.5 * ((targets - tr.y) ** 2).sum(axis=1)
    eps_out = (tr.y - targets) * f.deriv(tr.out_u)
    d_out_w = eps_out.T @ tr.hidden_x / count
    d_out_b = eps_out.mean(axis=0)
    eps_hidden = (eps_out @ net.out_w) * f.deriv(tr.hidden_u)
    d_hidden_w = eps_hidden.T @ tr.features / count
    d_hidden_b = eps_hidden.mean(axis=0)
    m3 = a.sides()[3]
    eps_pool2 = (eps_hidden @ net.hidden_w).reshape(count, a.block_count, m3, m3)
    eps_m = np.repeat(np.repeat(eps_pool2, p, axis=2), p, axis=3) / p ** 2
    eps_m *= f.deriv(tr.merge_u)
    d_bias = eps_m.sum(axis=(2, 3)).mean(axis=0)
    m2 = eps_m.shape[-1]
    g = np.empty(net.merge_kernels.shape)
    for r in range(k):
        for c in range(k):
            g[:, :, r, c] = np.einsum("zbuv,zbjuv->bj", eps_m, tr.pooled[..., r:r + m2, c:c + m2])
    d_kernels = g[:, :, ::-1, ::-1] / count
    grads = Gradients(np.ascontiguousarray(d_kernels), d_bias, d_hidden_w, d_hidden_b,
                      d_out_w, d_out_b)
    return grads, losses, tr


def sgd_step(net, grads, eta):
    """In-place ``p -= eta * g`` on every trainable array; ip kernels are never touched."""
    for name in Gradients.names:
        param = getattr(net, name)
        param -= eta * getattr(grads, name)
    return net


def one_hot_matrix(labels, class_count):
    labels = np.asarray(labels)
    out = np.zeros((len(labels), class_count))
    out[np.arange(len(labels)), labels] = 1.0
    return out


@dataclass
class SgdSchedule:
    epochs: int
    batch_size: int
    eta0: float
    decay: float

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.eta0 <= 0 or self.decay < 0:
            raise TrainingError(f"invalid SGD schedule {self}")

    def rate(self, epoch):
        return self.eta0 * math.exp(-self.decay * epoch)


@dataclass
class EpochMetrics:
    epoch: int
    eta: float
    mean_loss: float
    train_error_rate: float
    wall_seconds: float


def train_msnn(net, images, labels, sched, seed, on_epoch=None):
    """Mini-batch gradient descent for ``sched.epochs`` epochs (modifies ``net``).

    Loss and error per epoch are accumulated from the forward passes made
    during the epoch, i.e. before each batch's update.
    """
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if len(images) == 0:
        raise TrainingError("empty training set")
    targets = one_hot_matrix(labels, net.arch.class_count)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(sched.epochs):
        start = time.perf_counter()
        eta = sched.rate(epoch)
        order = rng.permutation(len(images))
        loss_sum, wrong = 0.0, 0
        for i in range(0, len(order), sched.batch_size):
            idx = order[i:i + sched.batch_size]
            grads, losses, tr = batch_gradients(net, images[idx], targets[idx])
            loss_sum += losses.sum()
            wrong += int((np.argmax(tr.y, axis=1) != labels[idx]).sum())
            sgd_step(net, grads, eta)
        m = EpochMetrics(epoch, eta, loss_sum / len(images), wrong / len(images),
                         time.perf_counter() - start)
        history.append(m)
        log.debug("epoch %d eta=%.4f loss=%.5f err=%.4f", epoch, eta, m.mean_loss,
                  m.train_error_rate)
        if on_epoch is not None:
            on_epoch(m)
    return net, history


METRIC_COLUMNS = ("epoch", "eta", "mean_loss", "train_error_rate", "wall_seconds")


def write_metrics_csv(history, path):
    """Per-epoch metrics; every column except ``wall_seconds`` is reproducible bitwise."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(METRIC_COLUMNS)
        for m in history:
            w.writerow([m.epoch, repr(m.eta), repr(m.mean_loss), repr(m.train_error_rate),
                        f"{m.wall_seconds:.3f}"])

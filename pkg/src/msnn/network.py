"""Multi-subspace network: parallel inner-product/pool/merge/pool blocks feeding
shared fully-connected stages.

Block parameters are stored stacked across blocks (``(B, n, k, k)`` kernel
arrays) so whole mini-batches can be pushed through with a handful of numpy
calls; :class:`Block` gives a per-block view for the single-image path.
"""
import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .tensor import (DimensionError, avg_downsample, gram_schmidt, valid_convolve,
                     valid_cross_correlate)

CHECKPOINT_MAGIC = b"MSNN"
CHECKPOINT_VERSION = 1


class Activation:
    """Elementwise transfer function with its analytic derivative."""

    def __init__(self, name):
        if name not in ("logistic", "tanh", "identity"):
            raise ValueError(f"unknown activation {name!r}")
        self.name = name

    def __call__(self, u):
        if self.name == "logistic":
            return expit(u)
        if self.name == "tanh":
            return np.tanh(u)
        return np.array(u, dtype=np.float64, copy=True)

    def deriv(self, u):
        if self.name == "logistic":
            y = expit(u)
            return y * (1.0 - y)
        if self.name == "tanh":
            return 1.0 - np.tanh(u) ** 2
        return np.ones_like(np.asarray(u, dtype=np.float64))

    def __eq__(self, other):
        return isinstance(other, Activation) and other.name == self.name

    def __repr__(self):
        return f"Activation({self.name!r})"


def as_activation(f):
    return f if isinstance(f, Activation) else Activation(f)


@dataclass(frozen=True)
class Architecture:
    """Block layout ``s x s - nIPk - Pp - 1Mk - Pp - F`` plus block and class counts."""
    input_side: int
    kernel_side: int
    kernel_count: int
    pool_scale: int
    block_count: int
    fc_hidden: int
    class_count: int

    def sides(self):
        """Side lengths ``(ip, pool1, merge, pool2)``; raises if any layer is invalid."""
        s, k, p = self.input_side, self.kernel_side, self.pool_scale
        if min(s, k, p, self.kernel_count, self.block_count, self.fc_hidden, self.class_count) < 1:
            raise DimensionError(f"architecture sizes must be positive: {self}")
        if self.kernel_count > k * k:
            raise DimensionError(f"{self.kernel_count} kernels exceed receptive-field dimension {k * k}")
        ip = s - k + 1
        if ip < 1:
            raise DimensionError(f"inner-product layer: kernel {k} larger than input {s}")
        if ip % p:
            raise DimensionError(f"first pooling layer: side {ip} not divisible by {p}")
        pool1 = ip // p
        merge = pool1 - k + 1
        if merge < 1:
            raise DimensionError(f"merging layer: kernel {k} larger than pooled side {pool1}")
        if merge % p:
            raise DimensionError(f"second pooling layer: side {merge} not divisible by {p}")
        return ip, pool1, merge, merge // p

    @property
    def block_features(self):
        return self.sides()[3] ** 2

    @property
    def feature_count(self):
        return self.block_count * self.block_features

    def describe(self):
        k, n, p = self.kernel_side, self.kernel_count, self.pool_scale
        s = self.input_side
        return f"{self.block_count}x {s}x{s}-{n}IP{k}-P{p}-1M{k}-P{p}-F{self.fc_hidden}"


@dataclass
class Block:
    ip_kernels: np.ndarray     # (n, k, k), frozen
    merge_kernels: np.ndarray  # (n, k, k)
    merge_bias: float
    pool_scale: int


@dataclass
class FcStage:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray     # (out,)
    activation: Activation

    @property
    def in_dim(self):
        return self.weights.shape[1]

    @property
    def out_dim(self):
        return self.weights.shape[0]


@dataclass
class MsnnNetwork:
    arch: Architecture
    ip_kernels: np.ndarray     # (B, n, k, k)
    merge_kernels: np.ndarray  # (B, n, k, k)
    merge_bias: np.ndarray     # (B,)
    hidden_w: np.ndarray       # (F, B*m*m)
    hidden_b: np.ndarray       # (F,)
    out_w: np.ndarray          # (c, F)
    out_b: np.ndarray          # (c,)
    activation: Activation = field(default_factory=lambda: Activation("logistic"))

    def __post_init__(self):
        a = self.arch
        a.sides()
        kshape = (a.block_count, a.kernel_count, a.kernel_side, a.kernel_side)
        expected = {
            "ip_kernels": kshape, "merge_kernels": kshape, "merge_bias": (a.block_count,),
            "hidden_w": (a.fc_hidden, a.feature_count), "hidden_b": (a.fc_hidden,),
            "out_w": (a.class_count, a.fc_hidden), "out_b": (a.class_count,),
        }
        for name, shape in expected.items():
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {arr.shape}")
            setattr(self, name, arr)
        self.ip_kernels.flags.writeable = False
        self.activation = as_activation(self.activation)

    @property
    def blocks(self):
        return [self.block(i) for i in range(self.arch.block_count)]

    def block(self, i):
        return Block(self.ip_kernels[i], self.merge_kernels[i], float(self.merge_bias[i]),
                     self.arch.pool_scale)

    @property
    def fc_hidden(self):
        return FcStage(self.hidden_w, self.hidden_b, self.activation)

    @property
    def fc_out(self):
        return FcStage(self.out_w, self.out_b, self.activation)

    def trainable(self):
        """Names of the trainable parameter arrays, in checkpoint order."""
        return ("merge_kernels", "merge_bias", "hidden_w", "hidden_b", "out_w", "out_b")

    def copy(self, with_noise_access=False):
        net = MsnnNetwork(self.arch, self.ip_kernels, self.merge_kernels, self.merge_bias,
                          self.hidden_w, self.hidden_b, self.out_w, self.out_b, self.activation)
        if with_noise_access:
            net.ip_kernels.flags.writeable = True
        return net


def kernels_from_bank(bank, arch):
    """Reshape the first ``B`` modules' basis vectors (row-major) into kernel stacks."""
    k, n, b = arch.kernel_side, arch.kernel_count, arch.block_count
    bases = bank.stacked()
    if bases.shape[1:] != (n, k * k):
        raise DimensionError(f"bank modules are {bases.shape[1:]}, architecture needs {(n, k * k)}")
    if len(bases) < b:
        raise DimensionError(f"bank has {len(bases)} modules, architecture needs {b}")
    return bases[:b].reshape(b, n, k, k)


def random_kernels(arch, seed):
    """Seeded Gaussian kernels, orthonormalized within each block."""
    rng = np.random.default_rng(seed)
    k, n = arch.kernel_side, arch.kernel_count
    out = [gram_schmidt(rng.standard_normal((n, k * k))) for _ in range(arch.block_count)]
    return np.stack(out).reshape(arch.block_count, n, k, k)


def init_network(arch, kernels, seed, activation="logistic"):
    """Build a network whose ip and merge kernels both start at ``kernels``.

    Merge biases are drawn uniformly from [-0.1, 0.1]; fully-connected weights
    and biases uniformly from +-1/sqrt(fan_in).
    """
    rng = np.random.default_rng(seed)
    bias = rng.uniform(-0.1, 0.1, arch.block_count)
    lim_h = 1.0 / np.sqrt(arch.feature_count)
    hidden_w = rng.uniform(-lim_h, lim_h, (arch.fc_hidden, arch.feature_count))
    hidden_b = rng.uniform(-lim_h, lim_h, arch.fc_hidden)
    lim_o = 1.0 / np.sqrt(arch.fc_hidden)
    out_w = rng.uniform(-lim_o, lim_o, (arch.class_count, arch.fc_hidden))
    out_b = rng.uniform(-lim_o, lim_o, arch.class_count)
    kernels = np.asarray(kernels, dtype=np.float64)
    return MsnnNetwork(arch, kernels.copy(), kernels.copy(), bias, hidden_w, hidden_b,
                       out_w, out_b, as_activation(activation))


# --- single-image path -------------------------------------------------------

def inner_product_forward(image, block):
    return [valid_cross_correlate(image, kern, demean_windows=True) for kern in block.ip_kernels]


def merging_forward(pooled, block, f):
    """Sum of flipped-kernel convolutions plus bias, then ``f``; returns ``(u, x)``."""
    f = as_activation(f)
    if len(pooled) != len(block.merge_kernels):
        raise DimensionError(f"{len(pooled)} maps for {len(block.merge_kernels)} merge kernels")
    u = sum(valid_convolve(m, kern) for m, kern in zip(pooled, block.merge_kernels))
    u = u + block.merge_bias
    return u, f(u)


def fc_forward(x, stage):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (stage.in_dim,):
        raise DimensionError(f"fully-connected stage expects {stage.in_dim} inputs, got {x.shape}")
    u = stage.weights @ x + stage.bias
    return u, stage.activation(u)


@dataclass
class BlockTrace:
    ip: list
    pooled: list
    merge_u: np.ndarray
    merge_x: np.ndarray
    out: np.ndarray


@dataclass
class ForwardTrace:
    blocks: list
    features: np.ndarray
    hidden_u: np.ndarray
    hidden_x: np.ndarray
    out_u: np.ndarray
    y: np.ndarray


def network_forward(image, net, f=None):
    f = net.activation if f is None else as_activation(f)
    image = np.asarray(image, dtype=np.float64)
    s = net.arch.input_side
    if image.shape != (s, s):
        raise DimensionError(f"input layer: image {image.shape} does not match {s}x{s}")
    traces = []
    for i, block in enumerate(net.blocks):
        try:
            ip = inner_product_forward(image, block)
            pooled = [avg_downsample(m, block.pool_scale) for m in ip]
            u, x = merging_forward(pooled, block, f)
            out = avg_downsample(x, block.pool_scale)
        except DimensionError as exc:
            raise DimensionError(f"block {i}: {exc}") from exc
        traces.append(BlockTrace(ip, pooled, u, x, out))
    features = np.concatenate([t.out.ravel() for t in traces])
    hidden = FcStage(net.hidden_w, net.hidden_b, f)
    output = FcStage(net.out_w, net.out_b, f)
    hu, hx = fc_forward(features, hidden)
    ou, y = fc_forward(hx, output)
    return ForwardTrace(traces, features, hu, hx, ou, y)


def argmax_lowest(y):
    """Index of the largest entry; ties go to the lowest index."""
    return int(np.argmax(np.asarray(y)))


def predict(image, net):
    return argmax_lowest(network_forward(image, net).y)


# --- batched path -------------------------------------------------------------

@dataclass
class BatchTrace:
    pooled: np.ndarray    # (N, B, n, m1, m1)
    merge_u: np.ndarray   # (N, B, m2, m2)
    merge_x: np.ndarray
    features: np.ndarray  # (N, B*m3*m3)
    hidden_u: np.ndarray
    hidden_x: np.ndarray
    out_u: np.ndarray
    y: np.ndarray


def _pool_last2(a, p):
    *lead, r, c = a.shape
    return a.reshape(*lead, r // p, p, c // p, p).mean(axis=(-3, -1))


def ip_pooled_batch(net, images):
    """Inner-product layer followed by the first pooling, for a stack of images."""
    a = net.arch
    k, n, b, p = a.kernel_side, a.kernel_count, a.block_count, a.pool_scale
    ip_side, m1 = a.sides()[:2]
    win = sliding_window_view(images, (k, k), axis=(1, 2))
    win = win.reshape(len(images), ip_side, ip_side, k * k)
    win = win - win.mean(axis=-1, keepdims=True)
    maps = win @ net.ip_kernels.reshape(b * n, k * k).T
    maps = maps.reshape(len(images), m1, p, m1, p, b, n).mean(axis=(2, 4))
    return np.ascontiguousarray(maps.transpose(0, 3, 4, 1, 2))


def merge_batch(pooled, merge_kernels, merge_bias):
    """``u[z, b] = sum_j pooled[z, b, j] (*) merge_kernels[b, j] + bias[b]`` (valid convolution)."""
    k = merge_kernels.shape[-1]
    m2 = pooled.shape[-1] - k + 1
    fk = merge_kernels[:, :, ::-1, ::-1]
    u = np.zeros(pooled.shape[:2] + (m2, m2))
    for r in range(k):
        for c in range(k):
            u += np.einsum("zbjuv,bj->zbuv", pooled[..., r:r + m2, c:c + m2], fk[:, :, r, c])
    return u + merge_bias[None, :, None, None]


def forward_batch(net, images):
    images = np.asarray(images, dtype=np.float64)
    s = net.arch.input_side
    if images.ndim != 3 or images.shape[1:] != (s, s):
        raise DimensionError(f"input layer: batch {images.shape} does not match (N, {s}, {s})")
    f = net.activation
    pooled = ip_pooled_batch(net, images)
    mu = merge_batch(pooled, net.merge_kernels, net.merge_bias)
    mx = f(mu)
    out = _pool_last2(mx, net.arch.pool_scale)
    feats = out.reshape(len(images), -1)
    hu = feats @ net.hidden_w.T + net.hidden_b
    hx = f(hu)
    ou = hx @ net.out_w.T + net.out_b
    return BatchTrace(pooled, mu, mx, feats, hu, hx, ou, f(ou))


def predict_batch(net, images, chunk=500):
    """Class predictions for a stack of images, evaluated in chunks."""
    images = np.asarray(images, dtype=np.float64)
    preds = [np.argmax(forward_batch(net, images[i:i + chunk]).y, axis=1)
             for i in range(0, len(images), chunk)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


# --- checkpoint --------------------------------------------------------------

def save_checkpoint(net, path):
    a = net.arch
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<8i", CHECKPOINT_VERSION, a.input_side, a.kernel_side,
                            a.kernel_count, a.pool_scale, a.block_count, a.fc_hidden,
                            a.class_count))
        for i in range(a.block_count):
            f.write(net.ip_kernels[i].astype("<f8").tobytes())
            f.write(net.merge_kernels[i].astype("<f8").tobytes())
            f.write(np.float64(net.merge_bias[i]).astype("<f8").tobytes())
        for arr in (net.hidden_w, net.hidden_b, net.out_w, net.out_b):
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path, activation="logistic"):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not an MSNN checkpoint (bad magic)")
    if len(raw) < 36:
        raise ValueError(f"{path}: truncated header")
    version, *dims = struct.unpack("<8i", raw[4:36])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    arch = Architecture(*dims)
    b, n, k = arch.block_count, arch.kernel_count, arch.kernel_side
    F, c, feat = arch.fc_hidden, arch.class_count, arch.feature_count
    block_len = 2 * n * k * k + 1
    total = b * block_len + F * feat + F + c * F + c
    vals = np.frombuffer(raw[36:], dtype="<f8").astype(np.float64)
    if len(raw) - 36 != 8 * total:
        raise ValueError(f"{path}: expected {total} floats, found {(len(raw) - 36) / 8:g}")
    blocks = vals[:b * block_len].reshape(b, block_len)
    ip = blocks[:, :n * k * k].reshape(b, n, k, k)
    merge = blocks[:, n * k * k:2 * n * k * k].reshape(b, n, k, k)
    bias = blocks[:, -1]
    rest = vals[b * block_len:]
    hidden_w, rest = rest[:F * feat].reshape(F, feat), rest[F * feat:]
    hidden_b, rest = rest[:F], rest[F:]
    out_w, out_b = rest[:c * F].reshape(c, F), rest[c * F:]
    return MsnnNetwork(arch, ip, merge, bias, hidden_w, hidden_b, out_w, out_b,
                       as_activation(activation))

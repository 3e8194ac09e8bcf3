"""Adaptive-subspace SOM: a bank of competing linear subspaces fitted to patches.

Each module holds ``H`` orthonormal basis vectors in patch space ``R^D``. A
patch is assigned to the module whose subspace captures the most of its
energy, and only that module is rotated towards the patch (winner-take-all,
no neighbourhood).
"""
import math
import struct
from dataclasses import dataclass

import numba
import numpy as np

from .tensor import DimensionError, gram_deviation, gram_schmidt

SKIP_TOL = 1e-10
BANK_MAGIC = b"ASOM"
BANK_VERSION = 1


class ConfigError(ValueError):
    """Raised for invalid training inputs or hyperparameters."""


@dataclass
class SubspaceModule:
    basis: np.ndarray  # (H, D), rows orthonormal

    def __post_init__(self):
        self.basis = np.asarray(self.basis, dtype=np.float64)
        h, d = self.basis.shape
        if not 1 <= h <= d:
            raise DimensionError(f"module needs 1 <= H <= D, got H={h}, D={d}")

    @property
    def dim(self):
        return self.basis.shape[1]

    @property
    def size(self):
        return self.basis.shape[0]


@dataclass
class ModuleBank:
    modules: list
    rng_seed: int = 0

    def __post_init__(self):
        if not self.modules:
            raise ConfigError("a module bank needs at least one module")
        shapes = {m.basis.shape for m in self.modules}
        if len(shapes) != 1:
            raise DimensionError(f"modules disagree on (H, D): {sorted(shapes)}")

    @property
    def dim(self):
        return self.modules[0].dim

    @property
    def size(self):
        return self.modules[0].size

    def __len__(self):
        return len(self.modules)

    def stacked(self):
        """All bases as one ``(N, H, D)`` array (a copy)."""
        return np.stack([m.basis for m in self.modules])

    @classmethod
    def from_stacked(cls, bases, rng_seed=0):
        return cls([SubspaceModule(b.copy()) for b in np.asarray(bases, dtype=np.float64)], rng_seed)


@dataclass
class AssomSchedule:
    epochs: int
    eta0: float
    decay: float

    def __post_init__(self):
        if self.epochs < 0 or self.eta0 <= 0 or self.decay < 0:
            raise ConfigError(f"invalid ASSOM schedule {self}")

    def rate(self, epoch):
        return self.eta0 * math.exp(-self.decay * epoch)


def _check_dim(dim, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (dim,):
        raise DimensionError(f"patch of shape {x.shape} does not match module dim {dim}")
    return x


def project(m, x):
    x = _check_dim(m.dim, x)
    return m.basis @ x


def reconstruct(m, x):
    return project(m, x) @ m.basis


def energy(m, x):
    o = project(m, x)
    return float(o @ o)


def winner(bank, x):
    """Index of the module with the largest projection energy (lowest index on ties)."""
    x = _check_dim(bank.dim, x)
    energies = np.einsum("nhd,d->nh", bank.stacked(), x)
    energies = (energies ** 2).sum(axis=1)
    return int(np.argmax(energies))


def rotate_update(m, x, rate):
    """One rotation step of module ``m`` towards patch ``x``.

    Every basis vector is multiplied by ``I + rate * x x^T / (|x_hat| |x|)``
    and the result re-orthonormalized. Degenerate patches (zero, or orthogonal
    to the subspace) leave the module untouched.
    """
    x = _check_dim(m.dim, x)
    o = m.basis @ x
    nx = np.linalg.norm(x)
    nxh = np.linalg.norm(o)
    if nx <= SKIP_TOL or nxh <= SKIP_TOL:
        return SubspaceModule(m.basis.copy())
    rotated = m.basis + (rate / (nxh * nx)) * np.outer(o, x)
    return SubspaceModule(gram_schmidt(rotated))


def random_bank(n_modules, dim, size, seed):
    """Seeded Gaussian bases, orthonormalized per module."""
    rng = np.random.default_rng(seed)
    mods = []
    for _ in range(n_modules):
        draws = rng.standard_normal((size, dim))
        draws /= np.linalg.norm(draws, axis=1, keepdims=True)
        mods.append(SubspaceModule(gram_schmidt(draws)))
    return ModuleBank(mods, rng_seed=seed)


def residuals(bank, patches):
    """Squared reconstruction residual of every patch under every module, ``(N, P)``."""
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[1] != bank.dim:
        raise DimensionError(f"patches of shape {patches.shape} do not match bank dim {bank.dim}")
    total = (patches ** 2).sum(axis=1)
    coeffs = np.einsum("nhd,pd->nph", bank.stacked(), patches)
    return total[None, :] - (coeffs ** 2).sum(axis=2)


def mean_residual(bank, patches):
    """Mean over patches of the winning module's squared residual."""
    return float(residuals(bank, patches).min(axis=0).mean())


def module_residuals(bank, patches):
    """Mean squared residual of each module over the patches it wins."""
    res = residuals(bank, patches)
    wins = res.argmin(axis=0)
    out = np.full(len(bank), np.inf)
    for i in range(len(bank)):
        mask = wins == i
        if mask.any():
            out[i] = res[i, mask].mean()
    return out


def select_modules(bank, patches, count):
    """Keep the ``count`` modules with the lowest mean residual on their patches."""
    if count > len(bank):
        raise ConfigError(f"cannot select {count} modules from a bank of {len(bank)}")
    if count == len(bank):
        return bank
    keep = np.sort(np.argsort(module_residuals(bank, patches), kind="stable")[:count])
    return ModuleBank([SubspaceModule(bank.modules[i].basis.copy()) for i in keep], bank.rng_seed)


@numba.njit(cache=True)
def _orthonormalize_rows(b):
    h, d = b.shape
    for i in range(h):
        for j in range(i):
            s = 0.0
            for t in range(d):
                s += b[j, t] * b[i, t]
            for t in range(d):
                b[i, t] -= s * b[j, t]
        s = 0.0
        for t in range(d):
            s += b[i, t] * b[i, t]
        s = math.sqrt(s)
        for t in range(d):
            b[i, t] /= s


@numba.njit(cache=True)
def _assom_pass(bases, patches, order, rate, tol):
    n, h, d = bases.shape
    o = np.empty(h)
    updates = 0
    for idx in order:
        x = patches[idx]
        nx = 0.0
        for t in range(d):
            nx += x[t] * x[t]
        nx = math.sqrt(nx)
        if nx <= tol:
            continue
        best = -1.0
        w = 0
        for m in range(n):
            e = 0.0
            for i in range(h):
                s = 0.0
                for t in range(d):
                    s += bases[m, i, t] * x[t]
                e += s * s
            if e > best:
                best = e
                w = m
        nxh = math.sqrt(best)
        if nxh <= tol:
            continue
        for i in range(h):
            s = 0.0
            for t in range(d):
                s += bases[w, i, t] * x[t]
            o[i] = s
        c = rate / (nxh * nx)
        for i in range(h):
            for t in range(d):
                bases[w, i, t] += c * o[i] * x[t]
        _orthonormalize_rows(bases[w])
        updates += 1
    return updates


def train_assom(patches, bank, sched, seed=None, on_epoch=None):
    """Competitive training of ``bank`` on demeaned patches.

    Each epoch visits the patches in a fresh seeded shuffle; the winning
    module of every patch is rotated towards it at the epoch's rate and
    re-orthonormalized. Returns a new bank; the input bank is not modified.
    """
    patches = np.ascontiguousarray(patches, dtype=np.float64)
    if patches.ndim != 2 or len(patches) == 0:
        raise ConfigError("ASSOM training needs a non-empty (count, dim) patch array")
    if patches.shape[1] != bank.dim:
        raise DimensionError(f"patch dim {patches.shape[1]} != bank dim {bank.dim}")
    rng = np.random.default_rng(bank.rng_seed if seed is None else seed)
    bases = np.ascontiguousarray(bank.stacked())
    for epoch in range(sched.epochs):
        order = rng.permutation(len(patches))
        _assom_pass(bases, patches, order, sched.rate(epoch), SKIP_TOL)
        if on_epoch is not None:
            on_epoch(epoch, bases)
    return ModuleBank.from_stacked(bases, bank.rng_seed)


def train_assom_reference(patches, bank, sched, seed=None):
    """Pure-python twin of :func:`train_assom` built on the public operations."""
    patches = np.asarray(patches, dtype=np.float64)
    rng = np.random.default_rng(bank.rng_seed if seed is None else seed)
    mods = [SubspaceModule(m.basis.copy()) for m in bank.modules]
    for epoch in range(sched.epochs):
        rate = sched.rate(epoch)
        for idx in rng.permutation(len(patches)):
            x = patches[idx]
            w = winner(ModuleBank(mods), x)
            mods[w] = rotate_update(mods[w], x, rate)
    return ModuleBank(mods, bank.rng_seed)


def max_gram_deviation(bank):
    return max(gram_deviation(m.basis) for m in bank.modules)


def save_bank(bank, path):
    n, h, d = len(bank), bank.size, bank.dim
    with open(path, "wb") as f:
        f.write(BANK_MAGIC)
        f.write(struct.pack("<4i", BANK_VERSION, n, d, h))
        f.write(bank.stacked().astype("<f8").tobytes())


def load_bank(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != BANK_MAGIC:
        raise ValueError(f"{path}: not a module bank file (bad magic)")
    if len(raw) < 20:
        raise ValueError(f"{path}: truncated header")
    version, n, d, h = struct.unpack("<4i", raw[4:20])
    if version != BANK_VERSION:
        raise ValueError(f"{path}: unsupported bank version {version}")
    payload = raw[20:]
    if len(payload) != 8 * n * h * d:
        raise ValueError(f"{path}: expected {n * h * d} floats, found {len(payload) // 8}")
    bases = np.frombuffer(payload, dtype="<f8").reshape(n, h, d).astype(np.float64)
    return ModuleBank.from_stacked(bases)

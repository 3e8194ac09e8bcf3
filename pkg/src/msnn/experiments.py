"""Experiment drivers: kernel initialization, training runs, sweeps, weight-noise
robustness, and image dumps.

Every driver writes into an output directory and records each file it writes
in that directory's ``manifest.txt``.
"""
import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import assom
from .config import ConfigError
from .data import balanced_subset, load_coil20, load_mnist_dir, split_coil
from .network import (init_network, kernels_from_bank, load_checkpoint, network_forward,
                      predict_batch, random_kernels, save_checkpoint)
from .pgm import rescale_to_bytes, write_pgm
from .tensor import DimensionError, patch_matrix
from .training import train_msnn, write_metrics_csv

log = logging.getLogger(__name__)

# independent random streams derived from the run seed
SUBSET, ASSOM_INIT, ASSOM_ORDER, RANDOM_KERNELS, NET_INIT, SGD, NOISE = range(7)

BANK_FILE = "kernels.asom"
CHECKPOINT_FILE = "model.msnn"


def stream(seed, which):
    return [int(seed), which]


class Manifest:
    """Collects the files written to an output directory."""

    def __init__(self, out_dir):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, name):
        p = self.out_dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(p.relative_to(self.out_dir).as_posix())
        return p

    def write(self):
        existing = []
        mf = self.out_dir / "manifest.txt"
        if mf.exists():
            existing = [l for l in mf.read_text().splitlines() if l]
        names = list(dict.fromkeys(existing + self.files))
        mf.write_text("".join(f"{n}\n" for n in names))
        return mf


def pixel_range(cfg):
    return (0.0, 1.0) if cfg.dataset == "mnist" else (-1.0, 1.0)


def one_based_labels(cfg):
    return cfg.dataset == "coil20"


def load_splits(cfg):
    """Training and test sets for a config (seeded subsets/splits)."""
    if cfg.dataset == "mnist":
        train = load_mnist_dir(cfg.mnist_dir, "train")
        test = load_mnist_dir(cfg.mnist_dir, "test")
        if cfg.train_subset_per_class:
            train = balanced_subset(train, cfg.train_subset_per_class, stream(cfg.seed, SUBSET))
    else:
        full = load_coil20(cfg.coil_dir, expected_classes=20)
        train, test = split_coil(full, cfg.coil_train_per_class, stream(cfg.seed, SUBSET))
        if cfg.train_subset_per_class:
            train = balanced_subset(train, cfg.train_subset_per_class, stream(cfg.seed, SUBSET))
    if train.side != cfg.input_side:
        raise ConfigError(f"images are {train.side}x{train.side}, config expects input_side "
                          f"{cfg.input_side}")
    return train, test


def harvest_patches(images, k, stride, limit=0, seed=None):
    """Demeaned ``k`` x ``k`` patches of every image, one row per patch."""
    patches = np.concatenate([patch_matrix(im, k, stride) for im in images])
    patches -= patches.mean(axis=1, keepdims=True)
    if limit and len(patches) > limit:
        rng = np.random.default_rng(seed)
        patches = patches[np.sort(rng.choice(len(patches), limit, replace=False))]
    return patches


@dataclass
class KernelInitResult:
    path: Path
    bank: assom.ModuleBank
    residual_before: float
    residual_after: float


def train_bank(cfg, images):
    k = cfg.kernel_side
    patches = harvest_patches(images, k, cfg.patch_stride, cfg.assom_patch_limit,
                              stream(cfg.seed, ASSOM_ORDER))
    bank0 = assom.random_bank(cfg.assom_modules, k * k, cfg.kernel_count,
                              stream(cfg.seed, ASSOM_INIT))
    before = assom.mean_residual(bank0, patches)
    bank = assom.train_assom(patches, bank0, cfg.assom_schedule, seed=stream(cfg.seed, ASSOM_ORDER))
    bank = assom.select_modules(bank, patches, cfg.block_count)
    after = assom.mean_residual(bank, patches)
    log.info("ASSOM: %d patches, mean residual %.5f -> %.5f", len(patches), before, after)
    return bank, before, after


def run_kernel_init(cfg, out_dir, train=None):
    """Train the subspace bank on the training images and write it to ``kernels.asom``."""
    if train is None:
        train, _ = load_splits(cfg)
    bank, before, after = train_bank(cfg, train.images)
    man = Manifest(out_dir)
    path = man.path(BANK_FILE)
    assom.save_bank(bank, path)
    man.write()
    return KernelInitResult(path, bank, before, after)


@dataclass
class RunReport:
    config: object
    history: list
    train_error: float
    test_error: float
    confusion: np.ndarray
    misclassified: list = field(default_factory=list)  # (index, true, predicted)
    wall_seconds: float = 0.0


def confusion_matrix(true, pred, classes):
    cm = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(true), np.asarray(pred)), 1)
    return cm


def error_rate(true, pred):
    return float(np.mean(np.asarray(true) != np.asarray(pred)))


def build_network(cfg, bank=None):
    arch = cfg.architecture
    if cfg.kernel_init == "random":
        kernels = random_kernels(arch, stream(cfg.seed, RANDOM_KERNELS))
    else:
        if bank is None:
            raise ConfigError("kernel_init=subspace needs a trained module bank")
        if isinstance(bank, (str, Path)):
            bank = assom.load_bank(bank)
        kernels = kernels_from_bank(bank, arch)
    return init_network(arch, kernels, stream(cfg.seed, NET_INIT), cfg.activation)


def format_confusion(cm, one_based=False):
    off = 1 if one_based else 0
    width = max(5, len(str(cm.max())) + 1)
    head = "true\\pred" + "".join(f"{j + off:>{width}}" for j in range(len(cm)))
    rows = [f"{i + off:>9}" + "".join(f"{v:>{width}}" for v in row) for i, row in enumerate(cm)]
    return "\n".join([head] + rows) + "\n"


def write_report(report, man, one_based):
    write_metrics_csv(report.history, man.path("metrics.csv"))
    man.path("confusion.txt").write_text(format_confusion(report.confusion, one_based))
    with open(man.path("misclassified.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["index", "true", "predicted"])
        w.writerows(report.misclassified)
    lines = [f"train_error = {report.train_error!r}", f"test_error = {report.test_error!r}",
             f"test_count = {int(report.confusion.sum())}",
             f"misclassified = {len(report.misclassified)}"]
    if report.history:
        lines.append(f"final_mean_loss = {report.history[-1].mean_loss!r}")
    man.path("report.txt").write_text("\n".join(lines) + "\n")
    man.path("config.txt").write_text(report.config.to_text())
    man.path("timing.txt").write_text(f"wall_seconds = {report.wall_seconds:.3f}\n")


def evaluate(net, dataset):
    pred = predict_batch(net, dataset.images)
    return pred, error_rate(dataset.labels, pred)


def run_train(cfg, out_dir, bank=None, splits=None):
    """Train, evaluate and write the report files plus ``model.msnn``.

    ``bank`` is a :class:`~msnn.assom.ModuleBank` or a path to one; it is
    ignored when ``cfg.kernel_init == "random"``.
    """
    start = time.perf_counter()
    train, test = load_splits(cfg) if splits is None else splits
    net = build_network(cfg, bank)
    net, history = train_msnn(net, train.images, train.labels, cfg.sgd_schedule,
                              stream(cfg.seed, SGD))
    _, train_err = evaluate(net, train)
    pred, test_err = evaluate(net, test)
    cm = confusion_matrix(test.labels, pred, cfg.class_count)
    wrong = [(int(i), int(test.labels[i]), int(pred[i])) for i in np.flatnonzero(pred != test.labels)]
    report = RunReport(cfg, history, train_err, test_err, cm, wrong,
                       time.perf_counter() - start)
    man = Manifest(out_dir)
    save_checkpoint(net, man.path(CHECKPOINT_FILE))
    write_report(report, man, one_based_labels(cfg))
    man.write()
    log.info("train error %.4f, test error %.4f", train_err, test_err)
    return report, net


def run_full(cfg, out_dir, splits=None):
    """Kernel initialization (when needed) followed by a training run."""
    splits = load_splits(cfg) if splits is None else splits
    bank = None
    if cfg.kernel_init == "subspace":
        bank = run_kernel_init(cfg, out_dir, train=splits[0]).bank
    return run_train(cfg, out_dir, bank=bank, splits=splits)


SWEEP_AXES = {"kernel_size": "kernel_side", "kernel_count": "kernel_count",
              "block_count": "block_count"}


def sweep_config(cfg, axis, value):
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {sorted(SWEEP_AXES)}")
    changes = {SWEEP_AXES[axis]: int(value)}
    if axis == "block_count":
        changes["assom_modules"] = max(cfg.assom_modules, int(value))
    return cfg.with_(**changes)


def run_sweep(cfg, axis, values, out_dir, splits=None):
    """One full run per value; invalid cells are reported and skipped."""
    splits = load_splits(cfg) if splits is None else splits
    man = Manifest(out_dir)
    rows = []
    for value in values:
        try:
            cell = sweep_config(cfg, axis, value)
        except (ConfigError, DimensionError) as exc:
            log.warning("sweep %s=%s invalid: %s", axis, value, exc)
            rows.append((value, None, None, f"invalid: {exc}"))
            continue
        report, _ = run_full(cell, Path(out_dir) / f"{axis}_{value}", splits=splits)
        man.files.append(f"{axis}_{value}/manifest.txt")
        rows.append((value, report.test_error, report.train_error, "ok"))
    with open(man.path(f"sweep_{axis}.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["axis", "value", "test_error", "train_error", "status"])
        for value, te, tr, status in rows:
            w.writerow([axis, value, "" if te is None else repr(te),
                        "" if tr is None else repr(tr), status])
    man.write()
    return rows


@dataclass
class NoiseSpec:
    mean: float = 0.0
    std: float = 0.5
    level: float = 0.1
    trials: int = 5
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.level <= 1.0:
            raise ValueError(f"noise level {self.level} outside [0, 1]")
        if self.std < 0 or self.trials < 1:
            raise ValueError(f"invalid noise spec {self}")

    def count(self, weights):
        """Perturbed positions per kernel of ``weights`` entries."""
        return min(weights, math.ceil(self.level * weights - 1e-9))


def perturb_kernels(net, spec, rng):
    """Copy of ``net`` with noise added to ``spec.count(k*k)`` random weights of every
    inner-product and merge kernel."""
    noisy = net.copy(with_noise_access=True)
    k = net.arch.kernel_side
    size = k * k
    count = spec.count(size)
    for stack in (noisy.ip_kernels, noisy.merge_kernels):
        flat = stack.reshape(-1, size)
        for row in flat:
            pos = rng.choice(size, count, replace=False)
            row[pos] += rng.normal(spec.mean, spec.std, count)
    noisy.ip_kernels.flags.writeable = False
    return noisy


@dataclass
class NoiseRow:
    level: float
    mean: float
    std: float
    error_mean: float
    error_std: float
    errors: list


def run_noise(net, test, levels=(0.1, 0.2, 0.3), stds=(0.5, 0.75, 1.0), mean=0.0, trials=5,
              seed=0, out_dir=None):
    """Test error under kernel-weight noise for every (level, std) cell."""
    _, clean = evaluate(net, test)
    rows = []
    for level in levels:
        for std in stds:
            spec = NoiseSpec(mean, std, level, trials, seed)
            errs = []
            for trial in range(trials):
                rng = np.random.default_rng([int(seed), NOISE, round(level * 1e6),
                                             round(std * 1e6), trial])
                _, err = evaluate(perturb_kernels(net, spec, rng), test)
                errs.append(err)
            rows.append(NoiseRow(level, mean, std, float(np.mean(errs)), float(np.std(errs)), errs))
            log.info("noise level %.2f N(%g, %g): error %.4f +- %.4f", level, mean, std,
                     rows[-1].error_mean, rows[-1].error_std)
    if out_dir is not None:
        man = Manifest(out_dir)
        with open(man.path("noise.csv"), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["level", "mean", "std", "trials", "error_mean", "error_std", "clean_error"])
            for r in rows:
                w.writerow([r.level, r.mean, r.std, len(r.errors), repr(r.error_mean),
                            repr(r.error_std), repr(clean)])
        man.write()
    return clean, rows


def _dump_map(man, name, values, ranges):
    pix, lo, hi = rescale_to_bytes(values)
    write_pgm(man.path(name), pix)
    ranges.append((name, lo, hi))


def dump_visuals(net, image, out_dir, block=0):
    """Kernels and feature maps of one block for one input, as rescaled PGM files.

    Each file's original value range is listed in ``ranges.txt``.
    """
    man = Manifest(out_dir)
    ranges = []
    n = net.arch.kernel_count
    for j in range(n):
        _dump_map(man, f"ip_kernel_{j:02d}.pgm", net.ip_kernels[block, j], ranges)
    for j in range(n):
        _dump_map(man, f"merge_kernel_{j:02d}.pgm", net.merge_kernels[block, j], ranges)
    bt = network_forward(image, net).blocks[block]
    for j, m in enumerate(bt.ip):
        _dump_map(man, f"ip_map_{j:02d}.pgm", m, ranges)
    for j, m in enumerate(bt.pooled):
        _dump_map(man, f"pool1_map_{j:02d}.pgm", m, ranges)
    _dump_map(man, "merge_map.pgm", bt.merge_x, ranges)
    _dump_map(man, "pool2_map.pgm", bt.out, ranges)
    man.path("ranges.txt").write_text("".join(f"{n} {lo!r} {hi!r}\n" for n, lo, hi in ranges))
    man.write()
    return man.files


def dump_errors(misclassified, test, out_dir, one_based=False, value_range=(0.0, 1.0)):
    """Write every misclassified test image as ``<index>_<true>to<pred>.pgm``."""
    man = Manifest(out_dir)
    lo, hi = value_range
    off = 1 if one_based else 0
    for index, true, pred in misclassified:
        pix = np.clip(np.rint((test.images[index] - lo) / (hi - lo) * 255.0), 0, 255)
        write_pgm(man.path(f"{index}_{true + off}to{pred + off}.pgm"), pix)
    man.write()
    return man.files


def misclassified_of(net, test):
    pred = predict_batch(net, test.images)
    return [(int(i), int(test.labels[i]), int(pred[i])) for i in np.flatnonzero(pred != test.labels)]


def load_net(path, cfg):
    return load_checkpoint(path, cfg.activation)

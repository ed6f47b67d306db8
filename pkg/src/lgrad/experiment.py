"""Declarative experiment grid: data splits, channel methods, CHO scoring, AUCs.

Configs are INI files (see ``configs/`` and the README for the schema).
Every random stream is derived from ``(seed, replicate, split, size)`` so a
grid point can be rerun in isolation and serial/parallel order does not
matter.
"""

from __future__ import annotations

import configparser
import csv
import io
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from . import __version__
from .channels import (
    generate_lgrad_channels_from_samples,
    generate_lgrad_cmd_channels,
    generate_pls_channels,
)
from .core import (
    ChannelMatrix,
    ImageStack,
    ObserverError,
    SignalImage,
    ValidationError,
    read_image_stack,
    write_image_stack,
    write_rows_csv,
)
from .evaluation import bootstrap_auc_ci, compute_auc
from .observers import build_cho, build_ho, build_rho, score
from .phantom import (
    GaussianSignalConfig,
    MvnLumpyConfig,
    NoiseConfig,
    assemble_dataset,
    generate_mvn_lumpy,
    load_roi_directory,
    mvn_lumpy_autocovariance,
    render_gaussian_signal,
)
from .stats import cmd_covariance

log = logging.getLogger(__name__)

TASKS = ("mvn_lumpy", "roi_directory")
CHANNEL_METHODS = ("lgrad", "lgrad_cmd", "pls")
ALL_METHODS = CHANNEL_METHODS + ("ho_cmd", "rho")
RESULT_COLUMNS = ("method", "num_train", "num_channels", "auc", "auc_lo", "auc_hi", "seconds", "replicate")
ERROR_COLUMNS = ("replicate", "method", "num_train", "num_channels", "error")

_SPLIT_IDS = {"test": 1, "observer": 2, "train": 3, "reference": 4, "pool": 5}


class ConfigError(ObserverError):
    """Invalid experiment configuration."""


@dataclass
class ExperimentConfig:
    task: str = "mvn_lumpy"
    methods: list = field(default_factory=lambda: ["lgrad", "lgrad_cmd", "pls"])
    channel_counts: list = field(default_factory=lambda: [50])
    seed: int = 20240601
    replicates: int = 1
    bootstrap_resamples: int = 1000
    reuse_channel_train_for_observer: bool = False
    output: str = "results"
    # phantom
    height: int = 64
    width: int = 64
    dc_offset: float = 100.0
    kernel_sigma: float = 5.0
    field_magnitude: float = 30.0
    roi_path: str = ""
    # signal
    center_row: float = 32.0
    center_col: float = 32.0
    signal_sigma: float = 3.0
    amplitude: float = 11.5
    signal_path: str = ""
    # noise
    sigma_n: float = 10.0
    # splits
    channel_train_sizes: list = field(default_factory=lambda: [2000])
    observer_train_size: int = 4000
    test_size: int = 4000
    reference_backgrounds: int = 40000
    # bench
    bench_repeats: int = 10
    bench_channels: int = 50

    def validate(self) -> "ExperimentConfig":
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.methods:
            raise ConfigError("at least one method is required")
        bad = [m for m in self.methods if m not in ALL_METHODS]
        if bad:
            raise ConfigError(f"unknown methods {bad}; choose from {ALL_METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ConfigError("methods must not repeat")
        for name in ("channel_train_sizes", "channel_counts"):
            values = getattr(self, name)
            if not values or any(v < 1 for v in values):
                raise ConfigError(f"{name} must be a non-empty list of positive integers")
        for name in ("observer_train_size", "test_size", "replicates", "reference_backgrounds",
                     "bench_repeats", "bench_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.bootstrap_resamples < 100:
            raise ConfigError("bootstrap_resamples must be >= 100")
        if self.task == "roi_directory" and not self.roi_path:
            raise ConfigError("task roi_directory requires phantom.roi_path")
        if self.sigma_n < 0:
            raise ConfigError("sigma_n must be nonnegative")
        return self

    def lumpy(self, seed: int = 0) -> MvnLumpyConfig:
        return MvnLumpyConfig(
            self.height, self.width, self.dc_offset, self.kernel_sigma, self.field_magnitude, seed
        )

    def signal_config(self) -> GaussianSignalConfig:
        return GaussianSignalConfig(self.center_row, self.center_col, self.signal_sigma, self.amplitude)


# section -> {ini key: (attribute, parser)}
def _int_list(text: str) -> list:
    return [int(x) for x in text.replace(",", " ").split()]


def _str_list(text: str) -> list:
    return [x for x in text.replace(",", " ").split()]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


_SCHEMA = {
    "experiment": {
        "task": ("task", str),
        "methods": ("methods", _str_list),
        "channel_counts": ("channel_counts", _int_list),
        "seed": ("seed", int),
        "replicates": ("replicates", int),
        "bootstrap_resamples": ("bootstrap_resamples", int),
        "reuse_channel_train_for_observer": ("reuse_channel_train_for_observer", _bool),
        "output": ("output", str),
    },
    "phantom": {
        "height": ("height", int),
        "width": ("width", int),
        "dc_offset": ("dc_offset", float),
        "kernel_sigma": ("kernel_sigma", float),
        "field_magnitude": ("field_magnitude", float),
        "roi_path": ("roi_path", str),
    },
    "signal": {
        "center_row": ("center_row", float),
        "center_col": ("center_col", float),
        "sigma": ("signal_sigma", float),
        "amplitude": ("amplitude", float),
        "path": ("signal_path", str),
    },
    "noise": {"sigma_n": ("sigma_n", float)},
    "splits": {
        "channel_train_sizes": ("channel_train_sizes", _int_list),
        "observer_train_size": ("observer_train_size", int),
        "test_size": ("test_size", int),
        "reference_backgrounds": ("reference_backgrounds", int),
    },
    "bench": {
        "repeats": ("bench_repeats", int),
        "num_channels": ("bench_channels", int),
    },
}


def parse_config(text: str, base_dir: str | os.PathLike | None = None) -> ExperimentConfig:
    """Parse INI text into a validated :class:`ExperimentConfig`.

    Unknown sections or keys are errors. Relative paths resolve against
    ``base_dir``.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            attr, conv = _SCHEMA[section][key]
            try:
                setattr(cfg, attr, conv(raw))
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    if base_dir is not None:
        for attr in ("roi_path", "signal_path"):
            value = getattr(cfg, attr)
            if value and not os.path.isabs(value):
                setattr(cfg, attr, str(Path(base_dir) / value))
    return cfg.validate()


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, Path(path).parent)


def config_to_ini(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    for section, keys in _SCHEMA.items():
        parser.add_section(section)
        for key, (attr, _) in keys.items():
            value = getattr(cfg, attr)
            if isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            parser.set(section, key, str(value))
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# --------------------------------------------------------------------------
# profile helpers
# --------------------------------------------------------------------------


def analytic_ho_snr(lumpy: MvnLumpyConfig, signal: SignalImage, sigma_n: float) -> float:
    """Exact HO detectability for the lumpy task, via the circulant eigenbasis."""
    eig = np.fft.fft2(mvn_lumpy_autocovariance(lumpy)).real + sigma_n**2
    s_ft = np.fft.fft2(signal.image())
    return float(np.sqrt(np.sum(np.abs(s_ft) ** 2 / eig) / signal.m))


def calibrate_amplitude(cfg: ExperimentConfig, target_auc: float = 0.875) -> float:
    """Signal amplitude giving the requested exact HO AUC.

    The HO SNR is linear in the amplitude, so one analytic evaluation at unit
    amplitude suffices: ``a = sqrt(2) Phi^-1(target) / SNR(1)``.
    """
    unit = render_gaussian_signal(
        GaussianSignalConfig(cfg.center_row, cfg.center_col, cfg.signal_sigma, 1.0),
        cfg.height,
        cfg.width,
    )
    return float(np.sqrt(2.0) * ndtri(target_auc) / analytic_ho_snr(cfg.lumpy(), unit, cfg.sigma_n))


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------


def derive_seeds(master: int, replicate: int, split: str, size: int = 0) -> tuple[int, int]:
    """Two independent 63-bit seeds (background, noise) for one data split."""
    ss = np.random.SeedSequence([int(master), int(replicate), _SPLIT_IDS[split], int(size)])
    a, b = ss.generate_state(2, dtype=np.uint64)
    return int(a >> np.uint64(1)), int(b >> np.uint64(1))


class DataSource:
    """Produces the disjoint data splits of one replicate."""

    def __init__(self, cfg: ExperimentConfig, replicate: int):
        self.cfg = cfg
        self.replicate = replicate
        self.signal = load_signal(cfg)
        self._pool = None
        self._offsets = None
        if cfg.task == "roi_directory":
            pool = load_roi_directory(cfg.roi_path)
            if (pool.height, pool.width) != (self.signal.height, self.signal.width):
                raise ValidationError(
                    f"signal is {self.signal.height}x{self.signal.width}, "
                    f"ROIs are {pool.height}x{pool.width}"
                )
            seed, _ = derive_seeds(cfg.seed, replicate, "pool")
            order = np.random.default_rng(seed).permutation(pool.n)
            self._pool = pool.subset(order)
            need = cfg.test_size + cfg.observer_train_size + max(cfg.channel_train_sizes)
            if need > pool.n:
                raise ValidationError(
                    f"ROI pool has {pool.n} images, splits need {need}"
                )
            self._offsets = {
                "test": 0,
                "observer": cfg.test_size,
                "train": cfg.test_size + cfg.observer_train_size,
            }

    def backgrounds(self, split: str, size: int) -> ImageStack:
        if self._pool is not None:
            start = self._offsets["train" if split == "reference" else split]
            if start + size > self._pool.n:
                raise ValidationError(
                    f"ROI pool has {self._pool.n} images, {split} split needs {start + size}"
                )
            return self._pool.subset(slice(start, start + size))
        bseed, _ = derive_seeds(self.cfg.seed, self.replicate, split, size)
        return generate_mvn_lumpy(self.cfg.lumpy(bseed), size)

    def images(self, split: str, size: int) -> tuple[ImageStack, ImageStack]:
        """``(backgrounds, images)`` for one split; half of the images carry the signal."""
        b = self.backgrounds(split, size)
        _, nseed = derive_seeds(self.cfg.seed, self.replicate, split, size)
        g = assemble_dataset(b, self.signal, NoiseConfig(self.cfg.sigma_n, nseed), 0.5)
        return b, g


def load_signal(cfg: ExperimentConfig) -> SignalImage:
    if cfg.signal_path:
        stack = read_image_stack(cfg.signal_path)
        return SignalImage(stack.data[0], stack.height, stack.width)
    return render_gaussian_signal(cfg.signal_config(), cfg.height, cfg.width)


# --------------------------------------------------------------------------
# experiment
# --------------------------------------------------------------------------


def make_channels(method: str, cfg: ExperimentConfig, train_b, train_g, signal, num_channels):
    if method == "lgrad":
        return generate_lgrad_channels_from_samples(train_g, signal, num_channels)
    if method == "lgrad_cmd":
        return generate_lgrad_cmd_channels(train_b, cfg.sigma_n**2, signal, num_channels)
    if method == "pls":
        return generate_pls_channels(train_g, num_channels)
    raise ValidationError(f"not a channel method: {method!r}")


def _fmt(x: float) -> str:
    return repr(float(x))


@dataclass
class RunSummary:
    results: list
    errors: list
    out_dir: Path


def run_experiment(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> RunSummary:
    """Run the full grid and write results, errors, channel dumps and a manifest."""
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    (out / "channels").mkdir(exist_ok=True)
    results: list[dict] = []
    errors: list[dict] = []
    seeds: dict = {}
    max_d = max(cfg.channel_counts)

    def fail(rep, method, n, d, exc):
        log.error("grid point (%s, %s, %s, %s) failed: %s", rep, method, n, d, exc)
        errors.append(
            {"replicate": rep, "method": method, "num_train": n, "num_channels": d,
             "error": f"{type(exc).__name__}: {exc}"}
        )

    def add(method, n, d, scores, seconds, rep, rs):
        roc = compute_auc(scores)
        lo, hi = bootstrap_auc_ci(scores, cfg.bootstrap_resamples, rs)
        results.append(
            {"method": method, "num_train": n, "num_channels": d, "auc": roc.auc,
             "auc_lo": lo, "auc_hi": hi, "seconds": seconds, "replicate": rep}
        )

    for rep in range(cfg.replicates):
        try:
            src = DataSource(cfg, rep)
        except (ObserverError, np.linalg.LinAlgError, ValueError, OSError) as exc:
            fail(rep, "*", 0, 0, exc)
            continue
        signal = src.signal
        _, test = src.images("test", cfg.test_size)
        boot_seed, _ = derive_seeds(cfg.seed, rep, "test", cfg.test_size)
        seeds[f"replicate_{rep}"] = {
            "test": derive_seeds(cfg.seed, rep, "test", cfg.test_size),
            "observer": derive_seeds(cfg.seed, rep, "observer", cfg.observer_train_size),
            "train": {n: derive_seeds(cfg.seed, rep, "train", n) for n in cfg.channel_train_sizes},
            "reference": derive_seeds(cfg.seed, rep, "reference", cfg.reference_backgrounds),
            "bootstrap": boot_seed,
        }
        observer = None
        if any(m in CHANNEL_METHODS for m in cfg.methods) and not cfg.reuse_channel_train_for_observer:
            _, observer = src.images("observer", cfg.observer_train_size)

        if "ho_cmd" in cfg.methods:
            try:
                start = time.perf_counter()
                refb = src.backgrounds("reference", cfg.reference_backgrounds)
                ho = build_ho(cmd_covariance(refb, cfg.sigma_n**2, signal))
                seconds = time.perf_counter() - start
                del refb
                add("ho_cmd", cfg.reference_backgrounds, 0, score(ho, test), seconds, rep, boot_seed)
            except (ObserverError, np.linalg.LinAlgError, ValueError) as exc:
                fail(rep, "ho_cmd", cfg.reference_backgrounds, 0, exc)

        for n in cfg.channel_train_sizes:
            train_b, train_g = src.images("train", n)
            if "rho" in cfg.methods:
                try:
                    start = time.perf_counter()
                    rho = build_rho(train_g, signal)
                    seconds = time.perf_counter() - start
                    add("rho", n, 0, score(rho, test), seconds, rep, boot_seed)
                except (ObserverError, np.linalg.LinAlgError, ValueError) as exc:
                    fail(rep, "rho", n, 0, exc)
            obs = train_g if cfg.reuse_channel_train_for_observer else observer
            for method in cfg.methods:
                if method not in CHANNEL_METHODS:
                    continue
                try:
                    start = time.perf_counter()
                    channels = make_channels(method, cfg, train_b, train_g, signal, max_d)
                    seconds = time.perf_counter() - start
                except (ObserverError, np.linalg.LinAlgError, ValueError) as exc:
                    for d in cfg.channel_counts:
                        fail(rep, method, n, d, exc)
                    continue
                if rep == 0:
                    dump_channels(channels, signal.height, signal.width, out / "channels", f"{method}_n{n}")
                for d in cfg.channel_counts:
                    try:
                        cho = build_cho(channels.first(min(d, channels.d)), obs, signal)
                        add(method, n, d, score(cho, test), seconds, rep, boot_seed)
                    except (ObserverError, np.linalg.LinAlgError, ValueError) as exc:
                        fail(rep, method, n, d, exc)

    write_results(results, out / "results.csv")
    with open(out / "errors.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ERROR_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(errors)
    manifest = {
        "package_version": __version__,
        "config": asdict(cfg),
        "seeds": seeds,
        "result_rows": len(results),
        "error_rows": len(errors),
        "notes": "seconds columns are wall-clock and excluded from determinism checks",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    (out / "config.ini").write_text(config_to_ini(cfg))
    (out / "plot_results.py").write_text(PLOT_SCRIPT)
    return RunSummary(results, errors, out)


def write_results(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for r in rows:
            writer.writerow(
                [r["method"], r["num_train"], r["num_channels"], _fmt(r["auc"]),
                 _fmt(r["auc_lo"]), _fmt(r["auc_hi"]), f"{r['seconds']:.6f}", r["replicate"]]
            )


def dump_channels(channels: ChannelMatrix, height: int, width: int, directory: Path, stem: str) -> None:
    write_image_stack(channels.to_stack(height, width), directory / f"{stem}.mobs")
    write_rows_csv(channels.rows, directory / f"{stem}.csv")
    emit_channel_montage(channels.first(min(9, channels.d)), height, width, directory / f"{stem}.pgm")


def run_benchmark(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> list:
    """Table-1-style timing grid over the configured training sizes."""
    from .evaluation import benchmark_generation

    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    methods = [m for m in cfg.methods if m in CHANNEL_METHODS] or list(CHANNEL_METHODS)
    records = []
    src = DataSource(cfg, 0)
    for n in cfg.channel_train_sizes:
        b, g = src.images("train", n)
        for method in methods:
            rec = benchmark_generation(
                method, g, cfg.bench_channels, cfg.bench_repeats,
                signal=src.signal, backgrounds=b, noise_var=cfg.sigma_n**2,
            )
            log.info("%s N=%d: %.4f s", method, n, rec.seconds)
            records.append(rec)
    with open(out / "timing.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("method", "num_train", "num_channels", "seconds", "repeats"))
        for r in records:
            writer.writerow((r.method, r.num_train, r.num_channels, f"{r.seconds:.6f}", r.repeats))
    return records


def generate_datasets(cfg: ExperimentConfig, out_dir: str | os.PathLike | None = None) -> list:
    """Write every split of every replicate (and the signal) as MOBS files."""
    cfg.validate()
    out = Path(out_dir if out_dir is not None else cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rep in range(cfg.replicates):
        src = DataSource(cfg, rep)
        rdir = out / f"replicate_{rep}"
        rdir.mkdir(exist_ok=True)
        splits = [("test", cfg.test_size), ("observer", cfg.observer_train_size)]
        splits += [("train", n) for n in cfg.channel_train_sizes]
        for split, size in splits:
            _, g = src.images(split, size)
            path = rdir / (f"{split}_n{size}.mobs" if split == "train" else f"{split}.mobs")
            write_image_stack(g, path)
            written.append(path)
    sig = load_signal(cfg)
    path = out / "signal.mobs"
    write_image_stack(ImageStack(sig.s[None, :], [0], sig.height, sig.width), path)
    written.append(path)
    return written


# --------------------------------------------------------------------------
# montage
# --------------------------------------------------------------------------


def montage_array(
    channels: ChannelMatrix, height: int, width: int, separator: int = 2, cols: int | None = None
) -> np.ndarray:
    """8-bit montage of channel images, each min-max normalized, row-major order.

    A channel with zero range is drawn mid-gray. Separators and unused grid
    cells are white.
    """
    rows = channels.rows
    if rows.shape[1] != height * width:
        raise ValidationError(
            f"channels have {rows.shape[1]} pixels, cannot reshape to {height}x{width}"
        )
    d = rows.shape[0]
    if cols is None:
        cols = int(np.ceil(np.sqrt(d)))
    nrows = int(np.ceil(d / cols))
    out = np.full(
        (nrows * height + (nrows - 1) * separator, cols * width + (cols - 1) * separator),
        255,
        dtype=np.uint8,
    )
    for k in range(d):
        img = rows[k].reshape(height, width)
        lo, hi = img.min(), img.max()
        norm = np.full_like(img, 0.5) if hi == lo else (img - lo) / (hi - lo)
        r0 = (k // cols) * (height + separator)
        c0 = (k % cols) * (width + separator)
        out[r0 : r0 + height, c0 : c0 + width] = np.round(norm * 255.0).astype(np.uint8)
    return out


def write_pgm(image: np.ndarray, path: str | os.PathLike) -> None:
    image = np.asarray(image, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValidationError(f"{path} is not a binary PGM")
    w, h = (int(x) for x in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def emit_channel_montage(
    channels: ChannelMatrix, height: int, width: int, path: str | os.PathLike, separator: int = 2
) -> np.ndarray:
    image = montage_array(channels, height, width, separator)
    write_pgm(image, path)
    return image


PLOT_SCRIPT = '''\
"""Plot results.csv written by `lgrad run` (needs pandas and matplotlib)."""
import sys

import matplotlib.pyplot as plt
import pandas as pd

df = pd.read_csv(sys.argv[1] if len(sys.argv) > 1 else "results.csv")
fig, (ax_n, ax_d) = plt.subplots(1, 2, figsize=(11, 4))
chan = df[df.num_channels > 0]
dmax = chan.num_channels.max()
for method, grp in chan[chan.num_channels == dmax].groupby("method"):
    g = grp.groupby("num_train").auc.mean()
    ax_n.plot(g.index, g.values, marker="o", label=method)
for method, grp in df[df.num_channels == 0].groupby("method"):
    for n, sub in grp.groupby("num_train"):
        ax_n.axhline(sub.auc.mean(), ls="--", lw=0.8, label=f"{method} (N={n})")
ax_n.set_xlabel("training images")
ax_n.set_ylabel("AUC")
ax_n.set_title(f"{dmax} channels")
ax_n.legend()
nmid = sorted(chan.num_train.unique())[len(chan.num_train.unique()) // 2]
for method, grp in chan[chan.num_train == nmid].groupby("method"):
    g = grp.groupby("num_channels").auc.mean()
    ax_d.plot(g.index, g.values, marker=".", label=method)
ax_d.set_xlabel("channels")
ax_d.set_ylabel("AUC")
ax_d.set_title(f"{nmid} training images")
ax_d.legend()
fig.tight_layout()
fig.savefig("results.png", dpi=150)
'''

"""Run configuration, single training runs, evaluation and sweeps.

Everything a run needs is in :class:`RunConfig`; a run directory holds::

    config.json          the RunConfig (reproduces the run)
    metrics.csv          iteration,noisy_loss,clean_loss,val_dice,alpha,eta
    timing.csv           iteration,wall_clock_s (kept apart so metrics stay bit-stable)
    split_manifest.txt   ids per pool, noise spec, policy
    norm_stats.txt       6 numbers: channel means then standard deviations
    checkpoint/          state.bin + state.json (resumable)
    summary.json         final validation/test Dice
    weights/             optional weight-map snapshots (reweight modes)
"""
from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import dataio, metareweight as mr, noisegen, segnet
from .errors import ContractError
from .losses import dice
from .ndcore import checkpoint
from .segnet import NetConfig

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("iteration", "noisy_loss", "clean_loss", "val_dice", "alpha", "eta")
SWEEP_MODES = ("fine_tune", "per_image", "reweight")
DEFAULT_K_VALUES = (4, 12, 24, 48)


@dataclass(frozen=True)
class RunConfig:
    # corpus: a directory of images/ + masks/, or a synthetic one
    corpus: str | None = None
    corpus_n: int = 240
    corpus_seed: int = 0
    # split
    K: int = 24
    M: int = 176
    n_val: int = 20
    n_test: int = 20
    split_policy: str = "disjoint"
    noise: str = "k_vertex:3"
    importance: str = "angle_length"
    # network
    image_side: int = 24
    base_channels: int = 8
    depth: int = 2
    init_sigma: float = 0.05
    # training
    mode: str = "reweight"
    alpha: float = 3e-4
    eta: float = 3e-4
    batch_noisy: int = 2
    batch_clean: int = 10
    momentum: float = 0.99
    weight_decay: float = 5e-5
    iterations: int = 3000
    seed: int = 0
    eval_interval: int = 100
    lr_patience: int | None = None
    fine_tune_fraction: float = 0.5
    dtype: str = "float32"
    # outputs
    out: str | None = None
    snapshot_interval: int = 0
    checkpoint_interval: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ContractError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def hyper(self) -> mr.Hyper:
        return mr.Hyper(self.alpha, self.eta, self.batch_noisy, self.batch_clean, self.momentum,
                        self.weight_decay, self.iterations, self.seed, self.eval_interval, self.lr_patience,
                        self.fine_tune_fraction, self.dtype)

    def net(self) -> NetConfig:
        return NetConfig(3, self.base_channels, self.depth, self.image_side, self.init_sigma, self.seed)

    def noise_spec(self) -> noisegen.NoiseSpec:
        return noisegen.NoiseSpec.parse(self.noise)

    def validate(self) -> "RunConfig":
        if self.mode not in mr.MODES:
            raise ContractError(f"unknown mode '{self.mode}'; expected one of {mr.MODES}")
        if self.snapshot_interval < 0 or self.checkpoint_interval < 0:
            raise ContractError("snapshot/checkpoint intervals must be >= 0")
        if self.importance not in noisegen.IMPORTANCE:
            raise ContractError(f"unknown importance '{self.importance}'")
        self.hyper().validate()
        self.net().validate()
        self.noise_spec()
        return self

    def identity(self) -> dict:
        """Fields that define the run (everything except where it is written)."""
        d = self.to_dict()
        d.pop("out")
        return d


# -- data -----------------------------------------------------------------------

def load_samples(cfg: RunConfig) -> list[dataio.Sample]:
    if cfg.corpus:
        return dataio.load_corpus(cfg.corpus, cfg.image_side)
    return dataio.gen_synthetic(cfg.corpus_n, cfg.image_side, cfg.corpus_seed)


def build_split(cfg: RunConfig, samples=None) -> dataio.DatasetSplit:
    samples = load_samples(cfg) if samples is None else samples
    return dataio.make_splits(samples, cfg.K, cfg.M, cfg.noise_spec(), cfg.n_val, cfg.n_test,
                              cfg.split_policy, cfg.seed, cfg.importance)


# -- CSV helpers ------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_metrics(path, records) -> None:
    write_csv(path, METRIC_COLUMNS, [[r[c] for c in METRIC_COLUMNS] for r in records])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- weight-map snapshots ---------------------------------------------------------

def weight_overlay(weights, mislabelled) -> np.ndarray:
    """RGB overlay: blue marks mislabelled pixels, green grows as the weight shrinks."""
    w = np.asarray(weights, dtype=np.float64)
    top = w.max()
    low = 1.0 - (w / top if top > 0 else np.zeros_like(w))
    rgb = np.zeros((3,) + w.shape, dtype=np.uint8)
    rgb[1] = np.round(255 * low).astype(np.uint8)
    rgb[2] = np.asarray(mislabelled, dtype=np.uint8) * 255
    return rgb


def save_snapshot(directory, iteration: int, info: mr.StepInfo) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    W = info.weights
    noisy = info.noisy.masks.astype(np.uint8)
    if info.noisy.clean_masks is not None:
        wrong = (noisy != info.noisy.clean_masks).astype(np.uint8)
    else:
        wrong = np.zeros_like(noisy)
    stem = f"iter{iteration:06d}"
    path = d / f"{stem}.bin"
    checkpoint.save(path, {"weights": W, "mislabelled": wrong.astype(np.float64),
                           "noisy_mask": noisy.astype(np.float64)})
    top = W.max()
    for i in range(len(W)):
        scaled = np.round(255 * W[i] / top).astype(np.uint8) if top > 0 else np.zeros(W[i].shape, np.uint8)
        dataio.save_raster(scaled, d / f"{stem}_img{i}_weights.pgm")
        dataio.save_mask(wrong[i], d / f"{stem}_img{i}_mislabelled.pgm")
        dataio.save_raster(weight_overlay(W[i], wrong[i]), d / f"{stem}_img{i}_overlay.ppm")
    return path


def load_snapshot(path) -> dict:
    return checkpoint.load(path)


# -- single runs --------------------------------------------------------------------

@dataclass
class RunResult:
    config: RunConfig
    state: mr.TrainState
    split: dataio.DatasetSplit
    test_dice: np.ndarray
    weight_stats: dict | None = None

    def summary(self) -> dict:
        val = self.state.records[-1]["val_dice"] if self.state.records else None
        td = self.test_dice
        return {
            "mode": self.config.mode, "K": self.config.K, "noise": self.config.noise, "seed": self.config.seed,
            "iterations": self.state.iteration, "val_dice_final": val,
            "test_dice_mean": float(td.mean()) if len(td) else None,
            "test_dice_median": float(np.median(td)) if len(td) else None,
            "weight_stats": self.weight_stats,
        }


def _same_run(saved: dict, cfg: RunConfig) -> bool:
    a = dict(saved)
    a.pop("out", None)
    b = cfg.identity()
    # the iteration budget may be extended on resume
    a.pop("iterations", None)
    b.pop("iterations", None)
    return a == b


def run_training(cfg: RunConfig, resume: bool = False, samples=None, weight_stat_batches: int = 0,
                 on_step=None) -> RunResult:
    """Train (or resume) one run; writes the run directory when ``cfg.out`` is set."""
    cfg.validate()
    split = build_split(cfg, samples)
    hyper, net = cfg.hyper(), cfg.net()
    pools = mr.Pools.from_split(split, cfg.dtype)
    out = Path(cfg.out) if cfg.out else None

    state = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        ck = out / "checkpoint"
        if resume and (ck / "state.json").exists():
            saved = json.loads((out / "config.json").read_text())
            if not _same_run(saved, cfg):
                raise ContractError(f"{out} holds a run with a different configuration")
            state = mr.TrainState.load(ck)
            log.info("resuming %s at iteration %d", out, state.iteration)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "split_manifest.txt").write_text(split.manifest())
        (out / "norm_stats.txt").write_text(split.stats.to_text())

    snap_dir = out / "weights" if out is not None else None

    def hook(st, info):
        if snap_dir is not None and cfg.snapshot_interval and st.iteration % cfg.snapshot_interval == 0:
            save_snapshot(snap_dir, st.iteration, info)
        if on_step is not None:
            on_step(st, info)

    if state is None:
        state = mr.TrainState.initial(net, hyper)
    timing = []
    t0 = time.perf_counter()
    chunk = cfg.checkpoint_interval if (out is not None and cfg.checkpoint_interval) else cfg.iterations
    chunk = max(chunk, 1)
    while True:
        stop = min(cfg.iterations, (state.iteration // chunk + 1) * chunk)
        state = mr.train(pools, net, hyper, cfg.mode, state=state, on_step=hook, stop_at=stop)
        timing.append((state.iteration, round(time.perf_counter() - t0, 3)))
        if out is not None:
            state.save(out / "checkpoint")
            write_metrics(out / "metrics.csv", state.records)
        if state.iteration >= cfg.iterations:
            break

    test_dice = mr.evaluate_dice(state.params, pools.test.images, pools.test.masks, net) \
        if len(pools.test) else np.zeros(0)
    stats = None
    if weight_stat_batches and cfg.mode in ("reweight", "per_image"):
        stats = mr.weight_statistics(state.params, pools, net, hyper, weight_stat_batches, cfg.seed,
                                     "pixel" if cfg.mode == "reweight" else "image")
    result = RunResult(cfg, state, split, test_dice, stats)
    if out is not None:
        with open(out / "timing.csv", "a", newline="") as fh:
            if fh.tell() == 0:
                fh.write("iteration,wall_clock_s\n")
            for it, sec in timing:
                fh.write(f"{it},{sec}\n")
        (out / "summary.json").write_text(json.dumps(result.summary(), indent=2) + "\n")
    return result


# -- evaluation ------------------------------------------------------------------------

def load_run(run_dir) -> tuple[RunConfig, mr.TrainState]:
    run_dir = Path(run_dir)
    cfg = RunConfig.from_dict(json.loads((run_dir / "config.json").read_text()))
    state = mr.TrainState.load(run_dir / "checkpoint")
    return cfg, state


def evaluate_run(run_dir, which: str = "test", masks_dir=None, predictions_dir=None, out_csv=None) -> dict:
    """Per-image Dice of a run's checkpoint on one pool of its split.

    ``masks_dir`` swaps in ground truth from ``<id>.pgm`` files; ``predictions_dir``
    receives the predicted masks.
    """
    if which not in ("test", "val", "noisy", "clean"):
        raise ContractError(f"unknown pool '{which}'")
    cfg, state = load_run(run_dir)
    net = cfg.net()
    segnet.check_params(state.params, net)
    split = build_split(cfg)
    pool = getattr(split, which)
    images, _, clean = split.arrays(which, dtype=np.dtype(cfg.dtype))
    preds = segnet.predict_masks(state.params, images, net) if len(images) else np.zeros((0,) + clean.shape[1:])
    if predictions_dir is not None:
        Path(predictions_dir).mkdir(parents=True, exist_ok=True)
        for s, p in zip(pool, preds):
            dataio.save_mask(p, Path(predictions_dir) / f"{s.id}.pgm")
    rows = []
    for s, p, gt in zip(pool, preds, clean):
        if masks_dir is not None:
            gt = dataio.load_mask(Path(masks_dir) / f"{s.id}.pgm")
            if gt.shape != p.shape:
                raise ContractError(f"mask {s.id} has shape {gt.shape}, predictions are {p.shape}")
        rows.append((s.id, float(dice(p, gt))))
    out_csv = Path(out_csv) if out_csv else Path(run_dir) / f"eval_{which}.csv"
    write_csv(out_csv, ("id", "dice"), rows)
    scores = np.array([r[1] for r in rows])
    summary = {"pool": which, "n": len(rows),
               "mean": float(scores.mean()) if len(rows) else None,
               "median": float(np.median(scores)) if len(rows) else None}
    out_csv.with_suffix(".json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


# -- sweeps --------------------------------------------------------------------------

def _sweep_job(args):
    cfg_dict, stat_batches = args
    res = run_training(RunConfig.from_dict(cfg_dict), weight_stat_batches=stat_batches)
    return res.summary()


def sweep_configs(base: RunConfig, k_values, seeds, modes=SWEEP_MODES, noises=None, out=None):
    """One RunConfig per (noise, K, mode, seed).

    The training pool size ``K + M`` stays fixed, so raising K replaces noisy
    images with clean ones.
    """
    total = base.K + base.M
    noises = list(noises) if noises else [base.noise]
    cfgs = []
    for noise in noises:
        for K in k_values:
            if K < 0 or K > total:
                raise ContractError(f"K={K} outside 0..{total}")
            for mode in modes:
                for seed in seeds:
                    run_out = None
                    if out is not None:
                        tag = noise.replace(":", "")
                        run_out = str(Path(out) / "runs" / f"{tag}_K{K}_{mode}_s{seed}")
                    cfgs.append(replace(base, K=K, M=total - K, mode=mode, seed=seed, noise=noise, out=run_out))
    return cfgs


def aggregate(summaries) -> list[dict]:
    groups: dict[tuple, list[float]] = {}
    for s in summaries:
        groups.setdefault((s["noise"], s["K"], s["mode"]), []).append(s["test_dice_mean"])
    rows = []
    for (noise, K, mode), vals in groups.items():
        v = np.asarray(vals, dtype=np.float64)
        sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        rows.append({"noise": noise, "K": K, "mode": mode, "n_seeds": len(v),
                     "mean_dice": float(v.mean()), "sd_dice": sd, "median_dice": float(np.median(v))})
    return rows


def run_sweep(base: RunConfig, k_values, n_seeds: int = 10, modes=SWEEP_MODES, noises=None, out=None,
              workers: int = 1, weight_stat_batches: int = 0) -> tuple[list[dict], list[dict]]:
    """Train and evaluate every (noise, K, mode, seed); returns (per-run summaries, aggregate rows)."""
    cfgs = sweep_configs(base, k_values, range(n_seeds), modes, noises, out)
    for c in cfgs:
        c.validate()
    jobs = [(c.to_dict(), weight_stat_batches) for c in cfgs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            summaries = list(ex.map(_sweep_job, jobs))
    else:
        summaries = [_sweep_job(j) for j in jobs]
    rows = aggregate(summaries)
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "sweep_runs.csv", ("noise", "K", "mode", "seed", "test_dice"),
                  [(s["noise"], s["K"], s["mode"], s["seed"], s["test_dice_mean"]) for s in summaries])
        cols = ("noise", "K", "mode", "n_seeds", "mean_dice", "sd_dice", "median_dice")
        write_csv(out / "sweep.csv", cols, [[r[c] for c in cols] for r in rows])
    return summaries, rows

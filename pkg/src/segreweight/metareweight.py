"""Online meta-reweighting of noisy pixels, plus the training baselines.

One reweighting iteration:

1. virtual step: ``theta_hat = theta - alpha * grad_theta sum_ip w0_ip * l_ip(theta)``
   with ``w0 = 0`` (plain SGD, no momentum or decay);
2. clean gradient ``g_c = grad_theta L_clean(theta_hat)``;
3. weight gradient ``dL_clean/dw_ip = -alpha * g_c . grad_theta l_ip(theta)``,
   computed for every pixel at once as a single forward-mode JVP of the
   loss map along ``-alpha * g_c`` (exact, because ``theta_hat`` is linear in w);
4. ``W = normalize(max(0, -eta * dL_clean/dW))`` so the batch weights sum to 1;
5. real update of theta on the reweighted noisy loss with the full optimizer.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import losses, segnet
from .dataio import DatasetSplit
from .errors import ContractError, NumericalError
from .ndcore import checkpoint, grad, jvp, ops, value_and_grad
from .ndcore.optim import OptimState, sgd_step
from .segnet import NetConfig

MODES = ("reweight", "plain", "fine_tune", "per_image")


@dataclass(frozen=True)
class Hyper:
    alpha: float = 1e-4
    eta: float = 1e-4
    batch_noisy: int = 2
    batch_clean: int = 10
    momentum: float = 0.99
    weight_decay: float = 5e-5
    iterations: int = 3000
    seed: int = 0
    eval_interval: int = 100
    lr_patience: int | None = None  # None: constant learning rates
    fine_tune_fraction: float = 0.5
    dtype: str = "float64"

    def validate(self) -> "Hyper":
        if not (self.alpha > 0 and self.eta > 0):
            raise ContractError("alpha and eta must be positive")
        if self.batch_noisy < 1 or self.batch_clean < 1:
            raise ContractError("batch sizes must be >= 1")
        if self.iterations < 0 or self.eval_interval < 1:
            raise ContractError("iterations must be >= 0 and eval_interval >= 1")
        if not 0.0 <= self.fine_tune_fraction <= 1.0:
            raise ContractError("fine_tune_fraction must lie in [0, 1]")
        if self.dtype not in ("float64", "float32"):
            raise ContractError(f"dtype must be float64 or float32, got {self.dtype}")
        return self


@dataclass
class Batch:
    images: np.ndarray      # normalized [B, 3, H, W]
    masks: np.ndarray       # training labels [B, H, W]
    clean_masks: np.ndarray | None = None

    def __len__(self):
        return len(self.images)


# -- the five steps -----------------------------------------------------------

def _lossmap_fn(batch: Batch, cfg: NetConfig):
    return lambda p: losses.pixel_ce(segnet.forward(p, batch.images, cfg), batch.masks)


def _clean_fn(batch: Batch, cfg: NetConfig):
    return lambda p: losses.clean_loss(segnet.forward(p, batch.images, cfg), batch.masks)


def _check_weights_shape(W, batch: Batch):
    if W.shape != batch.masks.shape:
        raise ContractError(f"weight map shape {W.shape} != batch mask shape {batch.masks.shape}")


def virtual_step(params, noisy: Batch, W0, alpha: float, cfg: NetConfig):
    """``theta - alpha * grad weighted_loss(W0)``, plain SGD.

    An all-zero ``W0`` has an exactly zero gradient, so the parameters come
    back unchanged without evaluating the network.
    """
    W0 = np.asarray(W0, dtype=np.float64)
    _check_weights_shape(W0, noisy)
    if alpha == 0 or not np.any(W0):
        return {k: v.copy() for k, v in params.items()}
    Wc = W0.astype(next(iter(params.values())).dtype)
    lossmap = _lossmap_fn(noisy, cfg)
    # any real W is allowed here (the map is linear in W), so skip the nonnegativity check
    g = grad(lambda p: ops.weighted_sum(lossmap(p), Wc), params)
    return {k: params[k] - alpha * g[k] for k in params}


def weight_grad(params, params_hat, noisy: Batch, clean: Batch, alpha: float, cfg: NetConfig,
                return_clean_loss: bool = False):
    """Gradient of the clean loss at ``params_hat`` with respect to each noisy pixel weight.

    Returns a ``[B, H, W]`` map (and the clean loss value when asked).
    """
    gmap, clean_val = lookahead_weight_grad(_lossmap_fn(noisy, cfg), _clean_fn(clean, cfg), params, params_hat, alpha)
    return (gmap, clean_val) if return_clean_loss else gmap


def lookahead_weight_grad(lossmap_fn: Callable, clean_fn: Callable, params: dict, params_hat: dict, alpha: float):
    """Model-agnostic core of :func:`weight_grad`.

    ``lossmap_fn(params)`` gives the per-element noisy losses, ``clean_fn(params)``
    the scalar clean loss.  Returns ``(d clean / d w, clean loss at params_hat)``.
    """
    if params.keys() != params_hat.keys() or any(np.shape(params[k]) != np.shape(params_hat[k]) for k in params):
        raise ContractError("params and params_hat do not share a structure")
    clean_val, g_c = value_and_grad(clean_fn, params_hat)
    for k, g in g_c.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError("clean_loss", f"non-finite clean gradient for '{k}'")
    tangent = {k: -alpha * g for k, g in g_c.items()}
    gmap = np.asarray(jvp(lossmap_fn, params, tangent), dtype=np.float64)
    return gmap, float(clean_val)


def rectify_normalize(U) -> np.ndarray:
    """``max(0, U)`` scaled to unit total; an all-nonpositive input gives all zeros."""
    W = np.maximum(np.asarray(U, dtype=np.float64), 0.0)
    s = W.sum()
    if s > 0:
        W = W / s
    return W


def per_image_weights(U) -> np.ndarray:
    """One weight per image (pixel contributions summed), spread evenly over its pixels."""
    U = np.asarray(U, dtype=np.float64)
    per_image = rectify_normalize(U.reshape(len(U), -1).sum(axis=1))
    n_pix = int(np.prod(U.shape[1:]))
    return np.broadcast_to((per_image / n_pix).reshape((-1,) + (1,) * (U.ndim - 1)), U.shape).copy()


def uniform_weights(shape) -> np.ndarray:
    return np.full(shape, 1.0 / int(np.prod(shape)))


# -- training state -----------------------------------------------------------

@dataclass
class TrainState:
    params: dict
    opt: OptimState
    iteration: int = 0
    alpha: float = 0.0
    eta: float = 0.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: dict = field(default_factory=lambda: {"noisy_loss": [], "clean_loss": []})
    records: list = field(default_factory=list)
    best_val: float = -math.inf
    stale_evals: int = 0

    @classmethod
    def initial(cls, cfg: NetConfig, hyper: Hyper) -> "TrainState":
        params = segnet.init_params(cfg, dtype=np.dtype(hyper.dtype))
        opt = OptimState.for_params(params, hyper.alpha, hyper.momentum, hyper.weight_decay)
        return cls(params, opt, 0, hyper.alpha, hyper.eta, np.random.default_rng([hyper.seed, 1]))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        tensors = {f"param/{k}": v for k, v in self.params.items()}
        tensors.update({f"velocity/{k}": v for k, v in self.opt.velocity.items()})
        checkpoint.save(d / "state.bin", tensors)
        meta = {
            "iteration": self.iteration, "alpha": self.alpha, "eta": self.eta,
            "momentum": self.opt.momentum, "weight_decay": self.opt.weight_decay,
            "dtype": str(next(iter(self.params.values())).dtype),
            "rng": self.rng.bit_generator.state, "history": self.history, "records": self.records,
            "best_val": self.best_val if math.isfinite(self.best_val) else None,
            "stale_evals": self.stale_evals,
        }
        (d / "state.json").write_text(json.dumps(meta))

    @classmethod
    def load(cls, directory) -> "TrainState":
        d = Path(directory)
        tensors = checkpoint.load(d / "state.bin")
        meta = json.loads((d / "state.json").read_text())
        dtype = np.dtype(meta["dtype"])
        params = {k[6:]: v.astype(dtype) for k, v in tensors.items() if k.startswith("param/")}
        velocity = {k[9:]: v.astype(dtype) for k, v in tensors.items() if k.startswith("velocity/")}
        opt = OptimState(meta["alpha"], meta["momentum"], meta["weight_decay"], velocity)
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
        best = meta["best_val"]
        return cls(params, opt, meta["iteration"], meta["alpha"], meta["eta"], rng, meta["history"],
                   meta["records"], -math.inf if best is None else best, meta["stale_evals"])


@dataclass
class StepInfo:
    weights: np.ndarray
    weight_grad: np.ndarray | None
    noisy_loss: float
    clean_loss: float | None
    noisy: Batch
    clean: Batch | None


def _update(state: TrainState, g: dict) -> None:
    state.opt.lr = state.alpha
    state.params, state.opt = sgd_step(state.params, g, state.opt)


def train_step(state: TrainState, noisy: Batch, clean: Batch, cfg: NetConfig, granularity: str = "pixel",
               weight_grad_fn: Callable | None = None) -> StepInfo:
    """One meta-reweighting iteration; mutates ``state`` and returns the learned weights.

    ``granularity="image"`` gives the per-image reweighting baseline.
    ``weight_grad_fn`` replaces :func:`weight_grad` (same signature), for tests.
    """
    theta = state.params
    W0 = np.zeros(noisy.masks.shape)
    theta_hat = virtual_step(theta, noisy, W0, state.alpha, cfg)
    wg = weight_grad_fn or weight_grad
    gmap, clean_val = wg(theta, theta_hat, noisy, clean, state.alpha, cfg, return_clean_loss=True)
    U = -state.eta * gmap
    if granularity == "pixel":
        W = rectify_normalize(U)
    elif granularity == "image":
        W = per_image_weights(U)
    else:
        raise ContractError(f"unknown granularity '{granularity}'")
    dtype = next(iter(theta.values())).dtype
    Wc = W.astype(dtype)
    lossmap = _lossmap_fn(noisy, cfg)
    noisy_val, g = value_and_grad(lambda p: losses.weighted_loss(lossmap(p), Wc), theta)
    _update(state, g)
    return StepInfo(W, gmap, float(noisy_val), clean_val, noisy, clean)


def plain_step(state: TrainState, batch: Batch, cfg: NetConfig) -> float:
    """Standard training step: every pixel weighted 1 / (batch pixels)."""
    W = uniform_weights(batch.masks.shape).astype(next(iter(state.params.values())).dtype)
    lossmap = _lossmap_fn(batch, cfg)
    val, g = value_and_grad(lambda p: losses.weighted_loss(lossmap(p), W), state.params)
    _update(state, g)
    return float(val)


# -- evaluation ---------------------------------------------------------------

def evaluate_dice(params, images, masks, cfg: NetConfig, chunk: int = 32) -> np.ndarray:
    """Per-image Dice of thresholded predictions against ``masks``."""
    out = []
    for i in range(0, len(images), chunk):
        pred = segnet.predict_masks(params, images[i:i + chunk], cfg)
        out.extend(losses.dice(p, m) for p, m in zip(pred, masks[i:i + chunk]))
    return np.asarray(out)


# -- training loops -------------------------------------------------------------

@dataclass
class Pools:
    """Normalized arrays for every pool of a split, in the training dtype."""

    noisy: Batch
    clean: Batch
    val: Batch
    test: Batch

    @classmethod
    def from_split(cls, split: DatasetSplit, dtype="float64") -> "Pools":
        def mk(which):
            x, y, yc = split.arrays(which, dtype=np.dtype(dtype))
            return Batch(x, y, yc)
        return cls(mk("noisy"), mk("clean"), mk("val"), mk("test"))


def _take(pool: Batch, idx) -> Batch:
    cm = pool.clean_masks[idx] if pool.clean_masks is not None else None
    return Batch(pool.images[idx], pool.masks[idx], cm)


def sample_noisy(rng, pool: Batch, size: int) -> Batch:
    n = len(pool)
    idx = rng.choice(n, size=min(size, n), replace=False)
    return _take(pool, idx)


def sample_clean(rng, pool: Batch, size: int) -> Batch:
    return _take(pool, rng.integers(0, len(pool), size=size))


def _maybe_eval(state: TrainState, pools: Pools, cfg: NetConfig, hyper: Hyper, force=False) -> None:
    it = state.iteration
    if not force and it % hyper.eval_interval:
        return
    if state.records and state.records[-1]["iteration"] == it:
        return
    start = state.records[-1]["iteration"] if state.records else 0
    def window_mean(key):
        vals = [v for v in state.history[key][start:it] if v is not None]
        return float(np.mean(vals)) if vals else None
    val_dice = float(np.mean(evaluate_dice(state.params, pools.val.images, pools.val.masks, cfg))) \
        if len(pools.val) else None
    state.records.append({
        "iteration": it, "noisy_loss": window_mean("noisy_loss"), "clean_loss": window_mean("clean_loss"),
        "val_dice": val_dice, "alpha": state.alpha, "eta": state.eta,
    })
    if hyper.lr_patience is None or val_dice is None:
        return
    if val_dice > state.best_val:
        state.best_val, state.stale_evals = val_dice, 0
    else:
        state.stale_evals += 1
        if state.stale_evals >= hyper.lr_patience:
            state.alpha /= 10
            state.eta /= 10
            state.stale_evals = 0


def train(split: DatasetSplit | Pools, cfg: NetConfig, hyper: Hyper, mode: str = "reweight",
          state: TrainState | None = None, on_step: Callable[[TrainState, StepInfo], None] | None = None,
          stop_at: int | None = None) -> TrainState:
    """Run (or resume) training in one of :data:`MODES`.

    ``fine_tune`` spends the first ``(1 - fine_tune_fraction)`` of the
    iterations on the noisy pool and the rest on the clean pool (clean batch
    size).  ``stop_at`` halts early at that iteration so a run can be resumed.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode '{mode}'; expected one of {MODES}")
    hyper.validate()
    cfg.validate()
    pools = split if isinstance(split, Pools) else Pools.from_split(split, hyper.dtype)
    if mode in ("reweight", "per_image", "fine_tune") and len(pools.clean) == 0:
        raise ContractError(f"mode '{mode}' needs a nonempty clean pool")
    if mode != "fine_tune" and len(pools.noisy) == 0:
        raise ContractError(f"mode '{mode}' needs a nonempty noisy pool")
    if state is None:
        state = TrainState.initial(cfg, hyper)
    segnet.check_params(state.params, cfg)
    pretrain = hyper.iterations - int(round(hyper.fine_tune_fraction * hyper.iterations))
    end = hyper.iterations if stop_at is None else min(stop_at, hyper.iterations)
    if state.iteration == 0:
        _maybe_eval(state, pools, cfg, hyper, force=True)

    while state.iteration < end:
        if mode in ("reweight", "per_image"):
            nb = sample_noisy(state.rng, pools.noisy, hyper.batch_noisy)
            cb = sample_clean(state.rng, pools.clean, hyper.batch_clean)
            info = train_step(state, nb, cb, cfg, "pixel" if mode == "reweight" else "image")
            noisy_val, clean_val = info.noisy_loss, info.clean_loss
        elif mode == "plain" or (mode == "fine_tune" and state.iteration < pretrain and len(pools.noisy)):
            nb = sample_noisy(state.rng, pools.noisy, hyper.batch_noisy)
            noisy_val, clean_val = plain_step(state, nb, cfg), None
            info = None
        else:
            cb = sample_clean(state.rng, pools.clean, hyper.batch_clean)
            noisy_val, clean_val = None, plain_step(state, cb, cfg)
            info = None
        state.history["noisy_loss"].append(noisy_val)
        state.history["clean_loss"].append(clean_val)
        state.iteration += 1
        if on_step is not None and info is not None:
            on_step(state, info)
        _maybe_eval(state, pools, cfg, hyper, force=state.iteration == hyper.iterations)
    return state


def weight_statistics(params, pools: Pools, cfg: NetConfig, hyper: Hyper, n_batches: int = 20, seed: int = 0,
                      granularity: str = "pixel") -> dict:
    """Mean learned weight over mislabelled vs correctly labelled noisy pixels at fixed ``params``."""
    rng = np.random.default_rng([seed, 7])
    state = TrainState(params, OptimState(hyper.alpha), alpha=hyper.alpha, eta=hyper.eta)
    sums = {"mislabelled": [0.0, 0], "correct": [0.0, 0]}
    for _ in range(n_batches):
        nb = sample_noisy(rng, pools.noisy, hyper.batch_noisy)
        cb = sample_clean(rng, pools.clean, hyper.batch_clean)
        theta_hat = virtual_step(state.params, nb, np.zeros(nb.masks.shape), hyper.alpha, cfg)
        U = -hyper.eta * weight_grad(state.params, theta_hat, nb, cb, hyper.alpha, cfg)
        W = rectify_normalize(U) if granularity == "pixel" else per_image_weights(U)
        wrong = nb.masks != nb.clean_masks
        sums["mislabelled"][0] += float(W[wrong].sum())
        sums["mislabelled"][1] += int(wrong.sum())
        sums["correct"][0] += float(W[~wrong].sum())
        sums["correct"][1] += int((~wrong).sum())
    return {k: (s / n if n else float("nan")) for k, (s, n) in sums.items()}


def hyper_from_dict(d: dict) -> Hyper:
    known = {f for f in Hyper.__dataclass_fields__}
    return Hyper(**{k: v for k, v in d.items() if k in known})


def hyper_to_dict(h: Hyper) -> dict:
    return asdict(h)

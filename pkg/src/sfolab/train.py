"""Adam, the training loop, evaluation and the ablation experiment drivers."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import Dataset, boundary_interior_errors, rel_l2, split_indices, subsample
from .model import SFOConfig, SFOModel, coefficient_norms, count_params, rebuild_for_resolution

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "AdamState",
    "NonFiniteGradientError",
    "adam_step",
    "TrainResult",
    "train",
    "evaluate",
    "config_for_dataset",
    "run_arm",
    "ablate_basis",
    "sweep_rank",
    "sweep_width",
    "tied_vs_multi",
    "resolution_transfer",
    "glu_vs_mlp",
    "write_csv",
    "ARM_COLUMNS",
    "DIVERGENCE_LIMIT",
]

DIVERGENCE_LIMIT = 1e3
ARM_COLUMNS = ["factor", "value", "seed", "val_rel_l2", "params", "wall_time_s"]


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 200
    batch_size: int = 32
    seed: int = 0
    split: float = 0.9
    split_seed: int = 0
    weight_decay: float = 0.0     # recorded only; no decay is applied
    freeze_layers: bool = False   # train only P and Q with identity layers

    def __post_init__(self):
        if not self.lr >= 0.0:
            raise ValueError("lr must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must be in (0, 1)")
        if self.weight_decay != 0.0:
            raise ValueError("weight decay is not supported")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place, for every name in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name} at step {state.step + 1}")
        if params[name].shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class TrainResult:
    history: list                  # dicts: epoch, train_rel_l2, val_rel_l2 (percent)
    status: str = "ok"             # ok | diverged | non-finite-gradient
    message: str = ""
    train_idx: np.ndarray = None
    val_idx: np.ndarray = None

    @property
    def final_val(self) -> float:
        return self.history[-1]["val_rel_l2"]


def _trainable(model: SFOModel, cfg: TrainConfig) -> list:
    if cfg.freeze_layers:
        return [n for n in model.params if n.startswith(("P.", "Q."))]
    return list(model.params)


def train(model: SFOModel, dataset: Dataset, cfg: TrainConfig, callback=None) -> TrainResult:
    """Minimize the batch-mean relative L2 error with Adam.

    The history starts with the untrained model at epoch 0.  Training stops
    early if a batch loss exceeds ``DIVERGENCE_LIMIT`` or a gradient is not
    finite; the partial history is returned with the reason in ``status``.
    """
    if dataset.grid.sizes != model.config.grid:
        raise ValueError(f"dataset grid {dataset.grid.sizes} does not match model grid {model.config.grid}")
    tr, va = split_indices(dataset.N, cfg.split, cfg.split_seed)
    a_tr, u_tr = dataset.inputs[tr], dataset.targets[tr]
    a_va, u_va = dataset.inputs[va], dataset.targets[va]
    if cfg.freeze_layers:
        model.zero_mixers()
    names = _trainable(model, cfg)
    arrays = {n: model.params[n].value for n in names}
    state = AdamState()
    rng = np.random.default_rng(cfg.seed)

    def record(epoch, train_loss):
        entry = {"epoch": epoch, "train_rel_l2": train_loss,
                 "val_rel_l2": rel_l2(u_va, model.predict(a_va))}
        history.append(entry)
        if callback is not None:
            callback(entry)

    history: list = []
    record(0, rel_l2(u_tr, model.predict(a_tr)))
    result = TrainResult(history, train_idx=tr, val_idx=va)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(tr))
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            with ad.Tape() as tape:
                loss = ad.rel_l2_loss(model.forward(ad.Tensor(a_tr[idx])), u_tr[idx])
            value = float(loss.value)
            if not np.isfinite(value) or value > DIVERGENCE_LIMIT:
                result.status, result.message = "diverged", f"batch loss {value:.3g} at epoch {epoch}"
                log.error("training aborted: %s", result.message)
                return result
            leaf_grads = ad.backward(loss)
            tape.release()
            grads = {n: leaf_grads.get(model.params[n], np.zeros_like(arrays[n])) for n in names}
            try:
                adam_step(arrays, grads, state, cfg.lr)
            except NonFiniteGradientError as exc:
                result.status, result.message = "non-finite-gradient", f"epoch {epoch}: {exc}"
                log.error("training aborted: %s", result.message)
                return result
            total += value * len(idx)
            count += len(idx)
        record(epoch, 100.0 * total / count)
    return result


def evaluate(model: SFOModel, dataset: Dataset, idx=None) -> dict:
    """Relative L2 (percent), its boundary/interior split and the mode coefficient norms.

    On grids too coarse for a boundary band (size below 10) the split is None.
    """
    ds = dataset if idx is None else dataset.take(idx)
    pred = model.predict(ds.inputs)
    if min(ds.grid.sizes) >= 10:
        full, bnd, inner = boundary_interior_errors(ds.targets, pred)
    else:
        full, bnd, inner = rel_l2(ds.targets, pred), None, None
    return {
        "rel_l2": rel_l2(ds.targets, pred),
        "full_rel_l2": full,
        "boundary_rel_l2": bnd,
        "interior_rel_l2": inner,
        "coefficient_norms": [float(x) for x in coefficient_norms(model)],
    }


# ---------------------------------------------------------------- experiments

def config_for_dataset(dataset: Dataset, **overrides) -> SFOConfig:
    base = {"grid": dataset.grid.sizes, "in_channels": dataset.in_channels,
            "out_channels": dataset.out_channels}
    base.update(overrides)
    return SFOConfig(**base)


def run_arm(dataset: Dataset, mcfg: SFOConfig, tcfg: TrainConfig):
    """Train one configuration; returns ``(final val %, param count, wall seconds, model, result)``."""
    t0 = time.perf_counter()
    model = SFOModel(mcfg)
    result = train(model, dataset, tcfg)
    wall = time.perf_counter() - t0
    return result.final_val, count_params(mcfg), wall, model, result


def _sweep(dataset, base: SFOConfig, tcfg: TrainConfig, factor: str, values, seeds, make):
    rows = []
    for value in values:
        for seed in seeds:
            mcfg = make(replace(base, seed=int(seed)), value)
            val, params, wall, _, res = run_arm(dataset, mcfg, replace(tcfg, seed=int(seed)))
            if res.status != "ok":
                log.warning("%s=%s seed %s: %s", factor, value, seed, res.message)
            rows.append({"factor": factor, "value": value, "seed": int(seed),
                         "val_rel_l2": val, "params": params, "wall_time_s": wall})
    return rows


def ablate_basis(dataset, base, tcfg, kinds=("usb", "fourier", "chebyshev", "random"), seeds=(0, 1, 2)):
    return _sweep(dataset, base, tcfg, "basis", kinds, seeds, lambda c, k: replace(c, basis=k))


def sweep_rank(dataset, base, tcfg, Ls=(4, 8, 16), seeds=(0, 1, 2)):
    return _sweep(dataset, base, tcfg, "L", Ls, seeds, lambda c, L: replace(c, L=int(L)))


def sweep_width(dataset, base, tcfg, ds=(8, 16, 32), seeds=(0, 1, 2)):
    return _sweep(dataset, base, tcfg, "d", ds, seeds, lambda c, d: replace(c, d=int(d)))


def tied_vs_multi(dataset, base, tcfg, L: int = 6, seeds=(0, 1, 2)):
    return _sweep(dataset, replace(base, L=L), tcfg, "scheme", ("tied", "multi"), seeds,
                  lambda c, s: replace(c, scheme=s))


def glu_vs_mlp(dataset, base, tcfg, seeds=(0, 1, 2)):
    return _sweep(dataset, base, tcfg, "variant", ("mlp", "glu"), seeds,
                  lambda c, v: replace(c, variant=v))


def resolution_transfer(model: SFOModel, dataset: Dataset, strides=(1, 2, 4, 8), idx=None):
    """Evaluate a trained model on coarsened copies of ``dataset`` (zero-shot)."""
    rows = []
    ds = dataset if idx is None else dataset.take(idx)
    for s in strides:
        coarse = subsample(ds, s)
        n = coarse.grid.sizes[0]
        m = model if n == model.config.n else rebuild_for_resolution(model, n)
        rows.append({"stride": int(s), "n": n, "L": m.config.L,
                     "rel_l2": rel_l2(coarse.targets, m.predict(coarse.inputs))})
    return rows


def write_csv(path, rows, columns=None) -> None:
    if not rows:
        raise ValueError("no rows to write")
    columns = columns or list(rows[0])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in columns])

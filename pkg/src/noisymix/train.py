"""Training loop, dataset splits and the toggle ablation."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .augment import augment_and_mix
from .autodiff import no_grad
from .config import RunConfig, to_dict
from .data import gen_synthetic_images, gen_toy_dataset, load_cifar10_binary
from .errors import NumericalError
from .mixing import stream
from .nn import MlpModel, Optimizer, forward, step
from .objectives import noisymix_loss
from .robust import CorruptionSpec, robust_accuracy

LOG_COLUMNS = ("seed", "epoch", "train_loss", "test_accuracy")
ABLATION_COLUMNS = ("augment", "feature_mix", "noise", "jsd", "seed", "clean_accuracy",
                    "robust_accuracy", "robustness_gain")
# 2-D task variants as (augment, feature_mix, noise, jsd); "augment" there is the vector jitter
TOY_VARIANTS = {
    "baseline": (False, False, False, False),
    "noise_injection": (False, False, True, False),
    "manifold_mixup": (False, True, False, False),
    "nfm": (False, True, True, False),
    "manifold_mixup_jsd": (True, True, False, True),
    "noisymix": (True, True, True, True),
}
# row order: all-off first, then each single toggle switched off, all-on last
ABLATION_ROWS = ((False, False, False, False), (False, True, True, True), (True, False, True, True),
                 (True, True, False, True), (True, True, True, False), (True, True, True, True))


@dataclass
class Split:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    image_shape: Optional[tuple] = None


def load_split(cfg: RunConfig, seed: int) -> Split:
    """Dataset for one run; generated data is re-drawn per seed."""
    if cfg.dataset == "toy":
        ds = gen_toy_dataset(replace(cfg.toy, seed=cfg.toy.seed + seed))
        (xtr, ytr), (xte, yte) = ds.train, ds.test
        return Split(xtr, ytr, xte, yte, 2)
    if cfg.dataset == "images":
        images, labels = gen_synthetic_images(replace(cfg.images, seed=cfg.images.seed + seed))
        n_classes = 4
    else:
        images, labels = load_cifar10_binary(cfg.cifar_path)
        images, labels = images[:cfg.cifar_limit], labels[:cfg.cifar_limit]
        n_classes = 10
    n_test = int(round(len(labels) * cfg.test_fraction))
    n_train = len(labels) - n_test
    return Split(images[:n_train], labels[:n_train], images[n_train:], labels[n_train:], n_classes,
                 tuple(images.shape[1:]))


def init_model(cfg: RunConfig, n_in: int, n_classes: int, rng) -> MlpModel:
    widths = [n_in, *cfg.model.hidden, n_classes]
    return MlpModel.init(widths, rng, cfg.model.activation, tuple(cfg.model.mixable))


def flat(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(len(x), -1)


def predict(model: MlpModel, x) -> np.ndarray:
    with no_grad():
        return np.argmax(forward(model, flat(x)).data, axis=1)


def accuracy(model: MlpModel, x, y) -> float:
    return float(np.mean(predict(model, x) == np.asarray(y)))


def build_aug_bank(images: np.ndarray, cfg: RunConfig, rng) -> np.ndarray:
    """``cfg.aug_bank`` precomputed augmentations per training image, shape (K, N, D)."""
    policy = cfg.loss.policy
    return np.stack([np.stack([augment_and_mix(im, policy, rng).ravel() for im in images])
                     for _ in range(cfg.aug_bank)])


def _n_aug(cfg: RunConfig) -> int:
    return cfg.loss.jsd_branches - 1 if cfg.loss.use_jsd else 1


@dataclass
class RunResult:
    seed: int
    model: MlpModel
    log: list = field(default_factory=list)
    split: Optional[Split] = None


def train_one(cfg: RunConfig, seed: int, split: Optional[Split] = None) -> RunResult:
    split = split or load_split(cfg, seed)
    loss_cfg = cfg.loss.with_(image_shape=split.image_shape)
    model = init_model(cfg, flat(split.x_train[:1]).shape[1], split.n_classes, stream(seed, 0))
    rng = stream(seed, 1)
    opt = Optimizer(cfg.optimizer.kind, cfg.optimizer.lr)
    x_train = flat(split.x_train)
    onehot = np.eye(split.n_classes)[split.y_train]
    bank = None
    if split.image_shape is not None and loss_cfg.use_augment and cfg.epochs > 0:
        bank = build_aug_bank(split.x_train, cfg, stream(seed, 2))
    n = len(x_train)
    result = RunResult(seed, model, [], split)
    step_index = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        totals = []
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            augmented = None
            if bank is not None:
                augmented = [bank[rng.integers(len(bank), size=idx.size), idx] for _ in range(_n_aug(cfg))]
            leaves = model.leaves()
            try:
                total, _, _ = noisymix_loss(model, x_train[idx], onehot[idx], loss_cfg, rng,
                                            params=leaves, augmented=augmented)
                if not np.isfinite(total.item()):
                    raise NumericalError("loss is not finite")
                names = list(leaves)
                grads = ad.grad(total, [leaves[k] for k in names])
                step(opt, model, {k: g.data for k, g in zip(names, grads)})
            except NumericalError as exc:
                raise NumericalError(
                    f"training aborted at seed {seed}, epoch {epoch}, step {step_index}: {exc}; "
                    f"config={json.dumps(to_dict(cfg), sort_keys=True, default=str)}") from exc
            totals.append(total.item())
            step_index += 1
        result.log.append((seed, epoch, float(np.mean(totals)), accuracy(model, split.x_test, split.y_test)))
    return result


def _train_seed(args):
    cfg, seed = args
    return train_one(cfg, seed)


def train(cfg: RunConfig, workers: int = 1) -> list[RunResult]:
    """One run per seed; runs are independent so they may use a process pool."""
    jobs = [(cfg, int(s)) for s in cfg.seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            return list(pool.map(_train_seed, jobs))
    return [_train_seed(j) for j in jobs]


def log_csv(results: Sequence[RunResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in results:
        for seed, epoch, loss, acc in r.log:
            w.writerow([seed, epoch, repr(loss), repr(acc)])
    return buf.getvalue()


def mean_final_accuracy(results: Sequence[RunResult]) -> float:
    accs = [r.log[-1][3] if r.log else accuracy(r.model, r.split.x_test, r.split.y_test) for r in results]
    return float(np.mean(accs))


# ---- ablation ---------------------------------------------------------------------------------
def eval_specs(cfg: RunConfig) -> list[CorruptionSpec]:
    return [CorruptionSpec(k, int(s)) for k in cfg.eval.kinds for s in cfg.eval.severities]


def _ablate_job(args):
    cfg, toggles, seed = args
    run = train_one(cfg.with_toggles(*toggles), seed)
    split = run.split
    rep = robust_accuracy(run.model.copy(), split.x_test, split.y_test, eval_specs(cfg), seed=seed)
    preds = predict(run.model, split.x_test)
    clean = float(np.mean(preds == split.y_test))
    return toggles, seed, clean, rep.robust_accuracy


def ablate(cfg: RunConfig, rows: Sequence[tuple] = ABLATION_ROWS, workers: int = 1) -> list[dict]:
    """Train every (row, seed) and report clean/robust accuracy and the gain over all-off.

    The gain of a row is its robust accuracy minus the all-off row's robust
    accuracy for the same seed; the all-off row is trained even if not listed.
    """
    rows = [tuple(bool(b) for b in r) for r in rows]
    if any(len(r) != 4 for r in rows):
        raise ValueError("ablation rows must have 4 toggles")
    off = (False, False, False, False)
    needed = rows if off in rows else [off, *rows]
    jobs = [(cfg, r, int(s)) for r in needed for s in cfg.seeds]
    if workers > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            done = list(pool.map(_ablate_job, jobs))
    else:
        done = [_ablate_job(j) for j in jobs]
    by_key = {(t, s): (c, r) for t, s, c, r in done}
    table = []
    for r in rows:
        for s in cfg.seeds:
            clean, robust = by_key[(r, int(s))]
            base = by_key[(off, int(s))][1]
            table.append({"augment": r[0], "feature_mix": r[1], "noise": r[2], "jsd": r[3],
                          "seed": int(s), "clean_accuracy": clean, "robust_accuracy": robust,
                          "robustness_gain": robust - base})
    return table


def ablation_csv(table: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ABLATION_COLUMNS)
    for row in table:
        w.writerow([int(row[c]) if isinstance(row[c], bool) else
                    (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in ABLATION_COLUMNS])
    return buf.getvalue()


def ablation_means(table: Sequence[dict]) -> dict:
    """Per toggle row: (mean clean accuracy, mean robust accuracy) over seeds."""
    out = {}
    for row in table:
        key = (row["augment"], row["feature_mix"], row["noise"], row["jsd"])
        out.setdefault(key, []).append((row["clean_accuracy"], row["robust_accuracy"]))
    return {k: tuple(np.mean(v, axis=0)) for k, v in out.items()}


def reproduce_toy(cfg: RunConfig, workers: int = 1) -> dict:
    """Mean final test accuracy over seeds for each toy variant."""
    return {name: mean_final_accuracy(train(cfg.with_toggles(*t), workers))
            for name, t in TOY_VARIANTS.items()}

"""Command-line entry point: ``noisymix <command> [options]``.

Exit status: 0 success, 1 usage/contract/config error, 2 a verify-theory check failed.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import autodiff as ad
from .config import RunConfig, dataset_defaults, load_config, to_dict
from .data import gen_synthetic_images, gen_toy_dataset
from .errors import NoisyMixError
from .imageio import write_nmix, write_ppm
from .mixing import NoiseConfig, stream
from .nn import MlpModel, forward
from .robust import evaluate, mean_flip_rate
from .theory import (expand_theorem1, expand_theorem2, taylor_jsd_check, verify_lemma1,
                     verify_theorem3)
from .train import ablate, ablation_csv, ablation_means, eval_specs, log_csv, train, train_one

SLOPE_MIN = 2.5
N_PREVIEW = 16


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else dataset_defaults("toy")
    if args.seed is not None:
        cfg = cfg.with_(seeds=(args.seed,))
    return cfg


# ---- gen-data ------------------------------------------------------------------------------
def cmd_gen_data(cfg: RunConfig, args, out: Path) -> int:
    seed = cfg.seeds[0]
    if cfg.dataset == "toy":
        ds = gen_toy_dataset(replace(cfg.toy, seed=cfg.toy.seed + seed))
        with open(out / "toy.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["x0", "x1", "label", "in_band", "split"])
            for k, (x, y, b) in enumerate(zip(ds.X, ds.y, ds.in_band)):
                w.writerow([repr(float(x[0])), repr(float(x[1])), int(y), int(b),
                            "train" if k < ds.n_train else "test"])
        return 0
    if cfg.dataset != "images":
        raise NoisyMixError("gen-data writes the toy or synthetic-image datasets only")
    images, labels = gen_synthetic_images(replace(cfg.images, seed=cfg.images.seed + seed))
    folder = out / "images"
    folder.mkdir(exist_ok=True)
    with open(out / "images.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "file"])
        for k, (img, lab) in enumerate(zip(images, labels)):
            name = f"{k:05d}.nmix"
            write_nmix(folder / name, img)
            if k < N_PREVIEW:
                write_ppm(folder / f"{k:05d}.ppm", img)
            w.writerow([k, int(lab), f"images/{name}"])
    return 0


# ---- train / eval / ablate ----------------------------------------------------------------------
def cmd_train(cfg: RunConfig, args, out: Path) -> int:
    results = train(cfg, workers=args.threads)
    (out / "train_log.csv").write_text(log_csv(results))
    finals = {str(r.seed): (r.log[-1][3] if r.log else None) for r in results}
    valid = [v for v in finals.values() if v is not None]
    _dump(out / "train_summary.json", {
        "config": to_dict(cfg), "final_test_accuracy": finals,
        "mean_final_test_accuracy": float(np.mean(valid)) if valid else None})
    return 0


def cmd_eval(cfg: RunConfig, args, out: Path) -> int:
    """Train the configured model and an all-off reference on the first seed, then
    evaluate both; the reference supplies the flip-rate normalization."""
    seed = cfg.seeds[0]
    run = train_one(cfg, seed)
    ref = train_one(cfg.with_toggles(False, False, False, False), seed, run.split)
    split = run.split
    kw = dict(seed=seed, n_sequences=cfg.eval.n_sequences, n_frames=cfg.eval.n_frames,
              n_bins=cfg.eval.n_bins, workers=args.threads)
    specs = eval_specs(cfg) if split.image_shape is not None else []
    kinds = _sequence_kinds(split)
    ref_report = evaluate(ref.model, _as_images(split.x_test), split.y_test, specs,
                          sequence_kinds=kinds, **kw)
    positive = {k: v for k, v in ref_report.flip_probability.items() if v > 0}
    report = evaluate(run.model, _as_images(split.x_test), split.y_test, specs, sequence_kinds=kinds, **kw)
    if positive:
        report.mean_flip_rate = mean_flip_rate({k: report.flip_probability[k] for k in positive}, positive)
    (out / "eval.csv").write_text(report.to_csv())
    payload = report.to_dict()
    payload["reference_flip_probability"] = ref_report.flip_probability
    _dump(out / "eval.json", payload)
    return 0


def _as_images(x):
    x = np.asarray(x, dtype=float)
    # 2-D points become 1x2x1 "images"; only calibration metrics are computed for them
    return x if x.ndim == 4 else x.reshape(len(x), 1, -1, 1)


def _sequence_kinds(split):
    # corruptions and sequences clamp to [0, 1], which is meaningful for images only
    if split.image_shape is None:
        return ()
    return ("white_noise", "shot_noise", "impulse_noise", "gaussian_blur", "brightness", "rotate",
            "translate")


def cmd_ablate(cfg: RunConfig, args, out: Path) -> int:
    table = ablate(cfg, workers=args.threads)
    (out / "ablation.csv").write_text(ablation_csv(table))
    means = ablation_means(table)
    _dump(out / "ablation_summary.json", {
        "rows": [{"augment": k[0], "feature_mix": k[1], "noise": k[2], "jsd": k[3],
                  "mean_clean_accuracy": v[0], "mean_robust_accuracy": v[1]} for k, v in means.items()]})
    return 0


# ---- verify-theory ----------------------------------------------------------------------------------
def theory_setup(cfg: RunConfig, seed: int):
    """2-8-1 softplus model with enlarged weights and n standardized toy points."""
    th = cfg.theory
    rng = stream(seed, 7)
    model = MlpModel.init([2, 8, 1], rng, "softplus")
    for k in model.params:
        model.params[k] = model.params[k] * th.weight_scale
    ds = gen_toy_dataset(replace(cfg.toy, seed=cfg.toy.seed + seed))
    X = ds.X[:th.n_points] / ds.X.std()
    y = ds.y[:th.n_points].astype(float)
    noise = NoiseConfig(alpha=cfg.loss.noise.alpha, beta=cfg.loss.noise.beta,
                        sigma_add=th.sigma, sigma_mult=th.sigma, family=cfg.loss.noise.family)
    return model, X, y, noise, rng


def _grid(th) -> list:
    return [0.0, *th.eps_grid]


def verify(which: str, cfg: RunConfig, seed: int) -> dict:
    th = cfg.theory
    model, X, y, noise, rng = theory_setup(cfg, seed)
    if which == "thm1":
        rep = expand_theorem1(model, X, y, noise, _grid(th), th.n_mc, rng)
        zero = rep.point(0.0).residual
        return {"report": rep.to_dict(), "zero_residual": zero,
                "passed": bool(rep.slope is not None and rep.slope >= SLOPE_MIN and zero <= 1e-10)}
    if which == "thm2":
        AX = X + th.aug_scale * rng.standard_normal(X.shape)
        rep = expand_theorem2(model, X, AX, noise, _grid(th), th.n_mc, rng)
        ident = expand_theorem2(model, X, X.copy(), noise, _grid(th), th.n_mc, rng)
        worst = max(p.mc for p in ident.points)
        return {"report": rep.to_dict(), "identity_max_jsd": worst,
                "passed": bool(rep.slope is not None and rep.slope >= SLOPE_MIN and worst <= 1e-12)}
    if which == "prop1":
        net = MlpModel.init([2, 8, 3], rng, "softplus")
        p_fn = lambda z: ad.softmax(forward(net, ad.reshape(z, (1, -1))))
        base = [X[0], X[1], X[2]]
        dirs = [rng.standard_normal(2) for _ in base]
        second = [rng.standard_normal(2) for _ in base]
        rep = taylor_jsd_check(p_fn, base, dirs, second, np.full(3, 1 / 3), th.eps_grid)
        return {"report": rep.to_dict(),
                "passed": bool(rep.slope is not None and rep.slope >= SLOPE_MIN)}
    if which == "lemma1":
        rows = []
        for k in range(th.lemma1_instances):
            r = stream(seed, 100 + k)
            m = MlpModel.init([2, 4, 1], r, "softplus")
            Xk = r.standard_normal((6, 2))
            yk = (r.random(6) < 0.5).astype(float)
            rep = verify_lemma1(m, Xk, yk, noise, th.lemma1_n_mc, r)
            rows.append({"double_sum": rep.double_sum, "reformulated": rep.reformulated,
                         "difference": rep.difference, "pooled_se": rep.pooled_se, "within_3se": rep.within(3.0)})
        return {"instances": rows, "passed": all(r["within_3se"] for r in rows)}
    if which == "thm3":
        rep = verify_theorem3(th.thm3_trials, th.thm3_eps, th.thm3_gammas, noise.with_(sigma_add=0.1, sigma_mult=0.1),
                              n_mc=th.thm3_n_mc, rng=rng)
        per_trial = {}
        for t in rep.trials:
            per_trial.setdefault(t.trial, True)
            per_trial[t.trial] &= rep.passed(t)
        n_ok = sum(per_trial.values())
        gap = max(t.pga_gap for t in rep.trials)
        need = int(np.ceil(0.99 * len(per_trial)))
        return {"report": rep.to_dict(), "trials_passed": n_ok, "trials": len(per_trial),
                "max_pga_gap": gap, "passed": bool(n_ok >= need and gap <= 1e-6)}
    raise NoisyMixError(f"unknown theory check {which!r}")


def cmd_verify(cfg: RunConfig, args, out: Path) -> int:
    result = verify(args.which, cfg, cfg.seeds[0])
    _dump(out / f"theory_{args.which}.json", result)
    print(f"{args.which}: {'PASS' if result['passed'] else 'FAIL'}")
    return 0 if result["passed"] else 2


# ---- report ----------------------------------------------------------------------------------------
def cmd_report(cfg: RunConfig, args, out: Path) -> int:
    """Merge every JSON and CSV output in the out dir (or the given files) into report.json."""
    files = [Path(p) for p in args.inputs] if args.inputs else sorted(
        p for p in out.iterdir() if p.suffix in (".json", ".csv") and p.name != "report.json")
    merged = {}
    for p in files:
        if not p.is_file():
            raise NoisyMixError(f"report input not found: {p}")
        if p.suffix == ".json":
            merged[p.name] = json.loads(p.read_text())
        else:
            with open(p, newline="") as fh:
                merged[p.name] = list(csv.DictReader(fh))
    _dump(out / "report.json", merged)
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval-robustness": cmd_eval,
            "ablate": cmd_ablate, "verify-theory": cmd_verify, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="TOML or JSON run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="run a single seed")
    common.add_argument("--out-dir", default=argparse.SUPPRESS, help="output directory (default: out)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker pool size")
    parser = _Parser(prog="noisymix", parents=[common], description="NoisyMix training and checks")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in ("gen-data", "train", "eval-robustness", "ablate"):
        sub.add_parser(name, parents=[common])
    v = sub.add_parser("verify-theory", parents=[common])
    v.add_argument("which", choices=("lemma1", "thm1", "thm2", "prop1", "thm3"))
    r = sub.add_parser("report", parents=[common])
    r.add_argument("inputs", nargs="*", help="files to merge (default: all outputs in --out-dir)")
    return parser


def main(argv: Optional[list] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        for name, default in (("config", None), ("seed", None), ("out_dir", "out"), ("threads", 1)):
            if not hasattr(args, name):
                setattr(args, name, default)
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
        cfg = _run_config(args)
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args, out)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (NoisyMixError, ValueError, OSError) as exc:
        print(f"noisymix: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

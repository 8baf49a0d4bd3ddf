"""Command-line entry points: ``train``, ``sample``, ``eval`` and ``oracle``.

Exit codes: 0 success, 1 usage or input error, 2 numeric divergence, 3 oracle failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import autodiff as ad
from . import container
from . import linops as lo
from . import metrics as mt
from . import oracles
from . import problems as pb
from .config import ConfigError, RunConfig, load_config
from .kernels import (ChainDivergenceError, Observation, ObservationBatch, UnfoldedModel,
                      unfold_chain, zero_shot_latino_defaults)
from .priors import VPSchedule
from .training import Checkpoint, Discriminator, TrainingDivergenceError, train

EXIT_OK, EXIT_USAGE, EXIT_DIVERGENCE, EXIT_ORACLE = 0, 1, 2, 3
METRICS = ("psnr", "ssim", "sw", "latent_w2", "mmd", "pca", "residual_corr")
CHAIN_CHUNK = 64  # chains per work item; fixed so results do not depend on the thread count


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def n_threads() -> int:
    raw = os.environ.get("UMCMC_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"UMCMC_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"UMCMC_THREADS must be a positive integer, got {raw!r}")
    return n


def _map(fn, items):
    items = list(items)
    n = min(n_threads(), len(items))
    if n <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


# --- problem construction ----------------------------------------------------------------

def toy_problem(problem: dict, sigma_y: float | None = None) -> pb.ToyProblem:
    sigma = problem["sigma_y"] if sigma_y is None else sigma_y
    if problem["kind"] == "gmm_toy":
        return pb.gmm_toy_problem(sigma)
    if problem["kind"] == "latent_toy":
        w = np.array([float(v) for v in problem["latent_w"].split(",")])
        if w.size != 4:
            raise ConfigError("[problem] latent_w needs four comma-separated numbers (a 2 x 2 matrix)")
        prior = pb.LatentLaplaceToyPrior(w.reshape(2, 2), problem["latent_lam"], problem["latent_rho"])
        return pb.ToyProblem(prior, lo.Identity(2), sigma)
    raise ConfigError(f"problem kind {problem['kind']!r} is not a toy problem")


def is_toy(problem: dict) -> bool:
    return problem["kind"] in ("gmm_toy", "latent_toy")


def operator_factory(problem: dict, image_shape: tuple):
    kind = problem["kind"]
    if kind == "blur":
        def make(rng):
            k = pb.sample_motion_blur_kernel(problem["kernel_size"], problem["length_scale"], problem["gp_std"], rng)
            return lo.Circulant2D(k, image_shape)
    elif kind == "mask":
        def make(rng):
            return lo.FourierMask(pb.sample_fourier_mask(image_shape, problem["n_tracks"], rng=rng))
    elif kind == "identity":
        def make(rng):
            return lo.Identity(image_shape)
    else:
        raise ConfigError(f"problem kind {kind!r} has no image operator")
    return make


def load_images(path: str, pad: int, limit: int | None = None) -> np.ndarray:
    imgs = pb.load_idx_images(path, pad=pad).images
    return imgs if limit is None else imgs[:limit]


def build_data(rc: RunConfig):
    rng = np.random.default_rng([rc.seed, 7])
    d = rc.data
    if is_toy(rc.problem):
        return pb.toy_paired_data(toy_problem(rc.problem), d["n_train"], d["n_val"], rng)
    imgs = load_images(d["images"], d["pad"], d["max_images"])
    make = operator_factory(rc.problem, imgs.shape[1:])
    return pb.image_paired_data(imgs, make, rc.problem["sigma_y"], d["n_val"], rng)


def build_model(rc: RunConfig, data) -> UnfoldedModel:
    m = rc.model
    d_x = data.train_x.shape[1]
    rng = np.random.default_rng([rc.seed, 11])
    if m["kernel"] == "sgs":
        d_z = m["d_z"] if m["d_z"] is not None else max(1, d_x // 4)
        return UnfoldedModel.sgs(d_x, d_z, m["L"], rng, L0=m["L0"], gamma=m["gamma"], rho=m["rho"], lam=m["lam"])
    lip = float(np.median([ob.operator.lipschitz() for ob in data.train_obs]))
    return UnfoldedModel.latino(d_x, m["L"], m["L0"], zero_shot_latino_defaults(m["L"], lip), rng,
                                sched=VPSchedule(m["beta_min"], m["beta_max"]), hidden=m["hidden"])


def toy_sw_validator(rc: RunConfig):
    """Joint (x, y) sliced Wasserstein between final-layer samples and exact posterior draws."""
    prob = toy_problem(rc.problem)
    n = rc.data["sw_pairs"]
    _, obs = prob.sample_joint(n, np.random.default_rng([rc.seed, 13]))
    batch = ObservationBatch(obs)
    ref = np.concatenate([pb.toy_posterior_quadrature(prob, o.y).sample(1, np.random.default_rng([rc.seed, 14, i]))
                          for i, o in enumerate(obs)])
    ref_pts = mt.joint_points(ref, batch.y_flat)
    dirs = mt.random_directions(ref_pts.shape[1], 200, np.random.default_rng([rc.seed, 15]))
    seeds = np.arange(n, dtype=np.int64) + 10 ** 6

    def validate(model: UnfoldedModel) -> dict:
        with ad.no_grad():
            gen = unfold_chain(model, batch, seeds).final().value
        return {"val_sw": mt.sliced_wasserstein(mt.joint_points(gen, batch.y_flat), ref_pts, directions=dirs)}

    return validate


# --- commands -------------------------------------------------------------------------------

LOG_COLUMNS = ("step", "loss_g", "loss_d", "w_sd", "w_sd_next", "mse_single", "mse_mean", "ratio", "val_psnr")


def write_metrics_log(path: str, log: list[dict]) -> None:
    cols = list(LOG_COLUMNS) + sorted({k for r in log for k in r} - set(LOG_COLUMNS))
    lines = ["\t".join(cols)]
    for r in log:
        lines.append("\t".join(mt._fmt(r.get(c, float("nan"))) for c in cols))
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def cmd_train(config_path: str, resume: str | None = None, out=None) -> int:
    out = out or sys.stdout
    rc = load_config(config_path)
    data = build_data(rc)
    model = build_model(rc, data)
    disc = Discriminator.init(data.train_x.shape[1], data.val_obs[0].y.size, np.random.default_rng([rc.seed, 12]),
                              hidden=rc.model["discriminator_hidden"])
    start = Checkpoint.load(resume) if resume else None
    extra_val = toy_sw_validator(rc) if is_toy(rc.problem) else None
    os.makedirs(rc.output_dir, exist_ok=True)
    log_path = os.path.join(rc.output_dir, "metrics.tsv")
    run_record = rc.to_dict()
    try:
        for ck in train(rc.training, data, model, disc, rc.seed, resume=start, extra_validation=extra_val):
            ck.extra["run"] = run_record
            ck.save(os.path.join(rc.output_dir, f"ckpt_{ck.step:06d}.umc"))
            ck.save(os.path.join(rc.output_dir, "ckpt_last.umc"))
            write_metrics_log(log_path, ck.log)
            row = ck.metrics
            extra = f" val_sw={row['val_sw']:.5g}" if "val_sw" in row else ""
            print(f"step {row['step']}: loss_g={row['loss_g']:.5g} w_sd={row['w_sd']:.4g} "
                  f"ratio={row['ratio']:.4g}{extra}", file=out)
    except TrainingDivergenceError as exc:
        where = f"; last good checkpoint at step {exc.last_checkpoint.step}" if exc.last_checkpoint else ""
        print(f"error: {exc}{where}", file=sys.stderr)
        return EXIT_DIVERGENCE
    return EXIT_OK


def run_chains(model: UnfoldedModel, ob: Observation, seeds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Retained samples (n_kept, n, *x_shape) and ergodic means (n, *x_shape) for ``n`` chains."""
    chunks = [seeds[i:i + CHAIN_CHUNK] for i in range(0, len(seeds), CHAIN_CHUNK)]

    def work(s):
        with ad.no_grad():
            tr = unfold_chain(model, ObservationBatch([ob] * len(s)), s)
        return tr.sample_array(), tr.ergodic_mean.value.reshape((len(s),) + tr.x_shape)

    parts = _map(work, chunks)
    return np.concatenate([p[0] for p in parts], axis=1), np.concatenate([p[1] for p in parts], axis=0)


def model_dim(model: UnfoldedModel) -> int:
    if model.kind == "sgs":
        return model.params["W"].shape[0]
    if model.denoiser is not None:
        return int(np.size(model.denoiser.mu0))
    return model.params["den/b2"].shape[-1]


def chain_seeds(seed: int, item: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 17, item]).integers(0, 2 ** 62, size=n)


def cmd_sample(ckpt_path: str, obs_path: str, n_chains: int, seed: int, out_dir: str, out=None) -> int:
    out = out or sys.stdout
    if n_chains < 1:
        raise UsageError("--chains must be at least 1")
    ck = Checkpoint.load(ckpt_path)
    observations, _ = container.load_observations(obs_path)
    d_x = model_dim(ck.model)
    arrays = {}
    for i, ob in enumerate(observations):
        size = int(np.prod(ob.operator.in_shape))
        if size != d_x:
            raise UsageError(f"observation {i}: operator input size {size} does not match the model's {d_x}")
        samples, erg = run_chains(ck.model, ob, chain_seeds(seed, i, n_chains))
        pooled = samples.reshape((-1,) + samples.shape[2:])
        arrays[f"{i}/samples"] = samples
        arrays[f"{i}/ergodic_mean"] = erg
        arrays[f"{i}/mean"] = pooled.mean(axis=0)
        arrays[f"{i}/std"] = pooled.std(axis=0)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "samples.umc")
    container.save(path, arrays, {"type": "samples", "n_items": len(observations), "n_chains": n_chains,
                                  "seed": seed, "L": ck.model.L, "L0": ck.model.L0, "checkpoint_step": ck.step},
                   container.pack_rng_state(seed, 0))
    print(f"wrote {path}: {len(observations)} observation(s), {n_chains} chain(s), "
          f"{ck.model.n_kept} retained layer(s)", file=out)
    return EXIT_OK


def parse_manifest(path: str) -> list[dict]:
    """Lines ``source seed sigma [count]``; ``source`` is ``toy``, an IDX image file or an observation file."""
    base = os.path.dirname(os.path.abspath(path))
    items = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.split("#", 1)[0].strip()
            if not s:
                continue
            parts = s.split()
            if len(parts) not in (3, 4):
                raise UsageError(f"{path}:{lineno}: expected 'source seed sigma [count]'")
            try:
                seed, sigma = int(parts[1]), float(parts[2])
                count = int(parts[3]) if len(parts) == 4 else None
            except ValueError:
                raise UsageError(f"{path}:{lineno}: bad seed, sigma or count") from None
            src = parts[0] if parts[0] == "toy" else os.path.join(base, parts[0])
            if src != "toy" and not os.path.exists(src):
                raise UsageError(f"{path}:{lineno}: no such file {src}")
            items.append({"source": src, "seed": seed, "sigma": sigma, "count": count, "line": lineno})
    if not items:
        raise UsageError(f"{path}: manifest lists no test sets")
    return items


def manifest_pairs(entry: dict, run: dict) -> tuple[list[np.ndarray], list[Observation], pb.ToyProblem | None]:
    rng = np.random.default_rng(entry["seed"])
    if entry["source"] == "toy":
        if not is_toy(run["problem"]):
            raise UsageError(f"manifest line {entry['line']}: 'toy' needs a checkpoint trained on a toy problem")
        prob = toy_problem(run["problem"], entry["sigma"])
        x, obs = prob.sample_joint(entry["count"] or 100, rng)
        return list(x), obs, prob
    try:
        obs, truths = container.load_observations(entry["source"])
    except container.ContainerFormatError:
        imgs = load_images(entry["source"], run["data"]["pad"], entry["count"])
        make = operator_factory(run["problem"], imgs.shape[1:])
        obs = [pb.make_observation(img, make(rng), entry["sigma"], rng) for img in imgs]
        return list(imgs), obs, None
    if truths is None:
        raise UsageError(f"manifest line {entry['line']}: observation file has no ground truths")
    n = entry["count"] or len(obs)
    return truths[:n], obs[:n], None


def parse_metric_list(raw: str) -> list[str]:
    names = [m.strip() for m in raw.split(",") if m.strip()]
    if not names:
        raise UsageError("--metrics: empty metric list")
    bad = [m for m in names if m not in METRICS]
    if bad:
        raise UsageError(f"--metrics: unknown metric(s) {', '.join(bad)}; choose from {', '.join(METRICS)}")
    return list(dict.fromkeys(names))


def evaluate(ck: Checkpoint, manifest: list[dict], metrics: list[str], seed: int,
             n_chains: int = 16) -> tuple[dict, list[dict]]:
    run = ck.extra.get("run")
    if run is None:
        raise UsageError("checkpoint carries no run configuration")
    truths, obs, probs = [], [], []
    for entry in manifest:
        x, o, prob = manifest_pairs(entry, run)
        truths += [np.asarray(xi, dtype=np.float64).reshape(oi.operator.in_shape) for xi, oi in zip(x, o)]
        obs += o
        probs += [prob] * len(o)
    rows, gen_final, gen_sets, ref_sets = [], [], [], []
    for i, (x, ob) in enumerate(zip(truths, obs)):
        samples, erg = run_chains(ck.model, ob, chain_seeds(seed, i, n_chains))
        final = samples[-1]
        pooled = samples.reshape((-1,) + samples.shape[2:])
        mean = erg[0] + (erg - erg[0]).mean(axis=0)  # shifted mean: exact when all chains agree
        gen_final.append(final[0])
        gen_sets.append(final)
        row = {"item": i}
        if "psnr" in metrics:
            row["psnr_sample"] = mt.psnr(x, final[0])
            row["psnr_mean"] = mt.psnr(x, mean)
        if "ssim" in metrics:
            row["ssim_mean"] = mt.ssim(x, mean) if np.ndim(x) == 2 and min(np.shape(x)) >= 7 else float("nan")
        if "pca" in metrics:
            k = min(3, final.shape[0] - 1, final[0].size)
            row["pca_top"] = float(mt.posterior_pca(final, k)[0][0]) if k >= 1 else float("nan")
        if "residual_corr" in metrics:
            std = pooled.std(axis=0)
            try:
                row["residual_corr"] = mt.residual_correlation(np.atleast_2d(std), np.atleast_2d(np.abs(mean - x)))
            except mt.MetricError:
                row["residual_corr"] = float("nan")
        if probs[i] is not None and "latent_w2" in metrics:
            ref_sets.append(pb.toy_posterior_quadrature(probs[i], ob.y).sample(
                n_chains, np.random.default_rng([seed, 19, i])))
        rows.append(row)

    summary = {"n_items": len(rows), "n_chains": n_chains, "seed": seed, "checkpoint_step": ck.step}
    for col in rows[0]:
        if col != "item":
            summary[f"mean_{col}"] = _aggregate(np.array([r[col] for r in rows], dtype=np.float64))
    y_flat = np.stack([ob.y.ravel() for ob in obs])
    gen_pts = mt.joint_points(np.stack(gen_final), y_flat)
    true_pts = mt.joint_points(np.stack(truths), y_flat)
    rng = np.random.default_rng([seed, 23])
    if "sw" in metrics:
        summary["sw"] = mt.sliced_wasserstein(gen_pts, true_pts, 200, rng)
    if "mmd" in metrics:
        summary["mmd"] = mt.mmd_rbf(gen_pts, true_pts)
    if "latent_w2" in metrics:
        enc = mt.PCAEncoder(dim=min(12, np.asarray(truths[0]).size)).fit(np.stack(truths))
        if len(ref_sets) == len(gen_sets):
            summary["latent_w2"] = mt.latent_w2(enc, gen_sets, ref_sets)
        else:
            # no per-observation reference posterior: compare pooled push-forwards instead
            summary["latent_w2"] = mt.latent_w2(enc, [np.stack(gen_final)], [np.stack(truths)])
    return summary, rows


def _aggregate(vals: np.ndarray) -> float:
    """Mean over finite entries; +inf when every entry is the +inf sentinel, nan when none is usable."""
    if vals.size and np.all(vals == np.inf):
        return math.inf
    finite = vals[np.isfinite(vals)]
    return float(finite.mean()) if finite.size else math.nan


def cmd_eval(ckpt_path: str, manifest_path: str, metric_list: str, seed: int, out=None) -> int:
    out = out or sys.stdout
    metrics = parse_metric_list(metric_list)
    ck = Checkpoint.load(ckpt_path)
    summary, rows = evaluate(ck, parse_manifest(manifest_path), metrics, seed)
    out.write(mt.format_report(summary, rows))
    return EXIT_OK


def cmd_oracle(suite: str, seed: int, out=None) -> int:
    out = out or sys.stdout
    if suite not in oracles.SUITES:
        raise UsageError(f"unknown oracle suite {suite!r}; choose from {', '.join(oracles.SUITES)}")
    checks = oracles.run_suite(suite, seed)
    for c in checks:
        print(c.line(), file=out)
    ok = all(c.passed for c in checks)
    print(f"suite {suite}: {'PASS' if ok else 'FAIL'} ({sum(c.passed for c in checks)}/{len(checks)})", file=out)
    return EXIT_OK if ok else EXIT_ORACLE


# --- entry point ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="umcmc", description="Unfolded MCMC samplers: training, sampling, evaluation, oracles.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    t = sub.add_parser("train", help="train an unfolded sampler from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume", metavar="CKPT")
    s = sub.add_parser("sample", help="run chains from a checkpoint on observations")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--chains", type=int, required=True)
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--out", required=True)
    e = sub.add_parser("eval", help="evaluate a checkpoint on a test manifest")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--metrics", required=True, help=f"comma-separated subset of {','.join(METRICS)}")
    e.add_argument("--seed", type=int, required=True)
    o = sub.add_parser("oracle", help="run a numerical oracle suite")
    o.add_argument("--suite", required=True)
    o.add_argument("--seed", type=int, required=True)
    # negative-control hook: scale every leaf gradient
    o.add_argument("--corrupt-gradient", type=float, default=None, help=argparse.SUPPRESS)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        n_threads()
        if args.command == "train":
            return cmd_train(args.config, args.resume)
        if args.command == "sample":
            return cmd_sample(args.ckpt, args.obs, args.chains, args.seed, args.out)
        if args.command == "eval":
            return cmd_eval(args.ckpt, args.manifest, args.metrics, args.seed)
        previous = ad._GRADIENT_CORRUPTION
        ad._GRADIENT_CORRUPTION = args.corrupt_gradient
        try:
            return cmd_oracle(args.suite, args.seed)
        finally:
            ad._GRADIENT_CORRUPTION = previous
    except (UsageError, ConfigError, container.ContainerFormatError, pb.IdxFormatError, FileNotFoundError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ChainDivergenceError, FloatingPointError) as exc:
        print(f"error: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline: datasets, model fits, evaluation, and flow.

Exit codes: 0 success, 1 usage error, 2 data error. All randomness is
controlled by --seed; identical invocations produce byte-identical
artifacts.
"""

import os
import sys

import click
import numpy as np

from . import evaluation, models, patches, synthetic
from . import gmm as gmm_mod
from .config import RunConfig, load_config
from .epll_flow import estimate_flow, r_step, write_cost_trace
from .epll_flow import aepe as aepe_fn
from .errors import WarpcostError
from .imaging import Image, read_flo, read_pgm, write_flo, write_pgm

_FAMILIES = ["bcl2", "bcl1", "gcl2", "gcl1", "csad"]


def _limit_threads(threads):
    """--threads wins; WARPCOST_THREADS is the fallback; 0 means auto."""
    if threads is None or threads == 0:
        threads = int(os.environ.get("WARPCOST_THREADS", "0") or 0)
    if threads > 0:
        from threadpoolctl import threadpool_limits
        threadpool_limits(limits=threads)


@click.group(name="warpcost")
@click.option("--config", "config_path", default=None,
              help="Flat key=value config file; flags override it.")
@click.option("--seed", type=int, default=None, help="Master RNG seed.")
@click.option("--threads", type=int, default=None,
              help="Worker thread cap (0 = auto).")
@click.pass_context
def cli(ctx, config_path, seed, threads):
    """Warp-error density models and EPLL optical flow."""
    cfg = load_config(config_path) if config_path else RunConfig()
    cfg.apply(seed=seed, threads=threads)
    _limit_threads(threads if threads is not None else cfg.threads)
    ctx.obj = cfg


@cli.group()
def dataset():
    """Warp-error patch corpora."""


@dataset.command("build")
@click.option("--count", type=int, default=200, help="Scene pairs to render.")
@click.option("--height", type=int, default=128)
@click.option("--width", type=int, default=128)
@click.option("--patch-size", type=int, default=None)
@click.option("--stride", type=int, default=None)
@click.option("--train-fraction", type=float, default=None)
@click.option("--train-count", type=int, default=None,
              help="Subsample the train split to this many patches.")
@click.option("--test-count", type=int, default=None)
@click.option("--out-train", required=True)
@click.option("--out-test", required=True)
@click.pass_obj
def dataset_build(cfg, count, height, width, patch_size, stride,
                  train_fraction, train_count, test_count,
                  out_train, out_test):
    """Render synthetic scenes and extract ground-truth warp-error patches."""
    cfg.apply(patch_size=patch_size, stride=stride,
              train_fraction=train_fraction)
    pairs = synthetic.training_pairs(count, height, width, seed=cfg.seed)
    train_pairs, test_pairs = patches.split_pairs(
        pairs, cfg.train_fraction, cfg.seed)
    train = patches.build_dataset(train_pairs, cfg.patch_size, cfg.stride,
                                  sample_count=train_count, seed=cfg.seed,
                                  split_tag="train")
    test = patches.build_dataset(test_pairs, cfg.patch_size, cfg.stride,
                                 sample_count=test_count, seed=cfg.seed + 1,
                                 split_tag="test")
    patches.save_dataset(train, out_train)
    patches.save_dataset(test, out_test)
    click.echo(f"train: {len(train)} patches -> {out_train}")
    click.echo(f"test: {len(test)} patches -> {out_test}")


@cli.group()
def model():
    """Baseline density models."""


@model.command("fit")
@click.option("--family", type=click.Choice(_FAMILIES, case_sensitive=False),
              required=True)
@click.option("--train", "train_path", required=True)
@click.option("--out", "out_path", required=True)
@click.pass_obj
def model_fit(cfg, family, train_path, out_path):
    """Maximum-likelihood fit of one baseline family."""
    train = patches.load_dataset(train_path)
    fitted = models.fit(family.upper(), train, seed=cfg.seed,
                        ais_config=cfg.ais_config(),
                        search_ais_config=cfg.search_ais_config())
    models.save_model(fitted, out_path)
    line = f"{fitted.name}: lambda={fitted.lam:.6g}"
    if fitted.epsilon:
        line += f" epsilon={fitted.epsilon:.6g}"
    if fitted.log_z is not None:
        line += f" log_z={fitted.log_z:.4f}"
    if fitted.log_z_stderr:
        line += f" (stderr {fitted.log_z_stderr:.4f})"
    click.echo(line + f" -> {out_path}")


@model.command("eval")
@click.option("--data", "data_path", required=True)
@click.option("--model", "model_paths", multiple=True, required=True)
@click.option("--out", "out_path", default=None)
@click.pass_obj
def model_eval(cfg, data_path, model_paths, out_path):
    """Held-out mean log-likelihood table over a shared patch set."""
    test = patches.load_dataset(data_path)
    ms = [models.load_model(p) for p in model_paths]
    report = evaluation.evaluate_models(ms, test)
    if out_path:
        evaluation.write_report(report, out_path)
    for r in report.rows:
        if r.error:
            click.echo(f"{r.name}: error: {r.error}")
        else:
            click.echo(f"{r.name}: {r.mean:.4f} +/- {r.stderr:.4f} nats/patch"
                       f" ({r.pixel_mean:.4f} nats/px, n={r.count})")


@model.command("sample")
@click.option("--model", "model_path", required=True)
@click.option("--rows", type=int, default=8)
@click.option("--cols", type=int, default=12)
@click.option("--out", "out_path", required=True)
@click.pass_obj
def model_sample(cfg, model_path, rows, cols, out_path):
    """Render a tiled grid of model samples as a PGM image."""
    m = models.load_model(model_path)
    grid = evaluation.render_sample_grid(m, rows, cols, seed=cfg.seed)
    write_pgm(grid, out_path)
    click.echo(f"{rows}x{cols} sample grid -> {out_path}")


def _model_covariance(m):
    if getattr(m, "family", None) == "GMM":
        raise ValueError("use per-component summaries for a GMM")
    if m.family == "BCL2":
        return np.eye(m.dim) / (2.0 * m.lam)
    if m.family == "GCL2":
        prec = 2.0 * (m.lam * (m.a_matrix.T @ m.a_matrix)
                      + m.epsilon * np.eye(m.dim))
        return np.linalg.inv(prec)
    raise WarpcostError(
        f"{m.family} has no closed-form covariance; eigen summary "
        "is defined for GMM, BCL2, and GCL2 models")


@model.command("eig")
@click.option("--model", "model_path", required=True)
@click.option("--threshold", type=float, default=0.95)
@click.option("--top", type=int, default=5, help="Eigenvalues to list per row.")
@click.option("--out", "out_path", default=None)
@click.pass_obj
def model_eig(cfg, model_path, threshold, top, out_path):
    """Eigen spectra: per GMM component, or of a Gaussian model covariance."""
    m = models.load_model(model_path)
    rows = []
    if getattr(m, "family", None) == "GMM":
        order = np.argsort(m.weights)[::-1]
        for j in order:
            es = models.eigen_summary(m.covariances[j], threshold)
            rows.append((f"component_{j}", float(m.weights[j]), es))
    else:
        es = models.eigen_summary(_model_covariance(m), threshold)
        rows.append((m.name, 1.0, es))
    lines = ["name,weight,leading_count," +
             ",".join(f"eig{i}" for i in range(top))]
    for name, weight, es in rows:
        evs = list(es.eigenvalues[:top]) + [0.0] * (top - len(es.eigenvalues))
        lines.append(f"{name},{weight!r},{es.leading_count}," +
                     ",".join(repr(float(e)) for e in evs[:top]))
    if out_path:
        with open(out_path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
    counts = [es.leading_count for _, _, es in rows]
    click.echo(f"{len(rows)} spectra; leading counts at {threshold:.2f}: "
               f"min {min(counts)}, max {max(counts)}")


@cli.group()
def gmm():
    """Gaussian mixture models."""


@gmm.command("train")
@click.option("--train", "train_path", required=True)
@click.option("--k", type=int, required=True)
@click.option("--epochs", type=int, default=None)
@click.option("--minibatch", type=int, default=None)
@click.option("--out", "out_path", required=True)
@click.option("--trace", "trace_path", default=None,
              help="Write the per-epoch train mean log-likelihood CSV.")
@click.pass_obj
def gmm_train(cfg, train_path, k, epochs, minibatch, out_path, trace_path):
    """Stepwise-EM training of a zero-mean GMM on warp-error patches."""
    cfg.apply(em_epochs=epochs, em_minibatch=minibatch)
    train = patches.load_dataset(train_path)
    conf = cfg.gmm_config()
    fitted, trace = gmm_mod.gmm_fit(train, k, conf)
    gmm_mod.save_gmm(fitted, out_path)
    if trace_path:
        with open(trace_path, "w") as fh:
            fh.write(f"# k={k} epochs={conf.epochs} "
                     f"minibatch={conf.minibatch_size} seed={conf.seed} "
                     f"cov_floor={conf.cov_floor!r}\n")
            fh.write("epoch,mean_ll\n")
            for e, v in enumerate(trace):
                fh.write(f"{e},{v!r}\n")
    click.echo(f"GMM{k}: train mean ll {trace[0]:.4f} -> {trace[-1]:.4f} "
               f"nats/patch over {conf.epochs} epochs -> {out_path}")


@cli.group()
def flow():
    """Optical flow estimation and scoring."""


def _apply_flow_flags(cfg, **kw):
    cfg.apply(**{k: v for k, v in kw.items() if v is not None})


@flow.command("estimate")
@click.option("--model", "model_path", required=True)
@click.option("--i1", "i1_path", required=True)
@click.option("--i2", "i2_path", required=True)
@click.option("--out", "out_path", required=True)
@click.option("--trace", "trace_path", default=None)
@click.option("--dump-dir", default=None,
              help="Write per-iteration warp-error and r images here.")
@click.option("--lambda-reg", type=float, default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--warm-start", type=int, default=None)
@click.option("--beta0", type=float, default=None)
@click.option("--beta-growth", type=float, default=None)
@click.option("--scale", type=float, default=None)
@click.option("--min-dim", type=int, default=None)
@click.option("--stride", type=int, default=None)
@click.pass_obj
def flow_estimate(cfg, model_path, i1_path, i2_path, out_path, trace_path,
                  dump_dir, lambda_reg, iterations, warm_start, beta0,
                  beta_growth, scale, min_dim, stride):
    """Coarse-to-fine EPLL flow between two PGM frames; writes a .flo file."""
    _apply_flow_flags(cfg, lambda_reg=lambda_reg,
                      iterations_per_level=iterations,
                      warm_start_iterations=warm_start, beta0=beta0,
                      beta_growth=beta_growth, pyramid_scale=scale,
                      min_dim=min_dim, flow_stride=stride)
    m = models.load_model(model_path)
    i1 = read_pgm(i1_path)
    i2 = read_pgm(i2_path)
    if dump_dir is not None:
        os.makedirs(dump_dir, exist_ok=True)
    field, trace = estimate_flow(m, i1, i2, cfg.flow_config(),
                                 dump_dir=dump_dir)
    write_flo(field, out_path)
    if trace_path:
        write_cost_trace(trace, trace_path)
    click.echo(f"flow {i1.width}x{i1.height} -> {out_path} "
               f"({len(trace)} trace rows)")


@flow.command("aepe")
@click.option("--est", "est_path", required=True)
@click.option("--gt", "gt_path", required=True)
@click.option("--mask", "mask_path", default=None,
              help="PGM; pixels >= 0.5 count toward the mean.")
@click.pass_obj
def flow_aepe(cfg, est_path, gt_path, mask_path):
    """Average end-point error between two .flo files."""
    est = read_flo(est_path)
    gt = read_flo(gt_path)
    mask = None
    if mask_path is not None:
        mask = read_pgm(mask_path).data >= 0.5
    click.echo(repr(aepe_fn(est, gt, mask)))


@flow.command("bench")
@click.option("--model", "model_paths", multiple=True, required=True)
@click.option("--count", type=int, default=4, help="Synthetic pairs.")
@click.option("--height", type=int, default=96)
@click.option("--width", type=int, default=96)
@click.option("--iterations", type=int, default=None)
@click.option("--out", "out_path", default=None)
@click.pass_obj
def flow_bench(cfg, model_paths, count, height, width, iterations, out_path):
    """AEPE of each model on synthetic occlusion pairs (valid pixels only)."""
    _apply_flow_flags(cfg, iterations_per_level=iterations)
    ms = [models.load_model(p) for p in model_paths]
    scenes = synthetic.benchmark_pairs(count, height, width, seed=cfg.seed)
    result = evaluation.benchmark_flow(
        ms, [s.pair for s in scenes], cfg.flow_config(),
        masks=[s.valid for s in scenes])
    if out_path:
        evaluation.write_benchmark(result, out_path)
    for name, (mean, failures) in result.aggregates.items():
        click.echo(f"{name}: aepe {mean:.4f} px over {count - failures} pairs"
                   + (f" ({failures} failed)" if failures else ""))


@cli.command("denoise")
@click.option("--model", "model_path", required=True)
@click.option("--in", "in_path", required=True)
@click.option("--out", "out_path", required=True)
@click.option("--sigma", type=float, required=True, help="Noise std dev.")
@click.option("--stride", type=int, default=1)
@click.option("--signed", is_flag=True,
              help="Treat input/output as signed [-1, 1] PGM images.")
@click.pass_obj
def denoise(cfg, model_path, in_path, out_path, sigma, stride, signed):
    """Standalone EPLL denoising of one image (the flow r-step)."""
    if sigma <= 0:
        raise click.BadParameter("--sigma must be positive")
    m = models.load_model(model_path)
    img = read_pgm(in_path)
    beta = 1.0 / (2.0 * sigma * sigma)
    res = r_step(m, img.data, beta, stride)
    lo, hi = (-1.0, 1.0) if signed else (0.0, 1.0)
    write_pgm(Image(np.clip(res.data, lo, hi)), out_path, signed=signed)
    click.echo(f"denoised {img.width}x{img.height} (sigma={sigma:g}) "
               f"-> {out_path}")


def cli_dispatch(argv):
    """Run the CLI on argv (no program name); returns the exit code."""
    try:
        cli.main(args=list(argv), prog_name="warpcost",
                 standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.UsageError as exc:
        click.echo(exc.format_message(), err=True)
        if exc.ctx is not None:
            click.echo(exc.ctx.get_usage(), err=True)
        return 1
    except click.Abort:
        return 1
    except (WarpcostError, OSError, ValueError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    return 0


def main():
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

"""Held-out likelihood tables, sample grids, and flow benchmarks."""

import math

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import epll_flow, models
from .errors import DimensionMismatchError
from .imaging import Image, as_image


@dataclass
class ReportRow:
    name: str
    mean: float          # nats per patch
    stderr: float
    count: int
    pixel_mean: float    # nats per pixel
    error: Optional[str] = None


@dataclass
class LikelihoodReport:
    rows: list

    def __iter__(self):
        return iter(self.rows)


def evaluate_models(model_list, test):
    """Mean held-out log density per model over one shared patch set.

    Rows are sorted by mean descending; a model whose dim disagrees with
    the patch set gets an error row (placed last) instead of aborting
    the whole comparison.
    """
    patches = test.patches if hasattr(test, "patches") else np.asarray(test)
    n, dim = patches.shape
    pix = int(round(math.sqrt(dim))) ** 2
    rows, bad = [], []
    for model in model_list:
        if model.dim != dim:
            bad.append(ReportRow(model.name, math.nan, math.nan, n, math.nan,
                                 error=f"model dim {model.dim} != patch dim {dim}"))
            continue
        lp = models.logpdf(model, patches)
        mean = float(lp.mean())
        stderr = float(lp.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        rows.append(ReportRow(model.name, mean, stderr, n, mean / pix))
    rows.sort(key=lambda r: r.mean, reverse=True)
    return LikelihoodReport(rows + bad)


def write_report(report, path):
    """CSV emission; floats use repr so values round-trip exactly."""
    with open(path, "w") as fh:
        fh.write("model,mean_nats_per_patch,stderr,mean_nats_per_pixel,count,error\n")
        for r in report.rows:
            err = r.error or ""
            fh.write(f"{r.name},{r.mean!r},{r.stderr!r},{r.pixel_mean!r},"
                     f"{r.count},{err}\n")


def render_sample_grid(model, rows, cols, seed=0):
    """Tile rows x cols model samples into one image.

    Sample values are mapped [-1, 1] -> [0, 1] affinely and clipped;
    tiles are separated by 1-px black rules, so the output is
    rows*(p+1)+1 by cols*(p+1)+1 pixels.
    """
    p = int(round(math.sqrt(model.dim)))
    if p * p != model.dim:
        raise DimensionMismatchError(
            f"model dim {model.dim} is not a square patch size")
    samples = models.sample(model, rows * cols, seed=seed)
    tiles = np.clip((samples + 1.0) / 2.0, 0.0, 1.0).reshape(rows, cols, p, p)
    out = np.zeros((rows * (p + 1) + 1, cols * (p + 1) + 1))
    for i in range(rows):
        for j in range(cols):
            y, x = 1 + i * (p + 1), 1 + j * (p + 1)
            out[y:y + p, x:x + p] = tiles[i, j]
    return Image(out)


@dataclass
class BenchmarkRow:
    model: str
    pair: int
    aepe: float
    error: Optional[str] = None


@dataclass
class BenchmarkResult:
    rows: list           # per model x pair
    aggregates: dict     # model name -> (mean aepe over successes, failures)


def benchmark_flow(model_list, pairs, config=None, masks=None):
    """Estimate flow for every model on every pair and score AEPE.

    A failure on one pair is recorded on its row and excluded from that
    model's aggregate; the aggregate keeps the failure count, so one bad
    input never voids a run.
    """
    if masks is None:
        masks = [None] * len(pairs)
    rows = []
    aggregates = {}
    for model in model_list:
        errs, failures = [], 0
        for idx, (i1, i2, gt) in enumerate(pairs):
            try:
                flow, _ = epll_flow.estimate_flow(model, as_image(i1),
                                                  as_image(i2), config)
                err = epll_flow.aepe(flow, gt, masks[idx])
            except Exception as exc:  # isolate per-pair failures
                failures += 1
                rows.append(BenchmarkRow(model.name, idx, math.nan, str(exc)))
                continue
            errs.append(err)
            rows.append(BenchmarkRow(model.name, idx, err))
        mean = float(np.mean(errs)) if errs else math.nan
        aggregates[model.name] = (mean, failures)
    return BenchmarkResult(rows, aggregates)


def write_benchmark(result, path):
    with open(path, "w") as fh:
        fh.write("model,pair,aepe,error\n")
        for r in result.rows:
            fh.write(f"{r.model},{r.pair},{r.aepe!r},{r.error or ''}\n")
        fh.write("model,aggregate_aepe,failures\n")
        for name, (mean, failures) in result.aggregates.items():
            fh.write(f"{name},{mean!r},{failures}\n")

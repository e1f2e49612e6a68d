"""End-to-end checks on the full training and flow-estimation pipeline.

Unlike the unit suites, these tests build the complete synthetic corpus,
train production-size models (including the 100-component mixture), and
run whole flow benchmarks; the module takes roughly half an hour.
Deselect it during development with `pytest -m "not acceptance"`. Each
test prints one numbered PASS/FAIL line with the measured quantities.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from oracles import (best_edge_correlation, exact_l1_log_z, normalization,
                     step_edge_templates)
from warpcost.ais import AisConfig, ais_log_z
from warpcost.cli import cli_dispatch
from warpcost.epll_flow import (FlowConfig, aepe, estimate_flow,
                                read_cost_trace, write_cost_trace)
from warpcost.gmm import GmmConfig, gmm_fit, gmm_logpdf, gmm_map_denoise_patch
from warpcost.imaging import write_pgm
from warpcost.models import eigen_summary, fit, logpdf
from warpcost.patches import build_dataset, split_pairs
from warpcost.synthetic import (benchmark_pairs, rotated_pair, training_pairs,
                                translated_pair)

pytestmark = pytest.mark.acceptance

_FLOW = FlowConfig(iterations_per_level=12, warm_start_iterations=5)
_TIMES = {}


def _report(capsys, index, label, ok, detail):
    with capsys.disabled():
        print(f"[{index:2d}/10] {label}: {'PASS' if ok else 'FAIL'} ({detail})")


@pytest.fixture(scope="module")
def corpus():
    t0 = time.time()
    pairs = training_pairs(700, seed=0)
    fit_pairs, held_pairs = split_pairs(pairs, seed=0)
    train = build_dataset(fit_pairs, patch_size=8, stride=8)
    test = build_dataset(held_pairs, patch_size=8, stride=8,
                         sample_count=50_000, seed=1, split_tag="test")
    _TIMES["corpus"] = time.time() - t0
    return train, test


@pytest.fixture(scope="module")
def baseline_models(corpus):
    train, test = corpus
    t0 = time.time()
    fitted = {}
    for family in ("BCL2", "BCL1", "GCL2", "GCL1", "CSAD"):
        model = fit(family, train)
        ll = logpdf(model, test.patches)
        fitted[family] = (model, float(ll.mean()),
                          float(ll.std(ddof=1) / np.sqrt(ll.size)))
    _TIMES["baselines"] = time.time() - t0
    return fitted


@pytest.fixture(scope="module")
def mixture_models(corpus):
    train, test = corpus
    t0 = time.time()
    fitted = {}
    for k, epochs in ((1, 3), (20, 8), (100, 12)):
        model, _ = gmm_fit(train, k, GmmConfig(minibatch_size=10_000,
                                               epochs=epochs, seed=0))
        ll = gmm_logpdf(model, test.patches)
        fitted[k] = (model, float(ll.mean()),
                     float(ll.std(ddof=1) / np.sqrt(ll.size)))
    _TIMES["mixtures"] = time.time() - t0
    return fitted


@pytest.fixture(scope="module")
def recovered_flows(mixture_models, tmp_path_factory):
    model = mixture_models[100][0]
    out_dir = tmp_path_factory.mktemp("flow_traces")
    t0 = time.time()
    scenes = {
        "translation": translated_pair(128, 128, 2.5, 0.0, seed=100,
                                       noise_sigma=0.002),
        "rotation": rotated_pair(128, 128, 2.0, seed=101, noise_sigma=0.002),
    }
    flows = {}
    for name, (i1, i2, truth) in scenes.items():
        flow, trace = estimate_flow(model, i1, i2, _FLOW)
        trace_path = out_dir / f"{name}_costs.csv"
        write_cost_trace(trace, trace_path)
        flows[name] = (flow, truth, trace_path)
    _TIMES["flows"] = time.time() - t0
    return flows


class TestEndToEnd:
    def test_01_fitted_densities_integrate_to_one(self, capsys):
        """Every family fitted at 2x2 is properly normalized: quadrature
        mass within 2% for the closed-form models, sampled log
        normalizers within three standard errors of the exact
        polytope-volume value for the transformed-L1 models."""
        t0 = time.time()
        pairs = training_pairs(12, seed=40)
        train = build_dataset(pairs, patch_size=2, stride=2)
        masses = [normalization(fit(family, train), logpdf)
                  for family in ("BCL2", "BCL1", "GCL2")]
        gaps = []
        for family in ("GCL1", "CSAD"):
            model = fit(family, train)
            rows = np.vstack([model.lam * model.a_matrix,
                              model.epsilon * np.eye(model.dim)])
            gaps.append((abs(model.log_z - exact_l1_log_z(rows)),
                         3 * model.log_z_stderr))
        elapsed = time.time() - t0
        ok = (all(0.98 <= mass <= 1.02 for mass in masses)
              and all(gap <= bound for gap, bound in gaps)
              and elapsed < 120)
        detail = (f"masses {', '.join(f'{m:.4f}' for m in masses)}; "
                  f"gaps {', '.join(f'{g:.4f}<={b:.4f}' for g, b in gaps)}; "
                  f"{elapsed:.0f}s")
        _report(capsys, 1, "fitted densities integrate to one", ok, detail)
        assert ok, detail

    def test_02_sampler_recovers_known_normalizers(self, capsys):
        """At the default sampler settings, the annealed estimator lands
        within three standard errors of closed-form Gaussian and Laplace
        log normalizers at dim 8, with standard error below 0.1 nats."""
        t0 = time.time()
        dim = 8
        gauss = ais_log_z(lambda x: -2.0 * np.sum(x * x, axis=1), dim, 0.5,
                          AisConfig(seed=7),
                          grad_log_density=lambda x: -4.0 * x)
        laplace = ais_log_z(lambda x: -2.0 * np.abs(x).sum(axis=1), dim, 0.7,
                            AisConfig(seed=8),
                            grad_log_density=lambda x: -2.0 * np.sign(x))
        exact_gauss = 0.5 * dim * math.log(2.0 * math.pi / 4.0)
        exact_laplace = 0.0
        elapsed = time.time() - t0
        ok = (abs(gauss.log_z - exact_gauss) <= 3 * gauss.stderr
              and abs(laplace.log_z - exact_laplace) <= 3 * laplace.stderr
              and gauss.stderr < 0.1 and laplace.stderr < 0.1
              and elapsed < 60)
        detail = (f"gaussian {gauss.log_z:+.4f} vs {exact_gauss:+.4f} "
                  f"se {gauss.stderr:.4f}; laplace {laplace.log_z:+.4f} vs "
                  f"{exact_laplace:+.4f} se {laplace.stderr:.4f}; "
                  f"{elapsed:.0f}s")
        _report(capsys, 2, "sampler recovers known normalizers", ok, detail)
        assert ok, detail

    def test_03_full_batch_em_never_decreases(self, capsys):
        """Thirty full-batch EM epochs at k=5 on ten thousand patches
        never decrease the training log-likelihood."""
        t0 = time.time()
        pairs = training_pairs(40, seed=60)
        patches = build_dataset(pairs, patch_size=8, stride=8,
                                sample_count=10_000, seed=3)
        _, trace = gmm_fit(patches, 5, GmmConfig(minibatch_size=10_000,
                                                 epochs=30, seed=4))
        diffs = np.diff(trace)
        elapsed = time.time() - t0
        ok = (bool(np.all(diffs >= -1e-9 * np.abs(trace[:-1])))
              and len(trace) == 31 and elapsed < 60)
        detail = (f"worst step {diffs.min():+.3e}; "
                  f"ll {trace[0]:.2f}->{trace[-1]:.2f}; {elapsed:.0f}s")
        _report(capsys, 3, "full-batch EM never decreases", ok, detail)
        assert ok, detail

    def test_04_heavier_tails_and_mixture_win_likelihood(
            self, baseline_models, mixture_models, capsys):
        """On 50k held-out patches the L1 families beat their L2
        counterparts, gradients beat raw intensities, and the
        100-component mixture beats every baseline by at least 0.05
        nats/pixel, all gaps exceeding three combined standard errors."""
        stats = {name: (mean, se) for name, (_, mean, se)
                 in baseline_models.items()}
        for k, (_, mean, se) in mixture_models.items():
            stats[f"GMM{k}"] = (mean, se)
        ok, margins = True, []
        for hi, lo in (("BCL1", "BCL2"), ("GCL1", "GCL2"), ("GCL2", "BCL2")):
            gap = stats[hi][0] - stats[lo][0]
            ok &= gap > 3 * (stats[hi][1] + stats[lo][1])
            margins.append(f"{hi}>{lo} {gap / 64:+.3f}")
        top_mean, top_se = stats["GMM100"]
        for name in ("BCL2", "BCL1", "GCL2", "GCL1", "CSAD"):
            gap = top_mean - stats[name][0]
            ok &= gap / 64 >= 0.05 and gap > 3 * (top_se + stats[name][1])
            margins.append(f"GMM100>{name} {gap / 64:+.3f}")
        train_time = (_TIMES["corpus"] + _TIMES["baselines"]
                      + _TIMES["mixtures"])
        ok = ok and train_time < 1200
        detail = f"nats/pixel {'; '.join(margins)}; {train_time:.0f}s"
        _report(capsys, 4, "heavier tails and mixture win likelihood", ok,
                detail)
        assert ok, detail

    def test_05_mixture_splits_into_flat_and_edge_parts(
            self, mixture_models, capsys):
        """Most mixture weight sits in near-flat components (95% of the
        spectrum within three eigenvalues) while at least ten components
        align with oriented step edges."""
        t0 = time.time()
        model = mixture_models[100][0]
        templates = step_edge_templates(8)
        flat_weight, edge_count = 0.0, 0
        for j in range(model.k):
            summary = eigen_summary(model.covariances[j], threshold=0.95)
            if summary.leading_count <= 3:
                flat_weight += float(model.weights[j])
            if best_edge_correlation(summary.leading_vectors[0],
                                     templates) >= 0.7:
                edge_count += 1
        elapsed = time.time() - t0
        ok = flat_weight >= 0.5 and edge_count >= 10 and elapsed < 120
        detail = (f"flat weight {flat_weight:.3f}>=0.5; "
                  f"edge components {edge_count}>=10; {elapsed:.0f}s")
        _report(capsys, 5, "mixture splits into flat and edge parts", ok,
                detail)
        assert ok, detail

    def test_06_single_component_denoise_matches_wiener(
            self, mixture_models, capsys):
        """With one component, patch denoising reduces to the
        linear-Gaussian posterior mean."""
        t0 = time.time()
        model = mixture_models[1][0]
        rng = np.random.default_rng(5)
        noisy = rng.normal(0.0, 0.1, (1000, 64))
        noise_var = 0.004
        got = gmm_map_denoise_patch(model, noisy, noise_var)
        cov = model.covariances[0]
        want = noisy @ np.linalg.solve(cov + noise_var * np.eye(64), cov).T
        err = float(np.abs(got - want).max())
        elapsed = time.time() - t0
        ok = err <= 1e-8 and elapsed < 30
        detail = f"max abs error {err:.2e}; {elapsed:.0f}s"
        _report(capsys, 6, "single-component denoise matches Wiener", ok,
                detail)
        assert ok, detail

    def test_07_flow_recovery_on_known_motions(self, recovered_flows, capsys):
        """The mixture-driven estimator recovers a 2.5px translation and
        a 2-degree rotation to sub-pixel interior accuracy."""
        interior = np.zeros((128, 128), dtype=bool)
        interior[10:-10, 10:-10] = True
        translation_err = aepe(recovered_flows["translation"][0],
                               recovered_flows["translation"][1], interior)
        rotation_err = aepe(recovered_flows["rotation"][0],
                            recovered_flows["rotation"][1], interior)
        ok = (translation_err < 0.2 and rotation_err < 0.3
              and _TIMES["flows"] < 300)
        detail = (f"translation aepe {translation_err:.3f}<0.2; rotation "
                  f"aepe {rotation_err:.3f}<0.3; {_TIMES['flows']:.0f}s")
        _report(capsys, 7, "flow recovery on known motions", ok, detail)
        assert ok, detail

    def test_08_split_cost_never_increases_within_beta(
            self, recovered_flows, capsys):
        """Within every fixed-beta block of the emitted cost traces the
        split objective is non-increasing to relative 1e-6."""
        worst = -np.inf
        for _, _, trace_path in recovered_flows.values():
            rows = np.asarray(read_cost_trace(trace_path))
            for level in np.unique(rows[:, 0]):
                at_level = rows[rows[:, 0] == level]
                for beta in np.unique(at_level[:, 2]):
                    block = at_level[at_level[:, 2] == beta][:, 3]
                    if len(block) > 1:
                        rel = np.diff(block) / np.abs(block[:-1])
                        worst = max(worst, float(rel.max()))
        ok = worst <= 1e-6
        detail = f"worst relative increase {worst:.2e}<=1e-6"
        _report(capsys, 8, "split cost never increases within beta", ok,
                detail)
        assert ok, detail

    def test_09_likelihood_predicts_flow_accuracy(
            self, baseline_models, mixture_models, capsys):
        """Across five models on ten occlusion scenes, held-out
        log-likelihood and negative endpoint error rank-correlate at
        0.5 or better."""
        t0 = time.time()
        entries = [("BCL2",) + baseline_models["BCL2"][:2],
                   ("GCL2",) + baseline_models["GCL2"][:2],
                   ("GMM1",) + mixture_models[1][:2],
                   ("GMM20",) + mixture_models[20][:2],
                   ("GMM100",) + mixture_models[100][:2]]
        scenes = benchmark_pairs(10, 96, 96, seed=0)
        likelihoods, errors = [], []
        for _, model, mean_ll in entries:
            per_scene = []
            for scene in scenes:
                i1, i2, truth = scene.pair
                flow, _ = estimate_flow(model, i1, i2, _FLOW)
                per_scene.append(aepe(flow, truth, scene.valid))
            likelihoods.append(mean_ll)
            errors.append(float(np.mean(per_scene)))
        rho = float(spearmanr(likelihoods, [-e for e in errors]).statistic)
        elapsed = time.time() - t0
        ok = rho >= 0.5 and elapsed < 1800
        ranking = "; ".join(f"{name} {err:.3f}" for (name, _, _), err
                            in zip(entries, errors))
        detail = f"spearman {rho:.2f}>=0.5; aepe {ranking}; {elapsed:.0f}s"
        _report(capsys, 9, "likelihood predicts flow accuracy", ok, detail)
        assert ok, detail

    def test_10_pipeline_reruns_are_byte_identical(self, tmp_path, capsys):
        """Rerunning every seeded command-line pipeline writes
        byte-identical artifacts."""
        i1, i2, _ = translated_pair(48, 48, 1.0, 0.0, seed=0,
                                    noise_sigma=0.002)
        image1, image2 = tmp_path / "i1.pgm", tmp_path / "i2.pgm"
        write_pgm(i1, image1, maxval=65535)
        write_pgm(i2, image2, maxval=65535)
        runs = []
        for tag in ("first", "second"):
            root = tmp_path / tag
            root.mkdir()
            train = root / "train.wepd"
            held = root / "test.wepd"
            model = root / "gcl2.json"
            mixture = root / "mixture.json"
            mix_trace = root / "mixture_trace.csv"
            grid = root / "samples.pgm"
            flow_out = root / "flow.flo"
            flow_trace = root / "flow_costs.csv"
            assert cli_dispatch(["--seed", "3", "dataset", "build",
                                 "--count", "3", "--height", "64",
                                 "--width", "64", "--out-train", str(train),
                                 "--out-test", str(held)]) == 0
            assert cli_dispatch(["model", "fit", "--family", "gcl2",
                                 "--train", str(train),
                                 "--out", str(model)]) == 0
            assert cli_dispatch(["--seed", "1", "gmm", "train",
                                 "--train", str(train), "--k", "2",
                                 "--epochs", "2", "--minibatch", "2000",
                                 "--out", str(mixture),
                                 "--trace", str(mix_trace)]) == 0
            assert cli_dispatch(["model", "sample", "--model", str(model),
                                 "--rows", "2", "--cols", "2",
                                 "--out", str(grid)]) == 0
            assert cli_dispatch(["flow", "estimate", "--model", str(model),
                                 "--i1", str(image1), "--i2", str(image2),
                                 "--out", str(flow_out),
                                 "--trace", str(flow_trace),
                                 "--iterations", "3",
                                 "--warm-start", "2"]) == 0
            runs.append([path.read_bytes() for path in
                         (train, held, model, mixture, mix_trace, grid,
                          flow_out, flow_trace)])
        identical = [a == b for a, b in zip(*runs)]
        ok = all(identical)
        detail = f"{sum(identical)}/{len(identical)} artifacts identical"
        _report(capsys, 10, "pipeline reruns are byte-identical", ok, detail)
        assert ok, detail

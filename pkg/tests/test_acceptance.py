"""End-to-end acceptance gate.

Each test covers one numbered criterion and prints a single PASS/FAIL
line with the measured values. The first criterion trains six real models
on the synthetic dataset and dominates the runtime (expect roughly half
an hour on one CPU core); everything else runs in seconds to minutes.
"""

import math
import statistics
import time

import numpy as np
import pytest

import seqvae.cli as cli
import seqvae.data as dat
import seqvae.metrics as diag
import seqvae.training as tr
from seqvae.model import GaussianParams, VaeModel
from seqvae.nn import default_init_spec
from seqvae.tensor import Tensor, no_grad
from seqvae.training import RngStreams, TrainConfig, TrainState


def report(num: int, ok: bool, detail: str) -> None:
    line = f"[criterion {num:2d}] {'PASS' if ok else 'FAIL'} - {detail}"
    print("\n" + line, flush=True)
    assert ok, line


# -- shared training runs on the synthetic dataset -------------------------


@pytest.fixture(scope="module")
def ds():
    return dat.generate_synthetic(dat.small_spec(seed=0))


def full_run(ds, mode, seed, max_epochs, **kw):
    t0 = time.time()
    rngs = RngStreams(seed)
    model = VaeModel(ds.vocab_size, 50, 50, 1, default_init_spec(),
                     rngs["init"], dropout=0.5)
    cfg = TrainConfig(mode=mode, max_epochs=max_epochs, monitor_iw_every=0,
                      seed=seed, mi_samples_per_x=4, **kw)
    _, history = tr.train(model, ds, cfg, rngs=rngs)
    return model, history, time.time() - t0


@pytest.fixture(scope="module")
def collapse_runs(ds):
    """Three seeds of plain joint training and of aggressive training,
    identical model and optimizer settings, package defaults."""
    runs = {"basic": [], "aggressive": []}
    for mode, epochs in (("basic", 25), ("aggressive", 30)):
        for seed in (0, 1, 2):
            runs[mode].append(full_run(ds, mode, seed, epochs))
    return runs


def toy_model(seed, vocab=12, hidden=8, latent=1, dropout=0.0, spread=None):
    from seqvae.nn import InitSpec
    spec = (default_init_spec() if spread is None else
            InitSpec({"weights": (-spread, spread),
                      "embedding": (-spread, spread)}))
    return VaeModel(vocab, hidden, hidden, latent, spec,
                    np.random.default_rng(seed), dropout=dropout)


# -- criterion 1: collapse and rescue --------------------------------------


def test_criterion_01_collapse_and_rescue(ds, collapse_runs):
    ok = True
    parts = []

    for _, history, elapsed in collapse_runs["basic"] + collapse_runs["aggressive"]:
        ok &= elapsed < 1800

    basic_mi, basic_absmu = [], []
    for model, history, _ in collapse_runs["basic"]:
        last = history[-1]
        means, _ = diag.encode_split(model, ds.val)
        absmu = float(np.abs(means[:, 0]).mean())
        ok &= last.kl < 0.2 and last.mi < 0.2 and last.au == 0 and absmu < 0.05
        basic_mi.append(last.mi)
        basic_absmu.append(absmu)
    parts.append(f"basic mi<={max(basic_mi):.3f} au=0 "
                 f"mean|mu|<={max(basic_absmu):.4f}")

    grid = diag.RiemannGrid(-20, 20, 0.05)
    agg_mi, agg_gap = [], []
    for model, history, _ in collapse_runs["aggressive"]:
        last = history[-1]
        ok &= last.mi > 0.5 and last.au == 1
        agg_mi.append(last.mi)
        n = 100
        probe = dat.make_batch(ds.val, np.arange(n))
        enc_means, _ = diag.encode_split(model, ds.val[:n])
        model_means = np.array([
            diag.model_posterior_mean(model, probe.ids[i:i + 1],
                                      probe.mask[i:i + 1], grid)
            for i in range(n)])
        gap = float(np.abs(enc_means[:, 0] - model_means).mean())
        corr = float(np.corrcoef(enc_means[:, 0], model_means)[0, 1])
        ok &= gap < 0.5 and corr > 0.8
        agg_gap.append(gap)
    parts.append(f"aggressive mi>={min(agg_mi):.3f} au=1 "
                 f"mean-gap<={max(agg_gap):.3f}")

    report(1, ok, "3 seeds each: " + "; ".join(parts))


# -- criterion 2: marginal = ELBO + posterior gap, by quadrature -----------


def test_criterion_02_marginal_identity():
    grid = diag.RiemannGrid(-12, 12, 0.01)
    worst = 0.0
    ok = True
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        model = toy_model(100 + seed, spread=0.4)
        x = rng.integers(0, model.vocab_size, size=(1, 4))
        mask = np.ones((1, 4))
        with no_grad():
            q = model.encode(x, mask)
        mu = q.mean.data
        lv = q.logvar.data
        s = 2000
        z = mu + np.exp(0.5 * lv) * rng.normal(size=(s, 1))
        with no_grad():
            loglik = model.decode_logprob(np.repeat(x, s, axis=0),
                                          np.repeat(mask, s, axis=0),
                                          Tensor(z)).data
        samples = (loglik
                   + diag.gaussian_logpdf(z, np.zeros_like(z), np.zeros_like(z))
                   - diag.gaussian_logpdf(z, np.broadcast_to(mu, z.shape),
                                          np.broadcast_to(lv, z.shape)))
        elbo_mc = samples.mean()
        se = samples.std(ddof=1) / math.sqrt(s)
        fn = diag.model_loglik_fn(model, x, mask)
        log_px = diag.grid_log_marginal(fn, grid)
        kl_gap = diag.grid_kl_to_posterior(float(mu[0, 0]), float(lv[0, 0]),
                                           fn, grid)
        err = abs(log_px - elbo_mc - kl_gap)
        worst = max(worst, err / (3 * se))
        ok &= err <= 3 * se
    report(2, ok, f"20 random model/sequence pairs, worst "
                  f"|log p(x) - ELBO - gap| = {worst:.2f} of the 3-SE budget")


# -- criterion 3: gradient correctness -------------------------------------


def test_criterion_03_finite_difference_gradients():
    model = toy_model(7, vocab=8, hidden=4, latent=2)
    rng = np.random.default_rng(7)
    ids = rng.integers(0, 8, size=(2, 3))
    mask = np.ones((2, 3))
    noise = rng.normal(size=(2, 2))

    def objective():
        return model.elbo(ids, mask, 1.0, noise).objective

    loss = objective()
    for p in model.parameters().values():
        p.grad = None
    loss.backward()
    grads = {k: p.grad.copy() for k, p in model.parameters().items()}

    eps = 1e-5
    worst = 0.0
    worst_abs = 0.0
    checked = 0
    for name, p in model.parameters().items():
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = objective().item()
            flat[i] = orig - eps
            lo = objective().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            an = grads[name].reshape(-1)[i]
            # near-zero coordinates sit at the difference quotient's
            # float64 resolution, so they are held to an absolute bound
            worst = max(worst, abs(fd - an) / max(1.0, abs(fd), abs(an)))
            worst_abs = max(worst_abs, abs(fd - an))
            checked += 1
    report(3, worst < 1e-4 and worst_abs < 1e-5,
           f"all {checked} coordinates of every encoder/decoder parameter, "
           f"worst relative error {worst:.2e}, worst absolute {worst_abs:.2e}")


# -- criterion 4: closed-form KL vs Monte Carlo ----------------------------


def test_criterion_04_kl_closed_form():
    rng = np.random.default_rng(11)
    ok = True
    worst = 0.0
    for _ in range(50):
        d = int(rng.integers(1, 5))
        mu = rng.uniform(-3, 3, size=(1, d))
        lv = rng.uniform(-2, 2, size=(1, d))
        closed = VaeModel.kl_to_prior(
            GaussianParams(Tensor(mu), Tensor(lv))).data[0]
        n = 100_000
        z = mu + np.exp(0.5 * lv) * rng.normal(size=(n, d))
        samples = (diag.gaussian_logpdf(z, np.broadcast_to(mu, z.shape),
                                        np.broadcast_to(lv, z.shape))
                   - diag.gaussian_logpdf(z, np.zeros_like(z),
                                          np.zeros_like(z)))
        se = samples.std(ddof=1) / math.sqrt(n)
        err = abs(closed - samples.mean())
        worst = max(worst, err / (3 * se))
        ok &= err <= 3 * se

    unit = VaeModel.kl_to_prior(
        GaussianParams(Tensor(np.array([[1.0]])),
                       Tensor(np.array([[0.0]])))).data[0]
    exact = abs(unit - 0.5)
    ok &= exact < 1e-12
    report(4, ok, f"50 random Gaussians vs 1e5-sample MC, worst gap "
                  f"{worst:.2f} of 3-SE budget; unit-shift case off by "
                  f"{exact:.1e}")


# -- criterion 5: importance weighting tightens the bound ------------------


def test_criterion_05_importance_weighted_bound():
    # wide random init: the decoder actually uses z and the encoder's
    # posterior genuinely mismatches the true one, so the single-sample
    # bound has slack for importance weighting to recover
    model = toy_model(21, spread=0.5)
    rng = np.random.default_rng(21)
    split = rng.integers(0, model.vocab_size, size=(16, 4))

    iw_ll, elbo_ll = [], []
    for s in range(100):
        r = np.random.default_rng(1000 + s)
        iw_ll.append(-diag.iw_nll(model, split, 50, r))
        elbo_ll.append(-diag.validation_elbo(model, split, r)[0])
    diff = np.array(iw_ll) - np.array(elbo_ll)
    se = math.sqrt(np.var(iw_ll, ddof=1) / 100
                   + np.var(elbo_ll, ddof=1) / 100)
    ok = diff.mean() >= -3 * se

    grid = diag.RiemannGrid(-12, 12, 0.01)
    grid_nll = -np.mean([
        diag.grid_log_marginal(
            diag.model_loglik_fn(model, split[i:i + 1], np.ones((1, 4))),
            grid)
        for i in range(len(split))])
    iw500 = diag.iw_nll(model, split, 500, np.random.default_rng(5))
    gap = abs(iw500 - grid_nll)
    ok &= gap < 0.05
    report(5, ok, f"K=50 bound beats 1-sample ELBO by {diff.mean():.4f} nats "
                  f"(3 SE = {3 * se:.4f}) over 100 seeds; K=500 NLL within "
                  f"{gap:.4f} nats of the quadrature value")


# -- criterion 6: quadrature posterior means -------------------------------


def test_criterion_06_grid_posterior_means():
    grid = diag.RiemannGrid(-20, 20, 0.01)
    ok = True
    worst = 0.0
    # Gaussian observation of z with noise variance s2: the posterior under
    # a standard-normal prior has mean x0 / (1 + s2)
    for x0, s2 in ((1.0, 1.0), (-2.0, 0.5), (3.0, 2.0)):
        def loglik(z, x0=x0, s2=s2):
            return -0.5 * ((x0 - z) ** 2 / s2 + math.log(2 * math.pi * s2))
        got = diag.grid_posterior_mean(loglik, grid)
        err = abs(got - x0 / (1 + s2))
        worst = max(worst, err)
        ok &= err < 1e-6

    for sym in (lambda z: np.zeros_like(z), lambda z: -0.25 * z ** 4):
        err = abs(diag.grid_posterior_mean(sym, grid))
        worst = max(worst, err)
        ok &= err < 1e-6
    report(6, ok, f"conjugate-Gaussian and symmetric likelihoods, worst "
                  f"posterior-mean error {worst:.1e}")


# -- criterion 7: alternating-update control flow --------------------------


def test_criterion_07_control_flow():
    ok = True

    # encoder-only and decoder-only updates leave the other side untouched
    model = toy_model(3, dropout=0.5)
    ds_ = dat.Dataset(train=np.random.default_rng(3).integers(
        0, 12, size=(32, 4)), val=np.zeros((2, 4), dtype=int),
        test=np.zeros((2, 4), dtype=int), vocab_size=12)
    batch = dat.make_batch(ds_.train, np.arange(8))
    theta = model.generator_parameters()
    phi = model.inference_parameters()
    ok &= not set(theta) & set(phi)
    ok &= set(theta) | set(phi) == set(model.parameters())
    before = {k: v.data.copy() for k, v in theta.items()}
    tr._one_update(model, batch, 1.0, dict(phi), tr.Sgd(0.5),
                   TrainConfig(), TrainState(), RngStreams(0))
    ok &= all(np.array_equal(v.data, before[k]) for k, v in theta.items())
    before = {k: v.data.copy() for k, v in phi.items()}
    tr._one_update(model, batch, 1.0, dict(theta), tr.Sgd(0.5),
                   TrainConfig(), TrainState(), RngStreams(0))
    ok &= all(np.array_equal(v.data, before[k]) for k, v in phi.items())

    # the latch stays up while validation MI climbs and drops permanently
    # the first time it fails to
    state = TrainState(aggressive=True)
    flags = [tr.update_aggressive_flag(state, mi)
             for mi in (0.1, 0.2, 0.15, 0.9, 2.0)]
    ok &= flags == [True, True, False, False, False]

    # block-average patience: stop once a 10-step block fails to improve
    values = iter([1.0] * 10 + [2.0] * 10 + [2.0] * 10 + [5.0] * 10)
    steps = tr.run_inner_loop(lambda: next(values), patience=10, budget=None)
    ok &= steps == 30

    # fixed budgets run exactly the requested number of steps
    for b in (10, 30, 50, 70):
        calls = []
        got = tr.run_inner_loop(lambda: calls.append(1) or 0.0,
                                patience=10, budget=b)
        ok &= got == b and len(calls) == b
    report(7, ok, "parameter-partition freezing, scripted MI latch, "
                  "patience-10 exit, and fixed budgets 10/30/50/70")


# -- criterion 8: schedules ------------------------------------------------


def test_criterion_08_schedules():
    ok = True
    cfg = TrainConfig(mode="annealing",
                      anneal=tr.AnnealSchedule(0.1, 1.0, 10, "epochs"))
    ok &= tr.kl_weight(cfg, 0, 0) == 0.1
    ok &= abs(tr.kl_weight(cfg, 5, 0) - 0.55) < 1e-15
    ok &= tr.kl_weight(cfg, 10, 0) == 1.0
    ok &= tr.kl_weight(cfg, 50, 0) == 1.0

    cfg = TrainConfig(mode="annealing",
                      anneal=tr.AnnealSchedule(0.0, 1.0, 100, "iterations"))
    ok &= tr.kl_weight(cfg, 0, 50) == 0.5

    sched = tr.LrSchedule(factor=2.0, patience=2, max_decays=5)
    state = TrainState()
    sched.step(state, 10.0)
    stopped = False
    for _ in range(10):
        stopped = sched.step(state, 11.0)
        if stopped:
            break
    ok &= stopped and state.terminated
    ok &= state.decay_count == 5 and state.lr_scale == 0.5 ** 5
    report(8, ok, "annealing 0.1->1.0 over 10 epochs, iteration midpoint "
                  "0.5, halving after 2 flat epochs, stop at 5 decays")


# -- criterion 9: baseline orderings ---------------------------------------


def test_criterion_09_baseline_ordering(ds, collapse_runs):
    # the annealing arm runs with plain SGD throughout, the recipe under
    # which the weight ramp fails to prevent collapse at this scale; the
    # beta arm uses the package defaults so its aggregate-posterior
    # mismatch is compared against the aggressive arm under identical
    # optimizer settings
    _, anneal_hist, _ = full_run(ds, "annealing", 0, 25,
                                 encoder_optimizer="sgd", encoder_lr=1.0)
    _, beta_hist, _ = full_run(ds, "beta", 0, 25, beta=0.2)
    agg_last = collapse_runs["aggressive"][0][1][-1]

    anneal_last = anneal_hist[-1]
    anneal_max_kl = max(r.kl for r in anneal_hist)
    ok = anneal_last.mi < 0.2
    ok &= anneal_max_kl > max(0.5, anneal_last.kl + 0.25)

    ok &= beta_hist[-1].agg_kl > agg_last.agg_kl
    ok &= agg_last.mi > 0 and agg_last.agg_kl < beta_hist[-1].agg_kl
    report(9, ok,
           f"annealing mi={anneal_last.mi:.3f} with transient kl peak "
           f"{anneal_max_kl:.2f} (final {anneal_last.kl:.2f}); "
           f"beta=0.2 aggregate-kl={beta_hist[-1].agg_kl:.3f} > "
           f"aggressive's {agg_last.agg_kl:.3f} with aggressive "
           f"mi={agg_last.mi:.3f}")


# -- criterion 10: reproducibility in place of full-scale tables -----------


def test_criterion_10_reproducibility(ds, collapse_runs, tmp_path):
    # published large-corpus results are out of reach at this scale; the
    # substitute checks are bitwise run reproducibility and stability of
    # repeated evaluation on a converged model
    spec = dat.SyntheticSpec(train_count=64, val_count=24, test_count=24,
                             vocab_size=20, length=5, seed=0)
    tiny = dat.generate_synthetic(spec)
    data_dir = tmp_path / "data"
    dat.save_dataset(tiny, data_dir, spec)
    cfg = cli.load_run_config(overrides=dict(
        max_epochs=3, hidden_size=8, embed_dim=8, batch_size=16,
        monitor_iw_every=0, seed=5, checkpoint_every=0))
    cli.run_training(cfg, data_dir, tmp_path / "a", quiet=True)
    cli.run_training(cfg, data_dir, tmp_path / "b", quiet=True)
    csv_a = (tmp_path / "a" / "metrics.csv").read_bytes()
    csv_b = (tmp_path / "b" / "metrics.csv").read_bytes()
    ok = csv_a == csv_b

    model = collapse_runs["aggressive"][0][0]
    evals = [diag.iw_nll(model, ds.val, 100, np.random.default_rng(40 + i))
             for i in range(3)]
    var = statistics.pvariance(evals)
    ok &= var < 1e-2
    report(10, ok,
           f"identical-seed runs produced identical metrics files "
           f"({'yes' if csv_a == csv_b else 'no'}); repeated-eval NLL "
           f"variance {var:.2e} nats^2 on the converged model")

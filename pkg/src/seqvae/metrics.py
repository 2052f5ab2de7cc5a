"""Evaluation metrics and the posterior-mean-space diagnostic.

Everything here is pure given a parameter snapshot and a random stream:
importance-weighted NLL, mutual information between data and latent under
the encoder, active-unit counts, and the grid-based approximation of the
model posterior mean used for the scalar-latent diagnostic plots.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data import batches, make_batch
from .model import LOG_2PI, VaeModel
from .tensor import Tensor, no_grad


class CoverageError(RuntimeError):
    """Grid posterior mass concentrated at the interval boundary."""


@dataclass
class MetricsRecord:
    epoch: int
    neg_elbo: float
    kl: float
    iw_nll: float
    mi: float
    au: int
    lr: float
    kl_weight: float
    aggressive: bool
    agg_kl: float = math.nan

    CSV_COLUMNS = ("epoch", "neg_elbo", "kl", "iw_nll", "mi", "au", "lr",
                   "kl_weight", "aggressive", "agg_kl")


@dataclass
class PosteriorMeanPoint:
    example_id: int
    mu_model: float
    mu_inference: float


@dataclass
class RiemannGrid:
    """Midpoint partition of [low, high) with the given stride."""

    low: float = -20.0
    high: float = 20.0
    stride: float = 0.01
    abscissae: np.ndarray = field(init=False)

    def __post_init__(self):
        if not self.low < self.high:
            raise ValueError("grid needs low < high")
        if self.stride <= 0:
            raise ValueError("grid stride must be positive")
        count = math.ceil((self.high - self.low) / self.stride)
        self.abscissae = self.low + (np.arange(count) + 0.5) * self.stride


# -- shared encoder sweeps -------------------------------------------------


def encode_split(model: VaeModel, split: np.ndarray,
                 batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Posterior means and log-variances for every example, shape (N, D)."""
    means, logvars = [], []
    with no_grad():
        for batch in batches(split, batch_size):
            q = model.encode(batch.ids, batch.mask)
            means.append(q.mean.data)
            logvars.append(q.logvar.data)
    return np.concatenate(means), np.concatenate(logvars)


def validation_elbo(model: VaeModel, split: np.ndarray,
                    rng: np.random.Generator,
                    batch_size: int = 256) -> tuple[float, float]:
    """(mean negative ELBO, mean KL) over the split, single latent sample."""
    total_obj = 0.0
    total_kl = 0.0
    n = len(split)
    with no_grad():
        for batch in batches(split, batch_size):
            q = model.encode(batch.ids, batch.mask)
            noise = rng.normal(size=q.mean.shape)
            z = model.reparam_sample(q, noise)
            recon = model.decode_logprob(batch.ids, batch.mask, z)
            kl = model.kl_to_prior(q)
            total_obj += float(np.sum(recon.data - kl.data))
            total_kl += float(np.sum(kl.data))
    return -total_obj / n, total_kl / n


# -- importance weighting --------------------------------------------------


def iw_nll(model: VaeModel, split: np.ndarray, k: int,
           rng: np.random.Generator, batch_size: int = 32,
           max_rows: int = 4096) -> float:
    """Mean importance-weighted NLL over the split with k posterior samples."""
    if k < 1:
        raise ValueError("need at least one importance sample")
    per = iw_nll_per_example(model, split, k, rng, batch_size, max_rows)
    return float(per.mean())


def iw_nll_per_example(model: VaeModel, split: np.ndarray, k: int,
                       rng: np.random.Generator, batch_size: int = 32,
                       max_rows: int = 4096) -> np.ndarray:
    out = np.empty(len(split))
    pos = 0
    group = max(1, min(batch_size, max_rows // k))
    with no_grad():
        for batch in batches(split, group):
            b = batch.ids.shape[0]
            q = model.encode(batch.ids, batch.mask)
            mu = np.repeat(q.mean.data, k, axis=0)
            lv = np.repeat(q.logvar.data, k, axis=0)
            noise = rng.normal(size=mu.shape)
            z = mu + np.exp(0.5 * lv) * noise
            ids = np.repeat(batch.ids, k, axis=0)
            mask = np.repeat(batch.mask, k, axis=0)
            loglik = model.decode_logprob(ids, mask, Tensor(z)).data
            log_q = gaussian_logpdf(z, mu, lv)
            log_p = gaussian_logpdf(z, np.zeros_like(z), np.zeros_like(z))
            logw = (loglik + log_p - log_q).reshape(b, k)
            out[pos:pos + b] = -(logmeanexp(logw, axis=1))
            pos += b
    return out


def gaussian_logpdf(z: np.ndarray, mean: np.ndarray,
                    logvar: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(logvar + LOG_2PI
                         + (z - mean) ** 2 * np.exp(-logvar), axis=-1)


def logmeanexp(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    out = m.squeeze(axis) + np.log(np.mean(np.exp(x - m), axis=axis))
    return out


# -- mutual information ----------------------------------------------------


def mutual_info(model: VaeModel, split: np.ndarray, samples_per_x: int,
                rng: np.random.Generator,
                batch_size: int = 256) -> tuple[float, float]:
    """(MI estimate, aggregated-posterior KL estimate) in nats.

    MI is the mean over ancestral samples (x, z ~ q(z|x)) of
    log q(z|x) - log q(z), with the aggregated density q(z) evaluated as a
    log-mean over the split's posteriors. The aggregated KL is reported as
    mean closed-form KL-to-prior minus MI, so the three quantities satisfy
    the decomposition identity exactly on the same samples.
    """
    means, logvars = encode_split(model, split, batch_size)
    return mutual_info_from_posteriors(means, logvars, samples_per_x, rng)


def mutual_info_from_posteriors(means: np.ndarray, logvars: np.ndarray,
                                samples_per_x: int,
                                rng: np.random.Generator) -> tuple[float, float]:
    n, d = means.shape
    mu_s = np.repeat(means, samples_per_x, axis=0)
    lv_s = np.repeat(logvars, samples_per_x, axis=0)
    z = mu_s + np.exp(0.5 * lv_s) * rng.normal(size=mu_s.shape)
    log_q_own = gaussian_logpdf(z, mu_s, lv_s)

    log_q_agg = np.empty(len(z))
    chunk = max(1, 2_000_000 // max(n, 1))
    for start in range(0, len(z), chunk):
        zz = z[start:start + chunk]
        comp = -0.5 * np.sum(
            logvars[None, :, :] + LOG_2PI
            + (zz[:, None, :] - means[None, :, :]) ** 2
            * np.exp(-logvars[None, :, :]), axis=2)
        log_q_agg[start:start + chunk] = logmeanexp(comp, axis=1)

    mi = float(np.mean(log_q_own - log_q_agg))
    var = np.exp(logvars)
    mean_kl = float(np.mean(
        0.5 * np.sum(means ** 2 + var - 1.0 - logvars, axis=1)))
    return mi, mean_kl - mi


# -- active units ----------------------------------------------------------


def active_units(model: VaeModel, split: np.ndarray,
                 threshold: float = 0.01,
                 batch_size: int = 256) -> tuple[int, np.ndarray]:
    """Count of latent dimensions whose posterior-mean variance across the
    split strictly exceeds the threshold, plus per-dimension activities."""
    if len(split) < 2:
        raise ValueError("active-unit measurement needs at least 2 examples")
    means, _ = encode_split(model, split, batch_size)
    activity = means.var(axis=0)
    return int(np.sum(activity > threshold)), activity


# -- grid posterior diagnostics -------------------------------------------


def grid_posterior_mean(loglik: Callable[[np.ndarray], np.ndarray],
                        grid: RiemannGrid,
                        boundary_tol: float = 1e-6) -> float:
    """Mean of the normalized model posterior on the grid for scalar z."""
    z = grid.abscissae
    logdens = -0.5 * (z ** 2 + LOG_2PI) + np.asarray(loglik(z))
    logdens = logdens - logdens.max()
    probs = np.exp(logdens)
    probs /= probs.sum()
    if probs[0] + probs[-1] > boundary_tol:
        raise CoverageError(
            f"posterior mass {probs[0] + probs[-1]:.3g} at grid boundary; "
            "widen the interval")
    return float(np.sum(z * probs))


def grid_log_marginal(loglik: Callable[[np.ndarray], np.ndarray],
                      grid: RiemannGrid) -> float:
    """log integral of prior * likelihood, Riemann-approximated."""
    z = grid.abscissae
    logdens = -0.5 * (z ** 2 + LOG_2PI) + np.asarray(loglik(z))
    m = logdens.max()
    return float(m + np.log(np.sum(np.exp(logdens - m))) + np.log(grid.stride))


def grid_kl_to_posterior(mu: float, logvar: float,
                         loglik: Callable[[np.ndarray], np.ndarray],
                         grid: RiemannGrid) -> float:
    """KL(q || model posterior) by quadrature for scalar q = N(mu, e^logvar)."""
    z = grid.abscissae
    log_post = -0.5 * (z ** 2 + LOG_2PI) + np.asarray(loglik(z))
    log_post = log_post - grid_log_marginal(loglik, grid)
    log_q = -0.5 * (logvar + LOG_2PI + (z - mu) ** 2 * np.exp(-logvar))
    q = np.exp(log_q)
    return float(np.sum(q * (log_q - log_post)) * grid.stride)


def model_loglik_fn(model: VaeModel, ids: np.ndarray, mask: np.ndarray,
                    chunk: int = 1000) -> Callable[[np.ndarray], np.ndarray]:
    """log p(x | z) of one example as a vectorized function of scalar z."""
    ids = np.atleast_2d(np.asarray(ids))
    mask = np.atleast_2d(np.asarray(mask, dtype=float))

    def loglik(zgrid: np.ndarray) -> np.ndarray:
        out = np.empty(len(zgrid))
        with no_grad():
            for start in range(0, len(zgrid), chunk):
                zc = zgrid[start:start + chunk]
                b = len(zc)
                rep_ids = np.repeat(ids, b, axis=0)
                rep_mask = np.repeat(mask, b, axis=0)
                lp = model.decode_logprob(rep_ids, rep_mask,
                                          Tensor(zc[:, None]))
                out[start:start + b] = lp.data
        return out

    return loglik


def model_posterior_mean(model: VaeModel, ids: np.ndarray, mask: np.ndarray,
                         grid: RiemannGrid) -> float:
    if model.latent_dim != 1:
        raise ValueError("grid posterior mean is defined for scalar latents")
    return grid_posterior_mean(model_loglik_fn(model, ids, mask), grid)


def mean_space_snapshot(model: VaeModel, split: np.ndarray, grid: RiemannGrid,
                        max_points: int = 500) -> list[PosteriorMeanPoint]:
    """Pair the grid-approximated model-posterior mean with the encoder mean
    for up to max_points examples of the split."""
    if model.latent_dim != 1:
        raise ValueError("posterior mean space is defined for scalar latents")
    count = min(max_points, len(split))
    subset = make_batch(split, np.arange(count))
    means, _ = encode_split(model, split[:count])
    points = []
    for i in range(count):
        mu_model = model_posterior_mean(model, subset.ids[i:i + 1],
                                        subset.mask[i:i + 1], grid)
        points.append(PosteriorMeanPoint(
            example_id=i, mu_model=mu_model, mu_inference=float(means[i, 0])))
    return points


# -- report files ----------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def write_metrics_csv(history: list[MetricsRecord], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MetricsRecord.CSV_COLUMNS)
        for rec in history:
            writer.writerow(_fmt(getattr(rec, col))
                            for col in MetricsRecord.CSV_COLUMNS)


def load_metrics_csv(path: Path) -> list[MetricsRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != MetricsRecord.CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        out = []
        for row in reader:
            vals = dict(zip(header, row))
            out.append(MetricsRecord(
                epoch=int(vals["epoch"]),
                neg_elbo=float(vals["neg_elbo"]),
                kl=float(vals["kl"]),
                iw_nll=float(vals["iw_nll"]),
                mi=float(vals["mi"]),
                au=int(vals["au"]),
                lr=float(vals["lr"]),
                kl_weight=float(vals["kl_weight"]),
                aggressive=vals["aggressive"] == "1",
                agg_kl=float(vals["agg_kl"])))
    return out


def write_snapshot_csv(points: list[PosteriorMeanPoint], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("example_id", "mu_model", "mu_inference"))
        for p in points:
            writer.writerow((p.example_id, _fmt(p.mu_model), _fmt(p.mu_inference)))


def write_scatter_svg(points: list[tuple[float, float]], path: Path,
                      xlabel: str = "mu_model", ylabel: str = "mu_inference",
                      diagonal: bool = True, size: int = 480) -> None:
    """Minimal self-contained SVG scatter with an optional diagonal line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if points:
        xs = [p[0] for p in points]
        ys = [p[1] for p in points]
        lo = min(min(xs), min(ys), -1.0)
        hi = max(max(xs), max(ys), 1.0)
    else:
        lo, hi = -1.0, 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    margin = 40
    scale = (size - 2 * margin) / (hi - lo)

    def to_px(x, y):
        return (margin + (x - lo) * scale, size - margin - (y - lo) * scale)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" '
             f'height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if diagonal:
        x0, y0 = to_px(lo, lo)
        x1, y1 = to_px(hi, hi)
        parts.append(f'<line x1="{x0:.1f}" y1="{y0:.1f}" x2="{x1:.1f}" '
                     f'y2="{y1:.1f}" stroke="#888" stroke-dasharray="6,4"/>')
    for x, y in points:
        px, py = to_px(x, y)
        parts.append(f'<circle cx="{px:.2f}" cy="{py:.2f}" r="2.5" '
                     'fill="#1f77b4" fill-opacity="0.6"/>')
    parts.append(f'<text x="{size // 2}" y="{size - 8}" text-anchor="middle" '
                 f'font-size="13">{xlabel}</text>')
    parts.append(f'<text x="14" y="{size // 2}" text-anchor="middle" '
                 f'font-size="13" transform="rotate(-90 14 {size // 2})">'
                 f'{ylabel}</text>')
    parts.append("</svg>")
    path.write_text("\n".join(parts) + "\n")


def emit_reports(history: list[MetricsRecord],
                 snapshots: dict[str, list[PosteriorMeanPoint]],
                 out_dir: Path) -> list[Path]:
    """Write the metrics CSV plus one snapshot CSV and scatter per label."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    metrics_path = out_dir / "metrics.csv"
    write_metrics_csv(history, metrics_path)
    written.append(metrics_path)
    for label, points in snapshots.items():
        csv_path = out_dir / f"snapshot_{label}.csv"
        write_snapshot_csv(points, csv_path)
        svg_path = out_dir / f"snapshot_{label}.svg"
        write_scatter_svg([(p.mu_model, p.mu_inference) for p in points],
                          svg_path)
        written.extend([csv_path, svg_path])
    return written

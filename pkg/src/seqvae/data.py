"""Synthetic sequence dataset generation, persistence, and batching.

Sequences are sampled from a fixed randomly weighted one-layer LSTM
conditioned on a 2-D latent drawn from a four-component Gaussian mixture,
so different mixture components induce measurably different token
statistics. Files are plain text: a header line with the vocabulary size,
then one space-separated id sequence per line.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np


class ParseError(ValueError):
    pass


@dataclass
class SyntheticSpec:
    component_means: list[tuple[float, float]] = field(default_factory=lambda: [
        (-2.0, -2.0), (-2.0, 2.0), (2.0, -2.0), (2.0, 2.0)])
    component_std: float = 1.0
    generator_hidden: int = 100
    generator_embed: int = 100
    lstm_init: tuple[float, float] = (-1.0, 1.0)
    latent_to_vocab_init: tuple[float, float] = (-5.0, 5.0)
    train_count: int = 16000
    val_count: int = 2000
    test_count: int = 2000
    length: int = 10
    vocab_size: int = 1000
    seed: int = 0

    def __post_init__(self):
        if min(self.train_count, self.val_count, self.test_count) <= 0:
            raise ValueError("split counts must be positive")
        if self.vocab_size < 2:
            raise ValueError("vocabulary must have at least 2 symbols")
        if self.length < 1:
            raise ValueError("sequence length must be at least 1")


def small_spec(seed: int = 0) -> SyntheticSpec:
    """Reduced preset for fast runs: 4000/500/500 examples, vocab 200."""
    return SyntheticSpec(train_count=4000, val_count=500, test_count=500,
                         vocab_size=200, seed=seed)


@dataclass
class Dataset:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    vocab_size: int
    latents: dict[str, np.ndarray] | None = None  # generator provenance

    def split(self, name: str) -> np.ndarray:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


class _GeneratorNet:
    """Fixed-weight conditional LSTM used only to sample data (no gradients)."""

    def __init__(self, spec: SyntheticSpec, rng: np.random.Generator):
        h, e, v = spec.generator_hidden, spec.generator_embed, spec.vocab_size
        lo, hi = spec.lstm_init
        zlo, zhi = spec.latent_to_vocab_init
        self.embed = rng.uniform(lo, hi, size=(v + 1, e))  # last row: begin token
        self.w_ih = rng.uniform(lo, hi, size=(4 * h, e))
        self.w_hh = rng.uniform(lo, hi, size=(4 * h, h))
        self.bias = rng.uniform(lo, hi, size=4 * h)
        self.w_z2h = rng.uniform(lo, hi, size=(h, 2))
        self.b_z2h = rng.uniform(lo, hi, size=h)
        self.w_hv = rng.uniform(lo, hi, size=(v, h))
        self.w_zv = rng.uniform(zlo, zhi, size=(v, 2))
        self.b_v = rng.uniform(lo, hi, size=v)
        self.hidden = h
        self.vocab = v

    def sample(self, z: np.ndarray, length: int,
               rng: np.random.Generator) -> np.ndarray:
        """Autoregressive categorical sampling of one (B, length) id batch."""
        batch = z.shape[0]
        h = z @ self.w_z2h.T + self.b_z2h
        c = np.zeros((batch, self.hidden))
        token = np.full(batch, self.vocab)  # begin sentinel
        out = np.empty((batch, length), dtype=np.int64)
        hs = self.hidden
        for t in range(length):
            x = self.embed[token]
            gates = x @ self.w_ih.T + h @ self.w_hh.T + self.bias
            i = _sigmoid(gates[:, 0 * hs:1 * hs])
            f = _sigmoid(gates[:, 1 * hs:2 * hs])
            g = np.tanh(gates[:, 2 * hs:3 * hs])
            o = _sigmoid(gates[:, 3 * hs:4 * hs])
            c = f * c + i * g
            h = o * np.tanh(c)
            logits = h @ self.w_hv.T + z @ self.w_zv.T + self.b_v
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            cum = np.cumsum(probs, axis=1)
            u = rng.random((batch, 1))
            token = (u > cum).sum(axis=1)
            out[:, t] = token
        return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Sample the full dataset; bitwise reproducible from spec.seed."""
    rng = np.random.default_rng(spec.seed)
    net = _GeneratorNet(spec, rng)
    total = spec.train_count + spec.val_count + spec.test_count
    means = np.asarray(spec.component_means)
    components = rng.integers(0, len(means), size=total)
    z = means[components] + rng.normal(size=(total, 2)) * spec.component_std
    sequences = np.empty((total, spec.length), dtype=np.int64)
    chunk = 1000
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        sequences[start:stop] = net.sample(z[start:stop], spec.length, rng)
    a, b = spec.train_count, spec.train_count + spec.val_count
    latents = {"z": z, "component": components}
    return Dataset(train=sequences[:a], val=sequences[a:b], test=sequences[b:],
                   vocab_size=spec.vocab_size, latents=latents)


# -- persistence ----------------------------------------------------------


def save_split(sequences: np.ndarray, vocab_size: int, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(f"vocab {vocab_size}\n")
        for row in sequences:
            fh.write(" ".join(str(int(t)) for t in row) + "\n")


def load_split(path: Path) -> tuple[list[list[int]], int]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().split()
        if len(header) != 2 or header[0] != "vocab":
            raise ParseError(f"{path}: malformed header line")
        vocab_size = int(header[1])
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                ids = [int(tok) for tok in line.split()]
            except ValueError as exc:
                raise ParseError(f"{path}: bad token on line {lineno}") from exc
            for tid in ids:
                if not 0 <= tid < vocab_size:
                    raise ParseError(
                        f"{path}: token id {tid} out of range on line {lineno}")
            rows.append(ids)
    return rows, vocab_size


def save_dataset(ds: Dataset, out_dir: Path,
                 spec: SyntheticSpec | None = None) -> None:
    out_dir = Path(out_dir)
    for name in ("train", "val", "test"):
        save_split(ds.split(name), ds.vocab_size, out_dir / f"{name}.txt")
    if spec is not None:
        prov = asdict(spec)
        (out_dir / "provenance.json").write_text(json.dumps(prov, indent=2))


def load_dataset(in_dir: Path) -> Dataset:
    in_dir = Path(in_dir)
    splits = {}
    vocab = None
    for name in ("train", "val", "test"):
        rows, v = load_split(in_dir / f"{name}.txt")
        if vocab is not None and v != vocab:
            raise ParseError(f"{in_dir}: vocabulary size differs across splits")
        vocab = v
        lengths = {len(r) for r in rows}
        if len(lengths) == 1:
            splits[name] = np.asarray(rows, dtype=np.int64)
        else:
            splits[name] = _ragged(rows)
    return Dataset(train=splits["train"], val=splits["val"], test=splits["test"],
                   vocab_size=vocab)


def _ragged(rows: list[list[int]]) -> np.ndarray:
    arr = np.empty(len(rows), dtype=object)
    for i, r in enumerate(rows):
        arr[i] = np.asarray(r, dtype=np.int64)
    return arr


# -- batching -------------------------------------------------------------


@dataclass
class Batch:
    ids: np.ndarray   # (B, Tmax) padded with 0
    mask: np.ndarray  # (B, Tmax) 1.0 on real tokens
    indices: np.ndarray


def make_batch(split: np.ndarray, indices: np.ndarray) -> Batch:
    rows = [np.asarray(split[i]) for i in indices]
    tmax = max(len(r) for r in rows)
    ids = np.zeros((len(rows), tmax), dtype=np.int64)
    mask = np.zeros((len(rows), tmax))
    for j, r in enumerate(rows):
        ids[j, :len(r)] = r
        mask[j, :len(r)] = 1.0
    return Batch(ids=ids, mask=mask, indices=np.asarray(indices))


def batches(split: np.ndarray, batch_size: int,
            rng: np.random.Generator | None = None):
    """One epoch of padded batches; shuffled when a random stream is given."""
    if batch_size < 1:
        raise ValueError("batch size must be at least 1")
    n = len(split)
    order = np.arange(n)
    if rng is not None:
        rng.shuffle(order)
    for start in range(0, n, batch_size):
        yield make_batch(split, order[start:start + batch_size])

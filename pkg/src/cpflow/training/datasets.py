"""Toy generators, the Gaussian optimal-transport generator, and CSV ingestion."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "DatasetError",
    "CsvParseError",
    "TOY_KINDS",
    "generate_toy",
    "generate_gaussian_ot",
    "load_csv",
    "parse_csv_text",
    "make_dataset",
]

TOY_KINDS = ("one_moon", "eight_gaussians", "rings")


class DatasetError(ValueError):
    pass


class CsvParseError(DatasetError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class Dataset:
    """An in-memory dataset with deterministic train/val/test splits."""

    kind: str
    data: np.ndarray
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    standardize: bool = False
    mean: np.ndarray | None = None  # true moments, gaussian_ot only
    cov: np.ndarray | None = None
    _index: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.data = np.atleast_2d(np.asarray(self.data, dtype=np.float64))
        if not np.all(np.isfinite(self.data)):
            raise DatasetError("dataset contains non-finite values")
        if len(self.splits) != 3 or min(self.splits) < 0 or not np.isclose(sum(self.splits), 1.0):
            raise DatasetError(f"split fractions must be three non-negatives summing to 1, got {self.splits}")
        n = self.n
        perm = np.random.default_rng(self.seed).permutation(n)
        n_train = int(round(self.splits[0] * n))
        n_val = int(round(self.splits[1] * n))
        self._index = {
            "train": np.sort(perm[:n_train]),
            "val": np.sort(perm[n_train : n_train + n_val]),
            "test": np.sort(perm[n_train + n_val :]),
        }
        self._loc = np.zeros(self.dim)
        self._scale = np.ones(self.dim)
        if self.standardize and n_train > 1:
            tr = self.data[self._index["train"]]
            self._loc = tr.mean(axis=0)
            sd = tr.std(axis=0)
            self._scale = np.where(sd > 0, sd, 1.0)

    @property
    def loc(self) -> np.ndarray:
        """Per-column shift removed by standardization (zeros when off)."""
        return self._loc

    @property
    def scale(self) -> np.ndarray:
        return self._scale

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def indices(self, split: str) -> np.ndarray:
        return self._index[split]

    def split(self, split: str) -> np.ndarray:
        return (self.data[self._index[split]] - self._loc) / self._scale

    @property
    def train(self):
        return self.split("train")

    @property
    def val(self):
        return self.split("val")

    @property
    def test(self):
        return self.split("test")


def generate_toy(kind: str, n: int, seed: int = 0) -> np.ndarray:
    """Two-dimensional toy samples.

    * ``one_moon``: angle uniform on [0, pi], radius 2, Gaussian noise 0.1.
    * ``eight_gaussians``: centers at radius 4 on the compass and diagonal
      points, isotropic noise 0.3, everything divided by 1.414.
    * ``rings``: radii 1, 2, 3, 4 chosen uniformly, radial noise 0.08
      clipped at five standard deviations.
    """
    if n < 1:
        raise DatasetError("n must be >= 1")
    rng = np.random.default_rng(seed)
    if kind == "one_moon":
        theta = rng.uniform(0.0, np.pi, n)
        pts = 2.0 * np.stack([np.cos(theta), np.sin(theta)], axis=1)
        return pts + 0.1 * rng.standard_normal((n, 2))
    if kind == "eight_gaussians":
        s = 1.0 / np.sqrt(2.0)
        centers = 4.0 * np.array(
            [(1, 0), (-1, 0), (0, 1), (0, -1), (s, s), (s, -s), (-s, s), (-s, -s)]
        )
        idx = rng.integers(0, 8, n)
        return (centers[idx] + 0.3 * rng.standard_normal((n, 2))) / 1.414
    if kind == "rings":
        sigma = 0.08
        radius = rng.integers(1, 5, n).astype(float)
        radius = radius + sigma * np.clip(rng.standard_normal(n), -5.0, 5.0)
        theta = rng.uniform(0.0, 2.0 * np.pi, n)
        return radius[:, None] * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    raise DatasetError(f"unknown toy dataset {kind!r}; expected one of {TOY_KINDS}")


def generate_gaussian_ot(d: int, n: int, seed: int = 0):
    """Samples from N(mean, cov) with mean ~ N(0, I) and cov ~ Wishart(I, d + 1).

    Returns ``(samples, mean, cov)``.
    """
    if d < 1:
        raise DatasetError("d must be >= 1")
    rng = np.random.default_rng(seed)
    mean = rng.standard_normal(d)
    while True:
        G = rng.standard_normal((d + 1, d))
        cov = G.T @ G
        if np.linalg.eigvalsh(cov).min() > 1e-10 * np.trace(cov):
            break
    L = np.linalg.cholesky(cov)
    samples = mean + rng.standard_normal((n, d)) @ L.T
    return samples, mean, cov


def _is_numeric_line(line: str) -> bool:
    try:
        [float(f) for f in line.split(",")]
    except ValueError:
        return False
    return True


def parse_csv_text(text: str, has_header: bool | None = False) -> np.ndarray:
    """Parse comma-separated reals.

    ``has_header=None`` treats the first line as a header when any of its
    fields is non-numeric. Errors report 1-based line numbers.
    """
    rows = []
    width = None
    lines = text.splitlines()
    if has_header is None:
        has_header = bool(lines) and not _is_numeric_line(lines[0])
    for lineno, line in enumerate(lines, start=1):
        if has_header and lineno == 1:
            continue
        if not line.strip():
            continue
        fields = line.split(",")
        try:
            row = [float(f) for f in fields]
        except ValueError:
            raise CsvParseError(f"non-numeric field in {line!r}", lineno) from None
        if not all(np.isfinite(row)):
            raise CsvParseError("non-finite field", lineno)
        if width is None:
            width = len(row)
        elif len(row) != width:
            raise CsvParseError(f"expected {width} fields, found {len(row)}", lineno)
        rows.append(row)
    if not rows:
        raise CsvParseError("no data rows", max(len(lines), 1))
    return np.array(rows, dtype=np.float64)


def load_csv(path, has_header: bool | None = False, seed: int = 0, standardize: bool = True) -> Dataset:
    """Read comma-separated reals into a :class:`Dataset`.

    Columns are standardized with train-split statistics unless
    ``standardize=False``.
    """
    text = Path(path).read_text()
    return Dataset("csv", parse_csv_text(text, has_header), seed=seed, standardize=standardize)


def make_dataset(
    source: str, n: int = 5000, d: int = 8, seed: int = 0, has_header: bool | None = False, standardize: bool = True
) -> Dataset:
    """Resolve ``toy:NAME``, ``csv:PATH`` or ``gaussian_ot`` into a dataset."""
    if source.startswith("toy:"):
        kind = source[4:]
        return Dataset(kind, generate_toy(kind, n, seed), seed=seed)
    if source.startswith("csv:"):
        return load_csv(source[4:], has_header=has_header, seed=seed, standardize=standardize)
    if source == "gaussian_ot":
        x, mean, cov = generate_gaussian_ot(d, n, seed)
        return Dataset("gaussian_ot", x, seed=seed, mean=mean, cov=cov)
    raise DatasetError(f"unrecognised data source {source!r}; use toy:NAME, csv:PATH or gaussian_ot")

"""Synthetic multi-environment benchmark generator and CSV ingestion.

The generator draws from a linear structural equation model in which a
response Y is caused by a block of covariates X1 and itself causes a second
block X2, with an optional hidden confounder H feeding both X1 and Y.
Environments differ through a single scale parameter that controls the
variance of H, of X1, and of one of the two noise terms:

    H   ~ N(0, e^2 I)                     (dim_x1 coordinates)
    X1  = N(0, e^2 I) + W_h1 @ H
    Y   = w_1y . X1 + N(0, sigma_y^2) + w_hy . H
    X2  = w_y2 * Y + N(0, sigma_2^2 I)

Setting labels are three letters: F (fully observed, hidden weights zero) or
P (partially observed, hidden weights Gaussian); O (homoskedastic Y-noise,
sigma_y^2 = e^2, sigma_2^2 = 1) or E (heteroskedastic, sigma_y^2 = 1,
sigma_2^2 = e^2); and U (unscrambled covariates, the only variant here).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .core import DataSplit, EnvDataset

__all__ = [
    "SemConfig",
    "generate_sem",
    "split_dataset",
    "load_csv",
    "save_csv",
    "CsvParseError",
    "SETTINGS",
]

SETTINGS = ("FOU", "FEU", "POU", "PEU")


class CsvParseError(ValueError):
    """Malformed data file; message carries the offending line number."""


def _parse_setting(setting: str) -> tuple[str, str]:
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}, expected one of {SETTINGS}")
    return setting[0], setting[1]


@dataclass(frozen=True)
class SemConfig:
    """Structural-equation-model configuration.

    The causal weights are drawn once from ``seed`` and shared across all
    environments; per-call noise comes from a separate stream seed so that
    replications share structure but vary noise. Under F settings the hidden
    confounder weights are exactly zero (they are still drawn, so F and P
    configs with the same seed share the observed-path weights).
    """

    setting: str
    n_per_env: int = 2000
    env_params: tuple[float, ...] = (0.2, 2.0, 5.0)
    dim_x1: int = 5
    dim_x2: int = 5
    seed: int = 0
    w_1y: np.ndarray = field(init=False, repr=False)
    w_y2: np.ndarray = field(init=False, repr=False)
    w_h1: np.ndarray = field(init=False, repr=False)
    w_hy: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        _parse_setting(self.setting)
        if self.dim_x1 < 1 or self.dim_x2 < 1:
            raise ValueError("dims must be >= 1")
        if self.n_per_env < 1:
            raise ValueError("n_per_env must be >= 1")
        if any(e < 0 for e in self.env_params):
            raise ValueError("env_params must be nonnegative")
        object.__setattr__(self, "env_params", tuple(float(e) for e in self.env_params))
        rng = np.random.default_rng(self.seed)
        w_1y = rng.standard_normal(self.dim_x1)
        w_y2 = rng.standard_normal(self.dim_x2)
        w_h1 = rng.standard_normal((self.dim_x1, self.dim_x1))
        w_hy = rng.standard_normal(self.dim_x1)
        if self.setting[0] == "F":
            w_h1 = np.zeros_like(w_h1)
            w_hy = np.zeros_like(w_hy)
        for name, w in (("w_1y", w_1y), ("w_y2", w_y2), ("w_h1", w_h1), ("w_hy", w_hy)):
            w.setflags(write=False)
            object.__setattr__(self, name, w)

    @property
    def p(self) -> int:
        return self.dim_x1 + self.dim_x2

    def env_index(self, env_param: float) -> int:
        try:
            return self.env_params.index(float(env_param))
        except ValueError:
            raise ValueError(
                f"env_param {env_param} is not one of {self.env_params}"
            ) from None


def generate_sem(
    config: SemConfig,
    env_param: float,
    n: int,
    stream_seed: int,
    *,
    sigma_scale: float = 1.0,
    confounder_seed: int | None = None,
) -> EnvDataset:
    """Draw n i.i.d. observations from one environment of the SEM.

    Parameters
    ----------
    config : SemConfig
        Structure shared by all environments.
    env_param : float
        The environment's scale parameter; must be one of config.env_params.
        The returned dataset's env_id is its index in that tuple.
    n : int
        Number of observations.
    stream_seed : int
        Seed of the noise stream. Identical (config.seed, stream_seed) pairs
        reproduce the data exactly.
    sigma_scale : float, optional
        Test hook scaling both noise standard deviations; 0 removes the
        Y and X2 noise entirely.
    confounder_seed : int, optional
        Test hook replacing the hidden confounder's stream; under F settings
        this has no observable effect.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    observed, noise_kind = _parse_setting(config.setting)
    e = float(env_param)
    idx = config.env_index(e)
    if noise_kind == "O":
        sigma_y, sigma_2 = e, 1.0
    else:
        sigma_y, sigma_2 = 1.0, e
    sigma_y *= sigma_scale
    sigma_2 *= sigma_scale

    root = np.random.SeedSequence([int(config.seed), int(stream_seed), idx])
    ss_h, ss_x1, ss_y, ss_x2 = root.spawn(4)
    if confounder_seed is not None:
        ss_h = np.random.SeedSequence(int(confounder_seed))
    rng_h = np.random.default_rng(ss_h)
    rng_x1 = np.random.default_rng(ss_x1)
    rng_y = np.random.default_rng(ss_y)
    rng_x2 = np.random.default_rng(ss_x2)

    h = rng_h.normal(0.0, e, size=(n, config.dim_x1))
    x1 = rng_x1.normal(0.0, e, size=(n, config.dim_x1)) + h @ config.w_h1.T
    y = x1 @ config.w_1y + rng_y.normal(0.0, sigma_y, size=n) + h @ config.w_hy
    x2 = np.outer(y, config.w_y2) + rng_x2.normal(0.0, sigma_2, size=(n, config.dim_x2))
    return EnvDataset(env_id=idx, features=np.hstack([x1, x2]), targets=y)


def split_dataset(data: EnvDataset, train_fraction: float, seed: int) -> DataSplit:
    """Uniformly random disjoint train/calibration partition.

    Train gets floor(train_fraction * n) rows, calibration the remainder.
    Deterministic given the seed.
    """
    n = data.n
    if n < 2:
        raise ValueError("need at least 2 rows to split")
    n_train = int(np.floor(train_fraction * n))
    if n_train < 1 or n_train >= n:
        raise ValueError(
            f"train_fraction={train_fraction} leaves an empty part for n={n}"
        )
    perm = np.random.default_rng(seed).permutation(n)
    tr, cal = perm[:n_train], perm[n_train:]
    return DataSplit(
        train=EnvDataset(data.env_id, data.features[tr], data.targets[tr]),
        calibration=EnvDataset(data.env_id, data.features[cal], data.targets[cal]),
    )


def _expected_header(p: int) -> list[str]:
    return ["env", "y"] + [f"x{j}" for j in range(1, p + 1)]


def load_csv(path: str) -> list[EnvDataset]:
    """Read a multi-environment dataset from CSV.

    The file must be UTF-8 with header ``env,y,x1,...,xp``; env is an integer
    label and the rest are decimal or scientific-notation numbers. Returns
    one EnvDataset per distinct env value, in order of first appearance,
    with the original row order preserved within each environment.
    """
    rows_by_env: dict[int, list[tuple[float, list[float]]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(f"{path}: empty file") from None
        header = [c.strip() for c in header]
        if len(header) < 3 or header[:2] != ["env", "y"]:
            raise CsvParseError(
                f"{path}: line 1: header must be env,y,x1,...,xp, got {header}"
            )
        p = len(header) - 2
        if header != _expected_header(p):
            raise CsvParseError(
                f"{path}: line 1: feature columns must be x1..x{p}, got {header[2:]}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != p + 2:
                raise CsvParseError(
                    f"{path}: line {lineno}: expected {p + 2} columns, got {len(row)}"
                )
            try:
                env = int(row[0])
            except ValueError:
                raise CsvParseError(
                    f"{path}: line {lineno}: env {row[0]!r} is not an integer"
                ) from None
            try:
                y = float(row[1])
                x = [float(c) for c in row[2:]]
            except ValueError:
                raise CsvParseError(
                    f"{path}: line {lineno}: non-numeric cell in {row!r}"
                ) from None
            rows_by_env.setdefault(env, []).append((y, x))
    if not rows_by_env:
        raise CsvParseError(f"{path}: no data rows")
    return [
        EnvDataset(
            env_id=env,
            features=np.array([x for _, x in rows], dtype=float),
            targets=np.array([y for y, _ in rows], dtype=float),
        )
        for env, rows in rows_by_env.items()
    ]


def save_csv(envs: list[EnvDataset], path: str) -> None:
    """Write environments to the ``env,y,x1,...,xp`` CSV schema.

    Floats are written with shortest round-trip formatting, so a
    load_csv of the output reproduces the values exactly.
    """
    if not envs:
        raise ValueError("need at least one environment")
    p = envs[0].p
    if any(env.p != p for env in envs):
        raise ValueError("environments disagree on feature count")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_expected_header(p))
        for env in envs:
            for i in range(env.n):
                writer.writerow(
                    [env.env_id, repr(float(env.targets[i]))]
                    + [repr(float(v)) for v in env.features[i]]
                )

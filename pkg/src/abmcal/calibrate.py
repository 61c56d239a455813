"""Bayesian calibration against hospital census and death observations.

Observations and model outputs go through the same pipeline (first
differences of cumulative deaths, then a 7-day rolling mean). The posterior
over theta is sampled with delayed-rejection adaptive Metropolis (DRAM) and
the two error variances with a conjugate Gibbs step.
"""
from __future__ import annotations

import datetime as dt
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np
from scipy import stats

from .doe import DesignMatrix, PriorBox
from .util import read_rows, write_rows

log = logging.getLogger(__name__)

OBS_HEADER = ["date", "hosp_census", "cum_deaths"]
CHAIN_HEADER = ["step", "theta1", "theta2", "theta3", "theta4", "sigma_h2", "sigma_d2",
                "log_post", "accepted", "stage"]
DEFAULT_START_DATE = "2020-03-01"


class InitializationError(RuntimeError):
    """The sampler cannot start: the log-density is not finite at the initial point."""


# ---- observations ------------------------------------------------------------

def rolling_mean(x: np.ndarray, window: int) -> np.ndarray:
    """Means of all complete windows of ``window`` consecutive values."""
    x = np.asarray(x, float)
    if window < 1:
        raise ValueError("window must be >= 1")
    if len(x) < window:
        raise ValueError(f"series of length {len(x)} is shorter than the window {window}")
    c = np.concatenate([[0.0], np.cumsum(x)])
    return (c[window:] - c[:-window]) / window


def preprocess_series(hosp_census: np.ndarray, cum_deaths: np.ndarray,
                      window: int = 7) -> tuple[np.ndarray, np.ndarray]:
    """Daily series used in the likelihood.

    Deaths are differenced forward (d_j = D_{j+1} - D_j); the census is
    already a daily quantity, so its first day is dropped to keep the two
    aligned. Both are then smoothed with a rolling mean over complete
    windows, giving ``len - window`` values.
    """
    h = np.asarray(hosp_census, float)
    D = np.asarray(cum_deaths, float)
    if h.shape != D.shape or h.ndim != 1:
        raise ValueError("hospital and death series must be 1-D of equal length")
    if len(h) < window + 1:
        raise ValueError(f"need at least {window + 1} days for a {window}-day window")
    return rolling_mean(h[1:], window), rolling_mean(np.diff(D), window)


@dataclass
class Observations:
    raw_hosp: np.ndarray
    raw_deaths: np.ndarray
    hosp: np.ndarray
    deaths: np.ndarray
    window: int = 7
    centered: bool = False
    dates: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.hosp)

    @property
    def n_raw(self) -> int:
        return len(self.raw_hosp)

    def day_index(self) -> np.ndarray:
        """Raw day each smoothed value is attributed to (window end, or its centre)."""
        end = np.arange(self.window, self.n_raw)
        return end - (self.window - 1) // 2 if self.centered else end


def preprocess(raw_hosp: np.ndarray, raw_deaths: np.ndarray, window: int = 7,
               centered: bool = False, dates: Sequence[str] | None = None) -> Observations:
    h, d = preprocess_series(raw_hosp, raw_deaths, window)
    return Observations(np.asarray(raw_hosp, float), np.asarray(raw_deaths, float), h, d,
                        window, centered, list(dates or []))


def read_observations(path: str | Path, window: int = 7, centered: bool = False) -> Observations:
    rows = read_rows(path)
    missing = set(OBS_HEADER) - set(rows[0] if rows else OBS_HEADER)
    if missing:
        raise ValueError(f"{path}: missing columns {sorted(missing)}")
    hosp = np.array([float(r["hosp_census"]) for r in rows])
    deaths = np.array([float(r["cum_deaths"]) for r in rows])
    return preprocess(hosp, deaths, window, centered, [r["date"] for r in rows])


def observation_dates(n: int, start: str = DEFAULT_START_DATE) -> list[str]:
    d0 = dt.date.fromisoformat(start)
    return [(d0 + dt.timedelta(days=i)).isoformat() for i in range(n)]


def write_observations(path: str | Path, hosp: np.ndarray, cum_deaths: np.ndarray,
                       start: str = DEFAULT_START_DATE) -> None:
    write_rows(path, OBS_HEADER, zip(observation_dates(len(hosp), start),
                                     map(float, hosp), map(float, cum_deaths)))


# ---- likelihood and noise model ---------------------------------------------

@dataclass
class NoiseModel:
    sigma_h2: float
    sigma_d2: float
    zeta_h2: float
    zeta_d2: float
    n_s: int = 1
    p: int = 4

    def __post_init__(self):
        if self.n_s < 1:
            raise ValueError("n_s must be a positive integer")


def residual_sums(obs: Observations, hosp: np.ndarray, deaths: np.ndarray) -> tuple[float, float]:
    """(S_h, S_d) between observations and a raw model trajectory."""
    h, d = preprocess_series(hosp, deaths, obs.window)
    if len(h) != obs.n:
        raise ValueError(f"model gives {len(h)} smoothed days, observations have {obs.n}")
    return float(np.sum((obs.hosp - h) ** 2)), float(np.sum((obs.deaths - d) ** 2))


def log_likelihood_from_sums(S_h: float, S_d: float, n: int,
                             sigma_h2: float, sigma_d2: float) -> float:
    """-n log(2 pi sigma_h sigma_d) - S_h / (2 sigma_h^2) - S_d / (2 sigma_d^2)."""
    if not (sigma_h2 > 0 and sigma_d2 > 0):
        raise ValueError("error variances must be positive")
    return (-n * (math.log(2 * math.pi) + 0.5 * math.log(sigma_h2) + 0.5 * math.log(sigma_d2))
            - S_h / (2 * sigma_h2) - S_d / (2 * sigma_d2))


def log_likelihood(theta: np.ndarray, noise: NoiseModel, obs: Observations,
                   model: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]) -> float:
    """Gaussian log-likelihood of the smoothed observations given ``model(theta)``.

    ``model`` returns the raw (hospital census, cumulative deaths) series,
    which are preprocessed exactly like the observations.
    """
    S_h, S_d = residual_sums(obs, *model(np.asarray(theta, float)))
    return log_likelihood_from_sums(S_h, S_d, obs.n, noise.sigma_h2, noise.sigma_d2)


@dataclass
class OlsResult:
    zeta_h2: float
    zeta_d2: float
    row: int
    theta: np.ndarray
    S_h: float
    S_d: float

    @property
    def degenerate(self) -> bool:
        return self.zeta_h2 == 0 or self.zeta_d2 == 0


def ols_zeta(design: DesignMatrix, obs: Observations, p: int = 4) -> OlsResult:
    """Prior means of the error variances from the best-fitting design row.

    The row minimising S_h + S_d (lowest index on ties) is the OLS optimum
    over the training set; zeta^2 = S / (n - p) for each series.
    """
    if len(design.thetas) == 0:
        raise ValueError("empty design")
    if obs.n <= p:
        raise ValueError(f"need more than {p} smoothed observations, have {obs.n}")
    sums = np.array([residual_sums(obs, design.hosp[i], design.deaths[i])
                     for i in range(len(design.thetas))])
    row = int(np.argmin(sums.sum(axis=1)))
    S_h, S_d = sums[row]
    return OlsResult(S_h / (obs.n - p), S_d / (obs.n - p), row, design.thetas[row].copy(),
                     float(S_h), float(S_d))


def gibbs_sigma(noise: NoiseModel, S_h: float, S_d: float, n: int,
                rng: np.random.Generator) -> tuple[float, float]:
    """Draw (sigma_h^2, sigma_d^2) from their conjugate conditionals.

    Each precision is Gamma with shape (n_s + n) / 2 and rate
    (n_s zeta^2 + S) / 2; the variance is its reciprocal.
    """
    if n < 1 or S_h < 0 or S_d < 0:
        raise ValueError("need n >= 1 and non-negative residual sums")
    shape = 0.5 * (noise.n_s + n)
    rate_h = 0.5 * (noise.n_s * noise.zeta_h2 + S_h)
    rate_d = 0.5 * (noise.n_s * noise.zeta_d2 + S_d)
    if not (rate_h > 0 and rate_d > 0):
        raise ValueError("Gamma rate is zero: zeta^2 and the residual sum both vanish")
    return 1.0 / rng.gamma(shape, 1.0 / rate_h), 1.0 / rng.gamma(shape, 1.0 / rate_d)


def log_sigma_prior(noise: NoiseModel, sigma_h2: float, sigma_d2: float) -> float:
    """Log density of the conjugate inverse-Gamma priors on both variances."""
    a = 0.5 * noise.n_s
    return float(stats.invgamma.logpdf(sigma_h2, a, scale=a * noise.zeta_h2)
                 + stats.invgamma.logpdf(sigma_d2, a, scale=a * noise.zeta_d2))


# ---- DRAM --------------------------------------------------------------------

class GibbsBlock(Protocol):
    def update(self, theta: np.ndarray, rng: np.random.Generator) -> None: ...
    def values(self) -> np.ndarray: ...


@dataclass(frozen=True)
class DramConfig:
    adapt_interval: int = 100
    # AM scaling is 2.38^2 / d unless given
    scale: float | None = None
    epsilon: float = 1e-10
    dr_shrink: float = 1.0 / 25.0
    # initial proposal sd as a fraction of each box side
    initial_sd_fraction: float = 0.05
    gibbs_on_reject: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PosteriorChain:
    thetas: np.ndarray               # (K, d)
    log_post: np.ndarray             # (K,)
    accepted: np.ndarray             # (K,) bool
    stage: np.ndarray                # (K,) 1 = first proposal accepted, 2 = delayed stage used
    sigmas: np.ndarray | None = None  # (K, 2)
    cov_steps: list[int] = field(default_factory=list)
    cov_history: list[np.ndarray] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.thetas)

    @property
    def samples(self) -> np.ndarray:
        return self.thetas if self.sigmas is None else np.hstack([self.thetas, self.sigmas])

    @property
    def acceptance_rate(self) -> float:
        return float(self.accepted.mean()) if len(self) else float("nan")

    def after(self, burn_in: int) -> "PosteriorChain":
        s = slice(burn_in, None)
        return PosteriorChain(self.thetas[s], self.log_post[s], self.accepted[s], self.stage[s],
                              None if self.sigmas is None else self.sigmas[s],
                              self.cov_steps, self.cov_history, dict(self.meta))

    def write_csv(self, path: str | Path) -> None:
        if self.thetas.shape[1] != 4:
            raise ValueError("chain CSV holds four parameters")
        sig = self.sigmas if self.sigmas is not None else np.full((len(self), 2), np.nan)
        write_rows(path, CHAIN_HEADER,
                   ([k, *map(float, self.thetas[k]), float(sig[k, 0]), float(sig[k, 1]),
                     float(self.log_post[k]), int(self.accepted[k]), int(self.stage[k])]
                    for k in range(len(self))))


def read_chain(path: str | Path) -> PosteriorChain:
    rows = read_rows(path)
    arr = lambda key, t=float: np.array([t(r[key]) for r in rows])
    thetas = np.column_stack([arr(f"theta{i}") for i in range(1, 5)])
    return PosteriorChain(thetas, arr("log_post"), arr("accepted", int).astype(bool),
                          arr("stage", int), np.column_stack([arr("sigma_h2"), arr("sigma_d2")]))


class _RunningCov:
    def __init__(self, d: int):
        self.n = 0
        self.s = np.zeros(d)
        self.ss = np.zeros((d, d))

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        self.s += x
        self.ss += np.outer(x, x)

    def cov(self) -> np.ndarray:
        mu = self.s / self.n
        return (self.ss - self.n * np.outer(mu, mu)) / (self.n - 1)


def _mvn_logkernel(diff: np.ndarray, chol: np.ndarray) -> float:
    z = np.linalg.solve(chol, diff) if chol.ndim == 2 else diff / chol
    return -0.5 * float(z @ z)


def dram_run(log_density: Callable[[np.ndarray], float], box: PriorBox, K: int,
             config: DramConfig | None = None, seed: int = 0,
             theta0: np.ndarray | None = None, gibbs: GibbsBlock | None = None) -> PosteriorChain:
    """Delayed-rejection adaptive Metropolis with an optional Gibbs block.

    ``log_density`` is the log target inside ``box`` (uniform prior); points
    outside the box have zero mass and are rejected without evaluation.
    Stage one proposes from N(x, C); on rejection a second proposal from
    N(x, C * dr_shrink) is accepted with the delayed-rejection ratio. Every
    ``adapt_interval`` steps C becomes scale * (Cov(history) + epsilon I).
    When ``gibbs`` is given, its ``update`` runs after each accepted theta
    move (and after rejections too if ``gibbs_on_reject``), after which the
    target is re-evaluated at the current point.
    """
    cfg = config or DramConfig()
    if K < 1:
        raise ValueError("K must be >= 1")
    d = box.dim
    rng = np.random.default_rng(seed)
    x = np.array(box.lo + 0.5 * box.width if theta0 is None else theta0, float)
    if not box.contains(x):
        raise InitializationError(f"initial theta {x} is outside the prior box")
    lp = float(log_density(x))
    if not np.isfinite(lp):
        raise InitializationError(f"log-density at the initial theta is {lp}")
    scale = cfg.scale if cfg.scale is not None else 2.38 ** 2 / d
    C = np.diag((cfg.initial_sd_fraction * box.width) ** 2)
    L = np.linalg.cholesky(C)
    L2 = L * math.sqrt(cfg.dr_shrink)

    thetas = np.empty((K, d))
    log_post = np.empty(K)
    accepted = np.zeros(K, dtype=bool)
    stage = np.ones(K, dtype=np.int8)
    sigmas = np.empty((K, len(gibbs.values()))) if gibbs is not None else None
    history = _RunningCov(d)
    n_moves = 0
    chain = PosteriorChain(thetas, log_post, accepted, stage, sigmas)
    chain.cov_steps.append(0)
    chain.cov_history.append(C.copy())

    def target(y):
        return float(log_density(y)) if box.contains(y) else -np.inf

    for k in range(K):
        y1 = x + L @ rng.standard_normal(d)
        lp1 = target(y1)
        a1 = 1.0 if lp1 >= lp else math.exp(lp1 - lp) if np.isfinite(lp1) else 0.0
        moved = False
        if rng.random() < a1:
            x, lp, moved = y1, lp1, True
        else:
            stage[k] = 2
            y2 = x + L2 @ rng.standard_normal(d)
            lp2 = target(y2)
            if np.isfinite(lp2):
                # alpha_1(y2, y1): the reverse first-stage acceptance
                a1_rev = 1.0 if lp1 >= lp2 else math.exp(lp1 - lp2) if np.isfinite(lp1) else 0.0
                if a1_rev < 1.0:
                    log_num = lp2 + _mvn_logkernel(y1 - y2, L) + math.log1p(-a1_rev)
                    log_den = lp + _mvn_logkernel(y1 - x, L) + math.log1p(-a1)
                    if math.log(rng.random()) < log_num - log_den:
                        x, lp, moved = y2, lp2, True
        accepted[k] = moved
        if gibbs is not None and (moved or cfg.gibbs_on_reject):
            gibbs.update(x, rng)
            lp = float(log_density(x))
        thetas[k] = x
        log_post[k] = lp
        if sigmas is not None:
            sigmas[k] = gibbs.values()
        history.add(x)
        n_moves += moved
        if (k + 1) % cfg.adapt_interval == 0 and n_moves > d:
            Cn = scale * (history.cov() + cfg.epsilon * np.eye(d))
            try:
                Ln = np.linalg.cholesky(Cn)
            except np.linalg.LinAlgError:
                continue
            C, L = Cn, Ln
            L2 = L * math.sqrt(cfg.dr_shrink)
            chain.cov_steps.append(k + 1)
            chain.cov_history.append(C.copy())
    chain.meta = {"seed": int(seed), "K": int(K), "config": cfg.to_dict()}
    return chain


# ---- calibration target ------------------------------------------------------

class CalibrationTarget:
    """Log posterior of theta given the current error variances, plus their Gibbs step.

    The returned density is the log-likelihood plus the log prior of the
    current variances (the theta prior is uniform on the box). Residual sums
    of recently evaluated points are cached so the Gibbs step and the
    re-evaluation after it do not call the model again.
    """

    def __init__(self, model: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
                 obs: Observations, noise: NoiseModel):
        self.model = model
        self.obs = obs
        self.noise = noise
        self._cache: dict[bytes, tuple[float, float]] = {}

    def sums(self, theta: np.ndarray) -> tuple[float, float]:
        key = np.asarray(theta, float).tobytes()
        if key not in self._cache:
            if len(self._cache) > 8:
                self._cache.clear()
            self._cache[key] = residual_sums(self.obs, *self.model(theta))
        return self._cache[key]

    def log_likelihood(self, theta: np.ndarray) -> float:
        S_h, S_d = self.sums(theta)
        return log_likelihood_from_sums(S_h, S_d, self.obs.n,
                                        self.noise.sigma_h2, self.noise.sigma_d2)

    def __call__(self, theta: np.ndarray) -> float:
        return self.log_likelihood(theta) + log_sigma_prior(
            self.noise, self.noise.sigma_h2, self.noise.sigma_d2)

    def update(self, theta: np.ndarray, rng: np.random.Generator) -> None:
        S_h, S_d = self.sums(theta)
        self.noise.sigma_h2, self.noise.sigma_d2 = gibbs_sigma(self.noise, S_h, S_d,
                                                               self.obs.n, rng)

    def values(self) -> np.ndarray:
        return np.array([self.noise.sigma_h2, self.noise.sigma_d2])


@dataclass(frozen=True)
class CalibrationConfig:
    steps: int = 50_000
    window: int = 7
    centered: bool = False
    n_s: int = 1
    p: int = 4
    dram: DramConfig = DramConfig()

    @classmethod
    def from_dict(cls, data: dict) -> "CalibrationConfig":
        data = dict(data)
        if "dram" in data:
            data["dram"] = DramConfig(**data["dram"])
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def calibrate(surrogate, obs: Observations, design: DesignMatrix | None = None,
              config: CalibrationConfig | None = None, seed: int = 0) -> PosteriorChain:
    """Sample the posterior of (theta, sigma_h^2, sigma_d^2) with the surrogate as the model.

    The chain starts at the OLS design row with the variances at their prior
    means zeta^2. ``design`` defaults to the training set stored with the
    surrogate.
    """
    cfg = config or CalibrationConfig()
    ols = ols_zeta(design if design is not None else surrogate.training_set(), obs, cfg.p)
    if ols.degenerate:
        raise InitializationError("OLS residuals vanish, so zeta^2 = 0 and the prior is degenerate")
    noise = NoiseModel(ols.zeta_h2, ols.zeta_d2, ols.zeta_h2, ols.zeta_d2, cfg.n_s, cfg.p)
    target = CalibrationTarget(surrogate, obs, noise)
    chain = dram_run(target, surrogate.box, cfg.steps, cfg.dram, seed, ols.theta, gibbs=target)
    chain.meta.update({"ols_row": ols.row, "zeta_h2": ols.zeta_h2, "zeta_d2": ols.zeta_d2,
                       "n_obs": obs.n})
    return chain


# ---- Raftery-Lewis -------------------------------------------------------------

@dataclass
class RafteryLewis:
    burn_in: int
    n_required: int
    n_min: int
    thin: int
    dependence: float
    satisfied: bool
    degenerate: bool = False


def raftery_nmin(q: float = 0.025, r: float = 0.005, s: float = 0.95) -> int:
    """Run length needed for independent draws: q (1 - q) (z / r)^2, rounded up."""
    z = stats.norm.ppf(0.5 * (1 + s))
    return int(math.ceil(q * (1 - q) * z * z / (r * r)))


def _g2_second_order(z: np.ndarray) -> float:
    """Likelihood-ratio statistic of a 2nd- against a 1st-order binary Markov chain."""
    t = np.zeros((2, 2, 2))
    np.add.at(t, (z[:-2], z[1:-1], z[2:]), 1.0)
    g2 = 0.0
    for i1 in range(2):
        for i2 in range(2):
            for i3 in range(2):
                if t[i1, i2, i3] > 0:
                    fitted = t[i1, i2, :].sum() * t[:, i2, i3].sum() / t[:, i2, :].sum()
                    g2 += 2.0 * t[i1, i2, i3] * math.log(t[i1, i2, i3] / fitted)
    return g2


def raftery_lewis(x: np.ndarray, q: float = 0.025, r: float = 0.005, s: float = 0.95,
                  eps: float = 0.001) -> RafteryLewis:
    """Raftery-Lewis run-length diagnostic for one scalar chain.

    The chain is dichotomised at its empirical q-quantile. The smallest
    thinning for which a first-order Markov chain beats a second-order one
    by BIC is chosen, its transition probabilities (alpha, beta) are
    estimated, and burn-in M and total length N = M + N_keep follow the
    usual closed forms.
    """
    x = np.asarray(x, float)
    n_min = raftery_nmin(q, r, s)
    if len(x) < n_min:
        raise ValueError(f"chain of length {len(x)} is shorter than N_min = {n_min}")
    z = (x <= np.quantile(x, q)).astype(np.int64)
    if z.min() == z.max():
        return RafteryLewis(0, 0, n_min, 1, float("nan"), False, degenerate=True)
    thin = 0
    while True:
        thin += 1
        zt = z[::thin]
        if len(zt) < 3 or zt.min() == zt.max():
            return RafteryLewis(0, 0, n_min, thin, float("nan"), False, degenerate=True)
        if _g2_second_order(zt) - 2.0 * math.log(len(zt) - 2) < 0:
            break
    t = np.zeros((2, 2))
    np.add.at(t, (zt[:-1], zt[1:]), 1.0)
    if t[0].sum() == 0 or t[1].sum() == 0:
        return RafteryLewis(0, 0, n_min, thin, float("nan"), False, degenerate=True)
    alpha = t[0, 1] / t[0].sum()
    beta = t[1, 0] / t[1].sum()
    if alpha + beta == 0:
        return RafteryLewis(0, 0, n_min, thin, float("nan"), False, degenerate=True)
    lam = abs(1.0 - alpha - beta)
    if lam == 0 or lam == 1:
        burn = 0
    else:
        burn = int(math.ceil(math.log(eps * (alpha + beta) / max(alpha, beta)) / math.log(lam))
                   * thin)
    burn = max(burn, 0)
    z_s = stats.norm.ppf(0.5 * (1 + s))
    keep = int(math.ceil((2 - alpha - beta) * alpha * beta * z_s ** 2
                         / ((alpha + beta) ** 3 * r ** 2) * thin))
    total = burn + keep
    return RafteryLewis(burn, total, n_min, thin, total / n_min, len(x) >= total)


def raftery_diagnostic(chain: PosteriorChain | np.ndarray, q: float = 0.025, r: float = 0.005,
                       s: float = 0.95) -> list[RafteryLewis]:
    """Raftery-Lewis diagnostic for every theta component of ``chain``."""
    thetas = chain.thetas if isinstance(chain, PosteriorChain) else np.asarray(chain, float)
    if thetas.ndim == 1:
        thetas = thetas[:, None]
    return [raftery_lewis(thetas[:, j], q, r, s) for j in range(thetas.shape[1])]


def burn_in_length(diagnostics: Sequence[RafteryLewis]) -> int:
    """Largest burn-in over the non-degenerate components."""
    return max((d.burn_in for d in diagnostics if not d.degenerate), default=0)

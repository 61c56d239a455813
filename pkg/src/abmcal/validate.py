"""Pushforward ensembles and their scores: CRPS, rank histograms, DIC, histogram distances."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .calibrate import (Observations, PosteriorChain, burn_in_length, preprocess_series,
                        raftery_diagnostic)
from .doe import PriorBox
from .sim import SimConfig, SimParams, run_mean_model
from .util import write_rows

log = logging.getLogger(__name__)

OUTPUTS = ("hosp", "deaths")
Model = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


# ---- ensembles -----------------------------------------------------------------

@dataclass
class PushforwardEnsemble:
    """Members evaluated at posterior (or prior) draws.

    ``hosp`` and ``deaths`` are the smoothed daily series compared with the
    observations, one row per member; ``raw_hosp``/``raw_deaths`` keep the
    census and cumulative deaths the model produced.
    """
    thetas: np.ndarray
    sigmas: np.ndarray | None
    raw_hosp: np.ndarray
    raw_deaths: np.ndarray
    hosp: np.ndarray
    deaths: np.ndarray
    source: str = "surrogate"
    predictive: bool = False

    @property
    def n_members(self) -> int:
        return len(self.thetas)

    def series(self, output: str) -> np.ndarray:
        return {"hosp": self.hosp, "deaths": self.deaths}[output]


class AbmMeanModel:
    """MiniCity mean-model evaluator with a fixed seed set, for native pushforwards."""

    def __init__(self, config: SimConfig, seeds: Sequence[int]):
        self.config = config
        self.seeds = list(seeds)

    def __call__(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        m = run_mean_model(SimParams.from_array(theta), self.seeds, self.config)
        return m.hosp_census, m.cum_deaths


def thin_indices(available: int, n: int) -> np.ndarray:
    """``n`` distinct, evenly spaced indices into ``available`` samples."""
    if n < 1:
        raise ValueError("need at least one draw")
    if n > available:
        raise ValueError(f"cannot draw {n} samples without replacement from {available}")
    return (np.arange(n) * available) // n


def _evaluate(thetas: np.ndarray, sigmas, model: Model, window: int, source: str
              ) -> PushforwardEnsemble:
    raw = [model(t) for t in thetas]
    raw_h = np.array([np.asarray(h, float) for h, _ in raw])
    raw_d = np.array([np.asarray(d, float) for _, d in raw])
    daily = [preprocess_series(h, d, window) for h, d in zip(raw_h, raw_d)]
    return PushforwardEnsemble(thetas, sigmas, raw_h, raw_d, np.array([h for h, _ in daily]),
                               np.array([d for _, d in daily]), source)


def pushforward(chain: PosteriorChain, model: Model, n_p: int, window: int = 7,
                source: str = "surrogate") -> PushforwardEnsemble:
    """Evaluate ``model`` at ``n_p`` evenly thinned draws of a (burned-in) chain."""
    idx = thin_indices(len(chain), n_p)
    sig = None if chain.sigmas is None else chain.sigmas[idx]
    return _evaluate(chain.thetas[idx], sig, model, window, source)


def prior_pushforward(box: PriorBox, model: Model, n_p: int, seed: int = 0,
                      window: int = 7, source: str = "surrogate") -> PushforwardEnsemble:
    """Baseline ensemble at ``n_p`` uniform draws from the prior box."""
    u = np.random.default_rng(seed).random((n_p, box.dim))
    return _evaluate(box.scale(u), None, model, window, source)


def posterior_predictive(ensemble: PushforwardEnsemble, seed: int = 0) -> PushforwardEnsemble:
    """Add N(0, sigma_h^2) and N(0, sigma_d^2) noise, per member, to the daily series."""
    if ensemble.sigmas is None:
        raise ValueError("ensemble carries no variance draws")
    rng = np.random.default_rng(seed)
    sd = np.sqrt(np.asarray(ensemble.sigmas, float))
    noise_h = rng.standard_normal(ensemble.hosp.shape) * sd[:, :1]
    noise_d = rng.standard_normal(ensemble.deaths.shape) * sd[:, 1:2]
    return PushforwardEnsemble(ensemble.thetas, ensemble.sigmas, ensemble.raw_hosp,
                               ensemble.raw_deaths, ensemble.hosp + noise_h,
                               ensemble.deaths + noise_d, ensemble.source, predictive=True)


# ---- scores ---------------------------------------------------------------------

def crps(members: np.ndarray, y: float) -> float:
    """Empirical-CDF CRPS: mean |x_i - y| - (1 / 2m^2) sum_ij |x_i - x_j|."""
    return float(crps_series(np.asarray(members, float)[:, None], np.array([y]))[0])


def crps_series(ensemble: np.ndarray, obs: np.ndarray) -> np.ndarray:
    """CRPS per day for an (m members x T days) ensemble.

    The pair term uses the sorted-sample identity
    sum_ij |x_i - x_j| = 2 sum_i (2i - m - 1) x_(i), so each day costs
    O(m log m).
    """
    E = np.atleast_2d(np.asarray(ensemble, float))
    y = np.asarray(obs, float)
    m = E.shape[0]
    if m < 1:
        raise ValueError("empty ensemble")
    mae = np.abs(E - y).mean(axis=0)
    w = 2 * np.arange(1, m + 1) - m - 1
    spread = (w[:, None] * np.sort(E, axis=0)).sum(axis=0) / (m * m)
    return np.maximum(mae - spread, 0.0)


def rank_histogram(ensemble: np.ndarray, obs: np.ndarray, seed: int = 0) -> np.ndarray:
    """Verification rank counts over the m + 1 possible ranks.

    The rank of a day's observation is 1 + (members strictly below it), plus
    a uniformly random offset among members equal to it.
    """
    E = np.atleast_2d(np.asarray(ensemble, float))
    y = np.asarray(obs, float)
    m = E.shape[0]
    below = (E < y).sum(axis=0)
    ties = (E == y).sum(axis=0)
    rng = np.random.default_rng(seed)
    offset = np.floor(rng.random(len(y)) * (ties + 1)).astype(np.int64)
    ranks = below + offset  # zero-based
    return np.bincount(ranks, minlength=m + 1)


def hist_distances(counts: np.ndarray) -> dict[str, float]:
    """KL, chi-squared and 1-D Wasserstein distances of a normalised histogram to uniform."""
    c = np.asarray(counts, float)
    if c.size == 0 or c.sum() <= 0:
        raise ValueError("histogram is empty")
    V = c / c.sum()
    U = np.full(len(V), 1.0 / len(V))
    pos = V > 0
    kl = float(np.sum(V[pos] * np.log(V[pos] / U[pos])))
    chi = float(np.sum((V - U) ** 2 / U))
    wass = float(np.sum(np.abs(np.cumsum(V) - np.cumsum(U))))
    return {"kl": max(kl, 0.0), "chi_sq": chi, "wasserstein": wass}


@dataclass
class DicResult:
    dic: float
    p_dic: float
    log_lik_at_mean: float
    mean_log_lik: float
    flagged: bool = False


def dic(samples: np.ndarray, log_lik: Callable[[np.ndarray], float]) -> DicResult:
    """Deviance information criterion from posterior draws.

    theta_hat is the sample mean of the draws; p_DIC = 2 (log p(y | theta_hat)
    - mean_i log p(y | theta_i)) and DIC = -2 log p(y | theta_hat) + 2 p_DIC.
    """
    S = np.atleast_2d(np.asarray(samples, float))
    if len(S) < 2:
        raise ValueError("DIC needs at least two draws")
    ll = np.array([log_lik(s) for s in S])
    if not np.all(np.isfinite(ll)):
        raise ValueError("non-finite log-likelihood at a posterior draw")
    mean_ll = float(ll.mean())
    ll_hat = float(log_lik(S.mean(axis=0)))
    if not np.isfinite(ll_hat):
        return DicResult(float("nan"), float("nan"), ll_hat, mean_ll, flagged=True)
    p = 2.0 * (ll_hat - mean_ll)
    return DicResult(-2.0 * ll_hat + 2.0 * p, p, ll_hat, mean_ll)


def gaussian_series_loglik(obs: np.ndarray, pred: np.ndarray, sigma2: float) -> float:
    r = np.asarray(obs, float) - np.asarray(pred, float)
    return float(-0.5 * len(r) * math.log(2 * math.pi * sigma2) - r @ r / (2 * sigma2))


# ---- report ------------------------------------------------------------------------

@dataclass
class ScoreReport:
    crps: dict[str, np.ndarray]
    vrh: dict[str, np.ndarray]
    dic: dict[str, DicResult]
    distances: dict[str, dict[str, float]]
    extra: dict[str, dict[str, float]] = field(default_factory=dict)

    def crps_mean(self, output: str) -> float:
        return float(np.mean(self.crps[output]))

    def summary_rows(self):
        for o in OUTPUTS:
            yield ["crps_mean", o, self.crps_mean(o)]
            if o in self.dic:
                d = self.dic[o]
                yield ["dic", o, d.dic]
                yield ["p_dic", o, d.p_dic]
            for name, v in self.distances[o].items():
                yield [f"vrh_{name}", o, v]
        for metric, per_output in self.extra.items():
            for o, v in per_output.items():
                yield [metric, o, v]

    def write(self, out: str | Path) -> None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "crps.csv", ["day", "output", "value"],
                   ([j, o, float(v)] for o in OUTPUTS for j, v in enumerate(self.crps[o])))
        write_rows(out / "vrh.csv", ["rank", "count", "output"],
                   ([r + 1, int(c), o] for o in OUTPUTS for r, c in enumerate(self.vrh[o])))
        write_rows(out / "summary.csv", ["metric", "output", "value"],
                   ([m, o, float(v)] for m, o, v in self.summary_rows()))


def score(ensemble: PushforwardEnsemble, obs: Observations, seed: int = 0,
          dic_loglik: dict[str, Callable[[np.ndarray], float]] | None = None,
          dic_samples: np.ndarray | None = None) -> ScoreReport:
    """CRPS, rank histogram and distances per output; DIC when log-likelihoods are given."""
    crps_d, vrh, dist, dics = {}, {}, {}, {}
    for j, o in enumerate(OUTPUTS):
        y = obs.hosp if o == "hosp" else obs.deaths
        E = ensemble.series(o)
        crps_d[o] = crps_series(E, y)
        vrh[o] = rank_histogram(E, y, int(np.random.SeedSequence([seed, j]).generate_state(1)[0]))
        dist[o] = hist_distances(vrh[o])
        if dic_loglik is not None and dic_samples is not None:
            dics[o] = dic(dic_samples, dic_loglik[o])
    return ScoreReport(crps_d, vrh, dics, dist)


def dic_logliks(model: Model, obs: Observations) -> dict[str, Callable[[np.ndarray], float]]:
    """Per-output Gaussian log-likelihoods of a (theta, sigma_h^2, sigma_d^2) row."""
    cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

    def daily(theta):
        key = theta.tobytes()
        if key not in cache:
            cache[key] = preprocess_series(*model(theta), obs.window)
        return cache[key]

    def ll(idx):
        def f(row):
            row = np.asarray(row, float)
            return gaussian_series_loglik((obs.hosp, obs.deaths)[idx], daily(row[:4])[idx],
                                          row[4 + idx])
        return f

    return {"hosp": ll(0), "deaths": ll(1)}


@dataclass
class ValidationResult:
    pushforward: PushforwardEnsemble
    predictive: PushforwardEnsemble
    prior: PushforwardEnsemble
    report: ScoreReport
    burn_in: int


def validate_chain(chain: PosteriorChain, model: Model, obs: Observations, box: PriorBox,
                   n_p: int = 500, seed: int = 0, source: str = "surrogate",
                   burn_in: int | None = None) -> ValidationResult:
    """Burn in, push forward, score, and compare against a prior pushforward of equal size.

    Burn-in defaults to the largest Raftery-Lewis M over the parameters (0
    when the chain is too short for the diagnostic).
    """
    if burn_in is None:
        try:
            burn_in = burn_in_length(raftery_diagnostic(chain))
        except ValueError as exc:
            log.warning("no Raftery-Lewis burn-in: %s", exc)
            burn_in = 0
    kept = chain.after(burn_in)
    ens = pushforward(kept, model, n_p, obs.window, source)
    seeds = np.random.SeedSequence(seed).generate_state(3)
    pred = posterior_predictive(ens, int(seeds[0]))
    prior = prior_pushforward(box, model, n_p, int(seeds[1]), obs.window, source)
    samples = np.hstack([ens.thetas, ens.sigmas])
    report = score(ens, obs, int(seeds[2]), dic_logliks(model, obs), samples)
    pred_rep = score(pred, obs, int(seeds[2]))
    prior_rep = score(prior, obs, int(seeds[2]))
    report.extra["crps_mean_predictive"] = {o: pred_rep.crps_mean(o) for o in OUTPUTS}
    report.extra["crps_mean_prior"] = {o: prior_rep.crps_mean(o) for o in OUTPUTS}
    report.extra["burn_in"] = {o: float(burn_in) for o in OUTPUTS}
    return ValidationResult(ens, pred, prior, report, burn_in)


def plot_fans(result: ValidationResult, obs: Observations, out: str | Path) -> list[Path]:
    """SVG fan charts (5-95% and 25-75% bands, median) against the observations."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "abmcal"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    days = obs.day_index()
    paths = []
    for name, ens in (("pushforward", result.pushforward), ("predictive", result.predictive),
                      ("prior", result.prior)):
        fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
        for ax, o in zip(axes, OUTPUTS):
            E = ens.series(o)
            q = np.percentile(E, [5, 25, 50, 75, 95], axis=0)
            ax.fill_between(days, q[0], q[4], color="C0", alpha=0.2, lw=0)
            ax.fill_between(days, q[1], q[3], color="C0", alpha=0.4, lw=0)
            ax.plot(days, q[2], color="C0", lw=1)
            ax.plot(days, obs.hosp if o == "hosp" else obs.deaths, "k.", ms=3)
            ax.set_xlabel("day")
            ax.set_ylabel("daily hospital census" if o == "hosp" else "daily deaths")
        fig.suptitle(f"{name} ({ens.source}, N_p = {ens.n_members})")
        fig.tight_layout()
        path = out / f"fan_{name}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(path)
    return paths

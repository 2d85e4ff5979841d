"""MCMC kernels and the blocked Gibbs sampler.

The coefficient conditional is a Gaussian truncated to a polytope, so
it is updated with the exact Hamiltonian dynamics sampler for truncated
Gaussians (quadratic potential, analytic trajectories, reflections off
the constraint walls).  Scalar covariance and error parameters use
univariate slice sampling; the group precision factors are conjugate.

Inference runs in two stages: a short first stage that also samples
each satellite group's error correlation parameters (rho, ell), whose
posterior means are then fixed for the main run.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import numpy.typing as npt
from scipy import linalg

from .data_model import ErrorParams, ObservationGroup, error_covariance
from .prior import AlphaPrior, ConstraintSet, CovarianceParams, Hyperpriors

FloatArray = npt.NDArray[np.float64]


class SamplerError(RuntimeError):
    """Raised when a kernel cannot make progress."""


# -- exact HMC for truncated Gaussians -----------------------------------

_MIN_HIT_TIME = 1e-8


@dataclass
class HmcDiagnostics:
    reflections: int = 0
    rejected_steps: int = 0
    cap_hits: int = 0


def _hmc_travel(
    w: FloatArray,
    v: FloatArray,
    fw: FloatArray | None,
    g: FloatArray | None,
    travel_time: float,
    max_reflections: int,
    diag: HmcDiagnostics,
) -> FloatArray:
    """Follow the exact dynamics for ``travel_time``, reflecting off walls."""
    remaining = travel_time
    reflections = 0
    while True:
        if fw is not None and fw.shape[0]:
            fa = fw @ v
            fb = fw @ w
            u = np.hypot(fa, fb)
            with np.errstate(invalid="ignore", divide="ignore"):
                can_hit = u > np.abs(g)
                phi = np.arctan2(-fa, fb)
                t_hit = np.where(can_hit, np.arccos(np.clip(-g / np.where(u > 0, u, 1.0), -1.0, 1.0)) - phi, np.inf)
            t_hit = np.where(t_hit < 0.0, t_hit + 2.0 * np.pi, t_hit)
            t_hit = np.where(t_hit < _MIN_HIT_TIME, np.inf, t_hit)
            j = int(np.argmin(t_hit))
            t_min = float(t_hit[j])
        else:
            t_min = np.inf
        if t_min >= remaining:
            cos_t, sin_t = math.cos(remaining), math.sin(remaining)
            return w * cos_t + v * sin_t
        cos_t, sin_t = math.cos(t_min), math.sin(t_min)
        w, v = w * cos_t + v * sin_t, v * cos_t - w * sin_t
        f = fw[j]
        v = v - (2.0 * (f @ v) / (f @ f)) * f
        remaining -= t_min
        reflections += 1
        diag.reflections += 1
        if reflections > max_reflections:
            diag.cap_hits += 1
            warnings.warn("exact HMC hit the reflection cap; keeping the boundary state", RuntimeWarning)
            return w


class TruncatedGaussianSampler:
    """Exact HMC for x ~ N(mean, cov) subject to f @ x + g >= 0.

    Build from either a covariance or a precision matrix.  Rows of
    ``f`` with zero norm are dropped after checking they are feasible
    on their own (constant constraints).
    """

    def __init__(
        self,
        f: FloatArray | None = None,
        g: FloatArray | None = None,
        mean: FloatArray | None = None,
        cov: FloatArray | None = None,
        precision: FloatArray | None = None,
        precision_linear: FloatArray | None = None,
        travel_time: float = 0.5 * np.pi,
        max_reflections: int = 1000,
    ) -> None:
        if (cov is None) == (precision is None):
            raise SamplerError("provide exactly one of cov or precision")
        if cov is not None:
            a = linalg.cholesky(cov, lower=True)  # x = mean + a @ w
            self._to_x = lambda w: a @ w
            self._to_w = lambda x: linalg.solve_triangular(a, x, lower=True)
            self._constraint_map = lambda fmat: fmat @ a
            self.mean = np.asarray(mean, dtype=float)
        else:
            chol = linalg.cholesky(precision, lower=True)
            if mean is None:
                if precision_linear is None:
                    raise SamplerError("precision form needs mean or precision_linear")
                mean = linalg.cho_solve((chol, True), precision_linear)
            # x = mean + L^-T w  <=>  w = L^T (x - mean)
            self._to_x = lambda w: linalg.solve_triangular(chol, w, lower=True, trans="T")
            self._to_w = lambda x: chol.T @ x
            self._constraint_map = lambda fmat: linalg.solve_triangular(chol, fmat.T, lower=True).T
            self.mean = np.asarray(mean, dtype=float)
        self.travel_time = float(travel_time)
        self.max_reflections = int(max_reflections)
        self.diagnostics = HmcDiagnostics()
        if f is None or f.shape[0] == 0:
            self._fw = None
            self._g = None
        else:
            f = np.asarray(f, dtype=float)
            g = np.asarray(g, dtype=float)
            norms = np.sqrt(np.sum(f * f, axis=1))
            degenerate = norms == 0.0
            if np.any(g[degenerate] < 0.0):
                raise SamplerError("a constant constraint row is infeasible")
            keep = ~degenerate
            self._fw = self._constraint_map(f[keep])
            self._g = g[keep] + f[keep] @ self.mean
            if self._fw.shape[0] == 0:
                self._fw = None
                self._g = None

    def feasible(self, x: FloatArray, tol: float = 0.0) -> bool:
        if self._fw is None:
            return True
        w = self._to_w(np.asarray(x, dtype=float) - self.mean)
        return bool(np.min(self._g + self._fw @ w) >= -tol)

    def step(self, x: FloatArray, rng: np.random.Generator, retries: int = 10) -> FloatArray:
        """One exact-HMC transition from ``x`` (which must be feasible)."""
        w0 = self._to_w(np.asarray(x, dtype=float) - self.mean)
        if self._fw is not None:
            slack = self._g + self._fw @ w0
            if np.min(slack) < -1e-7 * max(1.0, float(np.max(np.abs(self._g)))):
                raise SamplerError("exact HMC started from an infeasible state")
        for _ in range(max(1, retries)):
            v = rng.standard_normal(w0.size)
            w1 = _hmc_travel(w0, v, self._fw, self._g, self.travel_time,
                             self.max_reflections, self.diagnostics)
            if self._fw is None or np.min(self._g + self._fw @ w1) >= 0.0:
                return self.mean + self._to_x(w1)
            self.diagnostics.rejected_steps += 1
        # numerical corner case: keep the current state this iteration
        return self.mean + self._to_x(w0)


# -- univariate slice sampling -------------------------------------------


def slice_sample(
    logf,
    x0: float,
    width: float,
    rng: np.random.Generator,
    lower: float = -np.inf,
    upper: float = np.inf,
    max_steps: int = 100,
) -> float:
    """One update of Neal's stepping-out-and-shrinkage slice sampler."""
    f0 = logf(x0)
    if not np.isfinite(f0):
        raise SamplerError(f"slice sampler started at a zero-density point x0={x0}")
    y = f0 + math.log(rng.uniform())
    left = x0 - width * rng.uniform()
    right = left + width
    steps = max_steps
    while left > lower and logf(left) > y and steps > 0:
        left -= width
        steps -= 1
    left = max(left, lower)
    steps = max_steps
    while right < upper and logf(right) > y and steps > 0:
        right += width
        steps -= 1
    right = min(right, upper)
    for _ in range(1000):
        x1 = rng.uniform(left, right)
        if logf(x1) > y:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1
    raise SamplerError("slice sampler failed to find an acceptable point")


# -- model bundle and caches ----------------------------------------------


@dataclass
class InversionModel:
    """Everything the Gibbs sampler needs, with precomputed cross-products."""

    prior: AlphaPrior
    constraints: ConstraintSet
    groups: list[ObservationGroup]
    error_params: dict[str, ErrorParams]
    hyper: Hyperpriors = field(default_factory=Hyperpriors)
    include_bias: bool = False

    def __post_init__(self) -> None:
        self._f_reduced, self._d = self.constraints.reduced(self.prior.fixed)
        self._caches: dict[str, dict] = {}
        for group in self.groups:
            if group.name not in self.error_params:
                raise SamplerError(f"no error parameters for group {group.name!r}")
            self._build_cache(group)

    def _build_cache(self, group: ObservationGroup) -> None:
        """(Re)build the error-covariance-weighted cross products."""
        params = self.error_params[group.name]
        cov = error_covariance(group, params)
        response, baseline = group.require_response()
        psi_free = response[:, self.prior.free_idx]
        r0 = group.values - baseline
        ci_psi = cov.solve(psi_free)
        cache = {
            "cov": cov,
            "psi_free": psi_free,
            "r0": r0,
            "m_mat": psi_free.T @ ci_psi,
            "m_vec": ci_psi.T @ r0,
            "s_scalar": float(r0 @ cov.solve(r0)),
        }
        if self.include_bias:
            if group.bias_design is None:
                raise SamplerError(f"bias enabled but group {group.name!r} has no design matrix")
            a = group.bias_design
            ci_a = cov.solve(a)
            cache.update(a=a, ci_a=ci_a, ata=a.T @ ci_a, atr=ci_a.T @ r0, atpsi=ci_a.T @ psi_free)
        self._caches[group.name] = cache

    def set_correlation(self, name: str, rho: float, ell_days: float) -> None:
        """Fix a group's (rho, ell) and refresh its caches."""
        old = self.error_params[name]
        self.error_params[name] = ErrorParams(gamma=old.gamma, rho=rho, ell_days=ell_days)
        group = next(g for g in self.groups if g.name == name)
        self._build_cache(group)

    def residual_quad(self, name: str, alpha_free: FloatArray, pi: dict[str, FloatArray] | None) -> float:
        """(Z - Z0 - Psi a - A pi)' C^-1 (same), from cached pieces."""
        c = self._caches[name]
        q = c["s_scalar"] - 2.0 * float(c["m_vec"] @ alpha_free) \
            + float(alpha_free @ (c["m_mat"] @ alpha_free))
        if pi is not None and name in pi:
            p = pi[name]
            q += float(p @ (c["ata"] @ p)) - 2.0 * float(c["atr"] @ p) \
                + 2.0 * float(p @ (c["atpsi"] @ alpha_free))
        return max(q, 0.0)


@dataclass(frozen=True)
class GibbsConfig:
    n_iterations: int = 1000
    n_warmup: int = 200
    thin: int = 1
    travel_time: float = 0.5 * np.pi
    max_reflections: int = 1000
    slice_width_corr: float = 0.5
    slice_width_log: float = 1.0
    sample_correlation: bool = False

    def __post_init__(self) -> None:
        if self.n_warmup >= self.n_iterations:
            raise SamplerError("warmup must be shorter than the run")


@dataclass
class PosteriorSamples:
    """Post-warmup draws, one row per stored iteration."""

    alpha: FloatArray  # (n_draws, n_free)
    gamma: dict[str, FloatArray]
    cov_params: dict[str, FloatArray]
    rho: dict[str, FloatArray]
    ell: dict[str, FloatArray]
    free_idx: npt.NDArray[np.int64]
    n_warmup: int
    hmc: HmcDiagnostics

    @property
    def n_draws(self) -> int:
        return self.alpha.shape[0]

    def alpha_full(self, layout_size: int) -> FloatArray:
        out = np.zeros((self.n_draws, layout_size))
        out[:, self.free_idx] = self.alpha
        return out


def _initial_cov_params(prior: AlphaPrior, hyper: Hyperpriors) -> CovarianceParams:
    tau0 = hyper.tau_shape / hyper.tau_rate
    comps = prior.layout.components
    return CovarianceParams(
        tau_beta={c: tau0 for c in comps},
        tau_eps={c: tau0 for c in comps},
        rho_beta_bio=0.5, rho_eps_bio=0.5, kappa_bio=0.5, kappa_ocean=0.5,
    )


def run_gibbs(model: InversionModel, config: GibbsConfig, rng: np.random.Generator,
              initial_alpha: FloatArray | None = None) -> PosteriorSamples:
    """Blocked Gibbs over (alpha, gamma, covariance params[, rho, ell])."""
    prior = model.prior
    hyper = model.hyper
    n_free = prior.n_free
    alpha = np.zeros(n_free) if initial_alpha is None else np.asarray(initial_alpha, dtype=float).copy()
    params = _initial_cov_params(prior, hyper)
    gammas = {g.name: model.error_params[g.name].gamma for g in model.groups}
    pi = None  # bias updates are conjugate but off unless enabled
    names_structured = prior.parameter_names()
    all_names = sorted(set(names_structured) | {
        f"tau_beta_{c}" for c in prior.layout.components
    } | {f"tau_eps_{c}" for c in prior.layout.components} | {
        "rho_beta_bio", "rho_eps_bio", "kappa_bio", "kappa_ocean"
    })
    hmc_diag = HmcDiagnostics()
    kept_alpha: list[FloatArray] = []
    kept_gamma: dict[str, list[float]] = {g.name: [] for g in model.groups}
    kept_params: dict[str, list[float]] = {name: [] for name in all_names}
    kept_rho: dict[str, list[float]] = {g.name: [] for g in model.groups if g.estimate_correlation}
    kept_ell: dict[str, list[float]] = {g.name: [] for g in model.groups if g.estimate_correlation}

    for it in range(config.n_iterations):
        # -- alpha | rest: truncated Gaussian by exact HMC
        lam = prior.precision(params)
        b = np.zeros(n_free)
        for g in model.groups:
            cache = model._caches[g.name]
            lam += gammas[g.name] * cache["m_mat"]
            vec = cache["m_vec"]
            if pi is not None and g.name in pi:
                vec = vec - cache["atpsi"].T @ pi[g.name]
            b += gammas[g.name] * vec
        sampler = TruncatedGaussianSampler(
            f=model._f_reduced, g=model._d, precision=lam, precision_linear=b,
            travel_time=config.travel_time, max_reflections=config.max_reflections,
        )
        sampler.diagnostics = hmc_diag
        alpha = sampler.step(alpha, rng)

        # -- gamma | alpha: conjugate Gamma updates
        for g in model.groups:
            q = model.residual_quad(g.name, alpha, pi)
            shape = hyper.gamma_shape + 0.5 * g.n_obs
            rate = hyper.gamma_rate + 0.5 * q
            gammas[g.name] = float(rng.gamma(shape, 1.0 / rate))

        # -- covariance parameters | alpha: slice updates (or prior draws
        #    for parameters nothing depends on)
        for name in all_names:
            if name not in names_structured:
                draw = sample_hyper_scalar(name, hyper, rng)
                params = params.replace(**{name: draw})
                continue
            current = params.value_of(name)
            if name.startswith("tau"):
                def logf(z: float, name=name) -> float:
                    tau = math.exp(z)
                    try:
                        lp = prior.logpdf(alpha, params.replace(**{name: tau}), depends_on=name)
                    except Exception:
                        return -np.inf
                    return lp + hyper.tau_logpdf(tau) + z
                z1 = slice_sample(logf, math.log(current), config.slice_width_log, rng)
                params = params.replace(**{name: math.exp(z1)})
            else:
                def logf(x: float, name=name) -> float:
                    if not 0.0 < x < 1.0:
                        return -np.inf
                    try:
                        lp = prior.logpdf(alpha, params.replace(**{name: x}), depends_on=name)
                    except Exception:
                        return -np.inf
                    return lp + hyper.corr_logpdf(x)
                x1 = slice_sample(logf, current, config.slice_width_corr, rng,
                                  lower=0.0, upper=1.0)
                params = params.replace(**{name: x1})

        # -- first stage only: (rho, ell) for satellite-style groups
        if config.sample_correlation:
            for g in model.groups:
                if not g.estimate_correlation:
                    continue
                ep = model.error_params[g.name]
                gam = gammas[g.name]

                def corr_logf(rho: float, ell: float, g=g, gam=gam) -> float:
                    try:
                        cov = error_covariance(
                            g, ErrorParams(gamma=1.0, rho=rho, ell_days=ell))
                    except Exception:
                        return -np.inf
                    resp, base = g.require_response()
                    r = g.values - base - resp[:, prior.free_idx] @ alpha
                    if pi is not None and g.name in pi:
                        r = r - g.bias_design @ pi[g.name]
                    return -0.5 * (gam * cov.quad(r) + cov.logdet())

                if g.rho_fixed:
                    rho1 = ep.rho  # the covariance pins rho at 1; only ell is learned
                else:
                    rho1 = slice_sample(lambda x: corr_logf(x, ep.ell_days),
                                        ep.rho, config.slice_width_corr, rng, lower=0.0, upper=1.0)
                rate = ell_prior_rate(g.kind)
                ell1 = math.exp(slice_sample(
                    lambda z: corr_logf(rho1, math.exp(z)) + hyper.ell_shape * z - rate * math.exp(z),
                    math.log(max(ep.ell_days, 1e-6)), config.slice_width_log, rng))
                model.set_correlation(g.name, rho1, ell1)

        if it >= config.n_warmup and (it - config.n_warmup) % config.thin == 0:
            kept_alpha.append(alpha.copy())
            for g in model.groups:
                kept_gamma[g.name].append(gammas[g.name])
            for name in all_names:
                kept_params[name].append(params.value_of(name))
            if config.sample_correlation:
                for g in model.groups:
                    if g.estimate_correlation:
                        kept_rho[g.name].append(model.error_params[g.name].rho)
                        kept_ell[g.name].append(model.error_params[g.name].ell_days)

    return PosteriorSamples(
        alpha=np.array(kept_alpha),
        gamma={k: np.array(v) for k, v in kept_gamma.items()},
        cov_params={k: np.array(v) for k, v in kept_params.items()},
        rho={k: np.array(v) for k, v in kept_rho.items()},
        ell={k: np.array(v) for k, v in kept_ell.items()},
        free_idx=prior.free_idx.copy(),
        n_warmup=config.n_warmup,
        hmc=hmc_diag,
    )


def sample_hyper_scalar(name: str, hyper: Hyperpriors, rng: np.random.Generator) -> float:
    """Prior draw for a covariance parameter with no dependent blocks."""
    if name.startswith("tau"):
        return float(rng.gamma(hyper.tau_shape, 1.0 / hyper.tau_rate))
    return float(rng.beta(hyper.corr_a, hyper.corr_b))


def ell_prior_rate(kind: str) -> float:
    """Rate (1/days) of the Gamma(1, rate) prior on a group's length scale.

    In-situ series mix over hours-to-days, satellite error correlation
    decays within minutes, so the prior means are 1 day and 1 minute.
    """
    return 1.0 if kind == "insitu" else 1440.0


def two_stage_inference(
    model: InversionModel,
    stage1_config: GibbsConfig,
    stage2_config: GibbsConfig,
    rng_stage1: np.random.Generator,
    rng_stage2: np.random.Generator,
) -> tuple[PosteriorSamples, PosteriorSamples]:
    """Estimate (rho, ell) in a short run, fix them, then run the main chain."""
    stage1 = run_gibbs(model, replace(stage1_config, sample_correlation=True), rng_stage1)
    for g in model.groups:
        if g.estimate_correlation:
            model.set_correlation(g.name, float(np.mean(stage1.rho[g.name])),
                                  float(np.mean(stage1.ell[g.name])))
    stage2 = run_gibbs(model, replace(stage2_config, sample_correlation=False), rng_stage2)
    return stage1, stage2


def save_samples(path: str, samples: PosteriorSamples) -> None:
    """Persist draws to a compressed npz archive."""
    payload: dict[str, np.ndarray] = {
        "alpha": samples.alpha,
        "free_idx": samples.free_idx,
        "n_warmup": np.int64(samples.n_warmup),
    }
    for prefix, table in (("gamma", samples.gamma), ("covp", samples.cov_params),
                          ("rho", samples.rho), ("ell", samples.ell)):
        for key, arr in table.items():
            payload[f"{prefix}:{key}"] = arr
    np.savez_compressed(path, **payload)


def load_samples(path: str) -> PosteriorSamples:
    tables: dict[str, dict[str, FloatArray]] = {"gamma": {}, "covp": {}, "rho": {}, "ell": {}}
    with np.load(path) as data:
        alpha = data["alpha"]
        free_idx = data["free_idx"]
        n_warmup = int(data["n_warmup"])
        for name in data.files:
            if ":" in name:
                prefix, key = name.split(":", 1)
                tables[prefix][key] = data[name]
    return PosteriorSamples(alpha=alpha, gamma=tables["gamma"], cov_params=tables["covp"],
                            rho=tables["rho"], ell=tables["ell"], free_idx=free_idx,
                            n_warmup=n_warmup, hmc=HmcDiagnostics())


def effective_sample_size(x: FloatArray) -> float:
    """ESS from the initial positive sequence of autocorrelations."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4 or np.var(x) == 0.0:
        return float(n)
    centered = x - x.mean()
    acov = np.correlate(centered, centered, mode="full")[n - 1:] / n
    rho = acov / acov[0]
    # sum consecutive pairs until one goes non-positive
    total = 0.0
    for k in range(1, n - 1, 2):
        pair = rho[k] + rho[k + 1] if k + 1 < n else rho[k]
        if pair <= 0.0:
            break
        total += pair
    return float(n / (1.0 + 2.0 * total))

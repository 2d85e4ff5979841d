"""Hierarchical prior over the scaling coefficients.

The coefficient vector gets a zero-mean Gaussian prior whose covariance
is assembled from small independent blocks: per-region 2x2 blocks for
the (intercept, trend) pairs of GPP and respiration, 2x2 GPP-resp
blocks per (family, harmonic, region) for the seasonal terms, and
per-region temporally correlated blocks for the residual terms.  On top
of that sit (a) a fixed-term policy that pins weakly identified
elements to zero (their rows and columns are deleted rather than
carried around singular), (b) a pivot reparameterization of the linear
terms that moves the point of minimum prior variance to the middle of
the study interval, and (c) linear inequality constraints that keep
regional GPP non-positive, regional respiration non-negative, and all
residual scalings above -1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import numpy.typing as npt
import scipy.sparse as sp
from scipy import linalg, stats

from .decomposition import AlphaLayout, FluxBasisSet
from .grid import RegionPartition

FloatArray = npt.NDArray[np.float64]
BoolArray = npt.NDArray[np.bool_]

BIO_COMPONENTS = ("gpp", "resp")


class PriorError(ValueError):
    """Raised for ill-posed prior configurations."""


@dataclass(frozen=True)
class CovarianceParams:
    """Sampled covariance parameters (precisions and correlations)."""

    tau_beta: dict[str, float]
    tau_eps: dict[str, float]
    rho_beta_bio: float
    rho_eps_bio: float
    kappa_bio: float
    kappa_ocean: float

    def __post_init__(self) -> None:
        for d in (self.tau_beta, self.tau_eps):
            for c, v in d.items():
                if v <= 0.0:
                    raise PriorError(f"precision for {c!r} must be positive, got {v}")
        for name in ("rho_beta_bio", "rho_eps_bio", "kappa_bio", "kappa_ocean"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise PriorError(f"{name} must lie in [0, 1], got {v}")

    def replace(self, **kw) -> CovarianceParams:
        base = {
            "tau_beta": dict(self.tau_beta), "tau_eps": dict(self.tau_eps),
            "rho_beta_bio": self.rho_beta_bio, "rho_eps_bio": self.rho_eps_bio,
            "kappa_bio": self.kappa_bio, "kappa_ocean": self.kappa_ocean,
        }
        for k, v in kw.items():
            if k.startswith("tau_beta_"):
                base["tau_beta"][k.removeprefix("tau_beta_")] = v
            elif k.startswith("tau_eps_"):
                base["tau_eps"][k.removeprefix("tau_eps_")] = v
            else:
                base[k] = v
        return CovarianceParams(**base)

    def value_of(self, name: str) -> float:
        if name.startswith("tau_beta_"):
            return self.tau_beta[name.removeprefix("tau_beta_")]
        if name.startswith("tau_eps_"):
            return self.tau_eps[name.removeprefix("tau_eps_")]
        return getattr(self, name)


@dataclass(frozen=True)
class CovarianceStructure:
    """Fixed (non-sampled) covariance choices."""

    trend_variance: float = 1.0e4
    ocean_residual_inflation: float = 10.0
    jitter: float = 1.0e-10


@dataclass(frozen=True)
class Hyperpriors:
    """Hyperprior parameters (Gamma priors use shape/rate)."""

    tau_shape: float = 0.35428
    tau_rate: float = 0.01534
    corr_a: float = 1.0
    corr_b: float = 1.0
    gamma_shape: float = 1.62702
    gamma_rate: float = 2.17124
    ell_shape: float = 1.0
    bias_variance: float = 1.0

    def tau_logpdf(self, x: float) -> float:
        return float(stats.gamma.logpdf(x, self.tau_shape, scale=1.0 / self.tau_rate))

    def corr_logpdf(self, x: float) -> float:
        return float(stats.beta.logpdf(x, self.corr_a, self.corr_b))

    def gamma_scale_logpdf(self, x: float) -> float:
        return float(stats.gamma.logpdf(x, self.gamma_shape, scale=1.0 / self.gamma_rate))


def sample_covariance_params(layout: AlphaLayout, hyper: Hyperpriors, rng: np.random.Generator) -> CovarianceParams:
    """Draw covariance parameters from their hyperpriors."""
    return CovarianceParams(
        tau_beta={c: rng.gamma(hyper.tau_shape, 1.0 / hyper.tau_rate) for c in layout.components},
        tau_eps={c: rng.gamma(hyper.tau_shape, 1.0 / hyper.tau_rate) for c in layout.components},
        rho_beta_bio=rng.beta(hyper.corr_a, hyper.corr_b),
        rho_eps_bio=rng.beta(hyper.corr_a, hyper.corr_b),
        kappa_bio=rng.beta(hyper.corr_a, hyper.corr_b),
        kappa_ocean=rng.beta(hyper.corr_a, hyper.corr_b),
    )


# -- fixed-term policy --------------------------------------------------


@dataclass(frozen=True)
class FixedTermPolicy:
    """Which linear/seasonal scalings are pinned to zero.

    Ocean linear and seasonal terms are always fixed, and so are the
    GPP/respiration linear and seasonal terms in ocean regions and in
    the listed small land regions.  ``rlt_inferred`` frees the
    respiration linear terms (intercept and trend) in the remaining
    land regions, except those listed in ``rlt_always_fixed_regions``.
    Residual terms are never fixed.
    """

    rlt_inferred: bool = False
    small_land_regions: tuple[int, ...] = ()
    rlt_always_fixed_regions: tuple[int, ...] = ()


def fixed_mask(layout: AlphaLayout, partition: RegionPartition, policy: FixedTermPolicy) -> BoolArray:
    """Boolean mask over the full layout; True means pinned to zero."""
    ocean = set(partition.ocean_region_ids())
    small = set(policy.small_land_regions)
    if small & ocean:
        raise PriorError("small land regions must be land regions")
    mask = np.zeros(layout.n_total, dtype=bool)
    for i in range(layout.n_total):
        c, fam, _, r, _ = layout.describe(i)
        if fam == 6:
            continue
        if c == "ocean":
            mask[i] = True
        elif r in ocean or r in small:
            mask[i] = True
        elif c == "resp" and fam in (0, 1):
            if not policy.rlt_inferred or r in policy.rlt_always_fixed_regions:
                mask[i] = True
    return mask


# -- pivot reparameterization -------------------------------------------


class ReparamBlock(NamedTuple):
    component: str
    region: int
    matrix: FloatArray  # 2x2, maps target-space (intercept, trend) to original


@dataclass(frozen=True)
class Reparameterization:
    """Per-(component, land region) 2x2 transforms of the linear terms."""

    blocks: tuple[ReparamBlock, ...]
    pivot: float

    def block_for(self, component: str, region: int) -> FloatArray:
        for b in self.blocks:
            if b.component == component and b.region == region:
                return b.matrix
        return np.eye(2)

    def matrix_full(self, layout: AlphaLayout) -> FloatArray:
        """Dense transform over the full layout (identity elsewhere)."""
        p = np.eye(layout.n_total)
        for b in self.blocks:
            i0 = layout.index(b.component, 0, b.region)
            i1 = layout.index(b.component, 1, b.region)
            p[np.ix_([i0, i1], [i0, i1])] = b.matrix
        return p

    def apply(self, layout: AlphaLayout, alpha_star: FloatArray) -> FloatArray:
        out = np.asarray(alpha_star, dtype=float).copy()
        for b in self.blocks:
            i0 = layout.index(b.component, 0, b.region)
            i1 = layout.index(b.component, 1, b.region)
            out[[i0, i1]] = b.matrix @ out[[i0, i1]]
        return out


def build_reparameterization(
    basis: FluxBasisSet,
    pivot: float | None = None,
    components: tuple[str, ...] = BIO_COMPONENTS,
) -> Reparameterization:
    """Pivot the linear-term prior of each land region at ``pivot``.

    The transform makes the prior variance of the regional linear flux
    smallest at the pivot (the middle of the study interval by default)
    instead of at time zero.  Regions whose intercept aggregate is zero
    cannot be pivoted: exactly-zero aggregates with a nonzero trend
    raise, and negligibly small ones fall back to the identity with a
    warning.
    """
    t_m = basis.periods.midpoint if pivot is None else float(pivot)
    blocks: list[ReparamBlock] = []
    land = basis.partition.land_region_ids()
    for c in components:
        b0, b1 = basis.linear_aggregates(c)
        for r in land:
            num = b1[r - 1] * t_m
            den = b0[r - 1]
            if den == 0.0:
                if num == 0.0:
                    continue  # nothing to pivot
                raise PriorError(f"region {r} has zero intercept aggregate for {c!r}; cannot pivot")
            if abs(den) < 1e-12 * abs(num):
                warnings.warn(
                    f"region {r} intercept aggregate for {c!r} is negligible; skipping its pivot",
                    RuntimeWarning,
                )
                continue
            ratio = num / den
            if abs(ratio) < 1e-12:
                continue  # trend aggregate is negligible; variance is already flat
            blocks.append(ReparamBlock(c, r, np.array([[1.0 + ratio, -ratio], [0.0, 1.0]])))
    return Reparameterization(blocks=tuple(blocks), pivot=t_m)


# -- covariance blocks --------------------------------------------------


@dataclass
class _BlockSpec:
    name: str
    local_idx: npt.NDArray[np.int64]  # positions in the free vector
    depends: frozenset[str]
    build: Callable[[CovarianceParams], FloatArray]


def _toeplitz_corr(kappa: float, q: int) -> FloatArray:
    return linalg.toeplitz(kappa ** np.arange(q, dtype=float))


class AlphaPrior:
    """Assembled prior over the free coefficients.

    Exposes block-wise log density (so slice updates of one covariance
    parameter only recompute the blocks that depend on it), dense
    covariance/precision for the conditional updates, and unconstrained
    sampling.
    """

    def __init__(
        self,
        basis: FluxBasisSet,
        policy: FixedTermPolicy,
        structure: CovarianceStructure | None = None,
        pivot: float | None = None,
        ocean_residual_blocks: dict[int, FloatArray] | None = None,
    ) -> None:
        self.layout = basis.layout
        self.structure = structure or CovarianceStructure()
        self.policy = policy
        self.fixed = fixed_mask(self.layout, basis.partition, policy)
        self.free_idx = np.nonzero(~self.fixed)[0]
        self.reparam = build_reparameterization(basis, pivot=pivot)
        self._ocean_blocks = ocean_residual_blocks
        pos = np.full(self.layout.n_total, -1, dtype=np.int64)
        pos[self.free_idx] = np.arange(self.free_idx.size)
        self._pos = pos
        self.specs: list[_BlockSpec] = []
        self._build_specs(basis)
        covered = np.concatenate([s.local_idx for s in self.specs]) if self.specs else np.array([], dtype=np.int64)
        if not np.array_equal(np.sort(covered), np.arange(self.n_free)):
            raise PriorError("prior blocks do not partition the free coefficients")

    @property
    def n_free(self) -> int:
        return self.free_idx.size

    def _local(self, *global_idx: int) -> npt.NDArray[np.int64]:
        loc = self._pos[list(global_idx)]
        if np.any(loc < 0):
            raise PriorError("attempted to build a prior block on fixed elements")
        return loc

    def _build_specs(self, basis: FluxBasisSet) -> None:
        lay = self.layout
        st = self.structure
        q = lay.n_periods
        free = lambda i: not self.fixed[i]  # noqa: E731

        for c in BIO_COMPONENTS:
            for r in range(1, lay.n_regions + 1):
                i0, i1 = lay.index(c, 0, r), lay.index(c, 1, r)
                if not (free(i0) and free(i1)):
                    if free(i0) != free(i1):
                        raise PriorError("intercept and trend must be fixed together")
                    continue
                m = self.reparam.block_for(c, r)
                target = np.diag([1.0, st.trend_variance])
                cov = m @ target @ m.T
                self.specs.append(_BlockSpec(
                    name=f"linear_{c}_r{r}",
                    local_idx=self._local(i0, i1),
                    depends=frozenset(),
                    build=lambda _p, cov=cov: cov,
                ))
        c, cc = BIO_COMPONENTS
        k_shared = min(lay.n_harmonics[c], lay.n_harmonics[cc])
        k_max = max(lay.n_harmonics[c], lay.n_harmonics[cc])
        for fam in (2, 3, 4, 5):
            for k in range(1, k_max + 1):
                for r in range(1, lay.n_regions + 1):
                    if k <= k_shared:
                        ia = lay.index(c, fam, r, harmonic=k)
                        ib = lay.index(cc, fam, r, harmonic=k)
                        if not (free(ia) and free(ib)):
                            continue
                        def build(p: CovarianceParams) -> FloatArray:
                            va, vb = 1.0 / p.tau_beta[c], 1.0 / p.tau_beta[cc]
                            off = p.rho_beta_bio * np.sqrt(va * vb)
                            return np.array([[va, off], [off, vb]])
                        self.specs.append(_BlockSpec(
                            name=f"seasonal_j{fam}_k{k}_r{r}",
                            local_idx=self._local(ia, ib),
                            depends=frozenset({f"tau_beta_{c}", f"tau_beta_{cc}", "rho_beta_bio"}),
                            build=build,
                        ))
                    else:
                        # a harmonic only one bio component has: no partner to correlate with
                        solo = c if lay.n_harmonics[c] > lay.n_harmonics[cc] else cc
                        ia = lay.index(solo, fam, r, harmonic=k)
                        if not free(ia):
                            continue
                        self.specs.append(_BlockSpec(
                            name=f"seasonal_j{fam}_k{k}_r{r}",
                            local_idx=self._local(ia),
                            depends=frozenset({f"tau_beta_{solo}"}),
                            build=lambda p, solo=solo: np.array([[1.0 / p.tau_beta[solo]]]),
                        ))
        for r in range(1, lay.n_regions + 1):
            idx = [lay.index(c, 6, r, period=pq) for c in BIO_COMPONENTS for pq in range(1, q + 1)]
            def build_bio(p: CovarianceParams) -> FloatArray:
                vg, vr = 1.0 / p.tau_eps["gpp"], 1.0 / p.tau_eps["resp"]
                off = p.rho_eps_bio * np.sqrt(vg * vr)
                comp = np.array([[vg, off], [off, vr]])
                return np.kron(comp, _toeplitz_corr(p.kappa_bio, q))
            self.specs.append(_BlockSpec(
                name=f"residual_bio_r{r}",
                local_idx=self._local(*idx),
                depends=frozenset({"tau_eps_gpp", "tau_eps_resp", "rho_eps_bio", "kappa_bio"}),
                build=build_bio,
            ))
            idx_o = [lay.index("ocean", 6, r, period=pq) for pq in range(1, q + 1)]
            if self._ocean_blocks is not None:
                block = np.asarray(self._ocean_blocks[r], dtype=float)
                if block.shape != (q, q):
                    raise PriorError(f"supplied ocean residual block for region {r} must be ({q}, {q})")
                self.specs.append(_BlockSpec(
                    name=f"residual_ocean_r{r}",
                    local_idx=self._local(*idx_o),
                    depends=frozenset(),
                    build=lambda _p, block=block: block,
                ))
            else:
                def build_ocean(p: CovarianceParams) -> FloatArray:
                    return st.ocean_residual_inflation * _toeplitz_corr(p.kappa_ocean, q) / p.tau_eps["ocean"]
                self.specs.append(_BlockSpec(
                    name=f"residual_ocean_r{r}",
                    local_idx=self._local(*idx_o),
                    depends=frozenset({"tau_eps_ocean", "kappa_ocean"}),
                    build=build_ocean,
                ))

    # -- numerics -------------------------------------------------------

    def _factor(self, spec: _BlockSpec, params: CovarianceParams) -> FloatArray:
        cov = spec.build(params)
        try:
            return linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError:
            bumped = cov + self.structure.jitter * np.mean(np.diag(cov)) * np.eye(cov.shape[0])
            try:
                return linalg.cholesky(bumped, lower=True)
            except linalg.LinAlgError as exc:
                raise PriorError(f"prior block {spec.name} is not positive definite") from exc

    def parameter_names(self) -> list[str]:
        """Covariance parameters that at least one block depends on."""
        names: set[str] = set()
        for s in self.specs:
            names |= s.depends
        return sorted(names)

    def logpdf(self, alpha_free: FloatArray, params: CovarianceParams,
               depends_on: str | None = None) -> float:
        """Gaussian log density; restricted to dependent blocks if asked.

        With ``depends_on`` set the result omits blocks that do not
        involve that parameter (a constant during its slice update).
        """
        alpha_free = np.asarray(alpha_free, dtype=float)
        total = 0.0
        for spec in self.specs:
            if depends_on is not None and depends_on not in spec.depends:
                continue
            chol = self._factor(spec, params)
            x = alpha_free[spec.local_idx]
            w = linalg.solve_triangular(chol, x, lower=True)
            total += -0.5 * float(w @ w) - float(np.sum(np.log(np.diag(chol))))
            total += -0.5 * x.size * np.log(2.0 * np.pi)
        return total

    def covariance(self, params: CovarianceParams) -> FloatArray:
        out = np.zeros((self.n_free, self.n_free))
        for spec in self.specs:
            out[np.ix_(spec.local_idx, spec.local_idx)] = spec.build(params)
        return out

    def precision(self, params: CovarianceParams) -> FloatArray:
        out = np.zeros((self.n_free, self.n_free))
        for spec in self.specs:
            chol = self._factor(spec, params)
            inv = linalg.cho_solve((chol, True), np.eye(chol.shape[0]))
            out[np.ix_(spec.local_idx, spec.local_idx)] = inv
        return out

    def sample(self, params: CovarianceParams, rng: np.random.Generator) -> FloatArray:
        """Unconstrained draw of the free coefficients."""
        out = np.zeros(self.n_free)
        for spec in self.specs:
            chol = self._factor(spec, params)
            out[spec.local_idx] = chol @ rng.standard_normal(chol.shape[0])
        return out

    def expand(self, alpha_free: FloatArray) -> FloatArray:
        """Embed free coefficients into the full layout (fixed ones zero)."""
        full = np.zeros(self.layout.n_total)
        full[self.free_idx] = alpha_free
        return full

    def restrict(self, alpha_full: FloatArray) -> FloatArray:
        alpha_full = np.asarray(alpha_full, dtype=float)
        if np.any(alpha_full[self.fixed] != 0.0):
            raise PriorError("full coefficient vector is nonzero on fixed elements")
        return alpha_full[self.free_idx]


# -- inequality constraints ---------------------------------------------


class ConstraintLabel(NamedTuple):
    kind: str  # "sign" or "residual_floor"
    component: str
    region: int
    period: int


@dataclass(frozen=True)
class ConstraintSet:
    """Rows of ``offset + matrix @ alpha >= 0`` over the full layout."""

    matrix: sp.csr_matrix
    offset: FloatArray
    labels: tuple[ConstraintLabel, ...]

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    def reduced(self, fixed: BoolArray) -> tuple[FloatArray, FloatArray]:
        """Dense (matrix, offset) over the free coefficients."""
        free = np.nonzero(~np.asarray(fixed, dtype=bool))[0]
        return np.asarray(self.matrix[:, free].todense()), self.offset.copy()

    def violations(self, alpha_full: FloatArray, tol: float = 0.0) -> npt.NDArray[np.int64]:
        vals = self.offset + self.matrix @ np.asarray(alpha_full, dtype=float)
        return np.nonzero(vals < -tol)[0]


def build_constraints(basis: FluxBasisSet) -> ConstraintSet:
    """Sign constraints on regional GPP/respiration plus residual floors.

    For every (region, period): period-mean regional GPP stays
    non-positive, respiration stays non-negative, and each bio residual
    scaling stays above -1 (the flux of a residual element cannot flip
    sign past its bottom-up magnitude).  All R * Q * 4 rows are emitted
    even where the component is identically zero; such rows are
    trivially feasible and samplers skip their zero normals.
    """
    lay = basis.layout
    r_count, q_count = lay.n_regions, lay.n_periods
    n = lay.n_total
    rows: list[sp.csr_matrix] = []
    offsets: list[FloatArray] = []
    labels: list[ConstraintLabel] = []
    for c, sign in (("gpp", -1.0), ("resp", 1.0)):
        agg = basis.aggregation_matrix(c)  # (R*Q, dim_c)
        x0 = basis.x0_aggregates(c)
        block = sp.lil_matrix((r_count * q_count, n))
        off = lay.component_offset(c)
        dim = lay.component_dim(c)
        block[:, off:off + dim] = sign * agg
        rows.append(block.tocsr())
        offsets.append(sign * x0)
        labels.extend(ConstraintLabel("sign", c, r, q)
                      for r in range(1, r_count + 1) for q in range(1, q_count + 1))
    for c in BIO_COMPONENTS:
        idx = [lay.index(c, 6, r, period=q)
               for r in range(1, r_count + 1) for q in range(1, q_count + 1)]
        block = sp.csr_matrix(
            (np.ones(len(idx)), (np.arange(len(idx)), idx)), shape=(len(idx), n)
        )
        rows.append(block)
        offsets.append(np.ones(len(idx)))
        labels.extend(ConstraintLabel("residual_floor", c, r, q)
                      for r in range(1, r_count + 1) for q in range(1, q_count + 1))
    cs = ConstraintSet(matrix=sp.vstack(rows).tocsr(), offset=np.concatenate(offsets),
                       labels=tuple(labels))
    bad = cs.violations(np.zeros(n))
    if bad.size:
        worst = cs.labels[bad[0]]
        warnings.warn(
            f"bottom-up fluxes violate {bad.size} constraint(s) at alpha=0, first: {worst}",
            RuntimeWarning,
        )
    return cs

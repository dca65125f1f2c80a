"""Link probability functions for document pairs.

A link between two documents is a Bernoulli variable whose probability
depends on the documents' mean topic-assignment vectors zbar_d, zbar_dp.
Four families are supported:

  sigmoid       sigma(eta . (zbar_d o zbar_dp) + nu)
  exponential   exp(eta . (zbar_d o zbar_dp) + nu)
  probit        Phi(eta . (zbar_d o zbar_dp) + nu)
  gaussian      exp(-eta . (zbar_d - zbar_dp)**2 - nu)

where `o` is the elementwise product and Phi the standard normal CDF.
Under the mean-field variational distribution, the expected log link
probability is exact for the exponential and gaussian kinds and a
first-order approximation (evaluated at pi_bar = phibar_d o phibar_dp)
for sigmoid and probit.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_ndtr, ndtr

KINDS = ("sigmoid", "exponential", "probit", "gaussian")

# slack for admissibility checks; closed-form estimators satisfy the
# constraints exactly up to float rounding
_ADMISSIBLE_TOL = 1e-9

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


class PairEvalCounter:
    """Counts pair-level expected-log-link evaluations.

    Used to verify that inference work scales with the number of observed
    links rather than with the number of document pairs.
    """

    def __init__(self):
        self.count = 0

    def add(self, n=1):
        self.count += int(n)

    def reset(self):
        self.count = 0


#: global counter incremented by expected_log_link / expected_log_link_batch
pair_evals = PairEvalCounter()


@dataclass
class LinkParams:
    """Regression coefficients eta (length K), intercept nu, and kind.

    The exponential kind requires nu <= 0 and eta_i + nu <= 0 for every
    component, which is sufficient for the probability to stay in [0, 1]
    over all reachable covariates.  The gaussian kind requires eta >= 0
    and nu >= 0.
    """

    eta: np.ndarray
    nu: float
    kind: str

    def __post_init__(self):
        self.eta = np.asarray(self.eta, dtype=np.float64)
        self.nu = float(self.nu)
        if self.eta.ndim != 1:
            raise ValueError("eta must be a 1-D coefficient vector")
        if self.kind not in KINDS:
            raise ValueError(f"unknown link function kind: {self.kind!r}")

    def check_admissible(self):
        """Raise unless the probability stays within [0, 1] for all inputs.

        Enforced by every operation that evaluates a probability; the
        gradient helpers accept arbitrary coefficients.
        """
        if self.kind == "exponential":
            if self.nu > _ADMISSIBLE_TOL or np.any(self.eta + self.nu > _ADMISSIBLE_TOL):
                raise ValueError(
                    "inadmissible exponential link parameters: require "
                    "nu <= 0 and eta_i + nu <= 0")
        elif self.kind == "gaussian":
            if self.nu < -_ADMISSIBLE_TOL or np.any(self.eta < -_ADMISSIBLE_TOL):
                raise ValueError(
                    "inadmissible gaussian link parameters: require "
                    "eta >= 0 and nu >= 0")

    @property
    def num_topics(self):
        return self.eta.shape[0]


@dataclass
class PairStat:
    """Variational statistics of a document pair.

    pi_bar is the elementwise product of the two documents' mean
    assignment vectors.  The gaussian kind additionally needs the means
    themselves and the per-component variances of each document's mean
    assignment, Var(zbar_{d,i}) = (1/N_d^2) sum_n phi_{d,n,i} (1 - phi_{d,n,i}).
    """

    pi_bar: np.ndarray
    mean_d: np.ndarray | None = None
    mean_dp: np.ndarray | None = None
    var_d: np.ndarray | None = None
    var_dp: np.ndarray | None = None


def pair_stat(phi_d, counts_d, phi_dp, counts_dp, with_variance=False):
    """Build a PairStat from two documents' per-term phi matrices.

    phi_* are (T, K) arrays over distinct terms, counts_* the matching
    token counts; tokens of the same term share a phi row.
    """
    phi_d = np.asarray(phi_d, dtype=np.float64)
    phi_dp = np.asarray(phi_dp, dtype=np.float64)
    counts_d = np.asarray(counts_d, dtype=np.float64)
    counts_dp = np.asarray(counts_dp, dtype=np.float64)
    n_d = counts_d.sum()
    n_dp = counts_dp.sum()
    mean_d = counts_d @ phi_d / n_d
    mean_dp = counts_dp @ phi_dp / n_dp
    stat = PairStat(pi_bar=mean_d * mean_dp)
    if with_variance:
        stat.mean_d = mean_d
        stat.mean_dp = mean_dp
        stat.var_d = counts_d @ (phi_d * (1.0 - phi_d)) / n_d**2
        stat.var_dp = counts_dp @ (phi_dp * (1.0 - phi_dp)) / n_dp**2
    return stat


def log_sigmoid(x):
    """Numerically stable log(sigma(x)) = -log(1 + exp(-x))."""
    return -np.logaddexp(0.0, -np.asarray(x, dtype=np.float64))


def inverse_mills_ratio(x):
    """pdf(x) / Phi(x) for the standard normal, stable for large negative x."""
    x = np.asarray(x, dtype=np.float64)
    return np.exp(-0.5 * x * x - _LOG_SQRT_2PI - log_ndtr(x))


def link_probability(params, zbar_d, zbar_dp):
    """Probability of a link given the two mean assignment vectors."""
    params.check_admissible()
    zbar_d = np.asarray(zbar_d, dtype=np.float64)
    zbar_dp = np.asarray(zbar_dp, dtype=np.float64)
    if params.kind == "gaussian":
        diff = zbar_d - zbar_dp
        return float(np.exp(-params.eta @ (diff * diff) - params.nu))
    x = params.eta @ (zbar_d * zbar_dp) + params.nu
    if params.kind == "sigmoid":
        return float(expit(x))
    if params.kind == "probit":
        return float(ndtr(x))
    return float(np.exp(x))


def expected_log_link_batch(params, pi_bar=None, mean_a=None, mean_b=None,
                            var_a=None, var_b=None, count=True):
    """Expected log link probability for a batch of pairs.

    For sigmoid/probit/exponential, `pi_bar` is an (L, K) array of pair
    covariates.  For gaussian, the four mean/variance arrays are (L, K).
    Returns an (L,) array and counts L pair evaluations; count=False
    suppresses the counter for internal document-local backtracking
    checks, which are not corpus-level link scans.
    """
    if params.kind == "gaussian":
        if mean_a is None or mean_b is None or var_a is None or var_b is None:
            raise ValueError("gaussian expected log link requires means and variances")
        mean_a = np.atleast_2d(np.asarray(mean_a, dtype=np.float64))
        mean_b = np.atleast_2d(np.asarray(mean_b, dtype=np.float64))
        var_a = np.atleast_2d(np.asarray(var_a, dtype=np.float64))
        var_b = np.atleast_2d(np.asarray(var_b, dtype=np.float64))
        diff = mean_a - mean_b
        out = -params.nu - (diff * diff + var_a + var_b) @ params.eta
        if count:
            pair_evals.add(out.shape[0])
        return out
    if pi_bar is None:
        raise ValueError(f"{params.kind} expected log link requires pi_bar")
    pi_bar = np.atleast_2d(np.asarray(pi_bar, dtype=np.float64))
    x = pi_bar @ params.eta + params.nu
    if count:
        pair_evals.add(x.shape[0])
    if params.kind == "sigmoid":
        return log_sigmoid(x)
    if params.kind == "probit":
        return log_ndtr(x)
    return x


def expected_log_link(params, pair):
    """Expected log link probability of one pair under the variational fit.

    Exact for the exponential and gaussian kinds; first-order in pi_bar
    for sigmoid and probit.
    """
    if params.kind == "gaussian":
        if pair.var_d is None or pair.var_dp is None:
            raise ValueError("gaussian expected log link requires variance data")
        return float(expected_log_link_batch(
            params, mean_a=pair.mean_d, mean_b=pair.mean_dp,
            var_a=pair.var_d, var_b=pair.var_dp)[0])
    return float(expected_log_link_batch(params, pi_bar=pair.pi_bar)[0])


def gradient_coefficient(params, x):
    """Scalar factor c(x) such that d/d(pi_bar) E[log psi] = c(x) * eta.

    x is eta . pi_bar + nu; vectorized over x.  Not defined for the
    gaussian kind, whose gradient is not a function of pi_bar.
    """
    if params.kind == "sigmoid":
        return 1.0 - expit(x)
    if params.kind == "probit":
        return inverse_mills_ratio(x)
    if params.kind == "exponential":
        return np.ones_like(np.asarray(x, dtype=np.float64))
    raise ValueError("gradient_coefficient is undefined for the gaussian kind")


def grad_pi(params, pair):
    """Gradient of the expected log link probability with respect to pi_bar."""
    if params.kind == "gaussian":
        raise ValueError("grad_pi is undefined for the gaussian kind")
    x = params.eta @ pair.pi_bar + params.nu
    return float(gradient_coefficient(params, x)) * params.eta


def grad_phi_gaussian(params, mean_dp, mean_d_minus_n, n_d):
    """Gradient of the gaussian expected log link w.r.t. one token's phi.

    mean_d_minus_n = phibar_d - phi_{d,n} / N_d is the document mean with
    token n's contribution removed.  The gradient is

        (2 / N_d) * eta o (phibar_dp - mean_d_minus_n - 1 / (2 N_d))

    which matches central finite differences of the exact expectation.
    """
    if params.kind != "gaussian":
        raise ValueError("grad_phi_gaussian requires the gaussian kind")
    if n_d <= 0:
        raise ValueError("document must contain at least one token")
    mean_dp = np.asarray(mean_dp, dtype=np.float64)
    mean_d_minus_n = np.asarray(mean_d_minus_n, dtype=np.float64)
    return (2.0 / n_d) * params.eta * (mean_dp - mean_d_minus_n - 0.5 / n_d)

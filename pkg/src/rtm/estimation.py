"""Parameter estimation: topic matrix and link coefficients, plus the EM driver.

Topics are re-estimated from expected token-topic counts with pseudocount
smoothing.  Link coefficients are a one-class problem (only positive
links are observed), so each kind carries its own regularization:

  sigmoid/probit  gradient ascent on the expected log likelihood of the
                  observed links plus rho pseudo non-links placed at the
                  prior-mean covariate, optionally with an l2 penalty
  exponential     closed-form updates from a linear approximation of the
                  non-link log probability, exact at the covariate
                  extremes; always yields admissible parameters
  gaussian        moment matching of the per-component squared
                  differences, with the intercept set from the
                  probability mass budget and floored at zero

The EM driver alternates the coordinate-ascent E-step with these
updates until the bound stabilizes.
"""

import os

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit, log_ndtr

from . import inference, linkfn
from .inference import ModelParams

_GRAD_TOL = 1e-6
_MAX_ASCENT_ITERS = 500
_INITIAL_STEP = 0.1
_LOG_CLAMP = 1e-10


@dataclass
class RegularizationConfig:
    """Link regularization: rho pseudo non-links, l2 weight, beta smoothing.

    rho=None defaults to the number of observed links at fit time, which
    keeps positive and pseudo-negative evidence balanced across corpus
    sizes.  Sigmoid/probit fits require rho > 0 or lam > 0; without
    either the one-class gradients diverge.
    """

    rho: float | None = None
    lam: float = 0.0
    smoothing: float = 0.01

    def __post_init__(self):
        if self.rho is not None and self.rho < 0:
            raise ValueError("rho must be >= 0")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        if self.smoothing <= 0:
            raise ValueError("smoothing must be > 0")

    def resolved(self, num_links):
        rho = float(num_links) if self.rho is None else float(self.rho)
        return RegularizationConfig(rho=rho, lam=self.lam, smoothing=self.smoothing)


@dataclass
class SufficientStats:
    """Link-side expected sufficient statistics of a variational state."""

    num_links: int
    pi_bar_sum: np.ndarray
    pi_alpha: np.ndarray
    sq_diff_sum: np.ndarray


def prior_pair_covariate(alpha):
    """Expected pair covariate of two documents drawn from the prior."""
    alpha = np.asarray(alpha, dtype=np.float64)
    mean = alpha / alpha.sum()
    return mean * mean


def collect_stats(corpus, state, alpha):
    """Accumulate link sufficient statistics in fixed (sorted-link) order."""
    k = state.num_topics
    if corpus.num_links:
        l1, l2 = corpus.links[:, 0], corpus.links[:, 1]
        pi = state.phi_bar[l1] * state.phi_bar[l2]
        diff = state.phi_bar[l1] - state.phi_bar[l2]
        pi_sum = pi.sum(axis=0)
        sq_sum = (diff * diff).sum(axis=0)
    else:
        pi_sum = np.zeros(k)
        sq_sum = np.zeros(k)
    return SufficientStats(num_links=corpus.num_links, pi_bar_sum=pi_sum,
                           pi_alpha=prior_pair_covariate(alpha), sq_diff_sum=sq_sum)


def update_beta(corpus, state, smoothing):
    """Smoothed topic update: beta_{k,w} proportional to s + expected counts."""
    k = state.num_topics
    beta = np.full((k, corpus.num_terms), float(smoothing))
    for d in range(corpus.num_docs):
        terms, counts = corpus.doc(d)
        beta[:, terms] += (counts[:, None] * state.phi[d]).T
    return beta / beta.sum(axis=1, keepdims=True)


def link_regularizer(link, rho, lam, pi_alpha):
    """Additive regularization term of the link M-step objective.

    For the exponential kind this is the linearized non-link penalty,
    which is -inf at the admissibility boundary nu = 0.  The gaussian
    kind has no additive penalty (rho enters through its intercept
    update), so 0 is returned.
    """
    if link is None or link.kind == "gaussian":
        return 0.0
    penalty = -lam * float(link.eta @ link.eta)
    x_alpha = float(link.eta @ pi_alpha + link.nu)
    if link.kind == "sigmoid":
        return penalty + rho * float(linkfn.log_sigmoid(-x_alpha))
    if link.kind == "probit":
        return penalty + rho * float(log_ndtr(-x_alpha))
    # exponential: exact-at-the-extremes linear surrogate of log(1 - psi)
    with np.errstate(divide="ignore"):
        nu_lin = np.log1p(-np.exp(link.nu)) if link.nu < 0 else -np.inf
        eta_lin = np.where(link.eta + link.nu < 0,
                           np.log1p(-np.exp(link.eta + link.nu)) - nu_lin,
                           -np.inf)
    return penalty + rho * float(pi_alpha @ eta_lin + nu_lin)


def regularized_link_objective(kind, pi_bar_links, eta, nu, rho, lam, pi_alpha):
    """One-class M-step objective for the sigmoid and probit kinds."""
    x = pi_bar_links @ eta + nu
    if kind == "sigmoid":
        loglik = float(linkfn.log_sigmoid(x).sum())
    else:
        loglik = float(log_ndtr(x).sum())
    link = linkfn.LinkParams(eta=eta, nu=nu, kind=kind)
    return loglik + link_regularizer(link, rho, lam, pi_alpha)


def regularized_link_gradient(kind, pi_bar_links, eta, nu, rho, lam, pi_alpha):
    """Gradient of the objective above with respect to (eta, nu)."""
    x = pi_bar_links @ eta + nu
    x_alpha = float(eta @ pi_alpha + nu)
    if kind == "sigmoid":
        coeff = 1.0 - expit(x)
        reg_coeff = -rho * float(expit(x_alpha))
    else:
        coeff = linkfn.inverse_mills_ratio(x)
        reg_coeff = -rho * float(linkfn.inverse_mills_ratio(-x_alpha))
    grad_eta = coeff @ pi_bar_links + reg_coeff * pi_alpha - 2.0 * lam * eta
    grad_nu = float(coeff.sum()) + reg_coeff
    return grad_eta, grad_nu


def fit_link_sigmoid_probit(kind, pi_bar_links, reg, alpha, init=None):
    """Maximize the regularized one-class objective by backtracking ascent.

    Stops when the gradient infinity norm drops below 1e-6 or after 500
    iterations.  init parameters warm-start the search, which also makes
    each EM iteration's M-step an ascent step from the previous
    parameters.
    """
    if kind not in ("sigmoid", "probit"):
        raise ValueError(f"kind must be sigmoid or probit, got {kind!r}")
    if reg.rho is None:
        raise ValueError("rho must be resolved before fitting")
    if reg.rho <= 0 and reg.lam <= 0:
        raise ValueError(
            "one-class estimation requires rho > 0 or lam > 0; the "
            "unregularized objective is unbounded above")
    pi_alpha = prior_pair_covariate(alpha)
    k = pi_alpha.shape[0]
    pi_bar_links = np.asarray(pi_bar_links, dtype=np.float64).reshape(-1, k)
    if init is None:
        eta = np.zeros(k)
        nu = 0.0
    else:
        eta, nu = init.eta.copy(), init.nu

    current = regularized_link_objective(kind, pi_bar_links, eta, nu,
                                         reg.rho, reg.lam, pi_alpha)
    if not np.isfinite(current):
        raise FloatingPointError("non-finite link objective at start")
    for _ in range(_MAX_ASCENT_ITERS):
        g_eta, g_nu = regularized_link_gradient(kind, pi_bar_links, eta, nu,
                                                reg.rho, reg.lam, pi_alpha)
        if max(np.abs(g_eta).max(initial=0.0), abs(g_nu)) < _GRAD_TOL:
            break
        step = _INITIAL_STEP
        improved = False
        while step >= 1e-16:
            cand_eta = eta + step * g_eta
            cand_nu = nu + step * g_nu
            value = regularized_link_objective(kind, pi_bar_links, cand_eta,
                                               cand_nu, reg.rho, reg.lam, pi_alpha)
            if np.isfinite(value) and value >= current:
                eta, nu, current = cand_eta, cand_nu, value
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    return linkfn.LinkParams(eta=eta, nu=nu, kind=kind)


def fit_link_exponential(stats, rho):
    """Closed-form exponential-kind update; always admissible.

    nu = log(M - sum Pi) - log(rho (1 - sum pi_alpha) + M - sum Pi)
    eta = log Pi - log(Pi + rho pi_alpha) - nu
    with small clamps before the logarithms to guard boundary corpora.
    """
    if stats.num_links == 0:
        raise ValueError("exponential link update requires at least one link")
    m = float(stats.num_links)
    pi_sum = np.maximum(stats.pi_bar_sum, _LOG_CLAMP)
    residual = max(m - float(stats.pi_bar_sum.sum()), _LOG_CLAMP)
    nu = np.log(residual) - np.log(rho * (1.0 - float(stats.pi_alpha.sum())) + residual)
    eta = np.log(pi_sum) - np.log(pi_sum + rho * stats.pi_alpha) - nu
    return linkfn.LinkParams(eta=eta, nu=float(nu), kind="exponential")


def fit_link_gaussian(stats, rho, num_topics):
    """Moment-matching gaussian-kind update.

    eta matches the per-component observed squared differences; nu
    equates the probability mass budget with rho pseudo non-links and is
    floored at zero to keep the link probability within [0, 1].
    """
    if stats.num_links == 0:
        raise ValueError("gaussian link update requires at least one link")
    m = float(stats.num_links)
    sq = np.maximum(stats.sq_diff_sum, _LOG_CLAMP)
    eta = np.maximum(m / (2.0 * sq), 1e-8)
    nu = (np.log(0.5) + 0.5 * num_topics * np.log(np.pi)
          + np.log(rho + m) - np.log(m) - 0.5 * float(np.log(eta).sum()))
    return linkfn.LinkParams(eta=eta, nu=max(0.0, float(nu)), kind="gaussian")


def _fit_link(kind, corpus, state, alpha, reg, previous):
    stats = collect_stats(corpus, state, alpha)
    if stats.num_links == 0:
        return previous
    if kind == "exponential":
        return fit_link_exponential(stats, reg.rho)
    if kind == "gaussian":
        return fit_link_gaussian(stats, reg.rho, state.num_topics)
    l1, l2 = corpus.links[:, 0], corpus.links[:, 1]
    pi_bar_links = state.phi_bar[l1] * state.phi_bar[l2]
    return fit_link_sigmoid_probit(kind, pi_bar_links, reg, alpha, init=previous)


@dataclass
class FittedModel:
    """Estimated parameters plus fit metadata for persistence and prediction."""

    params: ModelParams
    kind: str
    config: dict
    elbo_trace: list = field(default_factory=list)
    seed: int | None = None


def em_objective(corpus, params, state, reg):
    """Bound plus regularization terms; the quantity the EM steps ascend.

    Adds the link regularizer and the smoothing prior on beta to the
    bound, so that both M-step updates are ascent steps of a single
    objective (exactly so for the exponential kind).
    """
    value = inference.elbo(corpus, params, state).total
    value += link_regularizer(params.link, reg.rho, reg.lam,
                              prior_pair_covariate(params.alpha))
    value += reg.smoothing * float(np.log(np.maximum(params.beta, 1e-300)).sum())
    return value


def fit(corpus, num_topics, kind="exponential", alpha_total=1.0,
        reg=None, seed=42, em_iters=30, tol=1e-6, e_step_tol=1e-6,
        max_sweeps=100, mode="sequential", init_noise=0.01, trace_stream=None):
    """Variational EM: alternate the E-step with the M-step updates.

    kind selects the link probability function, or None for a pure topic
    model that ignores links entirely.  The bound after every full EM
    iteration is recorded; iteration stops when its relative change
    drops below tol or em_iters is reached.  Deterministic given seed.

    alpha is symmetric with total mass alpha_total; it is held fixed.
    """
    if kind is not None and kind not in linkfn.KINDS:
        raise ValueError(f"unknown link function kind: {kind!r}")
    reg = (reg or RegularizationConfig()).resolved(corpus.num_links)
    alpha = np.full(num_topics, alpha_total / num_topics)

    rng = np.random.default_rng(seed)
    beta = 1.0 + rng.random((num_topics, corpus.num_terms))
    beta /= beta.sum(axis=1, keepdims=True)
    link = None
    if kind is not None:
        link = linkfn.LinkParams(eta=np.zeros(num_topics), nu=0.0, kind=kind)
    params = ModelParams(beta=beta, alpha=alpha, link=link)
    state = inference.init_state(corpus, num_topics, alpha, seed, noise=init_noise)

    config = {"num_topics": num_topics, "kind": kind, "alpha_total": alpha_total,
              "rho": reg.rho, "lam": reg.lam, "smoothing": reg.smoothing,
              "em_iters": em_iters, "tol": tol, "e_step_tol": e_step_tol,
              "max_sweeps": max_sweeps, "mode": mode}

    trace = []
    previous = None
    for _ in range(em_iters):
        state, _ = inference.run_e_step(corpus, params, state, tol=e_step_tol,
                                        max_sweeps=max_sweeps, mode=mode)
        beta = update_beta(corpus, state, reg.smoothing)
        link = params.link
        if kind is not None:
            link = _fit_link(kind, corpus, state, alpha, reg, link)
        params = ModelParams(beta=beta, alpha=alpha, link=link)
        value = inference.elbo(corpus, params, state).total
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite bound after EM iteration: {value}")
        trace.append(value)
        if trace_stream is not None:
            trace_stream.write(f"{value:.10f}\n")
        if previous is not None and abs(value - previous) <= tol * max(1.0, abs(previous)):
            break
        previous = value

    return FittedModel(params=params, kind=kind if kind is not None else "lda",
                       config=config, elbo_trace=trace, seed=seed)


# --- model persistence ----------------------------------------------------

_MAGIC = "rtm-model v1"
_BASELINE_KINDS = ("lda", "lda_regression", "unigram")


def save_model(model, path):
    """Write the plain-text model file (atomically: temp file then rename)."""
    params = model.params
    k, v = params.beta.shape
    alpha_total = float(params.alpha.sum())
    smoothing = float(model.config.get("smoothing", 0.01))
    if params.link is not None:
        nu = params.link.nu
        eta = params.link.eta
    else:
        nu = 0.0
        eta = np.zeros(k)
    with np.errstate(divide="ignore"):
        log_beta = np.where(params.beta > 0,
                            np.log(np.maximum(params.beta, 1e-300)), -np.inf)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(_MAGIC + "\n")
        fh.write(f"{k} {v} {model.kind} {alpha_total:.17g} {smoothing:.17g}\n")
        fh.write(f"{nu:.17g}\n")
        fh.write(" ".join(f"{x:.17g}" for x in eta) + "\n")
        for row in log_beta:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")
    os.replace(tmp, path)


def load_model(path):
    """Read a model file back; validates the header and row normalization."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != _MAGIC:
        raise ValueError(f"{path}: not a model file (missing '{_MAGIC}' header)")
    header = lines[1].split()
    if len(header) != 5:
        raise ValueError(f"{path}: malformed model header")
    k, v, kind = int(header[0]), int(header[1]), header[2]
    alpha_total, smoothing = float(header[3]), float(header[4])
    if kind not in linkfn.KINDS + _BASELINE_KINDS:
        raise ValueError(f"{path}: unknown model kind {kind!r}")
    nu = float(lines[2])
    eta = np.array([float(x) for x in lines[3].split()])
    if eta.shape != (k,):
        raise ValueError(f"{path}: expected {k} link coefficients")
    if len(lines) < 4 + k:
        raise ValueError(f"{path}: expected {k} topic rows")
    log_beta = np.array([[float(x) for x in lines[4 + i].split()] for i in range(k)])
    if log_beta.shape != (k, v):
        raise ValueError(f"{path}: topic matrix shape mismatch")
    beta = np.exp(log_beta)
    rows = beta.sum(axis=1)
    if np.any(np.abs(rows - 1.0) > 1e-8):
        raise ValueError(f"{path}: topic rows not normalized within 1e-8")
    beta /= rows[:, None]

    if kind in linkfn.KINDS:
        link = linkfn.LinkParams(eta=eta, nu=nu, kind=kind)
    elif kind == "lda_regression":
        link = linkfn.LinkParams(eta=eta, nu=nu, kind="sigmoid")
    else:
        link = None
    alpha = np.full(k, alpha_total / k)
    params = ModelParams(beta=beta, alpha=alpha, link=link)
    return FittedModel(params=params, kind=kind,
                       config={"alpha_total": alpha_total, "smoothing": smoothing})

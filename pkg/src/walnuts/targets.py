"""Target densities with hand-coded gradients.

Every model counts its gradient evaluations so samplers can be compared at
equal cost. Log densities are unnormalized.
"""

import csv
import math
import threading

import numpy as np


class TargetModel:
    """Base class for an unnormalized log density on R^dim.

    Subclasses implement ``_log_density`` and ``_log_density_and_grad``.
    The public methods validate input; :meth:`evaluate` is the unchecked
    fast path used inside integrators.
    """

    name = "target"

    def __init__(self, dim):
        if int(dim) < 1:
            raise ValueError("dim must be a positive integer")
        self.dim = int(dim)
        self._grad_evals = 0
        self._lock = threading.Lock()

    @property
    def param_names(self):
        return [f"theta{k + 1}" for k in range(self.dim)]

    @property
    def grad_evals(self):
        return self._grad_evals

    def reset_counter(self):
        with self._lock:
            self._grad_evals = 0

    def _count(self, n=1):
        with self._lock:
            self._grad_evals += n

    def _check(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.dim,):
            raise ValueError(f"expected a vector of length {self.dim}, got shape {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise ValueError("log density is only defined for finite input")
        return theta

    def log_density(self, theta):
        return float(self._log_density(self._check(theta)))

    def grad_log_density(self, theta):
        theta = self._check(theta)
        self._count()
        return self._log_density_and_grad(theta)[1]

    def log_density_and_grad(self, theta):
        theta = self._check(theta)
        self._count()
        logp, grad = self._log_density_and_grad(theta)
        return float(logp), grad

    def evaluate(self, theta):
        """Unchecked (log density, gradient); counts one gradient evaluation."""
        self._count()
        return self._log_density_and_grad(theta)

    def initial_point(self, rng):
        """A reasonable starting point for a chain."""
        return np.zeros(self.dim)

    def _log_density(self, theta):
        return self._log_density_and_grad(theta)[0]

    def _log_density_and_grad(self, theta):
        raise NotImplementedError

    def __getstate__(self):
        state = self.__dict__.copy()
        del state["_lock"]
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self._lock = threading.Lock()


def log_density(model, theta):
    return model.log_density(theta)


def grad_log_density(model, theta):
    return model.grad_log_density(theta)


class GaussianTarget(TargetModel):
    """Centered Gaussian with independent coordinates.

    Args:
        dim: Dimension.
        scales: Optional per-coordinate standard deviations; identity
            precision when omitted.
    """

    def __init__(self, dim, scales=None):
        super().__init__(dim)
        if scales is None:
            self.scales = None
            self.name = "std_gaussian"
        else:
            scales = np.broadcast_to(np.asarray(scales, dtype=float), (self.dim,)).copy()
            if np.any(scales <= 0) or not np.all(np.isfinite(scales)):
                raise ValueError("scales must be finite and positive")
            self.scales = scales
            self._precision = 1.0 / scales**2
            self.name = "gaussian"

    @property
    def precision_diag(self):
        if self.scales is None:
            return np.ones(self.dim)
        return self._precision.copy()

    def _log_density(self, theta):
        if self.scales is None:
            return -0.5 * float(theta @ theta)
        return -0.5 * float(theta @ (self._precision * theta))

    def _log_density_and_grad(self, theta):
        if self.scales is None:
            return -0.5 * float(theta @ theta), -theta
        g = -self._precision * theta
        return 0.5 * float(theta @ g), g

    def draw(self, rng, size=None):
        shape = (self.dim,) if size is None else (size, self.dim)
        z = rng.standard_normal(shape)
        return z if self.scales is None else z * self.scales

    def initial_point(self, rng):
        return self.draw(rng)


class FunnelTarget(TargetModel):
    """Neal's funnel: omega ~ N(0, 9) and x_k | omega ~ N(0, exp(omega)).

    The parameter vector is (omega, x_1, ..., x_d), so ``dim = d + 1``.
    """

    name = "funnel"
    omega_scale_sq = 9.0

    def __init__(self, d=10):
        if int(d) < 1:
            raise ValueError("d must be a positive integer")
        self.d = int(d)
        super().__init__(self.d + 1)

    @property
    def param_names(self):
        return ["omega"] + [f"x{k + 1}" for k in range(self.d)]

    @property
    def mode(self):
        theta = np.zeros(self.dim)
        theta[0] = -0.5 * self.omega_scale_sq * self.d
        return theta

    def _log_density(self, theta):
        omega = theta[0]
        x = theta[1:]
        return -omega**2 / (2 * self.omega_scale_sq) - 0.5 * float(x @ x) * np.exp(-omega) - 0.5 * self.d * omega

    def _log_density_and_grad(self, theta):
        omega = theta[0]
        x = theta[1:]
        inv_var = np.exp(-omega)
        sq = float(x @ x)
        logp = -omega**2 / (2 * self.omega_scale_sq) - 0.5 * sq * inv_var - 0.5 * self.d * omega
        grad = np.empty(self.dim)
        grad[0] = -omega / self.omega_scale_sq + 0.5 * sq * inv_var - 0.5 * self.d
        grad[1:] = -x * inv_var
        return logp, grad

    def draw(self, rng, size=None):
        n = 1 if size is None else size
        omega = math.sqrt(self.omega_scale_sq) * rng.standard_normal(n)
        x = rng.standard_normal((n, self.d)) * np.exp(0.5 * omega)[:, None]
        out = np.column_stack([omega, x])
        return out[0] if size is None else out

    def initial_point(self, rng):
        return self.draw(rng)


def funnel_curvature(omega):
    """Spectral radius and condition number of the funnel's negative Hessian
    in the x block and the omega prior, as functions of omega."""
    if not math.isfinite(omega):
        raise ValueError("omega must be finite")
    radius = max(1.0 / 9.0, math.exp(-omega))
    condition = 9.0 * max(math.exp(omega), math.exp(-omega))
    return radius, condition


class StockWatsonTarget(TargetModel):
    """Stochastic-volatility trend model for a series y_1..y_T.

    Latent random walks z (length T-1), x and tau (length T) with

        z_t ~ N(z_{t-1}, s^2),  x_t ~ N(x_{t-1}, s^2),
        tau_t ~ N(tau_{t-1}, exp(z_{t-1})),  y_t ~ N(tau_t, exp(x_t)),

    and 1/s^2 ~ Gamma(5, rate 0.5). Sampling happens on standardized
    innovations: the parameter vector is

        [z_1, (z_t - z_{t-1})/s ...,
         x_1, (x_t - x_{t-1})/s ...,
         tau_1, (tau_t - tau_{t-1}) exp(-z_{t-1}/2) ...,
         log s^2]

    of length 3T. The initial states z_1, x_1, tau_1 get N(0, init_scale^2)
    priors.
    """

    name = "stock_watson"
    gamma_shape = 5.0
    gamma_rate = 0.5

    def __init__(self, y, init_scale=10.0):
        y = np.asarray(y, dtype=float).ravel()
        if y.size < 2:
            raise ValueError("need at least two observations")
        if not np.all(np.isfinite(y)):
            raise ValueError("observations must be finite")
        self.y = y
        self.T = y.size
        self.init_scale = float(init_scale)
        super().__init__(3 * self.T)

    @property
    def param_names(self):
        T = self.T
        names = ["z1"] + [f"z_innov{t}" for t in range(2, T)]
        names += ["x1"] + [f"x_innov{t}" for t in range(2, T + 1)]
        names += ["tau1"] + [f"tau_innov{t}" for t in range(2, T + 1)]
        return names + ["log_sigma_sq"]

    def split(self, params):
        T = self.T
        return params[: T - 1], params[T - 1 : 2 * T - 1], params[2 * T - 1 : 3 * T - 1], params[3 * T - 1]

    def latents(self, params):
        """Map innovations to the latent paths (z, x, tau, sigma^2)."""
        params = np.asarray(params, dtype=float)
        if params.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} parameters")
        eta_z, eta_x, eta_tau, log_s2 = self.split(params)
        s = math.exp(0.5 * log_s2)
        z = eta_z[0] + s * np.concatenate([[0.0], np.cumsum(eta_z[1:])])
        x = eta_x[0] + s * np.concatenate([[0.0], np.cumsum(eta_x[1:])])
        tau = eta_tau[0] + np.concatenate([[0.0], np.cumsum(np.exp(0.5 * z) * eta_tau[1:])])
        return z, x, tau, math.exp(log_s2)

    def params_from_latents(self, z, x, tau, sigma_sq):
        """Inverse of :meth:`latents`."""
        z = np.asarray(z, dtype=float)
        x = np.asarray(x, dtype=float)
        tau = np.asarray(tau, dtype=float)
        if z.shape != (self.T - 1,) or x.shape != (self.T,) or tau.shape != (self.T,):
            raise ValueError("latent paths have the wrong lengths")
        s = math.sqrt(sigma_sq)
        eta_z = np.concatenate([[z[0]], np.diff(z) / s])
        eta_x = np.concatenate([[x[0]], np.diff(x) / s])
        eta_tau = np.concatenate([[tau[0]], np.diff(tau) * np.exp(-0.5 * z)])
        return np.concatenate([eta_z, eta_x, eta_tau, [math.log(sigma_sq)]])

    def _log_density_and_grad(self, params):
        eta_z, eta_x, eta_tau, log_s2 = self.split(params)
        s = float(np.exp(0.5 * log_s2))
        inv_s2 = float(np.exp(-log_s2))
        inv_v0 = 1.0 / self.init_scale**2

        steps_z = np.concatenate([[0.0], np.cumsum(eta_z[1:])])
        steps_x = np.concatenate([[0.0], np.cumsum(eta_x[1:])])
        z = eta_z[0] + s * steps_z
        x = eta_x[0] + s * steps_x
        vol = np.exp(0.5 * z)
        tau = eta_tau[0] + np.concatenate([[0.0], np.cumsum(vol * eta_tau[1:])])
        resid = self.y - tau
        prec = np.exp(-x)

        # log s^2 carries the Gamma prior on 1/s^2 plus the Jacobian of 1/s^2 -> log s^2
        logp = -self.gamma_shape * log_s2 - self.gamma_rate * inv_s2
        logp -= 0.5 * inv_v0 * (eta_z[0] ** 2 + eta_x[0] ** 2 + eta_tau[0] ** 2)
        logp -= 0.5 * (eta_z[1:] @ eta_z[1:] + eta_x[1:] @ eta_x[1:] + eta_tau[1:] @ eta_tau[1:])
        logp += np.sum(-0.5 * x - 0.5 * resid**2 * prec)

        g_x = -0.5 + 0.5 * resid**2 * prec
        g_tau = resid * prec
        tail_tau = np.cumsum(g_tau[::-1])[::-1]
        g_z = 0.5 * vol * eta_tau[1:] * tail_tau[1:]
        tail_z = np.cumsum(g_z[::-1])[::-1]
        tail_x = np.cumsum(g_x[::-1])[::-1]

        grad_z = np.empty_like(eta_z)
        grad_z[0] = tail_z[0] - inv_v0 * eta_z[0]
        grad_z[1:] = s * tail_z[1:] - eta_z[1:]
        grad_x = np.empty_like(eta_x)
        grad_x[0] = tail_x[0] - inv_v0 * eta_x[0]
        grad_x[1:] = s * tail_x[1:] - eta_x[1:]
        grad_tau = np.empty_like(eta_tau)
        grad_tau[0] = tail_tau[0] - inv_v0 * eta_tau[0]
        grad_tau[1:] = vol * tail_tau[1:] - eta_tau[1:]
        grad_log_s2 = -self.gamma_shape + self.gamma_rate * inv_s2
        grad_log_s2 += 0.5 * s * (g_z @ steps_z + g_x @ steps_x)

        return float(logp), np.concatenate([grad_z, grad_x, grad_tau, [grad_log_s2]])

    def initial_point(self, rng):
        params = np.zeros(self.dim)
        _, eta_x, eta_tau, _ = self.split(params)
        eta_x[0] = math.log(np.var(self.y) + 1e-8)
        eta_tau[0] = float(np.mean(self.y))
        params[3 * self.T - 1] = math.log(0.1)
        return params


def gamma_log_prior(precision, shape=5.0, rate=0.5):
    """Gamma(shape, rate) log density of the precision, up to a constant."""
    return (shape - 1.0) * math.log(precision) - rate * precision


def stock_watson_log_posterior(target, params):
    params = np.asarray(params, dtype=float)
    if params.shape != (target.dim,):
        raise ValueError(f"expected {target.dim} parameters, got shape {params.shape}")
    return target.log_density(params)


def stock_watson_simulate(T, sigma, seed, z1=-1.0, x1=-1.0, tau1=3.0):
    """Draw a synthetic series from the generative model.

    Returns:
        y and a dict with the latent paths ``z``, ``x``, ``tau``.
    """
    if int(T) < 2:
        raise ValueError("T must be at least 2")
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    T = int(T)
    rng = np.random.default_rng(seed)
    z = z1 + sigma * np.concatenate([[0.0], np.cumsum(rng.standard_normal(T - 2))])
    x = x1 + sigma * np.concatenate([[0.0], np.cumsum(rng.standard_normal(T - 1))])
    tau = tau1 + np.concatenate([[0.0], np.cumsum(np.exp(0.5 * z) * rng.standard_normal(T - 1))])
    y = tau + np.exp(0.5 * x) * rng.standard_normal(T)
    return y, {"z": z, "x": x, "tau": tau}


def load_series_csv(path):
    """Read a one-column CSV with header ``y``."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["y"]:
            raise ValueError(f"{path}: expected a single column with header 'y'")
        values = [float(row[0]) for row in reader if row and row[0].strip()]
    return np.array(values)

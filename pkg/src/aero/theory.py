"""Executable checks for the redirection guarantees.

* optimal redirection under a norm budget (closed-form norm-ball projection)
* bounded total redirected energy
* equilibrium of cooperating convex quadratic agents
* Robbins-Monro convergence of online gradient descent on a (drifting) quadratic
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RedirectionProblem:
    disturbance: np.ndarray
    budget: float              # epsilon_max
    resistance: float = 1.0    # R

    def __post_init__(self):
        self.disturbance = np.asarray(self.disturbance, dtype=np.float64)
        if not self.budget > 0:
            raise ValueError(f"norm budget must be > 0, got {self.budget}")
        if not self.resistance > 0:
            raise ValueError(f"resistance must be > 0, got {self.resistance}")
        if not np.all(np.isfinite(self.disturbance)):
            raise ValueError("disturbance must be finite")

    def cost(self, rho):
        rho = np.asarray(rho, dtype=np.float64)
        return np.sum((self.disturbance - rho) ** 2, axis=-1) / self.resistance


def optimal_redirection(problem):
    """argmin ||eps - rho||^2 / R subject to ||rho|| <= eps_max."""
    eps = problem.disturbance
    norm = float(np.linalg.norm(eps))
    if norm <= problem.budget:
        return eps.copy()
    return problem.budget * eps / norm


def project_ball(v, radius):
    norm = np.linalg.norm(v)
    return v if norm <= radius else v * (radius / norm)


def projected_gradient_redirection(problem, iters=200):
    """Iterative reference solution: projected gradient descent from the origin."""
    rho = np.zeros_like(problem.disturbance)
    step = problem.resistance / 4.0
    for _ in range(iters):
        grad = -2.0 * (problem.disturbance - rho) / problem.resistance
        rho = project_ball(rho - step * grad, problem.budget)
    return rho


def sample_ball(rng, n, dim, radius):
    """``n`` points uniform in the ``dim``-ball of given radius."""
    d = rng.standard_normal((n, dim))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / dim)
    return d * r[:, None]


@dataclass
class EnergyLedger:
    energies: list
    budget: float
    slack: float = 1.0   # C

    @classmethod
    def from_redirections(cls, redirections, budget, slack=1.0):
        return cls([float(np.dot(r, r)) for r in redirections], budget, slack)


def verify_energy_bound(ledger):
    """Check sum_t ||rho_t||^2 <= C * T * eps_max^2."""
    T = len(ledger.energies)
    if T < 1:
        raise ValueError("energy ledger needs at least one step")
    if any(e < 0 for e in ledger.energies):
        raise ValueError("energies must be non-negative")
    lhs = math.fsum(ledger.energies)
    unit = T * ledger.budget ** 2
    rhs = ledger.slack * unit
    return {"lhs": lhs, "rhs": rhs, "holds": lhs <= rhs, "T": T,
            "min_slack": lhs / unit}


@dataclass
class AgentProblem:
    """L(rho) = 0.5 rho^T A rho - b^T rho with A symmetric positive definite."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        n = len(self.b)
        if self.A.shape != (n, n):
            raise ValueError(f"A must be {n}x{n}")
        if not np.allclose(self.A, self.A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.A).max())):
            raise ValueError("A must be symmetric")
        eig = np.linalg.eigvalsh(self.A)
        if eig[0] <= 0:
            raise ValueError(f"A must be positive definite (min eigenvalue {eig[0]:.3g})")
        self.eig_min, self.eig_max = float(eig[0]), float(eig[-1])

    def loss(self, rho):
        return 0.5 * rho @ self.A @ rho - self.b @ rho

    def grad(self, rho):
        return self.A @ rho - self.b


@dataclass
class EquilibriumResult:
    strategies: list
    iterations: int
    grad_norms: list
    converged: bool


def solve_multiagent_equilibrium(problems, tol=1e-8, max_iter=10_000):
    """Simultaneous per-agent gradient descent until every gradient norm is below ``tol``."""
    if tol < 0:
        raise ValueError("tol must be >= 0")
    rhos = [np.zeros_like(p.b) for p in problems]
    steps = [2.0 / (p.eig_min + p.eig_max) for p in problems]
    it = 0
    norms = [float(np.linalg.norm(p.grad(r))) for p, r in zip(problems, rhos)]
    while max(norms) >= tol and it < max_iter:
        rhos = [r - s * p.grad(r) for p, r, s in zip(problems, rhos, steps)]
        norms = [float(np.linalg.norm(p.grad(r))) for p, r in zip(problems, rhos)]
        it += 1
    return EquilibriumResult(rhos, it, norms, max(norms) < tol)


def random_spd(rng, dim, eig_low=1.0, eig_high=4.0):
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    eig = rng.uniform(eig_low, eig_high, dim)
    a = (q * eig) @ q.T
    return 0.5 * (a + a.T)


def best_line_decrease(problem, rho, direction):
    """Largest loss decrease available along ``direction`` from ``rho`` (exact line minimum)."""
    g = problem.grad(rho)
    curv = direction @ problem.A @ direction
    return float((g @ direction) ** 2 / (2.0 * curv))


@dataclass
class PowerSchedule:
    """eta_t = eta0 / t**power; Robbins-Monro requires eta0 > 0 and 1/2 < power <= 1."""

    eta0: float = 1.0
    power: float = 1.0

    def __post_init__(self):
        if not self.eta0 > 0:
            raise ValueError("eta0 must be > 0 (sum of step sizes must diverge)")
        if not 0.5 < self.power <= 1.0:
            raise ValueError("power must lie in (1/2, 1] for sum eta = inf and sum eta^2 < inf")

    def __call__(self, t):
        return self.eta0 / t ** self.power


@dataclass
class DriftScenario:
    """Quadratic L_t(rho) = 0.5 (rho - c_t)^T A (rho - c_t) with ||c_{t+1} - c_t|| <= drift."""

    dim: int = 2
    curvature: tuple = (1.0, 2.0)
    drift: float = 0.0
    noise_std: float = 0.0
    start: tuple = None
    center: tuple = None


@dataclass
class ConvergenceRun:
    gaps: np.ndarray           # L_t(rho_t) - L_t*
    running_average: np.ndarray
    final_iterate: np.ndarray
    final_minimizer: np.ndarray

    def head_tail(self, fraction=0.1):
        k = max(1, int(len(self.gaps) * fraction))
        return float(self.gaps[:k].mean()), float(self.gaps[-k:].mean())


def adaptive_convergence_run(scenario, schedule, T, rng=None):
    """Online gradient descent with (optionally noisy) gradients on a drifting quadratic."""
    if not isinstance(schedule, PowerSchedule):
        raise TypeError("schedule must be a PowerSchedule")
    if T < 1:
        raise ValueError("T must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    dim = scenario.dim
    a = np.resize(np.asarray(scenario.curvature, dtype=np.float64), dim)
    center = (np.zeros(dim) if scenario.center is None
              else np.asarray(scenario.center, dtype=np.float64))
    rho = (np.ones(dim) if scenario.start is None
           else np.asarray(scenario.start, dtype=np.float64).copy())
    steps = schedule(np.arange(1, T + 1, dtype=np.float64))
    noise = (scenario.noise_std * rng.standard_normal((T, dim)) if scenario.noise_std
             else np.zeros((T, dim)))
    if scenario.drift:
        moves = rng.standard_normal((T, dim))
        moves *= scenario.drift / np.linalg.norm(moves, axis=1, keepdims=True)
        centers = center + np.vstack([np.zeros(dim), np.cumsum(moves, axis=0)])
    else:
        centers = np.broadcast_to(center, (T + 1, dim))
    # iterates are recorded so the loss gaps can be evaluated in one pass
    path = np.empty((T, dim))
    for t in range(T):
        path[t] = rho
        rho = rho - steps[t] * (a * (rho - centers[t]) + noise[t])
    diff = path - centers[:T]
    gaps = 0.5 * np.sum(a * diff * diff, axis=1)
    avg = np.cumsum(gaps) / np.arange(1, T + 1)
    return ConvergenceRun(gaps, avg, rho, np.array(centers[T]))


# ---------------------------------------------------------------------------
# property suites used by ``aero theory-check``


@dataclass
class Tolerances:
    redirection: float = 1e-6
    equilibrium: float = 1e-8
    convergence: float = 1e-3
    regret_ratio: float = 0.2


@dataclass
class SuiteResult:
    theorem: str
    passed: bool
    params: dict = field(default_factory=dict)
    measured: dict = field(default_factory=dict)
    seconds: float = 0.0


def check_optimal_redirection(tol=1e-6, n_problems=1000, n_probes=10_000, seed=0):
    rng = np.random.default_rng(seed)
    worst_gap, violations, beaten = 0.0, 0, 0
    start = time.perf_counter()
    for _ in range(n_problems):
        dim = int(rng.integers(1, 9))
        eps = rng.standard_normal(dim) * rng.uniform(0.1, 5.0)
        budget = float(rng.uniform(0.1, 3.0))
        prob = RedirectionProblem(eps, budget, float(rng.uniform(0.1, 10.0)))
        rho = optimal_redirection(prob)
        ref = projected_gradient_redirection(prob)
        worst_gap = max(worst_gap, float(np.max(np.abs(rho - ref))))
        if np.linalg.norm(rho) > budget * (1 + 1e-12):
            violations += 1
        probes = sample_ball(rng, n_probes, dim, budget)
        if np.any(prob.cost(probes) < prob.cost(rho)):
            beaten += 1
    passed = worst_gap <= tol and violations == 0 and beaten == 0
    return SuiteResult("optimal_redirection", passed,
                       {"problems": n_problems, "probes": n_probes, "tol": tol},
                       {"max_oracle_gap": worst_gap, "budget_violations": violations,
                        "problems_beaten_by_probe": beaten},
                       time.perf_counter() - start)


def check_energy_bound(T=1000, budget=1.0, seed=0):
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    reds = []
    for _ in range(T):
        eps = rng.standard_normal(4) * rng.uniform(0.0, 3.0)
        reds.append(optimal_redirection(RedirectionProblem(eps, budget)))
    report = verify_energy_bound(EnergyLedger.from_redirections(reds, budget, 1.0))
    return SuiteResult("energy_bound", bool(report["holds"]),
                       {"T": T, "budget": budget, "C": 1.0},
                       {"lhs": report["lhs"], "rhs": report["rhs"],
                        "min_slack": report["min_slack"]},
                       time.perf_counter() - start)


def check_equilibrium(tol=1e-8, k=5, dim=4, n_directions=100, seed=0):
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    agents = [AgentProblem(random_spd(rng, dim), rng.standard_normal(dim)) for _ in range(k)]
    res = solve_multiagent_equilibrium(agents, tol=tol, max_iter=2000)
    closed = [np.linalg.solve(a.A, a.b) for a in agents]
    dist = max(float(np.max(np.abs(r - c))) for r, c in zip(res.strategies, closed))
    line_gain = 0.0
    for a, r in zip(agents, res.strategies):
        for d in rng.standard_normal((n_directions, dim)):
            line_gain = max(line_gain, best_line_decrease(a, r, d))
    passed = res.converged and dist < max(tol, 1e-300) and line_gain <= max(tol, 0.0)
    return SuiteResult("multiagent_equilibrium", bool(passed),
                       {"agents": k, "dim": dim, "tol": tol},
                       {"iterations": res.iterations, "max_grad_norm": max(res.grad_norms),
                        "max_closed_form_gap": dist, "max_line_decrease": line_gain},
                       time.perf_counter() - start)


def check_adaptive_convergence(tol=1e-3, ratio=0.2, T_static=10_000, T_noisy=50_000, seeds=10):
    start = time.perf_counter()
    sched = PowerSchedule(1.0, 1.0)
    static = adaptive_convergence_run(DriftScenario(dim=2, curvature=(0.8, 1.5)), sched, T_static)
    dist = float(np.linalg.norm(static.final_iterate - static.final_minimizer))
    ratios = []
    for s in range(seeds):
        run = adaptive_convergence_run(DriftScenario(dim=2, curvature=(0.8, 1.5), noise_std=1.0),
                                       sched, T_noisy, np.random.default_rng(s))
        head, tail = run.head_tail(0.1)
        ratios.append(tail / head)
    passed = dist < tol and max(ratios) < ratio
    return SuiteResult("adaptive_convergence", bool(passed),
                       {"T_static": T_static, "T_noisy": T_noisy, "seeds": seeds,
                        "tol": tol, "ratio": ratio},
                       {"static_distance": dist, "max_tail_head_ratio": max(ratios)},
                       time.perf_counter() - start)


def run_all(tolerances=None):
    tol = tolerances or Tolerances()
    return [
        check_optimal_redirection(tol.redirection),
        check_adaptive_convergence(tol.convergence, tol.regret_ratio),
        check_energy_bound(),
        check_equilibrium(tol.equilibrium),
    ]

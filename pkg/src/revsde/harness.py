"""Experiment harness: desk-scale reproductions with CSV output.

Five experiments, each a pure function of its config (benchmark wall-clock
columns excepted):

  gradient-error   optimise-then-discretise vs discretise-then-optimise
                   gradients per (method, step size) on a fixed small
                   neural test problem.
  convergence      coupled coarse/fine strong and weak error estimators
                   for the reversible Heun method, with log-log slope fits.
  brownian-bench   access-pattern timings of the interval tree against the
                   virtual Brownian tree, minimum over repeats.
  stability        boundedness classification of the linear test equation
                   over a sweep of step-scaled rates.
  fit-toy          fits a small neural SDE to Ornstein-Uhlenbeck marginal
                   moments through the reversible adjoint, with oracle
                   spot-checks.

CSV files use full round-trip float precision (`repr`). The CLI exposes
one subcommand per experiment; values in a `key = value` config file
override command-line flags, which override defaults.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
import time
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .brownian import BrownianInterval, VirtualBrownianTree
from .fields import AnalyticField, MLPField, NeuralField
from .solvers import (
    SolveConfig,
    baseline_solve,
    continuous_adjoint_solve,
    revheun_adjoint_solve,
    revheun_solve,
    stability_probe,
    unrolled_backprop,
)

DEFAULT_STEP_SIZES = [1.0, 0.25, 0.0625, 0.015625]
DEFAULT_CONVERGENCE_STEPS = [2.0 ** -k for k in range(3, 8)]


@dataclass
class ExperimentConfig:
    seed: int = 0
    batch: int = 256
    paths: int = 10_000
    step_sizes: list = dataclass_field(default_factory=lambda: list(DEFAULT_STEP_SIZES))
    methods: list = dataclass_field(
        default_factory=lambda: ["midpoint", "heun", "reversible_heun"])
    cases: list = dataclass_field(
        default_factory=lambda: ["additive", "multiplicative"])
    subintervals: list = dataclass_field(default_factory=lambda: [10, 100, 1000])
    patterns: list = dataclass_field(
        default_factory=lambda: ["sequential", "doubly_sequential", "random"])
    repeats: int = 32
    cache_capacity: int = 128
    vbt_eps: float = 2.0 ** -16
    dims: int = 1
    iters: int = 500
    lr: float = 0.02
    weak_paths: int = 500_000
    weak_step_sizes: list = dataclass_field(
        default_factory=lambda: [0.25, 0.125, 0.0625])
    out: str | None = None

    def __post_init__(self):
        for name in ("step_sizes", "methods", "cases", "subintervals",
                     "patterns"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be non-empty")


def _tree_seed(config_seed, run_index):
    # Distinct deterministic entropy per (config seed, run).
    return (config_seed * 1_000_003 + run_index) & (2 ** 63 - 1)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v
                             for v in row])


# ----------------------------------------------------------------------
# gradient-error
# ----------------------------------------------------------------------

def build_gradient_test_problem(seed, x=8, w=4, batch=8, width=8):
    """Small neural SDE: tanh-headed drift, sigmoid-headed diffusion."""
    rng = np.random.default_rng(seed)
    field = NeuralField(
        MLPField(x, [width], x, final_activation="tanh", rng=rng),
        MLPField(x, [width], x * w, final_activation="sigmoid", rng=rng),
    )
    z0 = rng.standard_normal((batch, x))
    return field, z0


def relative_l1(grad_a, params_a, grad_b, params_b):
    """sum |a - b| / max(sum |a|, sum |b|) over the stacked gradients."""
    num = np.abs(grad_a - grad_b).sum() + np.abs(params_a - params_b).sum()
    den = max(np.abs(grad_a).sum() + np.abs(params_a).sum(),
              np.abs(grad_b).sum() + np.abs(params_b).sum())
    return float(num / den)


def run_gradient_error(config: ExperimentConfig):
    """Rows of (method, step_size, rel_l1_error) on the fixed test problem."""
    known = {"midpoint", "heun", "reversible_heun"}
    bad = set(config.methods) - known
    if bad:
        raise ValueError(f"unknown methods for gradient-error: {sorted(bad)}")
    field, z0 = build_gradient_test_problem(config.seed)
    batch, x = z0.shape
    w = field.noise_dim
    cot = np.ones((batch, x))
    rows = []
    run = 0
    for method in config.methods:
        for dt in config.step_sizes:
            tree = BrownianInterval(1.0, _tree_seed(config.seed, run),
                                    dims=w, batch=batch,
                                    cache_capacity=config.cache_capacity)
            run += 1
            cfg = SolveConfig(method, dt, 1.0, tree)
            if method == "reversible_heun":
                g_od, p_od = revheun_adjoint_solve(field, z0, cfg, cot)
            else:
                g_od, p_od = continuous_adjoint_solve(method, field, z0, cfg, cot)
            g_do, p_do = unrolled_backprop(method, field, z0, cfg, cot)
            rows.append({"method": method, "step_size": dt,
                         "rel_l1_error": relative_l1(g_od, p_od, g_do, p_do)})
    return rows


# ----------------------------------------------------------------------
# convergence
# ----------------------------------------------------------------------

def anharmonic_field():
    """dy = sin(y) dt + dW: additive noise, scalar state."""
    return AnalyticField(
        1, 1,
        drift=lambda t, z: np.sin(z),
        diffusion=lambda t, z: np.ones((z.shape[0], 1, 1)),
        drift_vjp_z=lambda t, z, c: np.cos(z) * c,
        diffusion_vjp_z=lambda t, z, c: np.zeros_like(z),
    )


def cross_cosine_field():
    """Two channels with swapped cosine diffusion.

    The two diffusion vector fields do not commute, so strong order drops
    to one half; a single scalar channel would be commutative and converge
    at order one instead.
    """
    def diffusion(t, z):
        out = np.zeros((z.shape[0], 2, 2))
        out[:, 0, 0] = np.cos(z[:, 1])
        out[:, 1, 1] = np.cos(z[:, 0])
        return out

    def diffusion_vjp_z(t, z, c):
        return np.stack([-c[:, 1, 1] * np.sin(z[:, 0]),
                         -c[:, 0, 0] * np.sin(z[:, 1])], axis=1)

    return AnalyticField(
        2, 2,
        drift=lambda t, z: np.sin(z),
        diffusion=diffusion,
        drift_vjp_z=lambda t, z, c: np.cos(z) * c,
        diffusion_vjp_z=diffusion_vjp_z,
    )


def _check_coupling(tree, h, n_coarse, fine_per_coarse=10, tol=1e-12):
    """Coarse increments must telescope out of the fine queries.

    The fine grid was queried first, so every coarse query decomposes into
    its fine leaves and matches their ordered sum bitwise -- except the
    final step, whose interval coincides with an existing right-spine node
    and is only equal to rounding.
    """
    hf = h / fine_per_coarse
    for k in range(n_coarse):
        coarse = tree.query(k * h, (k + 1) * h if k + 1 < n_coarse else tree.t1)
        total = None
        for j in range(fine_per_coarse):
            i = k * fine_per_coarse + j
            lo = i * hf
            hi = (i + 1) * hf if i + 1 < n_coarse * fine_per_coarse else tree.t1
            q = tree.query(lo, hi)
            total = q if total is None else total + q
        if k + 1 < n_coarse:
            if not np.array_equal(total, coarse):
                raise RuntimeError(
                    f"fine increments do not telescope at coarse step {k}")
        elif np.abs(total - coarse).max() > tol:
            raise RuntimeError("final coarse step inconsistent beyond rounding")


def _convergence_case(case, h, paths, seed):
    if case == "additive":
        field, z0 = anharmonic_field(), np.ones((paths, 1))
    elif case == "multiplicative":
        field, z0 = cross_cosine_field(), np.ones((paths, 2))
    else:
        raise ValueError(f"unknown convergence case {case!r}")
    dims = field.noise_dim
    tree = BrownianInterval(1.0, seed, dims=dims, batch=paths)
    # Fine reference first (ordinary Heun at h/10), coarse second: the
    # coarse queries then decompose exactly into the fine-grid nodes.
    fine, _ = baseline_solve("heun", field, z0,
                             SolveConfig("heun", h / 10.0, 1.0, tree))
    coarse, _ = revheun_solve(field, z0,
                              SolveConfig("reversible_heun", h, 1.0, tree))
    _check_coupling(tree, h, round(1.0 / h))
    yc, yf = coarse.z, fine.z
    strong = math.sqrt(float(np.mean(np.sum((yc - yf) ** 2, axis=1))))
    weak_mean = float(np.abs(np.mean(yc - yf, axis=0)).max())
    weak_second = float(np.abs(np.mean(yc ** 2 - yf ** 2, axis=0)).max())
    return strong, weak_mean, weak_second


def fit_slope(hs, errors):
    """OLS slope of log2(error) on log2(h), with the residual sum."""
    lx = np.log2(np.asarray(hs, dtype=float))
    ly = np.log2(np.asarray(errors, dtype=float))
    coeffs, residuals, *_ = np.polyfit(lx, ly, 1, full=True)
    resid = float(residuals[0]) if len(residuals) else 0.0
    return float(coeffs[0]), resid


def run_convergence(config: ExperimentConfig):
    """Per-(case, h) error estimators plus fitted slopes.

    Rows carry the strong error (root mean square terminal gap to the h/10
    reference) and the coupled weak errors of the first and second
    moments. Strong slopes are fitted on config.step_sizes at config.paths
    for every case; the weak slopes are fitted for the additive case on a
    separate sweep over config.weak_step_sizes at config.weak_paths, where
    the first-moment signal clears the coupled Monte Carlo noise floor
    (at desk-scale path counts it does not for very small steps).
    Returns (rows, slopes); slopes carry OLS fits with residual sums.
    """
    if config.paths < 1000:
        print("warning: fewer than 1000 paths; estimators will be noisy",
              file=sys.stderr)
    hs = sorted(config.step_sizes, reverse=True)
    rows, slopes = [], []
    run = 0
    for case in config.cases:
        strong_errs = []
        for h in hs:
            s, em, ev = _convergence_case(
                case, h, config.paths, _tree_seed(config.seed, 7000 + run))
            run += 1
            rows.append({"case": case, "sweep": "strong", "h": h,
                         "paths": config.paths, "strong_err": s,
                         "weak_mean_err": em, "weak_second_err": ev})
            strong_errs.append(s)
        slope, resid = fit_slope(hs, strong_errs)
        slopes.append({"case": case, "metric": "strong", "slope": slope,
                       "residual": resid})
        if case != "additive":
            continue
        weak_hs = sorted(config.weak_step_sizes, reverse=True)
        weak = {"weak_mean": [], "weak_second": []}
        for h in weak_hs:
            s, em, ev = _convergence_case(
                case, h, config.weak_paths, _tree_seed(config.seed, 9000 + run))
            run += 1
            rows.append({"case": case, "sweep": "weak", "h": h,
                         "paths": config.weak_paths, "strong_err": s,
                         "weak_mean_err": em, "weak_second_err": ev})
            weak["weak_mean"].append(em)
            weak["weak_second"].append(ev)
        for metric, vals in weak.items():
            slope, resid = fit_slope(weak_hs, vals)
            slopes.append({"case": case, "metric": metric, "slope": slope,
                           "residual": resid})
    return rows, slopes


# ----------------------------------------------------------------------
# brownian-bench
# ----------------------------------------------------------------------

def _bench_order(pattern, n, seed):
    forward = list(range(n))
    if pattern == "sequential":
        return forward
    if pattern == "doubly_sequential":
        return forward + forward[::-1]
    if pattern == "random":
        rng = np.random.default_rng(seed)
        order = np.arange(n)
        rng.shuffle(order)
        return order.tolist()
    raise ValueError(f"unknown access pattern {pattern!r}")


def run_brownian_bench(config: ExperimentConfig):
    """Minimum-of-repeats timings for both Brownian stores.

    Each repeat rebuilds the structure (construction and dyadic prebuild
    excluded from timing), replays the same query order, and records the
    wall time of the query loop alone. A checksum over all returned values
    verifies repeats are bitwise deterministic.
    """
    rows = []
    for n in config.subintervals:
        bounds = [(k / n, (k + 1) / n if k + 1 < n else 1.0) for k in range(n)]
        for pattern in config.patterns:
            order = _bench_order(pattern, n, config.seed)
            for structure in ("brownian_interval", "virtual_brownian_tree"):
                times, checksums, stats = [], [], None
                for _ in range(config.repeats):
                    if structure == "brownian_interval":
                        store = BrownianInterval(
                            1.0, _tree_seed(config.seed, n), dims=config.dims,
                            batch=config.batch,
                            cache_capacity=config.cache_capacity)
                        store.prebuild_dyadic(1.0 / n, config.cache_capacity)
                        store.reset_stats()
                    else:
                        store = VirtualBrownianTree(
                            1.0, _tree_seed(config.seed, n), dims=config.dims,
                            batch=config.batch, tol=config.vbt_eps)
                    checksum = 0.0
                    start = time.perf_counter()
                    for k in order:
                        checksum += float(store.query(*bounds[k]).sum())
                    times.append(time.perf_counter() - start)
                    checksums.append(checksum)
                    if structure == "brownian_interval":
                        stats = store.stats()
                row = {"structure": structure, "pattern": pattern,
                       "subintervals": n, "batch": config.batch,
                       "repeats": config.repeats,
                       "min_time_s": min(times),
                       "deterministic": len(set(checksums)) == 1,
                       "cache_hits": stats.cache_hits if stats else "",
                       "cache_misses": stats.cache_misses if stats else "",
                       "mean_traverse_edges": (stats.mean_traverse_edges
                                               if stats else "")}
                rows.append(row)
    return rows


# ----------------------------------------------------------------------
# stability
# ----------------------------------------------------------------------

STABILITY_POINTS = (
    # (re, im, steps, expected bounded): imaginary segment interior vs
    # real/off-axis points. |lam h| = 1 is excluded: the closed form has a
    # repeated root there and grows linearly.
    [(0.0, 0.0, 1000, True)]
    + [(0.0, b, 100_000, True) for b in (0.25, -0.25, 0.5, -0.5, 0.75, -0.75,
                                         0.99, -0.99)]
    + [(-0.5, 0.0, 1000, False), (-0.1, 0.0, 100_000, False),
       (-0.1, 0.5, 1000, False), (-0.05, 0.9, 1000, False)]
)


def run_stability(config: ExperimentConfig):
    """Boundedness classification of the step map on y' = lam y."""
    rows = []
    for re, im, steps, expected in STABILITY_POINTS:
        res = stability_probe(complex(re, im), steps)
        rows.append({"re_lambda_h": re, "im_lambda_h": im, "n_steps": steps,
                     "max_abs_z": res.max_abs_z,
                     "max_abs_zhat": res.max_abs_zhat,
                     "bounded": res.bounded, "expected_bounded": expected})
    return rows


# ----------------------------------------------------------------------
# fit-toy
# ----------------------------------------------------------------------

OU_RHO, OU_KAPPA, OU_CHI = 0.02, 0.1, 0.4
TOY_HORIZON = 8.0
TOY_DT = 0.25
TOY_CHECKPOINTS = 8


def simulate_ou_moments(seed, paths=8192, dt=1.0 / 32):
    """Empirical first/second moments of the drifted OU process.

    dY = (rho t - kappa Y) dt + chi dW from Y0 = 0, sampled at the toy
    problem's checkpoint times.
    """
    n = round(TOY_HORIZON / dt)
    per = round(TOY_HORIZON / TOY_CHECKPOINTS / dt)
    rng = np.random.default_rng(seed)
    y = np.zeros(paths)
    means, seconds = [], []
    for i in range(n):
        t = i * dt
        y = y + (OU_RHO * t - OU_KAPPA * y) * dt \
            + OU_CHI * math.sqrt(dt) * rng.standard_normal(paths)
        if (i + 1) % per == 0:
            means.append(float(y.mean()))
            seconds.append(float(np.mean(y ** 2)))
    return np.array(means), np.array(seconds)


def _toy_model(seed):
    rng = np.random.default_rng(seed)
    return NeuralField(
        MLPField(1, [8], 1, final_activation="identity", rng=rng),
        MLPField(1, [8], 1, final_activation="sigmoid", rng=rng),
    )


def _toy_loss_and_cotangents(z_at_checkpoints, means, seconds):
    loss = 0.0
    cots = []
    batch = z_at_checkpoints[0].shape[0]
    for z, m, v in zip(z_at_checkpoints, means, seconds):
        dm = float(z.mean() - m)
        dv = float(np.mean(z ** 2) - v)
        loss += dm * dm + dv * dv
        cots.append(2.0 * dm / batch + 4.0 * dv * z / batch)
    return loss, cots


def _toy_gradients(field, config, tree, means, seconds, oracle=False):
    """Loss and its parameter gradient for one noise realization.

    Forward solve stores only the checkpoint states; cotangents from the
    moment loss at each checkpoint enter the backward pass as interior
    contributions.
    """
    steps_per = round(TOY_HORIZON / TOY_CHECKPOINTS / TOY_DT)
    n = round(TOY_HORIZON / TOY_DT)
    cfg = SolveConfig("reversible_heun", TOY_DT, TOY_HORIZON, tree,
                      store_trajectory=True)
    term, traj = revheun_solve(field, np.zeros((config.batch, 1)), cfg)
    z_checks = [traj[(k + 1) * steps_per].z for k in range(TOY_CHECKPOINTS)]
    loss, cots = _toy_loss_and_cotangents(z_checks, means, seconds)
    interior = {(k + 1) * steps_per: cots[k]
                for k in range(TOY_CHECKPOINTS - 1)}
    if oracle:
        _, gp = unrolled_backprop("reversible_heun", field,
                                  np.zeros((config.batch, 1)), cfg, cots[-1],
                                  checkpoint_cotangents=interior)
    else:
        _, gp = revheun_adjoint_solve(field, np.zeros((config.batch, 1)), cfg,
                                      cots[-1], checkpoint_cotangents=interior)
    return loss, gp


def fit_toy_sde(config: ExperimentConfig, grad_check_every=100):
    """Fit the toy neural SDE to the OU moments; returns learning-curve rows.

    One fixed noise realization (a single Brownian tree, whose repeated
    queries are bitwise stable) serves every iteration, so the fit is a
    deterministic sample-average problem and a zero learning rate yields a
    bitwise-flat loss curve. Adam updates with weight clipping after every
    step. Every `grad_check_every` iterations the adjoint gradient is
    checked against the unrolled oracle and the relative L1 gap recorded.
    """
    means, seconds = simulate_ou_moments(config.seed)
    field = _toy_model(config.seed)
    field.clip()
    tree = BrownianInterval(TOY_HORIZON, _tree_seed(config.seed, 50_000),
                            dims=1, batch=config.batch,
                            cache_capacity=config.cache_capacity)
    params = field.get_params()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    rows = []
    for it in range(config.iters):
        loss, grad = _toy_gradients(field, config, tree, means, seconds)
        if not math.isfinite(loss):
            raise RuntimeError(f"non-finite loss at iteration {it}")
        gap = ""
        if grad_check_every and it % grad_check_every == 0:
            _, grad_oracle = _toy_gradients(field, config, tree, means,
                                            seconds, oracle=True)
            num = np.abs(grad - grad_oracle).sum()
            den = max(np.abs(grad).sum(), np.abs(grad_oracle).sum(), 1e-300)
            gap = float(num / den)
        if config.lr > 0.0:
            m = beta1 * m + (1.0 - beta1) * grad
            v = beta2 * v + (1.0 - beta2) * grad * grad
            mhat = m / (1.0 - beta1 ** (it + 1))
            vhat = v / (1.0 - beta2 ** (it + 1))
            params = params - config.lr * mhat / (np.sqrt(vhat) + eps)
            field.set_params(params)
            field.clip()
            params = field.get_params()
        rows.append({"iteration": it, "loss": loss, "oracle_rel_l1_gap": gap})
    return rows


# ----------------------------------------------------------------------
# acceptance checks for --check
# ----------------------------------------------------------------------

def check_gradient_error(rows):
    failures = []
    by_method = {}
    for r in rows:
        by_method.setdefault(r["method"], []).append(r)
    for method, rs in by_method.items():
        rs.sort(key=lambda r: -r["step_size"])
        errs = [r["rel_l1_error"] for r in rs]
        if method == "reversible_heun":
            for r in rs:
                if r["rel_l1_error"] > 1e-12:
                    failures.append(
                        f"reversible_heun error {r['rel_l1_error']:.3e} at "
                        f"dt={r['step_size']} exceeds 1e-12")
        else:
            for a, b in zip(errs, errs[1:]):
                if b >= a:
                    failures.append(f"{method} errors not decreasing")
            for a, b in zip(errs, errs[1:]):
                if a / b < 2.0:
                    failures.append(
                        f"{method} error ratio {a / b:.2f} below 2 per "
                        f"step refinement")
    return failures


def check_convergence(slopes):
    bands = {("additive", "strong"): (0.8, 1.2),
             ("additive", "weak_mean"): (1.6, 2.4),
             ("additive", "weak_second"): (1.6, 2.4),
             ("multiplicative", "strong"): (0.4, 0.7)}
    failures = []
    for s in slopes:
        band = bands.get((s["case"], s["metric"]))
        if band and not (band[0] <= s["slope"] <= band[1]):
            failures.append(
                f"{s['case']}/{s['metric']} slope {s['slope']:.3f} outside "
                f"[{band[0]}, {band[1]}]")
    return failures


def check_brownian_bench(rows):
    failures = []
    by_key = {}
    for r in rows:
        by_key[(r["pattern"], r["subintervals"], r["structure"])] = r
    for (pattern, n, structure), r in by_key.items():
        if not r["deterministic"]:
            failures.append(f"{structure} nondeterministic on {pattern}/{n}")
    key_bi = ("doubly_sequential", 100, "brownian_interval")
    key_vbt = ("doubly_sequential", 100, "virtual_brownian_tree")
    if key_bi in by_key and key_vbt in by_key:
        speedup = by_key[key_vbt]["min_time_s"] / by_key[key_bi]["min_time_s"]
        if speedup < 1.5:
            failures.append(
                f"doubly-sequential speedup {speedup:.2f} below 1.5")
    return failures


def check_stability(rows):
    return [f"lambda*h = {r['re_lambda_h']}+{r['im_lambda_h']}j classified "
            f"bounded={r['bounded']}, expected {r['expected_bounded']}"
            for r in rows if r["bounded"] != r["expected_bounded"]]


def check_fit_toy(rows):
    failures = []
    first, last = rows[0]["loss"], rows[-1]["loss"]
    if last > 0.2 * first:
        failures.append(f"final loss {last:.4g} above 20% of initial {first:.4g}")
    for r in rows:
        gap = r["oracle_rel_l1_gap"]
        if gap != "" and gap > 1e-12:
            failures.append(
                f"gradient gap {gap:.3e} at iteration {r['iteration']}")
    return failures


# ----------------------------------------------------------------------
# CLI
# ----------------------------------------------------------------------

def _parse_floats(text):
    return [float(v) for v in text.split(",") if v]


def _parse_ints(text):
    return [int(v) for v in text.split(",") if v]


def _parse_names(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def load_config_file(path):
    """Line-oriented `key = value` pairs; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, val = (part.strip() for part in line.split("=", 1))
            values[key.replace("-", "_")] = val
    return values


_LIST_PARSERS = {
    "step_sizes": _parse_floats,
    "weak_step_sizes": _parse_floats,
    "methods": _parse_names,
    "cases": _parse_names,
    "subintervals": _parse_ints,
    "patterns": _parse_names,
}


def build_experiment_config(args):
    """Merge defaults < flags < config file; returns (config, set keys)."""
    cfg = ExperimentConfig()
    overrides = {}
    for key in vars(cfg):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "config", None):
        for key, raw in load_config_file(args.config).items():
            if key in _LIST_PARSERS:
                overrides[key] = _LIST_PARSERS[key](raw)
            elif key in ("seed", "batch", "paths", "weak_paths",
                         "cache_capacity", "repeats", "dims", "iters"):
                overrides[key] = int(raw)
            elif key in ("vbt_eps", "lr"):
                overrides[key] = float(raw)
            elif key == "out":
                overrides[key] = raw
            else:
                raise ValueError(f"unknown config key {key!r}")
    for key, val in overrides.items():
        setattr(cfg, key, val)
    cfg.__post_init__()
    return cfg, set(overrides)


def _add_common_flags(parser):
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=str, default=None)
    parser.add_argument("--batch", type=int, default=None)
    parser.add_argument("--steps", dest="step_sizes", type=_parse_floats,
                        default=None, help="comma-separated step sizes")
    parser.add_argument("--paths", type=int, default=None)
    parser.add_argument("--cache-capacity", dest="cache_capacity", type=int,
                        default=None)
    parser.add_argument("--vbt-eps", dest="vbt_eps", type=float, default=None)
    parser.add_argument("--config", type=str, default=None,
                        help="key=value file; overrides flags")
    parser.add_argument("--check", action="store_true",
                        help="exit nonzero if the acceptance band fails")


def _dict_rows(rows):
    header = list(rows[0].keys())
    return header, [[r[k] for k in header] for r in rows]


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="revsde",
        description="Reversible-solver SDE experiments (CSV output)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradient-error", help="adjoint-vs-oracle gradient gap")
    _add_common_flags(p)
    p.add_argument("--methods", type=_parse_names, default=None)

    p = sub.add_parser("convergence", help="strong/weak order estimation")
    _add_common_flags(p)
    p.add_argument("--cases", type=_parse_names, default=None)
    p.add_argument("--weak-paths", dest="weak_paths", type=int, default=None)

    p = sub.add_parser("brownian-bench", help="noise-store speed benchmark")
    _add_common_flags(p)
    p.add_argument("--subintervals", type=_parse_ints, default=None)
    p.add_argument("--patterns", type=_parse_names, default=None)
    p.add_argument("--repeats", type=int, default=None)
    p.add_argument("--dims", type=int, default=None)

    p = sub.add_parser("stability", help="linear stability sweep")
    _add_common_flags(p)

    p = sub.add_parser("fit-toy", help="neural SDE moment-matching fit")
    _add_common_flags(p)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)

    args = parser.parse_args(argv)
    cfg, explicit = build_experiment_config(args)
    command = args.command
    out = cfg.out or f"{command.replace('-', '_')}.csv"
    failures = []

    if command == "gradient-error":
        if "step_sizes" not in explicit:
            cfg.step_sizes = [2.0 ** 0, 2.0 ** -2, 2.0 ** -4, 2.0 ** -6]
        rows = run_gradient_error(cfg)
        write_csv(out, *_dict_rows(rows))
        if args.check:
            failures = check_gradient_error(rows)
    elif command == "convergence":
        if "step_sizes" not in explicit:
            cfg.step_sizes = list(DEFAULT_CONVERGENCE_STEPS)
        rows, slopes = run_convergence(cfg)
        write_csv(out, *_dict_rows(rows))
        slope_out = out.rsplit(".", 1)[0] + "_slopes.csv"
        write_csv(slope_out, *_dict_rows(slopes))
        for s in slopes:
            print(f"{s['case']:15s} {s['metric']:12s} slope {s['slope']:+.3f} "
                  f"(residual {s['residual']:.3g})")
        if args.check:
            failures = check_convergence(slopes)
    elif command == "brownian-bench":
        rows = run_brownian_bench(cfg)
        write_csv(out, *_dict_rows(rows))
        times = {}
        for r in rows:
            print(f"{r['structure']:22s} {r['pattern']:18s} "
                  f"n={r['subintervals']:<5d} min {r['min_time_s']:.4g}s")
            times[(r["pattern"], r["subintervals"], r["structure"])] = \
                r["min_time_s"]
        for (pattern, n, structure), t in sorted(times.items()):
            if structure != "brownian_interval":
                continue
            other = times.get((pattern, n, "virtual_brownian_tree"))
            if other:
                print(f"speedup {pattern} n={n}: {other / t:.2f}x")
        if args.check:
            failures = check_brownian_bench(rows)
    elif command == "stability":
        rows = run_stability(cfg)
        write_csv(out, *_dict_rows(rows))
        if args.check:
            failures = check_stability(rows)
    elif command == "fit-toy":
        rows = fit_toy_sde(cfg)
        write_csv(out, *_dict_rows(rows))
        print(f"loss: first {rows[0]['loss']:.5g} last {rows[-1]['loss']:.5g}")
        if args.check:
            failures = check_fit_toy(rows)

    print(f"wrote {out}")
    if failures:
        for f in failures:
            print(f"CHECK FAILED: {f}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())

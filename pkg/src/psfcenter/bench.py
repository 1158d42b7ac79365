"""Monte Carlo benchmark of the center estimators on synthetic bead scenes.

A scene is a set of bead anchors spread over a few depth layers, every bead
pointing exactly at the true center.  Each replicate corrupts anchors and
directions with two-regime (inlier/outlier) Gaussian noise, the same regime
for both quantities of a bead, then runs every requested method on the
same corrupted data.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InsufficientReplicates, PsfCenterError
from .formulations import build_system
from .geometry import ObservationSet, as_point
from .prox import LossSpec
from .solvers import PrimalDualConfig, solve

log = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.05


@dataclass(frozen=True)
class ScenarioConfig:
    n: int = 200
    lateral_range: tuple = (0.0, 2048.0)
    layer_depths: tuple = (50.0, 250.0)
    layer_weights: Optional[tuple] = None
    true_center: tuple = (1000.0, 1000.0, 5000.0)
    outlier_probability: float = 0.25
    sigma1: float = 0.015   # inlier direction noise
    sigma2: float = 0.030   # outlier direction noise
    sigma3: float = 30.0    # inlier anchor noise, voxels
    sigma4: float = 60.0    # outlier anchor noise, voxels
    seed: int = 0
    renormalize_directions: bool = False

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be at least 1")
        if not 0.0 <= self.outlier_probability <= 1.0:
            raise ValueError("outlier_probability must lie in [0, 1]")
        sig = (self.sigma1, self.sigma2, self.sigma3, self.sigma4)
        if min(sig) < 0:
            raise ValueError("noise standard deviations must be nonnegative")
        if self.sigma2 < self.sigma1 or self.sigma4 < self.sigma3:
            raise ValueError("outlier noise must not be smaller than inlier noise "
                             "(sigma2 >= sigma1, sigma4 >= sigma3)")
        lo, hi = self.lateral_range
        if not lo <= hi:
            raise ValueError("lateral_range must be increasing")
        if not self.layer_depths:
            raise ValueError("at least one layer depth is required")
        if self.layer_weights is not None:
            if len(self.layer_weights) != len(self.layer_depths):
                raise ValueError("layer_weights must match layer_depths")
            if min(self.layer_weights) < 0 or sum(self.layer_weights) <= 0:
                raise ValueError("layer_weights must be nonnegative with positive sum")
        as_point(self.true_center)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.true_center, dtype=float)


def scene_rng(seed: int, replicate: Optional[int] = None) -> np.random.Generator:
    key = (0,) if replicate is None else (2, replicate)
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(1, replicate)))


def generate_scene(config: ScenarioConfig, rng: np.random.Generator) -> ObservationSet:
    """Noiseless bundle: anchors on the layers, unit directions toward the center."""
    lo, hi = config.lateral_range
    lateral = rng.uniform(lo, hi, size=(config.n, 2))
    depths = np.asarray(config.layer_depths, dtype=float)
    if config.layer_weights is None:
        # even split, remainder to the first layers
        z = depths[np.arange(config.n) * len(depths) // config.n]
    else:
        p = np.asarray(config.layer_weights, dtype=float)
        z = rng.choice(depths, size=config.n, p=p / p.sum())
    anchors = np.column_stack([lateral, z])
    directions = config.center[None, :] - anchors
    return ObservationSet(anchors, directions)


def corrupt(obs: ObservationSet, config: ScenarioConfig,
            rng: np.random.Generator) -> ObservationSet:
    """Two-regime Gaussian corruption of anchors and directions.

    Bead ``i`` is an outlier when ``rho_i <= outlier_probability`` with
    ``rho_i ~ U[0, 1]``; outliers get (sigma2, sigma4), inliers (sigma1, sigma3).
    All random arrays are drawn every time so the stream does not depend on
    the regime pattern.
    """
    n = len(obs)
    rho = rng.uniform(0.0, 1.0, size=n)
    u = rng.normal(0.0, 1.0, size=(n, 3)) * config.sigma1
    w = rng.normal(0.0, 1.0, size=(n, 3)) * config.sigma2
    s = rng.normal(0.0, 1.0, size=(n, 3)) * config.sigma3
    t = rng.normal(0.0, 1.0, size=(n, 3)) * config.sigma4
    inlier = (rho > config.outlier_probability)[:, None]
    directions = obs.directions + np.where(inlier, u, w)
    anchors = obs.anchors + np.where(inlier, s, t)
    return ObservationSet(anchors, directions, obs.weights,
                          normalize=config.renormalize_directions)


@dataclass(frozen=True)
class Method:
    """One estimator: solver (wls / pd / tls), model (1 / 2), and loss for pd."""

    solver: str
    model: int
    loss: Optional[LossSpec] = None

    @classmethod
    def parse(cls, text: str) -> "Method":
        parts = text.strip().split(":", 2)
        if len(parts) < 2 or parts[0] not in ("wls", "pd", "tls") or parts[1] not in ("1", "2"):
            raise ValueError(f"invalid method {text!r}; expected wls:1, tls:<1|2> "
                             "or pd:<1|2>:<loss>")
        solver, model = parts[0], int(parts[1])
        if solver == "wls" and model != 1:
            raise ValueError("closed-form WLS is defined for model 1 only")
        if solver == "pd":
            if len(parts) != 3:
                raise ValueError(f"method {text!r} needs a loss, e.g. pd:{model}:l1")
            return cls(solver, model, LossSpec.parse(parts[2]))
        if len(parts) == 3:
            raise ValueError(f"method {text!r}: only pd takes a loss")
        return cls(solver, model)

    def __str__(self):
        base = f"{self.solver}:{self.model}"
        return f"{base}:{self.loss}" if self.loss is not None else base


DEFAULT_METHODS = tuple(Method.parse(m) for m in (
    "pd:1:l1", "pd:1:block-l2", "pd:1:huber",
    "pd:2:l1", "pd:2:block-l2", "pd:2:huber",
    "tls:1", "tls:2",
))


@dataclass
class MonteCarloReport:
    method: str
    bias_percent: list
    sigma_percent: list
    aggregate_error: float
    mean_squared_error: float
    rms_percent: list
    replications: int
    failures: int = 0
    valid: bool = True
    failure_messages: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(estimates, true_center, method: str = "") -> MonteCarloReport:
    """Bias and spread of ``estimates`` around ``true_center``.

    * bias %: ``mean(c_j - true_j) / true_j * 100``
    * sigma %: unbiased standard deviation ``/ true_j * 100``
    * aggregate error: ``sqrt(mean |c - true|^2)``; the squared value is kept
      as ``mean_squared_error``
    * rms %: ``sqrt(mean (c_j - true_j)^2) / true_j * 100`` (spread including bias)
    """
    est = np.asarray(estimates, dtype=float).reshape(-1, 3)
    if len(est) < 2:
        raise InsufficientReplicates(f"need at least 2 estimates, got {len(est)}")
    c = as_point(true_center)
    err = est - c[None, :]
    bias = err.mean(axis=0) / c * 100.0
    sigma = est.std(axis=0, ddof=1) / c * 100.0
    rms = np.sqrt(np.mean(err ** 2, axis=0)) / c * 100.0
    mse = float(np.mean(np.sum(err ** 2, axis=1)))
    return MonteCarloReport(method=method, bias_percent=bias.tolist(),
                            sigma_percent=sigma.tolist(), aggregate_error=float(np.sqrt(mse)),
                            mean_squared_error=mse, rms_percent=rms.tolist(),
                            replications=len(est))


@dataclass
class ReplicateResult:
    index: int
    centers: list      # per method: ndarray or None
    errors: list       # per method: message or None


def run_replicate(config: ScenarioConfig, methods: Sequence[Method], index: int,
                  scene: Optional[ObservationSet] = None,
                  pd_config: Optional[PrimalDualConfig] = None) -> ReplicateResult:
    if scene is None:
        scene = generate_scene(config, scene_rng(config.seed, index))
    obs = corrupt(scene, config, replicate_rng(config.seed, index))
    centers, errors = [], []
    systems = {}
    for m in methods:
        try:
            if m.model not in systems:
                systems[m.model] = build_system(obs, m.model)
            sol = solve(systems[m.model], m.solver, m.loss, pd_config)
            centers.append(sol.center)
            errors.append(None)
        except PsfCenterError as exc:
            centers.append(None)
            errors.append(f"{type(exc).__name__}: {exc}")
    return ReplicateResult(index, centers, errors)


def run_monte_carlo(config: ScenarioConfig, methods: Sequence[Method], replications: int,
                    *, redraw_scene: bool = False, threads: Optional[int] = None,
                    pd_config: Optional[PrimalDualConfig] = None, progress=None):
    """Run ``replications`` noise draws and summarise each method.

    Returns ``(reports, replicate_results)``.  Replicate ``r`` draws its
    noise from a generator seeded by ``(config.seed, r)``, so the output is
    independent of ``threads``.
    """
    if replications < 2:
        raise InsufficientReplicates("replications must be at least 2")
    methods = list(methods)
    scene = None if redraw_scene else generate_scene(config, scene_rng(config.seed))

    def task(r):
        res = run_replicate(config, methods, r, scene, pd_config)
        if progress is not None:
            progress(r)
        return res

    if threads == 1:
        results = [task(r) for r in range(replications)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(task, range(replications)))
    results.sort(key=lambda rr: rr.index)

    reports = []
    for k, m in enumerate(methods):
        ok = [rr.centers[k] for rr in results if rr.centers[k] is not None]
        msgs = [f"replicate {rr.index}: {rr.errors[k]}" for rr in results if rr.errors[k]]
        failures = replications - len(ok)
        if len(ok) >= 2:
            rep = compute_metrics(ok, config.center, str(m))
        else:
            nan3 = [float("nan")] * 3
            rep = MonteCarloReport(str(m), nan3, nan3, float("nan"), float("nan"), nan3, len(ok))
        rep.failures = failures
        rep.failure_messages = msgs
        rep.valid = failures <= MAX_FAILURE_FRACTION * replications and len(ok) >= 2
        reports.append(rep)
    return reports, results


def format_table(reports: Sequence[MonteCarloReport]) -> str:
    """Plain-text table: Bias (%) and Sigma (%) per axis, then aggregate error."""
    names = [r.method for r in reports]
    width = max(10, *(len(n) for n in names)) + 2
    head = f"{'':<12}" + "".join(f"{n:>{width}}" for n in names)
    lines = [head, "-" * len(head)]

    def section(title, attr):
        lines.append(title)
        for j in range(3):
            vals = "".join(f"{getattr(r, attr)[j]:>{width}.2f}" for r in reports)
            lines.append(f"{'  j=' + str(j + 1):<12}{vals}")

    section("Bias (%)", "bias_percent")
    section("Sigma (%)", "sigma_percent")
    lines.append("-" * len(head))
    lines.append(f"{'RMS error':<12}" + "".join(f"{r.aggregate_error:>{width}.1f}" for r in reports))
    lines.append(f"{'MSE':<12}" + "".join(f"{r.mean_squared_error:>{width}.0f}" for r in reports))
    if any(not r.valid for r in reports):
        lines.append("invalid (too many failed replicates): "
                     + ", ".join(r.method for r in reports if not r.valid))
    return "\n".join(lines) + "\n"


def write_replicates_csv(path, methods: Sequence[Method], results, true_center) -> None:
    c = as_point(true_center)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "replicate", "cx", "cy", "cz", "error"])
        for rr in results:
            for m, center in zip(methods, rr.centers):
                if center is None:
                    writer.writerow([str(m), rr.index, "", "", "", ""])
                else:
                    err = float(np.linalg.norm(center - c))
                    writer.writerow([str(m), rr.index, *(repr(float(v)) for v in center),
                                     repr(err)])

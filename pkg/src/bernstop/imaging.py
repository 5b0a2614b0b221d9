"""Active-imaging simulation: scenes, per-pixel adaptive acquisition, reconstruction."""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng, tv
from .beta_core import BetaParams, digamma
from .designers import binomial_rule, threshold_for_budget
from .evaluation import Population, simulate_lockstep
from .trellis import Estimand, StoppingRule

PSNR_INF = 999.0     # reported in place of +inf when the MSE is zero

# Modified Shepp-Logan table: intensity, semi-axes (a, b), centre (x0, y0), angle in degrees.
_MODIFIED_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0),
    (-0.2, 0.11, 0.31, 0.22, 0.0, -18.0),
    (-0.2, 0.16, 0.41, -0.22, 0.0, 18.0),
    (0.1, 0.21, 0.25, 0.0, 0.35, 0.0),
    (0.1, 0.046, 0.046, 0.0, 0.1, 0.0),
    (0.1, 0.046, 0.046, 0.0, -0.1, 0.0),
    (0.1, 0.046, 0.023, -0.08, -0.605, 0.0),
    (0.1, 0.023, 0.023, 0.0, -0.606, 0.0),
    (0.1, 0.023, 0.046, 0.06, -0.605, 0.0),
)


@dataclass(frozen=True, eq=False)
class Scene:
    """True per-pixel success probabilities and the range they were mapped to."""

    p: np.ndarray
    lo: float = 0.0
    hi: float = 1.0
    name: str = "scene"

    def __post_init__(self):
        p = np.array(self.p, dtype=float)
        if p.ndim != 2 or p.size == 0:
            raise ValueError("scene must be a non-empty 2D array")
        if np.any(~np.isfinite(p)) or np.any((p < 0.0) | (p > 1.0)):
            raise ValueError("scene values must lie in [0, 1]")
        if not self.lo < self.hi:
            raise ValueError("scene range needs lo < hi")
        p.setflags(write=False)
        object.__setattr__(self, "p", p)

    @property
    def height(self) -> int:
        return self.p.shape[0]

    @property
    def width(self) -> int:
        return self.p.shape[1]


def shepp_logan(size: int) -> Scene:
    """Modified Shepp-Logan phantom on a ``size`` x ``size`` grid, values in [0, 1]."""
    if size < 16:
        raise ValueError("phantom size must be at least 16")
    axis = (np.arange(size) - (size - 1) / 2.0) / ((size - 1) / 2.0)
    x = np.tile(axis, (size, 1))
    y = np.rot90(x)
    img = np.zeros((size, size))
    for value, a, b, x0, y0, deg in _MODIFIED_SHEPP_LOGAN:
        t = math.radians(deg)
        dx = x - x0
        dy = y - y0
        u = dx * math.cos(t) + dy * math.sin(t)
        v = -dx * math.sin(t) + dy * math.cos(t)
        img[(u / a) ** 2 + (v / b) ** 2 <= 1.0] += value
    # overlapping ellipses leave round-off just below zero
    img = np.clip(img, 0.0, 1.0)
    return Scene(img, 0.0, 1.0, name=f"shepp-logan {size}")


def rescale(scene: Scene, lo: float, hi: float) -> Scene:
    """Affinely map the scene's minimum to ``lo`` and maximum to ``hi``."""
    if not 0.0 <= lo < hi <= 1.0:
        raise ValueError("need 0 <= lo < hi <= 1")
    pmin = float(scene.p.min())
    pmax = float(scene.p.max())
    if pmax == pmin:
        raise ValueError("cannot rescale a constant scene")
    out = lo + (hi - lo) * (scene.p - pmin) / (pmax - pmin)
    out[scene.p == pmin] = lo
    out[scene.p == pmax] = hi
    return Scene(out, lo, hi, scene.name)


# --- scene files ----------------------------------------------------------

def _read_pgm(data: bytes) -> np.ndarray:
    tokens = []
    pos = 0
    # header: magic, width, height, maxval, separated by whitespace and comments
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if not 0 < maxval < 65536:
        raise ValueError("PGM maxval must be in 1..65535")
    if magic == b"P5":
        body = data[pos + 1:]
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        arr = np.frombuffer(body, dtype=dtype, count=w * h)
    elif magic == b"P2":
        arr = np.array(data[pos:].split()[:w * h], dtype=np.int64)
    else:
        raise ValueError("only P2 and P5 PGM files are supported")
    if arr.size != w * h:
        raise ValueError("PGM file is truncated")
    return arr.reshape(h, w).astype(float) / maxval


def load_scene(path, lo: float | None = None, hi: float | None = None) -> Scene:
    """Read a PGM (8/16-bit) or CSV grayscale image, optionally rescaling it."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        arr = np.loadtxt(path, delimiter=",", ndmin=2)
        if np.any(arr < 0.0) or np.any(arr > 1.0):
            pmin, pmax = arr.min(), arr.max()
            arr = (arr - pmin) / (pmax - pmin) if pmax > pmin else np.zeros_like(arr)
    else:
        arr = _read_pgm(path.read_bytes())
    scene = Scene(arr, 0.0, 1.0, name=path.stem)
    if lo is not None and hi is not None:
        scene = rescale(scene, lo, hi)
    return scene


def save_image(values: np.ndarray, path, lo: float | None = None, hi: float | None = None) -> None:
    """Write CSV (full precision) or 16-bit PGM (quantized over [lo, hi])."""
    path = Path(path)
    values = np.asarray(values, dtype=float)
    if path.suffix.lower() == ".csv":
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for row in values:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        return
    lo = float(values.min()) if lo is None else lo
    hi = float(values.max()) if hi is None else hi
    scale = (values - lo) / (hi - lo) if hi > lo else np.zeros_like(values)
    q = np.clip(np.rint(scale * 65535.0), 0, 65535).astype(">u2")
    header = f"P5\n{values.shape[1]} {values.shape[0]}\n65535\n".encode("ascii")
    path.write_bytes(header + q.tobytes())


# --- acquisition ----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class AcquisitionRecord:
    k: np.ndarray
    m: np.ndarray
    rule_id: str
    seed: int


def acquire(scene: Scene, rule: StoppingRule, seed: int) -> AcquisitionRecord:
    """Run the stopping rule independently at every pixel.

    Pixel ``i`` (row-major) uses random stream ``i`` of ``seed``, so its
    counts equal ``simulate_stop(rule, p_i, seed, stream=i)``.
    """
    k, m = simulate_lockstep(rule, scene.p.ravel(), seed, np.arange(scene.p.size))
    return AcquisitionRecord(k.reshape(scene.p.shape), m.reshape(scene.p.shape),
                             rule.name or "rule", int(seed))


# --- reconstruction -------------------------------------------------------

class ReconMethod(enum.Enum):
    PIXELWISE_MMSE = "mmse"
    PIXELWISE_ML = "ml"
    TV_ML = "tv"

    @classmethod
    def parse(cls, value) -> "ReconMethod":
        if isinstance(value, ReconMethod):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise ValueError(f"unknown reconstruction {value!r}; expected mmse, ml or tv") from None


@dataclass(frozen=True, eq=False)
class Reconstruction:
    estimate: np.ndarray
    estimand: Estimand
    method: ReconMethod
    mse: float = math.nan
    psnr_db: float = math.nan
    info: dict = field(default_factory=dict)


def estimate_pixelwise(record: AcquisitionRecord, prior: BetaParams, estimand: Estimand | str = Estimand.P,
                       method: ReconMethod | str = ReconMethod.PIXELWISE_MMSE,
                       scene: Scene | None = None) -> Reconstruction:
    """Closed-form per-pixel estimates from the counts."""
    estimand = Estimand.parse(estimand)
    method = ReconMethod.parse(method)
    k = record.k.astype(float)
    m = record.m.astype(float)
    if method is ReconMethod.PIXELWISE_MMSE:
        a = prior.alpha + k
        s = prior.alpha + prior.beta_ + m
        est = a / s if estimand is Estimand.P else digamma(a) - digamma(s)
    elif method is ReconMethod.PIXELWISE_ML:
        if np.any(m == 0):
            raise ValueError("ML estimate undefined at pixels with no trials")
        if estimand is Estimand.P:
            est = k / m
        else:
            if np.any(k == 0):
                raise ValueError("ML estimate of log p undefined at pixels with no successes")
            est = np.log(k / m)
    else:
        raise ValueError("use estimate_tv_ml for TV reconstruction")
    return _finish(est, estimand, method, scene, {})


def estimate_tv_ml(record: AcquisitionRecord, tv_weight: float, estimand: Estimand | str = Estimand.P,
                   scene: Scene | None = None, x0: np.ndarray | None = None,
                   max_iter: int = tv.MAX_ITER) -> Reconstruction:
    """TV-regularized binomial ML estimate of p (log p is its logarithm)."""
    estimand = Estimand.parse(estimand)
    res = tv.solve_tv_ml(record.k, record.m, tv_weight, x0=x0, max_iter=max_iter)
    est = res.estimate if estimand is Estimand.P else np.log(res.estimate)
    info = {"objective": res.objective, "gap": res.gap, "iterations": res.iterations,
            "converged": res.converged, "tv_weight": float(tv_weight), "raw": res.estimate}
    return _finish(est, estimand, ReconMethod.TV_ML, scene, info)


def _finish(est, estimand, method, scene, info):
    if scene is None:
        return Reconstruction(est, estimand, method, info=info)
    metrics = image_metrics(est, scene, estimand)
    return Reconstruction(est, estimand, method, metrics["mse"], metrics["psnr_db"], info)


def image_metrics(estimate: np.ndarray, scene: Scene, estimand: Estimand | str = Estimand.P,
                  other: np.ndarray | None = None) -> dict:
    """MSE against the scene (or its log) and PSNR with peak at the scene's upper range.

    With ``other`` given, also reports how many dB better ``estimate`` is.
    """
    estimand = Estimand.parse(estimand)
    estimate = np.asarray(estimate, dtype=float)
    if estimate.shape != scene.p.shape:
        raise ValueError(f"shape mismatch: {estimate.shape} vs {scene.p.shape}")
    truth = scene.p if estimand is Estimand.P else np.log(scene.p)
    mse = float(np.mean((estimate - truth) ** 2))
    out = {"mse": mse, "psnr_db": psnr(mse, scene.hi)}
    if other is not None:
        other_mse = float(np.mean((np.asarray(other, dtype=float) - truth) ** 2))
        out["improvement_db"] = improvement_db(other_mse, mse)
    return out


def psnr(mse: float, peak: float) -> float:
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(peak * peak / mse)


def improvement_db(mse_reference: float, mse: float) -> float:
    """How much lower ``mse`` is than ``mse_reference``, in dB."""
    if mse == 0.0:
        return PSNR_INF
    return 10.0 * math.log10(mse_reference / mse)


# --- experiments ----------------------------------------------------------

def budget_rule(method: str, scene: Scene, prior: BetaParams, eta: float) -> StoppingRule:
    """Acquisition rule for a method, calibrated so the scene-average E[N] is ``eta``."""
    if method == "binomial":
        if not float(eta).is_integer():
            raise ValueError("binomial acquisition needs an integer budget")
        return binomial_rule(int(eta), prior=prior, estimand=Estimand.P, name="binomial")
    if method == "threshold":
        population = Population.from_values(scene.p)
        rule = threshold_for_budget(prior, Estimand.P, eta, trials=population.trials)
        return rule.replace(name="threshold")
    raise ValueError(f"unknown acquisition method {method!r}")


def tv_weight_grid(base: float, lo_exp: int, hi_exp: int) -> list[float]:
    return [base * 2.0 ** i for i in range(lo_exp, hi_exp + 1)]


@dataclass
class ExperimentResult:
    rows: list           # one dict per (run, method)
    summary: dict        # per-method mean MSE, PSNR; improvement_db
    tv_sweep: dict = field(default_factory=dict)


def _run_one(scene, rules, prior, recon, seed, run, weights):
    run_seed = rng.derive_seed(seed, run)
    out = []
    for method, rule in rules.items():
        rec = acquire(scene, rule, run_seed)
        row = {"run": run, "method": method, "seed": run_seed, "mean_trials": float(rec.m.mean())}
        if recon is ReconMethod.TV_ML:
            mses, gaps = [], []
            converged = True
            x0 = None
            for w in weights:
                r = estimate_tv_ml(rec, w, scene=scene, x0=x0)
                x0 = r.info["raw"]      # warm start the next weight
                mses.append(r.mse)
                gaps.append(r.info["gap"])
                converged &= r.info["converged"]
            row["tv_mse"] = mses
            row["max_gap"] = float(max(gaps))
            row["converged"] = bool(converged)
        else:
            r = estimate_pixelwise(rec, prior, Estimand.P, recon, scene=scene)
            row["mse"] = r.mse
            row["psnr_db"] = r.psnr_db
        out.append(row)
    return out


def run_image_experiment(scene: Scene, prior: BetaParams, eta: float, methods=("binomial", "threshold"),
                         recon: ReconMethod | str = ReconMethod.PIXELWISE_MMSE, runs: int = 20,
                         seed: int = 0, threads: int = 1, tv_weights=None) -> ExperimentResult:
    """Repeat acquisition and reconstruction; report mean MSE per method.

    For TV reconstruction every run is solved over the whole weight grid and
    each method keeps the weight with the lowest mean MSE across runs.  The
    grid is applied identically to both methods.
    """
    recon = ReconMethod.parse(recon)
    rules = {mth: budget_rule(mth, scene, prior, eta) for mth in methods}
    weights = list(tv_weights) if tv_weights is not None else tv_weight_grid(1.0, 0, 9)
    jobs = range(runs)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda r: _run_one(scene, rules, prior, recon, seed, r, weights), jobs))
    else:
        results = [_run_one(scene, rules, prior, recon, seed, r, weights) for r in jobs]
    rows = [row for chunk in results for row in chunk]

    summary = {}
    sweep = {}
    for mth in methods:
        mine = [r for r in rows if r["method"] == mth]
        if recon is ReconMethod.TV_ML:
            curve = np.mean([r["tv_mse"] for r in mine], axis=0)
            best = int(np.argmin(curve))
            sweep[mth] = {"weights": weights, "mean_mse": [float(c) for c in curve], "best_weight": weights[best]}
            for r in mine:
                r["mse"] = float(r["tv_mse"][best])
                r["psnr_db"] = psnr(r["mse"], scene.hi)
                r["tv_weight"] = weights[best]
        mean_mse = float(np.mean([r["mse"] for r in mine]))
        summary[mth] = {"mean_mse": mean_mse, "psnr_db": psnr(mean_mse, scene.hi),
                        "mean_trials": float(np.mean([r["mean_trials"] for r in mine]))}
    if "binomial" in summary and "threshold" in summary:
        summary["improvement_db"] = improvement_db(summary["binomial"]["mean_mse"],
                                                   summary["threshold"]["mean_mse"])
    return ExperimentResult(rows, summary, sweep)

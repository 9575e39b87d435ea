"""Concept interventions for CBM, MCBM and HCBM, intervention curves, and the
bimodal-prior posterior demo.

Block indices refer to ``model.concept_specs`` (after any one-vs-rest
expansion), so a CBM over a multiclass(4) concept exposes four intervenable
binary concepts while the MCBM exposes one.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import diffcore as dc
from .models import (
    ModelBundle,
    concept_probabilities,
    encode,
    predict,
    representation_target,
    task_logits,
    task_logits_from_binary,
)

MECHANISMS = {"CBM": "cbm_percentile", "MCBM": "mcbm_head", "HCBM": "hcbm_binary"}


@dataclass(frozen=True)
class InterventionSpec:
    concept_index: int
    target_value: Any  # scalar or per-sample array
    mechanism: str


@dataclass
class PercentileTable:
    """(p5, p95) of the training-set latent per binary CBM block; None elsewhere."""

    low: list[float | None]
    high: list[float | None]
    q_low: float = 5.0
    q_high: float = 95.0

    def to_dict(self) -> dict[str, Any]:
        return {"low": self.low, "high": self.high, "q_low": self.q_low, "q_high": self.q_high}

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PercentileTable":
        return cls(list(d["low"]), list(d["high"]), d.get("q_low", 5.0), d.get("q_high", 95.0))


def percentiles(values: np.ndarray, q_low: float = 5.0, q_high: float = 95.0) -> tuple[float, float]:
    lo, hi = np.percentile(np.asarray(values, dtype=np.float64), [q_low, q_high], method="linear")
    return float(lo), float(hi)


def fit_percentile_table(model: ModelBundle, train_split, q_low: float = 5.0, q_high: float = 95.0) -> PercentileTable:
    if model.variant != "CBM":
        raise dc.UsageError(f"percentile tables are for CBMs, got {model.variant}")
    with dc.no_grad():
        mu, _ = encode(model, train_split.x)
    low: list[float | None] = []
    high: list[float | None] = []
    for j, spec in enumerate(model.concept_specs):
        if spec.kind != "binary":
            low.append(None)
            high.append(None)
            continue
        lo, hi = percentiles(mu.data[:, model.layout.slice(j)].ravel(), q_low, q_high)
        low.append(lo)
        high.append(hi)
    return PercentileTable(low, high, q_low, q_high)


def intervenable(model: ModelBundle) -> list[int]:
    """Blocks that admit an intervention under the model's mechanism."""
    if model.variant == "VM":
        return []
    if model.variant == "CBM":
        return [j for j, s in enumerate(model.concept_specs) if s.kind == "binary"]
    return list(range(len(model.concept_specs)))


def _check_mechanism(model: ModelBundle, mechanism: str) -> None:
    expected = MECHANISMS.get(model.variant)
    if expected is None or mechanism != expected:
        raise dc.UsageError(f"mechanism {mechanism!r} does not apply to a {model.variant} model")


def intervened_logits(
    model: ModelBundle,
    x: np.ndarray,
    mask: np.ndarray,
    values: Sequence[np.ndarray],
    table: PercentileTable | None = None,
) -> dc.Tensor:
    """Task logits after replacing, per sample, the blocks where ``mask[b, j]``.

    ``values[j]`` holds the per-sample ground-truth value for block j in the
    block's own coding (0/1 for binary, class index for multiclass, raw for
    continuous).
    """
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    m = len(model.concept_specs)
    if mask.shape != (len(x), m):
        raise dc.ShapeError(f"mask must be [{len(x)}, {m}], got {mask.shape}")
    with dc.no_grad():
        mu, _ = encode(model, x)
        if model.variant == "HCBM":
            probs = np.concatenate(concept_probabilities(model, mu), axis=1)
            cb = (probs >= 0.5).astype(np.float64)
            for j in range(m):
                rows = mask[:, j]
                if rows.any():
                    cb[rows, j] = np.asarray(values[j], dtype=np.float64)[rows]
            return task_logits_from_binary(model, cb)
        z = mu.data.copy()
        for j in range(m):
            rows = mask[:, j]
            if not rows.any():
                continue
            spec = model.concept_specs[j]
            sl = model.layout.slice(j)
            v = np.asarray(values[j])[rows]
            if model.variant == "CBM":
                if spec.kind != "binary" or table is None or table.low[j] is None:
                    raise dc.UsageError(f"CBM block {j} ({spec.kind}) has no percentile intervention")
                z[rows, sl] = np.where(v == 1, table.high[j], table.low[j])[:, None]
            elif model.variant == "MCBM":
                z[rows, sl] = representation_target(spec, v, model.lam)
            else:
                raise dc.UsageError(f"{model.variant} models cannot be intervened on")
        return task_logits(model, dc.Tensor(z))


def intervene(
    model: ModelBundle,
    x: np.ndarray,
    specs: Sequence[InterventionSpec],
    aux: PercentileTable | None = None,
) -> np.ndarray:
    """Predictions after applying every spec to every sample of ``x``."""
    seen = set()
    m = len(model.concept_specs)
    mask = np.zeros((len(x), m), dtype=bool)
    values: list[np.ndarray] = [np.zeros(len(x)) for _ in range(m)]
    for s in specs:
        _check_mechanism(model, s.mechanism)
        if s.concept_index in seen:
            raise dc.UsageError(f"concept {s.concept_index} intervened twice")
        if not 0 <= s.concept_index < m:
            raise dc.UsageError(f"concept index {s.concept_index} out of range")
        seen.add(s.concept_index)
        mask[:, s.concept_index] = True
        values[s.concept_index] = np.broadcast_to(np.asarray(s.target_value), (len(x),))
    if model.variant == "CBM" and specs and aux is None:
        raise dc.UsageError("CBM interventions need the training-set percentile table")
    return predict(model, intervened_logits(model, x, mask, values, aux))


def sigmoid_inverse(p):
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)):
        raise dc.DomainError("sigmoid inverse is only finite on (0, 1)")
    out = np.log(p) - np.log1p(-p)
    return float(out) if out.ndim == 0 else out


# -- curves ---------------------------------------------------------------------------


def block_confidence(model: ModelBundle, x: np.ndarray) -> np.ndarray:
    """Confidence of each concept head in its own prediction, [B, m].

    Continuous heads have no predictive distribution here and get confidence 1,
    so they are intervened on last under the lowest-confidence policy.
    """
    with dc.no_grad():
        mu, _ = encode(model, x)
        probs = concept_probabilities(model, mu)
    cols = []
    for spec, p in zip(model.concept_specs, probs):
        if spec.kind == "binary":
            cols.append(np.maximum(p[:, 0], 1 - p[:, 0]))
        elif spec.kind == "multiclass":
            cols.append(p.max(axis=1))
        else:
            cols.append(np.ones(len(x)))
    return np.stack(cols, axis=1)


@dataclass
class InterventionCurve:
    policy: str
    fractions: list[float]
    mean_error: list[float]
    std_error: list[float]
    n_seeds: int
    per_seed: list[list[float]] = field(default_factory=list)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["policy", "fraction", "mean_error", "std_error", "n_seeds"])
            for f, m, s in zip(self.fractions, self.mean_error, self.std_error):
                w.writerow([self.policy, format(f, ".17g"), format(m, ".17g"), format(s, ".17g"), self.n_seeds])
        return path


def _n_chosen(f: float, m: int) -> int:
    # guard against 0.30000000000000004 * 10 style round-up
    return min(m, math.ceil(round(f * m, 9)))


def intervention_curve(
    model: ModelBundle,
    test_split,
    policy: str = "lowest_confidence",
    fraction_grid: Sequence[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    n_seeds: int = 5,
    table: PercentileTable | None = None,
    seed: int = 0,
    global_ranking: bool = False,
) -> InterventionCurve:
    """Test error as a growing share of concepts is set to ground truth."""
    if policy not in ("lowest_confidence", "random"):
        raise ValueError(f"unknown policy {policy!r}")
    fractions = sorted(float(f) for f in fraction_grid)
    if any(f < 0 or f > 1 for f in fractions):
        raise ValueError("fractions must lie in [0, 1]")
    if model.variant == "CBM" and table is None:
        raise dc.UsageError("CBM curves need the training-set percentile table")
    blocks = intervenable(model)
    if not blocks:
        raise dc.UsageError(f"{model.variant} has no intervenable concepts")
    x, y = test_split.x, test_split.y
    n, m_all, m = len(x), len(model.concept_specs), len(blocks)
    truth = model.concept_targets(test_split.concepts)
    blocks_arr = np.asarray(blocks)

    if policy == "lowest_confidence":
        conf = block_confidence(model, x)[:, blocks_arr]
        if global_ranking:
            order = np.tile(np.argsort(conf.mean(axis=0), kind="stable"), (n, 1))
        else:
            order = np.argsort(conf, axis=1, kind="stable")  # ties -> lower index first
        seeds = [None]
    else:
        seeds = list(range(seed, seed + n_seeds))

    per_seed: list[list[float]] = []
    for s in seeds:
        if s is not None:
            order = np.tile(dc.stream(s, "interventions/random").permutation(m), (n, 1))
        errs = []
        for f in fractions:
            k = _n_chosen(f, m)
            mask = np.zeros((n, m_all), dtype=bool)
            if k:
                chosen = blocks_arr[order[:, :k]]
                mask[np.arange(n)[:, None], chosen] = True
            pred = predict(model, intervened_logits(model, x, mask, truth, table))
            errs.append(float(np.mean(pred != y)))
        per_seed.append(errs)
    arr = np.asarray(per_seed)
    return InterventionCurve(
        policy=policy,
        fractions=fractions,
        mean_error=arr.mean(axis=0).tolist(),
        std_error=arr.std(axis=0).tolist(),
        n_seeds=len(seeds),
        per_seed=per_seed,
    )


# -- posterior demo -------------------------------------------------------------------


def mixture_density(z: np.ndarray, weights, means, sigmas) -> np.ndarray:
    weights, means, sigmas = (np.asarray(a, dtype=np.float64) for a in (weights, means, sigmas))
    if np.any(weights < 0) or abs(weights.sum() - 1) > 1e-9 or np.any(sigmas <= 0):
        raise dc.DomainError("invalid mixture: weights must be a distribution and sigmas positive")
    comp = np.exp(-0.5 * ((z[:, None] - means) / sigmas) ** 2) / (np.sqrt(2 * np.pi) * sigmas)
    return comp @ weights


class GridError(ValueError):
    pass


def _refined_mode(z: np.ndarray, density: np.ndarray) -> float:
    """Grid argmax refined by a parabola through the neighbouring nodes."""
    i = int(np.argmax(density))
    if i == 0 or i == len(z) - 1:
        return float(z[i])
    a, b, c = density[i - 1], density[i], density[i + 1]
    den = a - 2 * b + c
    shift = 0.5 * (a - c) / den if den != 0 else 0.0
    return float(z[i] + shift * (z[1] - z[0]))


@dataclass
class PosteriorDemo:
    z: np.ndarray
    prior: np.ndarray
    posterior: np.ndarray
    surrogate: np.ndarray
    mode: float
    mass_positive: float
    normalization: float
    p_c: float
    surrogate_location: float
    mode_to_surrogate: float
    tv_distance: float

    def summary(self) -> dict[str, float]:
        return {
            k: float(getattr(self, k))
            for k in ("mode", "mass_positive", "normalization", "p_c", "surrogate_location", "mode_to_surrogate", "tv_distance")
        }

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["z", "prior", "posterior", "surrogate"])
            for row in zip(self.z, self.prior, self.posterior, self.surrogate):
                w.writerow([format(float(v), ".17g") for v in row])
        return path


def bayes_posterior_demo(
    weights=(0.5, 0.5),
    means=(-3.0, 3.0),
    sigmas=(1.0, 1.0),
    c_value: int = 1,
    grid: tuple[float, float, int] = (-12.0, 12.0, 4801),
    surrogate_p: float = 0.95,
    surrogate_sigma: float = 1.0,
) -> PosteriorDemo:
    """Posterior p(z | c) under a sigmoid likelihood, by trapezoidal integration.

    The surrogate is the finite stand-in a sigmoid-inverse intervention would
    use: a unit Gaussian at logit(surrogate_p) for c = 1 (mirrored for c = 0).
    """
    if c_value not in (0, 1):
        raise dc.DomainError("c must be 0 or 1")
    lo, hi, n_points = grid
    if n_points < 1000:
        raise GridError("posterior demo needs at least 1000 grid points")
    z = np.linspace(lo, hi, int(n_points))
    prior = mixture_density(z, weights, means, sigmas)
    mass = float(np.trapezoid(prior, z))
    if mass < 0.999:
        raise GridError(f"grid [{lo}, {hi}] covers only {mass:.5f} of the prior mass; widen it")
    sig = 1.0 / (1.0 + np.exp(-z))
    like = sig if c_value == 1 else 1.0 - sig
    joint = like * prior
    p_c = float(np.trapezoid(joint, z))
    post = joint / p_c
    norm = float(np.trapezoid(post, z))
    pos = z > 0
    zero_idx = int(np.searchsorted(z, 0.0))
    # mass on z > 0, interpolating the density at 0 when 0 falls between nodes
    zp = np.concatenate([[0.0], z[pos]]) if z[zero_idx] != 0 else z[zero_idx:]
    dp = np.interp(zp, z, post)
    mass_pos = float(np.trapezoid(dp, zp))
    mode = _refined_mode(z, post)
    loc = sigmoid_inverse(surrogate_p if c_value == 1 else 1 - surrogate_p)
    surr = np.exp(-0.5 * ((z - loc) / surrogate_sigma) ** 2) / (np.sqrt(2 * np.pi) * surrogate_sigma)
    tv = 0.5 * float(np.trapezoid(np.abs(post - surr), z))
    return PosteriorDemo(z, prior, post, surr, mode, mass_pos, norm, p_c, float(loc), abs(mode - float(loc)), tv)

"""Leakage, interpretability, calibration and information-theory checks.

Entropies and mutual information are in nats.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import logsumexp

from . import diffcore as dc
from .diffcore import MLP, Tensor


class MetricError(ValueError):
    """Metric undefined for the given inputs."""


# -- MLP probes ---------------------------------------------------------------------


@dataclass
class ProbeConfig:
    hidden_layers: tuple[int, ...] = (64,)
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    train_fraction: float = 0.7
    standardize: bool = True


def _standardize(train: np.ndarray, *others: np.ndarray) -> list[np.ndarray]:
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    std[std < 1e-12] = 1.0
    return [(a - mean) / std for a in (train, *others)]


def holdout_split(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    perm = dc.stream(seed, "probe/split").permutation(n)
    cut = int(round(fraction * n))
    if cut < 1 or cut >= n:
        raise MetricError(f"cannot hold out data from {n} samples at fraction {fraction}")
    return perm[:cut], perm[cut:]


def fit_classifier(x: np.ndarray, y: np.ndarray, n_classes: int, cfg: ProbeConfig, name: str = "probe") -> MLP:
    """Softmax MLP fitted with Adam on mean cross-entropy."""
    net = MLP(name, [x.shape[1], *cfg.hidden_layers, n_classes], cfg.seed)
    params = net.parameters()
    opt = dc.OptimizerState(kind="adam", learning_rate=cfg.lr)
    rng = dc.stream(cfg.seed, f"{name}/shuffle")
    n = len(x)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            dc.zero_grad(params)
            loss = dc.cross_entropy(net(Tensor(x[idx])), y[idx])
            loss.backward()
            opt.step(params)
    return net


def mean_nll(net: MLP, x: np.ndarray, y: np.ndarray) -> float:
    with dc.no_grad():
        return float(dc.cross_entropy(net(Tensor(x)), y).data)


def probe_accuracy(net: MLP, x: np.ndarray, y: np.ndarray) -> float:
    with dc.no_grad():
        return float(np.mean(net(Tensor(x)).data.argmax(axis=1) == y))


def entropy_of_labels(y: np.ndarray) -> float:
    _, counts = np.unique(y, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def _labels(n: np.ndarray) -> tuple[np.ndarray, int]:
    values, inv = np.unique(np.asarray(n), return_inverse=True)
    return inv.astype(np.int64), len(values)


def urr(z: np.ndarray, c: np.ndarray, n_j: np.ndarray, probe: ProbeConfig | None = None) -> dict[str, float]:
    """Uncertainty Reduction Ratio of nuisance ``n_j`` given concepts ``c`` and latent ``z``.

    Two probes, c -> n_j and (c, z) -> n_j, are fitted on one part of the data
    and scored by mean held-out NLL on the rest. The marginal entropy uses the
    held-out labels too.
    """
    probe = probe or ProbeConfig()
    y, k = _labels(n_j)
    if k < 2:
        raise MetricError("nuisance is constant: URR undefined (H(N) = 0)")
    z = np.asarray(z, dtype=np.float64).reshape(len(y), -1)
    c = np.asarray(c, dtype=np.float64).reshape(len(y), -1)
    tr, ev = holdout_split(len(y), probe.train_fraction, probe.seed)
    cz = np.concatenate([c, z], axis=1)
    if probe.standardize:
        c_tr, c_ev = _standardize(c[tr], c[ev])
        cz_tr, cz_ev = _standardize(cz[tr], cz[ev])
    else:
        c_tr, c_ev, cz_tr, cz_ev = c[tr], c[ev], cz[tr], cz[ev]
    h_c = mean_nll(fit_classifier(c_tr, y[tr], k, probe, "probe_c"), c_ev, y[ev])
    h_cz = mean_nll(fit_classifier(cz_tr, y[tr], k, probe, "probe_cz"), cz_ev, y[ev])
    h_n = entropy_of_labels(y[ev])
    raw = (h_c - h_cz) / h_n
    return {"urr": float(np.clip(raw, 0.0, 1.0)), "raw": float(raw), "h_n": h_n, "h_n_given_c": h_c, "h_n_given_cz": h_cz}


# -- representation similarity ----------------------------------------------------------


def cka(z: np.ndarray, c: np.ndarray) -> float:
    """Linear CKA between two representations of the same samples."""
    x = np.asarray(z, dtype=np.float64)
    y = np.asarray(c, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if len(x) != len(y) or len(x) < 2:
        raise MetricError("cka needs two matrices with the same N >= 2")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    num = np.linalg.norm(y.T @ x) ** 2
    den = np.linalg.norm(x.T @ x) * np.linalg.norm(y.T @ y)
    if den <= 1e-300:
        raise MetricError("cka undefined: a representation is constant")
    return float(num / den)


def _fit_1d_softmax(u: np.ndarray, y: np.ndarray, k: int, l2: float = 1e-4) -> np.ndarray:
    """Multinomial logistic regression on a single feature; returns [2, k] (slopes, intercepts)."""
    onehot = np.eye(k)[y]
    n = len(u)

    def f(theta):
        w, b = theta[:k], theta[k:]
        logits = u[:, None] * w + b
        lse = logsumexp(logits, axis=1)
        loss = (lse - (logits * onehot).sum(axis=1)).mean() + 0.5 * l2 * (w @ w)
        p = np.exp(logits - lse[:, None])
        g = (p - onehot) / n
        return loss, np.concatenate([u @ g + l2 * w, g.sum(axis=0)])

    res = minimize(f, np.zeros(2 * k), jac=True, method="L-BFGS-B")
    return res.x.reshape(2, k)


def discretize_continuous(c: np.ndarray, bins: int = 4, lo: float = -1.0, hi: float = 1.0) -> np.ndarray:
    return np.clip(np.floor((np.asarray(c) - lo) / (hi - lo) * bins), 0, bins - 1).astype(np.int64)


def importance_matrix(z: np.ndarray, concept_labels: Sequence[np.ndarray], seed: int = 0, train_fraction: float = 0.7) -> np.ndarray:
    """R[i, j]: baseline-adjusted held-out accuracy of a linear probe z_i -> c_j."""
    z = np.asarray(z, dtype=np.float64)
    tr, ev = holdout_split(len(z), train_fraction, seed)
    R = np.zeros((z.shape[1], len(concept_labels)))
    for j, lab in enumerate(concept_labels):
        y, k = _labels(lab)
        if k < 2:
            continue
        # majority class of the probe-train part, scored on the held-out part
        major = np.bincount(y[tr], minlength=k).argmax()
        base_ev = float(np.mean(y[ev] == major))
        for i in range(z.shape[1]):
            u_tr, u_ev = _standardize(z[tr, i : i + 1], z[ev, i : i + 1])
            theta = _fit_1d_softmax(u_tr[:, 0], y[tr], k)
            pred = (u_ev[:, 0:1] * theta[0] + theta[1]).argmax(axis=1)
            acc = float(np.mean(pred == y[ev]))
            R[i, j] = max(0.0, acc - base_ev) / (1.0 - base_ev) if base_ev < 1 else 0.0
    return R


def disentanglement_from_importance(R: np.ndarray) -> float:
    R = np.asarray(R, dtype=np.float64)
    total = R.sum()
    if total <= 0:
        raise MetricError("disentanglement undefined: no latent dimension predicts any concept")
    m = R.shape[1]
    if m < 2:
        raise MetricError("disentanglement needs at least 2 concepts")
    rho = R.sum(axis=1) / total
    scores = np.zeros(R.shape[0])
    for i, row in enumerate(R):
        s = row.sum()
        if s <= 0:
            continue
        p = row / s
        nz = p[p > 0]
        scores[i] = 1.0 + (nz * np.log(nz)).sum() / np.log(m)
    return float(np.clip((rho * scores).sum(), 0.0, 1.0))


def disentanglement(z: np.ndarray, concept_labels: Sequence[np.ndarray], seed: int = 0) -> float:
    """DCI-style disentanglement of ``z`` with respect to discrete concept labels."""
    if len(concept_labels) < 2:
        raise MetricError("disentanglement needs at least 2 concepts")
    return disentanglement_from_importance(importance_matrix(z, concept_labels, seed))


def concept_label_columns(concepts: Sequence[np.ndarray], specs: Sequence[Any], bins: int = 4) -> list[np.ndarray]:
    """Discrete label per concept; continuous concepts binned on [-1, 1]."""
    out = []
    for c, s in zip(concepts, specs):
        out.append(discretize_continuous(c, bins) if s.kind == "continuous" else np.asarray(c).astype(np.int64))
    return out


# -- calibration on the spiral -------------------------------------------------------


def class_probabilities(model, x: np.ndarray) -> np.ndarray:
    """Per-class concept probabilities for a model whose only concept is the class.

    CBM/HCBM: independent one-vs-rest sigmoids. MCBM: the softmax head.
    """
    from .models import concept_probabilities, encode

    with dc.no_grad():
        mu, _ = encode(model, np.asarray(x, dtype=np.float64))
        probs = concept_probabilities(model, mu)
    return np.concatenate(probs, axis=1)


def calibration_summary(p: np.ndarray) -> dict[str, np.ndarray]:
    srt = np.sort(p, axis=1)
    return {"argmax": p.argmax(axis=1), "top1": srt[:, -1], "top2": srt[:, -2], "sum_p": p.sum(axis=1)}


def grid_points(lo: float = -1.2, hi: float = 1.2, n: int = 121) -> np.ndarray:
    g = np.linspace(lo, hi, n)
    a, b = np.meshgrid(g, g, indexing="xy")
    return np.stack([a.ravel(), b.ravel()], axis=1)


def calibration_report(model, x_test: np.ndarray, y_test: np.ndarray | None = None, grid: np.ndarray | None = None) -> dict[str, Any]:
    if np.asarray(x_test).shape[1] != 2:
        raise MetricError("calibration report expects 2-D inputs")
    p = class_probabilities(model, x_test)
    s = calibration_summary(p)
    rep: dict[str, Any] = {
        "n_points": int(len(p)),
        "frac_sum_off_0_2": float(np.mean(np.abs(s["sum_p"] - 1) > 0.2)),
        "max_abs_sum_minus_1": float(np.max(np.abs(s["sum_p"] - 1))),
        "frac_top2_gt_0_9": float(np.mean(s["top2"] > 0.9)),
        "frac_top2_gt_0_5": float(np.mean(s["top2"] > 0.5)),
        "pred_class_rate": np.bincount(s["argmax"], minlength=p.shape[1]).tolist(),
    }
    if y_test is not None:
        y_test = np.asarray(y_test)
        rep["true_class_rate"] = np.bincount(y_test, minlength=p.shape[1]).tolist()
        rep["accuracy"] = float(np.mean(s["argmax"] == y_test))
    if grid is not None:
        rep["grid"] = {"x": grid, **calibration_summary(class_probabilities(model, grid))}
    return rep


def write_grid_csv(grid_summary: dict[str, np.ndarray], path: str | Path) -> Path:
    path = Path(path)
    x = grid_summary["x"]
    rows = ["x1,x2,argmax,top1,top2,sum_p"]
    for i in range(len(x)):
        rows.append(
            ",".join(
                [format(x[i, 0], ".17g"), format(x[i, 1], ".17g"), str(int(grid_summary["argmax"][i]))]
                + [format(float(grid_summary[k][i]), ".17g") for k in ("top1", "top2", "sum_p")]
            )
        )
    path.write_text("\n".join(rows) + "\n")
    return path


# -- exact information quantities --------------------------------------------------------


def _check_table(p: np.ndarray, name: str = "table") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise dc.DomainError(f"{name} must be finite and nonnegative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise dc.DomainError(f"{name} must sum to 1 (got {p.sum()})")
    return p


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def discrete_mi_oracle(joint: np.ndarray) -> dict[str, float]:
    """Plug-in I(A;B), H(A), H(B), H(A|B) of a 2-D joint table."""
    p = _check_table(joint, "joint")
    if p.ndim != 2:
        raise dc.DomainError("joint table must be 2-D")
    pa, pb = p.sum(axis=1), p.sum(axis=0)
    nz = p > 0
    mi = float((p[nz] * np.log(p[nz] / np.outer(pa, pb)[nz])).sum())
    h_a, h_b, h_ab = _entropy(pa), _entropy(pb), _entropy(p.ravel())
    return {"I": mi, "H_A": h_a, "H_B": h_b, "H_A_given_B": h_ab - h_b, "H_AB": h_ab, "I_bits": mi / np.log(2)}


def _row_stochastic(t: np.ndarray, name: str) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1) > 1e-9):
        raise dc.DomainError(f"{name} rows must be probability vectors")
    return t


def variational_bound_check(p_xy: np.ndarray, encoder: np.ndarray, decoder: np.ndarray) -> dict[str, float]:
    """Lower bound I(Z;Y) >= E_{x,y} E_{z|x}[log q(y|z)] + H(Y).

    ``p_xy`` [X, Y], ``encoder`` p(z|x) [X, Z], ``decoder`` q(y|z) [Z, Y].
    The gap equals E_z KL(p(y|z) || q(y|z)). The same check with Y replaced by a
    concept covers the concept-head bound.
    """
    p_xy = _check_table(p_xy, "p_xy")
    enc = _row_stochastic(encoder, "encoder")
    dec = _row_stochastic(decoder, "decoder")
    p_zy = enc.T @ p_xy  # [Z, Y]
    rhs = discrete_mi_oracle(p_zy)["I"]
    h_y = _entropy(p_xy.sum(axis=0))
    with np.errstate(divide="ignore"):
        logq = np.log(dec)
    mask = p_zy > 0
    if np.any(np.isinf(logq[mask])):
        lhs = -np.inf
    else:
        lhs = float((p_zy[mask] * logq[mask]).sum()) + h_y
    return {"lhs": lhs, "rhs": rhs, "gap": rhs - lhs}


def conditional_bound_check(p_xc: np.ndarray, encoder: np.ndarray, prior: np.ndarray) -> dict[str, float]:
    """Upper bound I(Z;X|C) <= E_{x,c}[KL(p(z|x) || q(z|c))].

    ``p_xc`` [X, C], ``encoder`` p(z|x) [X, Z], ``prior`` q(z|c) [C, Z].
    The gap equals E_c KL(p(z|c) || q(z|c)).
    """
    p_xc = _check_table(p_xc, "p_xc")
    enc = _row_stochastic(encoder, "encoder")
    q = _row_stochastic(prior, "prior")
    p_c = p_xc.sum(axis=0)
    p_z_given_c = (p_xc.T @ enc) / np.where(p_c > 0, p_c, 1.0)[:, None]  # [C, Z]

    def kl_rows(a, b):
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(a > 0, a * (np.log(a) - np.log(b)), 0.0).sum(axis=-1)

    # I(Z;X|C) = sum_{x,c} p(x,c) KL(p(z|x) || p(z|c))
    mi = float((p_xc * kl_rows(enc[:, None, :], p_z_given_c[None, :, :])).sum())
    upper = float((p_xc * kl_rows(enc[:, None, :], q[None, :, :])).sum())
    return {"lhs": mi, "rhs": upper, "gap": upper - mi}


def discretized_gaussian_instance(
    means_x: np.ndarray, c_of_x: np.ndarray, n_c: int, lam: float = 3.0, grid: np.ndarray | None = None, sigma: float = 1.0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Encoder N(mean_x, sigma^2) and prior N(lam*(2c-1), sigma^2) normalised on a grid; uniform x."""
    grid = np.linspace(-8, 8, 321) if grid is None else grid
    means_x = np.asarray(means_x, dtype=np.float64)

    def rows(centres):
        logits = -0.5 * ((grid[None, :] - centres[:, None]) / sigma) ** 2
        w = np.exp(logits - logits.max(axis=1, keepdims=True))
        return w / w.sum(axis=1, keepdims=True)

    enc = rows(means_x)
    centres_c = lam * (2.0 * np.arange(n_c) / max(n_c - 1, 1) - 1.0)
    prior = rows(centres_c)
    p_xc = np.zeros((len(means_x), n_c))
    p_xc[np.arange(len(means_x)), np.asarray(c_of_x)] = 1.0 / len(means_x)
    return p_xc, enc, prior


# -- report ----------------------------------------------------------------------------


@dataclass
class MetricReport:
    urr: dict[str, float] = field(default_factory=dict)
    urr_detail: dict[str, dict[str, float]] = field(default_factory=dict)
    cka: float | None = None
    disentanglement: float | None = None
    concept_accuracy: list[float | None] = field(default_factory=list)
    task_accuracy: float | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def mean_urr(self) -> float | None:
        return float(np.mean(list(self.urr.values()))) if self.urr else None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["mean_urr"] = self.mean_urr
        return d

    def to_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(_jsonable(self.to_dict()), indent=1, sort_keys=True))
        return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def model_report(model, split, probe: ProbeConfig | None = None, seed: int = 0) -> MetricReport:
    """URR for every nuisance, CKA and disentanglement on a split's deterministic latent."""
    from .training import evaluate, representation

    z = representation(model, split.x)
    cmat = split.concept_matrix()
    rep = MetricReport()
    for name, values in split.nuisances.items():
        d = urr(z, cmat, values, probe)
        rep.urr[name] = d["urr"]
        rep.urr_detail[name] = d
    rep.cka = cka(z, cmat)
    rep.disentanglement = disentanglement(z, concept_label_columns(split.concepts, split.concept_specs), seed)
    ev = evaluate(model, split, with_losses=False)
    rep.task_accuracy = ev["task_accuracy"]
    rep.concept_accuracy = ev["concept_accuracy"]
    return rep

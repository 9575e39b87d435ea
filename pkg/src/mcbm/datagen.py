"""Synthetic data: factor datasets with concepts and nuisances, the imbalanced
four-arm spiral, and the bimodal prior used by the Bayes-rule demo.

Factor datasets follow p(x|c,n) p(y|c,n_y) p(c,n): factors are sampled
independently, pushed through a frozen random decoder to produce x, and y is
read off a random lookup table over the discretised (c, n_y) cells.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .diffcore.rng import stream

log = logging.getLogger(__name__)

KINDS = ("binary", "multiclass", "continuous")
ROLES = ("concept", "task_nuisance", "free_nuisance")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FactorSpec:
    name: str
    kind: str
    k: int = 2
    role: str = "concept"
    levels: int = 2  # label-table bins for continuous factors

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"factor {self.name!r}: unknown kind {self.kind!r}")
        if self.role not in ROLES:
            raise ConfigError(f"factor {self.name!r}: unknown role {self.role!r}")
        if self.kind == "multiclass" and self.k < 2:
            raise ConfigError(f"factor {self.name!r}: multiclass needs k >= 2")
        if self.kind == "continuous" and self.levels < 1:
            raise ConfigError(f"factor {self.name!r}: levels must be >= 1")

    @property
    def n_codes(self) -> int:
        """Number of discrete cells the factor occupies in the label table."""
        return {"binary": 2, "multiclass": self.k, "continuous": self.levels}[self.kind]

    @property
    def embed_dim(self) -> int:
        return self.k if self.kind == "multiclass" else 1

    def codes(self, values: np.ndarray) -> np.ndarray:
        """Discretise values to integer cells 0..n_codes-1."""
        if self.kind == "continuous":
            idx = np.floor((np.asarray(values) + 1.0) / 2.0 * self.levels).astype(np.int64)
            return np.clip(idx, 0, self.levels - 1)
        return np.asarray(values).astype(np.int64)

    def embed(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values)
        if self.kind == "binary":
            return (2.0 * values - 1.0)[:, None]
        if self.kind == "multiclass":
            return np.eye(self.k)[values.astype(np.int64)]
        return values.astype(np.float64)[:, None]


@dataclass(frozen=True)
class GenerativeConfig:
    factors: tuple[FactorSpec, ...]
    input_dim: int = 32
    decoder_seed: int = 0
    label_seed: int = 0
    n_samples: int = 8000
    noise_std: float = 0.05
    n_classes: int = 4
    decoder_hidden: int = 64

    def __post_init__(self):
        object.__setattr__(self, "factors", tuple(self.factors))
        if not any(f.role == "concept" for f in self.factors):
            raise ConfigError("at least one concept factor is required")
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate factor names in {names}")
        total = sum(f.embed_dim for f in self.factors)
        if self.input_dim < total:
            raise ConfigError(f"input_dim {self.input_dim} < total factor dimension {total}")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")

    def by_role(self, role: str) -> list[FactorSpec]:
        return [f for f in self.factors if f.role == role]

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["factors"] = [asdict(f) for f in self.factors]
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GenerativeConfig":
        d = dict(d)
        d["factors"] = tuple(FactorSpec(**f) for f in d["factors"])
        return cls(**d)


def default_factor_config(**overrides) -> GenerativeConfig:
    factors = (
        FactorSpec("c_bin", "binary"),
        FactorSpec("c_multi", "multiclass", k=4),
        FactorSpec("c_cont", "continuous", levels=2),
        FactorSpec("n_task", "multiclass", k=4, role="task_nuisance"),
        FactorSpec("n_free", "multiclass", k=4, role="free_nuisance"),
    )
    return GenerativeConfig(factors=overrides.pop("factors", factors), **overrides)


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    concepts: list[np.ndarray]
    concept_specs: list[FactorSpec]
    nuisances: dict[str, np.ndarray] = field(default_factory=dict)
    nuisance_specs: dict[str, FactorSpec] = field(default_factory=dict)
    n_classes: int = 2
    split_tag: str = "all"
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.x)
        lengths = [len(self.y), *(len(c) for c in self.concepts), *(len(v) for v in self.nuisances.values())]
        if any(m != n for m in lengths):
            raise ConfigError(f"inconsistent sample counts: x has {n}, others {lengths}")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def input_dim(self) -> int:
        return self.x.shape[1]

    def subset(self, idx: np.ndarray, split_tag: str | None = None) -> "Dataset":
        return replace(
            self,
            x=self.x[idx],
            y=self.y[idx],
            concepts=[c[idx] for c in self.concepts],
            nuisances={k: v[idx] for k, v in self.nuisances.items()},
            split_tag=self.split_tag if split_tag is None else split_tag,
            meta=dict(self.meta),
        )

    def nuisance_names(self, role: str) -> list[str]:
        return [k for k, s in self.nuisance_specs.items() if s.role == role]

    def concept_codes(self) -> np.ndarray:
        """[N, m] integer cells (continuous concepts binned to their levels)."""
        return np.stack([s.codes(c) for s, c in zip(self.concept_specs, self.concepts)], axis=1)

    def concept_matrix(self) -> np.ndarray:
        """Binary as 0/1, multiclass one-hot, continuous raw; concatenated."""
        cols = []
        for s, c in zip(self.concept_specs, self.concepts):
            if s.kind == "multiclass":
                cols.append(np.eye(s.k)[c.astype(np.int64)])
            else:
                cols.append(np.asarray(c, dtype=np.float64)[:, None])
        return np.concatenate(cols, axis=1)


# -- factor datasets ------------------------------------------------------------


def _sample_factor(spec: FactorSpec, n: int, rng: np.random.Generator) -> np.ndarray:
    if spec.kind == "continuous":
        return rng.uniform(-1.0, 1.0, size=n)
    return rng.integers(0, spec.n_codes, size=n)


def frozen_decoder(config: GenerativeConfig):
    """Fixed random 2-hidden-layer tanh network from factor embeddings to x."""
    rng = stream(config.decoder_seed, "decoder")
    e = sum(f.embed_dim for f in config.factors)
    h = config.decoder_hidden
    w1 = rng.normal(0, 1.5 / np.sqrt(e), (e, h))
    b1 = rng.normal(0, 0.1, h)
    w2 = rng.normal(0, 1.5 / np.sqrt(h), (h, h))
    b2 = rng.normal(0, 0.1, h)
    w3 = rng.normal(0, 1.0 / np.sqrt(h), (h, config.input_dim))

    def decode(emb: np.ndarray) -> np.ndarray:
        return np.tanh(np.tanh(emb @ w1 + b1) @ w2 + b2) @ w3

    return decode


def make_label_table(config: GenerativeConfig) -> np.ndarray:
    """Random surjective map from (concept cells..., task-nuisance cells...) to labels."""
    axes = [f.n_codes for f in config.by_role("concept") + config.by_role("task_nuisance")]
    n_cells = int(np.prod(axes))
    if n_cells < config.n_classes:
        raise ConfigError(f"{n_cells} label cells cannot cover {config.n_classes} classes")
    rng = stream(config.label_seed, "labels")
    flat = rng.integers(0, config.n_classes, size=n_cells)
    # surjectivity: the first n_classes cells of a random order take every label once
    flat[rng.permutation(n_cells)[: config.n_classes]] = np.arange(config.n_classes)
    return flat.reshape(axes)


def bayes_accuracy(label_table: np.ndarray, n_concept_axes: int, n_classes: int) -> float:
    """Accuracy of the best predictor of y from the concept cells alone.

    Factors are independent and uniform over their cells, so every
    (concept cell, nuisance cell) pair is equally likely.
    """
    table = label_table.reshape(int(np.prod(label_table.shape[:n_concept_axes])), -1)
    counts = np.stack([(table == k).sum(axis=1) for k in range(n_classes)], axis=1)
    return float((counts.max(axis=1) / table.shape[1]).mean())


def make_factor_dataset(config: GenerativeConfig, seed: int) -> Dataset:
    concepts = config.by_role("concept")
    task_n = config.by_role("task_nuisance")
    rng = stream(seed, "data/factors")
    values = {f.name: _sample_factor(f, config.n_samples, rng) for f in config.factors}
    emb = np.concatenate([f.embed(values[f.name]) for f in config.factors], axis=1)
    x = frozen_decoder(config)(emb)
    if config.noise_std > 0:
        x = x + config.noise_std * stream(seed, "data/noise").standard_normal(x.shape)

    table = make_label_table(config)
    cells = tuple(f.codes(values[f.name]) for f in concepts + task_n)
    y = table[cells].astype(np.int64)

    nuisances = [f for f in config.factors if f.role != "concept"]
    return Dataset(
        x=x,
        y=y,
        concepts=[values[f.name] for f in concepts],
        concept_specs=list(concepts),
        nuisances={f.name: values[f.name] for f in nuisances},
        nuisance_specs={f.name: f for f in nuisances},
        n_classes=config.n_classes,
        meta={
            "kind": "factor",
            "config": config.to_dict(),
            "seed": int(seed),
            "label_table": table,
            "bayes_accuracy_c": bayes_accuracy(table, len(concepts), config.n_classes),
        },
    )


# -- spiral -----------------------------------------------------------------------

SPIRAL_SPAN = 1.5 * np.pi


def spiral_arm(cls: int, t: np.ndarray, n_arms: int = 4) -> np.ndarray:
    """Point on arm ``cls`` at parameter t in [0, 1]: radius t, angle offset per arm."""
    angle = 2 * np.pi * cls / n_arms + SPIRAL_SPAN * t
    return np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)


def make_spiral_dataset(counts: Sequence[int] = (2000, 200, 200, 200), noise_std: float = 0.05, seed: int = 0) -> Dataset:
    counts = [int(c) for c in counts]
    if len(counts) < 2 or min(counts) < 1:
        raise ConfigError(f"spiral needs >= 2 arms with >= 1 point each, got {counts}")
    rng = stream(seed, "data/spiral")
    xs, ys = [], []
    for cls, n in enumerate(counts):
        t = rng.uniform(0.0, 1.0, size=n)
        pts = spiral_arm(cls, t, len(counts))
        if noise_std > 0:
            pts = pts + noise_std * rng.standard_normal(pts.shape)
        xs.append(pts)
        ys.append(np.full(n, cls, dtype=np.int64))
    y = np.concatenate(ys)
    spec = FactorSpec("class", "multiclass", k=len(counts))
    return Dataset(
        x=np.concatenate(xs),
        y=y,
        concepts=[y.copy()],
        concept_specs=[spec],
        n_classes=len(counts),
        meta={"kind": "spiral", "counts": counts, "noise_std": float(noise_std), "seed": int(seed)},
    )


def make_bimodal_prior(
    weights: Sequence[float], means: Sequence[float], sigmas: Sequence[float], n: int, seed: int = 0
) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    mu = np.asarray(means, dtype=np.float64)
    sd = np.asarray(sigmas, dtype=np.float64)
    if not (w.shape == mu.shape == sd.shape == (2,)):
        raise ConfigError("a bimodal prior needs exactly two weights, means and sigmas")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ConfigError(f"mixture weights must be non-negative and sum to 1, got {list(w)}")
    if np.any(sd <= 0):
        raise ConfigError("mixture sigmas must be positive")
    rng = stream(seed, "data/bimodal")
    comp = rng.choice(2, size=n, p=w)
    return mu[comp] + sd[comp] * rng.standard_normal(n)


# -- splitting --------------------------------------------------------------------


def _largest_remainder(quotas: np.ndarray, total: int) -> np.ndarray:
    base = np.floor(quotas).astype(np.int64)
    short = total - base.sum()
    order = np.argsort(-(quotas - base), kind="stable")
    base[order[:short]] += 1
    return base


def _stratified_counts(class_sizes: np.ndarray, r: np.ndarray) -> np.ndarray:
    """[classes, parts] counts with every cell within 1 of r_p * n_k and part
    totals equal to the largest-remainder rounding of r_p * n."""
    quotas = np.outer(class_sizes, r)
    floor = np.floor(quotas + 1e-9).astype(np.int64)
    counts = floor.copy()
    totals = _largest_remainder(r * class_sizes.sum(), int(class_sizes.sum()))
    need_row = class_sizes - counts.sum(axis=1)
    need_col = totals - counts.sum(axis=0)
    # greedy bipartite realisation: each class hands its leftover units to the
    # parts with the largest outstanding demand, at most one unit per part
    for k in np.argsort(-need_row, kind="stable"):
        for _ in range(need_row[k]):
            free = [p for p in np.argsort(-need_col, kind="stable") if counts[k, p] == floor[k, p]]
            p = free[0] if free else int(np.argmax(need_col))
            counts[k, p] += 1
            need_col[p] -= 1
    return counts


def split(dataset: Dataset, ratios: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified train/val/test partition.

    Per class, each part receives floor or ceil of its share; part sizes are
    the largest-remainder rounding of the global shares.
    """
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (3,) or np.any(r < 0) or r.sum() <= 0:
        raise ConfigError(f"ratios must be three non-negative numbers, got {list(ratios)}")
    if abs(r.sum() - 1.0) > 1e-6:
        raise ConfigError(f"ratios must sum to 1, got {r.sum()}")
    r = r / r.sum()
    rng = stream(seed, "split")
    classes = np.unique(dataset.y)
    members = [np.flatnonzero(dataset.y == c) for c in classes]
    counts = _stratified_counts(np.array([len(m) for m in members]), r)
    parts: list[list[np.ndarray]] = [[], [], []]
    for idx, row in zip(members, counts):
        idx = idx[rng.permutation(len(idx))]
        for p, chunk in enumerate(np.split(idx, np.cumsum(row)[:2])):
            parts[p].append(chunk)
    parts = [np.concatenate(p) if p else np.array([], dtype=np.int64) for p in parts]
    warnings: list[str] = []
    out = []
    for tag, part in zip(("train", "val", "test"), parts):
        part = np.sort(part)
        sub = dataset.subset(part, tag)
        if len(part):
            missing = sorted(set(np.unique(dataset.y).tolist()) - set(np.unique(sub.y).tolist()))
            if missing:
                warnings.append(f"{tag} split has no samples of classes {missing}")
        out.append(sub)
    for w in warnings:
        log.warning(w)
    for sub in out:
        sub.meta["split_warnings"] = list(warnings)
    return out[0], out[1], out[2]


# -- CSV round trip ---------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset_csv(dataset: Dataset, path: str | Path) -> tuple[Path, Path]:
    """Write ``path`` (CSV) and a JSON sidecar next to it; returns both paths."""
    path = Path(path)
    sidecar = path.with_suffix(".json")
    factor_names = [s.name for s in dataset.concept_specs] + list(dataset.nuisances)
    header = [f"x{i}" for i in range(dataset.input_dim)] + ["y"] + factor_names
    columns = [dataset.concepts[i] for i in range(len(dataset.concept_specs))] + list(dataset.nuisances.values())
    specs = list(dataset.concept_specs) + list(dataset.nuisance_specs.values())
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(len(dataset)):
            row = [_fmt(v) for v in dataset.x[i]] + [str(int(dataset.y[i]))]
            for spec, col in zip(specs, columns):
                row.append(_fmt(col[i]) if spec.kind == "continuous" else str(int(col[i])))
            writer.writerow(row)
    meta = {k: v for k, v in dataset.meta.items() if k != "label_table"}
    if "label_table" in dataset.meta:
        meta["label_table"] = {
            "shape": list(dataset.meta["label_table"].shape),
            "values": dataset.meta["label_table"].ravel().tolist(),
        }
    side = {
        "concept_specs": [asdict(s) for s in dataset.concept_specs],
        "nuisance_specs": [asdict(s) for s in dataset.nuisance_specs.values()],
        "n_classes": dataset.n_classes,
        "split_tag": dataset.split_tag,
        "meta": meta,
    }
    sidecar.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return path, sidecar


def load_dataset_csv(path: str | Path) -> Dataset:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    concept_specs = [FactorSpec(**s) for s in side["concept_specs"]]
    nuisance_specs = {s["name"]: FactorSpec(**s) for s in side["nuisance_specs"]}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [r for r in reader]
    cols = {name: [r[i] for r in rows] for i, name in enumerate(header)}
    xcols = [h for h in header if h.startswith("x") and h[1:].isdigit()]
    x = np.array([[float(v) for v in cols[h]] for h in xcols]).T.reshape(len(rows), len(xcols))

    def column(spec: FactorSpec) -> np.ndarray:
        if spec.kind == "continuous":
            return np.array([float(v) for v in cols[spec.name]])
        return np.array([int(v) for v in cols[spec.name]], dtype=np.int64)

    meta = dict(side["meta"])
    if "label_table" in meta:
        lt = meta["label_table"]
        meta["label_table"] = np.array(lt["values"], dtype=np.int64).reshape(lt["shape"])
    return Dataset(
        x=x,
        y=np.array([int(v) for v in cols["y"]], dtype=np.int64),
        concepts=[column(s) for s in concept_specs],
        concept_specs=concept_specs,
        nuisances={k: column(s) for k, s in nuisance_specs.items()},
        nuisance_specs=nuisance_specs,
        n_classes=int(side["n_classes"]),
        split_tag=side["split_tag"],
        meta=meta,
    )

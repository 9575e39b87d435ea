"""Encoder, heads and per-variant losses for VM, CBM, MCBM and HCBM.

All variants share an MLP encoder producing ``mu``; ``z`` is a Gaussian
sample around it with scale ``sigma_x`` (0 for the deterministic baselines).
The latent is partitioned into one contiguous block per concept.

* VM   - task head on z only.
* CBM  - binary blocks read out through sigmoid(z_j), continuous blocks through
  the identity; multiclass concepts are split one-vs-rest.
* MCBM - native multiclass blocks, small MLP concept heads, and a KL pull of
  each block towards a fixed prototype g^z(c_j).
* HCBM - CBM-style heads whose probabilities are thresholded at 0.5; the task
  head only sees the binarised concepts.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import MLP, Parameter, Tensor

VARIANTS = ("VM", "CBM", "MCBM", "HCBM")
TASK_KINDS = ("multiclass", "binary", "continuous")


class ModelConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ConceptSpec:
    kind: str
    k: int = 2
    name: str = ""
    source: int = -1
    source_class: int | None = None
    threshold: float | None = None

    def __post_init__(self):
        if self.kind not in ("binary", "multiclass", "continuous"):
            raise ModelConfigError(f"unknown concept kind {self.kind!r}")
        if self.kind == "multiclass" and self.k < 2:
            raise ModelConfigError("multiclass concepts need k >= 2")

    @property
    def block_dim(self) -> int:
        return self.k if self.kind == "multiclass" else 1

    @classmethod
    def from_factor(cls, factor, index: int) -> "ConceptSpec":
        return cls(kind=factor.kind, k=factor.k if factor.kind == "multiclass" else 2, name=factor.name, source=index)


def one_vs_rest(specs: Sequence[ConceptSpec], binarize_continuous: bool = False) -> tuple[list[ConceptSpec], list[str]]:
    """Split multiclass(k) specs into k binary specs; optionally threshold
    continuous specs at 0. Returns the expanded list and human-readable notes."""
    out: list[ConceptSpec] = []
    notes: list[str] = []
    for j, s in enumerate(specs):
        src = s.source if s.source >= 0 else j
        if s.kind == "multiclass":
            out.extend(
                ConceptSpec("binary", name=f"{s.name}=={c}", source=src, source_class=c) for c in range(s.k)
            )
            notes.append(f"concept {s.name or j} (multiclass {s.k}) expanded one-vs-rest into {s.k} binary concepts")
        elif s.kind == "continuous" and binarize_continuous:
            out.append(ConceptSpec("binary", name=f"{s.name}>0", source=src, threshold=0.0))
            notes.append(f"concept {s.name or j} (continuous) binarised as value > 0")
        else:
            out.append(ConceptSpec(s.kind, s.k, s.name, src, s.source_class, s.threshold))
    return out, notes


@dataclass(frozen=True)
class Block:
    concept_index: int
    offset: int
    dim: int

    @property
    def stop(self) -> int:
        return self.offset + self.dim


@dataclass(frozen=True)
class LatentLayout:
    blocks: tuple[Block, ...]
    total_dim: int

    @classmethod
    def from_specs(cls, specs: Sequence[ConceptSpec]) -> "LatentLayout":
        blocks, offset = [], 0
        for j, s in enumerate(specs):
            blocks.append(Block(j, offset, s.block_dim))
            offset += s.block_dim
        return cls(tuple(blocks), offset)

    def slice(self, j: int) -> slice:
        b = self.blocks[j]
        return slice(b.offset, b.stop)


def representation_target(spec: ConceptSpec, c_j, lam: float = 3.0) -> np.ndarray:
    """Prototype mean of q(z_j | c_j): +-lam for binary, lam*one_hot for
    multiclass, lam*c for continuous. Vectorised over a leading batch axis."""
    c = np.asarray(c_j)
    scalar = c.ndim == 0
    c = np.atleast_1d(c)
    if spec.kind == "binary":
        if np.any((c != 0) & (c != 1)):
            raise dc.DomainError("binary concept values must be 0 or 1")
        out = np.where(c == 1, lam, -lam).astype(np.float64)[:, None]
    elif spec.kind == "multiclass":
        if np.any((c < 0) | (c >= spec.k) | (c != np.round(c))):
            raise dc.DomainError(f"class index out of range for multiclass({spec.k})")
        out = lam * np.eye(spec.k)[c.astype(np.int64)]
    else:
        out = lam * c.astype(np.float64)[:, None]
    return out[0] if scalar else out


def concept_encoding(spec: ConceptSpec, c_j) -> np.ndarray:
    """Input features for a learnable representation head."""
    c = np.asarray(c_j)
    if spec.kind == "multiclass":
        return np.eye(spec.k)[c.astype(np.int64)]
    return c.astype(np.float64)[:, None]


@dataclass
class Batch:
    x: np.ndarray
    y: np.ndarray
    concepts: list[np.ndarray]

    @classmethod
    def from_dataset(cls, ds, idx=None) -> "Batch":
        if idx is None:
            return cls(ds.x, ds.y, list(ds.concepts))
        return cls(ds.x[idx], ds.y[idx], [c[idx] for c in ds.concepts])

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class LossParts:
    total: Tensor
    task: Tensor
    concept: list[Tensor] = field(default_factory=list)
    kl: list[Tensor] = field(default_factory=list)

    def as_floats(self) -> dict[str, Any]:
        return {
            "total": float(self.total.data),
            "task": float(self.task.data),
            "concept": [float(t.data) for t in self.concept],
            "kl": [float(t.data) for t in self.kl],
        }


ZERO = Tensor(0.0)


class ModelBundle:
    """Parameters, layout and loss weights of one trained (or trainable) model."""

    def __init__(
        self,
        variant: str,
        source_specs: list[ConceptSpec],
        input_dim: int,
        n_classes: int,
        encoder_hidden: Sequence[int] = (64, 64),
        task_hidden: Sequence[int] = (64,),
        concept_hidden: int | None = None,
        task_kind: str = "multiclass",
        total_dim: int | None = None,
        beta: float = 1.0,
        gamma: float = 0.0,
        lam: float = 3.0,
        sigma_x: float | None = None,
        sigma_zhat: float = 1.0,
        sigma_y: float = 1.0,
        sigma_c: float = 1.0,
        learnable_rep: bool = False,
        seed: int = 0,
    ):
        if variant not in VARIANTS:
            raise ModelConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        if task_kind not in TASK_KINDS:
            raise ModelConfigError(f"unknown task kind {task_kind!r}")
        if beta < 0 or gamma < 0:
            raise ModelConfigError("beta and gamma must be >= 0")
        self.variant = variant
        self.source_specs = list(source_specs)
        self.input_dim = int(input_dim)
        self.n_classes = int(n_classes)
        self.task_kind = task_kind
        self.encoder_hidden = [int(h) for h in encoder_hidden]
        self.task_hidden = [int(h) for h in task_hidden]
        self.concept_hidden = concept_hidden
        self.lam = float(lam)
        self.sigma_zhat = float(sigma_zhat)
        self.sigma_y = float(sigma_y)
        self.sigma_c = float(sigma_c)
        self.learnable_rep = bool(learnable_rep)
        self.seed = int(seed)
        self.notes: list[str] = []

        if variant == "VM":
            self.beta, self.gamma = 0.0, 0.0
            self.concept_specs: list[ConceptSpec] = []
            if total_dim is None:
                if not self.source_specs:
                    raise ModelConfigError("VM needs total_dim or concept specs to size the latent")
                total_dim = LatentLayout.from_specs(self.source_specs).total_dim
            self.layout = LatentLayout((), int(total_dim))
        else:
            if not self.source_specs:
                raise ModelConfigError(f"{variant} needs at least one concept")
            if variant == "CBM":
                self.concept_specs, self.notes = one_vs_rest(self.source_specs)
            elif variant == "HCBM":
                self.concept_specs, self.notes = one_vs_rest(self.source_specs, binarize_continuous=True)
            else:
                self.concept_specs = [
                    ConceptSpec(s.kind, s.k, s.name, s.source if s.source >= 0 else j)
                    for j, s in enumerate(self.source_specs)
                ]
            self.layout = LatentLayout.from_specs(self.concept_specs)
            self.beta = float(beta)
            self.gamma = float(gamma) if variant == "MCBM" else 0.0
            if variant != "MCBM" and gamma > 0:
                raise ModelConfigError(f"{variant} has no representation term; gamma must be 0")

        default_sigma = 1.0 if variant == "MCBM" else 0.0
        self.sigma_x = default_sigma if sigma_x is None else float(sigma_x)
        if self.sigma_x < 0:
            raise ModelConfigError("sigma_x must be >= 0")
        if self.gamma > 0 and self.sigma_x == 0:
            raise ModelConfigError("gamma > 0 needs sigma_x > 0: the KL to a point mass is undefined")

        self._build()

    # -- construction ------------------------------------------------------
    @property
    def total_dim(self) -> int:
        return self.layout.total_dim

    @property
    def n_task_outputs(self) -> int:
        if self.task_kind == "multiclass":
            return self.n_classes
        return 1 if self.task_kind == "binary" else self.n_classes

    def _concept_head_sizes(self, spec: ConceptSpec) -> list[int]:
        out = spec.k if spec.kind == "multiclass" else 1
        # width k is too narrow to become confident at the prototypes within the
        # default schedule; 8 is the floor
        hidden = self.concept_hidden or (max(spec.k, 8) if spec.kind == "multiclass" else 8)
        return [spec.block_dim, hidden, out]

    def _build(self) -> None:
        s = self.seed
        self.encoder = MLP("encoder", [self.input_dim, *self.encoder_hidden, self.total_dim], s)
        task_in = len(self.concept_specs) if self.variant == "HCBM" else self.total_dim
        self.task_head = MLP("task_head", [task_in, *self.task_hidden, self.n_task_outputs], s)
        self.concept_heads: list[MLP | None] = []
        self.rep_heads: list[MLP | None] = []
        for j, spec in enumerate(self.concept_specs):
            if self.variant == "MCBM":
                self.concept_heads.append(MLP(f"concept_head.{j}", self._concept_head_sizes(spec), s))
            else:
                self.concept_heads.append(None)
            if self.variant == "MCBM" and self.learnable_rep:
                self.rep_heads.append(MLP(f"rep_head.{j}", [spec.block_dim, 3, spec.block_dim], s))
            else:
                self.rep_heads.append(None)

    def modules(self) -> dict[str, MLP]:
        mods = {"encoder": self.encoder, "task_head": self.task_head}
        for j, h in enumerate(self.concept_heads):
            if h is not None:
                mods[f"concept_head.{j}"] = h
        for j, h in enumerate(self.rep_heads):
            if h is not None:
                mods[f"rep_head.{j}"] = h
        return mods

    def parameters(self, groups: Sequence[str] | None = None) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for key, mod in self.modules().items():
            if groups is not None and key.split(".")[0] not in groups:
                continue
            for p in mod.parameters():
                out[p.name] = p
        return out

    def n_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters().values())

    def descriptor(self) -> dict[str, Any]:
        return {
            "variant": self.variant,
            "source_specs": [asdict(s) for s in self.source_specs],
            "concept_specs": [asdict(s) for s in self.concept_specs],
            "layout": [asdict(b) for b in self.layout.blocks],
            "total_dim": self.total_dim,
            "input_dim": self.input_dim,
            "n_classes": self.n_classes,
            "task_kind": self.task_kind,
            "architecture": {
                "encoder_hidden": self.encoder_hidden,
                "task_hidden": self.task_hidden,
                "concept_hidden": self.concept_hidden,
                "learnable_rep": self.learnable_rep,
            },
            "beta": self.beta,
            "gamma": self.gamma,
            "lam": self.lam,
            "sigma_x": self.sigma_x,
            "sigma_zhat": self.sigma_zhat,
            "sigma_y": self.sigma_y,
            "sigma_c": self.sigma_c,
            "seed": self.seed,
            "notes": list(self.notes),
        }

    @classmethod
    def from_descriptor(cls, d: dict[str, Any]) -> "ModelBundle":
        arch = d["architecture"]
        return cls(
            variant=d["variant"],
            source_specs=[ConceptSpec(**s) for s in d["source_specs"]],
            input_dim=d["input_dim"],
            n_classes=d["n_classes"],
            encoder_hidden=arch["encoder_hidden"],
            task_hidden=arch["task_hidden"],
            concept_hidden=arch["concept_hidden"],
            task_kind=d["task_kind"],
            total_dim=d["total_dim"],
            beta=d["beta"],
            gamma=d["gamma"],
            lam=d["lam"],
            sigma_x=d["sigma_x"],
            sigma_zhat=d["sigma_zhat"],
            sigma_y=d["sigma_y"],
            sigma_c=d["sigma_c"],
            learnable_rep=arch["learnable_rep"],
            seed=d["seed"],
        )

    def clone(self) -> "ModelBundle":
        other = ModelBundle.from_descriptor(self.descriptor())
        for name, p in other.parameters().items():
            p.data = self.parameters()[name].data.copy()
        return other

    # -- concept bookkeeping ------------------------------------------------
    def concept_targets(self, concepts: Sequence[np.ndarray]) -> list[np.ndarray]:
        """Per-block supervision derived from the original concept columns."""
        out = []
        for spec in self.concept_specs:
            c = np.asarray(concepts[spec.source])
            if spec.source_class is not None:
                out.append((c == spec.source_class).astype(np.float64))
            elif spec.threshold is not None:
                out.append((c > spec.threshold).astype(np.float64))
            else:
                out.append(c)
        return out


def build_model(
    variant: str,
    concept_specs: Sequence[ConceptSpec] | Sequence[Any],
    input_dim: int,
    n_classes: int,
    encoder_hidden: Sequence[int] = (64, 64),
    task_hidden: Sequence[int] = (64,),
    seed: int = 0,
    **kwargs,
) -> ModelBundle:
    """Build a fresh model. ``concept_specs`` may be ConceptSpecs or datagen
    FactorSpecs (converted in order)."""
    specs = [s if isinstance(s, ConceptSpec) else ConceptSpec.from_factor(s, j) for j, s in enumerate(concept_specs)]
    return ModelBundle(
        variant, specs, input_dim, n_classes, encoder_hidden=encoder_hidden, task_hidden=task_hidden, seed=seed, **kwargs
    )


# -- forward pieces -------------------------------------------------------------


def encode(model: ModelBundle, x, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Returns (mu, z). Without an rng, or with sigma_x == 0, z is mu."""
    x = dc.as_tensor(x)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise dc.ShapeError(f"expected inputs [B, {model.input_dim}], got {x.shape}")
    mu = model.encoder(x)
    if rng is None or model.sigma_x == 0:
        return mu, mu
    return mu, dc.gaussian_reparam_sample(mu, model.sigma_x, rng)


def block(model: ModelBundle, z: Tensor, j: int) -> Tensor:
    return z[:, model.layout.slice(j)]


def concept_outputs(model: ModelBundle, z: Tensor) -> list[Tensor]:
    """Per block: binary -> probability [B,1], multiclass -> logits [B,k],
    continuous -> value [B,1]."""
    outs = []
    for j, spec in enumerate(model.concept_specs):
        zj = block(model, z, j)
        head = model.concept_heads[j]
        h = zj if head is None else head(zj)
        outs.append(dc.sigmoid(h) if spec.kind == "binary" else h)
    return outs


def concept_probabilities(model: ModelBundle, z: Tensor) -> list[np.ndarray]:
    """Like concept_outputs but softmax applied to multiclass logits; plain arrays."""
    out = []
    for spec, o in zip(model.concept_specs, concept_outputs(model, z)):
        out.append(dc.softmax(o, axis=1).data if spec.kind == "multiclass" else o.data)
    return out


def binarize(model: ModelBundle, z: Tensor) -> tuple[np.ndarray, np.ndarray]:
    probs = np.concatenate(concept_probabilities(model, z), axis=1)
    return probs, (probs >= 0.5).astype(np.float64)


def task_logits(model: ModelBundle, z: Tensor) -> Tensor:
    if model.variant == "HCBM":
        _, cb = binarize(model, z)
        return model.task_head(Tensor(cb))
    return model.task_head(z)


def task_logits_from_binary(model: ModelBundle, cb: np.ndarray) -> Tensor:
    return model.task_head(Tensor(cb))


def predict(model: ModelBundle, logits: Tensor) -> np.ndarray:
    if model.task_kind == "multiclass":
        return logits.data.argmax(axis=1)
    if model.task_kind == "binary":
        return (logits.data[:, 0] >= 0).astype(np.int64)
    return logits.data


def hcbm_forward(model: ModelBundle, x) -> tuple[np.ndarray, np.ndarray, Tensor]:
    """(concept probabilities, binarised concepts, task logits) for an HCBM."""
    if model.variant != "HCBM":
        raise ModelConfigError(f"hcbm_forward needs an HCBM, got {model.variant}")
    if any(s.kind != "binary" for s in model.concept_specs):
        raise ModelConfigError("HCBM concepts must all be binary")
    mu, _ = encode(model, x)
    probs, cb = binarize(model, mu)
    return probs, cb, task_logits_from_binary(model, cb)


def _task_loss(model: ModelBundle, logits: Tensor, y: np.ndarray) -> Tensor:
    if model.task_kind == "multiclass":
        return dc.cross_entropy(logits, y)
    if model.task_kind == "binary":
        return dc.binary_cross_entropy(dc.sigmoid(logits), np.asarray(y, dtype=np.float64)[:, None])
    target = np.asarray(y, dtype=np.float64).reshape(logits.shape)
    return dc.mse(logits, target) * (0.5 / model.sigma_y**2)


def _concept_loss(model: ModelBundle, spec: ConceptSpec, out: Tensor, target: np.ndarray) -> Tensor:
    if spec.kind == "binary":
        return dc.binary_cross_entropy(out, target[:, None])
    if spec.kind == "multiclass":
        return dc.cross_entropy(out, target)
    return dc.mse(out, target.astype(np.float64)[:, None]) * (0.5 / model.sigma_c**2)


def rep_target(model: ModelBundle, j: int, c_j: np.ndarray) -> Tensor:
    spec = model.concept_specs[j]
    head = model.rep_heads[j]
    if head is None:
        return Tensor(representation_target(spec, c_j, model.lam))
    return head(Tensor(concept_encoding(spec, c_j)))


def loss_total(
    model: ModelBundle,
    batch: Batch,
    rng: np.random.Generator | None,
    stage: str | None = None,
    n_samples: int = 1,
) -> LossParts:
    """task + beta * sum(concept) + gamma * sum(kl), all batch means.

    ``stage`` restricts HCBM training: "concepts" drops the task term, "task"
    drops the concept term. ``n_samples`` reparameterisation draws are averaged.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    if model.gamma > 0 and model.sigma_x == 0:
        raise ModelConfigError("gamma > 0 needs sigma_x > 0")
    targets = model.concept_targets(batch.concepts) if model.concept_specs else []
    use_task = stage != "concepts"
    use_concepts = stage != "task" and model.variant != "VM"

    task_terms, concept_terms = [], [[] for _ in model.concept_specs]
    mu = None
    for _ in range(max(1, n_samples)):
        mu, z = encode(model, batch.x, rng)
        if use_task:
            task_terms.append(_task_loss(model, task_logits(model, z), batch.y))
        if use_concepts:
            for j, (spec, out) in enumerate(zip(model.concept_specs, concept_outputs(model, z))):
                concept_terms[j].append(_concept_loss(model, spec, out, targets[j]))
    inv = 1.0 / max(1, n_samples)
    task = _mean_terms(task_terms, inv)
    concept = [_mean_terms(t, inv) for t in concept_terms] if use_concepts else []

    kl: list[Tensor] = []
    if model.variant == "MCBM":
        for j in range(len(model.concept_specs)):
            per_row = dc.kl_diag_gaussians(
                block(model, mu, j), model.sigma_x, rep_target(model, j, targets[j]), model.sigma_zhat
            )
            kl.append(per_row.mean())

    total = task
    if concept and model.beta:
        total = total + _sum(concept) * model.beta
    if kl and model.gamma:
        total = total + _sum(kl) * model.gamma
    return LossParts(total=total, task=task, concept=concept, kl=kl)


def _mean_terms(terms: list[Tensor], inv: float) -> Tensor:
    if not terms:
        return ZERO
    return terms[0] if len(terms) == 1 else _sum(terms) * inv


def _sum(terms: list[Tensor]) -> Tensor:
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out

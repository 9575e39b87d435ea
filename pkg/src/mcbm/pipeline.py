"""Experiment configs, end-to-end runners and run manifests.

The CLI is a thin argparse layer over this module; the acceptance tests call
the same runners directly.
"""

from __future__ import annotations

import hashlib
import json
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from . import datagen, interventions as iv, metrics, models, training
from .datagen import ConfigError, FactorSpec, GenerativeConfig
from .diffcore import stream


# -- config ---------------------------------------------------------------------------

DATASET_KEYS = {
    "kind", "path", "factors", "input_dim", "decoder_seed", "label_seed", "n_samples", "noise_std",
    "n_classes", "decoder_hidden", "counts", "split",
}
MODEL_KEYS = {
    "variant", "beta", "gamma", "lam", "sigma_x", "sigma_zhat", "sigma_y", "sigma_c",
    "encoder_hidden", "task_hidden", "concept_hidden", "learnable_rep", "total_dim",
}
METRIC_KEYS = {"which", "probe", "split"}
PROBE_KEYS = {"hidden_layers", "epochs", "lr", "batch_size", "seed", "train_fraction", "standardize"}
INTERVENTION_KEYS = {"policies", "fractions", "n_seeds"}
SWEEP_KEYS = {"gamma", "variants", "seeds"}
TOP_KEYS = {"seed", "output_dir", "dataset", "model", "train", "metrics", "interventions", "sweep"}

GAMMA_LEVELS = {"low": 1.0, "medium": 3.0, "high": 5.0}
SPIRAL_TRAIN = {"epochs": 200, "learning_rate": 1e-2, "step_size": 100}


class ConfigLocationError(ConfigError):
    """Config error anchored to a line of the source document."""

    def __init__(self, msg: str, line: int | None = None, source: str | None = None):
        where = f"{source or 'config'}:{line}: " if line else f"{source or 'config'}: "
        super().__init__(where + msg)
        self.line = line


def _line_of(text: str, key: str) -> int | None:
    needle = f'"{key}"'
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return None


def _reject_unknown(section: dict, allowed: set, name: str, text: str, source: str) -> None:
    if not isinstance(section, dict):
        raise ConfigLocationError(f"section {name!r} must be an object", _line_of(text, name), source)
    for key in section:
        if key not in allowed:
            raise ConfigLocationError(
                f"unknown key {key!r} in section {name!r} (allowed: {', '.join(sorted(allowed))})",
                _line_of(text, key),
                source,
            )


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: dict[str, Any] = field(default_factory=lambda: {"kind": "factor"})
    model: dict[str, Any] = field(default_factory=lambda: {"variant": "MCBM", "gamma": 5.0})
    train: dict[str, Any] = field(default_factory=dict)
    metrics: dict[str, Any] = field(default_factory=dict)
    interventions: dict[str, Any] = field(default_factory=dict)
    sweep: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any], text: str = "", source: str = "config") -> "ExperimentConfig":
        _reject_unknown(d, TOP_KEYS, "<top level>", text, source)
        cfg = cls(**{k: v for k, v in d.items()})
        cfg.validate(text, source)
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as e:
            raise OSError(f"cannot read config {path}: {e}") from e
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigLocationError(f"invalid JSON: {e.msg} (column {e.colno})", e.lineno, str(path)) from e
        if not isinstance(raw, dict):
            raise ConfigLocationError("top level must be an object", 1, str(path))
        return cls.from_dict(raw, text, str(path))

    def validate(self, text: str = "", source: str = "config") -> None:
        """Check every section before any work starts."""
        _reject_unknown(self.dataset, DATASET_KEYS, "dataset", text, source)
        _reject_unknown(self.model, MODEL_KEYS, "model", text, source)
        _reject_unknown(self.metrics, METRIC_KEYS, "metrics", text, source)
        _reject_unknown(self.metrics.get("probe", {}), PROBE_KEYS, "probe", text, source)
        _reject_unknown(self.interventions, INTERVENTION_KEYS, "interventions", text, source)
        _reject_unknown(self.sweep, SWEEP_KEYS, "sweep", text, source)
        _reject_unknown(self.train, {f.name for f in fields(training.TrainConfig)}, "train", text, source)
        kind = self.dataset.get("kind", "factor")
        if kind not in ("factor", "spiral", "csv"):
            raise ConfigLocationError(f"unknown dataset kind {kind!r}", _line_of(text, "kind"), source)
        if kind == "csv" and "path" not in self.dataset:
            raise ConfigLocationError("csv datasets need a 'path'", _line_of(text, "dataset"), source)
        try:
            training.TrainConfig.from_dict(self.train_dict())
        except (models.ModelConfigError, TypeError) as e:
            raise ConfigLocationError(str(e), _line_of(text, "train"), source) from e
        variant = self.model.get("variant", "MCBM")
        if variant not in models.VARIANTS:
            raise ConfigLocationError(f"unknown variant {variant!r}", _line_of(text, "variant"), source)
        gamma = self.model.get("gamma", 0.0)
        if isinstance(gamma, str):
            if gamma not in GAMMA_LEVELS:
                raise ConfigLocationError(f"gamma level must be one of {sorted(GAMMA_LEVELS)}", _line_of(text, "gamma"), source)
            gamma = GAMMA_LEVELS[gamma]
        if variant != "MCBM" and gamma and gamma > 0:
            raise ConfigLocationError(f"{variant} has no representation term; gamma must be 0", _line_of(text, "gamma"), source)
        if variant == "MCBM" and gamma > 0 and self.model.get("sigma_x", 1.0) == 0:
            raise ConfigLocationError("gamma > 0 needs sigma_x > 0", _line_of(text, "sigma_x"), source)
        if kind == "factor":
            try:
                self.generative_config()
            except (ConfigError, TypeError, KeyError) as e:
                raise ConfigLocationError(str(e), _line_of(text, "dataset"), source) from e
        for v in self.sweep.get("variants", []):
            if v not in models.VARIANTS:
                raise ConfigLocationError(f"unknown sweep variant {v!r}", _line_of(text, "variants"), source)
        for p in self.interventions.get("policies", []):
            if p not in ("lowest_confidence", "random"):
                raise ConfigLocationError(f"unknown policy {p!r}", _line_of(text, "policies"), source)

    # -- section accessors ----
    def train_dict(self) -> dict[str, Any]:
        base = dict(SPIRAL_TRAIN) if self.dataset.get("kind") == "spiral" else {}
        base.update(self.train)
        base.setdefault("master_seed", self.seed)
        return base

    def generative_config(self) -> GenerativeConfig:
        d = {k: v for k, v in self.dataset.items() if k not in ("kind", "path", "counts", "split")}
        if "factors" in d:
            d["factors"] = tuple(FactorSpec(**f) for f in d["factors"])
            return GenerativeConfig(**d)
        return datagen.default_factor_config(**d)

    def probe_config(self) -> metrics.ProbeConfig:
        p = dict(self.metrics.get("probe", {}))
        if "hidden_layers" in p:
            p["hidden_layers"] = tuple(p["hidden_layers"])
        return metrics.ProbeConfig(**p)


# -- data and models ----------------------------------------------------------------


def build_dataset(cfg: ExperimentConfig, seed: int | None = None) -> datagen.Dataset:
    seed = cfg.seed if seed is None else seed
    kind = cfg.dataset.get("kind", "factor")
    if kind == "factor":
        return datagen.make_factor_dataset(cfg.generative_config(), seed)
    if kind == "spiral":
        return datagen.make_spiral_dataset(
            counts=cfg.dataset.get("counts", (2000, 200, 200, 200)),
            noise_std=cfg.dataset.get("noise_std", 0.05),
            seed=seed,
        )
    return datagen.load_dataset_csv(cfg.dataset["path"])


def split_dataset(cfg: ExperimentConfig, ds: datagen.Dataset, seed: int | None = None):
    ratios = cfg.dataset.get("split", (0.8, 0.1, 0.1))
    return datagen.split(ds, ratios, seed=cfg.seed if seed is None else seed)


def model_kwargs(model_cfg: dict[str, Any]) -> dict[str, Any]:
    kw = {k: v for k, v in model_cfg.items() if k != "variant"}
    if isinstance(kw.get("gamma"), str):
        kw["gamma"] = GAMMA_LEVELS[kw["gamma"]]
    if kw.get("gamma") is None:
        kw.pop("gamma", None)
    for key in ("encoder_hidden", "task_hidden"):
        if key in kw:
            kw[key] = tuple(kw[key])
    return kw


def make_model(model_cfg: dict[str, Any], ds: datagen.Dataset, seed: int) -> models.ModelBundle:
    return models.build_model(
        model_cfg.get("variant", "MCBM"), ds.concept_specs, ds.input_dim, ds.n_classes, seed=seed, **model_kwargs(model_cfg)
    )


@dataclass
class TrainedRun:
    label: str
    model: models.ModelBundle
    history: training.TrainHistory
    splits: tuple
    table: iv.PercentileTable | None
    seed: int


def train_one(cfg: ExperimentConfig, model_cfg: dict[str, Any], seed: int, splits=None, label: str = "") -> TrainedRun:
    if splits is None:
        splits = split_dataset(cfg, build_dataset(cfg, seed), seed)
    tr, va, _ = splits
    model = make_model(model_cfg, tr, seed)
    tcfg = training.TrainConfig.from_dict({**cfg.train_dict(), "master_seed": seed})
    model, hist = training.train(model, tr, tcfg, va)
    table = iv.fit_percentile_table(model, tr) if model.variant == "CBM" else None
    return TrainedRun(label or model.variant, model, hist, splits, table, seed)


def study_points(cfg: ExperimentConfig) -> list[tuple[str, dict[str, Any]]]:
    """Model points of a sweep: explicit variant list, gamma list, or the six-model default."""
    base = dict(cfg.model)
    if "gamma" in cfg.sweep:
        out = []
        for g in cfg.sweep["gamma"]:
            val = GAMMA_LEVELS[g] if isinstance(g, str) else float(g)
            out.append((f"MCBM(gamma={g})", {**base, "variant": "MCBM", "gamma": val}))
        return out
    if "variants" in cfg.sweep:
        return [(v, {**_strip_mcbm(base, v), "variant": v}) for v in cfg.sweep["variants"]]
    return default_points(base)


def _strip_mcbm(base: dict[str, Any], variant: str) -> dict[str, Any]:
    d = dict(base)
    if variant != "MCBM":
        d.pop("gamma", None)
        d.pop("sigma_x", None)
        d.pop("learnable_rep", None)
    return d


def default_points(base: dict[str, Any] | None = None) -> list[tuple[str, dict[str, Any]]]:
    base = dict(base or {})
    pts = [(v, {**_strip_mcbm(base, v), "variant": v}) for v in ("VM", "CBM", "HCBM")]
    for level, g in GAMMA_LEVELS.items():
        pts.append((f"MCBM({level})", {**base, "variant": "MCBM", "gamma": g}))
    return pts


def metric_split(cfg: ExperimentConfig, splits) -> datagen.Dataset:
    which = cfg.metrics.get("split", "train")
    return {"train": splits[0], "val": splits[1], "test": splits[2]}[which]


def evaluate_run(cfg: ExperimentConfig, run: TrainedRun, with_metrics: bool = True, with_curves: bool = True) -> dict[str, Any]:
    tr, va, te = run.splits
    out: dict[str, Any] = {"label": run.label, "variant": run.model.variant, "seed": run.seed, "gamma": run.model.gamma}
    ev = training.evaluate(run.model, te, with_losses=False)
    out["test_task_accuracy"] = ev["task_accuracy"]
    out["test_concept_accuracy"] = ev["concept_accuracy"]
    out["test_mean_concept_accuracy"] = ev["mean_concept_accuracy"]
    out["continuous_concepts"] = ev["continuous_concepts"]
    out["bayes_accuracy_c"] = te.meta.get("bayes_accuracy_c")
    if with_metrics:
        rep = metrics.model_report(run.model, metric_split(cfg, run.splits), cfg.probe_config(), seed=run.seed)
        out["metrics"] = rep.to_dict()
    if with_curves and run.model.variant != "VM":
        icfg = cfg.interventions
        out["curves"] = {}
        for pol in icfg.get("policies", ["lowest_confidence", "random"]):
            c = iv.intervention_curve(
                run.model,
                te,
                pol,
                icfg.get("fractions", (0.0, 0.25, 0.5, 0.75, 1.0)),
                icfg.get("n_seeds", 5),
                run.table,
                seed=run.seed,
            )
            out["curves"][pol] = asdict(c)
    return out


def aggregate(rows: Sequence[dict[str, Any]], keys: Sequence[str]) -> list[dict[str, Any]]:
    """Mean and std per label over seeds for flat numeric columns."""
    labels = list(dict.fromkeys(r["label"] for r in rows))
    out = []
    for lab in labels:
        sub = [r for r in rows if r["label"] == lab]
        rec: dict[str, Any] = {"model": lab, "n_seeds": len(sub)}
        for k in keys:
            vals = [r[k] for r in sub if r.get(k) is not None]
            rec[f"{k}_mean"] = float(np.mean(vals)) if vals else None
            rec[f"{k}_std"] = float(np.std(vals)) if vals else None
        out.append(rec)
    return out


def flat_row(ev: dict[str, Any]) -> dict[str, Any]:
    row = {"label": ev["label"], "seed": ev["seed"], "task_accuracy": ev["test_task_accuracy"],
           "concept_accuracy": ev["test_mean_concept_accuracy"]}
    m = ev.get("metrics")
    if m:
        for name, u in m["urr"].items():
            row[f"urr_{name}"] = u
        row["mean_urr"] = m["mean_urr"]
        row["cka"] = m["cka"]
        row["disentanglement"] = m["disentanglement"]
    for pol, c in (ev.get("curves") or {}).items():
        row[f"err_f0_{pol}"] = c["mean_error"][0]
        row[f"err_f1_{pol}"] = c["mean_error"][-1]
    return row


def run_study(cfg: ExperimentConfig, seeds: Sequence[int], points=None, with_metrics=True, with_curves=True, threads: int = 1):
    """Train and evaluate every (seed, point) pair; returns the per-run evaluations."""
    points = points or study_points(cfg)
    jobs = [(s, lab, mc) for s in seeds for lab, mc in points]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as ex:
            futs = [ex.submit(_study_job, cfg.to_dict(), s, lab, mc, with_metrics, with_curves) for s, lab, mc in jobs]
            return [f.result() for f in futs]
    cache: dict[int, tuple] = {}
    out = []
    for s, lab, mc in jobs:
        if s not in cache:
            cache[s] = split_dataset(cfg, build_dataset(cfg, s), s)
        run = train_one(cfg, mc, s, cache[s], lab)
        out.append(evaluate_run(cfg, run, with_metrics, with_curves))
    return out


def _study_job(cfg_dict, seed, label, model_cfg, with_metrics, with_curves):
    cfg = ExperimentConfig(**cfg_dict)
    run = train_one(cfg, model_cfg, seed, None, label)
    return evaluate_run(cfg, run, with_metrics, with_curves)


# -- persistence --------------------------------------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class RunDir:
    """Append-only output directory: a file may be written once, or rewritten
    only with byte-identical content."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: list[Path] = []

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _commit(self, p: Path, data: bytes) -> Path:
        if p.exists():
            if p.read_bytes() != data:
                raise FileExistsError(f"{p} exists with different content; run directories are append-only")
        else:
            tmp = p.with_name(p.name + ".tmp")
            tmp.write_bytes(data)
            tmp.replace(p)
        self.files.append(p)
        return p

    def write_text(self, rel: str, text: str) -> Path:
        return self._commit(self.path(rel), text.encode())

    def write_json(self, rel: str, obj: Any) -> Path:
        return self.write_text(rel, json.dumps(metrics._jsonable(obj), indent=1, sort_keys=True) + "\n")

    def adopt(self, rel: str, writer) -> Path:
        """Let ``writer(tmp_path)`` produce a file, then commit it append-only."""
        p = self.path(rel)
        tmp = p.with_name(p.name + ".staging")
        writer(tmp)
        data = tmp.read_bytes()
        tmp.unlink()
        return self._commit(p, data)

    def manifest(self, command: str, cfg: ExperimentConfig | None, seed: int, started: float, extra: dict | None = None) -> Path:
        inventory = {}
        for p in dict.fromkeys(self.files):
            inventory[str(p.relative_to(self.root))] = sha256_file(p)
        doc = {
            "command": command,
            "artifact_version": __version__,
            "master_seed": seed,
            "config": cfg.to_dict() if cfg is not None else None,
            "wall_clock": {"started": started, "finished": time.time()},
            "files": inventory,
            **(extra or {}),
        }
        p = self.root / f"manifest_{command}.json"
        p.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
        return p


def write_rows_csv(rows: Sequence[dict[str, Any]], columns: Sequence[str] | None = None) -> str:
    import csv
    import io

    columns = list(columns or dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (format(r[k], ".17g") if isinstance(r.get(k), float) else r.get(k, "")) for k in columns})
    return buf.getvalue()


# -- commands -----------------------------------------------------------------------


def cmd_generate(cfg: ExperimentConfig, out: str | Path) -> Path:
    started = time.time()
    rd = RunDir(out)
    ds = build_dataset(cfg)
    with tempfile.TemporaryDirectory() as tmp:
        csv_path, side_path = datagen.save_dataset_csv(ds, Path(tmp) / "dataset.csv")
        rd.write_text("dataset.csv", csv_path.read_text())
        rd.write_text("dataset.json", side_path.read_text())
    return rd.manifest("generate", cfg, cfg.seed, started)


def cmd_train(cfg: ExperimentConfig, out: str | Path) -> Path:
    started = time.time()
    rd = RunDir(out)
    run = train_one(cfg, cfg.model, cfg.seed)
    extras = {"percentile_table": run.table.to_dict()} if run.table is not None else {}
    extras["dataset_seed"] = cfg.seed
    rd.adopt("checkpoint.json", lambda p: training.save_checkpoint(run.model, run.history, p, cfg.seed, extras))
    rd.adopt("history.csv", lambda p: run.history.to_csv(p))
    ev = evaluate_run(cfg, run, with_metrics=False, with_curves=False)
    rd.write_json("evaluation.json", ev)
    return rd.manifest("train", cfg, cfg.seed, started)


def load_run(run_dir: str | Path) -> tuple[ExperimentConfig, TrainedRun]:
    run_dir = Path(run_dir)
    man = json.loads((run_dir / "manifest_train.json").read_text())
    cfg = ExperimentConfig(**man["config"])
    model, hist, extras = training.load_checkpoint(run_dir / "checkpoint.json")
    splits = split_dataset(cfg, build_dataset(cfg, cfg.seed), cfg.seed)
    table = iv.PercentileTable.from_dict(extras["percentile_table"]) if "percentile_table" in extras else None
    return cfg, TrainedRun(model.variant, model, hist, splits, table, cfg.seed)


REPORTS = ("metrics", "interventions", "calibration", "bayes-demo", "bound-check")


def cmd_report(run_dir: str | Path | None, which: str, cfg: ExperimentConfig | None = None, out: str | Path | None = None) -> Path:
    if which not in REPORTS:
        raise ConfigError(f"unknown report {which!r}; expected one of {REPORTS}")
    started = time.time()
    if which in ("bayes-demo", "bound-check"):
        rd = RunDir(out or run_dir or ".")
        if which == "bayes-demo":
            demo = iv.bayes_posterior_demo()
            rd.adopt("reports/bayes_demo.csv", demo.to_csv)
            rd.write_json("reports/bayes_demo.json", demo.summary())
        else:
            rd.write_json("reports/bound_check.json", bound_check_suite(n_tables=100, seed=0))
        return rd.manifest(f"report-{which}", cfg, 0, started)

    if run_dir is None:
        raise ConfigError(f"report {which!r} needs a run directory")
    run_cfg, run = load_run(run_dir)
    rd = RunDir(out or run_dir)
    if which == "metrics":
        rep = metrics.model_report(run.model, metric_split(run_cfg, run.splits), run_cfg.probe_config(), seed=run.seed)
        rd.write_json("reports/metrics.json", rep.to_dict())
    elif which == "interventions":
        if run.model.variant == "VM":
            raise ConfigError("VM models have no concepts to intervene on")
        ev = evaluate_run(run_cfg, run, with_metrics=False, with_curves=True)
        for pol, c in ev["curves"].items():
            curve = iv.InterventionCurve(**c)
            rd.adopt(f"reports/curve_{pol}.csv", curve.to_csv)
    else:  # calibration
        _, _, te = run.splits
        if te.input_dim != 2:
            raise ConfigError("calibration reports need the spiral (2-D) dataset")
        rep = metrics.calibration_report(run.model, te.x, te.y, grid=metrics.grid_points())
        grid = rep.pop("grid")
        rd.adopt("reports/calibration_grid.csv", lambda p: metrics.write_grid_csv(grid, p))
        rd.write_json("reports/calibration.json", rep)
    return rd.manifest(f"report-{which}", run_cfg, run.seed, started)


SWEEP_COLUMNS = (
    "task_accuracy", "concept_accuracy", "urr_n_task", "urr_n_free", "mean_urr", "cka", "disentanglement",
    "err_f0_lowest_confidence", "err_f1_lowest_confidence", "err_f0_random", "err_f1_random",
)


def cmd_sweep(cfg: ExperimentConfig, out: str | Path, threads: int = 1) -> Path:
    started = time.time()
    rd = RunDir(out)
    seeds = cfg.sweep.get("seeds", [cfg.seed])
    evals = run_study(cfg, seeds, threads=threads)
    rows = [flat_row(e) for e in evals]
    keys = [k for k in SWEEP_COLUMNS if any(k in r for r in rows)]
    rd.write_text("sweep_runs.csv", write_rows_csv(rows, ["label", "seed", *keys]))
    rd.write_text("sweep_table.csv", write_rows_csv(aggregate(rows, keys)))
    rd.write_json("sweep_runs.json", evals)
    return rd.manifest("sweep", cfg, cfg.seed, started)


def rerun_manifest(manifest_path: str | Path, out: str | Path, threads: int = 1) -> dict[str, Any]:
    """Re-execute a manifest's command into ``out`` and compare file hashes."""
    manifest_path = Path(manifest_path)
    man = json.loads(manifest_path.read_text())
    cfg = ExperimentConfig(**man["config"]) if man.get("config") else None
    command = man["command"]
    if command == "generate":
        new = cmd_generate(cfg, out)
    elif command == "train":
        new = cmd_train(cfg, out)
    elif command == "sweep":
        new = cmd_sweep(cfg, out, threads)
    elif command.startswith("report-"):
        which = command[len("report-"):]
        if which in ("bayes-demo", "bound-check"):
            new = cmd_report(None, which, cfg, out)
        else:
            src = manifest_path.parent
            # report on a train run: replay the training first, then the report
            cmd_train(ExperimentConfig(**json.loads((src / "manifest_train.json").read_text())["config"]), out)
            new = cmd_report(out, which)
    else:
        raise ConfigError(f"cannot rerun command {command!r}")
    new_files = json.loads(Path(new).read_text())["files"]
    mismatched = sorted(k for k, h in man["files"].items() if new_files.get(k) != h)
    return {"reproduced": not mismatched, "mismatched": mismatched, "checked": len(man["files"])}


# -- information-bound suite ------------------------------------------------------------


def _random_stochastic(rng, rows, cols, sparsity: float = 0.0):
    a = rng.gamma(0.5, size=(rows, cols))
    if sparsity:
        a[rng.random((rows, cols)) < sparsity] = 0.0
        a[np.arange(rows), rng.integers(0, cols, rows)] += 1e-3
    return a / a.sum(axis=1, keepdims=True)


def bound_check_suite(n_tables: int = 100, seed: int = 0) -> dict[str, Any]:
    """Min gaps of the task/concept lower bounds and the conditional upper bound
    over random enumerable instances, plus a discretised-Gaussian instance."""
    rng = stream(seed, "bounds")
    gaps = {"task_lower": [], "concept_lower": [], "conditional_upper": []}
    for t in range(n_tables):
        nx, nz, ny = rng.integers(2, 9, size=3)
        p_xy = rng.gamma(0.5, size=(nx, ny))
        p_xy /= p_xy.sum()
        enc = _random_stochastic(rng, nx, nz, sparsity=0.2 if t % 2 else 0.0)
        dec = _random_stochastic(rng, nz, ny)
        gaps["task_lower"].append(metrics.variational_bound_check(p_xy, enc, dec)["gap"])
        nc = int(rng.integers(2, 5))
        p_xc = rng.gamma(0.5, size=(nx, nc))
        p_xc /= p_xc.sum()
        gaps["concept_lower"].append(metrics.variational_bound_check(p_xc, enc, _random_stochastic(rng, nz, nc))["gap"])
        gaps["conditional_upper"].append(metrics.conditional_bound_check(p_xc, enc, _random_stochastic(rng, nc, nz))["gap"])
    means = rng.normal(0, 3, size=12)
    c_of_x = (means > 0).astype(np.int64)
    gauss = metrics.conditional_bound_check(*metrics.discretized_gaussian_instance(means, c_of_x, 2))
    return {
        "n_tables": n_tables,
        "min_gap": {k: float(np.min(v)) for k, v in gaps.items()},
        "gaps": {k: [float(g) for g in v] for k, v in gaps.items()},
        "discretized_gaussian": gauss,
    }


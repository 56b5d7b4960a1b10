"""Experiment orchestration: config, stage functions and on-disk artifacts.

Every stage reads what earlier stages wrote into the output directory and
records its own artifacts (with sha256 hashes) in ``manifest.json``. The
``run`` command is literally the stages called in order, so a full run and
the equivalent sequence of subcommands produce identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from . import data as D
from . import decision as dec
from . import gmvae as G
from . import iiloss as I
from .evaluation import compare_pipelines, open_set_truth
from .geometry import CentroidSet

log = logging.getLogger(__name__)

STAGES = ("synth", "impute", "train-gmvae", "train-iiloss", "select-threshold", "fit-threshold", "evaluate", "sweep")


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class ExperimentConfig:
    """JSON-backed experiment description.

    ``dataset`` is either ``{"csv": path, "schema": path}`` or
    ``{"synthetic": {...SynthConfig fields}}``. ``known`` and ``novel`` are
    class names; ``novel`` is in introduction order.
    """

    dataset: dict[str, Any]
    known: list[str]
    novel: list[str]
    seed: int = 0
    output_dir: str = "out"
    imputation: dict[str, Any] = field(default_factory=lambda: {"trials": 5, "iterations": 10})
    n_test_sets: int = 100
    gmvae: dict[str, Any] = field(default_factory=dict)
    gmvae_training: dict[str, Any] = field(
        default_factory=lambda: {"pretrain_epochs": 50, "max_epochs": 500, "patience": 10}
    )
    iiloss: dict[str, Any] = field(default_factory=dict)
    iiloss_training: dict[str, Any] = field(default_factory=lambda: {"max_epochs": 500, "patience": 10})
    threshold: dict[str, Any] = field(
        default_factory=lambda: {"epsilon1": 1.0, "epsilon2": 0.25, "grid_step": 0.01, "allow_fallback": True}
    )
    alpha: float = 0.01
    sweep_halfwidth: float = 0.05
    config_path: str | None = None

    def __post_init__(self):
        if set(self.known) & set(self.novel):
            raise ConfigError(f"known and novel classes overlap: {sorted(set(self.known) & set(self.novel))}")
        if len(self.known) < 2:
            raise ConfigError("need at least two known classes")
        if not ("csv" in self.dataset or "synthetic" in self.dataset):
            raise ConfigError("dataset needs either 'csv'+'schema' or 'synthetic'")
        if "csv" in self.dataset and "schema" not in self.dataset:
            raise ConfigError("csv dataset needs a schema path")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must lie in (0, 1)")
        if "synthetic" in self.dataset:
            syn = self.dataset["synthetic"]
            n = syn.get("n_classes", D.SynthConfig.n_classes)
            names = [f"{syn.get('class_prefix', 'class')}{c + 1}" for c in range(n)]
            if sorted(self.known + self.novel) != sorted(names):
                raise ConfigError(f"known + novel must cover the synthetic classes {names}")

    @classmethod
    def from_dict(cls, d: dict[str, Any], base_dir: Path | None = None) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**d)
        if base_dir is not None and "csv" in cfg.dataset:
            for key in ("csv", "schema"):
                p = Path(cfg.dataset[key])
                if not p.is_absolute():
                    cfg.dataset[key] = str(base_dir / p)
        if "csv" in cfg.dataset:
            for key in ("csv", "schema"):
                if not Path(cfg.dataset[key]).exists():
                    raise ConfigError(f"dataset {key} path not found: {cfg.dataset[key]}")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config not found: {path}") from None
        cfg = cls.from_dict(doc, base_dir=path.parent)
        cfg.config_path = str(path)
        return cfg

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d.pop("config_path")
        return d

    def selection_config(self) -> dec.ThresholdSelectionConfig:
        t = self.threshold
        return dec.ThresholdSelectionConfig(
            tau_grid=dec.default_grid(t.get("grid_step", 0.01)),
            epsilon1=t.get("epsilon1", 1.0),
            epsilon2=t.get("epsilon2", 0.25),
        )


# -- artifact bookkeeping --------------------------------------------------


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict[str, str]:
    import pandas

    return {
        "gmvae_osr": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "pandas": pandas.__version__,
    }


class Workspace:
    """Output directory plus its manifest."""

    def __init__(self, root: str | Path, config: ExperimentConfig):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.manifest_path = self.root / "manifest.json"

    def path(self, name: str) -> Path:
        return self.root / name

    def require(self, name: str, stage: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise StageError(stage, f"missing artifact {name!r}; run the stage that produces it first")
        return p

    def _load_manifest(self) -> dict[str, Any]:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {"artifacts": {}, "stages": {}}

    def record(self, stage: str, outputs: list[Path], inputs: list[Path] = (), seed: int | None = None,
               status: str = "ok", error: str | None = None):
        m = self._load_manifest()
        m["versions"] = _versions()
        m["config"] = self.config.to_dict()
        m["config_sha256"] = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode()).hexdigest()
        for p in outputs:
            m["artifacts"][p.name] = {"sha256": sha256_file(p), "stage": stage}
        entry = {
            "seed": seed,
            "status": status,
            "inputs": {p.name: sha256_file(p) for p in inputs if p.exists()},
            "outputs": sorted(p.name for p in outputs),
        }
        if error:
            entry["error"] = error
        m["stages"][stage] = entry
        if status != "ok":
            m["failed_stage"] = stage
        elif m.get("failed_stage") == stage:
            del m["failed_stage"]
        self.manifest_path.write_text(json.dumps(m, indent=2, sort_keys=True))


def _write_json(path: Path, obj: Any) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))
    return path


# -- stages ----------------------------------------------------------------


def stage_synth(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    if "synthetic" in cfg.dataset:
        params = dict(cfg.dataset["synthetic"])
        params["seed"] = seed
        table, schema, truth = D.synth_generate(D.SynthConfig(**params))
        out = [ws.path("dataset.csv"), ws.path("schema.json"), ws.path("ground_truth.json")]
        table.save_csv(out[0])
        schema.save(out[1])
        _write_json(out[2], truth)
        return out
    table = D.load_table(cfg.dataset["csv"], cfg.dataset["schema"])
    out = [ws.path("dataset.csv"), ws.path("schema.json")]
    table.save_csv(out[0])
    table.schema.save(out[1])
    return out


def _check_classes(cfg: ExperimentConfig, class_names: list[str], stage: str) -> None:
    present = set(class_names)
    wanted = set(cfg.known) | set(cfg.novel)
    if wanted - present:
        raise StageError(stage, f"classes not in the dataset: {sorted(wanted - present)}")
    if present - wanted:
        raise StageError(stage, f"classes assigned to neither known nor novel: {sorted(present - wanted)}")


def stage_impute(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    table = D.load_table(ws.require("dataset.csv", "impute"), ws.require("schema.json", "impute"))
    if table.schema.column("patient_id") and table.schema.column("encounter_order"):
        table = D.carry_forward_impute(table)
    table = D.impute_categoricals(table)
    imp = cfg.imputation
    table = D.chained_impute(table, trials=imp.get("trials", 5), iterations=imp.get("iterations", 10), seed=seed)
    names = D.class_names_for(table)
    _check_classes(cfg, names, "impute")
    ids = {n: i for i, n in enumerate(names)}
    labels = np.array([ids[v] for v in table.labels])
    bundle = D.make_splits(labels, [ids[c] for c in cfg.known], [ids[c] for c in cfg.novel], cfg.n_test_sets, seed)
    D.check_split_invariants(bundle, labels)
    out = [ws.path("imputed.csv"), ws.path("splits.json")]
    table.save_csv(out[0])
    bundle.save(out[1])
    return out


@dataclass
class Prepared:
    dataset: D.EncodedDataset
    bundle: D.SplitBundle
    known_index: np.ndarray  # dataset label -> 0..C-1 for known classes, -1 otherwise


def load_prepared(ws: Workspace, stage: str) -> Prepared:
    table = D.load_table(ws.require("imputed.csv", stage), ws.require("schema.json", stage))
    bundle = D.SplitBundle.load(ws.require("splits.json", stage))
    ds = D.encode(table, bundle.train)
    known_index = -np.ones(len(ds.class_names), dtype=int)
    known_index[bundle.known] = np.arange(len(bundle.known))
    return Prepared(ds, bundle, known_index)


def _gmvae_config(cfg: ExperimentConfig, ds: D.EncodedDataset) -> G.GmvaeConfig:
    params = {"likelihood_blocks": ds.likelihood_blocks} | dict(cfg.gmvae)
    return G.GmvaeConfig(n_classes=len(cfg.known), **params)


def stage_train_gmvae(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    p = load_prepared(ws, "train-gmvae")
    X, lab = p.dataset.features, p.known_index[p.dataset.labels]
    tr, va = p.bundle.train, p.bundle.validation
    t = cfg.gmvae_training
    model = G.build_model(_gmvae_config(cfg, p.dataset), X.shape[1], seed=seed)
    model = G.pretrain_phi_z(model, X[tr], lab[tr], epochs=t.get("pretrain_epochs", 50), seed=seed)
    stopping = G.EarlyStopping(max_epochs=t.get("max_epochs", 500), patience=t.get("patience", 10))
    model, history = G.train_gmvae(model, X[tr], lab[tr], X[va], lab[va], stopping, seed=seed)
    cents = G.class_centroids(model, X[tr], lab[tr], class_ids=p.bundle.known)
    doc = G.model_to_doc(model)
    doc["centroids"] = cents.to_dict()
    out = [ws.path("gmvae.json"), ws.path("gmvae_log.json")]
    out[0].write_text(json.dumps(doc))
    _write_json(out[1], history)
    return out


def load_gmvae(ws: Workspace, stage: str) -> tuple[G.GmvaeModel, CentroidSet]:
    doc = json.loads(ws.require("gmvae.json", stage).read_text())
    return G.model_from_doc(doc), CentroidSet.from_dict(doc["centroids"])


def stage_train_iiloss(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    p = load_prepared(ws, "train-iiloss")
    X, lab = p.dataset.features, p.known_index[p.dataset.labels]
    tr, va = p.bundle.train, p.bundle.validation
    t = cfg.iiloss_training
    model, history = I.train_iiloss(
        X[tr], lab[tr], X[va], lab[va],
        config=I.IiLossConfig(**cfg.iiloss),
        max_epochs=t.get("max_epochs", 500),
        patience=t.get("patience", 10),
        seed=seed,
        class_ids=p.bundle.known,
    )
    out = [ws.path("iiloss.json"), ws.path("iiloss_log.json")]
    I.save_model(out[0], model)
    _write_json(out[1], history)
    return out


def stage_select_threshold(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    p = load_prepared(ws, "select-threshold")
    model, cents = load_gmvae(ws, "select-threshold")
    va = p.bundle.validation
    sel = cfg.selection_config()
    curve = dec.f1_vs_tau_curve(G.embed(model, p.dataset.features[va]), p.dataset.labels[va], cents, sel)
    try:
        dec.select_threshold_saturation(curve, sel, allow_fallback=cfg.threshold.get("allow_fallback", True))
    except dec.NoSaturationError as exc:
        raise StageError("select-threshold", str(exc)) from exc
    if curve.fallback:
        log.warning("no saturation point; using highest-F1 tau %.2f", curve.tau_star)
    out = [ws.path("threshold_curve.csv"), ws.path("threshold.json")]
    curve.save(out[0], out[1], sel)
    return out


def stage_fit_threshold(ws: Workspace, seed: int) -> list[Path]:
    cfg = ws.config
    p = load_prepared(ws, "fit-threshold")
    model = I.load_model(ws.require("iiloss.json", "fit-threshold"))
    scores = I.outlier_score(model, p.dataset.features[p.bundle.train])
    cc = I.fit_contamination_threshold(scores, cfg.alpha)
    out = [ws.path("contamination.json")]
    _write_json(out[0], {"alpha": cc.alpha, "threshold": cc.threshold})
    return out


def _predictions(ws: Workspace, p: Prepared, stage: str):
    model, cents = load_gmvae(ws, stage)
    tau = json.loads(ws.require("threshold.json", stage).read_text())["tau_star"]
    if tau is None:
        raise StageError(stage, "threshold.json has no tau_star")
    ii = I.load_model(ws.require("iiloss.json", stage))
    cc = json.loads(ws.require("contamination.json", stage).read_text())
    X = p.dataset.features
    z_g = G.embed(model, X)
    z_i = I.embed(ii, X)
    pred_g, _, _ = dec.predict_u_from_embeddings(z_g, cents, tau)
    pred_i, _, _ = I.predict_os_from_embeddings(z_i, ii.centroids, cc["threshold"])
    return {
        "gmvae": (model, cents, z_g, pred_g, tau),
        "iiloss": (ii, cc, z_i, pred_i),
    }


def _write_embeddings(path: Path, z: np.ndarray, p: Prepared) -> Path:
    split = np.full(len(z), "", dtype=object)
    split[p.bundle.train] = "train"
    split[p.bundle.validation] = "validation"
    split[p.bundle.known_test] = "known_test"
    novel_rows = np.isin(p.dataset.labels, p.bundle.novel)
    split[novel_rows] = "novel"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "class", "split"] + [f"z{j + 1}" for j in range(z.shape[1])])
        for i in range(len(z)):
            w.writerow([i, p.dataset.class_names[p.dataset.labels[i]], split[i]] + [repr(float(v)) for v in z[i]])
    return path


def stage_evaluate(ws: Workspace, seed: int) -> list[Path]:
    p = load_prepared(ws, "evaluate")
    pr = _predictions(ws, p, "evaluate")
    _, _, z_g, pred_g, tau = pr["gmvae"]
    _, cc, z_i, pred_i = pr["iiloss"]
    thresholds = {"tau_star": tau, "alpha": cc["alpha"], "os_threshold": cc["threshold"]}
    report = compare_pipelines(pred_g, pred_i, p.dataset.labels, p.bundle, thresholds, p.dataset.class_names)
    out = report.write(ws.root)
    out.append(_write_embeddings(ws.path("embeddings_gmvae.csv"), z_g, p))
    out.append(_write_embeddings(ws.path("embeddings_iiloss.csv"), z_i, p))
    return out


def _test_sets(p: Prepared) -> list[np.ndarray]:
    n = len(p.bundle.novel)
    return [p.bundle.test_indices(s, n) for s in range(len(p.bundle.novel_test_sets))]


def run_sweep(ws: Workspace, rule: str, center: float | None = None, halfwidth: float | None = None) -> tuple[dec.SweepTable, list[Path]]:
    cfg = ws.config
    p = load_prepared(ws, "sweep")
    pr = _predictions(ws, p, "sweep")
    truth = open_set_truth(p.dataset.labels, p.bundle.known)
    halfwidth = cfg.sweep_halfwidth if halfwidth is None else halfwidth
    if rule == "uncertainty":
        _, cents, z, _, tau = pr["gmvae"]
        table = dec.sweep_thresholds(z, truth, cents, tau if center is None else center, halfwidth,
                                     "uncertainty", test_sets=_test_sets(p))
    else:
        ii, cc, z, _ = pr["iiloss"]
        train_scores = I.outlier_scores_from_embeddings(z[p.bundle.train], ii.centroids)
        table = dec.sweep_thresholds(z, truth, ii.centroids, cc["alpha"] if center is None else center, halfwidth,
                                     "outlier_score", training_scores=train_scores, test_sets=_test_sets(p))
    out = [ws.path(f"sweep_{rule}.csv"), ws.path(f"sweep_{rule}.json")]
    with open(out[0], "w", newline="") as fh:
        csv.writer(fh).writerows(table.to_rows())
    _write_json(out[1], table.to_dict())
    return table, out


def stage_sweep(ws: Workspace, seed: int) -> list[Path]:
    """Both default sweeps; folded into eval_report.json when it exists."""
    out, tables = [], {}
    for rule in ("uncertainty", "outlier_score"):
        table, paths = run_sweep(ws, rule)
        tables[rule] = table.to_dict()
        out += paths
    report_path = ws.path("eval_report.json")
    if report_path.exists():
        report = json.loads(report_path.read_text())
        report["sweeps"] = tables
        report_path.write_text(json.dumps(report, indent=2, sort_keys=True))
        out.append(report_path)
    return out


STAGE_FUNCS = {
    "synth": stage_synth,
    "impute": stage_impute,
    "train-gmvae": stage_train_gmvae,
    "train-iiloss": stage_train_iiloss,
    "select-threshold": stage_select_threshold,
    "fit-threshold": stage_fit_threshold,
    "evaluate": stage_evaluate,
    "sweep": stage_sweep,
}

_STAGE_INPUTS = {
    "synth": [],
    "impute": ["dataset.csv", "schema.json"],
    "train-gmvae": ["imputed.csv", "splits.json"],
    "train-iiloss": ["imputed.csv", "splits.json"],
    "select-threshold": ["imputed.csv", "splits.json", "gmvae.json"],
    "fit-threshold": ["imputed.csv", "splits.json", "iiloss.json"],
    "evaluate": ["gmvae.json", "threshold.json", "iiloss.json", "contamination.json"],
    "sweep": ["gmvae.json", "threshold.json", "iiloss.json", "contamination.json"],
}


def run_stage(ws: Workspace, stage: str, seed: int, func=None) -> list[Path]:
    """Run one stage, recording outputs (or the failure) in the manifest."""
    func = func or STAGE_FUNCS[stage]
    inputs = [ws.path(n) for n in _STAGE_INPUTS.get(stage, [])]
    try:
        outputs = func(ws, seed)
    except StageError as exc:
        ws.record(stage, [], inputs, seed, status="failed", error=str(exc))
        raise
    except Exception as exc:
        ws.record(stage, [], inputs, seed, status="failed", error=f"{type(exc).__name__}: {exc}")
        raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
    ws.record(stage, outputs, inputs, seed)
    return outputs


def run_experiment(config: ExperimentConfig, out_dir: str | Path | None = None, seed: int | None = None) -> dict[str, Any]:
    """Full pipeline; returns the evaluation report as written to ``eval_report.json``."""
    seed = config.seed if seed is None else seed
    ws = Workspace(out_dir or config.output_dir, config)
    for stage in STAGES:
        run_stage(ws, stage, seed)
    return json.loads(ws.path("eval_report.json").read_text())

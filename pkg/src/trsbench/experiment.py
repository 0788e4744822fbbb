"""Pipeline stages behind the command line: train, attack, transfer, bounds,
boundary and report. Every stage reads what earlier stages wrote to the
output directory, so stages can be rerun individually."""

from __future__ import annotations

import csv
import json
import logging
import platform
import statistics
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attacks import AttackSpec, run_attack, robust_accuracy
from .bounds import SmoothnessConfig, bound_report, estimate_constants
from .boundary import DegenerateGradientError, emit_boundary_grid
from .config import ExperimentConfig
from .data import Dataset, generate_synthetic, load_idx, split
from .diffcore import SMOOTH_ACTIVATIONS
from .models import Ensemble, MlpClassifier, load_checkpoint, save_checkpoint
from .training import abs_cosine, loss_input_grad, train, write_metrics_csv
from .transfer import blackbox_attempts, report_from_batch, score_attempts, transfer_matrix

logger = logging.getLogger(__name__)

STAGES = ("train", "attack", "transfer", "bounds", "boundary", "report")
SURROGATE_SEED_BASE = 10_000


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- shared setup --------------------------------------------------------------

def load_data(cfg: ExperimentConfig, seed: int) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.kind == "idx":
        full = load_idx(d.idx_images, d.idx_labels, limit=d.limit)
    else:
        full = generate_synthetic(d.kind, d.n, d.noise, seed=seed)
    return split(full, d.test_fraction, seed)


def build_ensemble(cfg: ExperimentConfig, input_dim: int, num_classes: int, seed: int,
                   tag: int = 0, n_models: int | None = None) -> Ensemble:
    sizes = [input_dim, *cfg.model.hidden, num_classes]
    n_models = cfg.model.n_models if n_models is None else n_models
    return Ensemble([MlpClassifier(sizes, cfg.model.activation, seed=[seed, tag, i])
                     for i in range(n_models)])


def _ckpt(out: Path, name: str, seed: int) -> Path:
    return out / "checkpoints" / f"{name}_s{seed}.trsm"


def _load_ensemble(out: Path, name: str, seed: int, stage: str) -> Ensemble:
    path = _ckpt(out, name, seed)
    if not path.is_file():
        raise StageError(stage, f"missing checkpoint {path}; run the train stage first")
    return Ensemble(load_checkpoint(path))


def _mode_file(mode: str) -> str:
    return mode.replace("+", "_")


def _surrogate_cfg(cfg: ExperimentConfig, seed: int, k: int):
    return cfg.train_config("Vanilla", SURROGATE_SEED_BASE + 100 * seed + k)


def _attack_spec(cfg: ExperimentConfig, method: str, eps: float, **kw) -> AttackSpec:
    a = cfg.attack
    args = dict(method=method, eps=eps, norm=a.norm, loss=a.loss, seed=a.seed)
    if method not in ("FGSM",):
        args["steps"] = a.steps
    if method == "PGD":
        args["restarts"] = a.restarts
    args.update(kw)
    return AttackSpec(**args)


def _check_containment(adv, stage: str) -> None:
    spec = adv.spec
    if spec.constrained:
        diff = adv.adversarials - adv.originals
        if spec.norm == "linf":
            sizes = np.abs(diff).max(axis=1)
        else:
            sizes = np.linalg.norm(diff, axis=1)
        if (sizes > spec.eps + 1e-9).any():
            raise StageError(stage, f"{spec.label()}: perturbation exceeds eps")


# --- stages --------------------------------------------------------------------

def stage_train(cfg: ExperimentConfig, out: Path) -> None:
    for seed in cfg.seeds:
        train_set, _ = load_data(cfg, seed)
        for mode in cfg.modes:
            ens = build_ensemble(cfg, train_set.dim, train_set.num_classes, seed)
            tcfg = cfg.train_config(mode, seed)
            t0 = time.perf_counter()
            history = train(ens, train_set, tcfg)
            logger.info("trained %s seed %d in %.1fs (acc %.3f)", mode, seed,
                        time.perf_counter() - t0, history[-1].clean_acc)
            (out / "metrics").mkdir(parents=True, exist_ok=True)
            write_metrics_csv(history, out / "metrics" / f"{_mode_file(mode)}_s{seed}.csv")
            _ckpt(out, _mode_file(mode), seed).parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(list(ens.models), _ckpt(out, _mode_file(mode), seed))
        if cfg.transfer.blackbox:
            for k in range(cfg.transfer.surrogate_ensembles):
                ens = build_ensemble(cfg, train_set.dim, train_set.num_classes, seed, tag=1 + k,
                                     n_models=cfg.transfer.surrogate_models)
                train(ens, train_set, _surrogate_cfg(cfg, seed, k))
                save_checkpoint(list(ens.models), _ckpt(out, f"surrogate{k}", seed))


def stage_attack(cfg: ExperimentConfig, out: Path) -> None:
    for seed in cfg.seeds:
        _, test = load_data(cfg, seed)
        ensembles = {m: _load_ensemble(out, _mode_file(m), seed, "attack") for m in cfg.modes}
        rows = [["clean", 0.0] + [clean_accuracy(ensembles[m], test) for m in cfg.modes]]
        for method in cfg.attack.methods:
            for eps in cfg.attack.eps:
                row = [method, eps]
                for mode in cfg.modes:
                    adv = run_attack(ensembles[mode], test, _attack_spec(cfg, method, eps))
                    _check_containment(adv, "attack")
                    row.append(robust_accuracy(ensembles[mode], adv))
                rows.append(row)
        _write_csv(out / f"robust_accuracy_s{seed}.csv", ["attack", "eps", *cfg.modes], rows)


def clean_accuracy(ens: Ensemble, test: Dataset) -> float:
    return float((ens.predict(test.inputs) == test.labels).mean())


def mean_pairwise_abs_cos(ens: Ensemble, data: Dataset) -> float:
    x = torch.from_numpy(data.inputs)
    y = torch.from_numpy(data.labels)
    grads = [loss_input_grad(m, x, y, create_graph=False) for m in ens.models]
    vals = [abs_cosine(grads[i], grads[j])[0].mean().item()
            for i in range(len(grads)) for j in range(i + 1, len(grads))]
    return float(np.mean(vals)) if vals else 1.0


def stage_transfer(cfg: ExperimentConfig, out: Path) -> None:
    tr = cfg.transfer
    for seed in cfg.seeds:
        _, test = load_data(cfg, seed)
        attempts = []
        if tr.blackbox:
            surrogates = [_load_ensemble(out, f"surrogate{k}", seed, "transfer")
                          for k in range(tr.surrogate_ensembles)]
            specs = [_attack_spec(cfg, "PGD", e, loss=loss, restarts=tr.blackbox_restarts)
                     for e in tr.blackbox_eps for loss in tr.losses]
            attempts = blackbox_attempts(surrogates, test, specs)
        rows = []
        for mode in cfg.modes:
            ens = _load_ensemble(out, _mode_file(mode), seed, "transfer")
            spec = _attack_spec(cfg, tr.method, tr.eps)
            ids = [f"{mode}[{i}]" for i in range(len(ens))]
            mat = transfer_matrix(list(ens.models), test, spec, ids)
            (out / "transfer").mkdir(parents=True, exist_ok=True)
            mat.to_csv(out / "transfer" / f"{_mode_file(mode)}_s{seed}.csv")
            mat.to_csv(out / "transfer" / f"{_mode_file(mode)}_s{seed}_predicate.csv", which="predicate")
            multi = len(ens) > 1
            row = [mode, mean_pairwise_abs_cos(ens, test),
                   mat.off_diagonal_mean() if multi else float("nan"),
                   mat.off_diagonal_mean("predicate") if multi else float("nan")]
            if tr.blackbox:
                bb = score_attempts(ens, test, attempts)
                row += [bb.rate, bb.instance_rate]
            else:
                row += [float("nan"), float("nan")]
            rows.append(row)
        _write_csv(out / f"transfer_summary_s{seed}.csv",
                   ["mode", "mean_abs_cos", "transfer_success", "transfer_predicate",
                    "blackbox_rate", "blackbox_instance_rate"], rows)


def stage_bounds(cfg: ExperimentConfig, out: Path) -> None:
    b = cfg.bounds
    if not b.enabled:
        return
    (out / "bounds").mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        _, test = load_data(cfg, seed)
        sub = test.subset(np.arange(min(b.items, len(test))))
        for mode in cfg.modes:
            ens = _load_ensemble(out, _mode_file(mode), seed, "bounds")
            if len(ens) < 2:
                continue
            F, G = ens.models[0], ens.models[1]
            spec = _attack_spec(cfg, "PGD", b.eps, targeted=b.targeted)
            adv = run_attack(F, sub, spec)
            consts = estimate_constants(F, G, sub, smoothness=SmoothnessConfig(b.radius, b.pairs, seed),
                                        adv=adv)
            report = bound_report(consts, report_from_batch(F, G, adv).probability)
            if cfg.model.activation not in SMOOTH_ACTIVATIONS:
                report.notes.append("activation has no finite curvature bound; beta is not meaningful")
            report.to_json(out / "bounds" / f"{_mode_file(mode)}_s{seed}.json")


def stage_boundary(cfg: ExperimentConfig, out: Path) -> None:
    b = cfg.boundary
    if not b.enabled:
        return
    (out / "boundary").mkdir(parents=True, exist_ok=True)
    for seed in cfg.seeds:
        _, test = load_data(cfg, seed)
        rows = []
        for mode in cfg.modes:
            ens = _load_ensemble(out, _mode_file(mode), seed, "boundary")
            for k in range(min(b.points, len(test))):
                try:
                    grid = emit_boundary_grid(ens, test.inputs[k], int(test.labels[k]),
                                              b.resolution, b.half_width, seed=k)
                except DegenerateGradientError:
                    logger.warning("%s seed %d point %d: degenerate gradient, grid skipped",
                                   mode, seed, k)
                    continue
                grid.to_csv(out / "boundary" / f"{_mode_file(mode)}_s{seed}_p{k}.csv")
                rows.append([mode, k, grid.label_changes()])
        _write_csv(out / f"boundary_summary_s{seed}.csv", ["mode", "point", "label_changes"], rows)


def _median(vals):
    vals = [v for v in vals if not np.isnan(v)]
    return statistics.median(vals) if vals else float("nan")


def collect_summary(cfg: ExperimentConfig, out: Path) -> dict:
    """Per-mode medians over seeds of every headline statistic."""
    per_mode = {m: {} for m in cfg.modes}

    def add(mode, key, value):
        per_mode[mode].setdefault(key, []).append(float(value))

    for seed in cfg.seeds:
        ra = out / f"robust_accuracy_s{seed}.csv"
        if ra.is_file():
            for row in _read_csv(ra):
                key = "clean_acc" if row["attack"] == "clean" else f"{row['attack']}@{float(row['eps']):g}"
                for mode in cfg.modes:
                    add(mode, key, row[mode])
        ts = out / f"transfer_summary_s{seed}.csv"
        if ts.is_file():
            for row in _read_csv(ts):
                for key in ("mean_abs_cos", "transfer_success", "transfer_predicate",
                            "blackbox_rate", "blackbox_instance_rate"):
                    add(row["mode"], key, row[key])
        bs = out / f"boundary_summary_s{seed}.csv"
        if bs.is_file():
            per_seed = {}
            for row in _read_csv(bs):
                per_seed.setdefault(row["mode"], []).append(float(row["label_changes"]))
            for mode, vals in per_seed.items():
                add(mode, "boundary_label_changes", np.mean(vals))
    return {m: {k: _median(v) for k, v in stats.items()} for m, stats in per_mode.items()}


def stage_report(cfg: ExperimentConfig, out: Path) -> dict:
    summary = collect_summary(cfg, out)
    keys = sorted({k for stats in summary.values() for k in stats})
    _write_csv(out / "summary.csv", ["mode", *keys],
               [[m, *[summary[m].get(k, float("nan")) for k in keys]] for m in cfg.modes])
    return summary


STAGE_FUNCS = {"train": stage_train, "attack": stage_attack, "transfer": stage_transfer,
               "bounds": stage_bounds, "boundary": stage_boundary, "report": stage_report}


def write_manifest(cfg: ExperimentConfig, out: Path, stages, config_text: str | None) -> None:
    seeds = {
        "experiment": list(cfg.seeds),
        "data": {str(s): s for s in cfg.seeds},
        "model_init": "[seed, 0, model index]",
        "surrogate_init": "[seed, 1 + k, model index]",
        "surrogate_training": {str(s): [SURROGATE_SEED_BASE + 100 * s + k
                                        for k in range(cfg.transfer.surrogate_ensembles)]
                               for s in cfg.seeds},
        "attack": cfg.attack.seed,
        "pgd_restart": "[attack seed, restart index]",
        "boundary_direction": "point index",
        "bounds_smoothness": "[seed, block, item]",
    }
    manifest = {
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
        "stages": list(stages),
        "seeds": seeds,
        "versions": {"trsbench": __version__, "python": platform.python_version(),
                     "torch": torch.__version__, "numpy": np.__version__},
        "config": {
            "modes": list(cfg.modes),
            "train": {m: asdict(cfg.train_config(m, 0)) for m in cfg.modes},
            "data": asdict(cfg.data), "model": asdict(cfg.model), "attack": asdict(cfg.attack),
            "transfer": asdict(cfg.transfer), "bounds": asdict(cfg.bounds),
            "boundary": asdict(cfg.boundary),
        },
        "config_text": config_text,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")


def run_experiment(cfg: ExperimentConfig, out: str | Path, stages=STAGES,
                   config_text: str | None = None) -> dict | None:
    """Run the requested stages in order; raises StageError tagged with the failing stage."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result = None
    for stage in stages:
        try:
            result = STAGE_FUNCS[stage](cfg, out)
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - tag and re-raise
            raise StageError(stage, f"{type(exc).__name__}: {exc}") from exc
        finally:
            write_manifest(cfg, out, stages, config_text)
    return result

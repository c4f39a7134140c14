"""Command-line driver: phantom | train | segment | evaluate | sweep.

Every stage reads the JSON experiment config and the artefacts written by
the stages before it under ``--out``. Errors end the process with a nonzero
code and one stderr line ``error category=<name> message=<text>``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from .mesh import MeshError, VertexLabels, read_ply, write_ply
from .metrics import METRIC_NAMES, confusion_stats, format_table, summarize, write_json, write_records
from .nets import (CheckpointError, GeometryMismatch, TrainingDiverged, load_checkpoint, save_checkpoint)
from .patches import PatchGeometry
from .volume import VolumeFormatError, file_digest, load_volume, save_volume

VOLUME_NAMES = ("intensity", "cavity", "scar", "cavity_auto")
EXIT_CODES = {"config": 2, "missing-artifact": 3, "manifest": 4, "checkpoint": 5, "training": 6,
              "format": 7, "internal": 1}


class StageError(RuntimeError):
    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


# -- config and manifest ---------------------------------------------------

def load_config(path=None, seed=None) -> pl.ExperimentConfig:
    d = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise StageError("config", f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise StageError("config", f"config is not valid JSON: {exc}") from exc
    if seed is not None:
        d["sample_seed"] = int(seed)
        d["train"] = {**d.get("train", {}), "seed": int(seed)}
    try:
        return pl.ExperimentConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise StageError("config", str(exc)) from exc


def _case_dir(out: Path, split: str, seed: int) -> Path:
    return out / "cohort" / f"{split}_{seed}"


def _read_manifest(out: Path) -> dict:
    path = out / "manifest.json"
    if not path.exists():
        raise StageError("missing-artifact", f"{path} not found; run the phantom stage first")
    return json.loads(path.read_text())


def _check_manifest(out: Path, cfg: pl.ExperimentConfig) -> dict:
    man = _read_manifest(out)
    if man["cohort_digest"] != cohort_digest(cfg):
        raise StageError("manifest", "cohort settings in the config differ from the manifest")
    return man


def cohort_digest(cfg: pl.ExperimentConfig) -> str:
    keys = ("train_seeds", "test_seeds", "phantom", "perturb_mm", "perturb_seed_offset")
    sub = {k: cfg.to_dict()[k] for k in keys}
    return pl.config_digest_of(sub)


# -- stages ----------------------------------------------------------------

def cmd_phantom(cfg: pl.ExperimentConfig, out) -> dict:
    """Write every phantom of the cohort and a manifest of seeds and file hashes."""
    out = Path(out)
    path = out / "manifest.json"
    if path.exists():
        old = json.loads(path.read_text())
        if old.get("cohort_digest") != cohort_digest(cfg):
            raise StageError("manifest", f"{path} exists and was written for a different cohort")
    cases = []
    for split, seeds in (("train", cfg.train_seeds), ("test", cfg.test_seeds)):
        for seed in seeds:
            case = pl.make_case(cfg, seed)
            d = _case_dir(out, split, seed)
            d.mkdir(parents=True, exist_ok=True)
            files = {}
            for name, vol in zip(VOLUME_NAMES, (case.volume, case.cavity, case.scar, case.cavity_auto)):
                save_volume(vol, d / f"{name}.mhd")
                files[name] = file_digest(d / f"{name}.raw")
            cases.append({"split": split, "seed": int(seed), "perturb_seed": int(seed + cfg.perturb_seed_offset),
                          "files": files})
    man = {"cohort_digest": cohort_digest(cfg), "phantom": cfg.phantom_spec(0).to_dict(),
           "perturb_mm": cfg.perturb_mm, "cases": cases}
    out.mkdir(parents=True, exist_ok=True)
    write_json(path, man)
    return man


def load_cohort(cfg: pl.ExperimentConfig, out, split: str) -> list:
    out = Path(out)
    man = _check_manifest(out, cfg)
    cases = []
    for entry in man["cases"]:
        if entry["split"] != split:
            continue
        d = _case_dir(out, split, entry["seed"])
        vols = []
        for name in VOLUME_NAMES:
            if not (d / f"{name}.mhd").exists():
                raise StageError("missing-artifact", f"{d / name}.mhd missing")
            if file_digest(d / f"{name}.raw") != entry["files"][name]:
                raise StageError("manifest", f"{d / name}.raw does not match its manifest hash")
            vols.append(load_volume(d / f"{name}.mhd"))
        cases.append(pl.make_case(cfg, entry["seed"], tuple(vols)))
    return cases


def model_tag(R_mm: float, geom: PatchGeometry) -> str:
    a, b, c = geom.size
    return f"R{R_mm:g}_s{geom.n_scales}_p{a}x{b}x{c}"


def train_one(cfg, out, train_cases, R_mm: float, geom: PatchGeometry) -> pl.ModelPair:
    d = Path(out) / "models" / model_tag(R_mm, geom)
    d.mkdir(parents=True, exist_ok=True)
    models = pl.train_models(train_cases, cfg, geom, R_mm)
    save_checkpoint(d / "tnet.ckpt", models.tnet)
    save_checkpoint(d / "nnet.ckpt", models.nnet)
    write_json(d / "train.json", {"R_mm": R_mm, "geometry": geom.to_dict(), "train": cfg.train_config().to_dict(),
                                  "n_node_samples": cfg.n_node_samples, "n_pair_samples": cfg.n_pair_samples,
                                  "sample_seed": cfg.sample_seed, "loss": models.traces,
                                  "tnet_sha256": file_digest(d / "tnet.ckpt"),
                                  "nnet_sha256": file_digest(d / "nnet.ckpt")})
    return models


def load_models(out, R_mm: float, geom: PatchGeometry) -> pl.ModelPair:
    d = Path(out) / "models" / model_tag(R_mm, geom)
    if not (d / "tnet.ckpt").exists() or not (d / "nnet.ckpt").exists():
        raise StageError("missing-artifact", f"no checkpoints in {d}; run the train stage first")
    return pl.ModelPair(load_checkpoint(d / "tnet.ckpt", geom), load_checkpoint(d / "nnet.ckpt", geom), geom, R_mm)


def _needed_tags(methods) -> set:
    tags = set()
    for m in methods:
        if m.startswith("mscnn0"):
            tags.add("R0")
        elif m in ("mscnn", "learngc"):
            tags.add("R")
    return tags


def cmd_train(cfg: pl.ExperimentConfig, out, methods=None) -> list:
    """Train the models the requested methods need (default: all configured methods)."""
    methods = methods or cfg.methods
    train_cases = load_cohort(cfg, out, "train")
    geom = cfg.geometry()
    done = []
    for tag in sorted(_needed_tags(methods)):
        R = 0.0 if tag == "R0" else cfg.R_mm
        train_one(cfg, out, train_cases, R, geom)
        done.append(model_tag(R, geom))
    return done


def cmd_segment(cfg: pl.ExperimentConfig, out, methods=None) -> None:
    """Label every test case with each method; writes a PLY and a JSON sidecar per case."""
    methods = methods or cfg.methods
    geom = cfg.geometry()
    models = {}
    for tag in _needed_tags(methods):
        models[tag] = load_models(out, 0.0 if tag == "R0" else cfg.R_mm, geom)
    for case in load_cohort(cfg, out, "test"):
        res = pl.segment_case(case, cfg, methods, models)
        for method, r in res.items():
            d = Path(out) / "segment" / method
            d.mkdir(parents=True, exist_ok=True)
            mesh = case.mesh(r["arm"])
            prob = r["score"] if method not in ("2sd", "otsu") else r["labels"].labels.astype(np.float64)
            write_ply(d / f"{case.seed}.ply", mesh, r["labels"], prob)
            write_json(d / f"{case.seed}.json", {"seed": case.seed, "arm": r["arm"], "t_hash": r["t_hash"],
                                                 "n_vertices": mesh.n_vertices})


def cmd_evaluate(cfg: pl.ExperimentConfig, out, methods=None) -> dict:
    """Compare segmentations with the projected ground truth of the same mesh."""
    methods = methods or cfg.methods
    out = Path(out)
    cases = load_cohort(cfg, out, "test")
    per_method, records = {}, []
    for method in methods:
        reports = []
        for case in cases:
            ply = out / "segment" / method / f"{case.seed}.ply"
            side = out / "segment" / method / f"{case.seed}.json"
            if not ply.exists() or not side.exists():
                raise StageError("missing-artifact", f"{ply} missing; run the segment stage for {method}")
            arm = json.loads(side.read_text())["arm"]
            gt = case.gt(arm)
            labels = read_ply(ply)["label"].astype(np.uint8)
            if len(labels) != len(gt):
                raise StageError("format", f"{ply} has {len(labels)} vertices, its mesh has {len(gt)}")
            rep = confusion_stats(VertexLabels(labels), gt)
            reports.append(rep)
            records.append({"method": method, "seed": case.seed, "arm": arm, **rep.to_dict()})
        per_method[method] = summarize(reports)
    table = format_table(per_method)
    (out / "report.txt").write_text(table, encoding="utf-8")
    write_records(out / "report_records.tsv", records)
    write_json(out / "report.json", {"methods": per_method, "metrics": list(METRIC_NAMES)})
    return per_method


def cmd_sweep(cfg: pl.ExperimentConfig, out, axis: str) -> list:
    """Mean LearnGC Dice(scar) over the test cohort at each grid point of ``axis``."""
    if axis not in pl.SWEEP_AXES:
        raise StageError("config", f"unknown sweep axis {axis!r}; choose from {pl.SWEEP_AXES}")
    out = Path(out)
    train_cases = load_cohort(cfg, out, "train")
    test_cases = load_cohort(cfg, out, "test")

    def models_for(R, geom):
        try:
            return load_models(out, R, geom)
        except StageError:
            return train_one(cfg, out, train_cases, R, geom)

    if axis == "lambda":
        models = models_for(cfg.R_mm, cfg.geometry())
        scores = {lam: [] for lam in cfg.lambda_grid}
        for case in test_cases:
            probs, sims = pl.learned_potentials(models, pl.case_patches(case, "auto", models.geom), case.mesh_auto)
            for lam in cfg.lambda_grid:
                lab = pl.learngc_labels(case.mesh_auto, probs, sims, lam)
                scores[lam].append(confusion_stats(lab, case.gt_auto).dice_scar)
        rows = [(lam, scores[lam]) for lam in cfg.lambda_grid]
    else:
        points = {"R": cfg.R_grid, "scales": cfg.scales_grid, "patch_size": cfg.patch_size_grid}[axis]
        trained = []
        for value in points:
            R = float(value) if axis == "R" else cfg.R_mm
            geom = cfg.geometry(n_scales=value if axis == "scales" else None,
                                patch_size=value if axis == "patch_size" else None)
            trained.append(models_for(R, geom))
        dices = [[] for _ in points]
        for case in test_cases:
            cache = {}
            for k, models in enumerate(trained):
                geom = models.geom
                # one extraction per patch size; fewer scales read a prefix
                key = (geom.size, geom.base_spacing_mm)
                widest = max((m.geom for m in trained if (m.geom.size, m.geom.base_spacing_mm) == key),
                             key=lambda g: g.n_scales)
                if key not in cache:
                    cache[key] = pl.case_patches(case, "auto", widest)
                probs, sims = pl.learned_potentials(models, cache[key], case.mesh_auto)
                lab = pl.learngc_labels(case.mesh_auto, probs, sims, cfg.lam)
                dices[k].append(confusion_stats(lab, case.gt_auto).dice_scar)
        rows = [("x".join(map(str, v)) if axis == "patch_size" else v, d) for v, d in zip(points, dices)]
    lines = [f"{axis}\tmean_dice\tsd_dice\tn"]
    doc = []
    for value, d in rows:
        d = np.asarray(d)
        sd = float(d.std(ddof=1)) if len(d) > 1 else 0.0
        lines.append(f"{value}\t{d.mean():.6f}\t{sd:.6f}\t{len(d)}")
        doc.append({"value": value, "mean_dice": float(d.mean()), "sd_dice": sd, "dice": d.tolist()})
    (out / f"sweep_{axis}.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    write_json(out / f"sweep_{axis}.json", {"axis": axis, "points": doc})
    return doc


# -- entry point -------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scargc", description="learned graph-cut scar labelling on phantoms")
    p.add_argument("command", choices=("phantom", "train", "segment", "evaluate", "sweep"))
    p.add_argument("--config", help="JSON experiment config (defaults apply when omitted)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="override the sampling/training seed")
    p.add_argument("--method", action="append", help="method name (repeatable); default: all in config")
    p.add_argument("--axis", help="sweep axis: " + ", ".join(pl.SWEEP_AXES))
    return p


def _categorize(exc: BaseException) -> str:
    if isinstance(exc, StageError):
        return exc.category
    if isinstance(exc, pl.ConfigError):
        return "config"
    if isinstance(exc, (CheckpointError, GeometryMismatch)):
        return "checkpoint"
    if isinstance(exc, TrainingDiverged):
        return "training"
    if isinstance(exc, (VolumeFormatError, MeshError)):
        return "format"
    if isinstance(exc, FileNotFoundError):
        return "missing-artifact"
    return "internal"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        methods = args.method
        if methods:
            bad = [m for m in methods if m not in pl.METHODS]
            if bad:
                raise StageError("config", f"unknown method(s) {bad}; known: {sorted(pl.METHODS)}")
        if args.command == "phantom":
            cmd_phantom(cfg, args.out)
        elif args.command == "train":
            cmd_train(cfg, args.out, methods)
        elif args.command == "segment":
            cmd_segment(cfg, args.out, methods)
        elif args.command == "evaluate":
            print(format_table(cmd_evaluate(cfg, args.out, methods)), end="")
        elif args.command == "sweep":
            if not args.axis:
                raise StageError("config", "sweep needs --axis")
            for row in cmd_sweep(cfg, args.out, args.axis):
                print(f"{row['value']}\t{row['mean_dice']:.4f}")
    except Exception as exc:  # one machine-parseable line, nonzero exit
        cat = _categorize(exc)
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error category={cat} message={msg}", file=sys.stderr)
        return EXIT_CODES.get(cat, 1)
    return 0


if __name__ == "__main__":
    sys.exit(main())

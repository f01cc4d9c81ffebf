"""Command-line entry point.

Subcommands: ``synth`` (write a synthetic scene), ``train`` (fit surrogate and
target models), ``attack`` (generate adversarial patches plus traces),
``eval`` (clean / white-box / transfer / defended accuracy report), ``report``
(pretty-print a report CSV).  All behaviour is driven by an INI config plus
``--set section.key=value`` overrides; every command is deterministic under
the configured seed.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from .attacks import attack_batch, write_traces_csv
from .config import RunConfig, dump_config, load_config
from .cube import (
    DataCube, PatchSet, extract_patches, load_cube, load_labels,
    make_synthetic_scene, save_cube, save_labels, split,
)
from .defenses import defend_noise, defend_spectral_filter
from .metrics import evaluate
from .models import CNNClassifier, load_model, save_model
from .seeding import TRAIN, derive_seed


def _dataset_paths(cfg: RunConfig) -> tuple[Path, Path]:
    cube = Path(cfg.dataset.cube)
    labels = Path(cfg.dataset.labels)
    if not cube.is_absolute():
        cube = cfg.out_path(cube)
    if not labels.is_absolute():
        labels = cfg.out_path(labels)
    return cube, labels


def _load_dataset(cfg: RunConfig):
    cube_path, label_path = _dataset_paths(cfg)
    for p in (cube_path, label_path):
        if not p.exists():
            raise FileNotFoundError(f"dataset file missing: {p} (run `hsiadv synth` first)")
    return load_cube(cube_path), load_labels(label_path)


def _patch_sets(cfg: RunConfig, cube: DataCube, grid) -> tuple[PatchSet, PatchSet]:
    ps = extract_patches(
        cube, grid,
        patch_size=cfg.dataset.patch_size,
        max_per_class=cfg.dataset.max_per_class,
        seed=cfg.seed,
    )
    return split(ps, cfg.dataset.train_fraction, seed=cfg.seed)


def _model_path(cfg: RunConfig, arch: str) -> Path:
    return cfg.out_path("models", f"{arch}.hsm")


def _adv_dir(cfg: RunConfig, method: str, epsilon: float) -> Path:
    return cfg.out_path("adv", f"{method}_eps{epsilon:g}")


def cmd_synth(cfg: RunConfig) -> int:
    cube, grid = make_synthetic_scene(
        cfg.dataset.classes, cfg.dataset.bands,
        cfg.dataset.height, cfg.dataset.width, seed=cfg.seed,
    )
    cube_path, label_path = _dataset_paths(cfg)
    cube_path.parent.mkdir(parents=True, exist_ok=True)
    label_path.parent.mkdir(parents=True, exist_ok=True)
    save_cube(cube, cube_path)
    save_labels(grid, label_path)
    counts = {k: int((grid.labels == k).sum()) for k in range(1, grid.num_classes + 1)}
    print(f"scene: {cube.bands} bands x {cube.height}x{cube.width}, "
          f"{grid.num_classes} classes, labeled pixels per class {counts}")
    print(f"wrote {cube_path} and {label_path}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    cube, grid = _load_dataset(cfg)
    train, test = _patch_sets(cfg, cube, grid)
    print(f"patches: {len(train)} train / {len(test)} test, size {train.patch_size}")
    model_dir = cfg.out_path("models")
    model_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, arch in enumerate([cfg.models.surrogate, *cfg.models.targets]):
        clf = CNNClassifier(
            architecture=arch,
            epochs=cfg.models.epochs,
            lr=cfg.models.lr,
            momentum=cfg.models.momentum,
            batch_size=cfg.models.batch_size,
            seed=derive_seed(cfg.seed, TRAIN, i),
        )
        clf.fit(train.values, train.labels, eval_set=(test.values, test.labels))
        path = _model_path(cfg, arch)
        save_model(clf, path)
        rows.append((arch, clf.clean_accuracy_))
        print(f"{arch}: clean test OA {100 * clf.clean_accuracy_:.2f}%  -> {path}")
    with open(model_dir / "clean_accuracy.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "clean_oa"])
        for arch, acc in rows:
            writer.writerow([arch, f"{100 * acc:.4f}"])
    return 0


def cmd_attack(cfg: RunConfig) -> int:
    cube, grid = _load_dataset(cfg)
    _, test = _patch_sets(cfg, cube, grid)
    surrogate_path = _model_path(cfg, cfg.models.surrogate)
    if not surrogate_path.exists():
        raise FileNotFoundError(f"surrogate model missing: {surrogate_path} (run `hsiadv train`)")
    surrogate = load_model(surrogate_path)
    for method in cfg.attack.methods:
        for eps in cfg.attack.epsilons:
            result = attack_batch(test, surrogate, cfg.attack_config(method, eps),
                                  parallelism=cfg.workers)
            out_dir = _adv_dir(cfg, method, eps)
            out_dir.mkdir(parents=True, exist_ok=True)
            for i in range(len(result.patches)):
                save_cube(DataCube(result.patches.values[i]),
                          out_dir / f"patch_{i:05d}.hsc")
            with open(out_dir / "manifest.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["index", "label", "row", "col"])
                for i in range(len(result.patches)):
                    writer.writerow([i, int(result.patches.labels[i]),
                                     int(result.patches.source_ids[i, 0]),
                                     int(result.patches.source_ids[i, 1])])
            write_traces_csv(result.traces, out_dir / "trace.csv")
            status = f"{len(result.failures)} failures" if result.failures else "ok"
            print(f"{method} eps={eps:g}: {len(result.patches)} patches -> {out_dir} ({status})")
            if result.failures:
                for idx, msg in result.failures:
                    print(f"  example {idx}: {msg}", file=sys.stderr)
    return 0


def _load_adv_patchset(cfg: RunConfig, method: str, eps: float, reference: PatchSet) -> PatchSet:
    out_dir = _adv_dir(cfg, method, eps)
    manifest = out_dir / "manifest.csv"
    if not manifest.exists():
        raise FileNotFoundError(f"missing adversarial store {out_dir} (run `hsiadv attack`)")
    with open(manifest, newline="") as fh:
        rows = list(csv.DictReader(fh))
    values = np.stack([
        load_cube(out_dir / f"patch_{int(row['index']):05d}.hsc").values for row in rows
    ])
    labels = np.array([int(row["label"]) for row in rows])
    ids = np.array([[int(row["row"]), int(row["col"])] for row in rows])
    if not np.array_equal(labels, reference.labels) or not np.array_equal(ids, reference.source_ids):
        raise ValueError(f"{out_dir} does not match the configured test split")
    return PatchSet(values, labels, ids, reference.patch_size)


def cmd_eval(cfg: RunConfig) -> int:
    cube, grid = _load_dataset(cfg)
    _, test = _patch_sets(cfg, cube, grid)
    archs = [cfg.models.surrogate, *cfg.models.targets]
    models = {}
    for arch in archs:
        path = _model_path(cfg, arch)
        if not path.exists():
            raise FileNotFoundError(f"model missing: {path} (run `hsiadv train`)")
        models[arch] = load_model(path)

    defenses = {
        "none": lambda x: x,
        "noise": lambda x: defend_noise(x, cfg.defense.noise_intensity, seed=cfg.seed),
        "filter": lambda x: defend_spectral_filter(x, cfg.defense.filter_window),
    }

    rows = []

    def add_rows(method: str, eps: float, patches: PatchSet):
        for defense, apply_defense in defenses.items():
            defended = patches.replace_values(apply_defense(patches.values))
            for arch in archs:
                r = evaluate(models[arch], defended)
                note = f"AA excludes {list(r.aa_excluded)}" if r.aa_excluded else ""
                rows.append([method, arch, f"{eps:g}", defense,
                             f"{r.oa:.4f}", f"{r.aa:.4f}", f"{r.kappa:.4f}", note])

    add_rows("none", 0.0, test)
    for method in cfg.attack.methods:
        for eps in cfg.attack.epsilons:
            add_rows(method, eps, _load_adv_patchset(cfg, method, eps, test))

    report_path = cfg.out_path("report.csv")
    report_path.parent.mkdir(parents=True, exist_ok=True)
    with open(report_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "model", "epsilon", "defense", "OA", "AA", "Kappa", "notes"])
        writer.writerows(rows)
    print(f"wrote {report_path} ({len(rows)} rows)")
    _print_report(report_path)
    return 0


def _print_report(path) -> None:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        print("(empty report)")
        return
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    for r, row in enumerate(rows):
        print("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if r == 0:
            print("  ".join("-" * widths[i] for i in range(len(row))))


def cmd_report(cfg: RunConfig) -> int:
    report_path = cfg.out_path("report.csv")
    if not report_path.exists():
        raise FileNotFoundError(f"no report at {report_path} (run `hsiadv eval`)")
    _print_report(report_path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hsiadv",
        description="Adversarial attacks on hyperspectral patch classifiers",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("synth", "generate a synthetic labeled scene"),
        ("train", "train surrogate and target models"),
        ("attack", "craft adversarial test patches"),
        ("eval", "evaluate clean/attacked/defended accuracy"),
        ("report", "pretty-print an existing report"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("-c", "--config", default=None, help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")
        p.add_argument("-o", "--output", default=None, help="output directory override")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--print-config", action="store_true",
                       help="print the effective configuration and exit")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "attack": cmd_attack,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.set)
        if args.output is not None:
            cfg.output_dir = args.output
        if args.seed is not None:
            cfg.seed = args.seed
        if args.print_config:
            print(dump_config(cfg))
            return 0
        return _COMMANDS[args.command](cfg)
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

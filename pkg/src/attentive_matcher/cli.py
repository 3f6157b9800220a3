"""Command-line entry point: prepare, train, evaluate, visualize.

Exit codes: 0 ok, 2 input/ingestion problem, 3 numeric failure,
4 checkpoint/data mismatch.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, read_config_file
from .errors import ContractError, DimensionError, IngestionError, IntegrityError, NumericError, ParseError

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_MISMATCH = 0, 2, 3, 4

log = logging.getLogger("attentive_matcher")


class CommandError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    file_values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise CommandError(f"config file {path} does not exist", EXIT_INPUT)
        file_values = read_config_file(path)
    overrides = {}
    for key in ("preset", "modality", "seed", "augment", "max_steps", "out_dir", "prepared_root",
                "batch_size", "train_split"):
        value = getattr(args, key, None)
        if value is not None and value is not False:
            overrides[key] = value
    try:
        return RunConfig.build(file_values, overrides)
    except (ContractError, ValueError) as exc:
        raise CommandError(f"bad configuration: {exc}", EXIT_INPUT) from None


# ---------------------------------------------------------------------------
# prepare


def cmd_prepare(args) -> int:
    from .data import scan_split, write_manifest

    cfg = _config(args)
    data_root = Path(args.data_root)
    out_root = Path(args.out_root)
    if not data_root.is_dir():
        raise CommandError(f"data root {data_root} does not exist", EXIT_INPUT)
    modality = cfg.train.modality
    kind = "images" if modality == "images" else "strokes"
    suffix = ".png" if modality == "images" else ".txt"
    background = cfg.background_root or str(data_root / f"{kind}_background")
    evaluation = cfg.evaluation_root or str(data_root / f"{kind}_evaluation")
    names = ["background-full", "training", "validation"]
    if Path(evaluation).is_dir():
        names.append("evaluation")
    names += list(cfg.minimal())
    report = []
    for name in names:
        rows, alphas = scan_split(name, background_root=background, evaluation_root=evaluation,
                                  minimal=cfg.minimal(), validation=cfg.validation_alphabets or None,
                                  suffix=suffix, check_counts=cfg.check_counts)
        write_manifest(out_root / f"{name}.tsv", rows)
        n_classes = len({r.class_id for r in rows})
        line = f"{name}\talphabets={len(alphas)}\tclasses={n_classes}\tinstances={len(rows)}"
        if cfg.train.augment and name != "evaluation" and name != "validation":
            line += f"\taugmented_classes={4 * n_classes}"
        report.append(line)
        print(line)
    (out_root / "report.txt").write_text("\n".join(report) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def _load_training_splits(cfg: RunConfig):
    from .data import augment_rotations, load_manifest, load_split

    size = cfg.model.image_size
    modality = cfg.model.modality
    if cfg.prepared_root:
        root = Path(cfg.prepared_root)
        train = load_manifest(root / f"{cfg.train_split}.tsv", cfg.train_split, modality=modality, size=size)
        val = load_manifest(root / "validation.tsv", "validation", modality=modality, size=size)
    else:
        if not cfg.background_root:
            raise CommandError("set prepared_root or background_root", EXIT_INPUT)
        kw = dict(background_root=cfg.background_root, evaluation_root=cfg.evaluation_root,
                  minimal=cfg.minimal(), validation=cfg.validation_alphabets or None,
                  modality=modality, size=size, check_counts=cfg.check_counts)
        train = load_split(cfg.train_split, **kw)
        val = load_split("validation", **kw)
    if cfg.train.augment:
        train = augment_rotations(train)
    return train, val


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .model import AttentiveMatcher
    from .training import run_training

    cfg = _config(args)
    train, val = _load_training_splits(cfg)
    print(f"modality={cfg.model.modality} d_f={cfg.model.d_model} K={cfg.model.agg_dim} "
          f"train_classes={train.n_classes} val_alphabets={len(val.alphabets)}")
    model = AttentiveMatcher.create(cfg.model, seed=cfg.train.seed)
    out = Path(cfg.out_dir)
    result = run_training(model, train, val, cfg.train, out_dir=out)
    model.params.load_state(result.best_state)
    save_checkpoint(out / "best.amck", model, cfg.train, {"epoch": result.best_epoch, "val_acc": result.best_val})
    print(f"best validation accuracy {result.best_val:.4f} at epoch {result.best_epoch}; {result.steps} steps")
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate


def cmd_evaluate(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_predefined_runs
    from .episodes import dump_matrix, evaluate_runs, write_results

    try:
        model, _ = load_checkpoint(args.checkpoint)
    except IngestionError as exc:
        raise CommandError(str(exc), EXIT_INPUT) from None
    except IntegrityError as exc:
        raise CommandError(str(exc), EXIT_MISMATCH) from None
    suffix = ".png" if model.modality == "images" else ".txt"
    size = model.config.image_size if hasattr(model, "config") else 64
    first = Path(args.runs_root) / "run01" / "training"
    if first.is_dir() and not any(p.suffix.lower() == suffix for p in first.iterdir()):
        raise CommandError(f"{model.modality} checkpoint but runs hold no {suffix} items", EXIT_MISMATCH)
    runs = load_predefined_runs(args.runs_root, size=size, suffix=suffix)
    modes = ["argmax"] + (["full-context"] if args.full_context else [])
    reports = []
    try:
        for mode in modes:
            reports.append(evaluate_runs(model, runs, mode))
    except (ContractError, DimensionError) as exc:
        raise CommandError(f"checkpoint does not fit the runs: {exc}", EXIT_MISMATCH) from None
    for rep in reports:
        for r in rep.runs:
            print(f"run{r.run:02d}\t{rep.mode}\t{r.accuracy:.4f}")
        print(f"mean\t{rep.mode}\t{rep.mean:.4f}")
    out = Path(args.out or "results.tsv")
    write_results(out, reports)
    if args.dump_dir:
        for r in reports[0].runs:
            dump_matrix(Path(args.dump_dir) / f"run{r.run:02d}.txt", r.scores)
    return EXIT_OK


# ---------------------------------------------------------------------------
# visualize


def write_pgm(path, grid) -> Path:
    """Binary graymap (P5, maxval 255) of values already in 0..255."""
    g = np.asarray(grid)
    if g.ndim != 2:
        raise DimensionError("PGM needs a 2-D grid")
    h, w = g.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.clip(g, 0, 255).astype(np.uint8).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Read back a graymap written by :func:`write_pgm`."""
    magic, dims, maxval, pixels = Path(path).read_bytes().split(b"\n", 3)
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = (int(v) for v in dims.split())
    return np.frombuffer(pixels, dtype=np.uint8, count=w * h).reshape(h, w)


def to_gray(row: np.ndarray) -> np.ndarray:
    """Rescale ``[0, max(row)]`` linearly onto ``[0, 255]``."""
    peak = float(np.max(row))
    if peak <= 0:
        return np.zeros_like(row, dtype=np.uint8)
    return np.rint(np.asarray(row, dtype=np.float64) / peak * 255.0).astype(np.uint8)


def diagonal_mass(attention: np.ndarray) -> float:
    """Mean weight a token places on the same-index token of the other input."""
    n = min(attention.shape)
    return float(np.mean(attention[np.arange(n), np.arange(n)]))


_DIR_TAG = {"self-A": "selfA", "self-B": "selfB", "cross-A->B": "crossAB", "cross-B->A": "crossBA"}


def export_attention(maps, out_prefix, cells=None, grid_side=None):
    """Write PGM heatmaps for selected query cells plus full-map text dumps."""
    from .attention import extract_cross_attention

    written, stats = [], {}
    for m in maps:
        att = extract_cross_attention([m], m.round, m.direction)
        tag = f"{out_prefix}_r{m.round}_{_DIR_TAG[m.direction]}"
        txt = Path(f"{tag}.txt")
        txt.parent.mkdir(parents=True, exist_ok=True)
        np.savetxt(txt, att, fmt="%.8g")
        written.append(txt)
        stats[(m.round, m.direction)] = diagonal_mass(att)
        n_keys = att.shape[1]
        side = grid_side if grid_side and grid_side * grid_side == n_keys else None
        for q in (cells if cells is not None else default_cells(att.shape[0], side)):
            row = to_gray(att[q])
            grid = row.reshape(side, side) if side else row.reshape(1, -1)
            written.append(write_pgm(f"{tag}_q{q:03d}.pgm", grid))
    return written, stats


def default_cells(n_query, side=None):
    if side:
        mid = side // 2
        return sorted({(mid // 2) * side + mid // 2, mid * side + mid, (mid + mid // 2) * side + mid + mid // 2})
    return sorted({0, n_query // 2, n_query - 1})


def cmd_visualize(args) -> int:
    from .checkpoint import load_checkpoint
    from .data import load_image

    try:
        model, _ = load_checkpoint(args.checkpoint)
    except IngestionError as exc:
        raise CommandError(str(exc), EXIT_INPUT) from None
    except IntegrityError as exc:
        raise CommandError(str(exc), EXIT_MISMATCH) from None
    if model.kind != "attentive_matcher" or model.modality != "images":
        raise CommandError("visualize needs an image AttentiveMatcher checkpoint", EXIT_MISMATCH)
    size = model.config.image_size
    try:
        a = load_image(args.image_a, size)
        b = load_image(args.image_b, size)
    except (IngestionError, DimensionError) as exc:
        raise CommandError(f"invalid image: {exc}", EXIT_INPUT) from None
    cells = [int(c) for c in args.cells.split(",")] if args.cells else None
    maps = model.attention_maps(a, b)
    side = size // 4
    if cells and any(not 0 <= c < side * side for c in cells):
        raise CommandError(f"query cells must lie in [0, {side * side})", EXIT_INPUT)
    written, stats = export_attention(maps, args.out_prefix, cells, grid_side=side)
    for (r, d), v in sorted(stats.items()):
        print(f"round {r}\t{d}\tdiagonal_mass={v:.5f}\tuniform={1.0 / (side * side):.5f}")
    print(f"wrote {len(written)} files")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="attentive-matcher", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--modality", choices=("images", "points"))
        sp.add_argument("--preset", choices=("paper", "desk"))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--augment", action="store_true", default=None)

    sp = sub.add_parser("prepare", help="scan dataset trees and write split manifests")
    sp.add_argument("data_root")
    sp.add_argument("out_root")
    common(sp)
    sp.set_defaults(fn=cmd_prepare)

    sp = sub.add_parser("train", help="train on prepared splits")
    common(sp)
    sp.add_argument("--prepared-root", dest="prepared_root")
    sp.add_argument("--out-dir", dest="out_dir")
    sp.add_argument("--max-steps", dest="max_steps", type=int)
    sp.add_argument("--batch-size", dest="batch_size", type=int)
    sp.add_argument("--train-split", dest="train_split")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("evaluate", help="score the predefined 20-way runs")
    sp.add_argument("checkpoint")
    sp.add_argument("runs_root")
    sp.add_argument("--full-context", action="store_true", help="also report Hungarian assignment")
    sp.add_argument("--out", help="results file (default results.tsv)")
    sp.add_argument("--dump-dir", help="write each run's score matrix as text")
    sp.set_defaults(fn=cmd_evaluate)

    sp = sub.add_parser("visualize", help="export attention heatmaps for an image pair")
    sp.add_argument("checkpoint")
    sp.add_argument("image_a")
    sp.add_argument("image_b")
    sp.add_argument("out_prefix")
    sp.add_argument("--cells", help="comma-separated query cells (row-major grid index)")
    sp.set_defaults(fn=cmd_visualize)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IngestionError, IntegrityError, ParseError, ContractError, DimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())

"""Omniglot ingestion: images, pen trajectories, splits, rotations, predefined runs.

Directory layouts follow the public Omniglot release::

    images_background/<Alphabet>/<characterNN>/<id>_<drawer>.png
    strokes_background/<Alphabet>/<characterNN>/<id>_<drawer>.txt
    all_runs/runNN/{training,test}/*.png  +  runNN/class_labels.txt

Images are stored black ink on white; after loading, ink is 1 and
background 0.  Stroke files store y pointing up (negative values); loaded
sequences are converted to image coordinates (y down).
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ContractError, DimensionError, IngestionError, IntegrityError, ParseError

INSTANCES_PER_CLASS = 20
NATIVE_SIZE = 105
POINT_SPACING = 5.0

# (alphabets, classes) for the named Omniglot splits
SPLIT_COUNTS = {
    "background-full": (30, 964),
    "evaluation": (20, 659),
    "background-minimal-1": (5, None),
    "background-minimal-2": (5, None),
}
TRAIN_SPLITS = ("background-full", "background-minimal-1", "background-minimal-2", "training")


@dataclass
class CharacterImage:
    pixels: np.ndarray  # (S, S) float32 in [0, 1], ink = 1
    class_id: int
    alphabet_id: int
    instance_id: int
    alphabet: str = ""
    character: str = ""
    path: str | None = None


@dataclass
class StrokeSequence:
    points: np.ndarray  # (P, 2) image-frame pixels, y down
    stroke_ids: np.ndarray  # (P,) int
    begins: np.ndarray  # (P,) bool
    ends: np.ndarray  # (P,) bool
    class_id: int = -1
    alphabet_id: int = -1
    instance_id: int = -1
    alphabet: str = ""
    character: str = ""
    path: str | None = None

    def __len__(self):
        return len(self.points)

    def strokes(self):
        """Split back into a list of ``(n_i, 2)`` arrays."""
        if not len(self.points):
            return []
        cuts = np.flatnonzero(np.diff(self.stroke_ids)) + 1
        return np.split(self.points, cuts)


@dataclass
class DatasetSplit:
    name: str
    instances: list
    alphabets: list
    class_names: list = field(default_factory=list)
    modality: str = "images"

    @property
    def n_classes(self):
        return len({x.class_id for x in self.instances})

    def by_class(self):
        """class_id -> list of instances, in load order."""
        out: dict[int, list] = {}
        for x in self.instances:
            out.setdefault(x.class_id, []).append(x)
        return out

    def classes_by_alphabet(self):
        """alphabet_id -> sorted class ids."""
        out: dict[int, set] = {}
        for x in self.instances:
            out.setdefault(x.alphabet_id, set()).add(x.class_id)
        return {a: sorted(c) for a, c in sorted(out.items())}


@dataclass
class PredefinedRun:
    index: int
    supports: list
    queries: list
    truth: list  # truth[q] = index into supports
    support_files: list = field(default_factory=list)
    query_files: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# images


def resize_image(src: np.ndarray, target: int = 64) -> np.ndarray:
    """Area-weighted resampling of a 2-D grid to ``target x target``.

    Each output cell averages the source area it covers, so the image mean
    is preserved exactly (up to rounding).
    """
    src = np.asarray(src, dtype=np.float64)
    if src.ndim != 2 or 0 in src.shape:
        raise DimensionError(f"resize_image needs a non-empty 2-D grid, got {src.shape}")
    rows = _area_matrix(src.shape[0], target)
    cols = _area_matrix(src.shape[1], target)
    out = rows @ src @ cols.T
    return np.clip(out, src.min(), src.max()).astype(np.float32)


def _area_matrix(n_src: int, n_dst: int) -> np.ndarray:
    # weight[i, j] = overlap of dst cell i with src cell j, in dst-cell units
    scale = n_src / n_dst
    edges_dst = np.arange(n_dst + 1) * scale
    lo = np.maximum(edges_dst[:-1, None], np.arange(n_src)[None, :])
    hi = np.minimum(edges_dst[1:, None], np.arange(n_src)[None, :] + 1)
    return np.clip(hi - lo, 0.0, None) / scale


def read_ink_mask(path) -> np.ndarray:
    """Binary ink mask of a black-on-white image file (ink = 1)."""
    try:
        with Image.open(path) as im:
            gray = np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from None
    return (gray < 128).astype(np.float32)


def load_image(path, size: int = 64) -> np.ndarray:
    return resize_image(read_ink_mask(path), size)


def _list_dirs(path: Path):
    return sorted(p for p in path.iterdir() if p.is_dir() and not p.name.startswith("."))


def _scan_tree(root, suffix, alphabets=None):
    """Yield (alphabet, character, [files]) in sorted order."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    found = _list_dirs(root)
    if alphabets is not None:
        names = {p.name: p for p in found}
        missing = [a for a in alphabets if a not in names]
        if missing:
            raise IngestionError(f"alphabet directories missing under {root}: {', '.join(missing)}")
        found = [names[a] for a in sorted(alphabets)]
    if not found:
        raise IngestionError(f"no alphabet directories under {root}")
    out = []
    for adir in found:
        chars = _list_dirs(adir)
        if not chars:
            raise IngestionError(f"no character directories under {adir}")
        for cdir in chars:
            files = sorted(p for p in cdir.iterdir() if p.suffix.lower() == suffix)
            out.append((adir.name, cdir.name, files))
    return out


def _check_counts(name, alphabets, n_classes, check_counts):
    expected = SPLIT_COUNTS.get(name)
    if not check_counts or expected is None:
        return
    n_alpha, n_cls = expected
    if len(alphabets) != n_alpha:
        raise IntegrityError(f"split {name}: expected {n_alpha} alphabets, found {len(alphabets)}")
    if n_cls is not None and n_classes != n_cls:
        raise IntegrityError(f"split {name}: expected {n_cls} classes, found {n_classes}")


@dataclass
class ManifestRow:
    path: str
    class_id: int
    alphabet_id: int
    instance_id: int
    alphabet: str
    character: str


def scan_dataset(root, split: str = "background-full", *, suffix: str = ".png", alphabets=None,
                 check_counts: bool = True, instances_per_class: int = INSTANCES_PER_CLASS):
    """Enumerate instance files without reading them.

    Class ids follow sorted (alphabet, character) order.  When
    ``check_counts`` is set and ``split`` names a standard Omniglot split,
    alphabet and class counts must match exactly.
    """
    tree = _scan_tree(root, suffix, alphabets)
    alpha_names = sorted({a for a, _, _ in tree})
    alpha_index = {a: i for i, a in enumerate(alpha_names)}
    rows = []
    for cid, (alpha, char, files) in enumerate(tree):
        if len(files) != instances_per_class:
            raise IntegrityError(
                f"{Path(root) / alpha / char}: expected {instances_per_class} instances, found {len(files)}"
            )
        rows.extend(ManifestRow(str(f), cid, alpha_index[alpha], iid, alpha, char) for iid, f in enumerate(files))
    _check_counts(split, alpha_names, len(tree), check_counts)
    return rows, alpha_names


def _class_names(rows):
    seen = {}
    for r in rows:
        seen.setdefault(r.class_id, f"{r.alphabet}/{r.character}")
    return [seen[k] for k in sorted(seen)]


def _image_from_row(r: ManifestRow, size: int) -> CharacterImage:
    return CharacterImage(load_image(r.path, size), r.class_id, r.alphabet_id, r.instance_id, r.alphabet,
                          r.character, r.path)


def _strokes_from_row(r: ManifestRow, spacing: float = POINT_SPACING) -> StrokeSequence:
    seq = resample_strokes(parse_stroke_file(r.path), spacing, flip_y=True, class_id=r.class_id,
                           alphabet_id=r.alphabet_id, instance_id=r.instance_id, alphabet=r.alphabet,
                           character=r.character, path=r.path)
    if len(seq) == 0:
        raise IntegrityError(f"{r.path}: trajectory has no points")
    return seq


def load_image_dataset(
    root,
    split: str = "background-full",
    *,
    size: int = 64,
    alphabets=None,
    check_counts: bool = True,
    instances_per_class: int = INSTANCES_PER_CLASS,
) -> DatasetSplit:
    """Load every ``alphabet/character/*.png`` under ``root`` (see :func:`scan_dataset`)."""
    rows, alpha_names = scan_dataset(root, split, suffix=".png", alphabets=alphabets, check_counts=check_counts,
                                     instances_per_class=instances_per_class)
    return DatasetSplit(split, [_image_from_row(r, size) for r in rows], alpha_names, _class_names(rows), "images")


def write_manifest(path, rows) -> Path:
    """Tab-separated manifest: path, class_id, alphabet_id, instance_id, alphabet, character."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["path\tclass_id\talphabet_id\tinstance_id\talphabet\tcharacter"]
    lines += [f"{r.path}\t{r.class_id}\t{r.alphabet_id}\t{r.instance_id}\t{r.alphabet}\t{r.character}" for r in rows]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path):
    path = Path(path)
    if not path.is_file():
        raise IngestionError(f"manifest {path} does not exist")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines()[1:], start=2):
        parts = line.split("\t")
        if len(parts) != 6:
            raise IntegrityError(f"{path}:{lineno}: expected 6 tab-separated fields")
        rows.append(ManifestRow(parts[0], int(parts[1]), int(parts[2]), int(parts[3]), parts[4], parts[5]))
    return rows


def load_manifest(path, name: str, *, modality: str = "images", size: int = 64) -> DatasetSplit:
    """Materialise a split from a manifest written by :func:`write_manifest`."""
    rows = read_manifest(path)
    alphas = sorted({r.alphabet for r in rows})
    if modality == "images":
        items = [_image_from_row(r, size) for r in rows]
    else:
        items = [_strokes_from_row(r) for r in rows]
    return DatasetSplit(name, items, alphas, _class_names(rows), modality)


# ---------------------------------------------------------------------------
# strokes


def parse_stroke_file(path):
    """Read a trajectory file into a list of strokes of ``(x, y, t)`` tuples.

    Each stroke opens with a ``START`` line and closes with ``BREAK``; point
    lines are ``x,y,t``.
    """
    strokes, current = [], None
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read stroke file {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        if line == "START":
            if current is not None:
                raise ParseError("START inside an unterminated stroke", lineno, path)
            current = []
        elif line == "BREAK":
            if current is None:
                raise ParseError("BREAK without a matching START", lineno, path)
            strokes.append(current)
            current = None
        else:
            if current is None:
                raise ParseError(f"point outside a stroke: {line!r}", lineno, path)
            parts = line.split(",")
            if len(parts) != 3:
                raise ParseError(f"expected 'x,y,t', got {line!r}", lineno, path)
            try:
                x, y, t = (float(p) for p in parts)
            except ValueError:
                raise ParseError(f"non-numeric point {line!r}", lineno, path) from None
            if not all(math.isfinite(v) for v in (x, y, t)):
                raise ParseError(f"non-finite point {line!r}", lineno, path)
            current.append((x, y, t))
    if current is not None:
        raise ParseError("unterminated stroke at end of file", None, path)
    return strokes


def write_stroke_file(path, strokes):
    lines = []
    for stroke in strokes:
        lines.append("START")
        lines.extend(f"{x:.4f},{y:.4f},{t:.1f}" for x, y, t in stroke)
        lines.append("BREAK")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def resample_stroke(xy: np.ndarray, spacing: float = POINT_SPACING) -> np.ndarray:
    """Walk a polyline and emit points exactly ``spacing`` apart.

    Each new point is the first position along the path at Euclidean
    distance ``spacing`` from the previous one.  The end point is always
    kept, so the final gap may be shorter.  Strokes whose path never leaves
    the first circle collapse to their two endpoints.
    """
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if len(xy) == 0:
        return xy
    keep = np.ones(len(xy), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(xy, axis=0), axis=1) > 1e-12 * spacing
    xy = xy[keep]
    if len(xy) == 1:
        return xy.copy()
    r2 = spacing * spacing
    out = [xy[0]]
    c = xy[0]
    seg, t0 = 0, 0.0
    while seg < len(xy) - 1:
        a, b = xy[seg], xy[seg + 1]
        d = b - a
        # |a + t d - c|^2 = r^2 ; take the exit root beyond t0
        f = a - c
        qa = d @ d
        qb = 2.0 * (f @ d)
        qc = f @ f - r2
        disc = qb * qb - 4 * qa * qc
        t = None
        if disc >= 0:
            root = (-qb + math.sqrt(disc)) / (2 * qa)
            # a vertex a rounding error short of the circle still counts as on it
            if t0 <= root <= 1.0 + 1e-9 * spacing / math.sqrt(qa):
                t = min(root, 1.0)
        if t is None:
            seg, t0 = seg + 1, 0.0
            continue
        c = a + t * d
        out.append(c)
        t0 = t
    if np.linalg.norm(xy[-1] - out[-1]) > 1e-9:
        out.append(xy[-1])
    elif len(out) > 1:
        out[-1] = xy[-1]
    return np.array(out)


def resample_strokes(raw, spacing: float = POINT_SPACING, *, flip_y: bool = False, **labels) -> StrokeSequence:
    """Resample a raw trajectory (list of ``(x, y, t)`` strokes) into a sequence.

    ``flip_y`` negates y, converting Omniglot's y-up motor frame into image
    coordinates.  Extra keyword arguments fill the label fields.
    """
    pts, sids, begins, ends = [], [], [], []
    for k, stroke in enumerate(raw):
        if len(stroke) == 0:
            continue
        xy = np.asarray([(p[0], p[1]) for p in stroke], dtype=np.float64)
        if flip_y:
            xy[:, 1] = -xy[:, 1]
        r = resample_stroke(xy, spacing)
        n = len(r)
        pts.append(r)
        sids.append(np.full(n, k))
        b = np.zeros(n, dtype=bool)
        e = np.zeros(n, dtype=bool)
        b[0] = True
        e[-1] = True
        begins.append(b)
        ends.append(e)
    if not pts:
        empty = np.zeros((0, 2))
        return StrokeSequence(empty, np.zeros(0, int), np.zeros(0, bool), np.zeros(0, bool), **labels)
    return StrokeSequence(
        np.concatenate(pts), np.concatenate(sids), np.concatenate(begins), np.concatenate(ends), **labels
    )


def normalize_points(points: np.ndarray, frame: float = NATIVE_SIZE) -> np.ndarray:
    """Map image-frame pixel coordinates to [-1, 1] around the frame centre."""
    half = frame / 2.0
    return ((np.asarray(points, dtype=np.float64) - half) / half).astype(np.float32)


def load_stroke_dataset(
    root,
    split: str = "background-full",
    *,
    alphabets=None,
    check_counts: bool = True,
    instances_per_class: int = INSTANCES_PER_CLASS,
    spacing: float = POINT_SPACING,
) -> DatasetSplit:
    """Stroke-file counterpart of :func:`load_image_dataset`."""
    rows, alpha_names = scan_dataset(root, split, suffix=".txt", alphabets=alphabets, check_counts=check_counts,
                                     instances_per_class=instances_per_class)
    items = [_strokes_from_row(r, spacing) for r in rows]
    return DatasetSplit(split, items, alpha_names, _class_names(rows), "points")


# ---------------------------------------------------------------------------
# augmentation


def rotate_points(points: np.ndarray, quarter_turns: int, frame: float = NATIVE_SIZE) -> np.ndarray:
    """Rotate image-frame points counter-clockwise (as displayed) about the frame centre."""
    c = frame / 2.0
    p = np.asarray(points, dtype=np.float64) - c
    for _ in range(quarter_turns % 4):
        # y-down frame: counter-clockwise display rotation is (x, y) -> (y, -x)
        p = np.stack([p[:, 1], -p[:, 0]], axis=1)
    return p + c


def augment_rotations(split: DatasetSplit) -> DatasetSplit:
    """Add 90/180/270 degree rotated copies of every class as new classes."""
    if split.name not in TRAIN_SPLITS:
        raise ContractError(f"rotation augmentation is for training splits only, not {split.name!r}")
    offset = max(x.class_id for x in split.instances) + 1
    out = list(split.instances)
    names = list(split.class_names)
    for k in (1, 2, 3):
        for x in split.instances:
            if isinstance(x, CharacterImage):
                out.append(replace(x, pixels=np.ascontiguousarray(np.rot90(x.pixels, k)), class_id=x.class_id + k * offset))
            else:
                out.append(replace(x, points=rotate_points(x.points, k), class_id=x.class_id + k * offset))
        names.extend(f"{n}@rot{90 * k}" for n in split.class_names)
    return DatasetSplit(split.name, out, list(split.alphabets), names, split.modality)


# ---------------------------------------------------------------------------
# predefined evaluation runs


def _resolve_run_path(root: Path, run_dir: Path, rel: str, suffix: str) -> Path:
    rels = [Path(rel), Path(rel).with_suffix(suffix)]
    for r in rels:
        for cand in (root / r, run_dir / r, run_dir / r.parent.name / r.name):
            if cand.is_file():
                return cand
    raise IngestionError(f"label mapping references missing file {rel!r} (under {root})")


def _load_item(path: Path, size: int):
    if path.suffix.lower() == ".txt":
        seq = resample_strokes(parse_stroke_file(path), flip_y=True, path=str(path))
        if len(seq) == 0:
            raise IntegrityError(f"{path}: trajectory has no points")
        return seq
    return CharacterImage(load_image(path, size), -1, -1, -1, path=str(path))


def load_predefined_runs(root, *, size: int = 64, n_runs: int = 20, way: int = 20, suffix: str = ".png"):
    """Load ``run01 .. runNN`` folders with their ``class_labels.txt`` mappings.

    ``suffix`` selects the item files (``.png`` images or ``.txt`` strokes).
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"runs root {root} does not exist")
    runs = []
    for r in range(1, n_runs + 1):
        run_dir = root / f"run{r:02d}"
        if not run_dir.is_dir():
            raise IngestionError(f"missing run folder {run_dir}")
        train_dir, test_dir = run_dir / "training", run_dir / "test"
        for d in (train_dir, test_dir):
            if not d.is_dir():
                raise IngestionError(f"missing folder {d}")
        sup_files = sorted(p for p in train_dir.iterdir() if p.suffix.lower() == suffix)
        qry_files = sorted(p for p in test_dir.iterdir() if p.suffix.lower() == suffix)
        if len(sup_files) != way:
            raise IntegrityError(f"{train_dir}: expected {way} supports, found {len(sup_files)}")
        if len(qry_files) != way:
            raise IntegrityError(f"{test_dir}: expected {way} queries, found {len(qry_files)}")
        mapping_file = run_dir / "class_labels.txt"
        if not mapping_file.is_file():
            raise IngestionError(f"missing label mapping {mapping_file}")
        mapping = {}
        for lineno, line in enumerate(mapping_file.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise IngestionError(f"{mapping_file}:{lineno}: expected 'query support', got {line!r}")
            q = _resolve_run_path(root, run_dir, parts[0], suffix).resolve()
            s = _resolve_run_path(root, run_dir, parts[1], suffix).resolve()
            mapping[_swap_suffix(q, suffix)] = _swap_suffix(s, suffix)
        sup_index = {p.resolve(): i for i, p in enumerate(sup_files)}
        truth = []
        for q in qry_files:
            s = mapping.get(q.resolve())
            if s is None:
                raise IngestionError(f"{mapping_file}: no mapping row for {q.name}")
            if s not in sup_index:
                raise IngestionError(f"{mapping_file}: {q.name} maps to {s}, which is not a support of this run")
            truth.append(sup_index[s])
        if len(set(truth)) != way:
            raise IntegrityError(f"{mapping_file}: queries do not cover each support exactly once")
        runs.append(
            PredefinedRun(
                r,
                [_load_item(p, size) for p in sup_files],
                [_load_item(p, size) for p in qry_files],
                truth,
                [str(p) for p in sup_files],
                [str(p) for p in qry_files],
            )
        )
    return runs


def _swap_suffix(p: Path, suffix: str) -> Path:
    return p if p.suffix.lower() == suffix else p.with_suffix(suffix)


# ---------------------------------------------------------------------------
# split assembly from a run configuration


def default_validation_alphabets(background_alphabets, n: int = 10):
    """Last ``n`` background alphabets in sorted order."""
    return sorted(background_alphabets)[-n:]


def list_alphabets(root):
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    return [p.name for p in _list_dirs(root)]


def scan_split(name: str, *, background_root, evaluation_root=None, minimal=None, validation=None,
               suffix: str = ".png", check_counts: bool = True):
    """Manifest rows and alphabet list for one of the named splits.

    ``training`` is the background set minus the validation alphabets;
    ``validation`` is those held-out alphabets.  ``minimal`` maps
    ``background-minimal-1/2`` to their alphabet lists.
    """
    if name == "evaluation":
        if evaluation_root is None:
            raise ContractError("evaluation split needs evaluation_root")
        return scan_dataset(evaluation_root, name, suffix=suffix, check_counts=check_counts)
    alphas = list_alphabets(background_root)
    val = list(validation) if validation else default_validation_alphabets(alphas)
    if name == "background-full":
        return scan_dataset(background_root, name, suffix=suffix, check_counts=check_counts)
    if name in ("background-minimal-1", "background-minimal-2"):
        if not minimal or name not in minimal:
            raise ContractError(f"{name} needs its alphabet list in the configuration")
        chosen = list(minimal[name])
        if len(chosen) != 5:
            raise IntegrityError(f"{name} must list exactly 5 alphabets, got {len(chosen)}")
        return scan_dataset(background_root, name, suffix=suffix, alphabets=chosen, check_counts=check_counts)
    if name == "validation":
        return scan_dataset(background_root, name, suffix=suffix, alphabets=val, check_counts=False)
    if name == "training":
        train = [a for a in alphas if a not in set(val)]
        return scan_dataset(background_root, name, suffix=suffix, alphabets=train, check_counts=False)
    raise ContractError(f"unknown split {name!r}")


def load_split(name: str, *, modality: str = "images", size: int = 64, **kw) -> DatasetSplit:
    """Load a named split; keyword arguments as for :func:`scan_split`."""
    suffix = ".png" if modality == "images" else ".txt"
    rows, alphas = scan_split(name, suffix=suffix, **kw)
    if modality == "images":
        items = [_image_from_row(r, size) for r in rows]
    else:
        items = [_strokes_from_row(r) for r in rows]
    return DatasetSplit(name, items, alphas, _class_names(rows), modality)

"""Procedural handwriting corpus written in the Omniglot on-disk format.

Used as a stand-in when the real dataset is not available.  Each alphabet
owns a small set of stroke primitives (cubic Bezier curves); a character is
a placed combination of 1-4 primitives; an instance ("drawer") perturbs the
control points and applies a small global affine jitter.  Characters of one
alphabet therefore share parts, which keeps within-alphabet episodes
non-trivial.
"""

from __future__ import annotations

import math
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import INSTANCES_PER_CLASS, NATIVE_SIZE, write_stroke_file

FULL_BACKGROUND = (30, 964)
FULL_EVALUATION = (20, 659)


@dataclass
class Style:
    point_noise: float = 0.06  # control-point jitter, unit-box units
    rotation_deg: float = 10.0
    scale_jitter: float = 0.1
    shift: float = 0.08
    line_width: int = 3


def spread(total: int, parts: int):
    """Split ``total`` into ``parts`` near-equal positive integers."""
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def make_alphabet(rng, n_primitives: int = 8):
    prims = []
    for _ in range(n_primitives):
        start = rng.uniform(-0.6, 0.6, 2)
        end = rng.uniform(-0.6, 0.6, 2)
        while np.linalg.norm(end - start) < 0.4:
            end = rng.uniform(-0.6, 0.6, 2)
        mid = rng.uniform(-0.8, 0.8, (2, 2))
        prims.append(np.vstack([start, mid, end]))
    return prims


def make_character(rng, alphabet):
    n = int(rng.integers(1, 5))
    strokes = []
    for _ in range(n):
        p = alphabet[int(rng.integers(len(alphabet)))]
        ang = rng.uniform(-math.pi, math.pi)
        rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
        scale = rng.uniform(0.8, 1.3)
        shift = rng.uniform(-0.35, 0.35, 2)
        strokes.append(p @ rot.T * scale + shift)
    # centre the character and fit it to a box of half-width ~0.8
    pts = np.concatenate([_bezier(s, 20) for s in strokes])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    fit = rng.uniform(0.7, 0.9) / max(float((hi - lo).max()) / 2.0, 1e-6)
    return [(s - (lo + hi) / 2.0) * fit for s in strokes]


def _bezier(ctrl, n):
    t = np.linspace(0.0, 1.0, n)[:, None]
    p0, p1, p2, p3 = ctrl
    return (1 - t) ** 3 * p0 + 3 * (1 - t) ** 2 * t * p1 + 3 * (1 - t) * t**2 * p2 + t**3 * p3


def draw_instance(rng, character, style: Style = Style(), frame: int = NATIVE_SIZE):
    """Dense pen trajectory in image pixels (y down), one array per stroke."""
    ang = math.radians(rng.uniform(-style.rotation_deg, style.rotation_deg))
    rot = np.array([[math.cos(ang), -math.sin(ang)], [math.sin(ang), math.cos(ang)]])
    scale = 1.0 + rng.uniform(-style.scale_jitter, style.scale_jitter)
    shift = rng.uniform(-style.shift, style.shift, 2)
    half = frame / 2.0
    out = []
    for ctrl in character:
        c = ctrl + rng.normal(0.0, style.point_noise, ctrl.shape)
        c = c @ rot.T * scale + shift
        c = np.clip(c, -1.05, 1.05)
        curve = _bezier(c, 80) * (0.45 * frame) + half
        out.append(curve)
    return out


def render(strokes, frame: int = NATIVE_SIZE, width: int = 3) -> Image.Image:
    im = Image.new("L", (frame, frame), 255)
    d = ImageDraw.Draw(im)
    for s in strokes:
        pts = [tuple(p) for p in s]
        d.line(pts, fill=0, width=width, joint="curve")
        r = width / 2
        for x, y in (pts[0], pts[-1]):
            d.ellipse((x - r, y - r, x + r, y + r), fill=0)
    return im.convert("1")


def _to_motor(strokes):
    # Omniglot trajectory files: y up (negated), timestamps in ms
    out, t = [], 0.0
    for s in strokes:
        rows = []
        for x, y in s:
            rows.append((float(x), float(-y), t))
            t += 10.0
        out.append(rows)
        t += 200.0
    return out


def write_split(root, alphabet_prefix, class_counts, rng, *, style=Style(), images=True, strokes=True,
                start_id=1, image_dir=None, stroke_dir=None):
    """Write one split; returns {alphabet: [character dir names]} and the next id."""
    root = Path(root)
    listing = {}
    gid = start_id
    for a, n_cls in enumerate(class_counts, start=1):
        alpha = f"{alphabet_prefix}_{a:02d}"
        prims = make_alphabet(rng)
        listing[alpha] = []
        for c in range(1, n_cls + 1):
            char = f"character{c:02d}"
            listing[alpha].append(char)
            shape = make_character(rng, prims)
            for drawer in range(1, INSTANCES_PER_CLASS + 1):
                inst = draw_instance(rng, shape, style)
                stem = f"{gid:04d}_{drawer:02d}"
                if images:
                    d = root / image_dir / alpha / char
                    d.mkdir(parents=True, exist_ok=True)
                    render(inst, width=style.line_width).save(d / f"{stem}.png")
                if strokes:
                    d = root / stroke_dir / alpha / char
                    d.mkdir(parents=True, exist_ok=True)
                    write_stroke_file(d / f"{stem}.txt", _to_motor(inst))
            gid += 1
    return listing, gid


def write_runs(root, eval_image_dir, eval_stroke_dir, listing, rng, *, n_runs=20, way=20, strokes=True):
    """Predefined 20-way within-alphabet runs drawn from the evaluation split."""
    root = Path(root)
    runs_root = root / "all_runs"
    eligible = [a for a, chars in listing.items() if len(chars) >= way]
    for r in range(1, n_runs + 1):
        alpha = eligible[(r - 1) % len(eligible)]
        chars = sorted(rng.choice(listing[alpha], size=way, replace=False))
        d1, d2 = rng.choice(INSTANCES_PER_CLASS, size=2, replace=False) + 1
        run = runs_root / f"run{r:02d}"
        (run / "training").mkdir(parents=True, exist_ok=True)
        (run / "test").mkdir(parents=True, exist_ok=True)
        sup_order = rng.permutation(way)
        qry_order = rng.permutation(way)
        rows = []
        for k, char in enumerate(chars):
            src_dir = root / eval_image_dir / alpha / char
            stems = sorted(p.stem for p in src_dir.glob("*.png"))
            s_stem, q_stem = stems[d1 - 1], stems[d2 - 1]
            s_name = f"class{sup_order[k] + 1:02d}"
            q_name = f"item{qry_order[k] + 1:02d}"
            shutil.copy(src_dir / f"{s_stem}.png", run / "training" / f"{s_name}.png")
            shutil.copy(src_dir / f"{q_stem}.png", run / "test" / f"{q_name}.png")
            if strokes:
                sdir = root / eval_stroke_dir / alpha / char
                shutil.copy(sdir / f"{s_stem}.txt", run / "training" / f"{s_name}.txt")
                shutil.copy(sdir / f"{q_stem}.txt", run / "test" / f"{q_name}.txt")
            rows.append((q_name, s_name))
        rows.sort()
        (run / "class_labels.txt").write_text(
            "".join(f"run{r:02d}/test/{q}.png run{r:02d}/training/{s}.png\n" for q, s in rows)
        )
    return runs_root


def write_corpus(root, *, background=FULL_BACKGROUND, evaluation=FULL_EVALUATION, seed=0,
                 images=True, strokes=True, runs=True, style=Style()):
    """Write a complete Omniglot-format corpus under ``root``.

    ``background`` and ``evaluation`` are ``(n_alphabets, n_classes)`` pairs
    or explicit per-alphabet class-count lists.  Returns the paths written.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)

    def counts(spec):
        if isinstance(spec, tuple) and len(spec) == 2 and all(isinstance(v, int) for v in spec):
            return spread(spec[1], spec[0])
        return list(spec)

    paths = {"root": root}
    _, next_id = write_split(root, "Alphabet", counts(background), rng, style=style, images=images,
                             strokes=strokes, image_dir="images_background", stroke_dir="strokes_background")
    paths["images_background"] = root / "images_background"
    paths["strokes_background"] = root / "strokes_background"
    if evaluation:
        listing, _ = write_split(root, "Eval_Alphabet", counts(evaluation), rng, style=style, images=True,
                                 strokes=strokes, start_id=next_id, image_dir="images_evaluation",
                                 stroke_dir="strokes_evaluation")
        paths["images_evaluation"] = root / "images_evaluation"
        paths["strokes_evaluation"] = root / "strokes_evaluation"
        if runs:
            paths["all_runs"] = write_runs(root, "images_evaluation", "strokes_evaluation", listing, rng,
                                           strokes=strokes)
    return paths

"""Procedural shape-world scenes and the pretraining/transfer task builders.

Every scene is a pure function of (seed, spec): colored circles, squares
and triangles on a white canvas, optionally with blocky digit glyphs for
the OCR-style task. Ground truth (class, color, tight box, footprint
mask, glyph text) instantiates all task formats; the mixture sampler
draws tasks by weight with the stage-2 reweighting multipliers applied
on top.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .codec import Box, format_detection, format_segmentation, mask_encode

SHAPES = ("circle", "square", "triangle")

PALETTE = {
    "red": (0.85, 0.10, 0.10),
    "green": (0.10, 0.65, 0.15),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.90, 0.80, 0.10),
    "purple": (0.55, 0.15, 0.70),
    "orange": (0.95, 0.55, 0.05),
}
COLORS = tuple(PALETTE)

MAX_OVERLAP_IOU = 0.30
_GLYPH_COLOR = (0.1, 0.1, 0.1)

# 3x5 bitmaps for digits 0-9, row-major strings
_DIGIT_FONT = {
    "0": "111101101101111", "1": "010110010010111",
    "2": "111001111100111", "3": "111001111001111",
    "4": "101101111001001", "5": "111100111001111",
    "6": "111100111101111", "7": "111001010010010",
    "8": "111101111101111", "9": "111101111001111",
}

PRETRAIN_TASKS = ("caption", "ocr", "count", "presence", "listing",
                  "multi_presence", "vqg", "detect", "segment",
                  "grounded_caption")


@dataclass(frozen=True)
class Difficulty:
    min_objects: int = 1
    max_objects: int = 5
    with_glyphs: bool = True
    same_class: bool = False     # all objects share shape+color (counting sets)
    same_class_prob: float = 0.0  # per-scene chance of a same-class scene


@dataclass
class SceneObject:
    shape: str
    color: str
    box: Box
    mask: np.ndarray

    @property
    def name(self):
        return f"{self.color} {self.shape}"


@dataclass
class ShapeWorldScene:
    seed: int
    res: int
    objects: list
    glyphs: list                 # [(digit char, Box)]
    raster: np.ndarray           # [res, res, 3] in [0, 1]

    @property
    def text(self):
        """Glyph characters concatenated in raster order."""
        order = sorted(self.glyphs, key=lambda g: (g[1].ymin, g[1].xmin))
        return "".join(c for c, _ in order)


def _box_iou(a, b):
    iy = max(0.0, min(a.ymax, b.ymax) - max(a.ymin, b.ymin))
    ix = max(0.0, min(a.xmax, b.xmax) - max(a.xmin, b.xmin))
    inter = iy * ix
    union = ((a.ymax - a.ymin) * (a.xmax - a.xmin)
             + (b.ymax - b.ymin) * (b.xmax - b.xmin) - inter)
    return inter / union if union > 0 else 0.0


def _render_object(res, shape, cy, cx, r):
    """Boolean footprint mask for one object on a res-px grid."""
    yy, xx = np.mgrid[0:res, 0:res]
    yy = yy + 0.5
    xx = xx + 0.5
    if shape == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if shape == "square":
        return (np.abs(yy - cy) <= r * 0.9) & (np.abs(xx - cx) <= r * 0.9)
    # upward triangle inscribed in the radius-r circle
    top = cy - r
    bot = cy + r * 0.8
    half = r
    frac = np.clip((yy - top) / (bot - top), 0, 1)
    return (yy >= top) & (yy <= bot) & (np.abs(xx - cx) <= half * frac)


def _tight_box(mask, res):
    ys, xs = np.nonzero(mask)
    return Box(ys.min() / res, xs.min() / res,
               (ys.max() + 1) / res, (xs.max() + 1) / res)


def generate_scene(seed, res=32, difficulty=Difficulty(), count=None):
    """Deterministic scene for (seed, res, difficulty).

    ``count`` pins the object count (used by balanced counting sets).
    Placement retries are bounded; exhausting them re-seeds deterministically.
    """
    for attempt in range(8):
        rng = np.random.default_rng((seed, res, attempt))
        scene = _try_generate(rng, seed, res, difficulty, count)
        if scene is not None:
            return scene
    raise RuntimeError(f"scene placement failed for seed {seed}")


def _dilate1(mask):
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _try_generate(rng, seed, res, diff, count):
    n = count if count is not None else int(
        rng.integers(diff.min_objects, diff.max_objects + 1))
    scale = res / 32.0
    raster = np.ones((res, res, 3), dtype=np.float32)
    objects = []
    footprint = np.zeros((res, res), dtype=bool)
    shared = None
    if diff.same_class or (diff.same_class_prob
                           and rng.random() < diff.same_class_prob):
        shared = (SHAPES[rng.integers(len(SHAPES))],
                  COLORS[rng.integers(len(COLORS))])
    # same-class objects render in one flat color, so overlapping or touching
    # instances would merge into a single blob and make counts ambiguous;
    # keep them pixel-disjoint with a one-pixel gap (and smaller when dense)
    r_hi = 4.6 if shared is None else max(3.0, 4.6 - 0.2 * max(0, n - 5))
    for _ in range(n):
        placed = False
        for _ in range(40):
            if shared is not None:
                shape, color = shared
            else:
                shape = SHAPES[rng.integers(len(SHAPES))]
                color = COLORS[rng.integers(len(COLORS))]
            r = rng.uniform(2.6, r_hi) * scale
            cy = rng.uniform(r + 1, res - r - 1)
            cx = rng.uniform(r + 1, res - r - 1)
            mask = _render_object(res, shape, cy, cx, r)
            if not mask.any():
                continue
            if shared is not None and (_dilate1(mask) & footprint).any():
                continue
            box = _tight_box(mask, res)
            if all(_box_iou(box, o.box) <= MAX_OVERLAP_IOU for o in objects):
                objects.append(SceneObject(shape, color, box, mask))
                footprint |= mask
                placed = True
                break
        if not placed:
            return None
    for obj in objects:
        raster[obj.mask] = PALETTE[obj.color]
    glyphs = []
    if diff.with_glyphs:
        n_glyphs = int(rng.integers(0, 3))
        occupied = [o.box for o in objects]
        for _ in range(n_glyphs):
            ch = str(rng.integers(0, 10))
            gw, gh = 3 * 2 * max(1, int(scale)), 5 * 2 * max(1, int(scale))
            for _ in range(40):
                y0 = int(rng.integers(0, res - gh))
                x0 = int(rng.integers(0, res - gw))
                gbox = Box(y0 / res, x0 / res, (y0 + gh) / res, (x0 + gw) / res)
                if all(_box_iou(gbox, b) <= 0.05 for b in occupied):
                    _draw_glyph(raster, ch, y0, x0, 2 * max(1, int(scale)))
                    glyphs.append((ch, gbox))
                    occupied.append(gbox)
                    break
    # continuous background tint: object footprints quantize to the pixel
    # grid, so without it distinct seeds can render byte-identical scenes
    bg = (raster == 1.0).all(axis=-1)
    raster[bg] -= rng.uniform(0.0, 0.02, (int(bg.sum()), 3)).astype(np.float32)
    return ShapeWorldScene(seed, res, objects, glyphs, raster)


def _draw_glyph(raster, ch, y0, x0, cell):
    bits = _DIGIT_FONT[ch]
    for row in range(5):
        for col in range(3):
            if bits[row * 3 + col] == "1":
                raster[y0 + row * cell:y0 + (row + 1) * cell,
                       x0 + col * cell:x0 + (col + 1) * cell] = _GLYPH_COLOR


def raster_hash(raster):
    q = np.round(np.asarray(raster, dtype=np.float32) * 255).astype(np.uint8)
    return hashlib.sha256(q.tobytes()).hexdigest()


# -- task construction -------------------------------------------------------

@dataclass
class TaskExample:
    images: list                 # one raster, or two for the paired task
    prefix: str
    suffix: str
    task_tag: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if "\n" in self.prefix:
            raise ValueError("raw prefixes must be newline-free")


def _raster_order(objects):
    return sorted(objects, key=lambda o: (o.box.ymin, o.box.xmin))


def _listing_answer(objects):
    seen = []
    for o in _raster_order(objects):
        if o.name not in seen:
            seen.append(o.name)
    return ", ".join(seen)


def _thing(rng, obj):
    """Class descriptor: sometimes shape-only, sometimes color + shape."""
    return obj.shape if rng.random() < 0.5 else obj.name


def _matching(objects, thing):
    words = thing.split()
    if len(words) == 1:
        return [o for o in objects if o.shape == words[0]]
    return [o for o in objects if o.color == words[0] and o.shape == words[1]]


def build_task(scene, task_tag, rng, vq=None, max_suffix_chars=None):
    """Instantiate one pretraining task example from a scene."""
    objs = scene.objects
    if task_tag == "caption":
        names = [f"a {o.name}" for o in _raster_order(objs)]
        ex = TaskExample([scene.raster], "caption en",
                         " and ".join(names) if names else "an empty scene",
                         task_tag)
    elif task_tag == "ocr":
        if not scene.glyphs:
            raise ValueError("ocr task needs a scene with glyphs")
        text = scene.text
        if max_suffix_chars and len(text) > max_suffix_chars:
            # drop a random trailing span instead of biasing toward the front
            keep = int(rng.integers(1, max_suffix_chars + 1))
            text = text[:keep]
        ex = TaskExample([scene.raster], "ocr", text, task_tag)
    elif task_tag == "count":
        target = objs[rng.integers(len(objs))] if objs else None
        thing = _thing(rng, target) if target else "circle"
        n = len(_matching(objs, thing))
        ex = TaskExample([scene.raster],
                         f"answer en How many {thing}s?", str(n), task_tag)
    elif task_tag == "presence":
        if objs and rng.random() < 0.7:
            thing = _thing(rng, objs[rng.integers(len(objs))])
        else:
            thing = f"{COLORS[rng.integers(len(COLORS))]} " \
                    f"{SHAPES[rng.integers(len(SHAPES))]}"
        ans = "yes" if _matching(objs, thing) else "no"
        ex = TaskExample([scene.raster],
                         f"answer en Is {thing} in the image?", ans, task_tag)
    elif task_tag == "listing":
        ex = TaskExample([scene.raster],
                         "answer en What objects are in the image?",
                         _listing_answer(objs) or "nothing", task_tag)
    elif task_tag == "multi_presence":
        pool = [f"{c} {s}" for c in COLORS for s in SHAPES]
        picks = [pool[i] for i in rng.choice(len(pool), size=3, replace=False)]
        present = [t for t in picks if _matching(objs, t)]
        ex = TaskExample(
            [scene.raster],
            f"answer en Which of {', '.join(picks)} are in the image?",
            ", ".join(present) or "none", task_tag)
    elif task_tag == "vqg":
        if objs and rng.random() < 0.5:
            target = objs[rng.integers(len(objs))]
            thing = _thing(rng, target)
            n = len(_matching(objs, thing))
            ex = TaskExample([scene.raster], f"question en {n}",
                             f"How many {thing}s?", task_tag)
        else:
            ans = "yes" if objs else "no"
            name = objs[0].name if objs else "red circle"
            ex = TaskExample([scene.raster], f"question en {ans}",
                             f"Is {name} in the image?", task_tag)
    elif task_tag == "detect":
        if not objs:
            raise ValueError("detect task needs objects")
        things = []
        for o in _raster_order(objs):
            t = _thing(rng, o)
            if t not in things:
                things.append(t)
        insts = []
        for t in things:
            insts.extend((o.box, t) for o in _raster_order(_matching(objs, t)))
        ex = TaskExample([scene.raster], "detect " + " ; ".join(things),
                         format_detection(insts), task_tag,
                         meta={"instances": insts})
    elif task_tag == "segment":
        if not objs:
            raise ValueError("segment task needs objects")
        if vq is None:
            raise ValueError("segment task needs a trained VQ model")
        target = objs[rng.integers(len(objs))]
        thing = target.name
        matches = _raster_order(_matching(objs, thing))
        insts = [(o.box, mask_encode(o.mask, o.box, vq), None)
                 for o in matches]
        ex = TaskExample([scene.raster], f"segment {thing}",
                         format_segmentation(insts), task_tag,
                         meta={"objects": matches})
    elif task_tag == "grounded_caption":
        if not objs:
            raise ValueError("grounded captioning needs objects")
        target = objs[rng.integers(len(objs))]
        locs = format_detection([(target.box, "")]).strip()
        ex = TaskExample([scene.raster], f"caption {locs}",
                         f"a {target.name}", task_tag)
    else:
        raise ValueError(f"unsupported task tag {task_tag!r}")
    if max_suffix_chars and len(ex.suffix) > max_suffix_chars \
            and task_tag != "ocr":
        raise ValueError("suffix exceeds stage budget")
    return ex


# -- mixture -----------------------------------------------------------------

DEFAULT_WEIGHTS = {
    "caption": 2.0, "ocr": 1.0, "count": 2.0, "presence": 1.0,
    "listing": 1.0, "multi_presence": 1.0, "vqg": 0.5,
    "detect": 1.5, "segment": 1.5, "grounded_caption": 1.0,
}

STAGE2_REWEIGHT = {"ocr": 3.0, "detect": 2.0, "segment": 2.0}


@dataclass(frozen=True)
class MixtureSpec:
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    stage2_reweight: dict = field(default_factory=lambda: dict(STAGE2_REWEIGHT))
    max_suffix_len: dict = field(
        default_factory=lambda: {1: 48, 2: 160})

    def stage_weights(self, stage):
        if stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        w = dict(self.weights)
        if stage == 2:
            for k, m in self.stage2_reweight.items():
                w[k] = w.get(k, 0.0) * m
        total = sum(w.values())
        if total <= 0 or any(v < 0 for v in w.values()):
            raise ValueError("mixture weights must be positive")
        return {k: v / total for k, v in w.items()}


class SeedStream:
    """Deterministic, collision-free per-draw scene seeds from a base range."""

    def __init__(self, start, stop):
        self.start, self.stop = start, stop

    def seed_at(self, i):
        return self.start + (i % (self.stop - self.start))


def sample_batch(mix, stage, batch_size, rng, seeds, res=32,
                 difficulty=Difficulty(), vq=None, max_text_tokens=0,
                 vocab=None):
    """Draw a batch of task examples according to the stage's mixture.

    When ``max_text_tokens`` is set (with a vocab), examples whose encoded
    prefix + suffix + framing would overflow that budget are redrawn.
    """
    from .vocab import encode_text
    weights = mix.stage_weights(stage)
    tags = sorted(weights)
    probs = np.array([weights[t] for t in tags])
    cap = mix.max_suffix_len[stage]
    batch = []
    misses = 0
    while len(batch) < batch_size:
        if misses > 2000:
            raise RuntimeError(
                "mixture cannot be satisfied (tag unsupported or text "
                "budget too tight)")
        tag = tags[rng.choice(len(tags), p=probs)]
        scene = generate_scene(int(seeds.seed_at(int(rng.integers(0, 1 << 30)))),
                               res, difficulty)
        try:
            ex = build_task(scene, tag, rng, vq=vq, max_suffix_chars=cap)
        except ValueError:
            misses += 1
            continue   # scene does not support the tag; redraw
        if max_text_tokens:
            used = (len(encode_text(ex.prefix, vocab, for_prefix=True))
                    + len(encode_text(ex.suffix, vocab)) + 3)
            if used > max_text_tokens:
                misses += 1
                continue
        batch.append(ex)
        misses = 0
    return batch


def split_seeds(universe_size, transfer_fraction, base=0):
    """Disjoint (pretrain, transfer) seed streams over a seed universe."""
    n_transfer = int(round(universe_size * transfer_fraction))
    n_pretrain = universe_size - n_transfer
    pretrain = SeedStream(base, base + n_pretrain)
    transfer = SeedStream(base + n_pretrain, base + universe_size)
    return pretrain, transfer


def dedup_audit(pretrain, transfer, n_per_side=1000, res=32,
                difficulty=Difficulty()):
    """Exact raster-hash audit across the two seed streams; returns collisions."""
    seen = {}
    for i in range(n_per_side):
        h = raster_hash(generate_scene(pretrain.seed_at(i), res,
                                       difficulty).raster)
        seen[h] = i
    collisions = []
    for i in range(n_per_side):
        h = raster_hash(generate_scene(transfer.seed_at(i), res,
                                       difficulty).raster)
        if h in seen:
            collisions.append((seen[h], i))
    return collisions


# -- transfer datasets ---------------------------------------------------------

TRANSFER_KINDS = ("counting", "refseg", "two_image", "redbox_caption")


def build_transfer_set(kind, n, seeds, res=32, vq=None, rng=None):
    """Materialize one of the transfer task datasets as TaskExamples."""
    rng = rng or np.random.default_rng(1234)
    out = []
    if kind == "counting":
        # balanced over counts 2..10, same-class scenes
        counts = list(range(2, 11))
        diff = Difficulty(with_glyphs=False, same_class=True)
        for i in range(n):
            c = counts[i % len(counts)]
            scene = generate_scene(seeds.seed_at(i), res, diff, count=c)
            thing = scene.objects[0].shape
            out.append(TaskExample(
                [scene.raster],
                f"answer en How many {thing}s are there in the image?",
                str(c), "counting", meta={"count": c}))
    elif kind == "refseg":
        if vq is None:
            raise ValueError("refseg needs a trained VQ model")
        diff = Difficulty(min_objects=1, max_objects=3, with_glyphs=False)
        i = 0
        while len(out) < n:
            scene = generate_scene(seeds.seed_at(i), res, diff)
            i += 1
            target = scene.objects[0]
            if sum(1 for o in scene.objects if o.name == target.name) != 1:
                continue
            segs = mask_encode(target.mask, target.box, vq)
            out.append(TaskExample(
                [scene.raster], f"segment {target.name}",
                format_segmentation([(target.box, segs, None)]), "refseg",
                meta={"mask": target.mask, "box": target.box}))
    elif kind == "two_image":
        diff = Difficulty(min_objects=1, max_objects=5, with_glyphs=False)
        for i in range(n):
            a = generate_scene(seeds.seed_at(2 * i), res, diff)
            b = generate_scene(seeds.seed_at(2 * i + 1), res, diff)
            truth = len(a.objects) > len(b.objects)
            out.append(TaskExample(
                [a.raster, b.raster],
                "answer en The first image has more objects than the second.",
                "True" if truth else "False", "two_image",
                meta={"n_first": len(a.objects), "n_second": len(b.objects)}))
    elif kind == "redbox_caption":
        diff = Difficulty(min_objects=2, max_objects=4, with_glyphs=False)
        for i in range(n):
            scene = generate_scene(seeds.seed_at(i), res, diff)
            rng_i = np.random.default_rng((seeds.seed_at(i), 7))
            target = scene.objects[int(rng_i.integers(len(scene.objects)))]
            marked = draw_red_box(scene.raster, target.box)
            locs = format_detection([(target.box, "")]).strip()
            out.append(TaskExample(
                [marked], "caption en", f"a {target.name}",
                "redbox_caption",
                meta={"loc_prefix": f"caption {locs}",
                      "plain_raster": scene.raster, "target": target.name}))
    else:
        raise ValueError(f"unsupported transfer kind {kind!r}")
    return out


def draw_red_box(raster, box, thickness=1):
    """Burn a red rectangle outline into a copy of the raster."""
    res = raster.shape[0]
    img = raster.copy()
    y0, y1, x0, x1 = box.pixel_rect(res)
    y0, x0 = max(y0 - 1, 0), max(x0 - 1, 0)
    y1, x1 = min(y1 + 1, res), min(x1 + 1, res)
    red = PALETTE["red"]
    img[y0:y0 + thickness, x0:x1] = red
    img[y1 - thickness:y1, x0:x1] = red
    img[y0:y1, x0:x0 + thickness] = red
    img[y0:y1, x1 - thickness:x1] = red
    return img

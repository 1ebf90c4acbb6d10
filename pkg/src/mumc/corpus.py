"""Manifest ingestion, synthetic shape-scene corpus generation, image augmentation."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, ImageDraw

QUADRANTS = ("upper left", "upper right", "lower left", "lower right")
SHAPE_KINDS = ("circle", "square", "triangle")
COLOR_NAMES = ("red", "green", "blue")
COLOR_RGB = {"red": (230, 60, 50), "green": (60, 210, 80), "blue": (60, 100, 235)}

# Every answer the synthetic VQA grammar can produce.
ANSWER_VOCAB = set(QUADRANTS) | set(SHAPE_KINDS) | set(COLOR_NAMES) | {"yes", "no"}


@dataclass
class CaptionExample:
    image_path: str
    caption: str


@dataclass
class VqaExample:
    image_path: str
    question: str
    answer: str
    answer_type: str  # "open" or "closed"


Example = Union[CaptionExample, VqaExample]

_CAPTION_KEYS = ("image", "caption")
_VQA_KEYS = ("image", "question", "answer", "answer_type")


def load_manifest(path, kind: str) -> list[Example]:
    """Read a JSON Lines manifest; image paths resolve relative to the manifest dir.

    kind "caption" expects keys {image, caption}; kind "vqa" expects
    {image, question, answer, answer_type}.
    """
    if kind not in ("caption", "vqa"):
        raise ValueError(f"unknown manifest kind {kind!r}")
    base = Path(path).parent
    keys = _CAPTION_KEYS if kind == "caption" else _VQA_KEYS
    examples: list[Example] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"line {lineno}: malformed JSON ({e.msg})") from e
            for key in keys:
                if key not in obj:
                    raise ValueError(f"line {lineno}: missing key {key}")
            image_path = str(base / obj["image"])
            if kind == "caption":
                if not str(obj["caption"]).strip():
                    raise ValueError(f"line {lineno}: empty caption")
                examples.append(CaptionExample(image_path, obj["caption"]))
            else:
                if obj["answer_type"] not in ("open", "closed"):
                    raise ValueError(
                        f"line {lineno}: unknown answer_type {obj['answer_type']!r}"
                    )
                if not str(obj["answer"]).strip():
                    raise ValueError(f"line {lineno}: empty answer")
                examples.append(
                    VqaExample(
                        image_path, obj["question"], obj["answer"], obj["answer_type"]
                    )
                )
    return examples


def write_manifest(examples: list[Example], path) -> None:
    """Write examples as JSON Lines; image paths are stored relative to the manifest."""
    base = Path(path).parent
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            rel = os.path.relpath(ex.image_path, base)
            if isinstance(ex, CaptionExample):
                obj = {"image": rel, "caption": ex.caption}
            else:
                obj = {
                    "image": rel,
                    "question": ex.question,
                    "answer": ex.answer,
                    "answer_type": ex.answer_type,
                }
            f.write(json.dumps(obj) + "\n")


def load_image(path) -> np.ndarray:
    """Decode to float32 HxWx3 in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr


def save_image(pixels: np.ndarray, path) -> None:
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------


def _quadrant_center(quadrant: str, size: int) -> tuple[float, float]:
    qx = 0.25 if "left" in quadrant else 0.75
    qy = 0.25 if "upper" in quadrant else 0.75
    return qx * size, qy * size


def quadrant_box(quadrant: str, size: int) -> tuple[int, int, int, int]:
    """Pixel box (x0, y0, x1, y1) of a quadrant, end-exclusive."""
    half = size // 2
    x0 = 0 if "left" in quadrant else half
    y0 = 0 if "upper" in quadrant else half
    return x0, y0, x0 + half, y0 + half


def _draw_shape(draw: ImageDraw.ImageDraw, kind: str, color: str, cx: float, cy: float, r: float):
    rgb = COLOR_RGB[color]
    if kind == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=rgb)
    elif kind == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=rgb)
    elif kind == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=rgb)
    else:
        raise ValueError(f"unknown shape kind {kind!r}")
    return [int(cx - r), int(cy - r), int(math.ceil(cx + r)), int(math.ceil(cy + r))]


def _scene_questions(rng: np.random.Generator, shapes: list[dict]) -> list[tuple[str, str, str]]:
    """(question, answer, answer_type) triples recomputable from the shape list."""
    kinds_present = [s["kind"] for s in shapes]
    qa = []

    target = shapes[int(rng.integers(len(shapes)))]
    qa.append((f"where is the {target['kind']}?", target["quadrant"], "open"))

    attr = shapes[int(rng.integers(len(shapes)))]
    if rng.integers(2) == 0:
        qa.append((f"what shape is in the {attr['quadrant']}?", attr["kind"], "open"))
    else:
        qa.append((f"what color is the {attr['kind']}?", attr["color"], "open"))

    probe = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
    qa.append(
        (f"is there a {probe}?", "yes" if probe in kinds_present else "no", "closed")
    )

    threshold = int(rng.integers(1, 3))
    qa.append(
        (
            f"are there more than {threshold} shapes?",
            "yes" if len(shapes) > threshold else "no",
            "closed",
        )
    )
    return qa


def synthesize_corpus(seed: int, n_pairs: int, image_size: int, out_dir) -> tuple[str, str]:
    """Generate a deterministic shape-scene corpus under out_dir.

    Writes PNG images of 1-3 colored shapes in distinct quadrants, a caption
    manifest, a VQA manifest, and a `<image>.truth.json` sidecar per image with
    the ground-truth shape placements. Pure function of the seed.

    Returns (caption_manifest_path, vqa_manifest_path).
    """
    rng = np.random.default_rng(seed)
    out = Path(out_dir)
    img_dir = out / "images"
    img_dir.mkdir(parents=True, exist_ok=True)

    captions: list[CaptionExample] = []
    vqa: list[VqaExample] = []
    for i in range(n_pairs):
        # 1-3 shapes, weighted toward single-shape scenes so desk-scale
        # contrastive binding is learnable; multi-shape keeps count questions alive
        n_shapes = 1 + int(rng.choice(3, p=[0.5, 0.3, 0.2]))
        kinds = [SHAPE_KINDS[j] for j in rng.choice(len(SHAPE_KINDS), n_shapes, replace=False)]
        quads = [QUADRANTS[j] for j in rng.choice(len(QUADRANTS), n_shapes, replace=False)]
        colors = [COLOR_NAMES[int(rng.integers(len(COLOR_NAMES)))] for _ in range(n_shapes)]

        im = Image.new("RGB", (image_size, image_size), (0, 0, 0))
        draw = ImageDraw.Draw(im)
        shapes = []
        phrases = []
        for kind, quadrant, color in zip(kinds, quads, colors):
            cx0, cy0 = _quadrant_center(quadrant, image_size)
            # jitter + max radius stay below the quadrant half-extent (0.25)
            jitter = 0.035 * image_size
            cx = cx0 + rng.uniform(-jitter, jitter)
            cy = cy0 + rng.uniform(-jitter, jitter)
            r = rng.uniform(0.13, 0.19) * image_size
            bbox = _draw_shape(draw, kind, color, cx, cy, r)
            shapes.append({"kind": kind, "color": color, "quadrant": quadrant, "bbox": bbox})
            phrases.append(f"a {color} {kind} in the {quadrant}")

        name = f"img_{i:05d}.png"
        img_path = img_dir / name
        im.save(img_path)
        with open(str(img_path) + ".truth.json", "w", encoding="utf-8") as f:
            json.dump(shapes, f)

        captions.append(CaptionExample(str(img_path), " and ".join(phrases)))
        for question, answer, answer_type in _scene_questions(rng, shapes):
            vqa.append(VqaExample(str(img_path), question, answer, answer_type))

    cap_path = out / "captions.jsonl"
    vqa_path = out / "vqa.jsonl"
    write_manifest(captions, cap_path)
    write_manifest(vqa, vqa_path)
    return str(cap_path), str(vqa_path)


def load_truth(image_path) -> list[dict]:
    """Read the shape-placement sidecar written by synthesize_corpus."""
    with open(str(image_path) + ".truth.json", encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def _resize(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[0] == size and image.shape[1] == size:
        return image
    channels = [
        np.asarray(
            Image.fromarray(image[:, :, c], mode="F").resize((size, size), Image.BILINEAR)
        )
        for c in range(3)
    ]
    return np.stack(channels, axis=-1).astype(np.float32)


def _random_resized_crop(image: np.ndarray, rng: np.random.Generator, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    scale = rng.uniform(0.8, 1.0)
    side = max(1, int(round(math.sqrt(scale) * min(h, w))))
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    return _resize(image[top : top + side, left : left + side], size)


def _rotate(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    deg = float(rng.uniform(-15.0, 15.0))
    channels = [
        np.asarray(
            Image.fromarray(image[:, :, c], mode="F").rotate(
                deg, resample=Image.BILINEAR, fillcolor=0.0
            )
        )
        for c in range(3)
    ]
    return np.stack(channels, axis=-1).astype(np.float32)


def _brightness(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return image + np.float32(rng.uniform(-0.2, 0.2))


def _contrast(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    factor = np.float32(1.0 + rng.uniform(-0.2, 0.2))
    mean = image.mean(dtype=np.float32)
    return (image - mean) * factor + mean


def _translate(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    dy = int(round(rng.uniform(-0.1, 0.1) * h))
    dx = int(round(rng.uniform(-0.1, 0.1) * w))
    out = np.zeros_like(image)
    ys = slice(max(0, dy), min(h, h + dy))
    xs = slice(max(0, dx), min(w, w + dx))
    ys_src = slice(max(0, -dy), min(h, h - dy))
    xs_src = slice(max(0, -dx), min(w, w - dx))
    out[ys, xs] = image[ys_src, xs_src]
    return out


_RAND_OPS = (_rotate, _brightness, _contrast, _translate)


def augment(
    image: np.ndarray, rng: np.random.Generator, profile: str, target_size: int
) -> np.ndarray:
    """Augment to target_size under a named profile.

    pretrain: random resized crop, then 2 randomly chosen ops out of
    {rotate<=15deg, brightness +-0.2, contrast +-0.2, translate <=10%}.
    finetune / none: resize only. Output is clipped to [0, 1].
    """
    if profile not in ("pretrain", "finetune", "none"):
        raise ValueError(f"unknown augmentation profile {profile!r}")
    if profile in ("finetune", "none"):
        return _resize(image, target_size)
    out = _random_resized_crop(image, rng, target_size)
    for idx in rng.choice(len(_RAND_OPS), size=2, replace=False):
        out = _RAND_OPS[int(idx)](out, rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)

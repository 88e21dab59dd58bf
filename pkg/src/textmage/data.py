"""Dataset ingestion: manifests, Bangla tokenization, vocabulary, images, batches.

The on-disk manifest is UTF-8 JSON Lines, one object per line:

    {"image": "<relative path>", "class": <int 0-24>, "captions": ["<str>", ...]}

Images are 8-bit PNG, RGB or grayscale (alpha dropped). A synthetic generator
produces colored geometric shapes with templated Bangla captions, sized so the
whole pipeline runs in seconds.
"""

from __future__ import annotations

import json
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError
from .tensor import Tensor

PAD_ID = 0
START_ID = 1
END_ID = 2
UNK_ID = 3
SPECIAL_TOKENS = ("<pad>", "<s>", "</s>", "<unk>")

NUM_CLASSES_MAX = 25


@dataclass
class Sample:
    image_path: str
    class_id: int
    captions: list[str]


@dataclass
class DatasetManifest:
    root: Path
    samples: list[Sample]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def caption_count(self) -> int:
        return sum(len(s.captions) for s in self.samples)

    @property
    def class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for s in self.samples:
            counts[s.class_id] = counts.get(s.class_id, 0) + 1
        return dict(sorted(counts.items()))

    def image_file(self, sample: Sample) -> Path:
        return self.root / sample.image_path


def load_manifest(path) -> DatasetManifest:
    """Parse a JSON Lines manifest, validating classes and captions per line."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    samples: list[Sample] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}: line {lineno}: expected a JSON object")
            image = obj.get("image")
            class_id = obj.get("class")
            captions = obj.get("captions")
            if not isinstance(image, str) or not image:
                raise DataError(f"{path}: line {lineno}: missing or empty 'image'")
            if not isinstance(class_id, int) or isinstance(class_id, bool):
                raise DataError(f"{path}: line {lineno}: 'class' must be an integer")
            if not 0 <= class_id < NUM_CLASSES_MAX:
                raise DataError(
                    f"{path}: line {lineno}: class {class_id} out of range [0, {NUM_CLASSES_MAX})"
                )
            if not isinstance(captions, list) or not captions:
                raise DataError(f"{path}: line {lineno}: 'captions' must be a non-empty list")
            cleaned = []
            for c in captions:
                if not isinstance(c, str) or not c.strip():
                    raise DataError(f"{path}: line {lineno}: captions must be non-empty strings")
                cleaned.append(c)
            samples.append(Sample(image_path=image, class_id=class_id, captions=cleaned))
    return DatasetManifest(root=path.parent, samples=samples)


def save_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for s in manifest.samples:
            fh.write(json.dumps(
                {"image": s.image_path, "class": s.class_id, "captions": s.captions},
                ensure_ascii=False,
            ) + "\n")


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resample of an [H,W,C] float array with pixel-center alignment."""
    in_h, in_w = img.shape[:2]
    if (in_h, in_w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (in_w / out_w) - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, in_h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, in_w - 1)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def load_image(path, target: tuple[int, int], normalize: bool = True) -> Tensor:
    """Decode a PNG, resize bilinearly to ``target`` (H, W), return [3,H,W].

    Grayscale images are promoted to 3 channels; alpha is dropped. Values are
    scaled to [0, 1] when ``normalize`` is set.
    """
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from None
    if normalize:
        arr = arr / 255.0
    out_h, out_w = target
    resized = _resize_bilinear(arr, out_h, out_w)
    return Tensor(resized.transpose(2, 0, 1))


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def tokenize(text: str) -> list[str]:
    """NFC-normalize, split on whitespace, detach edge punctuation (danda included).

    Latin letters are lowercased; Bangla text passes through untouched, so
    grapheme clusters are never split (combining marks are not punctuation).
    """
    text = unicodedata.normalize("NFC", text)
    text = "".join(c.lower() if c.isascii() and c.isalpha() else c for c in text)
    tokens: list[str] = []
    for word in text.split():
        leading: list[str] = []
        trailing: list[str] = []
        while word and _is_punct(word[0]):
            leading.append(word[0])
            word = word[1:]
        while word and _is_punct(word[-1]):
            trailing.append(word[-1])
            word = word[:-1]
        tokens.extend(leading)
        if word:
            tokens.append(word)
        tokens.extend(reversed(trailing))
    return tokens


def detokenize(tokens: list[str]) -> str:
    """Join with single spaces; the danda re-attaches without a preceding space."""
    out = " ".join(tokens)
    return out.replace(" ।", "।")


@dataclass
class Vocabulary:
    """Bidirectional token<->id map with PAD/START/END/UNK reserved at 0..3."""

    id_to_token: list[str]
    min_freq: int = 1
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def id(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def token(self, token_id: int) -> str:
        return self.id_to_token[token_id]

    def decode(self, ids, skip_special: bool = True) -> list[str]:
        if skip_special:
            ids = [i for i in ids if i not in (PAD_ID, START_ID, END_ID)]
        return [self.id_to_token[i] for i in ids]

    def to_json_dict(self) -> dict:
        return {"min_freq": self.min_freq, "tokens": self.id_to_token[len(SPECIAL_TOKENS):]}

    @classmethod
    def from_json_dict(cls, obj: dict) -> "Vocabulary":
        return cls(list(SPECIAL_TOKENS) + list(obj["tokens"]), min_freq=int(obj["min_freq"]))


def build_vocabulary(manifest: DatasetManifest, min_freq: int = 1) -> Vocabulary:
    """Tokens with corpus frequency >= min_freq get ids from 4, most frequent first."""
    if not manifest.samples:
        raise DataError("cannot build a vocabulary from an empty manifest")
    counts: Counter[str] = Counter()
    for s in manifest.samples:
        for caption in s.captions:
            counts.update(tokenize(caption))
    if not counts:
        raise DataError("caption corpus is empty after tokenization")
    kept = sorted((t for t, n in counts.items() if n >= min_freq),
                  key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIAL_TOKENS) + kept, min_freq=min_freq)


def encode_caption(vocab: Vocabulary, caption: str) -> list[int]:
    """[START] + token ids (UNK for out-of-vocab) + [END]."""
    return [START_ID] + [vocab.id(t) for t in tokenize(caption)] + [END_ID]


def split_dataset(manifest: DatasetManifest, val_fraction: float = 0.2,
                  seed=0) -> tuple[DatasetManifest, DatasetManifest]:
    """Seeded shuffle, then carve off the first ``int(n*val_fraction)`` as val."""
    if not 0.0 <= val_fraction < 1.0:
        raise DataError(f"val_fraction must be in [0, 1), got {val_fraction}")
    n = len(manifest.samples)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = int(n * val_fraction)
    val_idx = order[:n_val]
    train_idx = order[n_val:]
    train = DatasetManifest(root=manifest.root, samples=[manifest.samples[i] for i in train_idx])
    val = DatasetManifest(root=manifest.root, samples=[manifest.samples[i] for i in val_idx])
    return train, val


@dataclass
class LoadedSample:
    image: Tensor
    class_id: int
    captions: list[str]
    caption_ids: list[list[int]]
    caption_tokens: list[list[str]]


def load_samples(manifest: DatasetManifest, image_size: int, vocab: Vocabulary) -> list[LoadedSample]:
    """Decode every image once and pre-encode all captions."""
    out = []
    for s in manifest.samples:
        image = load_image(manifest.image_file(s), (image_size, image_size))
        out.append(LoadedSample(
            image=image,
            class_id=s.class_id,
            captions=list(s.captions),
            caption_ids=[encode_caption(vocab, c) for c in s.captions],
            caption_tokens=[tokenize(c) for c in s.captions],
        ))
    return out


@dataclass
class Batch:
    """One batch of (image, caption) pairs with right-padded token rows."""

    sample_indices: list[int]
    caption_indices: list[int]
    class_ids: np.ndarray
    tokens: np.ndarray  # [B, L] int64, PAD-padded on the right

    def __len__(self) -> int:
        return len(self.sample_indices)


def make_batches(samples: list[LoadedSample], batch_size: int,
                 rng: np.random.Generator | None = None, shuffle: bool = False) -> list[Batch]:
    """Expand each (image, caption) pair once, optionally shuffle, then chunk.

    The final partial batch is kept; token rows are padded with PAD to the
    batch max length.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    pairs = [(si, ci) for si, s in enumerate(samples) for ci in range(len(s.caption_ids))]
    if shuffle:
        if rng is None:
            raise DataError("shuffle requires an rng")
        order = rng.permutation(len(pairs))
        pairs = [pairs[i] for i in order]
    batches = []
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        ids = [samples[si].caption_ids[ci] for si, ci in chunk]
        width = max(len(seq) for seq in ids)
        tokens = np.full((len(chunk), width), PAD_ID, dtype=np.int64)
        for row, seq in enumerate(ids):
            tokens[row, :len(seq)] = seq
        batches.append(Batch(
            sample_indices=[si for si, _ in chunk],
            caption_indices=[ci for _, ci in chunk],
            class_ids=np.array([samples[si].class_id for si, _ in chunk], dtype=np.int64),
            tokens=tokens,
        ))
    return batches


SHAPE_LEXICON = [
    ("বৃত্ত", "circle"),        # বৃত্ত
    ("বর্গ", "square"),              # বর্গ
    ("ত্রিভুজ", "triangle"),  # ত্রিভুজ
]

COLOR_LEXICON = [
    ("লাল", (214, 45, 45)),      # লাল
    ("সবুজ", (38, 158, 66)),  # সবুজ
    ("নীল", (40, 70, 205)),      # নীল
    ("হলুদ", (228, 196, 36)),  # হলুদ
]

_BACKGROUND = (243, 242, 237)


def _draw_shape(size: int, shape: str, color: tuple[int, int, int],
                cx: float, cy: float, radius: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    if shape == "circle":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius ** 2
    elif shape == "square":
        mask = (np.abs(xx - cx) <= radius) & (np.abs(yy - cy) <= radius)
    elif shape == "triangle":
        # upright triangle: apex (cx, cy-r), base corners (cx±r, cy+r)
        inside = yy >= cy - radius
        left = (yy - (cy - radius)) >= -2.0 * (xx - cx)
        right = (yy - (cy - radius)) >= 2.0 * (xx - cx)
        mask = inside & left & right & (yy <= cy + radius)
    else:
        raise ValueError(f"unknown synthetic shape '{shape}'")
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[:, :] = _BACKGROUND
    img[mask] = color
    return img


def generate_synthetic_dataset(n: int, seed, out_dir, image_size: int = 64,
                               num_shapes: int = 3, num_colors: int = 4,
                               distinct_captions: bool = True) -> DatasetManifest:
    """Write ``n`` PNGs of colored shapes plus a manifest; fully seeded.

    Class id is the shape index. Each image gets two templated Bangla
    captions; with ``distinct_captions`` off, the same caption is written
    twice (useful when teacher-forced targets must be unambiguous).
    """
    if n < 1:
        raise DataError(f"synthetic dataset size must be >= 1, got {n}")
    if not 1 <= num_shapes <= len(SHAPE_LEXICON):
        raise DataError(f"num_shapes must be in [1, {len(SHAPE_LEXICON)}]")
    if not 1 <= num_colors <= len(COLOR_LEXICON):
        raise DataError(f"num_colors must be in [1, {len(COLOR_LEXICON)}]")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        shape_idx = i % num_shapes
        color_idx = int(rng.integers(num_colors))
        shape_bn, shape_en = SHAPE_LEXICON[shape_idx]
        color_bn, color_rgb = COLOR_LEXICON[color_idx]
        cx = image_size / 2 + float(rng.uniform(-image_size / 8, image_size / 8))
        cy = image_size / 2 + float(rng.uniform(-image_size / 8, image_size / 8))
        radius = float(rng.uniform(image_size * 0.22, image_size * 0.34))
        img = _draw_shape(image_size, shape_en, color_rgb, cx, cy, radius)
        name = f"img_{i:05d}.png"
        Image.fromarray(img).save(out_dir / name)
        first = f"একটি {color_bn} {shape_bn}"  # একটি <color> <shape>
        if distinct_captions:
            # ছবিতে একটি <color> <shape> আছে।
            second = (f"ছবিতে একটি "
                      f"{color_bn} {shape_bn} আছে।")
        else:
            second = first
        samples.append(Sample(image_path=name, class_id=shape_idx, captions=[first, second]))
    manifest = DatasetManifest(root=out_dir, samples=samples)
    save_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest

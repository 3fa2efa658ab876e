"""Procedural scenes with salient objects, distractors and planted ambiguity.

Every sample draws from its own RNG stream seeded by (dataset seed, round,
index), so a dataset is reproducible bit-exactly regardless of generation
order.  Images are quantised to 8 bits at generation time so that PNG
round-trips are lossless.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .netmodel import ModalityBundle

SHAPES = ("ellipse", "rectangle", "blob", "ring", "composite")
TEXTURES = ("flat", "gradient", "stripes", "speckle")
ASPECT_RATIOS = ((1, 1), (4, 3), (3, 4))
MAX_PLACEMENT_TRIES = 200


class SceneGenerationError(RuntimeError):
    def __init__(self, message, scene: dict):
        super().__init__(f"{message}: {json.dumps(scene, default=str)}")
        self.scene = scene


@dataclass
class CategorySpec:
    """One object category as a grid of variation ranges."""
    id: int
    shape: str
    texture: str
    size_range: tuple[float, float] = (0.05, 0.25)
    clutter_range: tuple[int, int] = (0, 4)
    background_similarity: tuple[float, float] = (0.0, 0.45)
    occlusion_range: tuple[float, float] = (0.0, 0.15)
    hue: float = 0.0
    elongation_range: tuple[float, float] = (0.7, 1.4)
    texture_scale_range: tuple[float, float] = (3.0, 8.0)
    lighting_range: tuple[float, float] = (0.0, 0.25)
    contrast_range: tuple[float, float] = (0.85, 1.15)
    background_texture_range: tuple[float, float] = (0.0, 0.08)
    noise_range: tuple[float, float] = (0.0, 0.02)

    def __post_init__(self):
        if self.shape not in SHAPES or self.texture not in TEXTURES:
            raise ValueError(f"unknown shape/texture {self.shape}/{self.texture}")
        lo, hi = self.size_range
        if not 0 < lo <= hi <= 0.5:
            raise ValueError(f"bad size range {self.size_range}")
        lo, hi = self.clutter_range
        if not 0 <= lo <= hi <= 8:
            raise ValueError(f"bad clutter range {self.clutter_range}")
        lo, hi = self.background_similarity
        if not 0 <= lo <= hi <= 1:
            raise ValueError(f"bad background similarity {self.background_similarity}")
        lo, hi = self.occlusion_range
        if not 0 <= lo <= hi <= 0.2:
            raise ValueError(f"bad occlusion range {self.occlusion_range}")

    @property
    def variation_axes(self) -> dict[str, tuple]:
        return {
            "size": self.size_range,
            "clutter": self.clutter_range,
            "background_similarity": self.background_similarity,
            "occlusion": self.occlusion_range,
            "elongation": self.elongation_range,
            "texture_scale": self.texture_scale_range,
            "lighting": self.lighting_range,
            "contrast": self.contrast_range,
            "background_texture": self.background_texture_range,
            "noise": self.noise_range,
            "orientation": (0.0, math.pi),
            "aspect_ratio": tuple(f"{a}:{b}" for a, b in ASPECT_RATIOS),
        }

    def to_dict(self):
        return asdict(self)


def make_categories(n: int = 32, hard: tuple[int, ...] = (), hard_similarity=(0.85, 0.95)) -> list[CategorySpec]:
    """Cycle through shape x texture families; ``hard`` ids get background-like colours."""
    cats = []
    for i in range(n):
        kwargs = {}
        if i in hard:
            kwargs["background_similarity"] = tuple(hard_similarity)
        cats.append(CategorySpec(
            id=i,
            shape=SHAPES[i % len(SHAPES)],
            texture=TEXTURES[(i // len(SHAPES)) % len(TEXTURES)],
            hue=(i * 0.618034) % 1.0,
            **kwargs,
        ))
    return cats


@dataclass
class AmbiguitySpec:
    p_amb: float = 0.0
    k_max: int = 2

    def __post_init__(self):
        if not 0 <= self.p_amb <= 1 or self.k_max < 2:
            raise ValueError("need 0 <= p_amb <= 1 and k_max >= 2")


@dataclass
class Sample:
    image: np.ndarray            # (H, W, 3) float32, multiples of 1/255
    mask: np.ndarray             # (H, W) uint8 in {0, 1}
    candidates: np.ndarray       # (K, H, W) uint8
    category: int
    round: int
    seed: tuple[int, ...]
    designated: int = 0
    id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def k(self) -> int:
        return len(self.candidates)

    def chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.image.transpose(2, 0, 1))


def sample_id(round_id: int, index: int) -> str:
    return f"r{round_id}_{index:06d}"


def sample_rng(seed: int, round_id: int, index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(round_id), int(index)])


def normalize_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0:
        raise ValueError("weights must be a non-empty vector")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise ValueError("weights are all zero")
    return w / total


def sample_category(weights, rng: np.random.Generator) -> int:
    p = normalize_weights(weights)
    u = rng.random()
    idx = int(np.searchsorted(np.cumsum(p), u, side="right"))
    idx = min(idx, len(p) - 1)
    while p[idx] == 0:  # guard against rounding at the top end
        idx -= 1
    return idx


def allocate_budget(weights, total: int) -> np.ndarray:
    """Largest-remainder split of ``total`` samples proportional to ``weights``."""
    p = normalize_weights(weights)
    raw = p * total
    counts = np.floor(raw).astype(int)
    rest = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:rest]] += 1
    return counts


# geometry --------------------------------------------------------------------

def _scene_grid(h, w, aspect):
    """Pixel centres in scene units; the scene keeps the pixel budget h*w."""
    ar = aspect[0] / aspect[1]
    sw, sh = math.sqrt(h * w * ar), math.sqrt(h * w / ar)
    ys = (np.arange(h) + 0.5) * sh / h
    xs = (np.arange(w) + 0.5) * sw / w
    gx, gy = np.meshgrid(xs, ys)
    return gx, gy, sw, sh


def _shape_mask(shape, gx, gy, cx, cy, radius, elong, theta, rng_params):
    dx, dy = gx - cx, gy - cy
    c, s = math.cos(theta), math.sin(theta)
    u = (c * dx + s * dy) / elong
    v = (-s * dx + c * dy) * elong
    if shape == "ellipse":
        return u * u + v * v <= radius * radius
    if shape == "rectangle":
        half = radius * math.sqrt(math.pi) / 2.0
        return (np.abs(u) <= half) & (np.abs(v) <= half)
    if shape == "blob":
        phi = np.arctan2(v, u)
        r = radius * (1.0 + sum(a * np.cos(k * phi + p) for k, a, p in rng_params["harmonics"]))
        return np.hypot(u, v) <= r
    if shape == "ring":
        rho = np.hypot(u, v)
        outer = radius / math.sqrt(1.0 - 0.45 ** 2)
        return (rho <= outer) & (rho >= 0.45 * outer)
    if shape == "composite":
        r1 = radius * 0.85
        body = u * u + v * v <= r1 * r1
        ox = r1 * 0.9
        head = (u - ox) ** 2 + (v * 1.2) ** 2 <= (0.6 * r1) ** 2
        return body | head
    raise ValueError(shape)


def _bounding_radius(shape, radius, elong):
    stretch = max(elong, 1.0 / elong)
    extra = {"rectangle": 1.0, "blob": 1.25, "ring": 1.12, "composite": 1.6}.get(shape, 1.0)
    return radius * stretch * extra


def _texture(kind, gx, gy, scale, theta, rng):
    if kind == "flat":
        return np.zeros_like(gx)
    if kind == "gradient":
        return 0.15 * (math.cos(theta) * gx + math.sin(theta) * gy) / max(gx.max(), 1.0) - 0.075
    if kind == "stripes":
        return 0.12 * np.sin(2 * math.pi * (math.cos(theta) * gx + math.sin(theta) * gy) / scale)
    if kind == "speckle":
        return 0.12 * rng.uniform(-1.0, 1.0, size=gx.shape)
    raise ValueError(kind)


def _hsv_colour(hue, sat, val):
    i = int(hue * 6) % 6
    f = hue * 6 - math.floor(hue * 6)
    p, q, t = val * (1 - sat), val * (1 - f * sat), val * (1 - (1 - f) * sat)
    return np.array([(val, t, p), (q, val, p), (p, val, t), (p, q, val), (t, p, val), (val, p, q)][i])


def _connected(mask) -> bool:
    _, n = ndimage.label(mask)
    return n == 1


def _place_candidates(category, k, size_frac, elong, harmonics, gx, gy, sw, sh, area, rng, scene,
                      margin=1.5, tries_per_object=30, restarts=40):
    """Non-touching candidate masks; the whole set shrinks together on failure."""
    h, w = gx.shape
    shrink = 1.0
    for _restart in range(restarts):
        candidates, centres = [], []
        occupied = np.zeros((h, w), dtype=bool)
        for _ in range(k):
            for _attempt in range(tries_per_object):
                frac = size_frac * (rng.uniform(0.88, 1.12) if k > 1 else 1.0)
                radius = math.sqrt(frac * area / math.pi) * shrink
                e = elong * (rng.uniform(0.9, 1.1) if k > 1 else 1.0)
                theta = rng.uniform(0.0, math.pi)
                br = _bounding_radius(category.shape, radius, e)
                if 2 * (br + margin) >= min(sw, sh):
                    continue
                cx = rng.uniform(br + margin, sw - br - margin)
                cy = rng.uniform(br + margin, sh - br - margin)
                m = _shape_mask(category.shape, gx, gy, cx, cy, radius, e, theta, {"harmonics": harmonics})
                if m.sum() < 12 or not _connected(m):
                    continue
                if np.any(ndimage.binary_dilation(m, iterations=2) & occupied):
                    continue
                candidates.append(m)
                centres.append((cx, cy, theta))
                occupied |= m
                break
            else:
                break
        if len(candidates) == k:
            return candidates, centres, occupied
        shrink *= 0.9
    raise SceneGenerationError("could not place salient objects", scene)


def generate_scene(category: CategorySpec, ambiguity: AmbiguitySpec | None, rng: np.random.Generator,
                   size: tuple[int, int] = (64, 64), round_id: int = 0,
                   seed: tuple[int, ...] = ()) -> Sample:
    ambiguity = ambiguity or AmbiguitySpec()
    h, w = size
    area = h * w
    aspect = ASPECT_RATIOS[rng.integers(len(ASPECT_RATIOS))]
    gx, gy, sw, sh = _scene_grid(h, w, aspect)

    k = 1
    if rng.random() < ambiguity.p_amb:
        k = int(rng.integers(2, ambiguity.k_max + 1))
    designated = int(rng.integers(k))

    similarity = rng.uniform(*category.background_similarity)
    bg_hue = (category.hue + 0.5 + rng.uniform(-0.1, 0.1)) % 1.0
    bg = _hsv_colour(bg_hue, rng.uniform(0.2, 0.6), rng.uniform(0.35, 0.75))
    fg_full = _hsv_colour((category.hue + rng.uniform(-0.04, 0.04)) % 1.0,
                          rng.uniform(0.6, 0.95), rng.uniform(0.7, 1.0))
    if np.linalg.norm(fg_full - bg) < 0.35:
        fg_full = np.clip(1.0 - bg, 0.0, 1.0)
    fg = bg + (1.0 - similarity) * (fg_full - bg)

    scene = {"category": category.id, "aspect": aspect, "k": k, "designated": designated,
             "similarity": similarity, "seed": list(seed)}

    # candidates: near-equal size and appearance when ambiguous
    size_frac = rng.uniform(*category.size_range)
    if k > 1:
        size_frac = min(size_frac, 0.45 / k)
    elong = rng.uniform(*category.elongation_range)
    harmonics = [(kk, rng.uniform(0.05, 0.15), rng.uniform(0, 2 * math.pi)) for kk in (2, 3, 5)]
    tex_scale = rng.uniform(*category.texture_scale_range)

    candidates, centres, occupied = _place_candidates(
        category, k, size_frac, elong, harmonics, gx, gy, sw, sh, area, rng, scene)

    # image: background, lighting, background texture
    light = rng.uniform(*category.lighting_range)
    ldir = rng.uniform(0, 2 * math.pi)
    ramp = (math.cos(ldir) * (gx / sw - 0.5) + math.sin(ldir) * (gy / sh - 0.5)) * light
    bg_tex_amp = rng.uniform(*category.background_texture_range)
    bg_tex = ndimage.gaussian_filter(rng.normal(size=(h, w)), 2.0)
    bg_tex = bg_tex / (np.abs(bg_tex).max() + 1e-9) * bg_tex_amp
    img = np.broadcast_to(bg, (h, w, 3)).copy() + (ramp + bg_tex)[..., None]

    # distractors: small, low contrast, never candidates
    n_clutter = int(rng.integers(category.clutter_range[0], category.clutter_range[1] + 1))
    for _ in range(n_clutter):
        frac = rng.uniform(0.002, 0.008)
        radius = math.sqrt(frac * area / math.pi)
        cx, cy = rng.uniform(radius, sw - radius), rng.uniform(radius, sh - radius)
        m = _shape_mask("ellipse", gx, gy, cx, cy, radius, rng.uniform(0.7, 1.4), rng.uniform(0, math.pi), {})
        if np.any(ndimage.binary_dilation(m, iterations=1) & occupied):
            continue
        tint = bg + 0.3 * (1.0 - similarity) * (_hsv_colour(rng.random(), 0.7, 0.9) - bg)
        img[m] = tint

    # salient objects with texture
    for m, (_cx, _cy, theta) in zip(candidates, centres):
        colour = fg + rng.uniform(-0.02, 0.02, size=3)
        tex = _texture(category.texture, gx, gy, tex_scale, theta, rng) * max(1.0 - similarity, 0.25)
        img[m] = colour + tex[m][:, None]

    # occlusion: an edge strip of background-like clutter cut off each candidate
    occluder_col = np.clip(bg * rng.uniform(0.85, 1.15), 0, 1)
    for i, m in enumerate(candidates):
        occ = rng.uniform(*category.occlusion_range) if rng.random() < 0.5 else 0.0
        if occ <= 0:
            continue
        phi = rng.uniform(0, 2 * math.pi)
        proj = math.cos(phi) * gx + math.sin(phi) * gy
        cut = np.quantile(proj[m], 1.0 - occ)
        ys, xs = np.nonzero(m)
        box = np.zeros_like(m)
        box[max(ys.min() - 2, 0):ys.max() + 3, max(xs.min() - 2, 0):xs.max() + 3] = True
        strip = box & (proj > cut) & ~(occupied & ~m)
        remaining = m & ~strip
        if remaining.sum() < 0.5 * m.sum() or not _connected(remaining):
            continue
        img[strip] = occluder_col
        candidates[i] = remaining

    contrast = rng.uniform(*category.contrast_range)
    img = (img - 0.5) * contrast + 0.5
    img = img + rng.normal(0.0, rng.uniform(*category.noise_range), size=img.shape)
    img = np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0

    cands = np.stack(candidates).astype(np.uint8)
    meta = {"aspect": f"{aspect[0]}:{aspect[1]}", "similarity": float(similarity),
            "clutter": n_clutter, "size_frac": float(size_frac)}
    return Sample(img.astype(np.float32), cands[designated].copy(), cands, category.id,
                  round_id, tuple(seed), designated, meta=meta)


def generate_dataset(categories: list[CategorySpec], count: int, seed: int, round_id: int = 0,
                     weights=None, ambiguity: AmbiguitySpec | None = None,
                     size: tuple[int, int] = (64, 64), category_ids=None,
                     start_index: int = 0) -> list[Sample]:
    """``count`` samples; categories drawn from ``weights`` unless ``category_ids`` fixes them."""
    if weights is None:
        weights = np.ones(len(categories))
    out = []
    for j in range(count):
        index = start_index + j
        rng = sample_rng(seed, round_id, index)
        cat = int(category_ids[j]) if category_ids is not None else sample_category(weights, rng)
        s = generate_scene(categories[cat], ambiguity, rng, size, round_id, (seed, round_id, index))
        s.id = sample_id(round_id, index)
        out.append(s)
    return out


def stack_images(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.chw() for s in samples]).astype(np.float32)


def stack_masks(samples: list[Sample]) -> np.ndarray:
    return np.stack([s.mask for s in samples]).astype(np.float32)


# proxy modalities ------------------------------------------------------------

@dataclass
class ModalityCorruptionSpec:
    """Corruption strengths for the three proxy modalities.

    Smoothing widths are structural (they define each modality); everything
    else is a corruption and is zero in :meth:`none`.
    """
    semantic_blur: float = 4.0
    semantic_drop: float = 0.35
    semantic_drop_small: float = 0.7
    small_object_frac: float = 0.04
    generative_jitter: float = 2.5
    generative_noise: float = 0.25
    concept_blur: float = 2.5
    concept_shift: int = 4

    @classmethod
    def none(cls) -> "ModalityCorruptionSpec":
        return cls(semantic_drop=0.0, semantic_drop_small=0.0, generative_jitter=0.0,
                   generative_noise=0.0, concept_shift=0)


def _shift(a, dy, dx):
    out = np.zeros_like(a)
    h, w = a.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = a[ys, xs]
    return out


def _jitter(mask, amp, rng):
    if amp <= 0:
        return mask.astype(np.float64)
    h, w = mask.shape
    field_y = ndimage.gaussian_filter(rng.normal(size=(h, w)), 3.0)
    field_x = ndimage.gaussian_filter(rng.normal(size=(h, w)), 3.0)
    scale = amp / (max(np.abs(field_y).max(), np.abs(field_x).max()) + 1e-9)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([yy + field_y * scale, xx + field_x * scale])
    return ndimage.map_coordinates(mask.astype(np.float64), coords, order=1, mode="constant")


def synthesize_modalities(sample: Sample, corruption: ModalityCorruptionSpec | None,
                          rng: np.random.Generator) -> ModalityBundle:
    """Three complementary, individually insufficient views of the sample."""
    c = corruption or ModalityCorruptionSpec()
    gt = sample.mask.astype(np.float64)
    h, w = gt.shape
    img = sample.image.astype(np.float64)
    lum = img @ np.array([0.299, 0.587, 0.114])

    # semantic: edges, texture energy, luminance and a wide location hint
    grad = np.hypot(ndimage.sobel(lum, 0), ndimage.sobel(lum, 1))
    grad = grad / (grad.max() + 1e-9)
    local_var = ndimage.uniform_filter(lum ** 2, 3) - ndimage.uniform_filter(lum, 3) ** 2
    texture = np.sqrt(np.clip(local_var, 0, None))
    texture = texture / (texture.max() + 1e-9)
    hint = ndimage.gaussian_filter(gt, c.semantic_blur)
    hint = hint / (hint.max() + 1e-9)
    drop_p = c.semantic_drop_small if gt.mean() < c.small_object_frac else c.semantic_drop
    if rng.random() < drop_p:
        hint = np.zeros_like(hint)
    semantic = np.stack([lum, grad, texture, hint])

    # generative: coarse layout at quarter resolution, jittered and noisy
    layers = []
    for _ in range(2):
        warped = _jitter(gt, c.generative_jitter, rng)
        coarse = warped.reshape(h // 4, 4, w // 4, 4).mean(axis=(1, 3))
        if c.generative_noise > 0:
            coarse = coarse + rng.normal(0.0, c.generative_noise, size=coarse.shape)
        layers.append(coarse)
    generative = np.stack(layers)

    # concept: smooth object / background maps, displaced
    dy = dx = 0
    if c.concept_shift > 0:
        dy, dx = (int(v) for v in rng.integers(-c.concept_shift, c.concept_shift + 1, size=2))
    obj = ndimage.gaussian_filter(_shift(gt, dy, dx), c.concept_blur)
    concept = np.stack([obj, 1.0 - obj])

    return ModalityBundle(semantic.astype(np.float32), generative.astype(np.float32),
                          concept.astype(np.float32))


def modality_rng(seed: int, sample: Sample) -> np.random.Generator:
    return np.random.default_rng([int(seed), 7919, *[int(v) for v in sample.seed]])


def bundle_for(samples: list[Sample], corruption: ModalityCorruptionSpec | None, seed: int) -> ModalityBundle:
    return ModalityBundle.stack([synthesize_modalities(s, corruption, modality_rng(seed, s)) for s in samples])


# dataset directory -----------------------------------------------------------

def manifest_record(sample: Sample, status: str = "unfiltered", reason: str = "", **extra) -> dict:
    rec = {"id": sample.id, "category": int(sample.category), "round": int(sample.round),
           "seed": [int(v) for v in sample.seed], "K": int(sample.k),
           "filter_status": status, "filter_reason": reason}
    rec.update(extra)
    return rec


def write_dataset(root, samples: list[Sample], records: list[dict] | None = None,
                  masks: list[np.ndarray] | None = None) -> Path:
    """images/<id>.png, masks/<id>.png and manifest.jsonl under ``root``."""
    from .rasterio import write_image, write_mask

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    records = records or [manifest_record(s) for s in samples]
    for i, s in enumerate(samples):
        write_image(root / "images" / f"{s.id}.png", s.image)
        write_mask(root / "masks" / f"{s.id}.png", s.mask if masks is None else masks[i])
    with open(root / "manifest.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return root


def read_manifest(root) -> list[dict]:
    with open(Path(root) / "manifest.jsonl") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def read_dataset(root):
    """(records, images (N,H,W,3) float32, masks (N,H,W) uint8) in manifest order."""
    from .rasterio import read_image, read_mask

    root = Path(root)
    records = read_manifest(root)
    images = np.stack([read_image(root / "images" / f"{r['id']}.png") for r in records])
    masks = np.stack([read_mask(root / "masks" / f"{r['id']}.png") for r in records])
    return records, images, masks

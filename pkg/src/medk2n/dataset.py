"""Procedural multimodal phantoms, manifest ingestion and paired augmentation.

Phantom anatomy
---------------
Every case draws one latent anatomy: a head ellipse, a few inner tissue
ellipses (white-matter-like and CSF-like), and lesion blobs made of an
edema halo around a necrotic/enhancing core. The latent is a density map
``t`` in [0, 1] plus smooth low-frequency texture.

Each modality is a fixed transform of that latent::

    I_m = clip(((t * (1 + r_f(m))) ** gamma_m) * lesion_gain[m, class], 0, 1) + noise_m

``MODALITY_GAMMA``, ``LESION_GAIN`` and the relaxation fields are the whole
recipe. Lesion gains differ per modality (T1n barely sees edema, T1c
brightens the core, T2w/T2f brighten edema). ``r_f`` is a smooth per-case
field shared only within a weighting family (slots 0-1 and slots 2-3), so a
target's family sibling carries structure the other sources cannot supply
and adding inputs genuinely adds information.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from . import kernels
from .types import (AvailabilityMask, ModalityId, PairedSample, SchemaError,
                    default_schema, make_schema, parse_mask)


class IngestionError(IOError):
    pass


# labels of the latent anatomy
BACKGROUND, TISSUE, WHITE, CSF, EDEMA, CORE = range(6)
LABEL_DENSITY = np.array([0.0, 0.55, 0.75, 0.25, 0.62, 0.45])

MODALITY_GAMMA = (0.6, 1.0, 1.6, 2.4)
# rows: modality slot; columns: (edema gain, core gain)
LESION_GAIN = np.array([
    [1.00, 0.90],
    [1.00, 1.90],
    [1.45, 1.30],
    [1.75, 1.25],
])
NOISE_SIGMA = 0.01
MODALITY_FAMILY = (0, 0, 1, 1)
RELAX_AMPLITUDE = 0.15


@dataclass
class PhantomSpec:
    seed: int = 0
    n_cases: int = 16
    image_size: int = 256
    schema: Tuple[ModalityId, ...] = field(default_factory=default_schema)
    lesion_count_range: Tuple[int, int] = (1, 3)

    def __post_init__(self):
        if self.n_cases < 1:
            raise ValueError(f"n_cases must be >= 1, got {self.n_cases}")
        if self.image_size < 16:
            raise ValueError(f"image_size must be >= 16, got {self.image_size}")
        lo, hi = self.lesion_count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"bad lesion_count_range {self.lesion_count_range}")
        if len(self.schema) > len(MODALITY_GAMMA):
            raise ValueError(f"phantoms support at most {len(MODALITY_GAMMA)} modalities")


def _latent_case(rng, size, lesion_range):
    S = float(size)
    ells = []
    # head
    ells.append((S / 2 + rng.uniform(-0.03, 0.03) * S, S / 2 + rng.uniform(-0.03, 0.03) * S,
                 rng.uniform(0.38, 0.45) * S, rng.uniform(0.32, 0.40) * S,
                 rng.uniform(-0.2, 0.2), TISSUE))
    for _ in range(rng.integers(2, 5)):
        ells.append((S / 2 + rng.uniform(-0.15, 0.15) * S, S / 2 + rng.uniform(-0.15, 0.15) * S,
                     rng.uniform(0.06, 0.18) * S, rng.uniform(0.05, 0.14) * S,
                     rng.uniform(0, np.pi), WHITE))
    for _ in range(rng.integers(1, 3)):
        ells.append((S / 2 + rng.uniform(-0.08, 0.08) * S, S / 2 + rng.uniform(-0.08, 0.08) * S,
                     rng.uniform(0.03, 0.07) * S, rng.uniform(0.02, 0.05) * S,
                     rng.uniform(0, np.pi), CSF))
    n_lesions = int(rng.integers(lesion_range[0], lesion_range[1] + 1))
    for _ in range(n_lesions):
        cy = S / 2 + rng.uniform(-0.22, 0.22) * S
        cx = S / 2 + rng.uniform(-0.2, 0.2) * S
        r = rng.uniform(0.05, 0.10) * S
        ang = rng.uniform(0, np.pi)
        ells.append((cy, cx, r * rng.uniform(1.0, 1.3), r, ang, EDEMA))
        ells.append((cy, cx, 0.5 * r, 0.45 * r, ang, CORE))
    labels = kernels.paint_ellipses(size, size, np.array(ells, dtype=np.float64))

    coarse = rng.normal(0.0, 1.0, size=(8, 8))
    texture = ndimage.zoom(coarse, size / 8.0, order=3)[:size, :size]
    texture = 0.04 * texture / (np.abs(texture).max() + 1e-12)
    density = LABEL_DENSITY[labels] + np.where(labels > 0, texture, 0.0)
    return labels, np.clip(density, 0.0, 1.0), n_lesions


def smooth_field(rng, size, grid=6):
    """Low-frequency field in [-1, 1] from a cubic-zoomed random grid."""
    coarse = rng.normal(0.0, 1.0, size=(grid, grid))
    f = ndimage.zoom(coarse, size / float(grid), order=3)[:size, :size]
    return f / (np.abs(f).max() + 1e-12)


def render_modality(labels, density, slot, relax=None):
    gain = np.ones_like(density)
    gain[labels == EDEMA] = LESION_GAIN[slot, 0]
    gain[labels == CORE] = LESION_GAIN[slot, 1]
    if relax is not None:
        density = np.clip(density * (1.0 + RELAX_AMPLITUDE * relax[MODALITY_FAMILY[slot]]), 0.0, 1.0)
    return np.clip((density ** MODALITY_GAMMA[slot]) * gain, 0.0, 1.0)


def generate_phantom(spec: PhantomSpec) -> List[PairedSample]:
    """Deterministic phantom cases for ``spec`` (one RNG stream per case)."""
    out = []
    full = AvailabilityMask(tuple(True for _ in spec.schema))
    for c in range(spec.n_cases):
        rng = np.random.default_rng([spec.seed, c])
        labels, density, _ = _latent_case(rng, spec.image_size, spec.lesion_count_range)
        head = labels > 0
        relax = [smooth_field(rng, spec.image_size) for _ in range(2)]
        slices = {}
        for m in spec.schema:
            img = render_modality(labels, density, m.index, relax)
            img = img + NOISE_SIGMA * rng.normal(size=img.shape) * head
            slices[m.name] = np.clip(img, 0.0, 1.0)
        out.append(PairedSample(case_id=f"case{c:04d}", slices=slices, mask=full,
                                schema=tuple(spec.schema)))
    return out


# --------------------------------------------------------------------------
# image files and manifests


def read_image(path) -> np.ndarray:
    """Grayscale PNG/PGM to float64 in [0, 1] (8- or 16-bit)."""
    with Image.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            arr = np.asarray(im, dtype=np.float64)
            peak = 65535.0
        elif im.mode == "L":
            arr = np.asarray(im, dtype=np.float64)
            peak = 255.0
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64)
            peak = 255.0
    return arr / peak


def write_image(path, img, bits=16):
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        data = np.round(img * 65535.0).astype(np.uint16)
        Image.fromarray(data).save(path)  # uint16 -> I;16
    else:
        Image.fromarray(np.round(img * 255.0).astype(np.uint8)).save(path)


def schema_from_names(names, texts=None):
    defaults = dict((n, t) for n, t in _default_texts())
    texts = texts or {}
    return make_schema([(n, texts.get(n) or defaults.get(n) or f"{n.lower()} medical image")
                        for n in names])


def _default_texts():
    from .types import BRAIN_TUMOR_MODALITIES
    return BRAIN_TUMOR_MODALITIES


def load_manifest(path, schema: Optional[Sequence[ModalityId]] = None) -> List[PairedSample]:
    """Load cases listed in a JSON manifest. Relative paths resolve against
    the manifest's directory."""
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"manifest {path} does not exist")
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("name", "modalities", "cases"):
        if key not in doc:
            raise SchemaError(f"manifest {path} lacks required key {key!r}")
    if schema is None:
        schema = schema_from_names(doc["modalities"], doc.get("descriptions"))
    elif [m.name for m in schema] != list(doc["modalities"]):
        raise SchemaError(f"manifest modalities {doc['modalities']} do not match schema")
    base = path.parent
    samples = []
    for case in doc["cases"]:
        cid = str(case.get("id"))
        mask = parse_mask(case["mask"], schema)
        slices = {}
        for m, bit in zip(schema, mask.bits):
            if not bit:
                continue
            rel = case.get("slices", {}).get(m.name)
            if rel is None:
                raise IngestionError(f"case {cid}: mask marks {m.name} available but no file is listed")
            fp = base / rel
            if not fp.exists():
                raise IngestionError(f"case {cid}: missing file {fp}")
            slices[m.name] = read_image(fp)
        if len({s.shape for s in slices.values()}) > 1:
            raise SchemaError(f"case {cid}: slice dimensions differ "
                              f"{ {k: v.shape for k, v in slices.items()} }")
        samples.append(PairedSample(case_id=cid, slices=slices, mask=mask, schema=tuple(schema)))
    return samples


def write_manifest(samples: Sequence[PairedSample], out_dir, name="phantom", bits=16):
    """Write images plus ``manifest.json`` atomically (temp file then rename)."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    schema = samples[0].schema
    cases = []
    for s in samples:
        rels = {}
        for m, bit in zip(schema, s.mask.bits):
            if not bit:
                continue
            rel = f"images/{s.case_id}_{m.name}.png"
            write_image(out_dir / rel, s.slices[m.name], bits=bits)
            rels[m.name] = rel
        cases.append({"id": s.case_id, "slices": rels, "mask": s.mask.render()})
    doc = {"name": name, "modalities": [m.name for m in schema],
           "descriptions": {m.name: m.description_text for m in schema}, "cases": cases}
    target = out_dir / "manifest.json"
    tmp = out_dir / ".manifest.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    os.replace(tmp, target)
    return target


# --------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    scale: float
    shift: Tuple[float, float]
    blur_sigma: float  # 0 means no blur
    brightness: float
    contrast: float


def draw_augment_params(rng, shape, flip_p=0.5, blur_p=0.1, scale_range=(0.8, 1.2),
                        jitter=0.05) -> AugmentParams:
    H, W = shape
    flip = bool(rng.random() < flip_p)
    scale = float(rng.uniform(*scale_range))
    room = abs(1.0 - scale) / 2.0
    shift = (float(rng.uniform(-room, room) * H), float(rng.uniform(-room, room) * W))
    blur = float(rng.uniform(0.5, 1.0)) if rng.random() < blur_p else 0.0
    brightness = float(rng.uniform(-jitter, jitter))
    contrast = float(rng.uniform(1.0 - jitter, 1.0 + jitter))
    return AugmentParams(flip, scale, shift, blur, brightness, contrast)


def geometry_coords(shape, params: AugmentParams):
    """Source coordinates sampled for every output pixel."""
    H, W = shape
    ii, jj = np.mgrid[0:H, 0:W].astype(np.float64)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    if params.flip:
        jj = (W - 1) - jj
    sy = cy + (ii - cy) * params.scale + params.shift[0]
    sx = cx + (jj - cx) * params.scale + params.shift[1]
    return sy, sx


def apply_augment(img, params: AugmentParams):
    sy, sx = geometry_coords(img.shape, params)
    out = ndimage.map_coordinates(img, [sy, sx], order=1, mode="constant", cval=0.0)
    if params.blur_sigma > 0:
        out = ndimage.gaussian_filter(out, params.blur_sigma, mode="nearest")
    out = out * params.contrast + params.brightness
    return np.clip(out, 0.0, 1.0)


def augment(sample: PairedSample, rng) -> PairedSample:
    """Training-time augmentation: one random draw shared by all modalities."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    params = draw_augment_params(rng, sample.shape)
    slices = {k: apply_augment(v, params) for k, v in sample.slices.items()}
    return PairedSample(case_id=sample.case_id, slices=slices, mask=sample.mask,
                        schema=sample.schema)


def resize_sample(sample: PairedSample, size: int) -> PairedSample:
    """Resample every slice to ``size x size`` (bilinear)."""
    H, W = sample.shape
    if (H, W) == (size, size):
        return sample
    slices = {k: np.clip(ndimage.zoom(v, (size / H, size / W), order=1), 0.0, 1.0)[:size, :size]
              for k, v in sample.slices.items()}
    return PairedSample(case_id=sample.case_id, slices=slices, mask=sample.mask,
                        schema=sample.schema)


def modality_bands(samples: Sequence[PairedSample], n_std=2.0):
    """Per-modality band on slice mean intensity, used as an intensity prior."""
    schema = samples[0].schema
    bands = {}
    for m in schema:
        means = [float(s.slices[m.name].mean()) for s in samples if m.name in s.slices]
        if not means:
            bands[m.name] = (0.0, 1.0)
            continue
        mu, sd = float(np.mean(means)), float(np.std(means))
        bands[m.name] = (max(0.0, mu - n_std * sd - 0.01), min(1.0, mu + n_std * sd + 0.01))
    return bands

"""Procedural pelvis-like phantoms standing in for clinical MR/MRCAT/CT data.

Paired cases render a voxel-aligned MR + MRCAT from one geometry. Unpaired
cases render CT only, from disjoint geometry seeds. The CT population
carries a couch strip and (in a fraction of cases) an air cavity; MRCAT is
noise-free, quantized to five levels and never shows either.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from enum import Enum, IntEnum
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import InvalidArgumentError

MIN_RESOLUTION = 32
FORMAT_NAME = "auxgan-phantom"
FORMAT_VERSION = 1

# CT intensity x in [-1, 1] maps to HU = scale * x + offset.
HU_MAP = {"scale": 1000.0, "offset": 0.0}


class Modality(str, Enum):
    MR = "MR"
    CT = "CT"
    MRCAT = "MRCAT"
    sCT = "sCT"
    sMR = "sMR"


class Label(IntEnum):
    BACKGROUND = 0
    BODY = 1
    BONE = 2
    BLADDER = 3
    PROSTATE = 4
    COUCH = 5
    AIR_CAVITY = 6


ANATOMY_LABELS = (Label.BODY, Label.BONE, Label.BLADDER, Label.PROSTATE)

# Per-modality tissue intensities on the [-1, 1] scale.
CT_LEVELS = {
    "background": -1.0,
    "body": 0.0,
    "bladder": -0.24,
    "prostate": -0.12,
    "marrow": 0.5,
    "cortex": 0.85,
    "couch": 0.4,
    "air": -0.95,
}
MR_LEVELS = {
    "background": -1.0,
    "body": 0.4,
    "bladder": 0.85,
    "prostate": 0.0,
    "bone": -0.4,
}
MRCAT_LEVELS = {
    "background": -1.0,
    "bladder": -0.24,
    "prostate": -0.12,
    "body": 0.0,
    "bone": 0.7,
}
MRCAT_LEVEL_COUNT = 5
NOISE_STD = 0.02
MR_BIAS_AMPLITUDE = 0.08


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float  # horizontal semi-axis, px
    b: float  # vertical semi-axis, px

    def mask(self, shape, scale=1.0):
        yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
        a, b = self.a * scale, self.b * scale
        if a <= 0 or b <= 0:
            return np.zeros(shape, dtype=bool)
        return ((xx - self.cx) / a) ** 2 + ((yy - self.cy) / b) ** 2 <= 1.0


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float

    def mask(self, shape, scale=1.0):
        return Ellipse(self.cx, self.cy, self.r, self.r).mask(shape, scale)


@dataclass(frozen=True)
class PhantomGeometry:
    seed: int
    resolution: int
    body: Ellipse
    femur_left: Circle
    femur_right: Circle
    bladder: Ellipse
    prostate: Ellipse
    air_cavity: Optional[Ellipse]
    couch_top: float
    couch_height: float

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["body"] = Ellipse(**d["body"])
        d["femur_left"] = Circle(**d["femur_left"])
        d["femur_right"] = Circle(**d["femur_right"])
        d["bladder"] = Ellipse(**d["bladder"])
        d["prostate"] = Ellipse(**d["prostate"])
        if d["air_cavity"] is not None:
            d["air_cavity"] = Ellipse(**d["air_cavity"])
        return cls(**d)

    @property
    def shape(self):
        return (self.resolution, self.resolution)

    def organ_masks(self, slice_offset=0.0):
        """Boolean masks per structure. ``slice_offset`` (in units of the
        organ's vertical semi-axis) shrinks every organ as an ellipsoid would
        when cut off-centre; the body and couch are treated as extruded."""
        t = slice_offset * 0.35
        s = float(np.sqrt(max(0.0, 1.0 - t * t)))
        sh = self.shape
        masks = {
            "body": self.body.mask(sh),
            "femur_left": self.femur_left.mask(sh, s),
            "femur_right": self.femur_right.mask(sh, s),
            "bladder": self.bladder.mask(sh, s),
            "prostate": self.prostate.mask(sh, s),
        }
        if self.air_cavity is not None:
            masks["air_cavity"] = self.air_cavity.mask(sh, s)
        couch = np.zeros(sh, dtype=bool)
        top = int(round(self.couch_top))
        couch[top : top + int(round(self.couch_height)), :] = True
        masks["couch"] = couch
        return masks


@dataclass
class SliceImage:
    pixels: np.ndarray  # C x H x W, float32, values in [-1, 1]
    modality: Modality
    case_id: str = ""

    def __post_init__(self):
        self.modality = Modality(self.modality)
        if self.pixels.ndim != 3:
            raise InvalidArgumentError(f"expected C x H x W pixels, got shape {self.pixels.shape}")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class PhantomCase:
    geometry: PhantomGeometry
    images: dict = field(default_factory=dict)  # Modality -> SliceImage
    masks: dict = field(default_factory=dict)  # Modality -> label array
    paired: bool = True


def _inside(inner, outer, margin=2):
    return not np.any(inner & ~ndimage.binary_erosion(outer, iterations=margin))


def _disjoint(a, b, gap=1):
    return not np.any(ndimage.binary_dilation(a, iterations=gap) & b)


def _valid(g: PhantomGeometry) -> bool:
    m = g.organ_masks()
    organs = [m["femur_left"], m["femur_right"], m["bladder"], m["prostate"]]
    if g.air_cavity is not None:
        organs.append(m["air_cavity"])
    if not all(o.any() and _inside(o, m["body"]) for o in organs):
        return False
    for i in range(len(organs)):
        for j in range(i + 1, len(organs)):
            if not _disjoint(organs[i], organs[j]):
                return False
    if g.couch_top + g.couch_height > g.resolution - 1:
        return False
    return _disjoint(m["body"], m["couch"], gap=2)


def _draw_geometry(rng, seed, R, air_cavity_prob):
    u = rng.uniform
    cx = R / 2 + u(-0.02, 0.02) * R
    cy = 0.45 * R + u(-0.02, 0.02) * R
    body = Ellipse(cx, cy, u(0.36, 0.42) * R, u(0.25, 0.30) * R)

    femurs = []
    for side in (-1, 1):
        r = u(0.045, 0.06) * R
        dx = u(0.55, 0.65) * body.a
        dy = u(0.0, 0.25) * body.b
        femurs.append(Circle(cx + side * dx, cy + dy, r))

    bladder = Ellipse(
        cx + u(-0.03, 0.03) * R, cy + u(-0.16, -0.10) * R, u(0.07, 0.10) * R, u(0.05, 0.07) * R
    )
    pb = u(0.035, 0.045) * R
    prostate = Ellipse(
        bladder.cx + u(-0.01, 0.01) * R,
        bladder.cy + bladder.b + u(0.01, 0.02) * R + pb,
        u(0.045, 0.06) * R,
        pb,
    )
    air = None
    if u() < air_cavity_prob:
        ar = u(0.025, 0.04) * R
        air = Ellipse(
            prostate.cx + u(-0.01, 0.01) * R,
            prostate.cy + prostate.b + u(0.015, 0.025) * R + ar * 0.8,
            ar,
            ar * 0.8,
        )
    couch_top = cy + body.b + u(0.03, 0.06) * R
    return PhantomGeometry(
        seed=seed,
        resolution=R,
        body=body,
        femur_left=femurs[0],
        femur_right=femurs[1],
        bladder=bladder,
        prostate=prostate,
        air_cavity=air,
        couch_top=couch_top,
        couch_height=max(2.0, u(0.04, 0.06) * R),
    )


def sample_geometry(seed: int, resolution: int = 128, air_cavity_prob: float = 0.5) -> PhantomGeometry:
    """Draw a random anatomy. Shape parameters are uniform over ranges given
    as fractions of ``resolution``; draws violating containment or
    disjointness are rejected and redrawn from the same stream."""
    if resolution < MIN_RESOLUTION:
        raise InvalidArgumentError(f"resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    if not 0.0 <= air_cavity_prob <= 1.0:
        raise InvalidArgumentError("air_cavity_prob must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        g = _draw_geometry(rng, seed, resolution, air_cavity_prob)
        if _valid(g):
            return g
    raise RuntimeError(f"could not sample a valid geometry for seed={seed}")  # pragma: no cover


def label_map(geometry: PhantomGeometry, modality, slice_offset=0.0) -> np.ndarray:
    """Ground-truth labels for ``geometry`` as seen in ``modality``."""
    modality = Modality(modality)
    m = geometry.organ_masks(slice_offset)
    lab = np.zeros(geometry.shape, dtype=np.uint8)
    lab[m["body"]] = Label.BODY
    lab[m["bladder"]] = Label.BLADDER
    lab[m["prostate"]] = Label.PROSTATE
    lab[m["femur_left"] | m["femur_right"]] = Label.BONE
    if modality in (Modality.CT, Modality.sCT):
        if "air_cavity" in m:
            lab[m["air_cavity"]] = Label.AIR_CAVITY
        lab[m["couch"]] = Label.COUCH
    return lab


def _cortex_mask(geometry: PhantomGeometry, bone: np.ndarray) -> np.ndarray:
    t = max(1, int(round(0.02 * geometry.resolution)))
    return bone & ~ndimage.binary_erosion(bone, iterations=t)


def _bias_field(rng, shape):
    y, x = np.mgrid[-1 : 1 : shape[0] * 1j, -1 : 1 : shape[1] * 1j]
    terms = np.stack([x, y, x * y, x * x, y * y])
    f = np.tensordot(rng.normal(size=len(terms)), terms, axes=1)
    f /= max(np.abs(f).max(), 1e-12)
    return 1.0 + MR_BIAS_AMPLITUDE * rng.uniform(0.5, 1.0) * f


def _quantize(values, levels):
    levels = np.asarray(sorted(levels))
    idx = np.abs(values[..., None] - levels).argmin(axis=-1)
    return levels[idx]


def _render_plane(geometry, modality, rng, slice_offset):
    lab = label_map(geometry, modality, slice_offset)
    bone = lab == Label.BONE
    if modality is Modality.CT:
        L = CT_LEVELS
        img = np.full(geometry.shape, L["background"])
        img[lab == Label.BODY] = L["body"]
        img[lab == Label.BLADDER] = L["bladder"]
        img[lab == Label.PROSTATE] = L["prostate"]
        img[bone] = L["marrow"]
        img[_cortex_mask(geometry, bone)] = L["cortex"]
        img[lab == Label.AIR_CAVITY] = L["air"]
        img[lab == Label.COUCH] = L["couch"]
        img = img + rng.normal(0.0, NOISE_STD, size=img.shape)
    elif modality is Modality.MR:
        L = MR_LEVELS
        img = np.full(geometry.shape, L["background"])
        img[lab == Label.BODY] = L["body"]
        img[lab == Label.BLADDER] = L["bladder"]
        img[lab == Label.PROSTATE] = L["prostate"]
        img[bone] = L["bone"]
        unit = (img + 1.0) / 2.0 * _bias_field(rng, geometry.shape)
        img = unit * 2.0 - 1.0 + rng.normal(0.0, NOISE_STD, size=img.shape)
    else:
        L = MRCAT_LEVELS
        base = np.full(geometry.shape, L["background"])
        base[(lab == Label.BODY) | bone] = L["body"]
        base[lab == Label.BLADDER] = L["bladder"]
        base[lab == Label.PROSTATE] = L["prostate"]
        soft = ndimage.gaussian_filter(bone.astype(float), sigma=0.01 * geometry.resolution)
        img = base + (L["bone"] - base) * soft * (lab != Label.BACKGROUND)
        img = _quantize(img, L.values())
    return np.clip(img, -1.0, 1.0).astype(np.float32), lab


def render(
    geometry: PhantomGeometry,
    modality,
    noise_seed: int = 0,
    case_id: str = "",
    channels: int = 1,
    channel_mode: str = "replicate",
):
    """Render one modality. Returns ``(SliceImage, label_map)``.

    ``channel_mode="stack"`` renders neighbouring planes (offsets -1, 0, +1)
    instead of copying the centre plane; the label map is always the centre
    plane's. MRCAT ignores ``noise_seed`` entirely.
    """
    modality = Modality(modality)
    if modality not in (Modality.MR, Modality.CT, Modality.MRCAT):
        raise InvalidArgumentError(f"cannot render modality {modality.value}")
    if channels < 1:
        raise InvalidArgumentError("channels must be >= 1")
    rng = np.random.default_rng(noise_seed)
    centre, lab = _render_plane(geometry, modality, rng, 0.0)
    if channels == 1 or channel_mode == "replicate":
        pixels = np.repeat(centre[None], channels, axis=0)
    elif channel_mode == "stack":
        half = (channels - 1) / 2.0
        planes = []
        for k in range(channels):
            off = k - half
            planes.append(centre if off == 0 else _render_plane(geometry, modality, rng, off)[0])
        pixels = np.stack(planes)
    else:
        raise InvalidArgumentError(f"unknown channel_mode {channel_mode!r}")
    return SliceImage(pixels, modality, case_id), lab


# ---------------------------------------------------------------------------
# rule-based segmentation

_CT_FAMILY = {Modality.CT, Modality.sCT, Modality.MRCAT}


def _largest_component(mask):
    lab, n = ndimage.label(mask)
    if n == 0:
        return np.zeros_like(mask)
    sizes = ndimage.sum(mask, lab, index=np.arange(1, n + 1))
    return lab == (int(np.argmax(sizes)) + 1)


def _drop_small(mask, min_size):
    lab, n = ndimage.label(mask)
    if n == 0:
        return mask
    sizes = ndimage.sum(mask, lab, index=np.arange(1, n + 1))
    keep = np.zeros(n + 1, dtype=bool)
    keep[1:] = sizes >= min_size
    return keep[lab]


def _couch_mask(fg):
    """Full-width strips belonging to components spanning both image sides."""
    lab, n = ndimage.label(fg)
    spanning = np.intersect1d(np.unique(lab[:, 0]), np.unique(lab[:, -1]))
    spanning = spanning[spanning > 0]
    if spanning.size == 0:
        return np.zeros_like(fg)
    comp = np.isin(lab, spanning)
    rows = comp.mean(axis=1) >= 0.95
    return comp & rows[:, None]


def segment_rule_based(image: SliceImage) -> np.ndarray:
    """Label an image by per-modality intensity windows.

    CT-like images (CT, sCT, MRCAT) and MR-like images (MR, sMR) use separate
    windows. The body is the largest foreground component with holes filled;
    the couch is any full-width strip spanning both image borders (CT and sCT
    only). Bladder and prostate keep their largest component; stray bone and
    air specks are returned to body.
    """
    modality = Modality(image.modality)
    raw = image.pixels.mean(axis=0).astype(np.float64)
    # foreground/air margins are wide; only tissue windows need the median filter
    x = ndimage.median_filter(raw, size=3)
    out = np.zeros(x.shape, dtype=np.uint8)
    min_size = max(2, int(0.0004 * x.size))

    if modality in _CT_FAMILY:
        fg = raw > -0.6
        couch = np.zeros_like(fg)
        if modality is not Modality.MRCAT:
            couch = _couch_mask(fg)
        body = ndimage.binary_fill_holes(_largest_component(fg & ~couch))
        windows = [
            (Label.BLADDER, -0.6, -0.18),
            (Label.PROSTATE, -0.18, -0.06),
            (Label.BONE, 0.3, np.inf),
        ]
        air = body & (raw <= -0.6) if modality is not Modality.MRCAT else np.zeros_like(body)
    else:
        fg = raw > -0.7
        couch = np.zeros_like(fg)
        body = ndimage.binary_fill_holes(_largest_component(fg))
        windows = [
            (Label.BONE, -np.inf, -0.2),
            (Label.PROSTATE, -0.2, 0.2),
            (Label.BLADDER, 0.62, np.inf),
        ]
        air = np.zeros_like(body)

    out[body] = Label.BODY
    for label, lo, hi in windows:
        m = body & (x >= lo) & (x < hi) & ~air
        if label in (Label.BLADDER, Label.PROSTATE):
            m = _largest_component(_drop_small(m, min_size))
        else:
            m = _drop_small(m, min_size)
        out[m] = label
    out[_drop_small(air, min_size)] = Label.AIR_CAVITY
    out[couch] = Label.COUCH
    return out


# ---------------------------------------------------------------------------
# dataset on disk


@dataclass
class DatasetManifest:
    root: Path
    resolution: int
    master_seed: int
    cases: list  # list of dicts, see README for the schema
    hu_map: dict = field(default_factory=lambda: dict(HU_MAP))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        data = json.loads(path.read_text())
        if data.get("format") != FORMAT_NAME:
            raise InvalidArgumentError(f"{path} is not a {FORMAT_NAME} manifest")
        return cls(
            root=path.parent,
            resolution=data["resolution"],
            master_seed=data["master_seed"],
            cases=data["cases"],
            hu_map=data["hu_map"],
        )

    def select(self, split=None, paired=None):
        return [
            c
            for c in self.cases
            if (split is None or c["split"] == split) and (paired is None or c["paired"] == paired)
        ]

    def load_image(self, case: dict, modality) -> tuple:
        modality = Modality(modality)
        entry = case["files"][modality.value]
        pixels = np.load(self.root / entry["image"])
        labels = np.load(self.root / entry["labels"])
        return SliceImage(pixels[None], modality, case["case_id"]), labels


def make_case(geometry, paired, noise_seed, case_id="") -> PhantomCase:
    case = PhantomCase(geometry=geometry, paired=paired)
    modalities = (Modality.MR, Modality.MRCAT) if paired else (Modality.CT,)
    for k, mod in enumerate(modalities):
        img, lab = render(geometry, mod, noise_seed + k, case_id=case_id)
        case.images[mod] = img
        case.masks[mod] = lab
    return case


def _atomic_write_bytes(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _npy_bytes(arr) -> bytes:
    import io

    buf = io.BytesIO()
    np.save(buf, arr, allow_pickle=False)
    return buf.getvalue()


def generate_dataset(
    n_paired: int,
    n_unpaired_ct: int,
    resolution: int,
    master_seed: int,
    out_dir,
    eval_fraction: float = 0.2,
    air_cavity_prob: float = 0.5,
) -> DatasetManifest:
    """Write a phantom dataset under ``out_dir`` and return its manifest.

    Geometry seeds are drawn without replacement, so paired and CT cases never
    share anatomy. The last ``round(eval_fraction * n)`` cases of each group
    form the eval split.
    """
    if n_paired < 1 or n_unpaired_ct < 1:
        raise InvalidArgumentError("n_paired and n_unpaired_ct must both be >= 1")
    if resolution < MIN_RESOLUTION:
        raise InvalidArgumentError(f"resolution must be >= {MIN_RESOLUTION}, got {resolution}")
    if not 0.0 <= eval_fraction < 1.0:
        raise InvalidArgumentError("eval_fraction must lie in [0, 1)")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(master_seed)
    seeds = rng.choice(2**31 - 1, size=n_paired + n_unpaired_ct, replace=False)
    noise_seeds = rng.integers(0, 2**31 - 1, size=n_paired + n_unpaired_ct)

    cases = []
    groups = [("p", True, n_paired), ("c", False, n_unpaired_ct)]
    offset = 0
    for prefix, paired, n in groups:
        n_eval = int(round(eval_fraction * n))
        for i in range(n):
            case_id = f"{prefix}{i:04d}"
            gseed, nseed = int(seeds[offset + i]), int(noise_seeds[offset + i])
            geom = sample_geometry(gseed, resolution, air_cavity_prob)
            case = make_case(geom, paired, nseed, case_id)
            case_dir = out / "cases" / case_id
            case_dir.mkdir(parents=True, exist_ok=True)
            files = {}
            for mod, img in case.images.items():
                stem = mod.value
                _atomic_write_bytes(case_dir / f"{stem}.npy", _npy_bytes(img.pixels[0]))
                _atomic_write_bytes(case_dir / f"{stem}_labels.npy", _npy_bytes(case.masks[mod]))
                meta = {"case_id": case_id, "modality": stem, "hu_map": HU_MAP if mod is Modality.CT else None}
                _atomic_write_bytes(
                    case_dir / f"{stem}.json", (json.dumps(meta, sort_keys=True, indent=2) + "\n").encode()
                )
                rel = f"cases/{case_id}/{stem}"
                files[stem] = {"image": rel + ".npy", "labels": rel + "_labels.npy", "meta": rel + ".json"}
            cases.append(
                {
                    "case_id": case_id,
                    "paired": paired,
                    "split": "eval" if i >= n - n_eval else "train",
                    "geometry_seed": gseed,
                    "noise_seed": nseed,
                    "geometry": geom.to_dict(),
                    "files": files,
                }
            )
        offset += n

    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "resolution": resolution,
        "master_seed": master_seed,
        "eval_fraction": eval_fraction,
        "air_cavity_prob": air_cavity_prob,
        "hu_map": HU_MAP,
        "cases": cases,
    }
    _atomic_write_bytes(out / "manifest.json", (json.dumps(manifest, sort_keys=True, indent=2) + "\n").encode())
    return DatasetManifest.load(out)


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()

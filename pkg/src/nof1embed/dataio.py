"""Trial data: design geometry, metadata tables, image loading and synthesis.

A trial directory holds one image per observation plus ``metadata.csv``::

    participant_id,day,slot,intervention,temperature,lotion,filename

``reference_scores.csv`` (participant_id,day,slot,score) is optional and is
only used for orienting PC scores and for side-by-side reporting.
"""

from __future__ import annotations

import csv
import math
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ConfigError, DataError, FormatError, ValidationError

METADATA_FILE = "metadata.csv"
REFERENCE_FILE = "reference_scores.csv"
METADATA_HEADER = ("participant_id", "day", "slot", "intervention", "temperature", "lotion", "filename")
REFERENCE_HEADER = ("participant_id", "day", "slot", "score")


@dataclass(frozen=True)
class TrialDesign:
    """ABAB geometry of one participant's trial.

    ``first_block`` is ``"A"`` (no intervention) or ``"B"`` (intervention).
    """

    n_days: int = 16
    measurements_per_day: int = 3
    block_length_days: int = 2
    first_block: str = "A"
    participant_id: str = ""

    def __post_init__(self):
        if self.n_days < 1 or self.measurements_per_day < 1 or self.block_length_days < 1:
            raise ConfigError(f"design extents must be positive: {self}")
        if self.n_days % self.block_length_days:
            raise ConfigError(
                f"n_days={self.n_days} is not divisible by block_length_days={self.block_length_days}"
            )
        if self.first_block not in ("A", "B"):
            raise ConfigError(f"first_block must be 'A' or 'B', got {self.first_block!r}")

    @property
    def n_blocks(self) -> int:
        return self.n_days // self.block_length_days

    @property
    def block_length(self) -> int:
        """Observations per block."""
        return self.block_length_days * self.measurements_per_day

    @property
    def n_observations(self) -> int:
        return self.n_days * self.measurements_per_day

    def block_labels(self) -> list[bool]:
        start = self.first_block == "B"
        return [bool((b % 2 == 0) == start) for b in range(self.n_blocks)]

    def intervention_on_day(self, day: int) -> bool:
        return self.block_labels()[day // self.block_length_days]

    def timestamp(self, day: int, slot: int) -> int:
        return day * self.measurements_per_day + slot

    def with_participant(self, participant_id: str) -> TrialDesign:
        return replace(self, participant_id=str(participant_id))


@dataclass
class ObservationRecord:
    participant_id: str
    day: int
    slot: int
    intervention: bool
    temperature: float = float("nan")
    lotion: bool = False
    filename: str = ""
    reference_score: float | None = None

    @property
    def covariates(self) -> dict[str, float]:
        return {"temperature": self.temperature, "lotion": float(self.lotion)}


@dataclass
class ImageSample:
    """Channel-first float image in [0, 1] and its metadata row."""

    pixels: np.ndarray
    record: ObservationRecord

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise DataError(f"image {self.record.filename!r} must be 3xHxW, got {self.pixels.shape}")


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic acne-like generator.

    Each image is a flat skin-tone background with Poisson-many red disks;
    the Poisson mean depends on the slot's intervention flag.
    """

    base_skin_tone: tuple[float, float, float] = (0.86, 0.68, 0.57)
    lesion_color: tuple[float, float, float] = (0.72, 0.18, 0.2)
    lesion_count_off: float = 12.0
    lesion_count_on: float = 4.0
    lesion_radius_px: tuple[float, float] = (2.0, 4.0)
    noise_sd: float = 0.02
    image_hw: tuple[int, int] = (64, 64)
    drop_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.lesion_count_off < 0 or self.lesion_count_on < 0:
            raise ConfigError("lesion count means must be non-negative")
        lo, hi = self.lesion_radius_px
        if not 0 < lo <= hi:
            raise ConfigError(f"lesion_radius_px must be a positive range, got {self.lesion_radius_px}")
        if self.noise_sd < 0 or not 0 <= self.drop_prob < 1:
            raise ConfigError("noise_sd must be >= 0 and drop_prob in [0, 1)")

    @classmethod
    def from_dict(cls, d: dict) -> SynthSpec:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        for key in ("base_skin_tone", "lesion_color", "lesion_radius_px", "image_hw"):
            if key in known:
                known[key] = tuple(known[key])
        return cls(**known)


# ---------------------------------------------------------------------------
# metadata tables

def _parse_bool(text: str, what: str, row: int) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "y"):
        return True
    if t in ("0", "false", "no", "n", ""):
        return False
    raise DataError(f"row {row}: cannot parse {what}={text!r} as boolean")


def read_metadata(path: Path | str) -> list[ObservationRecord]:
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataError(f"cannot open metadata table {path}: {exc}") from exc
    records = []
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return []
        missing = [c for c in METADATA_HEADER if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for i, row in enumerate(reader, start=2):
            try:
                temp = row["temperature"].strip()
                records.append(
                    ObservationRecord(
                        participant_id=row["participant_id"].strip(),
                        day=int(row["day"]),
                        slot=int(row["slot"]),
                        intervention=_parse_bool(row["intervention"], "intervention", i),
                        temperature=float(temp) if temp else float("nan"),
                        lotion=_parse_bool(row["lotion"], "lotion", i),
                        filename=row["filename"].strip(),
                    )
                )
            except ValueError as exc:
                raise DataError(f"{path} line {i}: {exc}") from exc
    return records


def write_metadata(records: Iterable[ObservationRecord], path: Path | str) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METADATA_HEADER)
        for r in records:
            temp = "" if math.isnan(r.temperature) else repr(float(r.temperature))
            w.writerow([r.participant_id, r.day, r.slot, int(r.intervention), temp, int(r.lotion), r.filename])


def read_reference_scores(path: Path | str) -> dict[tuple[str, int, int], float]:
    out = {}
    with Path(path).open(newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out[(row["participant_id"].strip(), int(row["day"]), int(row["slot"]))] = float(row["score"])
            except (KeyError, ValueError) as exc:
                raise DataError(f"{path} line {i}: bad reference score row ({exc})") from exc
    return out


def write_reference_scores(records: Iterable[ObservationRecord], path: Path | str) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REFERENCE_HEADER)
        for r in records:
            if r.reference_score is not None:
                w.writerow([r.participant_id, r.day, r.slot, repr(float(r.reference_score))])


# ---------------------------------------------------------------------------
# images

def decode_image(path: Path | str) -> np.ndarray:
    """Read a PNG/JPEG into a float64 (3, H, W) array scaled to [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except FileNotFoundError as exc:
        raise DataError(f"image file not found: {path}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise FormatError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def encode_png(pixels: np.ndarray, path: Path | str) -> None:
    arr = np.clip(np.rint(pixels.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def _check_design_consistency(records: Sequence[ObservationRecord], design: TrialDesign) -> None:
    by_block: dict[tuple[str, int], list[ObservationRecord]] = {}
    seen: set[tuple[str, int, int]] = set()
    for r in records:
        key = (r.participant_id, r.day, r.slot)
        if key in seen:
            raise ValidationError(f"duplicate observation {key}")
        seen.add(key)
        if not (0 <= r.day < design.n_days and 0 <= r.slot < design.measurements_per_day):
            raise ValidationError(f"observation {key} lies outside the {design.n_days}-day design")
        by_block.setdefault((r.participant_id, r.day // design.block_length_days), []).append(r)
    bad = []
    for (pid, block), rows in sorted(by_block.items()):
        if len({r.intervention for r in rows}) > 1:
            bad.extend(f"{pid}/day{r.day}/slot{r.slot}={int(r.intervention)}" for r in rows)
    if bad:
        raise ValidationError("intervention flag changes inside a design block: " + ", ".join(bad))
    off_schedule = [
        f"{r.participant_id}/day{r.day}/slot{r.slot}"
        for r in records
        if r.intervention != design.intervention_on_day(r.day)
    ]
    if off_schedule:
        warnings.warn(
            f"{len(off_schedule)} observations deviate from the {design.first_block}-first alternation "
            f"(e.g. {off_schedule[0]}); treating block labels as observed",
            stacklevel=3,
        )


def load_trial(root: Path | str, design: TrialDesign) -> list[ImageSample]:
    """Load every row of ``root/metadata.csv`` with its decoded image.

    If ``design.participant_id`` is set only that participant's rows are
    returned. Samples come back ordered by (participant, day, slot).
    """
    root = Path(root)
    records = read_metadata(root / METADATA_FILE)
    if design.participant_id:
        records = [r for r in records if r.participant_id == design.participant_id]
    records.sort(key=lambda r: (r.participant_id, r.day, r.slot))
    _check_design_consistency(records, design)
    ref_path = root / REFERENCE_FILE
    if ref_path.exists():
        refs = read_reference_scores(ref_path)
        for r in records:
            r.reference_score = refs.get((r.participant_id, r.day, r.slot))
    samples = []
    for r in records:
        path = root / r.filename
        if not path.is_file():
            raise DataError(f"row participant={r.participant_id} day={r.day} slot={r.slot}: missing file {r.filename}")
        samples.append(ImageSample(decode_image(path), r))
    return samples


def write_trial(samples: Sequence[ImageSample], root: Path | str) -> None:
    """Write samples as PNGs plus metadata (and reference scores when present)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for s in samples:
        r = s.record
        if not r.filename:
            r = replace(r, filename=f"p{r.participant_id}_d{r.day:02d}_s{r.slot}.png")
        encode_png(s.pixels, root / r.filename)
        records.append(r)
    write_metadata(records, root / METADATA_FILE)
    if any(r.reference_score is not None for r in records):
        write_reference_scores(records, root / REFERENCE_FILE)


# ---------------------------------------------------------------------------
# preprocessing and augmentation

def _bilinear_axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    # half-pixel centres, edge-clamped
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(pixels: np.ndarray, target_hw: tuple[int, int]) -> np.ndarray:
    c, h, w = pixels.shape
    th, tw = target_hw
    if (h, w) == (th, tw):
        return pixels.copy()
    r0, r1, fr = _bilinear_axis(h, th)
    c0, c1, fc = _bilinear_axis(w, tw)
    rows = pixels[:, r0, :] * (1 - fr)[None, :, None] + pixels[:, r1, :] * fr[None, :, None]
    return rows[:, :, c0] * (1 - fc)[None, None, :] + rows[:, :, c1] * fc[None, None, :]


def preprocess(sample: ImageSample, target_hw: tuple[int, int]) -> ImageSample:
    th, tw = target_hw
    if th < 1 or tw < 1:
        raise ConfigError(f"target size must be positive, got {target_hw}")
    out = np.clip(resize_bilinear(sample.pixels, (th, tw)), 0.0, 1.0)
    return ImageSample(out, sample.record)


def augment(
    sample: ImageSample, flip_prob: float, brightness_factor: float, rng: np.random.Generator
) -> ImageSample:
    """Random horizontal mirror followed by multiplicative brightness with clamping."""
    if brightness_factor <= 0:
        raise ConfigError(f"brightness_factor must be positive, got {brightness_factor}")
    pixels = sample.pixels
    # always draw so the stream position does not depend on flip_prob
    if rng.random() < flip_prob:
        pixels = pixels[:, :, ::-1]
    pixels = np.clip(pixels * brightness_factor, 0.0, 1.0)
    return ImageSample(np.ascontiguousarray(pixels), sample.record)


def stack_pixels(samples: Sequence[ImageSample]) -> np.ndarray:
    if not samples:
        raise DataError("no images to stack")
    shapes = {s.pixels.shape for s in samples}
    if len(shapes) > 1:
        raise DataError(f"images have differing shapes {sorted(shapes)}; preprocess first")
    return np.stack([s.pixels for s in samples])


# ---------------------------------------------------------------------------
# synthetic trials

def participant_rng(seed: int, participant_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(str(participant_id).encode())])


def _render(spec: SynthSpec, n_lesions: int, rng: np.random.Generator) -> np.ndarray:
    h, w = spec.image_hw
    img = np.empty((3, h, w))
    img[:] = np.asarray(spec.base_skin_tone)[:, None, None]
    yy, xx = np.mgrid[0:h, 0:w]
    color = np.asarray(spec.lesion_color)[:, None]
    lo, hi = spec.lesion_radius_px
    for _ in range(n_lesions):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        rad = rng.uniform(lo, hi)
        mask = (yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= rad * rad
        img[:, mask] = color
    if spec.noise_sd > 0:
        img += rng.normal(0.0, spec.noise_sd, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def synth_generate(design: TrialDesign, spec: SynthSpec) -> list[ImageSample]:
    """One synthetic image per (day, slot) of ``design``.

    The true lesion count is stored as each record's ``reference_score``.
    The random stream depends only on (spec.seed, participant_id).
    """
    rng = participant_rng(spec.seed, design.participant_id)
    pid = design.participant_id or "1"
    out = []
    for day in range(design.n_days):
        on = design.intervention_on_day(day)
        for slot in range(design.measurements_per_day):
            k = int(rng.poisson(spec.lesion_count_on if on else spec.lesion_count_off))
            temperature = round(float(rng.normal(21.0, 2.0)), 1)
            lotion = bool(rng.random() < 0.3)
            pixels = _render(spec, k, rng)
            if spec.drop_prob and rng.random() < spec.drop_prob:
                continue
            record = ObservationRecord(
                participant_id=pid,
                day=day,
                slot=slot,
                intervention=on,
                temperature=temperature,
                lotion=lotion,
                filename=f"p{pid}_d{day:02d}_s{slot}.png",
                reference_score=float(k),
            )
            out.append(ImageSample(pixels, record))
    return out


@dataclass
class SynthTrial:
    """Synthetic multi-participant trial description (CLI ``synth`` input)."""

    design: TrialDesign = field(default_factory=TrialDesign)
    spec: SynthSpec = field(default_factory=SynthSpec)
    participants: tuple[str, ...] = ("1", "2", "3", "4", "5")
    # per-participant overrides of the Poisson means, e.g. to make some participants null
    lesion_means: dict[str, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> SynthTrial:
        design_keys = TrialDesign.__dataclass_fields__
        design = TrialDesign(**{k: v for k, v in d.get("design", {}).items() if k in design_keys})
        spec = SynthSpec.from_dict(d.get("spec", d))
        participants = tuple(str(p) for p in d.get("participants", cls.participants))
        means = {str(k): tuple(v) for k, v in d.get("lesion_means", {}).items()}
        return cls(design, spec, participants, means)

    def generate(self) -> list[ImageSample]:
        samples = []
        for pid in self.participants:
            spec = self.spec
            if pid in self.lesion_means:
                off, on = self.lesion_means[pid]
                spec = replace(spec, lesion_count_off=off, lesion_count_on=on)
            samples.extend(synth_generate(self.design.with_participant(pid), spec))
        return samples

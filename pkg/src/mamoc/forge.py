"""Procedural tissue phantoms and a k-space rigid-motion simulator.

Phantoms are nested ellipsoids with hard tissue labels (background, CSF,
gray, white) and smooth within-band intensity texture, so the label
volume is exactly consistent with the generating geometry.

Motion corruption follows the standard retrospective model: k-space
lines along one phase-encode axis are partitioned into groups, each
group is filled from the Fourier transform of a rigidly moved copy of
the image, and the composite is transformed back. Rigid resampling is
trilinear with periodic boundaries, so a whole-acquisition integer
translation is an exact circular shift.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import BadSeverity, BadSpec, DimMismatch, ManifestError
from .interp import trilinear_sample
from .volume_io import (
    LabelVolume,
    SubjectRecord,
    Volume,
    load_volume,
    save_volume,
)

TISSUES = ("csf", "gray", "white")
CLASS_IDS = {"background": 0, "csf": 1, "gray": 2, "white": 3}

DEFAULT_BANDS = {
    "csf": (0.10, 0.25),
    "gray": (0.40, 0.55),
    "white": (0.70, 0.90),
}
DEFAULT_EXTRA_COUNTS = {"csf": (0, 2), "gray": (1, 3), "white": (0, 2)}

# per-severity bounds: number of motion events, translation (voxels) and
# rotation (radians) magnitude caps per component
SEVERITY_BOUNDS = {
    "moderate": {"events": (1, 3), "translation": 2.0, "rotation": np.deg2rad(2.0)},
    "heavy": {"events": (3, 8), "translation": 5.0, "rotation": np.deg2rad(5.0)},
}

PHASE_AXIS = 1  # k-space lines are indexed along y


@dataclass(frozen=True)
class PhantomSpec:
    side: int = 32
    extra_counts: dict[str, tuple[int, int]] = field(
        default_factory=lambda: dict(DEFAULT_EXTRA_COUNTS)
    )
    bands: dict[str, tuple[float, float]] = field(default_factory=lambda: dict(DEFAULT_BANDS))
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.side < 16:
            raise BadSpec(f"phantom side must be at least 16, got {self.side}")
        if self.noise_sigma < 0:
            raise BadSpec("noise sigma must be non-negative")
        previous_hi = 0.0
        for tissue in TISSUES:
            if tissue not in self.bands:
                raise BadSpec(f"missing intensity band for {tissue}")
            lo, hi = self.bands[tissue]
            if not previous_hi < lo < hi:
                raise BadSpec("intensity bands must be disjoint and ordered above background")
            previous_hi = hi
        for tissue, (lo, hi) in self.extra_counts.items():
            if tissue not in TISSUES or lo < 0 or hi < lo:
                raise BadSpec(f"bad extra ellipsoid count range for {tissue!r}")


def _ellipsoid_mask(side: int, center, semi_axes) -> np.ndarray:
    coords = np.arange(side, dtype=np.float64)
    dx = (coords[:, None, None] - center[0]) / semi_axes[0]
    dy = (coords[None, :, None] - center[1]) / semi_axes[1]
    dz = (coords[None, None, :] - center[2]) / semi_axes[2]
    return dx * dx + dy * dy + dz * dz <= 1.0


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelVolume]:
    """Rasterize a deterministic nested-ellipsoid phantom.

    A white-matter head holds a gray shell, an inner white core and a
    central CSF cavity, plus a seeded number of extra ellipsoids per
    tissue clipped to the head. With zero noise every voxel's intensity
    lies inside its class band.
    """
    rng = np.random.default_rng(spec.seed)
    s = spec.side
    center = np.full(3, (s - 1) / 2.0)

    def jitter(scale: float) -> np.ndarray:
        return rng.uniform(-scale, scale, size=3) * s

    head = _ellipsoid_mask(s, center + jitter(0.01), np.array([0.44, 0.38, 0.42]) * s)
    gray = _ellipsoid_mask(s, center + jitter(0.01), np.array([0.36, 0.30, 0.34]) * s)
    core = _ellipsoid_mask(s, center + jitter(0.01), np.array([0.26, 0.21, 0.24]) * s)
    csf = _ellipsoid_mask(s, center + jitter(0.02), np.array([0.12, 0.08, 0.11]) * s)

    labels = np.zeros((s, s, s), dtype=np.int32)
    labels[head] = CLASS_IDS["white"]
    labels[gray & head] = CLASS_IDS["gray"]
    labels[core & head] = CLASS_IDS["white"]
    labels[csf & head] = CLASS_IDS["csf"]

    for tissue in TISSUES:
        lo, hi = spec.extra_counts.get(tissue, (0, 0))
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            blob_center = center + rng.uniform(-0.18, 0.18, size=3) * s
            blob_axes = rng.uniform(0.04, 0.10, size=3) * s
            blob = _ellipsoid_mask(s, blob_center, blob_axes) & head
            labels[blob] = CLASS_IDS[tissue]

    # smooth in-band texture per tissue, then optional acquisition noise
    texture = ndimage.gaussian_filter(rng.standard_normal((s, s, s)), sigma=s / 8.0)
    data = np.zeros((s, s, s), dtype=np.float64)
    for tissue in TISSUES:
        region = labels == CLASS_IDS[tissue]
        if not region.any():
            continue
        values = texture[region]
        span = values.max() - values.min()
        unit = (values - values.min()) / span if span > 0 else np.full(values.shape, 0.5)
        lo, hi = spec.bands[tissue]
        data[region] = lo + (hi - lo) * unit
    if spec.noise_sigma > 0:
        data = data + rng.normal(0.0, spec.noise_sigma, size=data.shape)

    return Volume(data.astype(np.float32)), LabelVolume(labels)


# ---------------------------------------------------------------------------
# Motion trajectories


@dataclass(frozen=True)
class MotionEvent:
    start_line: int
    translation: tuple[float, float, float]
    rotation: tuple[float, float, float]

    def is_identity(self) -> bool:
        return all(v == 0.0 for v in self.translation) and all(
            v == 0.0 for v in self.rotation
        )


@dataclass(frozen=True)
class MotionTrajectory:
    """Piecewise-constant rigid poses across groups of k-space lines."""

    events: tuple[MotionEvent, ...]
    severity: str
    line_count: int

    def __post_init__(self):
        if not self.events:
            raise BadSpec("trajectory needs at least one event")
        if self.events[0].start_line != 0 or not self.events[0].is_identity():
            raise BadSpec("first event must be the identity pose at line 0")
        starts = [e.start_line for e in self.events]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise BadSpec("event start lines must be strictly increasing")
        if starts[-1] >= self.line_count:
            raise BadSpec("event start line beyond the acquisition")

    def to_dict(self) -> dict:
        return {
            "severity": self.severity,
            "line_count": self.line_count,
            "events": [
                [e.start_line, list(e.translation), list(e.rotation)] for e in self.events
            ],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "MotionTrajectory":
        events = tuple(
            MotionEvent(int(start), tuple(map(float, t)), tuple(map(float, r)))
            for start, t, r in payload["events"]
        )
        return cls(events=events, severity=payload["severity"], line_count=int(payload["line_count"]))


def sample_trajectory(severity: str, line_groups: int, seed: int) -> MotionTrajectory:
    """Draw a trajectory whose event count and per-component motion
    magnitudes respect the severity's caps.

    Magnitudes are drawn from the upper three quarters of the cap so a
    sampled trajectory never degenerates to near-identity motion.
    """
    if severity not in SEVERITY_BOUNDS:
        raise BadSeverity(f"unknown severity {severity!r}")
    if line_groups < 2:
        raise BadSpec(f"need at least 2 line groups, got {line_groups}")
    bounds = SEVERITY_BOUNDS[severity]
    rng = np.random.default_rng(seed)
    lo, hi = bounds["events"]
    count = min(int(rng.integers(lo, hi + 1)), line_groups - 1)
    starts = np.sort(rng.choice(np.arange(1, line_groups), size=count, replace=False))

    def draw(cap: float) -> tuple[float, float, float]:
        magnitude = rng.uniform(cap / 4.0, cap, size=3)
        sign = rng.choice([-1.0, 1.0], size=3)
        return tuple(float(v) for v in magnitude * sign)

    events = [MotionEvent(0, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0))]
    for start in starts:
        events.append(MotionEvent(int(start), draw(bounds["translation"]), draw(bounds["rotation"])))
    return MotionTrajectory(events=tuple(events), severity=severity, line_count=line_groups)


# ---------------------------------------------------------------------------
# Simulation


def _rotation_matrix(angles) -> np.ndarray:
    ax, ay, az = angles
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def _rigid_transform(data: np.ndarray, event: MotionEvent) -> np.ndarray:
    """Move the object by the event's pose (rotation about the volume
    center, then translation) with periodic trilinear resampling."""
    if event.is_identity():
        return data.astype(np.float64, copy=True)
    s = data.shape[0]
    center = (s - 1) / 2.0
    inverse = _rotation_matrix(event.rotation).T
    coords = np.arange(s, dtype=np.float64)
    gx, gy, gz = np.meshgrid(coords, coords, coords, indexing="ij")
    rel = np.stack(
        [gx.ravel() - center - event.translation[0],
         gy.ravel() - center - event.translation[1],
         gz.ravel() - center - event.translation[2]]
    )
    src = inverse @ rel
    out = trilinear_sample(data, src[0] + center, src[1] + center, src[2] + center, wrap=True)
    return out.reshape(data.shape)


def _group_slices(trajectory: MotionTrajectory) -> list[tuple[MotionEvent, slice]]:
    starts = [e.start_line for e in trajectory.events] + [trajectory.line_count]
    return [
        (event, slice(starts[i], starts[i + 1]))
        for i, event in enumerate(trajectory.events)
    ]


def simulate_motion(vol: Volume, trajectory: MotionTrajectory) -> Volume:
    """Compose the k-space of rigidly moved copies of the scan.

    Each line group along the phase-encode axis is copied from the
    transform of its group's pose; the composite is inverted and the
    magnitude returned. An identity trajectory reproduces the input up
    to transform round-off.
    """
    s = vol.dims[0]
    if vol.dims != (s, s, s):
        raise DimMismatch(f"need a cubic volume, got {vol.dims}")
    if trajectory.line_count != s:
        raise DimMismatch(
            f"trajectory covers {trajectory.line_count} lines, volume side is {s}"
        )
    composite = np.zeros(vol.dims, dtype=np.complex128)
    take = [slice(None)] * 3
    for event, lines in _group_slices(trajectory):
        moved = _rigid_transform(vol.data, event)
        k = np.fft.fftn(moved, norm="ortho")
        take[PHASE_AXIS] = lines
        composite[tuple(take)] = k[tuple(take)]
    image = np.fft.ifftn(composite, norm="ortho")
    return Volume(np.abs(image).astype(np.float32), vol.spacing)


def group_energy_balance(vol: Volume, trajectory: MotionTrajectory) -> float:
    """Worst relative gap between each composed group's k-space energy and
    the image-domain energy of that group's contribution."""
    s = vol.dims[0]
    worst = 0.0
    take = [slice(None)] * 3
    for event, lines in _group_slices(trajectory):
        moved = _rigid_transform(vol.data, event)
        k = np.fft.fftn(moved, norm="ortho")
        part = np.zeros_like(k)
        take[PHASE_AXIS] = lines
        part[tuple(take)] = k[tuple(take)]
        k_energy = float(np.sum(np.abs(part) ** 2))
        image_energy = float(np.sum(np.abs(np.fft.ifftn(part, norm="ortho")) ** 2))
        if k_energy == 0.0 and image_energy == 0.0:
            continue
        worst = max(worst, abs(k_energy - image_energy) / max(k_energy, image_energy))
    return worst


# ---------------------------------------------------------------------------
# Paired datasets


def make_paired_dataset(
    n_subjects: int, spec: PhantomSpec, seed: int
) -> list[SubjectRecord]:
    """Generate per subject a clean phantom with labels plus moderate and
    heavy corruptions from independent trajectories."""
    if n_subjects < 1:
        raise BadSpec(f"need at least one subject, got {n_subjects}")
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_subjects):
        phantom_seed, moderate_seed, heavy_seed = (
            int(v) for v in rng.integers(0, 2**63, size=3)
        )
        clean, labels = generate_phantom(replace(spec, seed=phantom_seed))
        trajectories = {
            "moderate": sample_trajectory("moderate", spec.side, moderate_seed),
            "heavy": sample_trajectory("heavy", spec.side, heavy_seed),
        }
        scans = {"clean": clean}
        for severity, trajectory in trajectories.items():
            scans[severity] = simulate_motion(clean, trajectory)
        records.append(
            SubjectRecord(
                subject_id=f"subj{i:03d}",
                scans=scans,
                labels=labels,
                trajectories=trajectories,
            )
        )
    return records


def save_dataset(records: Sequence[SubjectRecord], out_dir: str | Path) -> Path:
    """Write every scan and label volume plus a one-record-per-line
    manifest; paths inside the manifest are relative to it."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for record in records:
        entry: dict = {"subject_id": record.subject_id, "split": record.split, "scans": {}}
        for tag in sorted(record.scans):
            name = f"{record.subject_id}_{tag}.mvol"
            save_volume(record.scans[tag], out_dir / name)
            entry["scans"][tag] = name
        if record.labels is not None:
            name = f"{record.subject_id}_labels.mvol"
            save_volume(Volume(record.labels.labels.astype(np.float32)), out_dir / name)
            entry["labels"] = name
        if record.trajectories:
            entry["trajectories"] = {
                tag: trajectory.to_dict()
                for tag, trajectory in sorted(record.trajectories.items())
            }
        lines.append(json.dumps(entry, sort_keys=True))
    manifest = out_dir / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n", encoding="ascii")
    return manifest


def load_dataset(manifest_path: str | Path) -> list[SubjectRecord]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise ManifestError(f"manifest not found: {manifest_path}")
    base = manifest_path.parent
    records = []
    for line_no, line in enumerate(manifest_path.read_text(encoding="ascii").splitlines(), 1):
        if not line.strip():
            continue
        try:
            entry = json.loads(line)
            scans = {
                tag: load_volume(base / name) for tag, name in entry["scans"].items()
            }
            labels = None
            if entry.get("labels"):
                labels = LabelVolume(load_volume(base / entry["labels"]).data.astype(np.int32))
            trajectories = {
                tag: MotionTrajectory.from_dict(payload)
                for tag, payload in entry.get("trajectories", {}).items()
            }
            records.append(
                SubjectRecord(
                    subject_id=entry["subject_id"],
                    scans=scans,
                    split=entry.get("split", "unassigned"),
                    labels=labels,
                    trajectories=trajectories,
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise ManifestError(f"bad manifest record on line {line_no}: {exc}") from exc
    if not records:
        raise ManifestError(f"manifest {manifest_path} holds no records")
    return records

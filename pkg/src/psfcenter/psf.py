"""Synthetic bead stacks and PSF detection.

Volumes are numpy arrays indexed ``[z, y, x]`` (x fastest in memory);
points and directions everywhere else are ``(x, y, z)``.

Detection pipeline: Gaussian blur -> white top-hat -> threshold and 26-connected
labeling -> growth into the surrounding dimmer voxels -> volume filtering
and cropping -> intensity-weighted PCA per component.  The eigenvalue ratio
``l1/l2`` of each component both filters round (unoriented) spots and becomes
the observation weight.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage as ndi

from .errors import BeadOutOfBounds, DegenerateComponent
from .geometry import ObservationSet, as_point, normalize_direction

TWELVE_BIT = (0.0, 4095.0)


@dataclass
class VolumeStack:
    data: np.ndarray                       # shape (nz, ny, nx)
    value_range: tuple = TWELVE_BIT

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise ValueError(f"stack must be 3D, got shape {self.data.shape}")

    @property
    def dims(self) -> tuple:
        nz, ny, nx = self.data.shape
        return nx, ny, nz

    @classmethod
    def zeros(cls, dims, value_range=TWELVE_BIT) -> "VolumeStack":
        nx, ny, nz = dims
        return cls(np.zeros((nz, ny, nx)), value_range)

    def with_data(self, data) -> "VolumeStack":
        return VolumeStack(data, self.value_range)


def write_stack(stack: VolumeStack, path) -> Path:
    """Raw little-endian uint16, x fastest, plus ``<path>.json`` sidecar."""
    path = Path(path)
    lo, hi = stack.value_range
    if lo < 0 or hi > 65535:
        raise ValueError("value range does not fit unsigned 16-bit storage")
    raw = np.clip(np.rint(stack.data), lo, hi).astype("<u2")
    path.write_bytes(raw.tobytes(order="C"))
    nx, ny, nz = stack.dims
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps({"nx": nx, "ny": ny, "nz": nz,
                                   "value_min": lo, "value_max": hi}, indent=2) + "\n")
    return sidecar


def read_stack(path) -> VolumeStack:
    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    nx, ny, nz = int(meta["nx"]), int(meta["ny"]), int(meta["nz"])
    raw = np.frombuffer(path.read_bytes(), dtype="<u2")
    if raw.size != nx * ny * nz:
        raise ValueError(f"{path}: {raw.size} voxels, sidecar says {nx}x{ny}x{nz}")
    return VolumeStack(raw.reshape(nz, ny, nx).astype(float),
                       (float(meta["value_min"]), float(meta["value_max"])))


# -- synthesis ------------------------------------------------------------------

def synthesize_stack(scene: ObservationSet, bead_sigmas=(3.0, 1.2), peak_intensity=1000.0,
                     background_level=100.0, noise_sigma=10.0, dims=(256, 256, 128),
                     rng: Optional[np.random.Generator] = None,
                     value_range=TWELVE_BIT) -> VolumeStack:
    """Render each bead as an anisotropic Gaussian elongated along its direction.

    ``bead_sigmas = (along, across)`` in voxels.  Background and Gaussian
    noise are added, then values are clamped to ``value_range`` and rounded.
    """
    s_par, s_perp = (float(s) for s in bead_sigmas)
    if not s_par > s_perp > 0:
        raise ValueError("bead sigmas must satisfy along > across > 0")
    nx, ny, nz = dims
    vol = np.zeros((nz, ny, nx))
    margin = 3.0 * s_par
    radius = int(np.ceil(4.0 * s_par))
    upper = np.array([nx - 1, ny - 1, nz - 1], dtype=float)
    for i, (a, n) in enumerate(zip(scene.anchors, scene.directions)):
        if np.any(a - margin < 0) or np.any(a + margin > upper):
            raise BeadOutOfBounds(f"bead {i} at {a} is closer than {margin:g} voxels "
                                  f"to the stack border")
        n = n / np.linalg.norm(n)
        lo = np.maximum(np.floor(a).astype(int) - radius, 0)
        hi = np.minimum(np.floor(a).astype(int) + radius + 1, upper.astype(int) + 1)
        zz, yy, xx = np.meshgrid(np.arange(lo[2], hi[2]), np.arange(lo[1], hi[1]),
                                 np.arange(lo[0], hi[0]), indexing="ij")
        dx, dy, dz = xx - a[0], yy - a[1], zz - a[2]
        along = dx * n[0] + dy * n[1] + dz * n[2]
        across2 = dx * dx + dy * dy + dz * dz - along * along
        vol[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]] += peak_intensity * np.exp(
            -0.5 * (along ** 2 / s_par ** 2 + across2 / s_perp ** 2))
    vol += background_level
    if noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng()
        vol += rng.normal(0.0, noise_sigma, size=vol.shape)
    lo, hi = value_range
    return VolumeStack(np.rint(np.clip(vol, lo, hi)), value_range)


# -- filters --------------------------------------------------------------------

def gaussian_blur(stack: VolumeStack, sigmas=(1.0, 1.0, 1.0)) -> VolumeStack:
    """Separable Gaussian blur, ``sigmas = (sx, sy, sz)``, truncated at 4 sigma."""
    sx, sy, sz = sigmas
    if min(sigmas) < 0:
        raise ValueError("blur sigmas must be nonnegative")
    out = ndi.gaussian_filter(stack.data, sigma=(sz, sy, sx), mode="reflect", truncate=4.0)
    return stack.with_data(out)


def tophat(stack: VolumeStack, half_sizes=(5, 5, 5)) -> VolumeStack:
    """White top-hat with a flat box of ``2 w + 1`` voxels per axis."""
    wx, wy, wz = (int(w) for w in half_sizes)
    if min(wx, wy, wz) < 1:
        raise ValueError("top-hat half-sizes must be at least 1")
    size = (2 * wz + 1, 2 * wy + 1, 2 * wx + 1)
    opened = ndi.grey_opening(stack.data, size=size, mode="reflect")
    return stack.with_data(np.maximum(stack.data - opened, 0.0))


# -- segmentation ---------------------------------------------------------------

@dataclass
class Component:
    label: int
    voxels: np.ndarray          # (M, 3) integer (x, y, z)

    @property
    def volume(self) -> int:
        return len(self.voxels)

    def index(self):
        """Fancy index into a ``[z, y, x]`` volume."""
        return self.voxels[:, 2], self.voxels[:, 1], self.voxels[:, 0]


@dataclass
class Labeling:
    labels: np.ndarray
    components: list
    threshold: float

    @property
    def count(self) -> int:
        return len(self.components)


CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=bool)


def otsu_threshold(stack: VolumeStack) -> float:
    from skimage.filters import threshold_otsu
    data = stack.data
    if np.ptp(data) == 0:
        return float(data.flat[0]) + 1.0   # nothing to separate: empty mask
    return float(threshold_otsu(data))


def threshold_and_label(stack: VolumeStack, threshold: Union[float, str] = "otsu") -> Labeling:
    """Binary mask ``value >= threshold`` and its 26-connected components.

    Labels run 1..M in raster (x-fastest) order of each component's first voxel.
    """
    thr = otsu_threshold(stack) if threshold == "otsu" else float(threshold)
    mask = stack.data >= thr
    labels, count = ndi.label(mask, structure=CONNECTIVITY_26)
    return Labeling(labels, _components_from_labels(labels, count), thr)


def _components_from_labels(labels, count) -> list:
    components = []
    if not count:
        return components
    flat = labels.ravel()
    order = np.argsort(flat, kind="stable")
    sorted_labels = flat[order]
    starts = np.searchsorted(sorted_labels, np.arange(1, count + 1))
    ends = np.searchsorted(sorted_labels, np.arange(1, count + 1), side="right")
    _, ny, nx = labels.shape
    for lab, s, e in zip(range(1, count + 1), starts, ends):
        idx = order[s:e]
        z, rem = np.divmod(idx, ny * nx)
        y, x = np.divmod(rem, nx)
        components.append(Component(lab, np.column_stack([x, y, z])))
    return components


def grow_components(stack: VolumeStack, labeling: Labeling, low_threshold: float) -> Labeling:
    """Extend every component through connected voxels ``>= low_threshold``.

    Regions of the low mask that contain no detected component are dropped,
    so growth never creates new objects.
    """
    low_labels, count = ndi.label(stack.data >= low_threshold, structure=CONNECTIVITY_26)
    seeded = np.unique(low_labels[labeling.labels > 0])
    keep = np.zeros(count + 1, dtype=bool)
    keep[seeded] = True
    keep[0] = False
    labels, count = ndi.label(keep[low_labels], structure=CONNECTIVITY_26)
    return Labeling(labels, _components_from_labels(labels, count), labeling.threshold)


def _weights(stack: Optional[VolumeStack], comp: Component) -> np.ndarray:
    if stack is None:
        return np.ones(comp.volume)
    return np.maximum(stack.data[comp.index()], 0.0)


def volume_filter(components: Sequence[Component], min_volume: int = 5,
                  max_extent=(25, 25, 41), stack: Optional[VolumeStack] = None) -> list:
    """Drop components below ``min_volume`` voxels; crop the rest to a box of
    ``max_extent`` voxels per axis centered on their (intensity) centroid."""
    if min_volume < 1:
        raise ValueError("min_volume must be at least 1")
    half = np.asarray(max_extent, dtype=float) / 2.0
    if np.any(half < 0.5):
        raise ValueError("max_extent must be at least 1 per axis")
    kept = []
    for comp in components:
        if comp.volume < min_volume:
            continue
        w = _weights(stack, comp)
        pts = comp.voxels.astype(float)
        centroid = (w @ pts) / w.sum() if w.sum() > 0 else pts.mean(axis=0)
        inside = np.all(np.abs(pts - centroid) <= half, axis=1)
        if not inside.all():
            comp = Component(comp.label, comp.voxels[inside])
        if comp.volume:
            kept.append(comp)
    return kept


# -- PCA ------------------------------------------------------------------------

@dataclass
class DetectedPSF:
    centroid: np.ndarray
    principal_axis: np.ndarray
    eigenvalues: np.ndarray          # descending
    voxel_volume: int
    total_intensity: float
    label: int = 0

    @property
    def eigenvalue_ratio(self) -> float:
        l1, l2 = self.eigenvalues[0], self.eigenvalues[1]
        return float(l1 / l2) if l2 > 0 else float("inf")


def _fix_sign(v):
    for k in (2, 1, 0):
        if abs(v[k]) > 1e-12:
            return v if v[k] > 0 else -v
    return v


def component_pca(stack: VolumeStack, component: Component) -> DetectedPSF:
    """Intensity-weighted centroid, covariance eigenvalues and principal axis."""
    if component.volume < 4:
        raise DegenerateComponent(f"component {component.label} has only "
                                  f"{component.volume} voxels")
    w = _weights(stack, component)
    total = float(w.sum())
    if not total > 0:
        raise DegenerateComponent(f"component {component.label} has no positive intensity")
    pts = component.voxels.astype(float)
    centroid = (w @ pts) / total
    dev = pts - centroid
    cov = (dev * w[:, None]).T @ dev / total
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.maximum(evals[order], 0.0)
    axis = _fix_sign(evecs[:, order[0]])
    return DetectedPSF(centroid, axis, evals, component.volume, total, component.label)


# -- full extraction ------------------------------------------------------------

@dataclass(frozen=True)
class ExtractionParams:
    blur_sigmas: tuple = (1.0, 1.0, 1.0)
    tophat_half_sizes: tuple = (5, 5, 5)
    threshold: Union[float, str] = "otsu"
    min_volume: int = 5
    max_extent: tuple = (25, 25, 41)
    eigenvalue_ratio_filter: float = 2.2
    grow_fraction: Optional[float] = 0.25

    def __post_init__(self):
        if min(self.blur_sigmas) < 0:
            raise ValueError("blur sigmas must be nonnegative")
        if min(self.tophat_half_sizes) < 1:
            raise ValueError("top-hat half-sizes must be at least 1")
        if self.threshold != "otsu" and not np.isfinite(float(self.threshold)):
            raise ValueError("threshold must be a number or 'otsu'")
        if self.min_volume < 1 or min(self.max_extent) < 1:
            raise ValueError("min_volume and max_extent must be at least 1")
        if self.eigenvalue_ratio_filter < 0:
            raise ValueError("eigenvalue_ratio_filter must be nonnegative")
        if self.grow_fraction is not None and not 0 < self.grow_fraction <= 1:
            raise ValueError("grow_fraction must lie in (0, 1]")


@dataclass
class ExtractionResult:
    detections: list = field(default_factory=list)     # DetectedPSF passing the filter
    rejected: list = field(default_factory=list)       # DetectedPSF below the ratio filter
    components: int = 0
    skipped: int = 0
    threshold: float = float("nan")

    @property
    def observations(self) -> ObservationSet:
        if not self.detections:
            return ObservationSet.empty()
        return ObservationSet([d.centroid for d in self.detections],
                              [d.principal_axis for d in self.detections],
                              [d.eigenvalue_ratio for d in self.detections])


def extract_psfs(stack: VolumeStack, params: ExtractionParams = ExtractionParams()
                 ) -> ExtractionResult:
    clean = tophat(gaussian_blur(stack, params.blur_sigmas), params.tophat_half_sizes)
    labeling = threshold_and_label(clean, params.threshold)
    if params.grow_fraction is not None and params.grow_fraction < 1 and labeling.count:
        labeling = grow_components(clean, labeling, params.grow_fraction * labeling.threshold)
    comps = volume_filter(labeling.components, params.min_volume, params.max_extent, clean)
    result = ExtractionResult(components=labeling.count, threshold=labeling.threshold)
    for comp in comps:
        try:
            psf = component_pca(clean, comp)
        except DegenerateComponent:
            result.skipped += 1
            continue
        ratio = psf.eigenvalue_ratio
        if not np.isfinite(ratio):
            result.skipped += 1
        elif ratio > params.eigenvalue_ratio_filter:
            result.detections.append(psf)
        else:
            result.rejected.append(psf)
    return result


def extract_observations(stack: VolumeStack,
                         params: ExtractionParams = ExtractionParams()) -> ObservationSet:
    """Detected PSFs as lines: centroid, principal axis, weight ``l1/l2``."""
    return extract_psfs(stack, params).observations


# -- orientation analysis -------------------------------------------------------

@dataclass
class OrientationTable:
    distance: np.ndarray
    angle: np.ndarray
    slope: float
    intercept: float
    r_squared: float

    def to_csv(self, path) -> None:
        with Path(path).open("w") as fh:
            fh.write("dist,angle\n")
            for d, a in zip(self.distance, self.angle):
                fh.write(f"{d!r},{a!r}\n")


def orientation_vs_distance(obs: ObservationSet, center) -> OrientationTable:
    """Tilt ``arccos(n_z)`` of each (upward) axis vs lateral distance to ``center``."""
    c = as_point(center)
    if len(obs) == 0:
        return OrientationTable(np.zeros(0), np.zeros(0), float("nan"), float("nan"),
                                float("nan"))
    n = obs.directions / np.linalg.norm(obs.directions, axis=1)[:, None]
    nz = np.clip(np.abs(n[:, 2]), 0.0, 1.0)
    angle = np.arccos(nz)
    dist = np.linalg.norm(obs.anchors[:, :2] - c[None, :2], axis=1)
    slope = intercept = r2 = float("nan")
    if len(obs) >= 2 and np.ptp(dist) > 0:
        slope, intercept = np.polyfit(dist, angle, 1)
        fit = slope * dist + intercept
        ss_res = float(np.sum((angle - fit) ** 2))
        ss_tot = float(np.sum((angle - angle.mean()) ** 2))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return OrientationTable(dist, angle, float(slope), float(intercept), float(r2))


def planted_bead_scene(center, dims=(256, 256, 128), layers=(40.0, 88.0), per_side=5,
                       margin=30.0, jitter=3.0, rng: Optional[np.random.Generator] = None
                       ) -> ObservationSet:
    """Grid of beads on each layer, every bead pointing at ``center``.

    Alternate layers are offset by half a grid step so beads never stack.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    c = as_point(center)
    nx, ny, _ = dims
    gx = np.linspace(margin, nx - 1 - margin, per_side)
    gy = np.linspace(margin, ny - 1 - margin, per_side)
    step = (gx[1] - gx[0]) / 2 if per_side > 1 else 0.0
    anchors = []
    for k, z in enumerate(layers):
        off = step / 2 if k % 2 else -step / 2
        for x in gx:
            for y in gy:
                anchors.append((x + off, y + off, z))
    anchors = np.array(anchors) + np.c_[rng.uniform(-jitter, jitter, (len(anchors), 2)),
                                        np.zeros(len(anchors))]
    directions = np.array([normalize_direction(c - a) for a in anchors])
    return ObservationSet(anchors, directions)

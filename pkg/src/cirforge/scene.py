"""Specular ray tracing over axis-aligned rectangular reflectors.

Paths are enumerated with the method of images: the transmitter is mirrored
across each plane of a reflection chain, the straight line from the deepest
image to the receiver is intersected with the mirror planes in reverse order,
and the chain is kept only when every intersection lands inside its finite
rectangle.  Gains follow free-space spreading times the product of Fresnel
reflection coefficients.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 2.99792458e8
AXES = ("x", "y", "z")
# in-plane (u, v) axes for each plane orientation
_INPLANE = {0: (1, 2), 1: (0, 2), 2: (0, 1)}
_EDGE_TOL = 1e-9


class SceneError(ValueError):
    pass


@dataclass(frozen=True)
class Surface:
    """Finite rectangle lying in the plane ``<plane_axis> = plane_coord``.

    ``(min_u, max_u)`` and ``(min_v, max_v)`` bound the two remaining axes in
    x, y, z order (a ``y`` plane spans u=x, v=z).
    """

    id: int
    plane_axis: str
    plane_coord: float
    min_u: float
    max_u: float
    min_v: float
    max_v: float
    permittivity: float = 5.0

    def __post_init__(self):
        if self.plane_axis not in AXES:
            raise SceneError(f"surface {self.id}: plane_axis must be one of {AXES}")
        if not (self.min_u < self.max_u and self.min_v < self.max_v):
            raise SceneError(f"surface {self.id}: empty rectangle extents")
        if self.permittivity < 1.0:
            raise SceneError(f"surface {self.id}: permittivity {self.permittivity} < 1")

    @property
    def axis(self) -> int:
        return AXES.index(self.plane_axis)

    def contains(self, points: np.ndarray, tol: float = _EDGE_TOL) -> np.ndarray:
        """Strict in-rectangle test for points already on the plane."""
        iu, iv = _INPLANE[self.axis]
        p = np.asarray(points, dtype=float)
        u, v = p[..., iu], p[..., iv]
        return (
            (u > self.min_u + tol)
            & (u < self.max_u - tol)
            & (v > self.min_v + tol)
            & (v < self.max_v - tol)
        )


@dataclass(frozen=True)
class Box:
    min: tuple[float, float, float]
    max: tuple[float, float, float]

    def __post_init__(self):
        lo, hi = np.asarray(self.min, float), np.asarray(self.max, float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi < lo):
            raise SceneError(f"invalid box {self.min} -> {self.max}")

    @property
    def footprint_area(self) -> float:
        return (self.max[0] - self.min[0]) * (self.max[1] - self.min[1])

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        lo, hi = np.asarray(self.min), np.asarray(self.max)
        return np.all((p >= lo) & (p <= hi), axis=-1)


@dataclass(frozen=True)
class Scene:
    surfaces: tuple[Surface, ...]
    bs_position: tuple[float, float, float]
    frequency: float
    ue_region: Box
    max_reflection_order: int = 2
    occlusion_check: bool = False
    polarization: str = "perp"
    wave_speed: float = SPEED_OF_LIGHT
    # footprints (as boxes) where user positions may not be drawn
    excluded_regions: tuple[Box, ...] = ()
    # receive-array element positions for multi-antenna presets
    array_elements: tuple[tuple[float, float, float], ...] = ()

    def __post_init__(self):
        if self.frequency <= 0:
            raise SceneError("frequency must be positive")
        if self.max_reflection_order < 0:
            raise SceneError("max_reflection_order must be >= 0")
        if self.polarization not in ("perp", "par"):
            raise SceneError("polarization must be 'perp' or 'par'")
        ids = [s.id for s in self.surfaces]
        if len(set(ids)) != len(ids):
            raise SceneError("duplicate surface ids")
        bs = np.asarray(self.bs_position, float)
        for s in self.surfaces:
            if abs(bs[s.axis] - s.plane_coord) < _EDGE_TOL and s.contains(bs):
                raise SceneError(f"base station lies on surface {s.id}")

    @property
    def wavelength(self) -> float:
        return self.wave_speed / self.frequency

    @property
    def wavenumber(self) -> float:
        return 2 * np.pi * self.frequency / self.wave_speed

    def surface(self, sid: int) -> Surface:
        for s in self.surfaces:
            if s.id == sid:
                return s
        raise KeyError(sid)

    def replace(self, **changes) -> "Scene":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return Scene(**d)

    def to_dict(self) -> dict:
        return {
            "frequency_hz": self.frequency,
            "bs_position": list(self.bs_position),
            "max_reflection_order": self.max_reflection_order,
            "occlusion_check": self.occlusion_check,
            "polarization": self.polarization,
            "ue_region": {"min": list(self.ue_region.min), "max": list(self.ue_region.max)},
            "excluded_regions": [{"min": list(b.min), "max": list(b.max)} for b in self.excluded_regions],
            "array_elements": [list(p) for p in self.array_elements],
            "surfaces": [
                {k: v for k, v in asdict(s).items()} for s in self.surfaces
            ],
        }

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def scene_from_dict(d: dict) -> Scene:
    def box(b):
        return Box(tuple(map(float, b["min"])), tuple(map(float, b["max"])))

    try:
        surfaces = tuple(
            Surface(
                id=int(s.get("id", i)),
                plane_axis=s["plane_axis"],
                plane_coord=float(s["plane_coord"]),
                min_u=float(s["min_u"]),
                max_u=float(s["max_u"]),
                min_v=float(s["min_v"]),
                max_v=float(s["max_v"]),
                permittivity=float(s.get("permittivity", 5.0)),
            )
            for i, s in enumerate(d.get("surfaces", []))
        )
        return Scene(
            surfaces=surfaces,
            bs_position=tuple(map(float, d["bs_position"])),
            frequency=float(d["frequency_hz"]),
            ue_region=box(d["ue_region"]),
            max_reflection_order=int(d.get("max_reflection_order", 2)),
            occlusion_check=bool(d.get("occlusion_check", False)),
            polarization=d.get("polarization", "perp"),
            excluded_regions=tuple(box(b) for b in d.get("excluded_regions", [])),
            array_elements=tuple(tuple(map(float, p)) for p in d.get("array_elements", [])),
        )
    except KeyError as exc:
        raise SceneError(f"scene document missing field {exc}") from None


def load_scene(path: str | Path) -> Scene:
    import yaml

    with open(path) as fh:
        return scene_from_dict(yaml.safe_load(fh))


def save_scene(scene: Scene, path: str | Path) -> None:
    import yaml

    with open(path, "w") as fh:
        yaml.safe_dump(scene.to_dict(), fh, sort_keys=False)


# --------------------------------------------------------------------------
# geometry primitives


def mirror_point(p, s: Surface) -> np.ndarray:
    """Reflect ``p`` (shape ``(..., 3)``) across the infinite plane of ``s``."""
    q = np.array(p, dtype=float, copy=True)
    q[..., s.axis] = 2.0 * s.plane_coord - q[..., s.axis]
    return q


def reflection_coefficients(theta, eps) -> tuple:
    """Fresnel amplitude coefficients ``(r_perp, r_par)`` at incidence ``theta``."""
    theta = np.asarray(theta, dtype=float)
    eps = np.asarray(eps, dtype=float)
    radicand = eps - np.sin(theta) ** 2
    if np.any(radicand < 0):
        raise ValueError("eps - sin^2(theta) < 0: no real reflection coefficient")
    root = np.sqrt(radicand)
    cos = np.cos(theta)
    r_perp = (cos - root) / (cos + root)
    r_par = (eps * cos - root) / (eps * cos + root)
    if r_perp.ndim == 0:
        return float(r_perp), float(r_par)
    return r_perp, r_par


# --------------------------------------------------------------------------
# path enumeration


@dataclass
class PathComponent:
    order: int
    surface_ids: tuple[int, ...]
    image_point: np.ndarray
    reflection_points: list[np.ndarray]
    length_m: float
    delay_s: float
    incidence_angles: tuple[float, ...] = ()
    gain: complex = 0j
    rx: np.ndarray = field(default=None, repr=False)


def _surface_chains(scene: Scene, max_order: int):
    yield ()
    for order in range(1, max_order + 1):
        for chain in itertools.product(scene.surfaces, repeat=order):
            # consecutive bounces on one plane are geometrically impossible
            if any(
                a.axis == b.axis and a.plane_coord == b.plane_coord
                for a, b in zip(chain, chain[1:])
            ):
                continue
            yield chain


def _segment_hits(s: Surface, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """True where the open segment p0->p1 passes through the rectangle ``s``."""
    k = s.axis
    d0 = p0[..., k] - s.plane_coord
    d1 = p1[..., k] - s.plane_coord
    crossing = d0 * d1 < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(crossing, d0 / (d0 - d1), 0.0)
    hit_pt = p0 + t[..., None] * (p1 - p0)
    return crossing & s.contains(hit_pt)


@dataclass
class TraceBatch:
    """Traced chains for many transmitters at once (one entry per chain).

    ``valid[c]`` flags, per transmitter, whether chain ``c`` is a physical
    path; ``length``, ``gain`` and ``angles`` are meaningful only where valid.
    """

    chains: list[tuple[int, ...]]
    valid: list[np.ndarray]
    length: list[np.ndarray]
    gain: list[np.ndarray]
    images: list[np.ndarray]
    points: list[np.ndarray]
    angles: list[np.ndarray]


def trace_batch(scene: Scene, tx, rx=None, polarization: str | None = None) -> TraceBatch:
    """Vectorised tracer over transmitter positions ``tx`` of shape ``(n, 3)``."""
    tx = np.atleast_2d(np.asarray(tx, dtype=float))
    rx = np.asarray(scene.bs_position if rx is None else rx, dtype=float)
    pol = polarization or scene.polarization
    lam = scene.wavelength
    k = scene.wavenumber
    n = tx.shape[0]
    out = TraceBatch([], [], [], [], [], [], [])

    for chain in _surface_chains(scene, scene.max_reflection_order):
        images = [tx]
        for s in chain:
            images.append(mirror_point(images[-1], s))
        target = np.broadcast_to(rx, (n, 3))
        valid = np.ones(n, dtype=bool)
        refl = [None] * len(chain)
        coef = np.ones(n)
        angles = np.zeros((n, len(chain)))
        for i in range(len(chain) - 1, -1, -1):
            s = chain[i]
            img = images[i + 1]
            d_img = img[:, s.axis] - s.plane_coord
            d_tgt = target[:, s.axis] - s.plane_coord
            crossing = d_img * d_tgt < 0
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(crossing, d_img / (d_img - d_tgt), 0.5)
            pt = img + t[:, None] * (target - img)
            pt[:, s.axis] = s.plane_coord
            valid &= crossing & s.contains(pt)
            outgoing = target - pt
            dist = np.linalg.norm(outgoing, axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                cos_t = np.clip(np.abs(outgoing[:, s.axis]) / dist, 0.0, 1.0)
            theta = np.arccos(np.where(valid, cos_t, 1.0))
            angles[:, i] = theta
            r_perp, r_par = reflection_coefficients(theta, s.permittivity)
            coef = coef * (r_perp if pol == "perp" else r_par)
            refl[i] = pt
            target = pt
        if not valid.any():
            continue
        length = np.linalg.norm(images[-1] - rx, axis=1)
        if scene.occlusion_check:
            nodes = [tx, *refl, np.broadcast_to(rx, (n, 3))]
            for j in range(len(nodes) - 1):
                ends = {chain[j - 1].id} if j > 0 else set()
                if j < len(chain):
                    ends.add(chain[j].id)
                for s in scene.surfaces:
                    if s.id in ends:
                        continue
                    valid &= ~_segment_hits(s, nodes[j], nodes[j + 1])
            if not valid.any():
                continue
        with np.errstate(divide="ignore"):
            amp = lam / (4 * np.pi * length) * coef
        gain = amp * np.exp(-1j * k * length)
        out.chains.append(tuple(s.id for s in chain))
        out.valid.append(valid)
        out.length.append(length)
        out.gain.append(gain)
        out.images.append(images[-1])
        out.points.append(np.stack(refl, axis=1) if refl else np.zeros((n, 0, 3)))
        out.angles.append(angles)
    return out


def trace_paths(scene: Scene, tx, rx=None, polarization: str | None = None) -> list[PathComponent]:
    """All valid LOS and specular paths from ``tx`` to the receiver.

    ``rx`` defaults to the scene's base station.  Gains are filled with the
    scene polarization (see :func:`path_gain` to recompute).
    """
    tx = np.asarray(tx, dtype=float)
    rx_arr = np.asarray(scene.bs_position if rx is None else rx, dtype=float)
    if np.allclose(tx, rx_arr, atol=0.0):
        raise SceneError("transmitter coincides with receiver")
    batch = trace_batch(scene, tx[None, :], rx_arr, polarization)
    paths = []
    for c, chain in enumerate(batch.chains):
        if not batch.valid[c][0]:
            continue
        length = float(batch.length[c][0])
        paths.append(
            PathComponent(
                order=len(chain),
                surface_ids=chain,
                image_point=batch.images[c][0].copy(),
                reflection_points=[p.copy() for p in batch.points[c][0]],
                length_m=length,
                delay_s=length / scene.wave_speed,
                incidence_angles=tuple(float(a) for a in batch.angles[c][0]),
                gain=complex(batch.gain[c][0]),
                rx=rx_arr.copy(),
            )
        )
    return paths


def path_gain(path: PathComponent, scene: Scene, polarization: str = "perp") -> complex:
    """Complex gain ``a * exp(-j 2 pi f d / v)`` of one traced path."""
    d = path.length_m
    if d <= 0:
        raise ValueError("path length must be positive")
    a = scene.wavelength / (4 * np.pi * d)
    for sid, theta in zip(path.surface_ids, path.incidence_angles):
        r_perp, r_par = reflection_coefficients(theta, scene.surface(sid).permittivity)
        a *= r_perp if polarization == "perp" else r_par
    return complex(a * np.exp(-2j * np.pi * scene.frequency * d / scene.wave_speed))


# --------------------------------------------------------------------------
# CIR synthesis


@dataclass(frozen=True)
class DelayWindow:
    start_s: float
    end_s: float
    dt_s: float = 1e-9

    def __post_init__(self):
        if self.dt_s <= 0:
            raise ValueError("dt_s must be positive")
        if self.end_s < self.start_s:
            raise ValueError("window end precedes start")

    @property
    def n_bins(self) -> int:
        return int(np.floor((self.end_s - self.start_s) / self.dt_s + 1e-9)) + 1

    @property
    def q(self) -> int:
        return 2 * self.n_bins


PAPER_WINDOW = DelayWindow(220e-9, 310e-9, 1e-9)


def auto_window(scene: Scene, dt_s: float = 1e-9, lead_s: float = 5e-9, span_s: float = 90e-9) -> DelayWindow:
    """Window starting ``lead_s`` before the shortest possible LOS delay.

    The shortest delay is the BS distance to the nearest point of the user
    region; the start is snapped down to the ``dt_s`` grid.
    """
    lo, hi = np.asarray(scene.ue_region.min), np.asarray(scene.ue_region.max)
    receivers = [np.asarray(scene.bs_position)] + [np.asarray(p) for p in scene.array_elements]
    dmin = min(np.linalg.norm(np.clip(r, lo, hi) - r) for r in receivers)
    start = np.floor((dmin / scene.wave_speed - lead_s) / dt_s) * dt_s
    return DelayWindow(float(start), float(start + span_s), dt_s)


@dataclass
class CirVector:
    values: np.ndarray
    window_start_s: float
    window_end_s: float
    dt_s: float

    @property
    def q(self) -> int:
        return self.values.shape[-1]

    def complex(self) -> np.ndarray:
        return self.values[..., 0::2] + 1j * self.values[..., 1::2]


def bin_index(delay_s, window: DelayWindow):
    return np.floor((np.asarray(delay_s) - window.start_s) / window.dt_s + 0.5).astype(np.int64)


def _in_window(delay_s, window: DelayWindow):
    idx = bin_index(delay_s, window)
    return idx, (idx >= 0) & (idx < window.n_bins)


def synthesize_cir(paths, window_start_s: float, window_end_s: float, dt_s: float) -> CirVector:
    """Sample paths into an interleaved real/imag CIR vector."""
    window = DelayWindow(window_start_s, window_end_s, dt_s)
    bins = np.zeros(window.n_bins, dtype=complex)
    hits = np.zeros(window.n_bins, dtype=int)
    for p in paths:
        idx, ok = _in_window(p.delay_s, window)
        if ok:
            bins[idx] += p.gain
            hits[idx] += 1
    if np.any(hits > 1):
        logger.warning("%d delay bins hold more than one path; gains summed", int(np.sum(hits > 1)))
    return CirVector(_interleave(bins), window.start_s, window.end_s, window.dt_s)


def _interleave(bins: np.ndarray) -> np.ndarray:
    out = np.empty(bins.shape[:-1] + (2 * bins.shape[-1],))
    out[..., 0::2] = bins.real
    out[..., 1::2] = bins.imag
    return out


def cir_batch(scene: Scene, tx, window: DelayWindow, rx=None) -> np.ndarray:
    """CIR vectors of shape ``(n, q)`` for many transmitter positions."""
    tx = np.atleast_2d(np.asarray(tx, dtype=float))
    n = tx.shape[0]
    batch = trace_batch(scene, tx, rx)
    bins = np.zeros((n, window.n_bins), dtype=complex)
    collisions = 0
    hits = np.zeros((n, window.n_bins), dtype=np.int32)
    rows = np.arange(n)
    for c in range(len(batch.chains)):
        idx, ok = _in_window(batch.length[c] / scene.wave_speed, window)
        ok &= batch.valid[c]
        r, i = rows[ok], idx[ok]
        np.add.at(bins, (r, i), batch.gain[c][ok])
        np.add.at(hits, (r, i), 1)
    collisions = int(np.sum(hits > 1))
    if collisions:
        logger.debug("%d (position, bin) cells hold more than one path", collisions)
    return _interleave(bins)

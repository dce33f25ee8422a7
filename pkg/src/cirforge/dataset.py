"""Position -> CIR datasets: sampling, labelling, scaling, noise and storage."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .scene import Box, DelayWindow, Scene, auto_window, cir_batch

logger = logging.getLogger(__name__)

# paper densities, interpreted as sample counts per reference area
DENSITY_PRESETS = {"40": 40.0, "60": 60.0, "100": 100.0}
DEFAULT_REFERENCE_AREA = 45.0


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    pass


@dataclass
class DatasetMeta:
    scene_hash: str
    density: float
    seed: int
    q: int
    scale_factor: float = 1.0
    split_fraction: float = 0.8
    window_start_s: float = 0.0
    window_end_s: float = 0.0
    dt_s: float = 1e-9
    reference_area: float | None = None
    frequency: float = 0.0
    noise: dict = field(default_factory=dict)
    n_antennas: int = 1  # >1: cir rows are antenna-major vectorised matrices
    # scene facts a model needs at build time (BS, frequency, region bounds)
    context: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.scale_factor > 0:
            raise DatasetError("scale_factor must be positive")
        if not 0 < self.split_fraction < 1:
            raise DatasetError("split_fraction must lie in (0, 1)")

    @property
    def window(self) -> DelayWindow:
        return DelayWindow(self.window_start_s, self.window_end_s, self.dt_s)


@dataclass
class SampleRecord:
    position: np.ndarray
    cir: np.ndarray
    cir_noisy: np.ndarray | None = None
    position_noisy: np.ndarray | None = None


@dataclass
class Dataset:
    """Column-oriented store of :class:`SampleRecord` rows."""

    positions: np.ndarray  # (n, 3)
    cir: np.ndarray  # (n, q) clean labels
    meta: DatasetMeta
    cir_noisy: np.ndarray | None = None
    positions_noisy: np.ndarray | None = None
    is_test: np.ndarray | None = None  # (n,) bool once split

    def __len__(self):
        return len(self.positions)

    @property
    def q(self) -> int:
        return self.cir.shape[1]

    def record(self, i: int) -> SampleRecord:
        return SampleRecord(
            self.positions[i],
            self.cir[i],
            None if self.cir_noisy is None else self.cir_noisy[i],
            None if self.positions_noisy is None else self.positions_noisy[i],
        )

    def records(self):
        return [self.record(i) for i in range(len(self))]

    def subset(self, idx) -> "Dataset":
        take = lambda a: None if a is None else a[idx]  # noqa: E731
        return Dataset(self.positions[idx], self.cir[idx], self.meta, take(self.cir_noisy),
                       take(self.positions_noisy), take(self.is_test))

    # training views: noisy measurements when present
    @property
    def inputs(self) -> np.ndarray:
        return self.positions if self.positions_noisy is None else self.positions_noisy

    @property
    def labels(self) -> np.ndarray:
        return self.cir if self.cir_noisy is None else self.cir_noisy

    def train(self) -> "Dataset":
        return self.subset(~self._split_mask())

    def test(self) -> "Dataset":
        return self.subset(self._split_mask())

    def _split_mask(self):
        if self.is_test is None:
            raise DatasetError("dataset has not been split")
        return self.is_test

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in (self.positions, self.cir):
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# sampling


def _rng(seed, *stream):
    return np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *stream]))


def sample_positions(region: Box, density: float, seed: int, excluded=(), area: float | None = None) -> np.ndarray:
    """Homogeneous Poisson point process over the region footprint at fixed height.

    The count is Poisson with mean ``density * area`` (``area`` defaults to
    the footprint area).  Points inside ``excluded`` boxes are redrawn.
    """
    if region.footprint_area <= 0:
        raise DatasetError("sampling region has zero footprint area")
    if density <= 0:
        raise DatasetError("density must be positive")
    rng = _rng(seed, 1)
    mean = density * (region.footprint_area if area is None else area)
    n = int(rng.poisson(mean))
    lo = np.array(region.min, float)
    hi = np.array(region.max, float)
    out = np.empty((0, 3))
    for _ in range(10_000):
        if len(out) >= n:
            break
        need = n - len(out)
        xy = lo[:2] + (hi[:2] - lo[:2]) * rng.random((need, 2))
        pts = np.column_stack([xy, np.full(need, lo[2])])
        keep = np.ones(need, bool)
        for box in excluded:
            keep &= ~_in_footprint(box, pts)
        out = np.vstack([out, pts[keep]])
    else:
        raise DatasetError("excluded regions cover the sampling footprint")
    return out[:n]


def _in_footprint(box: Box, pts):
    return (
        (pts[:, 0] >= box.min[0]) & (pts[:, 0] <= box.max[0]) & (pts[:, 1] >= box.min[1]) & (pts[:, 1] <= box.max[1])
    )


def resolve_density(density) -> float:
    if isinstance(density, str):
        if density in DENSITY_PRESETS:
            return DENSITY_PRESETS[density]
        return float(density)
    return float(density)


def generate_dataset(
    scene: Scene,
    density,
    seed: int,
    window: DelayWindow | None = None,
    reference_area: float | None = DEFAULT_REFERENCE_AREA,
    split_fraction: float = 0.8,
    require_paths: bool = False,
    rx=None,
) -> Dataset:
    """Sample positions and label each with its ray-traced CIR.

    ``density`` may be a preset name ("40", "60", "100") or a number; the
    expected count is ``density * reference_area`` (or times the region
    footprint when ``reference_area`` is None).  With ``require_paths`` the
    positions without any in-window path are dropped.
    """
    dens = resolve_density(density)
    window = window or auto_window(scene)
    pos = sample_positions(scene.ue_region, dens, seed, scene.excluded_regions, reference_area)
    cir = cir_batch(scene, pos, window, rx) if len(pos) else np.zeros((0, window.q))
    if require_paths and len(pos):
        keep = np.any(cir != 0, axis=1)
        if not keep.all():
            logger.info("dropping %d positions with no in-window path", int((~keep).sum()))
        pos, cir = pos[keep], cir[keep]
    meta = DatasetMeta(
        scene_hash=scene.digest(),
        density=dens,
        seed=int(seed),
        q=window.q,
        split_fraction=split_fraction,
        window_start_s=window.start_s,
        window_end_s=window.end_s,
        dt_s=window.dt_s,
        reference_area=reference_area,
        frequency=scene.frequency,
        context={
            "bs_position": list(scene.bs_position),
            "frequency": scene.frequency,
            "region_min": list(scene.ue_region.min),
            "region_max": list(scene.ue_region.max),
            "wave_speed": scene.wave_speed,
        },
    )
    return Dataset(pos, cir, meta)


def generate_mimo_dataset(scene: Scene, density, seed: int, window: DelayWindow | None = None,
                          reference_area: float | None = DEFAULT_REFERENCE_AREA, split_fraction: float = 0.8) -> Dataset:
    """Like :func:`generate_dataset` but labelled at every array element.

    Row ``i`` holds the ``n_antennas x q`` CIR matrix flattened row-major,
    so antenna ``k`` occupies columns ``k*q .. (k+1)*q - 1``.
    """
    if not scene.array_elements:
        raise DatasetError("scene has no array_elements")
    window = window or auto_window(scene)
    base = generate_dataset(scene, density, seed, window, reference_area, split_fraction)
    cols = [cir_batch(scene, base.positions, window, rx=e) for e in scene.array_elements]
    cir = np.hstack(cols) if len(base) else np.zeros((0, window.q * len(cols)))
    meta = replace(base.meta, q=cir.shape[1], n_antennas=len(cols))
    return Dataset(base.positions, cir, meta)


def antenna_columns(k, q: int) -> np.ndarray:
    """Column indices of antennas ``k`` (iterable) in a vectorised MIMO row."""
    return np.concatenate([np.arange(a * q, (a + 1) * q) for a in k])


# --------------------------------------------------------------------------
# scaling


def scale_fit_apply(ds: Dataset) -> tuple[Dataset, float]:
    """Scale every CIR entry by ``1 / max |clean value|``; returns the factor.

    The factor multiplies into ``meta.scale_factor`` so
    :func:`scale_invert` always recovers original units.
    """
    if len(ds) == 0:
        raise DatasetError("cannot fit scaling on an empty dataset")
    peak = float(np.max(np.abs(ds.cir)))
    if peak == 0:
        raise DatasetError("all CIR values are zero; scaling undefined")
    factor = 1.0 / peak
    out = replace(
        ds,
        cir=ds.cir * factor,
        cir_noisy=None if ds.cir_noisy is None else ds.cir_noisy * factor,
        meta=replace(ds.meta, scale_factor=ds.meta.scale_factor * factor),
    )
    return out, factor


def scale_invert(values, scale_factor: float):
    return np.asarray(values) / scale_factor


# --------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class NoiseSpec:
    """Measurement error model.

    ``cir_gaussian`` uses ``target_nmse``; ``cir_alpha_stable`` uses ``alpha``
    and ``scale`` (dispersion, relative to the RMS clean CIR entry);
    ``position_gaussian`` uses ``sigma_m``.
    """

    kind: str
    target_nmse: float | None = None
    alpha: float = 1.5
    scale: float = 0.1
    sigma_m: float = 0.03

    def __post_init__(self):
        kinds = ("cir_gaussian", "cir_alpha_stable", "position_gaussian")
        if self.kind not in kinds:
            raise DatasetError(f"noise kind must be one of {kinds}")
        if self.kind == "cir_alpha_stable" and self.target_nmse is not None:
            raise DatasetError("alpha-stable noise has no finite variance; give 'scale', not 'target_nmse'")
        if self.kind == "cir_gaussian" and (self.target_nmse is None or self.target_nmse < 0):
            raise DatasetError("cir_gaussian noise needs target_nmse >= 0")
        if not 0 < self.alpha <= 2:
            raise DatasetError("alpha must lie in (0, 2]")
        if self.scale <= 0 or self.sigma_m < 0:
            raise DatasetError("noise scale must be positive and sigma_m non-negative")

    @classmethod
    def from_config(cls, cfg: dict) -> "NoiseSpec":
        """Build from ``noise.*`` keys (flat ``{"noise.kind": ...}`` or nested)."""
        if "noise" in cfg and isinstance(cfg["noise"], dict):
            cfg = cfg["noise"]
        cfg = {k.split(".", 1)[-1]: v for k, v in cfg.items()}
        return cls(
            kind=cfg["kind"],
            target_nmse=None if cfg.get("target_nmse") is None else float(cfg["target_nmse"]),
            alpha=float(cfg.get("alpha", 1.5)),
            scale=float(cfg.get("scale", 0.1)),
            sigma_m=float(cfg.get("sigma_m", 0.03)),
        )


def sample_alpha_stable(alpha: float, scale: float, rng, size=None):
    """Symmetric alpha-stable draws by the Chambers-Mallows-Stuck transform.

    ``alpha = 2`` gives a Gaussian of variance ``2 scale^2``; ``alpha = 1`` a
    Cauchy of scale ``scale``.
    """
    if not 0 < alpha <= 2:
        raise ValueError("alpha must lie in (0, 2]")
    if scale <= 0:
        raise ValueError("scale must be positive")
    v = rng.uniform(-math.pi / 2, math.pi / 2, size)
    w = rng.exponential(1.0, size)
    if alpha == 1.0:
        x = np.tan(v)
    else:
        x = (
            np.sin(alpha * v)
            / np.cos(v) ** (1.0 / alpha)
            * (np.cos((1.0 - alpha) * v) / w) ** ((1.0 - alpha) / alpha)
        )
    return scale * x


def empirical_nmse(noise, clean) -> float:
    return float(np.sum(noise**2) / np.sum(clean**2))


def inject_noise(ds: Dataset, spec: NoiseSpec, rng) -> Dataset:
    """Return a copy carrying noisy training measurements; clean labels stay."""
    rng = np.random.default_rng(rng)
    info = asdict(spec)
    if spec.kind == "position_gaussian":
        noisy = ds.positions + rng.normal(0.0, spec.sigma_m, ds.positions.shape)
        info["realized_rms_m"] = float(np.sqrt(np.mean((noisy - ds.positions) ** 2)))
        return replace(ds, positions_noisy=noisy, meta=replace(ds.meta, noise=info))
    energy = float(np.sum(ds.cir**2))
    if energy == 0:
        raise DatasetError("cannot calibrate CIR noise on all-zero labels")
    if spec.kind == "cir_gaussian":
        if spec.target_nmse == 0:
            return replace(ds, meta=replace(ds.meta, noise=info))
        sigma = math.sqrt(spec.target_nmse * energy / ds.cir.size)
        noise = rng.normal(0.0, sigma, ds.cir.shape)
    else:
        rms = math.sqrt(energy / ds.cir.size)
        noise = sample_alpha_stable(spec.alpha, spec.scale * rms, rng, ds.cir.shape)
    info["realized_nmse"] = empirical_nmse(noise, ds.cir)
    return replace(ds, cir_noisy=ds.cir + noise, meta=replace(ds.meta, noise=info))


# --------------------------------------------------------------------------
# split and storage


def split(ds: Dataset, fraction: float | None = None, seed: int | None = None) -> Dataset:
    """Shuffle-split by seed; ``n_train = max(1, floor(n * fraction))``."""
    fraction = ds.meta.split_fraction if fraction is None else fraction
    if not 0 < fraction < 1:
        raise DatasetError("split fraction must lie in (0, 1)")
    n = len(ds)
    seed = ds.meta.seed if seed is None else seed
    perm = _rng(seed, 2).permutation(n)
    n_train = min(n, max(1, math.floor(n * fraction)))
    is_test = np.ones(n, bool)
    is_test[perm[:n_train]] = False
    return replace(ds, is_test=is_test, meta=replace(ds.meta, split_fraction=fraction))


MAGIC = b"CIRDS\x00\x00\x01"
VERSION = 1
# magic, version, q, count, seed, scale_factor, flags, meta_len
_HEADER = struct.Struct("<8sIIQqdIQ")
_F_CIR_NOISY, _F_POS_NOISY, _F_SPLIT = 1, 2, 4


def _row_width(q, flags):
    w = 3 + q
    if flags & _F_POS_NOISY:
        w += 3
    if flags & _F_CIR_NOISY:
        w += q
    if flags & _F_SPLIT:
        w += 1
    return w


def serialize(ds: Dataset, path) -> None:
    """Write the ``.cirds`` binary: fixed header, JSON metadata, f64 rows."""
    flags = 0
    cols = [ds.positions]
    if ds.positions_noisy is not None:
        flags |= _F_POS_NOISY
        cols.append(ds.positions_noisy)
    cols.append(ds.cir)
    if ds.cir_noisy is not None:
        flags |= _F_CIR_NOISY
        cols.append(ds.cir_noisy)
    if ds.is_test is not None:
        flags |= _F_SPLIT
        cols.append(ds.is_test.astype(float)[:, None])
    rows = np.hstack(cols) if len(ds) else np.zeros((0, _row_width(ds.q, flags)))
    meta = json.dumps(asdict(ds.meta), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, ds.q, len(ds), ds.meta.seed, ds.meta.scale_factor, flags, len(meta)))
        fh.write(meta)
        fh.write(np.ascontiguousarray(rows, dtype="<f8").tobytes())


def deserialize(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated header ({len(raw)} < {_HEADER.size} bytes at offset 0)")
    magic, version, q, count, seed, scale, flags, mlen = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: bad magic {magic!r} at offset 0")
    if version != VERSION:
        raise DatasetFormatError(f"{path}: unsupported version {version} at offset 8")
    off = _HEADER.size
    if len(raw) < off + mlen:
        raise DatasetFormatError(f"{path}: metadata block truncated at offset {len(raw)} (expected end {off + mlen})")
    try:
        meta = DatasetMeta(**json.loads(raw[off : off + mlen]))
    except (ValueError, TypeError) as exc:
        raise DatasetFormatError(f"{path}: unreadable metadata at offset {off}: {exc}") from None
    off += mlen
    width = _row_width(q, flags)
    need = count * width * 8
    if len(raw) - off != need:
        raise DatasetFormatError(
            f"{path}: record block is {len(raw) - off} bytes from offset {off}, expected {need} "
            f"({count} rows x {width} f64)"
        )
    rows = np.frombuffer(raw, dtype="<f8", count=count * width, offset=off).reshape(count, width).copy()
    c = 0

    def take(k):
        nonlocal c
        out = rows[:, c : c + k]
        c += k
        return out

    pos = take(3)
    pos_noisy = take(3) if flags & _F_POS_NOISY else None
    cir = take(q)
    cir_noisy = take(q) if flags & _F_CIR_NOISY else None
    is_test = take(1)[:, 0] > 0.5 if flags & _F_SPLIT else None
    if meta.seed != seed or meta.q != q:
        raise DatasetFormatError(f"{path}: header and metadata disagree (seed/q) at offset {_HEADER.size}")
    meta.scale_factor = scale
    return Dataset(pos, cir, meta, cir_noisy, pos_noisy, is_test)


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def export_csv(ds: Dataset, path) -> None:
    """``x,y,z,re_1,im_1,...`` with round-trip exact float text."""
    nb = ds.q // 2
    header = ["x", "y", "z"] + [f"{p}_{i}" for i in range(1, nb + 1) for p in ("re", "im")]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for p, c in zip(ds.positions, ds.cir):
            w.writerow([repr(float(v)) for v in p] + [repr(float(v)) for v in c])


def import_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Read back ``(positions, cir)`` from :func:`export_csv` output."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:3] != ["x", "y", "z"]:
            raise DatasetFormatError(f"{path}: unexpected CSV header {header[:3]}")
        data = np.array([[float(v) for v in row] for row in r]).reshape(-1, len(header))
    return data[:, :3], data[:, 3:]


def arrays_checksum(positions, cir) -> str:
    h = hashlib.sha256()
    for a in (positions, cir):
        h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return h.hexdigest()

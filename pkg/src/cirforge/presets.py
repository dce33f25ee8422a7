"""Bundled scene presets.

The street canyon: two rows of buildings along x with a 30 m street between
them (y from 15 to 45) and 16 m gaps between the buildings of each row.
Buildings 1 and 2 (55 x 10 x 18 m) form the south row, buildings 4 and 3
(55 x 16 x 18 m) the north row, and the base station sits above building 4.
Only faces that can be seen from the street and the gaps are modelled, so
paths never reflect off the far side of a building.  A ground plane is
included; it keeps at least one specular path at every user position.
"""

from __future__ import annotations

from .scene import Box, Scene, Surface

CONCRETE_EPS = 5.24
GROUND_EPS = 15.0
BUILDING_HEIGHT = 18.0
UE_HEIGHT = 1.6
PAPER_BS = (45.0, 48.0, 37.0)
PAPER_ARRAY_ORIGIN = (45.0, 18.0, 37.0)

# (x0, x1, y0, y1) footprints
_BUILDINGS = {
    1: (0.0, 55.0, 5.0, 15.0),
    2: (71.0, 126.0, 5.0, 15.0),
    3: (71.0, 126.0, 45.0, 61.0),
    4: (0.0, 55.0, 45.0, 61.0),
}
_BUILDING5 = (30.0, 90.0, 30.0, 35.0, 26.0)


def _street_walls(h=BUILDING_HEIGHT, eps=CONCRETE_EPS):
    b1, b2, b3, b4 = (_BUILDINGS[i] for i in (1, 2, 3, 4))
    walls = [
        # street-facing walls
        ("y", b1[3], b1[0], b1[1]),
        ("y", b2[3], b2[0], b2[1]),
        ("y", b3[2], b3[0], b3[1]),
        ("y", b4[2], b4[0], b4[1]),
        # walls facing the gaps between buildings of a row
        ("x", b1[1], b1[2], b1[3]),
        ("x", b2[0], b2[2], b2[3]),
        ("x", b3[0], b3[2], b3[3]),
        ("x", b4[1], b4[2], b4[3]),
    ]
    return [
        Surface(id=i + 1, plane_axis=ax, plane_coord=c, min_u=u0, max_u=u1, min_v=0.0, max_v=h, permittivity=eps)
        for i, (ax, c, u0, u1) in enumerate(walls)
    ]


def _ground(sid: int):
    return Surface(id=sid, plane_axis="z", plane_coord=0.0, min_u=-20.0, max_u=150.0,
                   min_v=-10.0, max_v=80.0, permittivity=GROUND_EPS)


def paper_scene(frequency=3e9, ue_region: Box | None = None, **kw) -> Scene:
    surfaces = _street_walls() + [_ground(9)]
    region = ue_region or Box((20.0, 15.0, UE_HEIGHT), (120.0, 30.0, UE_HEIGHT))
    return Scene(surfaces=tuple(surfaces), bs_position=PAPER_BS, frequency=frequency,
                 ue_region=region, **kw)


def paper_scene_nlos(frequency=3e9, ue_region: Box | None = None, **kw) -> Scene:
    """Street scene plus building 5 (60 x 5 x 26 m) inside the user strip.

    Occlusion is switched on so the new building shadows part of the street
    and produces positions reached only by reflections.  Its footprint is
    excluded from user sampling.
    """
    x0, x1, y0, y1, h = _BUILDING5
    surfaces = _street_walls() + [_ground(9)]
    extra = [
        Surface(id=10, plane_axis="y", plane_coord=y0, min_u=x0, max_u=x1, min_v=0.0, max_v=h, permittivity=CONCRETE_EPS),
        Surface(id=11, plane_axis="y", plane_coord=y1, min_u=x0, max_u=x1, min_v=0.0, max_v=h, permittivity=CONCRETE_EPS),
        Surface(id=12, plane_axis="x", plane_coord=x0, min_u=y0, max_u=y1, min_v=0.0, max_v=h, permittivity=CONCRETE_EPS),
        Surface(id=13, plane_axis="x", plane_coord=x1, min_u=y0, max_u=y1, min_v=0.0, max_v=h, permittivity=CONCRETE_EPS),
        Surface(id=14, plane_axis="z", plane_coord=h, min_u=x0, max_u=x1, min_v=y0, max_v=y1, permittivity=CONCRETE_EPS),
    ]
    region = ue_region or Box((20.0, 15.0, UE_HEIGHT), (120.0, 35.0, UE_HEIGHT))
    excluded = (Box((x0, y0, 0.0), (x1, y1, h)),)
    kw.setdefault("occlusion_check", True)
    return Scene(surfaces=tuple(surfaces + extra), bs_position=PAPER_BS, frequency=frequency,
                 ue_region=region, excluded_regions=excluded, **kw)


def planar_array(origin=PAPER_ARRAY_ORIGIN, n=8, spacing: float = 0.05):
    """``n x n`` element positions in a plane parallel to x-y, row-major."""
    ox, oy, oz = origin
    return tuple((ox + i * spacing, oy + j * spacing, oz) for i in range(n) for j in range(n))


def paper_scene_mimo(frequency=3e9, origin=PAPER_ARRAY_ORIGIN, ue_region: Box | None = None, **kw) -> Scene:
    """8 x 8 half-wavelength planar array replacing the single BS antenna."""
    base = paper_scene(frequency, ue_region, **kw)
    lam = base.wavelength
    elements = planar_array(origin, 8, lam / 2)
    return base.replace(bs_position=tuple(elements[0]), array_elements=elements)


def free_space_scene(frequency=3e9, bs=PAPER_BS, ue_region: Box | None = None, **kw) -> Scene:
    region = ue_region or Box((20.0, 15.0, UE_HEIGHT), (120.0, 30.0, UE_HEIGHT))
    return Scene(surfaces=(), bs_position=bs, frequency=frequency, ue_region=region, **kw)


SCENES = {
    "paper_scene": paper_scene,
    "paper_scene_nlos": paper_scene_nlos,
    "paper_scene_mimo": paper_scene_mimo,
    "free_space": free_space_scene,
}


def desk_region(x0=40.0, y0=15.0, width=30.0, depth=15.0) -> Box:
    return Box((x0, y0, UE_HEIGHT), (x0 + width, y0 + depth, UE_HEIGHT))


def get_scene(name: str, **kw) -> Scene:
    try:
        return SCENES[name](**kw)
    except KeyError:
        raise KeyError(f"unknown scene preset {name!r}; choose from {sorted(SCENES)}") from None

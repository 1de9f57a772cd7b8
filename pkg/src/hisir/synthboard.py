"""Procedural circuit-board imagery, defect injection and training-time corruption.

A board *design* (component, pad and trace layout) is a pure function of
``BoardSpec.seed``.  Individual boards of that design are produced per
``instance``: each instance gets its own +-1 px placement jitter, a mild
illumination change and faint sensor noise, so a set of normal boards behaves
like repeated captures of one assembly line product.

All rendered images are quantised to the 8-bit grid so that writing them to
PPM and reading them back is lossless.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DEFECT_KINDS",
    "DEFECT_WEIGHTS",
    "BoardSpec",
    "Component",
    "PadPair",
    "Layout",
    "Board",
    "DefectAnnotation",
    "AugmentConfig",
    "AugmentedPair",
    "SiteNotFoundError",
    "generate_board",
    "render_layout",
    "inject_defect",
    "inject_defects",
    "sample_defect_kinds",
    "augment_patch",
    "mask_bbox",
]

# Frequencies of the five defect classes on the reference production line.
DEFECT_KINDS = ("missing_component", "solder_bridge", "foreign_object", "extra_component", "misalignment")
DEFECT_WEIGHTS = (0.570, 0.279, 0.111, 0.030, 0.010)

LATTICE = 8
LAND_EXT = 3  # land length visible beyond each end of a component body

SUBSTRATE = (0.07, 0.29, 0.15)
TRACE = (0.60, 0.47, 0.22)
SOLDER = (0.86, 0.86, 0.82)
OUTLINE = (0.82, 0.82, 0.78)
BODY_COLORS = (
    (0.10, 0.10, 0.11),  # moulded IC
    (0.70, 0.58, 0.40),  # ceramic capacitor
    (0.24, 0.24, 0.28),  # thick-film resistor
    (0.18, 0.22, 0.45),  # tantalum
)
DEBRIS_COLORS = ((0.85, 0.20, 0.75), (0.20, 0.80, 0.90), (0.95, 0.35, 0.10), (0.97, 0.97, 0.97))


class SiteNotFoundError(RuntimeError):
    """No location on the board admits the requested defect."""


@dataclass(frozen=True)
class BoardSpec:
    seed: int = 0
    height: int = 512
    width: int = 512
    component_count: int = 24
    trace_count: int = 16
    pad_count: int = 24

    def __post_init__(self) -> None:
        if self.height < 256 or self.width < 256:
            raise ValueError(f"board must be at least 256x256, got {self.height}x{self.width}")
        if min(self.component_count, self.trace_count, self.pad_count) < 1:
            raise ValueError("component, trace and pad counts must all be >= 1")


@dataclass(frozen=True)
class Component:
    row: int
    col: int
    height: int
    width: int
    color: tuple[float, float, float]
    horizontal: bool  # lands sit at the left/right ends if True, top/bottom otherwise
    has_lands: bool = True
    body_dr: int = 0  # body displacement relative to its lands
    body_dc: int = 0
    has_body: bool = True  # False: the part is missing and only its bare lands remain

    def body_rect(self) -> tuple[int, int, int, int]:
        return self.row + self.body_dr, self.col + self.body_dc, self.height, self.width

    def land_rects(self) -> list[tuple[int, int, int, int]]:
        if not self.has_lands:
            return []
        r, c, h, w = self.row, self.col, self.height, self.width
        e = LAND_EXT
        if self.horizontal:
            return [(r + 1, c - e, h - 2, 2 * e), (r + 1, c + w - e, h - 2, 2 * e)]
        return [(r - e, c + 1, 2 * e, w - 2), (r + h - e, c + 1, 2 * e, w - 2)]

    def extent(self) -> tuple[int, int, int, int]:
        """Bounding rectangle of body and lands."""
        rects = [self.body_rect(), *self.land_rects()]
        r0 = min(r for r, _, _, _ in rects)
        c0 = min(c for _, c, _, _ in rects)
        r1 = max(r + h for r, _, h, _ in rects)
        c1 = max(c + w for _, c, _, w in rects)
        return r0, c0, r1 - r0, c1 - c0


@dataclass(frozen=True)
class PadPair:
    centers: tuple[tuple[int, int], tuple[int, int]]
    radius: int


@dataclass(frozen=True)
class Layout:
    components: tuple[Component, ...]
    pads: tuple[PadPair, ...]
    traces: tuple[tuple[tuple[int, int], ...], ...]  # polylines through lattice points
    bridges: tuple[tuple[int, int, int, int], ...] = ()
    debris: tuple = ()  # ((discs (r, c, radius), ...), rgb) per foreign object


@dataclass(frozen=True)
class Shading:
    gain: float
    grad_r: float
    grad_c: float
    noise_seed: int


@dataclass(frozen=True)
class Board:
    spec: BoardSpec
    instance: int
    layout: Layout
    shading: Shading
    image: np.ndarray = field(repr=False, compare=False)


@dataclass(frozen=True)
class DefectAnnotation:
    kind: str
    mask: np.ndarray = field(repr=False, compare=False)
    bbox: tuple[int, int, int, int]


def mask_bbox(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return 0, 0, 0, 0
    return int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1)


# ---------------------------------------------------------------------------
# layout


def _overlaps(rect, others, margin: int) -> bool:
    r, c, h, w = rect
    for r2, c2, h2, w2 in others:
        if r < r2 + h2 + margin and r2 < r + h + margin and c < c2 + w2 + margin and c2 < c + w + margin:
            return True
    return False


def _inside(rect, height: int, width: int, margin: int) -> bool:
    r, c, h, w = rect
    return r >= margin and c >= margin and r + h <= height - margin and c + w <= width - margin


def _random_component(rng: np.random.Generator, height: int, width: int) -> Component:
    long_side = int(rng.integers(2, 5)) * LATTICE
    short_side = int(rng.integers(1, 3)) * LATTICE + 4
    horizontal = bool(rng.integers(2))
    h, w = (short_side, long_side) if horizontal else (long_side, short_side)
    r = int(rng.integers(2, (height - h) // LATTICE - 1)) * LATTICE
    c = int(rng.integers(2, (width - w) // LATTICE - 1)) * LATTICE
    color = BODY_COLORS[int(rng.integers(len(BODY_COLORS)))]
    return Component(r, c, h, w, color, horizontal)


def _design(spec: BoardSpec) -> Layout:
    rng = np.random.default_rng([spec.seed, 0x5EED])
    H, W = spec.height, spec.width
    taken: list[tuple[int, int, int, int]] = []
    comps: list[Component] = []
    for _ in range(spec.component_count * 200):
        if len(comps) == spec.component_count:
            break
        comp = _random_component(rng, H, W)
        ext = comp.extent()
        if _inside(ext, H, W, 12) and not _overlaps(ext, taken, 10):
            comps.append(comp)
            taken.append(ext)
    pads: list[PadPair] = []
    n_pairs = max(1, spec.pad_count // 2)
    for _ in range(n_pairs * 200):
        if len(pads) == n_pairs:
            break
        radius = int(rng.integers(3, 5))
        gap = int(rng.integers(10, 15))
        r = int(rng.integers(3, H // LATTICE - 3)) * LATTICE
        c = int(rng.integers(3, W // LATTICE - 3)) * LATTICE
        if rng.integers(2):
            centers = ((r, c), (r, c + gap))
        else:
            centers = ((r, c), (r + gap, c))
        (r0, c0), (r1, c1) = centers
        ext = (r0 - radius, c0 - radius, r1 - r0 + 2 * radius + 1, c1 - c0 + 2 * radius + 1)
        if _inside(ext, H, W, 12) and not _overlaps(ext, taken, 8):
            pads.append(PadPair(centers, radius))
            taken.append(ext)
    traces = []
    for _ in range(spec.trace_count):
        pts = [(int(rng.integers(2, H // LATTICE - 2)) * LATTICE, int(rng.integers(2, W // LATTICE - 2)) * LATTICE)]
        for seg in range(int(rng.integers(1, 4))):
            r, c = pts[-1]
            step = int(rng.integers(3, 12)) * LATTICE * (1 if rng.integers(2) else -1)
            if seg % 2 == 0:
                c = int(np.clip(c + step, 2 * LATTICE, W - 2 * LATTICE))
            else:
                r = int(np.clip(r + step, 2 * LATTICE, H - 2 * LATTICE))
            pts.append((r, c))
        traces.append(tuple(pts))
    return Layout(tuple(comps), tuple(pads), tuple(traces))


def _jitter(layout: Layout, rng: np.random.Generator) -> Layout:
    comps = []
    for comp in layout.components:
        dr, dc = (int(v) for v in rng.integers(-1, 2, size=2))
        comps.append(dataclasses.replace(comp, row=comp.row + dr, col=comp.col + dc))
    pads = []
    for pair in layout.pads:
        dr, dc = (int(v) for v in rng.integers(-1, 2, size=2))
        centers = tuple((r + dr, c + dc) for r, c in pair.centers)
        pads.append(PadPair(centers, pair.radius))  # type: ignore[arg-type]
    return dataclasses.replace(layout, components=tuple(comps), pads=tuple(pads))


# ---------------------------------------------------------------------------
# rendering


def _fill(img: np.ndarray, rect, color) -> None:
    r, c, h, w = rect
    r0, c0 = max(r, 0), max(c, 0)
    img[r0 : max(r + h, 0), c0 : max(c + w, 0)] = color


def _disc_profile(img: np.ndarray, center, radius: int, color) -> None:
    """Solder pad: disc whose brightness falls off radially, mimicking a specular highlight."""
    r0, c0 = center
    rr, cc = np.ogrid[r0 - radius : r0 + radius + 1, c0 - radius : c0 + radius + 1]
    d = np.sqrt((rr - r0) ** 2 + (cc - c0) ** 2) / (radius + 0.5)
    inside = d <= 1.0
    shade = (0.65 + 0.35 * (1.0 - d))[..., None] * np.asarray(color)
    view = img[r0 - radius : r0 + radius + 1, c0 - radius : c0 + radius + 1]
    view[inside] = np.minimum(shade[inside] * 1.12, 1.0)


def _draw_body(img: np.ndarray, comp: Component) -> None:
    r, c, h, w = comp.body_rect()
    _fill(img, (r, c, h, w), OUTLINE)
    _fill(img, (r + 1, c + 1, h - 2, w - 2), comp.color)


def render_layout(layout: Layout, shading: Shading, height: int, width: int, noise: bool = True) -> np.ndarray:
    """Draw ``layout`` under ``shading``; ``noise=False`` skips the sensor noise."""
    img = np.empty((height, width, 3), dtype=np.float64)
    img[:] = SUBSTRATE
    for pts in layout.traces:
        for (r0, c0), (r1, c1) in zip(pts[:-1], pts[1:]):
            ra, rb = sorted((r0, r1))
            ca, cb = sorted((c0, c1))
            _fill(img, (ra - 1, ca - 1, rb - ra + 2, cb - ca + 2), TRACE)
    for pair in layout.pads:
        for center in pair.centers:
            _disc_profile(img, center, pair.radius, SOLDER)
    for comp in layout.components:
        for land in comp.land_rects():
            _fill(img, land, SOLDER)
    for comp in layout.components:
        if comp.has_body:
            _draw_body(img, comp)
    for bridge in layout.bridges:
        _fill(img, bridge, SOLDER)
    for blob, color in layout.debris:
        for r, c, rad in blob:
            rr, cc = np.ogrid[:height, :width]
            img[(rr - r) ** 2 + (cc - c) ** 2 <= rad * rad] = color
    rr = np.linspace(-1.0, 1.0, height)[:, None, None]
    cc = np.linspace(-1.0, 1.0, width)[None, :, None]
    img = img * (shading.gain + shading.grad_r * rr + shading.grad_c * cc)
    if noise:
        img = img + np.random.default_rng(shading.noise_seed).normal(0.0, 0.004, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return (np.rint(img * 255.0) / 255.0).astype(np.float32)


def generate_board(spec: BoardSpec, instance: int = 0) -> Board:
    """Render board ``instance`` of the design fixed by ``spec``."""
    rng = np.random.default_rng([spec.seed, 0xB0A2D, instance])
    layout = _jitter(_design(spec), rng)
    shading = Shading(
        gain=float(rng.uniform(0.94, 1.06)),
        grad_r=float(rng.uniform(-0.03, 0.03)),
        grad_c=float(rng.uniform(-0.03, 0.03)),
        noise_seed=int(rng.integers(2**31)),
    )
    image = render_layout(layout, shading, spec.height, spec.width)
    return Board(spec, instance, layout, shading, image)


# ---------------------------------------------------------------------------
# defects


def sample_defect_kinds(n: int, rng: np.random.Generator) -> list[str]:
    idx = rng.choice(len(DEFECT_KINDS), size=n, p=np.asarray(DEFECT_WEIGHTS))
    return [DEFECT_KINDS[i] for i in idx]


def _rect_mask(rect, height: int, width: int) -> np.ndarray:
    m = np.zeros((height, width), dtype=bool)
    r, c, h, w = rect
    m[max(r, 0) : max(r + h, 0), max(c, 0) : max(c + w, 0)] = True
    return m


def _candidate_layouts(board: Board, kind: str, rng: np.random.Generator):
    """Yield modified layouts for ``kind`` in random order of candidate sites."""
    lay = board.layout
    H, W = board.spec.height, board.spec.width
    comps = list(lay.components)
    if kind == "missing_component":
        for i in rng.permutation(len(comps)):
            if comps[i].has_lands and comps[i].has_body and comps[i].body_dr == comps[i].body_dc == 0:
                comps2 = comps.copy()
                comps2[i] = dataclasses.replace(comps[i], has_body=False)
                yield dataclasses.replace(lay, components=tuple(comps2))
    elif kind == "misalignment":
        for i in rng.permutation(len(comps)):
            comp = comps[i]
            if not comp.has_lands or not comp.has_body or comp.body_dr or comp.body_dc:
                continue
            shift = int(rng.integers(4, 13)) * (1 if rng.integers(2) else -1)
            moved = dataclasses.replace(comp, body_dr=0 if comp.horizontal else shift, body_dc=shift if comp.horizontal else 0)
            others = [c.extent() for j, c in enumerate(comps) if j != i]
            if _inside(moved.body_rect(), H, W, 2) and not _overlaps(moved.body_rect(), others, 2):
                comps2 = comps.copy()
                comps2[i] = moved
                yield dataclasses.replace(lay, components=tuple(comps2))
    elif kind == "solder_bridge":
        for i in rng.permutation(len(lay.pads)):
            (r0, c0), (r1, c1) = lay.pads[i].centers
            half = int(rng.integers(1, 3))
            if r0 == r1:
                bar = (r0 - half, c0, 2 * half + 1, c1 - c0 + 1)
            else:
                bar = (r0, c0 - half, r1 - r0 + 1, 2 * half + 1)
            if bar not in lay.bridges:
                yield dataclasses.replace(lay, bridges=lay.bridges + (bar,))
    elif kind == "foreign_object":
        for _ in range(200):
            r = int(rng.integers(16, H - 16))
            c = int(rng.integers(16, W - 16))
            blob = tuple(
                (r + int(rng.integers(-4, 5)), c + int(rng.integers(-4, 5)), int(rng.integers(2, 6)))
                for _ in range(int(rng.integers(2, 5)))
            )
            color = DEBRIS_COLORS[int(rng.integers(len(DEBRIS_COLORS)))]
            yield dataclasses.replace(lay, debris=tuple(lay.debris) + ((blob, color),))
    elif kind == "extra_component":
        taken = [c.extent() for c in comps]
        taken += [
            (min(a[0], b[0]) - p.radius, min(a[1], b[1]) - p.radius, abs(a[0] - b[0]) + 2 * p.radius + 1, abs(a[1] - b[1]) + 2 * p.radius + 1)
            for p in lay.pads
            for a, b in [p.centers]
        ]
        for _ in range(400):
            comp = dataclasses.replace(_random_component(rng, H, W), has_lands=False)
            if _inside(comp.extent(), H, W, 12) and not _overlaps(comp.extent(), taken, 6):
                yield dataclasses.replace(lay, components=tuple(comps) + (comp,))
    else:
        raise ValueError(f"unknown defect kind {kind!r}")


def inject_defect(
    board: Board, kind: str, seed: int, avoid: np.ndarray | None = None, max_tries: int = 64
) -> tuple[Board, DefectAnnotation]:
    """Apply one defect of ``kind``; the annotation mask is exactly the set of altered pixels.

    The defect is painted onto the existing image: wherever the noise-free
    renders of the old and new layouts differ, the new flat (shaded, but
    noiseless) colour replaces the pixel.  Everything else keeps its bytes.

    ``avoid`` marks pixels the new defect must not touch (e.g. earlier defects
    on the same board, dilated).
    """
    rng = np.random.default_rng([seed, DEFECT_KINDS.index(kind) if kind in DEFECT_KINDS else 99])
    H, W = board.spec.height, board.spec.width
    before = render_layout(board.layout, board.shading, H, W, noise=False)
    for tries, layout in enumerate(_candidate_layouts(board, kind, rng)):
        if tries >= max_tries:
            break
        after = render_layout(layout, board.shading, H, W, noise=False)
        painted = np.any(after != before, axis=2)
        image = board.image.copy()
        image[painted] = after[painted]
        mask = np.any(image != board.image, axis=2)
        if not mask.any():
            continue
        if avoid is not None and np.any(mask & avoid):
            continue
        new = dataclasses.replace(board, layout=layout, image=image)
        return new, DefectAnnotation(kind, mask, mask_bbox(mask))
    raise SiteNotFoundError(f"no eligible site for {kind} on board seed={board.spec.seed} instance={board.instance}")


def _dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    out = mask.copy()
    H, W = mask.shape
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return out
    r0, r1 = max(rows.min() - radius, 0), min(rows.max() + radius + 1, H)
    c0, c1 = max(cols.min() - radius, 0), min(cols.max() + radius + 1, W)
    out[r0:r1, c0:c1] = True
    return out


def inject_defects(board: Board, kinds: list[str], seed: int, spacing: int = 8) -> tuple[Board, list[DefectAnnotation]]:
    """Inject several defects whose bounding boxes stay ``spacing`` px apart."""
    avoid = np.zeros((board.spec.height, board.spec.width), dtype=bool)
    notes = []
    for i, kind in enumerate(kinds):
        board, note = inject_defect(board, kind, seed * 1009 + i, avoid=avoid)
        notes.append(note)
        avoid |= _dilate(note.mask, spacing)
    return board, notes


# ---------------------------------------------------------------------------
# training-time corruption


@dataclass(frozen=True)
class AugmentConfig:
    p_rectangles: float = 0.5
    p_drops: float = 0.5
    p_shift: float = 0.5
    p_flip: float = 0.5
    force_one: bool = True
    rect_count: tuple[int, int] = (1, 4)
    rect_side: tuple[float, float] = (0.08, 0.25)
    drop_rate: tuple[float, float] = (0.01, 0.05)
    block_side: tuple[float, float] = (0.12, 0.25)
    block_shift: tuple[int, int] = (1, 4)


@dataclass
class AugmentedPair:
    input: np.ndarray
    target: np.ndarray
    pseudo_mask: np.ndarray
    ops: list[tuple] = field(default_factory=list)  # declared corruption geometry, for auditing


def augment_patch(clean: np.ndarray, seed: int, cfg: AugmentConfig = AugmentConfig()) -> AugmentedPair:
    """Corrupt a clean patch with rectangles, pixel drops and a local block shift.

    ``ops`` records the geometry: ``("rect", r, c, h, w)``, ``("drops", rows, cols)``
    and ``("shift", r, c, side, dr, dc)`` (source top-left, side, displacement).
    """
    rng = np.random.default_rng([seed, 0xA06])
    target = np.array(clean, dtype=np.float32, copy=True)
    P = target.shape[0]
    if target.shape[1] != P:
        raise ValueError("augment_patch expects a square patch")
    if rng.random() < cfg.p_flip:
        target = target[:, ::-1]
    if rng.random() < cfg.p_flip:
        target = target[::-1]
    target = np.ascontiguousarray(target)
    use = [rng.random() < p for p in (cfg.p_rectangles, cfg.p_drops, cfg.p_shift)]
    if cfg.force_one and not any(use):
        use[int(rng.integers(3))] = True
    inp = target.copy()
    mask = np.zeros((P, P), dtype=np.float32)
    ops: list[tuple] = []

    if use[2]:
        lo, hi = (max(1, int(round(f * P))) for f in cfg.block_side)
        side = int(rng.integers(lo, hi + 1))
        mag = int(rng.integers(cfg.block_shift[0], cfg.block_shift[1] + 1))
        dr, dc = [(mag, 0), (-mag, 0), (0, mag), (0, -mag)][int(rng.integers(4))]
        r = int(rng.integers(max(0, -dr), P - side - max(0, dr) + 1))
        c = int(rng.integers(max(0, -dc), P - side - max(0, dc) + 1))
        inp[r + dr : r + dr + side, c + dc : c + dc + side] = target[r : r + side, c : c + side]
        mask[r : r + side, c : c + side] = 1.0
        mask[r + dr : r + dr + side, c + dc : c + dc + side] = 1.0
        ops.append(("shift", r, c, side, dr, dc))
    if use[0]:
        lo, hi = (max(1, int(round(f * P))) for f in cfg.rect_side)
        for _ in range(int(rng.integers(cfg.rect_count[0], cfg.rect_count[1] + 1))):
            h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            r = int(rng.integers(0, P - h + 1))
            c = int(rng.integers(0, P - w + 1))
            if rng.random() < 0.5:
                inp[r : r + h, c : c + w] = rng.random((h, w, target.shape[2]), dtype=np.float32)
            else:
                inp[r : r + h, c : c + w] = target.mean(axis=(0, 1))
            mask[r : r + h, c : c + w] = 1.0
            ops.append(("rect", r, c, h, w))
    if use[1]:
        rate = rng.uniform(*cfg.drop_rate)
        rows, cols = np.nonzero(rng.random((P, P)) < rate)
        inp[rows, cols] = 0.0
        mask[rows, cols] = 1.0
        ops.append(("drops", rows, cols))
    return AugmentedPair(inp, target, mask, ops)

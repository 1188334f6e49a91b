"""Registered synthetic shape families with exact ground-truth correspondence.

Templates are watertight genus-0 meshes built from a subdivided icosahedron:
plain unit icosphere, a star-shaped "biped" (radial lobes for head, arms and
legs), and an asymmetric "bumpy" sphere that breaks spectral degeneracy.
Deformations displace vertices along their normals, modulated by random
low-frequency Laplace eigenfunctions of the template, so connectivity (and
hence the identity vertex correspondence) is preserved exactly. Samples that
stretch any edge beyond the distortion bound are rejected and redrawn.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DistortionBoundExceeded, ShapeMismatch
from .fmap import gt_fmap
from .mesh import TriangleMesh, cotan_stiffness, vertex_areas
from .sgm import MapDataset
from .spectral import SpectralBasis, eigenbasis

TEMPLATE_KINDS = ("icosphere", "biped", "bumpy")

# Deformation modes draw from eigenfunctions 2..12 (0-based 1..11): low
# frequencies keep the samples near-isometric and smooth.
MODE_LOW, MODE_HIGH = 1, 11


@dataclass(frozen=True)
class DeformConfig:
    kind: str = "bumpy"
    level: int = 2
    modes: int = 8
    epsilon: float = 0.08  # displacement bound as a fraction of the bbox diagonal
    seed: int = 0
    max_distortion: float = 0.25
    retries: int = 10
    # random rigid rotation (degrees) applied to each sample: an exact
    # isometry, so the identity correspondence stays valid while extrinsic
    # XYZ cues decouple between pair members ("oriented up to this angle")
    rotate: float = 0.0

    def __post_init__(self):
        if self.kind not in TEMPLATE_KINDS:
            raise ShapeMismatch(f"unknown template kind {self.kind!r}")
        if self.modes < 1 or self.level < 0 or self.epsilon < 0.0:
            raise ShapeMismatch("deform config values out of range")


# -- templates -----------------------------------------------------------------

def _icosahedron():
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ],
        dtype=np.int64,
    )
    return verts, faces


def _subdivide(verts, faces):
    verts = list(map(tuple, verts))
    cache = {}

    def midpoint(i, j):
        key = (i, j) if i < j else (j, i)
        if key not in cache:
            a, b = np.array(verts[i]), np.array(verts[j])
            m = (a + b) / 2.0
            m /= np.linalg.norm(m)
            cache[key] = len(verts)
            verts.append(tuple(m))
        return cache[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return np.array(verts, dtype=np.float64), np.array(new_faces, dtype=np.int64)


def _unit_icosphere(level: int):
    verts, faces = _icosahedron()
    for _ in range(level):
        verts, faces = _subdivide(verts, faces)
    return verts, faces


def _radial_lobes(dirs, centers, amps, widths):
    """Sum of Gaussian lobes on the unit sphere evaluated at unit dirs."""
    r = np.zeros(dirs.shape[0])
    for c, a, w in zip(centers, amps, widths):
        d2 = np.sum((dirs - c[None, :]) ** 2, axis=1)
        r += a * np.exp(-d2 / (2.0 * w**2))
    return r


_BIPED_CENTERS = np.array(
    [
        [0.0, 0.0, 1.0],     # head
        [0.85, 0.0, 0.4],    # arms
        [-0.85, 0.0, 0.4],
        [0.45, 0.0, -0.9],   # legs
        [-0.45, 0.0, -0.9],
    ]
)
_BIPED_CENTERS = _BIPED_CENTERS / np.linalg.norm(_BIPED_CENTERS, axis=1)[:, None]

# Fixed asymmetric lobe pattern for the "bumpy" template; a frozen RNG keeps
# the construction deterministic without hand-listing coordinates. Lobe
# strength and the anisotropic stretch are tuned so the template has no
# near-degenerate low eigenvalues: ground-truth maps of the family then
# concentrate on the diagonal instead of rotating inside eigenvalue
# multiplets.
_bump_rng = np.random.default_rng(1234509876)
_BUMP_CENTERS = _bump_rng.standard_normal((6, 3))
_BUMP_CENTERS /= np.linalg.norm(_BUMP_CENTERS, axis=1)[:, None]
_BUMP_AMPS = 1.5 * _bump_rng.uniform(0.12, 0.3, 6) * np.where(
    _bump_rng.random(6) < 0.5, -1.0, 1.0
)
_BUMP_WIDTHS = _bump_rng.uniform(0.3, 0.55, 6)
_BUMP_STRETCH = np.array([0.7, 0.85, 1.25])


def make_template(kind: str, level: int) -> TriangleMesh:
    """Deterministic watertight genus-0 template mesh."""
    if kind not in TEMPLATE_KINDS:
        raise ShapeMismatch(f"unknown template kind {kind!r}")
    verts, faces = _unit_icosphere(level)
    if kind == "icosphere":
        return TriangleMesh(verts, faces)
    if kind == "biped":
        r = 1.0 + _radial_lobes(
            verts, _BIPED_CENTERS, np.full(5, 0.75), np.full(5, 0.32)
        )
        v = verts * r[:, None]
        v[:, 2] *= 1.35  # stretch into a standing figure
        return TriangleMesh(v, faces)
    r = 1.0 + _radial_lobes(verts, _BUMP_CENTERS, _BUMP_AMPS, _BUMP_WIDTHS)
    return TriangleMesh(verts * r[:, None] * _BUMP_STRETCH[None, :], faces)


# -- deformation sampling --------------------------------------------------------

def template_basis(template: TriangleMesh, k: int) -> SpectralBasis:
    W = cotan_stiffness(template)
    S = vertex_areas(template)
    return eigenbasis(W, S, k)


def _edge_distortion(template: TriangleMesh, new_verts: np.ndarray) -> float:
    e = template.edges
    old = template.edge_lengths
    new = np.linalg.norm(new_verts[e[:, 0]] - new_verts[e[:, 1]], axis=1)
    return float(np.max(np.abs(new - old) / old))


def _random_rotation(rng: np.random.Generator, degrees: float) -> np.ndarray:
    """Rotation by ``degrees`` around a uniformly random axis (Rodrigues)."""
    axis = rng.standard_normal(3)
    axis /= np.linalg.norm(axis)
    a = np.deg2rad(degrees)
    K = np.array([
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ])
    return np.eye(3) + np.sin(a) * K + (1.0 - np.cos(a)) * (K @ K)


def deform(template: TriangleMesh, cfg: DeformConfig, sample_seed: int,
           basis: SpectralBasis | None = None) -> TriangleMesh:
    """Draw a near-isometric deformation of the template (same connectivity).

    Displacement field: sum_b c_b phihat_{j_b}(v) n(v) with mode indices j_b
    drawn from the low-frequency band, eigenfunctions scaled to unit peak
    amplitude, and c_b ~ Uniform(-a, a), a = epsilon * bbox_diag / modes.
    Samples violating the edge-distortion bound are redrawn up to
    ``cfg.retries`` times, then :class:`DistortionBoundExceeded` is raised.
    """
    if basis is None:
        basis = template_basis(template, MODE_HIGH + 2)
    if basis.k < MODE_HIGH + 1:
        raise ShapeMismatch(f"deform needs >= {MODE_HIGH + 1} eigenfunctions")
    normals = template.vertex_normals()
    amp = cfg.epsilon * template.bbox_diag / cfg.modes
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, sample_seed)))
    for _ in range(cfg.retries + 1):
        modes = rng.integers(MODE_LOW, MODE_HIGH + 1, size=cfg.modes)
        coefs = rng.uniform(-amp, amp, size=cfg.modes)
        if cfg.epsilon == 0.0:
            new_verts = template.vertices.copy()
        else:
            field = np.zeros(template.n_vertices)
            for j, c in zip(modes, coefs):
                phi = basis.phi[:, j]
                field += c * phi / np.abs(phi).max()
            new_verts = template.vertices + field[:, None] * normals
        if cfg.epsilon == 0.0 or _edge_distortion(template, new_verts) < cfg.max_distortion:
            if cfg.rotate > 0.0:
                new_verts = new_verts @ _random_rotation(rng, cfg.rotate).T
            return template.with_vertices(new_verts)
    raise DistortionBoundExceeded(
        f"no sample met the {cfg.max_distortion:.0%} edge bound "
        f"after {cfg.retries + 1} draws (epsilon={cfg.epsilon})"
    )


def shape_basis(mesh: TriangleMesh, k: int) -> SpectralBasis:
    return eigenbasis(cotan_stiffness(mesh), vertex_areas(mesh), k)


def maps_from_meshes(template: TriangleMesh, shapes, k: int,
                     absolute: bool = True, sign_augment: bool = False,
                     seed: int = 0) -> MapDataset:
    """Template-to-shape ground-truth maps for already materialized meshes.

    All shapes must share the template's vertex count (registered family,
    identity correspondence). The template self-map is the first row.
    """
    t_basis = template_basis(template, k).truncated(k)
    S_t = vertex_areas(template)
    identity = np.arange(template.n_vertices)
    rng_sign = np.random.default_rng(np.random.SeedSequence((seed, 987001)))
    maps = [gt_fmap(t_basis, t_basis, identity, S_t)]
    for shape in shapes:
        if shape.n_vertices != template.n_vertices:
            raise ShapeMismatch("shape is not registered to the template")
        b2 = shape_basis(shape, k)
        C = gt_fmap(t_basis, b2, identity, vertex_areas(shape))
        if sign_augment and not absolute:
            s1 = rng_sign.choice([-1.0, 1.0], size=k)
            s2 = rng_sign.choice([-1.0, 1.0], size=k)
            C = s2[:, None] * C * s1[None, :]
        maps.append(C)
    arr = np.stack(maps)
    if absolute:
        np.abs(arr, out=arr)
    ds = MapDataset(arr, {"absolute": absolute, "sign_augment": sign_augment,
                          "count": len(maps), "k": k, "seed": seed})
    if absolute:
        ds.validate_absolute()
    return ds


def build_fmap_dataset(cfg: DeformConfig, count: int, k: int,
                       absolute: bool = True, sign_augment: bool = False,
                       include_self: bool = True) -> MapDataset:
    """Template-to-shape ground-truth maps at order k for ``count`` samples.

    The first row is the template-to-itself map (identity) when
    ``include_self`` is set. ``sign_augment`` multiplies each signed map by
    random diagonal +-1 matrices on both sides, emulating the eigenfunction
    sign ambiguity of independently processed shapes; it only applies to
    signed datasets (absolute=False).
    """
    if count < 1:
        raise ShapeMismatch("dataset needs count >= 1")
    template = make_template(cfg.kind, cfg.level)
    t_basis = template_basis(template, max(k, MODE_HIGH + 2))
    t_basis_k = t_basis.truncated(k)
    identity = np.arange(template.n_vertices)
    rng_sign = np.random.default_rng(np.random.SeedSequence((cfg.seed, 987001)))
    maps = np.empty((count, k, k))
    seeds = []
    start = 0
    if include_self:
        S_t = vertex_areas(template)
        maps[0] = gt_fmap(t_basis_k, t_basis_k, identity, S_t)
        seeds.append(None)
        start = 1
    for i in range(start, count):
        sample_seed = i
        shape = deform(template, cfg, sample_seed, basis=t_basis)
        b2 = shape_basis(shape, k)
        C = gt_fmap(t_basis_k, b2, identity, vertex_areas(shape))
        if sign_augment and not absolute:
            s1 = rng_sign.choice([-1.0, 1.0], size=k)
            s2 = rng_sign.choice([-1.0, 1.0], size=k)
            C = s2[:, None] * C * s1[None, :]
        maps[i] = C
        seeds.append(sample_seed)
    if absolute:
        np.abs(maps, out=maps)
    manifest = {
        "kind": cfg.kind,
        "level": cfg.level,
        "modes": cfg.modes,
        "epsilon": cfg.epsilon,
        "seed": cfg.seed,
        "count": count,
        "k": k,
        "absolute": absolute,
        "sign_augment": sign_augment,
        "sample_seeds": seeds,
    }
    ds = MapDataset(maps, manifest)
    if absolute:
        ds.validate_absolute()
    return ds

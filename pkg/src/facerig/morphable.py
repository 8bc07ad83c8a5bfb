"""Procedural 3D morphable head model, SH shading, and a software rasterizer.

Produces the pixel-aligned conditional maps (albedo, surface normal,
Lambertian render) and composite images that condition everything
downstream.  The head is an anisotropically scaled icosphere with a nose
bump; shape/expression/pose-corrective/albedo variation comes from seeded
orthonormal blendshape bases, so no external model assets are needed.

Conventions (asserted by tests):
  * camera looks down -z; larger z is nearer; the z-buffer keeps max z.
  * screen coordinates live in [-1, 1]; pixel (iy, ix) is centered at
    ((ix + 0.5) / R * 2 - 1, (iy + 0.5) / R * 2 - 1).
  * the normal map stores (n + 1) / 2; background pixels encode the zero
    vector, i.e. 0.5 per channel.

All functions are pure; dataset synthesis may fan out per sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# Lambertian-convolved real SH constants (order 2, 9 coefficients).
SH_C0 = 0.8862269255
SH_C1 = 1.0233267079
SH_C2 = 0.8580855308
SH_C3 = 0.2477079561

MESH_FORMAT_VERSION = 1

# Canonical landmark directions on the unit head sphere: brow, eyes, nose
# bridge/tip, cheeks, mouth corners/lips, chin, jaw, temples, crown.
_LANDMARK_DIRS = np.array(
    [
        [0.00, 0.60, 0.75],
        [-0.35, 0.25, 0.90],
        [0.35, 0.25, 0.90],
        [0.00, 0.15, 1.00],
        [0.00, -0.05, 1.00],
        [-0.55, -0.05, 0.80],
        [0.55, -0.05, 0.80],
        [-0.25, -0.35, 0.85],
        [0.25, -0.35, 0.85],
        [0.00, -0.25, 0.95],
        [0.00, -0.50, 0.80],
        [0.00, -0.70, 0.55],
        [-0.70, -0.45, 0.50],
        [0.70, -0.45, 0.50],
        [-0.85, 0.30, 0.40],
        [0.85, 0.30, 0.40],
    ],
    dtype=np.float64,
)
N_LANDMARKS = len(_LANDMARK_DIRS)

# Bounding-box diagonal of the template.  With unit-norm basis columns a
# unit coefficient can displace a single vertex by at most 1 length unit,
# i.e. 5% of this diagonal.
_TEMPLATE_DIAGONAL = 20.0


@dataclass(frozen=True)
class CameraParams:
    """Weak-perspective camera: screen = scale * (xy + (tx, ty))."""

    scale: float
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"camera scale must be positive, got {self.scale}")
        if not (np.isfinite(self.tx) and np.isfinite(self.ty)):
            raise ValueError("camera translation must be finite")


@dataclass
class FaceParams:
    """Coefficient vectors driving one deformation of the head model."""

    shape: np.ndarray
    expression: np.ndarray
    pose: np.ndarray  # axis-angle radians: global rotation, then per joint
    albedo: np.ndarray
    lighting: np.ndarray  # (9, 3) SH coefficients per RGB channel
    camera: CameraParams

    def validate(self, model: "MeshModel") -> None:
        dims = {
            "shape": (self.shape, model.n_shape),
            "expression": (self.expression, model.n_expr),
            "pose": (self.pose, 3 + 3 * model.n_joint),
            "albedo": (self.albedo, model.n_alb),
        }
        for name, (vec, want) in dims.items():
            vec = np.asarray(vec)
            if vec.shape != (want,):
                raise ValueError(f"{name} has shape {vec.shape}, expected ({want},)")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"{name} contains non-finite values")
        if np.asarray(self.lighting).shape != (9, 3):
            raise ValueError("lighting must be a 9x3 matrix")
        if not np.all(np.isfinite(self.lighting)):
            raise ValueError("lighting contains non-finite values")

    def to_flat_dict(self) -> dict:
        return {
            "shape": np.asarray(self.shape, dtype=np.float64).tolist(),
            "expression": np.asarray(self.expression, dtype=np.float64).tolist(),
            "pose": np.asarray(self.pose, dtype=np.float64).tolist(),
            "albedo": np.asarray(self.albedo, dtype=np.float64).tolist(),
            "lighting": np.asarray(self.lighting, dtype=np.float64).reshape(-1).tolist(),
            "camera": [self.camera.scale, self.camera.tx, self.camera.ty],
        }

    @classmethod
    def from_flat_dict(cls, d: dict) -> "FaceParams":
        cam = [float(v) for v in d["camera"]]
        return cls(
            shape=np.asarray(d["shape"], dtype=np.float64),
            expression=np.asarray(d["expression"], dtype=np.float64),
            pose=np.asarray(d["pose"], dtype=np.float64),
            albedo=np.asarray(d["albedo"], dtype=np.float64),
            lighting=np.asarray(d["lighting"], dtype=np.float64).reshape(9, 3),
            camera=CameraParams(cam[0], cam[1], cam[2]),
        )


@dataclass
class MeshModel:
    """Mean template plus orthonormal linear bases and triangle topology."""

    mean_template: np.ndarray  # (V, 3)
    shape_basis: np.ndarray  # (3V, n_shape)
    expr_basis: np.ndarray  # (3V, n_expr)
    pose_basis: np.ndarray  # (3V, 9 * n_joint)
    mean_albedo: np.ndarray  # (V, 3) in [0, 1]
    albedo_basis: np.ndarray  # (3V, n_alb)
    faces: np.ndarray  # (F, 3) int
    landmark_indices: np.ndarray  # (K,) int
    seed: int

    @property
    def n_vertices(self) -> int:
        return self.mean_template.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[1]

    @property
    def n_expr(self) -> int:
        return self.expr_basis.shape[1]

    @property
    def n_alb(self) -> int:
        return self.albedo_basis.shape[1]

    @property
    def n_joint(self) -> int:
        return self.pose_basis.shape[1] // 9

    def zero_params(self, camera: CameraParams | None = None) -> FaceParams:
        """FaceParams for the canonical mean face under flat lighting."""
        if camera is None:
            camera = CameraParams(scale=default_camera_scale(self))
        return FaceParams(
            shape=np.zeros(self.n_shape),
            expression=np.zeros(self.n_expr),
            pose=np.zeros(3 + 3 * self.n_joint),
            albedo=np.zeros(self.n_alb),
            lighting=np.zeros((9, 3)),
            camera=camera,
        )


@dataclass
class ConditionalMaps:
    """Pixel-aligned conditioning images plus the composited 'photo'."""

    albedo_map: np.ndarray  # (R, R, 3) in [0, 1]
    normal_map: np.ndarray  # (R, R, 3), stores (n + 1) / 2
    render_map: np.ndarray  # (R, R, 3) in [0, 1]
    image: np.ndarray  # (R, R, 3) render over background
    mask: np.ndarray  # (R, R) binary foreground

    @property
    def resolution(self) -> int:
        return self.mask.shape[0]


def _icosahedron() -> tuple[np.ndarray, np.ndarray]:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
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


def _subdivide(verts: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One loop of 4-way triangle subdivision, midpoints pushed to the sphere."""
    vlist = list(verts)
    cache: dict[tuple[int, int], int] = {}

    def midpoint(a: int, b: int) -> int:
        key = (a, b) if a < b else (b, a)
        if key not in cache:
            m = vlist[a] + vlist[b]
            m /= np.linalg.norm(m)
            cache[key] = len(vlist)
            vlist.append(m)
        return cache[key]

    new_faces = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        new_faces.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return np.array(vlist), np.array(new_faces, dtype=np.int64)


def icosphere(min_vertices: int) -> tuple[np.ndarray, np.ndarray]:
    """Smallest subdivided icosphere with at least `min_vertices` vertices."""
    verts, faces = _icosahedron()
    while len(verts) < min_vertices:
        verts, faces = _subdivide(verts, faces)
    return verts, faces


def _orthonormal_basis(
    rng: np.random.Generator,
    rows: int,
    cols: int,
    unit_dirs: np.ndarray | None = None,
    smoothness: float = 0.0,
) -> np.ndarray:
    """Seeded Gaussian-field matrix with orthonormalized, sign-fixed columns.

    With smoothness > 0 each column mixes a spatially correlated Gaussian
    field (spanned by the spherical-harmonic functions of the vertex
    directions) into the white draw, so coefficients produce visible
    low-frequency variation instead of per-vertex noise.
    """
    if cols > rows:
        raise ValueError("cannot orthonormalize more columns than rows")
    raw = rng.standard_normal((rows, cols))
    if smoothness > 0.0:
        if unit_dirs is None:
            raise ValueError("smooth bases need vertex directions")
        phi = sh_basis(unit_dirs)  # (V, 9) smooth functions on the sphere
        v = len(unit_dirs)
        field = np.zeros((rows, 27))
        for axis in range(3):
            block = np.zeros((v, 3, 9))
            block[:, axis, :] = phi
            field[:, 9 * axis: 9 * axis + 9] = block.reshape(rows, 9)
        smooth = field @ rng.standard_normal((27, cols))
        smooth /= np.linalg.norm(smooth, axis=0, keepdims=True)
        raw /= np.linalg.norm(raw, axis=0, keepdims=True)
        raw = smoothness * smooth + (1.0 - smoothness) * raw
    q, r = np.linalg.qr(raw)
    return q * np.sign(np.diag(r))


def build_procedural_model(
    seed: int,
    v_target: int = 162,
    n_shape: int = 8,
    n_expr: int = 4,
    n_alb: int = 4,
    n_joint: int = 1,
) -> MeshModel:
    """Deterministically generate a head-like mesh model from a seed.

    The mean template is an icosphere scaled to (0.8, 1.0, 0.7) with a
    frontal nose bump, sized so its bounding-box diagonal is 20 length
    units.  All bases keep unit-norm columns, so a unit coefficient moves
    any vertex by at most 5% of that diagonal.
    """
    if v_target < 12:
        raise ValueError("v_target must be at least 12")
    for name, n in (("n_shape", n_shape), ("n_expr", n_expr),
                    ("n_alb", n_alb), ("n_joint", n_joint)):
        if n < 1:
            raise ValueError(f"{name} must be positive, got {n}")

    unit, faces = icosphere(v_target)
    verts = unit * np.array([0.8, 1.0, 0.7])

    nose_dir = np.array([0.0, -0.1, 1.0])
    nose_dir /= np.linalg.norm(nose_dir)
    ang = np.arccos(np.clip(unit @ nose_dir, -1.0, 1.0))
    bump = np.exp(-((ang / 0.25) ** 2))
    verts *= (1.0 + 0.35 * bump)[:, None]

    extent = verts.max(axis=0) - verts.min(axis=0)
    verts *= _TEMPLATE_DIAGONAL / np.linalg.norm(extent)

    v = len(verts)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x3D]))
    # Smoothness per basis: identity-defining fields are low-frequency so
    # identities differ visibly; pose correctives stay broadband.
    shape_basis = _orthonormal_basis(rng, 3 * v, n_shape, unit, smoothness=0.9)
    expr_basis = _orthonormal_basis(rng, 3 * v, n_expr, unit, smoothness=0.7)
    pose_basis = _orthonormal_basis(rng, 3 * v, 9 * n_joint)
    albedo_basis = _orthonormal_basis(rng, 3 * v, n_alb, unit, smoothness=0.95)

    # Smooth base skin tone: low-frequency directional modulation per channel.
    freq = rng.uniform(0.5, 1.5, size=(3, 3))
    phase = rng.uniform(0.0, 2 * np.pi, size=3)
    base = np.array([0.62, 0.52, 0.46])
    mean_albedo = np.clip(
        base[None, :] + 0.12 * np.cos(unit @ freq.T + phase[None, :]), 0.0, 1.0
    )

    taken: list[int] = []
    for d in _LANDMARK_DIRS:
        order = np.argsort(-(unit @ (d / np.linalg.norm(d))))
        idx = next(int(i) for i in order if int(i) not in taken)
        taken.append(idx)

    return MeshModel(
        mean_template=verts,
        shape_basis=shape_basis,
        expr_basis=expr_basis,
        pose_basis=pose_basis,
        mean_albedo=mean_albedo,
        albedo_basis=albedo_basis,
        faces=faces,
        landmark_indices=np.array(taken, dtype=np.int64),
        seed=int(seed),
    )


def default_camera_scale(model: MeshModel) -> float:
    """Scale putting the mean head at ~90% of the frame half-extent."""
    half = np.abs(model.mean_template[:, :2]).max()
    return float(0.9 / half)


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle (radians) to a proper rotation matrix.

    Uses series coefficients near zero so the zero vector maps exactly to
    the identity.
    """
    w = np.asarray(axis_angle, dtype=np.float64)
    if w.shape != (3,) or not np.all(np.isfinite(w)):
        raise ValueError("axis_angle must be a finite 3-vector")
    theta2 = float(w @ w)
    k = np.array(
        [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
    )
    if theta2 < 1e-16:
        a = 1.0 - theta2 / 6.0
        b = 0.5 - theta2 / 24.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def deform(model: MeshModel, params: FaceParams) -> np.ndarray:
    """Apply blendshape displacement then the global rigid rotation.

    vertices = R(pose[:3]) @ (template + S@shape + E@expression + P@dr)
    where dr stacks vec(R_joint) - vec(I) per non-global joint.
    """
    params.validate(model)
    disp = model.shape_basis @ np.asarray(params.shape, dtype=np.float64)
    disp += model.expr_basis @ np.asarray(params.expression, dtype=np.float64)
    pose = np.asarray(params.pose, dtype=np.float64)
    if model.n_joint:
        eye = np.eye(3).reshape(9)
        dr = np.concatenate(
            [rodrigues(pose[3 + 3 * j: 6 + 3 * j]).reshape(9) - eye
             for j in range(model.n_joint)]
        )
        disp += model.pose_basis @ dr
    shaped = model.mean_template + disp.reshape(-1, 3)
    rot = rodrigues(pose[:3])
    return shaped @ rot.T


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident face normals, renormalized.

    Vertices with no incident area fall back to (0, 0, 1).
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    v0, v1, v2 = (vertices[faces[:, i]] for i in range(3))
    face_n = np.cross(v1 - v0, v2 - v0)  # magnitude = 2 * area
    normals = np.zeros_like(vertices)
    for i in range(3):
        np.add.at(normals, faces[:, i], face_n)
    norm = np.linalg.norm(normals, axis=1)
    degenerate = norm < 1e-14
    normals[degenerate] = (0.0, 0.0, 1.0)
    norm[degenerate] = 1.0
    return normals / norm[:, None]


def sh_basis(normals: np.ndarray) -> np.ndarray:
    """Evaluate the 9 Lambertian-convolved SH basis functions at unit normals."""
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack(
        [
            np.full_like(x, SH_C0),
            SH_C1 * y,
            SH_C1 * z,
            SH_C1 * x,
            SH_C2 * x * y,
            SH_C2 * y * z,
            SH_C3 * (3.0 * z * z - 1.0),
            SH_C2 * x * z,
            0.5 * SH_C2 * (x * x - y * y),
        ],
        axis=-1,
    )


def sh_irradiance(normal: np.ndarray, lighting: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """RGB irradiance of unit normal(s) under a 9x3 SH lighting matrix."""
    n = np.asarray(normal, dtype=np.float64)
    lighting = np.asarray(lighting, dtype=np.float64)
    if lighting.shape != (9, 3):
        raise ValueError("lighting must be 9x3")
    norm = np.linalg.norm(n, axis=-1)
    if np.any(np.abs(norm - 1.0) > tol):
        raise ValueError("normals must be unit length")
    return sh_basis(n) @ lighting


def project_weak_perspective(
    vertices: np.ndarray, camera: CameraParams
) -> tuple[np.ndarray, np.ndarray]:
    """(x', y') = scale * (xy + t); z is passed through for z-buffering."""
    vertices = np.asarray(vertices, dtype=np.float64)
    screen = camera.scale * (vertices[:, :2] + np.array([camera.tx, camera.ty]))
    return screen, vertices[:, 2].copy()


def _edge(ax, ay, bx, by, px, py):
    """Signed edge function: cross((b - a), (p - a))."""
    return (bx - ax) * (py - ay) - (by - ay) * (px - ax)


def pixel_centers(resolution: int) -> np.ndarray:
    """Screen coordinate of pixel centers along one axis."""
    return (np.arange(resolution) + 0.5) / resolution * 2.0 - 1.0


def rasterize(
    screen: np.ndarray,
    depth: np.ndarray,
    attrs: np.ndarray,
    faces: np.ndarray,
    resolution: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Z-buffer rasterization with barycentric attribute interpolation.

    Coverage uses an inclusive edge-function test (a pixel center on a
    shared edge belongs to every adjacent triangle); depth ties keep the
    earliest triangle, so output is deterministic.  Uncovered pixels get
    attribute 0 and mask 0.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    screen = np.asarray(screen, dtype=np.float64)
    depth = np.asarray(depth, dtype=np.float64)
    attrs = np.asarray(attrs, dtype=np.float64)
    n_attr = attrs.shape[1]

    img = np.zeros((resolution, resolution, n_attr))
    zbuf = np.full((resolution, resolution), -np.inf)
    mask = np.zeros((resolution, resolution), dtype=bool)
    centers = pixel_centers(resolution)

    for tri in faces:
        (x0, y0), (x1, y1), (x2, y2) = screen[tri]
        area = _edge(x0, y0, x1, y1, x2, y2)
        if area == 0.0:
            continue
        lo_x = np.searchsorted(centers, min(x0, x1, x2))
        hi_x = np.searchsorted(centers, max(x0, x1, x2), side="right")
        lo_y = np.searchsorted(centers, min(y0, y1, y2))
        hi_y = np.searchsorted(centers, max(y0, y1, y2), side="right")
        if lo_x >= hi_x or lo_y >= hi_y:
            continue
        px = centers[lo_x:hi_x][None, :]
        py = centers[lo_y:hi_y][:, None]
        e0 = _edge(x1, y1, x2, y2, px, py)
        e1 = _edge(x2, y2, x0, y0, px, py)
        e2 = _edge(x0, y0, x1, y1, px, py)
        inside = ((e0 >= 0) & (e1 >= 0) & (e2 >= 0)) | (
            (e0 <= 0) & (e1 <= 0) & (e2 <= 0)
        )
        if not inside.any():
            continue
        l0, l1, l2 = e0 / area, e1 / area, e2 / area
        z = l0 * depth[tri[0]] + l1 * depth[tri[1]] + l2 * depth[tri[2]]
        window = (slice(lo_y, hi_y), slice(lo_x, hi_x))
        update = inside & (z > zbuf[window])
        if not update.any():
            continue
        vals = (
            l0[..., None] * attrs[tri[0]]
            + l1[..., None] * attrs[tri[1]]
            + l2[..., None] * attrs[tri[2]]
        )
        zbuf[window][update] = z[update]
        img[window][update] = vals[update]
        mask[window] |= update

    return img, mask


def identity_background(identity_seed: int, resolution: int) -> np.ndarray:
    """Deterministic per-identity background: gradient + one accessory patch."""
    rng = np.random.default_rng(np.random.SeedSequence([int(identity_seed), 0xB6]))
    c0 = rng.uniform(0.05, 0.95, size=3)
    c1 = rng.uniform(0.05, 0.95, size=3)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    direction = np.array([np.cos(angle), np.sin(angle)])

    centers = pixel_centers(resolution)
    gx, gy = np.meshgrid(centers, centers)
    proj = gx * direction[0] + gy * direction[1]
    t = (proj - proj.min()) / max(proj.max() - proj.min(), 1e-12)
    bg = c0[None, None, :] + t[:, :, None] * (c1 - c0)[None, None, :]

    side = int(rng.integers(resolution // 6, resolution // 3 + 1))
    r0 = int(rng.integers(0, resolution - side))
    col0 = int(rng.integers(0, resolution - side))
    bg[r0: r0 + side, col0: col0 + side] = rng.uniform(0.05, 0.95, size=3)
    return np.clip(bg, 0.0, 1.0)


def render_conditionals(
    model: MeshModel,
    params: FaceParams,
    resolution: int,
    identity_seed: int,
) -> ConditionalMaps:
    """Render albedo, world-space normal, and Lambertian maps plus the image.

    Deferred shading: albedo and normals are interpolated per pixel, the
    interpolated normal is renormalized, and irradiance is evaluated per
    pixel.  The image composites the render over the identity background.
    """
    params.validate(model)
    verts = deform(model, params)
    normals = vertex_normals(verts, model.faces)
    per_vertex_albedo = np.clip(
        model.mean_albedo
        + (model.albedo_basis @ np.asarray(params.albedo, dtype=np.float64)).reshape(-1, 3),
        0.0,
        1.0,
    )
    screen, depth = project_weak_perspective(verts, params.camera)
    attrs = np.concatenate([per_vertex_albedo, normals], axis=1)
    raster, mask = rasterize(screen, depth, attrs, model.faces, resolution)

    albedo_map = np.clip(raster[..., 0:3], 0.0, 1.0)
    n = raster[..., 3:6]
    norm = np.linalg.norm(n, axis=-1)
    flat = (norm < 1e-12) | ~mask
    n = np.where(flat[..., None], np.array([0.0, 0.0, 1.0]), n)
    n = n / np.where(flat, 1.0, norm)[..., None]

    irradiance = sh_basis(n) @ np.asarray(params.lighting, dtype=np.float64)
    render_map = np.clip(albedo_map * irradiance, 0.0, 1.0) * mask[..., None]
    normal_map = np.where(mask[..., None], (n + 1.0) / 2.0, 0.5)

    bg = identity_background(identity_seed, resolution)
    image = np.where(mask[..., None], render_map, bg)
    return ConditionalMaps(
        albedo_map=albedo_map,
        normal_map=normal_map,
        render_map=render_map,
        image=image,
        mask=mask,
    )


def project_landmarks(model: MeshModel, params: FaceParams) -> np.ndarray:
    """Screen positions of the model's landmark vertices under params."""
    verts = deform(model, params)
    screen, _ = project_weak_perspective(verts, params.camera)
    return screen[model.landmark_indices]


def save_mesh_model(model: MeshModel, path) -> None:
    """Write the model as a versioned container of named arrays."""
    np.savez(
        path,
        format_version=np.int64(MESH_FORMAT_VERSION),
        seed=np.int64(model.seed),
        dims=np.array(
            [model.n_vertices, model.n_shape, model.n_expr, model.n_alb, model.n_joint],
            dtype=np.int64,
        ),
        mean_template=model.mean_template,
        shape_basis=model.shape_basis,
        expr_basis=model.expr_basis,
        pose_basis=model.pose_basis,
        mean_albedo=model.mean_albedo,
        albedo_basis=model.albedo_basis,
        faces=model.faces,
        landmark_indices=model.landmark_indices,
    )


def load_mesh_model(path) -> MeshModel:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != MESH_FORMAT_VERSION:
            raise ValueError(
                f"mesh model format version mismatch: expected "
                f"{MESH_FORMAT_VERSION}, found {version}"
            )
        return MeshModel(
            mean_template=data["mean_template"],
            shape_basis=data["shape_basis"],
            expr_basis=data["expr_basis"],
            pose_basis=data["pose_basis"],
            mean_albedo=data["mean_albedo"],
            albedo_basis=data["albedo_basis"],
            faces=data["faces"],
            landmark_indices=data["landmark_indices"],
            seed=int(data["seed"]),
        )

"""Synthetic dataset generation and loading.

Each identity fixes shape and albedo coefficients plus a background seed;
each variation samples pose, expression, lighting, and camera inside the
configured ranges.  Every sample is regenerable bit-exactly from
(model seed, params, identity seed), so the manifest stores the full
parameter vectors as flat float lists.  Images and maps are stored as
8-bit RGB PNGs (row index increases with screen y; see morphable).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DatasetConfig, SamplingRanges
from .morphable import (
    CameraParams,
    ConditionalMaps,
    FaceParams,
    MeshModel,
    default_camera_scale,
    render_conditionals,
    save_mesh_model,
)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
MODEL_NAME = "mesh_model.npz"

MAP_KEYS = ("image", "albedo", "normal", "render", "mask")


@dataclass
class SampleRecord:
    identity: int
    variation: int
    identity_seed: int
    split: str  # train | held_out
    params: FaceParams
    files: dict[str, str]

    @property
    def record_id(self) -> str:
        return f"id{self.identity:04d}_v{self.variation:02d}"


def quantize(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def save_image(image: np.ndarray, path) -> None:
    arr = quantize(image)
    if arr.ndim == 2:
        Image.fromarray(arr, mode="L").save(path)
    else:
        Image.fromarray(arr, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def sample_identity_coeffs(
    spec: DatasetConfig, identity: int
) -> tuple[np.ndarray, np.ndarray, int]:
    """Deterministic per-identity shape/albedo coefficients and seed."""
    rng = np.random.default_rng(
        np.random.SeedSequence([int(spec.master_seed), int(identity)])
    )
    r = spec.ranges
    # n_shape / n_alb resolved later against the model; draw generously and slice.
    shape = rng.uniform(-r.shape_scale, r.shape_scale, size=64)
    albedo = rng.uniform(-r.albedo_scale, r.albedo_scale, size=64)
    identity_seed = int(rng.integers(0, 2**31 - 1))
    return shape, albedo, identity_seed


def sample_face_params(
    model: MeshModel, spec: DatasetConfig, identity: int, variation: int
) -> tuple[FaceParams, int]:
    """FaceParams for one (identity, variation) pair, plus the identity seed."""
    shape64, albedo64, identity_seed = sample_identity_coeffs(spec, identity)
    rng = np.random.default_rng(
        np.random.SeedSequence([int(spec.master_seed), int(identity), int(variation), 1])
    )
    r = spec.ranges
    pose = np.zeros(3 + 3 * model.n_joint)
    pose[:3] = rng.uniform(-r.rot_range, r.rot_range, size=3)
    if model.n_joint:
        pose[3:] = rng.uniform(-r.joint_range, r.joint_range, size=3 * model.n_joint)
    expression = rng.uniform(-r.expr_scale, r.expr_scale, size=model.n_expr)

    lighting = np.zeros((9, 3))
    ambient = rng.uniform(*r.light_ambient)
    lighting[0] = ambient + rng.uniform(-r.light_chroma, r.light_chroma, size=3)
    bands = rng.uniform(-r.light_band, r.light_band, size=8)
    lighting[1:] = bands[:, None] + rng.uniform(
        -r.light_chroma, r.light_chroma, size=(8, 3)
    )

    base_scale = default_camera_scale(model)
    camera = CameraParams(
        scale=base_scale * (1.0 + rng.uniform(-r.cam_scale_jitter, r.cam_scale_jitter)),
        tx=rng.uniform(-r.cam_shift, r.cam_shift),
        ty=rng.uniform(-r.cam_shift, r.cam_shift),
    )
    params = FaceParams(
        shape=shape64[: model.n_shape].copy(),
        expression=expression,
        pose=pose,
        albedo=albedo64[: model.n_alb].copy(),
        lighting=lighting,
        camera=camera,
    )
    return params, identity_seed


def held_out_count(n_identities: int) -> int:
    """Last 10% of identities (rounded down) are held out of training."""
    return n_identities // 10


def synth_dataset(
    spec: DatasetConfig,
    model: MeshModel,
    out_dir,
    resolution: int,
) -> "FaceDataset":
    """Render every sample, write PNGs and the manifest, return the dataset."""
    spec.validate()
    out = Path(out_dir)
    (out / "samples").mkdir(parents=True, exist_ok=True)
    save_mesh_model(model, out / MODEL_NAME)

    n_held = held_out_count(spec.n_identities)
    records = []
    for identity in range(spec.n_identities):
        split = "held_out" if identity >= spec.n_identities - n_held else "train"
        for variation in range(spec.variations_per_identity):
            params, identity_seed = sample_face_params(model, spec, identity, variation)
            maps = render_conditionals(model, params, resolution, identity_seed)
            rid = f"id{identity:04d}_v{variation:02d}"
            files = {key: f"samples/{rid}_{key}.png" for key in MAP_KEYS}
            save_image(maps.image, out / files["image"])
            save_image(maps.albedo_map, out / files["albedo"])
            save_image(maps.normal_map, out / files["normal"])
            save_image(maps.render_map, out / files["render"])
            save_image(maps.mask.astype(np.float64), out / files["mask"])
            if spec.store_float_maps:
                npy = f"samples/{rid}_maps.npy"
                stack = np.stack(
                    [maps.image, maps.albedo_map, maps.normal_map, maps.render_map]
                ).astype(np.float32)
                np.save(out / npy, stack)
                files["float_maps"] = npy
            records.append(
                {
                    "identity": identity,
                    "variation": variation,
                    "identity_seed": identity_seed,
                    "split": split,
                    "params": params.to_flat_dict(),
                    "files": files,
                }
            )

    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "resolution": resolution,
        "model_seed": model.seed,
        "model_dims": {
            "v_target": int(model.n_vertices),
            "n_shape": model.n_shape,
            "n_expr": model.n_expr,
            "n_alb": model.n_alb,
            "n_joint": model.n_joint,
        },
        "spec": {
            "n_identities": spec.n_identities,
            "variations_per_identity": spec.variations_per_identity,
            "master_seed": spec.master_seed,
        },
        "records": records,
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return FaceDataset.load(out)


def manifest_hash(dataset_dir) -> str:
    return hashlib.sha256((Path(dataset_dir) / MANIFEST_NAME).read_bytes()).hexdigest()


class FaceDataset:
    """Read access to a synthesized dataset directory."""

    def __init__(self, root: Path, manifest: dict, model: MeshModel):
        self.root = root
        self.manifest = manifest
        self.model = model
        self.resolution = int(manifest["resolution"])
        self.records = [
            SampleRecord(
                identity=r["identity"],
                variation=r["variation"],
                identity_seed=r["identity_seed"],
                split=r["split"],
                params=FaceParams.from_flat_dict(r["params"]),
                files=r["files"],
            )
            for r in manifest["records"]
        ]

    @classmethod
    def load(cls, root) -> "FaceDataset":
        root = Path(root)
        manifest_path = root / MANIFEST_NAME
        if not manifest_path.exists():
            raise ValueError(f"no {MANIFEST_NAME} in {root}")
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("manifest_version") != MANIFEST_VERSION:
            raise ValueError(
                f"manifest version mismatch: expected {MANIFEST_VERSION}, "
                f"found {manifest.get('manifest_version')}"
            )
        from .morphable import load_mesh_model

        model = load_mesh_model(root / MODEL_NAME)
        return cls(root, manifest, model)

    def split(self, name: str) -> list[SampleRecord]:
        return [r for r in self.records if r.split == name]

    @property
    def train_records(self) -> list[SampleRecord]:
        return self.split("train")

    @property
    def held_out_records(self) -> list[SampleRecord]:
        return self.split("held_out")

    def identities(self, split: str | None = None) -> list[int]:
        recs = self.records if split is None else self.split(split)
        return sorted({r.identity for r in recs})

    def records_for(self, identity: int) -> list[SampleRecord]:
        return [r for r in self.records if r.identity == identity]

    def find(self, record_id: str) -> SampleRecord:
        for r in self.records:
            if r.record_id == record_id:
                return r
        raise ValueError(f"no record {record_id!r} in dataset")

    def load_maps(self, record: SampleRecord) -> ConditionalMaps:
        f = record.files
        return ConditionalMaps(
            albedo_map=load_image(self.root / f["albedo"]),
            normal_map=load_image(self.root / f["normal"]),
            render_map=load_image(self.root / f["render"]),
            image=load_image(self.root / f["image"]),
            mask=load_image(self.root / f["mask"]) > 0.5,
        )

    def regenerate_maps(self, record: SampleRecord) -> ConditionalMaps:
        """Re-render this record from parameters (bit-exact with synthesis)."""
        return render_conditionals(
            self.model, record.params, self.resolution, record.identity_seed
        )

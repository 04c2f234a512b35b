"""Mesh file formats (OBJ ascii, PLY ascii/binary) and dataset manifests.

One mesh file per frame per surface; a JSON manifest lists the files in
frame order together with the cycle period and unit declaration.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from .mesh_core import TriMeshFrame

logger = logging.getLogger(__name__)

SURFACES = ("outer", "inner", "lumen")
UNIT_SCALE_TO_MM = {"mm": 1.0, "um": 1e-3, "micron": 1e-3, "m": 1000.0, "cm": 10.0}


class MeshFileError(RuntimeError):
    """A mesh file could not be parsed."""


# ---------------------------------------------------------------------------
# OBJ
# ---------------------------------------------------------------------------

def write_obj(path, mesh: TriMeshFrame):
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x!r} {y!r} {z!r}")
    for a, b, c in mesh.triangles:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> TriMeshFrame:
    verts = []
    faces = []
    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:4]]
                faces.append(idx)
        except (ValueError, IndexError) as exc:
            raise MeshFileError(f"{path}:{ln}: cannot parse {line!r}") from exc
    if not verts or not faces:
        raise MeshFileError(f"{path}: no vertices or faces found")
    return TriMeshFrame(np.asarray(verts), np.asarray(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# PLY (float64 vertices; ascii or binary little endian)
# ---------------------------------------------------------------------------

def write_ply(path, mesh: TriMeshFrame, binary: bool = True):
    nv, nf = mesh.n_vertices, mesh.n_triangles
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        "ply\n"
        f"format {fmt} 1.0\n"
        f"element vertex {nv}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {nf}\n"
        "property list uchar int vertex_indices\n"
        "end_header\n"
    )
    path = Path(path)
    if binary:
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
            tri = np.ascontiguousarray(mesh.triangles, dtype="<i4")
            counts = np.full((nf, 1), 3, dtype=np.uint8)
            body = b"".join(
                counts[i].tobytes() + tri[i].tobytes() for i in range(nf)
            )
            fh.write(body)
    else:
        with open(path, "w") as fh:
            fh.write(header)
            for x, y, z in mesh.vertices:
                fh.write(f"{x!r} {y!r} {z!r}\n")
            for a, b, c in mesh.triangles:
                fh.write(f"3 {a} {b} {c}\n")


def read_ply(path) -> TriMeshFrame:
    path = Path(path)
    with open(path, "rb") as fh:
        header_lines = []
        while True:
            line = fh.readline()
            if not line:
                raise MeshFileError(f"{path}: truncated header")
            header_lines.append(line.decode("ascii", "replace").strip())
            if header_lines[-1] == "end_header":
                break
        fmt = None
        nv = nf = 0
        vertex_props = []
        current = None
        for ln, line in enumerate(header_lines, start=1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "format":
                fmt = parts[1]
            elif parts[0] == "element":
                current = parts[1]
                if current == "vertex":
                    nv = int(parts[2])
                elif current == "face":
                    nf = int(parts[2])
            elif parts[0] == "property" and current == "vertex" and parts[1] != "list":
                vertex_props.append((parts[1], parts[2]))
        if fmt is None or nv == 0 or nf == 0:
            raise MeshFileError(f"{path}: malformed PLY header")
        names = [p[1] for p in vertex_props]
        if names[:3] != ["x", "y", "z"]:
            raise MeshFileError(f"{path}: vertex properties must start with x y z")

        if fmt == "ascii":
            text = fh.read().decode("ascii")
            rows = text.split("\n")
            verts = np.empty((nv, 3))
            for i in range(nv):
                parts = rows[i].split()
                verts[i] = [float(parts[0]), float(parts[1]), float(parts[2])]
            faces = np.empty((nf, 3), dtype=np.int64)
            for i in range(nf):
                parts = rows[nv + i].split()
                if parts[0] != "3":
                    raise MeshFileError(f"{path}: face {i} is not a triangle")
                faces[i] = [int(parts[1]), int(parts[2]), int(parts[3])]
            return TriMeshFrame(verts, faces)

        if fmt != "binary_little_endian":
            raise MeshFileError(f"{path}: unsupported format {fmt}")
        dtype_map = {"double": 8, "float": 4, "float64": 8, "float32": 4}
        sizes = []
        for _, name in zip(range(len(vertex_props)), vertex_props):
            kind = name[0]
            if kind not in dtype_map:
                raise MeshFileError(f"{path}: unsupported vertex property type {kind}")
            sizes.append(dtype_map[kind])
        stride = sum(sizes)
        raw = fh.read(nv * stride)
        if len(raw) < nv * stride:
            raise MeshFileError(f"{path}: truncated vertex block")
        kind0 = vertex_props[0][0]
        base = "<f8" if dtype_map[kind0] == 8 else "<f4"
        arr = np.frombuffer(raw, dtype=base).reshape(nv, stride // dtype_map[kind0])
        verts = arr[:, :3].astype(float)
        faces = np.empty((nf, 3), dtype=np.int64)
        for i in range(nf):
            cnt = fh.read(1)
            if len(cnt) != 1:
                raise MeshFileError(f"{path}: truncated face block at face {i}")
            k = cnt[0]
            data = fh.read(4 * k)
            if k != 3:
                raise MeshFileError(f"{path}: face {i} has {k} vertices, expected 3")
            faces[i] = struct.unpack("<3i", data)
        return TriMeshFrame(verts, faces)


def read_mesh(path) -> TriMeshFrame:
    path = Path(path)
    if not path.exists():
        raise MeshFileError(f"mesh file not found: {path}")
    suffix = path.suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise MeshFileError(f"{path}: unsupported mesh format {suffix!r}")


def write_mesh(path, mesh: TriMeshFrame, binary: bool = True):
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".obj":
        write_obj(path, mesh)
    elif suffix == ".ply":
        write_ply(path, mesh, binary=binary)
    else:
        raise MeshFileError(f"{path}: unsupported mesh format {suffix!r}")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    """Per-surface mesh file lists plus acquisition metadata."""

    surfaces: Dict[str, List[Path]]
    period: float
    subject: str = "unknown"
    cohort: str = "normal"
    units: str = "mm"
    inlet: object = "auto"
    base_dir: Path = field(default_factory=Path)

    @property
    def n_frames(self) -> int:
        return len(next(iter(self.surfaces.values())))

    def surface_names(self):
        return [s for s in SURFACES if s in self.surfaces]


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise MeshFileError(f"{path}: invalid JSON ({exc})") from exc
    if "surfaces" not in doc or "period_s" not in doc:
        raise MeshFileError(f"{path}: manifest needs 'surfaces' and 'period_s'")
    base = path.parent
    surfaces = {}
    counts = {}
    for name, files in doc["surfaces"].items():
        if name not in SURFACES:
            raise MeshFileError(f"{path}: unknown surface {name!r}")
        paths = [base / f for f in files]
        for p in paths:
            if not p.exists():
                raise MeshFileError(f"{path}: missing mesh file {p}")
        surfaces[name] = paths
        counts[name] = len(paths)
    if len(set(counts.values())) > 1:
        raise MeshFileError(f"{path}: frame-count mismatch across surfaces: {counts}")
    units = doc.get("units", "mm")
    if units not in UNIT_SCALE_TO_MM:
        raise MeshFileError(f"{path}: unknown units {units!r}")
    return DatasetManifest(
        surfaces=surfaces,
        period=float(doc["period_s"]),
        subject=doc.get("subject", "unknown"),
        cohort=doc.get("cohort", "normal"),
        units=units,
        inlet=doc.get("inlet", "auto"),
        base_dir=base,
    )


def ingest(manifest: DatasetManifest) -> Dict[str, list]:
    """Load all mesh frames declared in a manifest, converted to mm."""
    scale = UNIT_SCALE_TO_MM[manifest.units]
    period = manifest.period
    out = {}
    for name in manifest.surface_names():
        frames = []
        for k, p in enumerate(manifest.surfaces[name]):
            mesh = read_mesh(p)
            verts = mesh.vertices * scale if scale != 1.0 else mesh.vertices
            frames.append(TriMeshFrame(verts, mesh.triangles, frame_index=k,
                                       time=k * period / len(manifest.surfaces[name])))
        out[name] = frames
    return out


def write_dataset(out_dir, sequences: Dict[str, list], period: float,
                  subject: str = "synthetic", cohort: str = "normal",
                  fmt: str = "ply", binary: bool = True,
                  inlet="auto") -> Path:
    """Write mesh sequences plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    doc_surfaces = {}
    for name, frames in sequences.items():
        sub = out_dir / name
        sub.mkdir(exist_ok=True)
        rel = []
        for k, mesh in enumerate(frames):
            fname = f"{name}/frame{k:04d}.{fmt}"
            write_mesh(out_dir / fname, mesh, binary=binary)
            rel.append(fname)
        doc_surfaces[name] = rel
    doc = {
        "subject": subject,
        "cohort": cohort,
        "period_s": period,
        "units": "mm",
        "inlet": inlet,
        "surfaces": doc_surfaces,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n")
    return manifest_path

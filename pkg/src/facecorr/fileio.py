"""OBJ / PLY mesh files and the CSV outputs of the pipeline."""

import os

import numpy as np

from .correspondence import CorrespondedFaceSet
from .mesh import Mesh


class ParseError(ValueError):
    """Malformed mesh file; the message names the line or byte offset."""


def _fan(poly):
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def read_obj(path):
    """ASCII OBJ: ``v`` and ``f`` records; polygons are fan-triangulated."""
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                    if len(verts[-1]) != 3:
                        raise ValueError("vertex needs three coordinates")
                elif parts[0] == "f":
                    idx = []
                    for tok in parts[1:]:
                        k = int(tok.split("/")[0])
                        idx.append(k - 1 if k > 0 else len(verts) + k)
                    if len(idx) < 3:
                        raise ValueError("face needs three vertices")
                    if min(idx) < 0 or max(idx) >= len(verts):
                        raise ValueError("face index refers to an undefined vertex")
                    faces.extend(_fan(idx))
            except ValueError as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from None
    try:
        return Mesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


def write_obj(mesh, path):
    with open(path, "w", encoding="utf-8") as fh:
        for x, y, z in mesh.vertices:
            fh.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"f {a + 1} {b + 1} {c + 1}\n")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _ply_header(fh, path):
    if fh.readline().strip() != b"ply":
        raise ParseError(f"{path}: line 1: missing 'ply' magic")
    fmt = None
    elements = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError(f"{path}: line {lineno}: unexpected end of header")
        parts = raw.decode("ascii", "replace").split()
        if not parts or parts[0] in ("comment", "obj_info"):
            continue
        if parts[0] == "end_header":
            break
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append([parts[1], int(parts[2]), []])
        elif parts[0] == "property":
            if not elements:
                raise ParseError(f"{path}: line {lineno}: property before element")
            if parts[1] == "list":
                if parts[2] not in _PLY_TYPES or parts[3] not in _PLY_TYPES:
                    raise ParseError(f"{path}: line {lineno}: unknown type")
                elements[-1][2].append((parts[4], "list", parts[2], parts[3]))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise ParseError(f"{path}: line {lineno}: unknown type {parts[1]!r}")
                elements[-1][2].append((parts[2], parts[1]))
        else:
            raise ParseError(f"{path}: line {lineno}: unexpected header record {parts[0]!r}")
    if fmt not in ("ascii", "binary_little_endian"):
        raise ParseError(f"{path}: unsupported PLY format {fmt!r}")
    return fmt, elements, lineno


def read_ply(path):
    """ASCII or binary little-endian PLY with ``x y z`` and a face list."""
    with open(path, "rb") as fh:
        fmt, elements, lineno = _ply_header(fh, path)
        body = fh.read()
    verts = faces = None
    if fmt == "ascii":
        lines = body.decode("ascii", "replace").splitlines()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                while pos < len(lines) and not lines[pos].strip():
                    pos += 1
                if pos >= len(lines):
                    raise ParseError(f"{path}: line {lineno + pos + 1}: missing {name} record")
                toks = lines[pos].split()
                try:
                    row, k = [], 0
                    for p in props:
                        if p[1] == "list":
                            n = int(toks[k])
                            row.append([int(t) for t in toks[k + 1:k + 1 + n]])
                            if len(row[-1]) != n:
                                raise ValueError("short list")
                            k += 1 + n
                        else:
                            row.append(float(toks[k]))
                            k += 1
                except (ValueError, IndexError) as exc:
                    raise ParseError(f"{path}: line {lineno + pos + 1}: {exc}") from None
                rows.append(row)
                pos += 1
            verts, faces = _collect(name, props, rows, verts, faces)
    else:
        off = 0
        for name, count, props in elements:
            if all(p[1] != "list" for p in props):
                dt = np.dtype([(p[0], "<" + _PLY_TYPES[p[1]]) for p in props])
                need = dt.itemsize * count
                if off + need > len(body):
                    raise ParseError(f"{path}: byte {off}: truncated {name} data")
                arr = np.frombuffer(body, dtype=dt, count=count, offset=off)
                off += need
                rows = [[float(r[p[0]]) for p in props] for r in arr] if name != "vertex" else arr
            else:
                rows = []
                for _ in range(count):
                    row = []
                    for p in props:
                        try:
                            if p[1] == "list":
                                ct = np.dtype("<" + _PLY_TYPES[p[2]])
                                it = np.dtype("<" + _PLY_TYPES[p[3]])
                                (n,) = np.frombuffer(body, ct, 1, off)
                                off += ct.itemsize
                                row.append(np.frombuffer(body, it, int(n), off).astype(np.int64).tolist())
                                off += it.itemsize * int(n)
                            else:
                                t = np.dtype("<" + _PLY_TYPES[p[1]])
                                row.append(float(np.frombuffer(body, t, 1, off)[0]))
                                off += t.itemsize
                        except ValueError:
                            raise ParseError(f"{path}: byte {off}: truncated {name} data") from None
                    rows.append(row)
            verts, faces = _collect(name, props, rows, verts, faces)
    if verts is None:
        raise ParseError(f"{path}: no vertex element")
    faces = np.zeros((0, 3), dtype=np.int64) if faces is None else faces
    try:
        return Mesh(verts, faces)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None


def _collect(name, props, rows, verts, faces):
    names = [p[0] for p in props]
    if name == "vertex":
        if not {"x", "y", "z"} <= set(names):
            raise ParseError("vertex element lacks x, y, z")
        if isinstance(rows, np.ndarray):
            verts = np.column_stack([rows["x"], rows["y"], rows["z"]]).astype(np.float64)
        else:
            ix = [names.index(c) for c in "xyz"]
            verts = np.array([[r[i] for i in ix] for r in rows], dtype=np.float64).reshape(-1, 3)
    elif name == "face":
        li = [i for i, p in enumerate(props) if p[1] == "list"]
        if not li:
            raise ParseError("face element lacks a vertex list")
        tris = [t for r in rows for t in _fan(r[li[0]])]
        faces = np.array(tris, dtype=np.int64).reshape(-1, 3)
    return verts, faces


def write_ply(mesh, path, binary=True):
    """PLY with double-precision vertices (bit-exact round trip)."""
    v = np.asarray(mesh.vertices, dtype="<f8")
    t = np.asarray(mesh.triangles, dtype="<i4")
    fmt = "binary_little_endian" if binary else "ascii"
    header = (
        f"ply\nformat {fmt} 1.0\nelement vertex {len(v)}\n"
        "property double x\nproperty double y\nproperty double z\n"
        f"element face {len(t)}\nproperty list uchar int vertex_indices\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(v.tobytes())
            rec = np.zeros(len(t), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"] = 3
            rec["i"] = t
            fh.write(rec.tobytes())
        else:
            for x, y, z in v:
                fh.write(f"{float(x)!r} {float(y)!r} {float(z)!r}\n".encode("ascii"))
            for a, b, c in t:
                fh.write(f"3 {a} {b} {c}\n".encode("ascii"))


def read_mesh(path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        return read_obj(path)
    if ext == ".ply":
        return read_ply(path)
    raise ParseError(f"{path}: unknown mesh format {ext!r}")


def write_mesh(mesh, path):
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".obj":
        return write_obj(mesh, path)
    if ext == ".ply":
        return write_ply(mesh, path)
    raise ValueError(f"unknown mesh format {ext!r}")


def write_correspondences(result, directory):
    """One PLY per face (shared vertex order), ``triangles.txt``, ``costs.csv``."""
    os.makedirs(directory, exist_ok=True)
    for f in range(result.n_faces):
        write_ply(Mesh(result.points[f], result.triangles), os.path.join(directory, f"face_{f:03d}.ply"))
    np.savetxt(os.path.join(directory, "triangles.txt"), result.triangles, fmt="%d")
    with open(os.path.join(directory, "costs.csv"), "w", encoding="utf-8") as fh:
        fh.write("point,cost,kind\n")
        for i, (c, k) in enumerate(zip(result.costs, result.kinds)):
            fh.write(f"{i},{c:.17g},{int(k)}\n")
    vid = os.path.join(directory, "vertex_ids.csv")
    np.savetxt(vid, result.vertex_ids.T, fmt="%d", delimiter=",")


def read_correspondences(directory):
    names = sorted(n for n in os.listdir(directory) if n.startswith("face_") and n.endswith(".ply"))
    if not names:
        raise ParseError(f"{directory}: no face_*.ply files")
    pts = np.stack([read_ply(os.path.join(directory, n)).vertices for n in names])
    tri = np.loadtxt(os.path.join(directory, "triangles.txt"), dtype=np.int64, ndmin=2).reshape(-1, 3)
    table = np.loadtxt(os.path.join(directory, "costs.csv"), delimiter=",", skiprows=1, ndmin=2)
    vid_path = os.path.join(directory, "vertex_ids.csv")
    vids = None
    if os.path.exists(vid_path):
        vids = np.loadtxt(vid_path, delimiter=",", dtype=np.int64, ndmin=2).reshape(pts.shape[1], -1).T
    return CorrespondedFaceSet(pts, table[:, 1], tri, vids, table[:, 2].astype(np.int8))

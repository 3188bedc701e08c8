"""Reader/writer for 3DGS binary little-endian PLY files."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .core import GaussianCloud
from .errors import ConfigError

SH_C0 = 0.28209479177387814

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}

REQUIRED = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
            "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def _parse_header(f):
    if f.readline().strip() != b"ply":
        raise ConfigError("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = f.readline()
        if not line:
            raise ConfigError("truncated PLY header")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise ConfigError("PLY property before element")
            if tok[1] == "list":
                raise ConfigError("list properties are not supported in Gaussian PLY")
            if tok[1] not in _PLY_TYPES:
                raise ConfigError(f"unknown PLY type {tok[1]!r}")
            elements[-1][2].append((tok[2], "<" + _PLY_TYPES[tok[1]]))
        elif tok[0] == "end_header":
            break
    if fmt != "binary_little_endian":
        raise ConfigError(f"unsupported PLY format {fmt!r}; expected binary_little_endian")
    return elements


def read_ply(path, label: str | None = None) -> GaussianCloud:
    """Load a Gaussian cloud. Higher-order SH (``f_rest_*``) and any other extra
    properties are ignored."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"asset not found: {path}")
    with open(path, "rb") as f:
        elements = _parse_header(f)
        data = None
        for name, count, props in elements:
            arr = np.fromfile(f, dtype=np.dtype(props), count=count)
            if len(arr) != count:
                raise ConfigError(f"{path}: truncated element {name!r}")
            if name == "vertex":
                data = arr
                break
    if data is None:
        raise ConfigError(f"{path}: no vertex element")
    missing = [p for p in REQUIRED if p not in data.dtype.names]
    if missing:
        raise ConfigError(f"{path}: missing properties {missing}")

    def cols(*names):
        return np.stack([data[n].astype(np.float64) for n in names], axis=1)

    dc = cols("f_dc_0", "f_dc_1", "f_dc_2")
    return GaussianCloud(
        positions=cols("x", "y", "z"),
        log_scales=cols("scale_0", "scale_1", "scale_2"),
        rotations=cols("rot_0", "rot_1", "rot_2", "rot_3"),
        opacity_logits=data["opacity"].astype(np.float64),
        colors=np.clip(0.5 + SH_C0 * dc, 0.0, 1.0),
        label=path.stem if label is None else label,
    )


def write_ply(path, cloud: GaussianCloud) -> None:
    """Write float32 properties in the standard 3DGS layout (no f_rest)."""
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
             "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    n = len(cloud)
    arr = np.zeros(n, dtype=[(p, "<f4") for p in names])
    for i, p in enumerate("xyz"):
        arr[p] = cloud.positions[:, i]
    dc = (cloud.colors - 0.5) / SH_C0
    for i in range(3):
        arr[f"f_dc_{i}"] = dc[:, i]
        arr[f"scale_{i}"] = cloud.log_scales[:, i]
    arr["opacity"] = cloud.opacity_logits
    for i in range(4):
        arr[f"rot_{i}"] = cloud.rotations[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {p}" for p in names]
    header.append("end_header")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(arr.tobytes())

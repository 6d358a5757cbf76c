"""
heightmap-eds 存储格式
HFLD 地形为定长二进制布局（见 save_heightfield）；
PCLD 点云、EPIS 轨迹、EDSW 检查点共用同一套记录帧：

    magic (4 字节) | version u16 | header_len u32 | header JSON (UTF-8) |
    record_count u32 | { record_len u32 | record } * record_count

所有整数为小端。每条记录是若干具名数组，布局见 docs/container_format.md。
另有 JSON manifest、16 位 PGM (P5，大端) 和 CSV 表格。
"""
import io
import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from errors import FormatError
from tools.geometry import HeightField, TerrainKind
from tools.range_image import CLIP_MAX, CLIP_MIN, MaskedImage, PointCloud

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

HEIGHTFIELD_MAGIC = b"HFLD"
POINTCLOUD_MAGIC = b"PCLD"
EPISODE_MAGIC = b"EPIS"
CHECKPOINT_MAGIC = b"EDSW"
FORMAT_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1

# 数组 dtype 编码
DTYPE_CODES = {
    np.dtype("<f4"): 1,
    np.dtype("<f8"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i8"): 4,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


# ---------------------------------------------------------------------------- 记录帧

def encode_arrays(arrays: Dict[str, np.ndarray]) -> bytes:
    """具名数组 → 字节：name_len u16 | name | dtype u8 | ndim u8 | dims u32*ndim | data"""
    buffer = io.BytesIO()
    for name, array in arrays.items():
        array = np.asarray(array)
        if array.dtype == np.bool_:
            array = array.astype(np.uint8)
        dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
        if dtype not in DTYPE_CODES:
            raise FormatError(f"unsupported dtype {array.dtype} for array {name}")
        encoded_name = name.encode("utf-8")
        buffer.write(struct.pack("<H", len(encoded_name)))
        buffer.write(encoded_name)
        buffer.write(struct.pack("<BB", DTYPE_CODES[dtype], array.ndim))
        buffer.write(struct.pack(f"<{array.ndim}I", *array.shape))
        buffer.write(np.ascontiguousarray(array, dtype=dtype).tobytes())
    return buffer.getvalue()


def decode_arrays(payload: bytes) -> Dict[str, np.ndarray]:
    arrays = {}
    offset = 0
    try:
        while offset < len(payload):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            code, ndim = struct.unpack_from("<BB", payload, offset)
            offset += 2
            shape = struct.unpack_from(f"<{ndim}I", payload, offset)
            offset += 4 * ndim
            dtype = CODE_DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(payload):
                raise FormatError(f"array {name} truncated")
            arrays[name] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize,
                                         offset=offset).reshape(shape).copy()
            offset += nbytes
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise FormatError(f"corrupt array record: {e}") from e
    return arrays


def write_container(path: PathLike, magic: bytes, header: Dict[str, Any],
                    records: List[Dict[str, np.ndarray]]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(magic)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(struct.pack("<I", len(records)))
        for record in records:
            payload = encode_arrays(record)
            f.write(struct.pack("<I", len(payload)))
            f.write(payload)


def read_container(path: PathLike, magic: bytes) -> Tuple[Dict[str, Any], List[Dict[str, np.ndarray]]]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != magic:
        raise FormatError(f"{path}: expected magic {magic!r}, found {data[:4]!r}")
    try:
        version, header_len = struct.unpack_from("<HI", data, 4)
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported format version {version}")
        offset = 10
        header = json.loads(data[offset:offset + header_len].decode("utf-8"))
        offset += header_len
        (count,) = struct.unpack_from("<I", data, offset)
        offset += 4
        records = []
        for _ in range(count):
            (length,) = struct.unpack_from("<I", data, offset)
            offset += 4
            if offset + length > len(data):
                raise FormatError(f"{path}: record truncated")
            records.append(decode_arrays(data[offset:offset + length]))
            offset += length
    except (struct.error, json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"{path}: corrupt container: {e}") from e
    return header, records


# ---------------------------------------------------------------------------- 地形

# magic | version u32 | origin_x f64 | origin_y f64 | cell_size f64 | nx u32 | ny u32
HEIGHTFIELD_HEADER = struct.Struct("<4sIdddII")


def save_heightfield(field: HeightField, path: PathLike, spec: Optional[Dict[str, Any]] = None):
    """
    定长 HFLD 布局：40 字节头 + nx·ny 个 float32 高程（行主序，i 沿 x）

    其后附加元数据块 (json_len u32 | JSON)，记录地形类别与生成参数；
    只按定长布局读取的工具可以忽略它。
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    nx, ny = field.elevations.shape
    meta = json.dumps({"terrain_kind": field.terrain_kind.value, "spec": spec}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(HEIGHTFIELD_HEADER.pack(HEIGHTFIELD_MAGIC, FORMAT_VERSION, field.origin_xy[0], field.origin_xy[1],
                                        field.cell_size, nx, ny))
        f.write(np.ascontiguousarray(field.elevations, dtype="<f4").tobytes())
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)
    logger.debug(f"地形已写出: {path} ({nx}x{ny})")


def load_heightfield(path: PathLike) -> HeightField:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != HEIGHTFIELD_MAGIC:
        raise FormatError(f"{path}: expected magic {HEIGHTFIELD_MAGIC!r}, found {data[:4]!r}")
    if len(data) < HEIGHTFIELD_HEADER.size:
        raise FormatError(f"{path}: heightfield header truncated")
    _, version, origin_x, origin_y, cell_size, nx, ny = HEIGHTFIELD_HEADER.unpack_from(data, 0)
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    end = HEIGHTFIELD_HEADER.size + nx * ny * 4
    if len(data) < end:
        raise FormatError(f"{path}: heightfield elevations truncated")
    elevations = np.frombuffer(data, dtype="<f4", count=nx * ny, offset=HEIGHTFIELD_HEADER.size).reshape(nx, ny)

    kind = TerrainKind.FLAT
    if len(data) > end:
        try:
            (meta_len,) = struct.unpack_from("<I", data, end)
            if end + 4 + meta_len > len(data):
                raise FormatError(f"{path}: heightfield metadata truncated")
            meta = json.loads(data[end + 4:end + 4 + meta_len].decode("utf-8"))
            kind = TerrainKind(meta["terrain_kind"])
        except (struct.error, json.JSONDecodeError, UnicodeDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{path}: corrupt heightfield metadata: {e}") from e
    return HeightField(origin_xy=(origin_x, origin_y), cell_size=cell_size, elevations=elevations,
                       terrain_kind=kind)


# ---------------------------------------------------------------------------- 点云

def save_point_cloud(cloud: PointCloud, path: PathLike):
    write_container(path, POINTCLOUD_MAGIC, {"count": len(cloud)}, [{
        "points": cloud.points.astype(np.float32),
        "rings": cloud.rings,
        "columns": cloud.columns,
    }])


def load_point_cloud(path: PathLike) -> PointCloud:
    header, records = read_container(path, POINTCLOUD_MAGIC)
    record = records[0] if records else {}
    if "points" not in record:
        raise FormatError(f"{path}: point cloud container has no points record")
    cloud = PointCloud(record["points"].astype(np.float64), record["rings"], record["columns"])
    if len(cloud) != header.get("count", len(cloud)):
        raise FormatError(f"{path}: header count {header.get('count')} != {len(cloud)} points")
    return cloud


# ---------------------------------------------------------------------------- 检查点

def save_checkpoint(path: PathLike, named_parameters, config: Dict[str, Any],
                    include_optimizer: bool = False, extra: Optional[Dict[str, Any]] = None):
    """EDSW：每个参数一条记录（value，可选 m / v），步数写在 header"""
    names = []
    steps = {}
    records = []
    for name, param in named_parameters:
        record = {"value": param.value.astype(np.float32)}
        if include_optimizer:
            record["m"] = param.m.astype(np.float32)
            record["v"] = param.v.astype(np.float32)
            steps[name] = param.step
        names.append(name)
        records.append(record)
    header = {"config": config, "parameters": names, "optimizer": include_optimizer,
              "steps": steps, "extra": extra or {}}
    write_container(path, CHECKPOINT_MAGIC, header, records)
    logger.info(f"检查点已保存: {path} ({len(names)} 个参数)")


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, Dict[str, np.ndarray]]]:
    """返回 (header, {参数名: {"value", ["m", "v"]}})"""
    header, records = read_container(path, CHECKPOINT_MAGIC)
    names = header.get("parameters", [])
    if len(names) != len(records):
        raise FormatError(f"{path}: {len(names)} parameter names but {len(records)} records")
    return header, dict(zip(names, records))


def restore_parameters(module, tensors: Dict[str, Dict[str, np.ndarray]], header: Dict[str, Any]):
    """把检查点写回模块（含可选的优化器状态）"""
    module.load_state_dict({name: record["value"] for name, record in tensors.items()})
    if header.get("optimizer"):
        for name, param in module.named_parameters():
            param.m = tensors[name]["m"].astype(param.value.dtype)
            param.v = tensors[name]["v"].astype(param.value.dtype)
            param.step = int(header["steps"].get(name, 0))


# ---------------------------------------------------------------------------- 轨迹

def save_episode(path: PathLike, header: Dict[str, Any], steps: List[Dict[str, np.ndarray]]):
    write_container(path, EPISODE_MAGIC, header, steps)


def load_episode_records(path: PathLike) -> Tuple[Dict[str, Any], List[Dict[str, np.ndarray]]]:
    return read_container(path, EPISODE_MAGIC)


# ---------------------------------------------------------------------------- JSON

def write_json(path: PathLike, document: Dict[str, Any]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(document, f, indent=2, sort_keys=True, ensure_ascii=False)


def read_json(path: PathLike) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: invalid JSON: {e}") from e


# ---------------------------------------------------------------------------- PGM / CSV

def write_pgm16(path: PathLike, pixels: np.ndarray):
    """16 位二进制 PGM (P5)，像素大端"""
    pixels = np.asarray(pixels)
    if pixels.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got {pixels.shape}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n65535\n".encode("ascii"))
        f.write(np.clip(pixels, 0, 65535).astype(">u2").tobytes())


def read_pgm16(path: PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    offset = 0
    while len(tokens) < 4:
        while data[offset:offset + 1].isspace():
            offset += 1
        start = offset
        while not data[offset:offset + 1].isspace():
            offset += 1
        tokens.append(data[start:offset])
    offset += 1
    if tokens[0] != b"P5" or int(tokens[3]) != 65535:
        raise FormatError(f"{path}: not a 16-bit P5 PGM")
    width, height = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data, dtype=">u2", count=width * height, offset=offset).reshape(height, width)


def range_to_pgm(image: MaskedImage, min_range: float = CLIP_MIN, max_range: float = CLIP_MAX) -> np.ndarray:
    """有效像素 [0.2, 3.0] 线性映射到 [1, 65535]，无效为 0"""
    scaled = 1.0 + np.round((np.clip(image.values, min_range, max_range) - min_range)
                            / (max_range - min_range) * 65534.0)
    return np.where(image.valid, scaled, 0).astype(np.uint16)


def write_range_pgm(path: PathLike, image: MaskedImage):
    write_pgm16(path, range_to_pgm(image))


def write_preview_pgm(path: PathLike, field: HeightField):
    """地形预览：最低点 → 0，最高点 → 65535；平地全 0。行为 y，列为 x"""
    z = field.elevations.T
    span = field.max_elevation - field.min_elevation
    if span <= 0:
        pixels = np.zeros(z.shape, dtype=np.uint16)
    else:
        pixels = np.round((z - field.min_elevation) / span * 65535.0).astype(np.uint16)
    write_pgm16(path, pixels)


def write_error_map_pgm(path: PathLike, error_map: np.ndarray, full_scale: Optional[float] = None):
    """误差图归一化到 16 位，full_scale 缺省取最大误差"""
    full_scale = full_scale or float(error_map.max()) or 1.0
    write_pgm16(path, np.round(np.clip(error_map / full_scale, 0.0, 1.0) * 65535.0))


def write_grid_csv(path: PathLike, grid: np.ndarray):
    """nx 行 × ny 列，单位米"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(np.asarray(grid)).to_csv(path, header=False, index=False, float_format="%.6f")


def write_table_csv(path: PathLike, rows: List[Dict[str, Any]]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pd.DataFrame(rows).to_csv(path, index=False)

import io
import json
import struct
import zlib

import numpy as np
import torch

from .errors import FormatError

MAGIC = b"ARSG"
VERSION = 1

# ARSG dtype tag -> little-endian numpy dtype.
_dtypes = {
    "u8": np.dtype("<u1"),
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "i64": np.dtype("<i8"),
}
_tags = {np.dtype(v).newbyteorder("="): k for k, v in _dtypes.items()}


# region Encoding


def _as_array(value):
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    array = np.asarray(value)
    if array.dtype == np.bool_:
        array = array.astype(np.uint8)
    key = array.dtype.newbyteorder("=")
    if key not in _tags:
        raise FormatError("Unsupported dtype for ARSG encoding: {}".format(array.dtype))
    return array


def dtype_tag(value):
    array = _as_array(value)
    return _tags[array.dtype.newbyteorder("=")]


def write_bytes(writer, value):
    """
    Serialize an array into the ARSG format using the provided writer.
    :param writer: a callable accepting bytes (e.g. the write method of a binary file or BytesIO)
    :param value: numpy array or torch tensor with dtype uint8, float32, float64 or int64
    :return: number of bytes written
    """
    array = _as_array(value)
    tag = _tags[array.dtype.newbyteorder("=")]
    header = json.dumps({"dtype": tag, "shape": list(array.shape)}, sort_keys=True, separators=(",", ":")).encode()
    payload = np.ascontiguousarray(array, dtype=_dtypes[tag]).tobytes(order="C")
    chunks = [MAGIC, struct.pack("<B", VERSION), struct.pack("<I", len(header)), header, payload]
    for chunk in chunks:
        writer(chunk)
    return sum(len(chunk) for chunk in chunks)


def encode(value):
    data_io = io.BytesIO()
    write_bytes(data_io.write, value)
    return data_io.getvalue()


def decode(data, name="<bytes>"):
    """
    Parse ARSG bytes back into a numpy array.
    :param data: the raw file content
    :param name: name used in error messages, typically the file path
    :return: numpy array with native byte order
    """
    if len(data) < 9 or data[:4] != MAGIC:
        raise FormatError("{}: bad magic, not an ARSG tensor file".format(name))
    version = data[4]
    if version != VERSION:
        raise FormatError("{}: unsupported ARSG version {} (expected {})".format(name, version, VERSION))
    header_length = struct.unpack("<I", data[5:9])[0]
    if len(data) < 9 + header_length:
        raise FormatError("{}: truncated header".format(name))
    try:
        header = json.loads(data[9:9 + header_length].decode())
        dtype = _dtypes[header["dtype"]]
        shape = tuple(int(s) for s in header["shape"])
    except (ValueError, KeyError, TypeError) as ex:
        raise FormatError("{}: malformed header ({})".format(name, ex))
    if any(s < 0 for s in shape):
        raise FormatError("{}: negative dimension in shape {}".format(name, list(shape)))
    payload = data[9 + header_length:]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(payload) != expected:
        raise FormatError("{}: payload has {} bytes, shape {} needs {}".format(name, len(payload), list(shape), expected))
    return np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


# endregion

# region Files


def write_tensor(path, value):
    """
    Write an array to an ARSG file.
    :return: CRC-32 of the written file
    """
    data = encode(value)
    with open(path, "wb") as f:
        f.write(data)
    return zlib.crc32(data)


def read_tensor(path, crc32=None):
    """
    Read an ARSG file.
    :param path: path to the file
    :param crc32: expected checksum (optional); a mismatch raises a FormatError
    :return: numpy array
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except FileNotFoundError:
        raise FormatError("{}: file is missing".format(path))
    if crc32 is not None and zlib.crc32(data) != crc32:
        raise FormatError("{}: checksum mismatch".format(path))
    return decode(data, name=str(path))


def file_crc32(path):
    with open(path, "rb") as f:
        return zlib.crc32(f.read())

# endregion

"""Binary wire protocol for patch submission.

Frame, little-endian throughout:
  magic "SPF1" | u8 msg_type | u32 body_len | body
Types: 1 = predict, 2 = health, 255 = error.

Predict request body:
  u8 version=1 | u64 request_id | u8 k | k x (u16 size | u8 channels | pixels)
with 8-bit pixels in channel-major row-major order. The request encoder
accepts only PatchSet values: there is deliberately no code path that
serialises a full face image.
"""

import struct

import numpy as np

from .errors import ProtocolError
from .pem import PatchSet

MAGIC = b"SPF1"
VERSION = 1
HEADER_LEN = 9  # magic + type + body length

MSG_PREDICT = 1
MSG_HEALTH = 2
MSG_ERROR = 255

MAX_BODY = 4 * 1024 * 1024

ERR_MALFORMED = 1
ERR_ARITY = 2
ERR_VERSION = 3
ERR_TYPE = 4
ERR_LENGTH = 5
ERR_INTERNAL = 6
ERR_BUSY = 7

ERROR_NAMES = {ERR_MALFORMED: "MALFORMED", ERR_ARITY: "ARITY",
               ERR_VERSION: "VERSION", ERR_TYPE: "TYPE",
               ERR_LENGTH: "LENGTH", ERR_INTERNAL: "INTERNAL",
               ERR_BUSY: "BUSY"}


def quantize(patch):
    """float [0,1] -> u8 wire pixels."""
    return np.clip(np.rint(np.asarray(patch) * 255.0), 0, 255).astype(np.uint8)


def dequantize(raw, shape):
    return (np.frombuffer(raw, dtype=np.uint8).reshape(shape)
            .astype(np.float32) / 255.0)


def encode_frame(msg_type, body):
    return MAGIC + struct.pack("<BI", msg_type, len(body)) + body


def parse_header(header):
    if len(header) != HEADER_LEN:
        raise ProtocolError("MALFORMED", f"short header ({len(header)} bytes)")
    if header[:4] != MAGIC:
        raise ProtocolError("MALFORMED", f"bad magic {header[:4]!r}")
    msg_type, body_len = struct.unpack("<BI", header[4:])
    if body_len > MAX_BODY:
        raise ProtocolError("LENGTH", f"body of {body_len} bytes exceeds the "
                            f"{MAX_BODY} byte cap")
    return msg_type, body_len


def read_frame(reader):
    """Read one frame from a binary stream; None on clean EOF."""
    header = reader.read(HEADER_LEN)
    if not header:
        return None
    msg_type, body_len = parse_header(header)
    body = reader.read(body_len)
    if len(body) != body_len:
        raise ProtocolError("LENGTH", f"truncated body: expected {body_len} "
                            f"bytes, got {len(body)}")
    return msg_type, body


# ------------------------------------------------------------------- predict

def encode_predict_request(patchset, request_id):
    if not isinstance(patchset, PatchSet):
        raise TypeError("the request serialiser accepts PatchSet values only")
    k = patchset.k
    parts = [struct.pack("<BQB", VERSION, request_id, k)]
    for patch in patchset.patches:
        u8 = quantize(patch)
        _, c, s, s2 = u8.shape
        parts.append(struct.pack("<HB", s, c))
        parts.append(u8.tobytes())
    return encode_frame(MSG_PREDICT, b"".join(parts))


def decode_predict_request(body):
    """-> (request_id, [float32 (1,3,S,S) patches]); raises ProtocolError."""
    if len(body) < 10:
        raise ProtocolError("MALFORMED", f"predict body too short ({len(body)})")
    version, request_id, k = struct.unpack("<BQB", body[:10])
    if version != VERSION:
        raise ProtocolError("VERSION", f"unsupported protocol version {version}")
    if k not in (1, 2, 3):
        raise ProtocolError("ARITY", f"k must be 1, 2 or 3, got {k}")
    pos = 10
    patches = []
    size = None
    for i in range(k):
        if pos + 3 > len(body):
            raise ProtocolError("MALFORMED", f"patch {i} header truncated")
        s, c = struct.unpack("<HB", body[pos:pos + 3])
        pos += 3
        if c != 3:
            raise ProtocolError("MALFORMED", f"patch {i} has {c} channels, want 3")
        if s == 0:
            raise ProtocolError("MALFORMED", f"patch {i} has zero size")
        if size is None:
            size = s
        elif s != size:
            raise ProtocolError("MALFORMED", f"patch {i} size {s} differs from {size}")
        n = 3 * s * s
        if pos + n > len(body):
            raise ProtocolError("LENGTH", f"patch {i} pixels truncated")
        patches.append(dequantize(body[pos:pos + n], (1, 3, s, s)))
        pos += n
    if pos != len(body):
        raise ProtocolError("LENGTH", f"{len(body) - pos} trailing bytes in "
                            "predict body")
    return request_id, patches


def encode_predict_response(request_id, p_bona_fide, label, infer_ms, digest):
    raw = bytes.fromhex(digest)
    body = struct.pack("<QfBf", request_id, p_bona_fide, int(label), infer_ms)
    body += struct.pack("<B", len(raw)) + raw
    return encode_frame(MSG_PREDICT, body)


def decode_predict_response(body):
    if len(body) < 18:
        raise ProtocolError("MALFORMED", "predict response too short")
    request_id, p, label, infer_ms = struct.unpack("<QfBf", body[:17])
    (dlen,) = struct.unpack("<B", body[17:18])
    digest = body[18:18 + dlen]
    if len(digest) != dlen:
        raise ProtocolError("LENGTH", "digest truncated in predict response")
    return request_id, float(p), int(label), float(infer_ms), digest.hex()


# -------------------------------------------------------------------- health

def encode_health_request():
    return encode_frame(MSG_HEALTH, b"")


def encode_health_response(digest):
    raw = bytes.fromhex(digest)
    return encode_frame(MSG_HEALTH, struct.pack("<BB", VERSION, len(raw)) + raw)


def decode_health_response(body):
    if len(body) < 2:
        raise ProtocolError("MALFORMED", "health response too short")
    version, dlen = struct.unpack("<BB", body[:2])
    digest = body[2:2 + dlen]
    if len(digest) != dlen:
        raise ProtocolError("LENGTH", "digest truncated in health response")
    return version, digest.hex()


# --------------------------------------------------------------------- error

_CODE_BY_NAME = {v: k for k, v in ERROR_NAMES.items()}


def encode_error(code_name, message):
    code = _CODE_BY_NAME.get(code_name, ERR_INTERNAL)
    msg = message.encode("utf-8")[:1024]
    return encode_frame(MSG_ERROR, struct.pack("<HH", code, len(msg)) + msg)


def decode_error(body):
    if len(body) < 4:
        raise ProtocolError("MALFORMED", "error frame too short")
    code, mlen = struct.unpack("<HH", body[:4])
    msg = body[4:4 + mlen].decode("utf-8", errors="replace")
    return ERROR_NAMES.get(code, f"code-{code}"), msg

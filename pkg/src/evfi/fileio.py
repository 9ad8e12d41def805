"""Binary and text file formats: EVT1 events, FLO1 flows, EVFICKPT checkpoints, PPM/PGM images."""
from __future__ import annotations

import csv
import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from evfi.events import EventStream

EVT_MAGIC = b"EVT1"
FLO_MAGIC = b"FLO1"
CKPT_MAGIC = b"EVFICKPT"
CKPT_VERSION = 1

_EVT_RECORD = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "i1")])


class FormatError(ValueError):
    """Malformed or truncated file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        avail = len(self.buf) - self.pos
        if n > avail:
            raise FormatError(f"truncated {what}: expected {n} bytes, {avail} available", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected), "magic")
        if got != expected:
            raise FormatError(f"bad magic {got!r}, expected {expected!r}", 0)

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise FormatError(f"{len(self.buf) - self.pos} trailing bytes", self.pos)


# ---------------------------------------------------------------------------
# events
# ---------------------------------------------------------------------------


def encode_events(stream: EventStream) -> bytes:
    head = EVT_MAGIC + struct.pack("<HHQQQ", stream.width, stream.height, stream.t_start,
                                   stream.t_end, len(stream))
    rec = np.zeros(len(stream), dtype=_EVT_RECORD)
    rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
    return head + rec.tobytes()


def decode_events(buf: bytes) -> EventStream:
    r = _Reader(buf)
    r.magic(EVT_MAGIC)
    width, height, t_start, t_end, count = r.unpack("<HHQQQ", "event header")
    body = r.take(count * _EVT_RECORD.itemsize, "event records")
    r.done()
    rec = np.frombuffer(body, dtype=_EVT_RECORD)
    return EventStream(rec["t"], rec["x"], rec["y"], rec["p"], width, height, t_start, t_end)


def write_events(path, stream: EventStream) -> None:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        write_events_csv(path, stream)
    else:
        path.write_bytes(encode_events(stream))


def read_events(path, width: int | None = None, height: int | None = None) -> EventStream:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_events_csv(path, width, height)
    return decode_events(path.read_bytes())


def write_events_csv(path, stream: EventStream) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# width={stream.width} height={stream.height} t_start={stream.t_start} t_end={stream.t_end}\n")
        w = csv.writer(fh)
        w.writerow(["t_us", "x", "y", "p"])
        w.writerows(zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()))


def read_events_csv(path, width: int | None = None, height: int | None = None) -> EventStream:
    meta = {}
    rows = []
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if ln.strip()]
    body = []
    for ln in lines:
        if ln.startswith("#"):
            for tok in ln[1:].split():
                k, _, v = tok.partition("=")
                meta[k] = int(v)
        else:
            body.append(ln)
    reader = csv.reader(body)
    header = next(reader, None)
    if header != ["t_us", "x", "y", "p"]:
        raise FormatError(f"unexpected CSV header {header}", 0)
    for row in reader:
        rows.append(tuple(int(v) for v in row))
    t = [r[0] for r in rows]
    x = [r[1] for r in rows]
    y = [r[2] for r in rows]
    p = [r[3] for r in rows]
    width = meta.get("width", width if width is not None else (max(x) + 1 if x else 1))
    height = meta.get("height", height if height is not None else (max(y) + 1 if y else 1))
    t_start = meta.get("t_start", min(t) if t else 0)
    t_end = meta.get("t_end", max(t) if t else 0)
    return EventStream(t, x, y, p, width, height, t_start, t_end)


# ---------------------------------------------------------------------------
# flows
# ---------------------------------------------------------------------------


def encode_flow(flow: np.ndarray) -> bytes:
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise ValueError(f"flow must be 2 x H x W, got {flow.shape}")
    _, h, w = flow.shape
    inter = np.ascontiguousarray(flow.transpose(1, 2, 0), dtype="<f4")
    return FLO_MAGIC + struct.pack("<II", w, h) + inter.tobytes()


def decode_flow(buf: bytes) -> np.ndarray:
    r = _Reader(buf)
    r.magic(FLO_MAGIC)
    w, h = r.unpack("<II", "flow header")
    body = r.take(2 * h * w * 4, "flow data")
    r.done()
    return np.frombuffer(body, dtype="<f4").reshape(h, w, 2).transpose(2, 0, 1).astype(np.float32)


def write_flow(path, flow: np.ndarray) -> None:
    Path(path).write_bytes(encode_flow(flow))


def read_flow(path) -> np.ndarray:
    return decode_flow(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def encode_checkpoint(params: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(CKPT_MAGIC)
    out.write(struct.pack("<II", CKPT_VERSION, len(params)))
    for name, arr in params.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw)))
        out.write(raw)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    r.magic(CKPT_MAGIC)
    version, count = r.unpack("<II", "checkpoint header")
    if version != CKPT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", len(CKPT_MAGIC))
    params = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "parameter name").decode("utf-8")
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", "dims")
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * n, f"data of {name!r}"), dtype="<f4").reshape(dims)
        params[name] = data.astype(np.float32)
    r.done()
    return params


def save_checkpoint(path, params: dict[str, np.ndarray]) -> str:
    buf = encode_checkpoint(params)
    Path(path).write_bytes(buf)
    return hashlib.sha256(buf).hexdigest()


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return decode_checkpoint(path.read_bytes())


def checkpoint_digest(params: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(encode_checkpoint(params)).hexdigest()


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pnm(frame: np.ndarray) -> bytes:
    """Binary PGM (1 channel) or PPM (3 channels) from a C x H x W frame in [0, 1]."""
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[None]
    c, h, w = frame.shape
    if c not in (1, 3):
        raise ValueError(f"images need 1 or 3 channels, got {c}")
    px = frame if frame.dtype == np.uint8 else to_uint8(frame)
    tag = b"P5" if c == 1 else b"P6"
    return tag + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(px.transpose(1, 2, 0)).tobytes()


def decode_pnm(buf: bytes) -> np.ndarray:
    """Returns a uint8 C x H x W array."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated image header", pos)
        tokens.append(buf[start:pos])
    pos += 1
    tag, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if tag not in (b"P5", b"P6"):
        raise FormatError(f"unsupported image type {tag!r}", 0)
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}", 0)
    c = 1 if tag == b"P5" else 3
    r = _Reader(buf)
    r.pos = pos
    body = r.take(w * h * c, "pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c).transpose(2, 0, 1).copy()


def write_image(path, frame: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(frame))


def read_image(path) -> np.ndarray:
    """C x H x W float frame in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    return decode_pnm(path.read_bytes()).astype(np.float64) / 255.0

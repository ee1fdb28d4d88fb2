"""Recording container codecs.

``.eegr`` holds one raw recording, ``.eegw`` one windowed recording. Both use
an ASCII ``key: value`` header terminated by a blank line, followed by a
little-endian float32 payload in channel-major (C) order. Payload sizes are
fully determined by the header, so truncation is detectable. CSV import reads
one channel per column with a header row of channel names.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np

from .errors import ParseError
from .signal import Recording, WindowedRecording

MAGIC_RECORDING = "eegr 1"
MAGIC_WINDOWED = "eegw 1"


def _format_header(magic: str, fields: dict) -> bytes:
    lines = [magic]
    for k, v in fields.items():
        if v is None:
            continue
        lines.append(f"{k}: {v}")
    return ("\n".join(lines) + "\n\n").encode("ascii")


def _parse_header(data: bytes, magic: str, path) -> tuple[dict, int]:
    sep = data.find(b"\n\n")
    if sep < 0:
        raise ParseError(f"{path}: header terminator not found",
                         offset=len(data))
    try:
        head = data[:sep].decode("ascii")
    except UnicodeDecodeError as e:
        raise ParseError(f"{path}: header is not ASCII", offset=e.start) from None
    lines = head.split("\n")
    if lines[0] != magic:
        raise ParseError(f"{path}: expected magic {magic!r}, got {lines[0]!r}",
                         offset=0)
    fields = {}
    offset = len(lines[0]) + 1
    for line in lines[1:]:
        if ": " not in line:
            raise ParseError(f"{path}: malformed header line {line!r}",
                             offset=offset)
        k, v = line.split(": ", 1)
        fields[k] = v
        offset += len(line) + 1
    return fields, sep + 2


def _require(fields: dict, keys, path):
    missing = [k for k in keys if k not in fields]
    if missing:
        raise ParseError(f"{path}: header missing keys {missing}", offset=0)


def _payload(data: bytes, start: int, count: int, path) -> np.ndarray:
    expected = count * 4
    actual = len(data) - start
    if actual != expected:
        raise ParseError(
            f"{path}: payload holds {actual} bytes, header implies {expected}",
            offset=len(data) if actual < expected else start + expected)
    return np.frombuffer(data, dtype="<f4", count=count, offset=start)


def write_recording(path, rec: Recording) -> None:
    header = _format_header(MAGIC_RECORDING, {
        "channels": rec.channels,
        "samples": rec.n_samples,
        "rate": repr(float(rec.sample_rate)),
        "names": ",".join(rec.channel_names),
        "label": rec.label,
        "subject": rec.subject,
        "age": None if rec.age is None else repr(float(rec.age)),
        "sex": rec.sex,
        "id": rec.rec_id,
    })
    payload = np.ascontiguousarray(rec.samples, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_recording(path) -> Recording:
    data = Path(path).read_bytes()
    fields, start = _parse_header(data, MAGIC_RECORDING, path)
    _require(fields, ["channels", "samples", "rate", "names"], path)
    try:
        channels = int(fields["channels"])
        samples = int(fields["samples"])
        rate = float(fields["rate"])
    except ValueError as e:
        raise ParseError(f"{path}: bad numeric header field: {e}", offset=0) from None
    flat = _payload(data, start, channels * samples, path)
    return Recording(
        flat.reshape(channels, samples).copy(), rate,
        fields["names"].split(","),
        label=fields.get("label"),
        subject=fields.get("subject"),
        age=float(fields["age"]) if "age" in fields else None,
        sex=fields.get("sex"),
        rec_id=fields.get("id"))


def write_windowed(path, wrec: WindowedRecording) -> None:
    n, c, w = wrec.windows.shape
    header = _format_header(MAGIC_WINDOWED, {
        "windows": n,
        "channels": c,
        "width": w,
        "stride": wrec.stride,
        "label": wrec.label,
        "subject": wrec.subject,
        "age": None if wrec.age is None else repr(float(wrec.age)),
        "sex": wrec.sex,
        "id": wrec.rec_id,
    })
    payload = np.ascontiguousarray(wrec.windows, dtype="<f4").tobytes()
    Path(path).write_bytes(header + payload)


def read_windowed(path) -> WindowedRecording:
    data = Path(path).read_bytes()
    fields, start = _parse_header(data, MAGIC_WINDOWED, path)
    _require(fields, ["windows", "channels", "width", "stride"], path)
    n = int(fields["windows"])
    c = int(fields["channels"])
    w = int(fields["width"])
    flat = _payload(data, start, n * c * w, path)
    return WindowedRecording(
        flat.reshape(n, c, w).copy(), int(fields["stride"]),
        rec_id=fields.get("id"), label=fields.get("label"),
        subject=fields.get("subject"),
        age=float(fields["age"]) if "age" in fields else None,
        sex=fields.get("sex"))


def read_csv_recording(path, sample_rate: float, label: str | None = None,
                       subject: str | None = None,
                       rec_id: str | None = None) -> Recording:
    """One channel per column; first row holds channel names."""
    text = Path(path).read_text()
    first, _, rest = text.partition("\n")
    names = [c.strip() for c in first.split(",")]
    try:
        table = np.loadtxt(io.StringIO(rest), delimiter=",", dtype=np.float64,
                           ndmin=2)
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from None
    if table.shape[1] != len(names):
        raise ParseError(
            f"{path}: {table.shape[1]} columns but {len(names)} header names")
    return Recording(np.ascontiguousarray(table.T, dtype=np.float32),
                     sample_rate, names, label=label, subject=subject,
                     rec_id=rec_id or Path(path).stem)


def load_recordings(paths) -> list[Recording]:
    """Read a mixed list of .eegr/.csv files (CSV assumes 100 Hz unless
    the caller reads it directly with a rate)."""
    out = []
    for p in paths:
        p = Path(p)
        if p.suffix == ".csv":
            out.append(read_csv_recording(p, 100.0))
        else:
            out.append(read_recording(p))
    return out

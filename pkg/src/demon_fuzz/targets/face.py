"""T1: run-length image decoding followed by window-based face detection.

Input format (little-endian)::

    b"SDIM" | width:u16 | height:u16 | (count:u8, value:u8)*

An image is valid when ``width * height <= 65536`` and the run counts sum
to exactly ``width * height``. Zero-count runs are legal and carry no
pixels.

Planted bug (vulnerable variant): the decoder treats a zero-count run as an
end-of-image marker and stops, leaving every remaining pixel at 0, even
though the file validated. A face that sits after such a run disappears
from the decoded grid while any correct decoder still renders it.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

from ..steering import (
    AttackSurfaceComponent as C,
    ExecContext,
    ImpactClass as I,
    OracleSpec,
    Phase,
    Rejection,
    TargetHarness,
    make_sites,
)

MAGIC = b"SDIM"
MAX_PIXELS = 65536
WINDOW = 8
BAND = (96, 160)

FACE_FOUND = "face-found"
NO_FACE = "no-face"


@dataclass(frozen=True)
class DetectorConfig:
    window: int = WINDOW
    band_low: int = BAND[0]
    band_high: int = BAND[1]

    def __post_init__(self):
        if self.band_low > self.band_high:
            raise ValueError("detector band bounds out of order")


@dataclass(frozen=True)
class RleImage:
    width: int
    height: int
    runs: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class FaceInput:
    image: RleImage
    pixels: bytes


_SITES = make_sites("t1", [
    ("header", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("bad-magic", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("dims-overflow", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("odd-payload", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("run", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("zero-run", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("run-mismatch", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("decode-run", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("decode-stop", Phase.PARSE, C.FEATURE_EXTRACTION),
    ("tiny-grid", Phase.EXECUTE, C.PREDICTION),
    ("window", Phase.EXECUTE, C.PREDICTION),
    ("window-dark", Phase.EXECUTE, C.PREDICTION),
    ("window-bright", Phase.EXECUTE, C.PREDICTION),
    ("window-face", Phase.EXECUTE, C.PREDICTION),
    ("no-face", Phase.EXECUTE, C.PREDICTION),
])
S = {s.name: s.site_id for s in _SITES}


def encode(width: int, height: int, pixels: Sequence[int], max_run: int = 255) -> bytes:
    """Encode a row-major grid; runs never exceed ``max_run`` pixels."""
    if len(pixels) != width * height:
        raise ValueError("pixel count does not match dimensions")
    if not 1 <= max_run <= 255:
        raise ValueError("max_run must be in 1..255")
    out = bytearray(MAGIC + struct.pack("<HH", width, height))
    i = 0
    n = len(pixels)
    while i < n:
        v = pixels[i]
        j = i + 1
        while j < n and pixels[j] == v and j - i < max_run:
            j += 1
        out += bytes((j - i, v))
        i = j
    return bytes(out)


def parse_header(data: bytes, ctx: ExecContext | None = None) -> RleImage:
    """Validate the container and return the run list; raises :class:`Rejection`."""
    visit = ctx.visit if ctx is not None else _no_visit
    visit(S["header"])
    if len(data) < 8:
        raise Rejection("short header")
    if data[:4] != MAGIC:
        visit(S["bad-magic"])
        raise Rejection("bad magic")
    width, height = struct.unpack_from("<HH", data, 4)
    total = width * height
    if total > MAX_PIXELS:
        visit(S["dims-overflow"])
        raise Rejection("dimension overflow")
    payload = data[8:]
    if len(payload) % 2:
        visit(S["odd-payload"])
        raise Rejection("truncated run pair")
    counts = payload[0::2]
    values = payload[1::2]
    seen = 0
    for c in counts:
        if c:
            visit(S["run"])
            seen += c
        else:
            visit(S["zero-run"])
    if seen != total:
        visit(S["run-mismatch"])
        raise Rejection("short payload" if seen < total else "overlong payload")
    return RleImage(width, height, tuple(zip(counts, values)))


def _no_visit(site: int) -> None:
    pass


def decode_reference(image: RleImage) -> bytes:
    """Correct decoder: zero-count runs contribute nothing and decoding continues."""
    out = bytearray()
    for count, value in image.runs:
        if count:
            out += bytes((value,)) * count
    return bytes(out)


def decode(image: RleImage, vulnerable: bool, ctx: ExecContext | None = None) -> bytes:
    visit = ctx.visit if ctx is not None else _no_visit
    total = image.width * image.height
    out = bytearray()
    for count, value in image.runs:
        if count == 0:
            if vulnerable:
                visit(S["decode-stop"])
                break
            continue
        visit(S["decode-run"])
        out += bytes((value,)) * count
    if len(out) < total:
        out += bytes(total - len(out))
    return bytes(out)


def detect(pixels: bytes, width: int, height: int, config: DetectorConfig = DetectorConfig(),
           ctx: ExecContext | None = None) -> str:
    """Face-found iff some aligned window's mean intensity lies in the band."""
    win = config.window
    if width < win or height < win:
        if ctx is not None:
            ctx.visit(S["tiny-grid"])
        return NO_FACE
    area = win * win
    lo, hi = config.band_low * area, config.band_high * area
    for wy in range(height // win):
        base = wy * win * width
        for wx in range(width // win):
            x0 = base + wx * win
            total = 0
            for r in range(win):
                start = x0 + r * width
                total += sum(pixels[start:start + win])
            if ctx is not None:
                ctx.step()
                ctx.visit(S["window"])
            if lo <= total <= hi:
                if ctx is not None:
                    ctx.visit(S["window-face"])
                return FACE_FOUND
            if ctx is not None:
                ctx.visit(S["window-dark"] if total < lo else S["window-bright"])
    if ctx is not None:
        ctx.visit(S["no-face"])
    return NO_FACE


class FaceHarness(TargetHarness):
    name = "t1"
    description = "RLE image decoder + 8x8 window face detector (partial-rendering evasion)"
    ORACLES = (
        OracleSpec("t1-evasion", C.PREDICTION, I.EVASION,
                   "detector reports no face while a reference decoding of the same file shows one"),
        OracleSpec("t1-no-face", C.PREDICTION, I.EVASION,
                   "detector reports no face (literal decision assertion; opt-in)",
                   default_enabled=False),
    )
    SITES = _SITES
    default_step_budget = 4096

    def parse(self, data: bytes, ctx: ExecContext) -> FaceInput:
        image = parse_header(data, ctx)
        return FaceInput(image, decode(image, self.vulnerable, ctx))

    def execute(self, parsed: FaceInput, ctx: ExecContext) -> str:
        img = parsed.image
        label = detect(parsed.pixels, img.width, img.height, ctx=ctx)
        if label == NO_FACE:
            ctx.assert_decision("t1-no-face", True, "no face found")
            if ctx.oracle_enabled("t1-evasion"):
                ref_pixels = decode_reference(img)
                if ref_pixels != parsed.pixels:
                    ref_label = detect(ref_pixels, img.width, img.height)
                    ctx.assert_decision("t1-evasion", ref_label == FACE_FOUND,
                                        "reference decoding shows a face")
        return label


def seed_image() -> bytes:
    """24x24 dark frame with one bright 8x8 block in the centre window."""
    w = h = 24
    px = bytearray(w * h)
    for y in range(8, 16):
        for x in range(8, 16):
            px[y * w + x] = 128
    return encode(w, h, px, max_run=8)


def evasion_witness() -> bytes:
    """The seed with a zero-count run spliced in ahead of all pixel data."""
    seed = seed_image()
    return seed[:8] + b"\x00\x00" + seed[8:]

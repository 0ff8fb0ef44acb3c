"""128x32 monochrome framebuffer, 5x7 font, word-wrapped (mirrored) text.

Mirroring is a horizontal flip of the whole framebuffer, which is what a
right-angle prism in front of the panel undoes.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .font5x7 import GLYPH_COLUMNS

WIDTH = 128
HEIGHT = 32
FIRST_CODE, LAST_CODE = 32, 126
BUNDLED_XBM = Path(__file__).with_name("font5x7.xbm")


class PbmError(ValueError):
    pass


class XbmError(ValueError):
    pass


class FrameBuffer:
    """Fixed 128x32 bit matrix, indexed ``bits[y, x]``."""

    __slots__ = ("bits",)

    def __init__(self, bits: np.ndarray | None = None):
        if bits is None:
            bits = np.zeros((HEIGHT, WIDTH), dtype=np.uint8)
        bits = np.asarray(bits)
        if bits.shape != (HEIGHT, WIDTH):
            raise ValueError(f"framebuffer must be {WIDTH}x{HEIGHT}")
        if not np.isin(bits, (0, 1)).all():
            raise ValueError("framebuffer cells must be 0 or 1")
        self.bits = bits.astype(np.uint8)

    def __eq__(self, other):
        return isinstance(other, FrameBuffer) and np.array_equal(self.bits, other.bits)

    __hash__ = None

    def __repr__(self):
        return f"FrameBuffer(lit={self.lit_count()})"

    def copy(self) -> "FrameBuffer":
        return FrameBuffer(self.bits.copy())

    def clear(self) -> None:
        self.bits[:] = 0

    def lit_count(self) -> int:
        return int(self.bits.sum())

    def is_blank(self) -> bool:
        return not self.bits.any()

    def ascii_art(self) -> str:
        return "\n".join("".join("#" if b else "." for b in row) for row in self.bits)


@dataclass
class Font:
    glyphs: dict[str, np.ndarray]  # each (glyph_height, glyph_width) uint8
    glyph_width: int = 5
    glyph_height: int = 7
    spacing: int = 1

    def __post_init__(self):
        for code in range(FIRST_CODE, LAST_CODE + 1):
            glyph = self.glyphs.get(chr(code))
            if glyph is None:
                raise ValueError(f"font lacks glyph for {chr(code)!r}")
            if glyph.shape != (self.glyph_height, self.glyph_width):
                raise ValueError(f"glyph {chr(code)!r} has shape {glyph.shape}")

    @property
    def cols(self) -> int:
        return WIDTH // (self.glyph_width + self.spacing)

    @property
    def rows(self) -> int:
        return HEIGHT // (self.glyph_height + self.spacing)

    def __eq__(self, other):
        if not isinstance(other, Font):
            return NotImplemented
        return (self.glyph_width, self.glyph_height, self.spacing) == (
            other.glyph_width, other.glyph_height, other.spacing
        ) and all(np.array_equal(self.glyphs[k], other.glyphs[k]) for k in self.glyphs)


def builtin_font() -> Font:
    glyphs = {}
    for ch, columns in GLYPH_COLUMNS.items():
        g = np.zeros((7, 5), dtype=np.uint8)
        for c, byte in enumerate(columns):
            for r in range(7):
                g[r, c] = (byte >> r) & 1
        glyphs[ch] = g
    return Font(glyphs)


# --------------------------------------------------------------------------
# Layout and rendering


def sanitize(text: str) -> str:
    """Whitespace becomes a space; anything outside printable ASCII becomes '?'."""
    out = []
    for ch in text:
        if ch.isspace():
            out.append(" ")
        elif FIRST_CODE <= ord(ch) <= LAST_CODE:
            out.append(ch)
        else:
            out.append("?")
    return "".join(out)


def layout_text(text: str, cols: int = 21, rows: int = 4) -> tuple[list[str], str]:
    """Greedy word wrap into at most ``rows`` lines of ``cols`` characters.

    Words longer than a line are hard-broken.  Returns the lines and the
    text that did not fit (starting at the first unplaced character).
    """
    text = sanitize(text)
    words = [(m.start(), m.end()) for m in re.finditer(r"\S+", text)]
    lines: list[str] = []
    cur = ""
    k = off = 0
    while k < len(words):
        start, end = words[k]
        piece = text[start + off : end]
        if cur and len(cur) + 1 + len(piece) <= cols:
            cur += " " + piece
            k, off = k + 1, 0
            continue
        if not cur and len(piece) <= cols:
            cur = piece
            k, off = k + 1, 0
            continue
        if not cur:
            cur = piece[:cols]
            off += cols
        lines.append(cur)
        cur = ""
        if len(lines) == rows:
            return lines, text[start + off :]
    if cur:
        lines.append(cur)
    return lines, ""


def paginate(text: str, cols: int = 21, rows: int = 4) -> list[str]:
    """Split text into display pages; each page re-lays out to exactly its own lines."""
    pages = []
    remaining = text
    while True:
        lines, remaining = layout_text(remaining, cols, rows)
        if not lines:
            break
        pages.append(" ".join(lines))
        if not remaining:
            break
    return pages


def mirror(fb: FrameBuffer) -> FrameBuffer:
    return FrameBuffer(fb.bits[:, ::-1].copy())


def render_text(fb: FrameBuffer, text: str, font: Font | None = None, mirrored: bool = True) -> tuple[FrameBuffer, str]:
    """Clear ``fb``, draw the first page of ``text`` into it and return ``(fb, remainder)``."""
    font = font or builtin_font()
    lines, remainder = layout_text(text, font.cols, font.rows)
    fb.clear()
    cell_w, cell_h = font.glyph_width + font.spacing, font.glyph_height + font.spacing
    for r, line in enumerate(lines):
        y = r * cell_h
        for c, ch in enumerate(line):
            x = c * cell_w
            fb.bits[y : y + font.glyph_height, x : x + font.glyph_width] |= font.glyphs[ch]
    if mirrored:
        fb.bits[:] = fb.bits[:, ::-1]
    return fb, remainder


def rendered(text: str, font: Font | None = None, mirrored: bool = True) -> FrameBuffer:
    return render_text(FrameBuffer(), text, font, mirrored)[0]


# --------------------------------------------------------------------------
# PBM (P1) framebuffer dumps


def pbm_text(fb: FrameBuffer) -> str:
    rows = "".join("".join("1" if b else "0" for b in row) + "\n" for row in fb.bits)
    return f"P1\n{WIDTH} {HEIGHT}\n" + rows


def dump_pbm(fb: FrameBuffer, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(pbm_text(fb), encoding="ascii")
    return path


def parse_pbm(text: str) -> FrameBuffer:
    body = "\n".join(line.split("#", 1)[0] for line in text.splitlines())
    tokens = body.split(None, 3)
    if len(tokens) < 3 or tokens[0] != "P1":
        raise PbmError("not a plain (P1) PBM")
    try:
        width, height = int(tokens[1]), int(tokens[2])
    except ValueError as exc:
        raise PbmError("bad PBM dimensions") from exc
    if (width, height) != (WIDTH, HEIGHT):
        raise PbmError(f"PBM is {width}x{height}, expected {WIDTH}x{HEIGHT}")
    digits = "".join((tokens[3] if len(tokens) > 3 else "").split())
    if len(digits) != WIDTH * HEIGHT or set(digits) - {"0", "1"}:
        raise PbmError("PBM payload must hold exactly 4096 binary digits")
    bits = np.frombuffer(digits.encode("ascii"), dtype=np.uint8) - ord("0")
    return FrameBuffer(bits.reshape(HEIGHT, WIDTH))


def load_pbm(path: str | os.PathLike) -> FrameBuffer:
    return parse_pbm(Path(path).read_text(encoding="ascii"))


# --------------------------------------------------------------------------
# XBM font strip

_XBM_NAME = "font5x7"


def font_to_xbm(font: Font, name: str = _XBM_NAME) -> str:
    cell = font.glyph_width + font.spacing
    n_glyphs = LAST_CODE - FIRST_CODE + 1
    width, height = n_glyphs * cell, font.glyph_height
    strip = np.zeros((height, width), dtype=np.uint8)
    for i in range(n_glyphs):
        strip[:, i * cell : i * cell + font.glyph_width] = font.glyphs[chr(FIRST_CODE + i)]
    row_bytes = (width + 7) // 8
    padded = np.zeros((height, row_bytes * 8), dtype=np.uint8)
    padded[:, :width] = strip
    packed = np.packbits(padded, axis=1, bitorder="little").ravel()
    hex_lines = []
    for start in range(0, len(packed), 12):
        hex_lines.append("   " + ", ".join(f"0x{b:02x}" for b in packed[start : start + 12]))
    return (
        f"/* {font.glyph_width}x{font.glyph_height} font strip, ASCII {FIRST_CODE}-{LAST_CODE} "
        f"({n_glyphs} glyphs).\n"
        f" * Glyph for code c occupies columns (c-{FIRST_CODE})*{cell} .. (c-{FIRST_CODE})*{cell}+"
        f"{font.glyph_width - 1};\n"
        f" * every {cell}th column is a blank {font.spacing}px separator. */\n"
        f"#define {name}_width {width}\n"
        f"#define {name}_height {height}\n"
        f"static unsigned char {name}_bits[] = {{\n" + ",\n".join(hex_lines) + " };\n"
    )


def export_font_xbm(font: Font, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.write_text(font_to_xbm(font), encoding="ascii")
    return path


def parse_font_xbm(text: str, glyph_width: int = 5, glyph_height: int = 7, spacing: int = 1) -> Font:
    width_m = re.search(r"#define\s+\w*_width\s+(\d+)", text)
    height_m = re.search(r"#define\s+\w*_height\s+(\d+)", text)
    if not width_m or not height_m:
        raise XbmError("XBM lacks width/height #define macros")
    width, height = int(width_m.group(1)), int(height_m.group(1))
    cell = glyph_width + spacing
    n_glyphs = LAST_CODE - FIRST_CODE + 1
    if width != n_glyphs * cell or height != glyph_height:
        raise XbmError(f"XBM strip is {width}x{height}, expected {n_glyphs * cell}x{glyph_height}")
    body = text[text.find("{", height_m.end()) + 1 : text.rfind("}")]
    values = [int(tok, 16) for tok in re.findall(r"0[xX][0-9a-fA-F]+", body)]
    row_bytes = (width + 7) // 8
    if len(values) != row_bytes * height:
        raise XbmError(f"XBM has {len(values)} bytes, expected {row_bytes * height}")
    packed = np.asarray(values, dtype=np.uint8).reshape(height, row_bytes)
    strip = np.unpackbits(packed, axis=1, bitorder="little")[:, :width]
    glyphs = {
        chr(FIRST_CODE + i): strip[:, i * cell : i * cell + glyph_width].copy() for i in range(n_glyphs)
    }
    return Font(glyphs, glyph_width, glyph_height, spacing)


def import_font_xbm(path: str | os.PathLike) -> Font:
    return parse_font_xbm(Path(path).read_text(encoding="ascii"))


def load_font(path: str | os.PathLike | None = None) -> Font:
    """Font from an XBM file, or the built-in table when ``path`` is None."""
    return builtin_font() if path is None else import_font_xbm(path)

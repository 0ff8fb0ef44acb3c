"""Simulated wearable display: framebuffer, font, rendering and HTTP endpoint."""

from .display import (
    BUNDLED_XBM,
    Font,
    FrameBuffer,
    PbmError,
    XbmError,
    builtin_font,
    dump_pbm,
    export_font_xbm,
    import_font_xbm,
    layout_text,
    load_font,
    load_pbm,
    mirror,
    paginate,
    parse_pbm,
    pbm_text,
    render_text,
    rendered,
)
from .server import DeviceServer, DeviceStartError, DisplayState, start_server

__all__ = [
    "BUNDLED_XBM", "DeviceServer", "DeviceStartError", "DisplayState", "Font", "FrameBuffer",
    "PbmError", "XbmError", "builtin_font", "dump_pbm", "export_font_xbm", "import_font_xbm",
    "layout_text", "load_font", "load_pbm", "mirror", "paginate", "parse_pbm", "pbm_text",
    "render_text", "rendered", "start_server",
]

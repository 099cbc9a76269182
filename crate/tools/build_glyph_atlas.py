"""Rasterize printable ASCII glyphs from DejaVu TTF fonts into the compact
atlas consumed by the synthetic word renderer (crates/core/assets/glyphs.bin).

Layout (little endian):
  b"GLYF" u8 version u8 font_count
  per font: u8 name_len, name bytes, u8 line_height, u8 baseline, u8 glyph_count
    per glyph: u8 codepoint, u8 advance, i8 x_off, i8 y_off, u8 w, u8 h, w*h coverage bytes
x_off is from the pen position, y_off from the top of the line box.
"""
import struct
import sys

from PIL import Image, ImageDraw, ImageFont

FONTS = [
    ("dejavu-sans", "DejaVuSans.ttf"),
    ("dejavu-sans-bold", "DejaVuSans-Bold.ttf"),
    ("dejavu-serif", "DejaVuSerif.ttf"),
    ("dejavu-serif-bold", "DejaVuSerif-Bold.ttf"),
    ("dejavu-sans-mono", "DejaVuSansMono.ttf"),
    ("dejavu-sans-mono-bold", "DejaVuSansMono-Bold.ttf"),
]
ROOT = "/usr/share/fonts/truetype/dejavu/"
SIZE = 24


def main(out):
    blob = bytearray(b"GLYF")
    blob += struct.pack("<BB", 1, len(FONTS))
    for name, file in FONTS:
        font = ImageFont.truetype(ROOT + file, SIZE)
        ascent, descent = font.getmetrics()
        line_height = ascent + descent
        blob += struct.pack("<B", len(name)) + name.encode()
        codes = list(range(32, 127))
        blob += struct.pack("<BBB", line_height, ascent, len(codes))
        for code in codes:
            ch = chr(code)
            advance = int(round(font.getlength(ch)))
            canvas = Image.new("L", (SIZE * 3, line_height + 8), 0)
            ImageDraw.Draw(canvas).text((SIZE, 4), ch, font=font, fill=255)
            bbox = canvas.getbbox()
            if bbox is None:
                blob += struct.pack("<BBbbBB", code, advance, 0, 0, 0, 0)
                continue
            x0, y0, x1, y1 = bbox
            glyph = canvas.crop(bbox)
            blob += struct.pack("<BBbbBB", code, advance, x0 - SIZE, y0 - 4, x1 - x0, y1 - y0)
            blob += glyph.tobytes()
    with open(out, "wb") as f:
        f.write(blob)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/assets/glyphs.bin")

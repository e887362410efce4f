#!/usr/bin/env python3
"""Regenerates src/renderkit/font8x16.inc from DejaVu Sans Mono.

The table is checked in; this script only documents how it was produced.
Each glyph is 16 rows of 8 pixels, MSB = leftmost pixel.
Index 0..94 = ASCII 0x20..0x7E, 95 = replacement glyph, 96 = ellipsis.
"""
import sys
from PIL import Image, ImageDraw, ImageFont

FONT = "/usr/share/fonts/truetype/dejavu/DejaVuSansMono.ttf"
W, H = 8, 16


def raster(ch, font):
    img = Image.new("L", (W, H), 0)
    d = ImageDraw.Draw(img)
    d.text((0, 1), ch, fill=255, font=font)
    return [sum((1 << (7 - x)) for x in range(W) if img.getpixel((x, y)) >= 110)
            for y in range(H)]


def main(out):
    font = ImageFont.truetype(FONT, 13)
    glyphs = [raster(chr(c), font) for c in range(0x20, 0x7F)]
    # replacement: hollow box
    glyphs.append([0x00, 0x00, 0x7E, 0x42, 0x42, 0x42, 0x42, 0x42,
                   0x42, 0x42, 0x42, 0x42, 0x7E, 0x00, 0x00, 0x00])
    # ellipsis: three dots on the baseline
    glyphs.append([0x00] * 11 + [0xDB, 0xDB, 0x00, 0x00, 0x00])
    with open(out, "w") as f:
        f.write("// Generated by tools/gen_font.py. Do not edit.\n")
        for i, g in enumerate(glyphs):
            label = repr(chr(0x20 + i)) if i < 95 else ("replacement" if i == 95 else "ellipsis")
            f.write("{" + ",".join(f"0x{b:02X}" for b in g) + "},  // " + label + "\n")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "font8x16.inc")

"""Clean text-page fixtures: light backgrounds with dark rendered words and exact word boxes."""

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from tashr.imaging import TextAnnotation

WORDS = ("NAME", "ADDRESS", "DRIVER", "LICENSE", "CLASS", "2021", "EXPIRES", "STREET",
         "MARKET", "OPEN", "SALE", "ID", "CARD", "TOTAL", "PRICE", "HIGHWAY")


def text_page(seed, size=128, lines=None, font_size=None):
    """Render a page of words; returns ``(image float32 HxWx3, TextAnnotation)``."""
    rng = np.random.default_rng(seed)
    bg = tuple(int(v) for v in rng.integers(165, 225, size=3))
    ink = tuple(int(v) for v in rng.integers(10, 70, size=3))
    im = Image.new("RGB", (size, size), bg)
    draw = ImageDraw.Draw(im)
    font = ImageFont.load_default(size=font_size or max(10, size // 10))
    boxes, texts = [], []
    lines = lines or max(2, size // 32)
    step = size / (lines + 1)
    for li in range(lines):
        x = float(rng.integers(2, size // 6))
        y = step * (li + 0.6)
        while True:
            word = WORDS[rng.integers(len(WORDS))]
            l, t, r, b = draw.textbbox((x, y), word, font=font)
            if r >= size - 2 or b >= size - 2:
                break
            draw.text((x, y), word, fill=ink, font=font)
            boxes.append((float(l), float(t), float(r - l), float(b - t)))
            texts.append(word)
            x = r + float(rng.integers(4, 12))
    arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr, TextAnnotation(boxes, texts)


def corpus(n, size=128, seed=0):
    return [text_page(seed * 1000 + i, size) for i in range(n)]

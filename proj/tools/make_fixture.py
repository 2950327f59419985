#!/usr/bin/env python3
"""Regenerates tests/data/meadow64.ppm, the 64x64 content fixture.

A soft green field scattered with small flowers. The texture is roughly
homogeneous, so any random half of its 16x16 patches looks like any other
half; this keeps the masked loss from jumping around between epochs.
"""
import math
import random
import sys

N = 64
PETALS = [(0.95, 0.85, 0.3), (0.9, 0.4, 0.5), (0.95, 0.95, 0.95), (0.6, 0.4, 0.85)]
CENTER = (0.8, 0.5, 0.1)


def clip01(v):
    return min(1.0, max(0.0, v))


def render(seed=3, count=28):
    rng = random.Random(seed)
    img = [[[0.3 + 0.1 * math.sin(x * 0.2), 0.55 + 0.1 * math.sin(y * 0.25 + x * 0.1), 0.25]
            for x in range(N)] for y in range(N)]
    for _ in range(count):
        cx, cy = rng.uniform(0, N), rng.uniform(0, N)
        r = rng.uniform(2.5, 4.5)
        petal = rng.choice(PETALS)
        for y in range(N):
            for x in range(N):
                d = math.sqrt((x - cx) ** 2 + (y - cy) ** 2)
                m = clip01(r - d)
                px = img[y][x]
                for c in range(3):
                    px[c] = px[c] * (1 - m) + petal[c] * m
                m2 = clip01(1.2 - d)
                for c in range(3):
                    px[c] = px[c] * (1 - m2) + CENTER[c] * m2
    return img


def main(path):
    data = bytearray()
    for row in render():
        for px in row:
            data.extend(round(clip01(c) * 255) for c in px)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (N, N) + bytes(data))


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "tests/data/meadow64.ppm")

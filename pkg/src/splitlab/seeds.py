"""Deterministic per-purpose seeds from one master seed.

``derive_seed(master, label)`` hashes the label with 64-bit FNV-1a, mixes
it with the master seed and finalizes with one splitmix64 step:

    state = (master * 0x9E3779B97F4A7C15 + fnv1a64(label)) mod 2**64
    seed  = splitmix64(state) >> 1            (a non-negative 63-bit int)
"""

from __future__ import annotations

MASK = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def fnv1a64(text: str) -> int:
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK
    return h


def splitmix64(state: int) -> int:
    z = (state + GOLDEN) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def derive_seed(master: int, label: str) -> int:
    state = ((master & MASK) * GOLDEN + fnv1a64(label)) & MASK
    return splitmix64(state) >> 1

"""Scalar (pure Python loop) reference implementations, used as independent oracles for the
vectorized kernels. Everything here runs in float64 on nested lists.
"""

import math
from typing import List, Sequence, Tuple

import numpy as np

Matrix = List[List[float]]


def to_lists(x) -> Matrix:
    return np.asarray(x, dtype=np.float64).tolist()


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a, b = to_lists(a), to_lists(b)
    m, p, n = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(p)) for j in range(n)] for i in range(m)]


def softmax(row: Sequence[float]) -> List[float]:
    peak = max(row)
    exps = [math.exp(x - peak) for x in row]
    total = sum(exps)
    return [e / total for e in exps]


def l2_distance(a: Sequence[float], b: Sequence[float]) -> float:
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


def attention(q, k, v, num_heads: int) -> Matrix:
    """Per-head scaled dot-product attention, one query row and one head at a time"""
    q, k, v = to_lists(q), to_lists(k), to_lists(v)
    d = len(q[0])
    hd = d // num_heads
    out = [[0.0] * d for _ in q]
    for h in range(num_heads):
        cols = range(h * hd, (h + 1) * hd)
        for i, q_row in enumerate(q):
            scores = [sum(q_row[c] * k_row[c] for c in cols) / math.sqrt(hd) for k_row in k]
            weights = softmax(scores)
            for c in cols:
                out[i][c] = sum(w * v_row[c] for w, v_row in zip(weights, v))
    return out


def layer_norm(x: Matrix, scale, shift, eps: float = 1e-5) -> Matrix:
    out = []
    for row in to_lists(x):
        mean = sum(row) / len(row)
        var = sum((r - mean) ** 2 for r in row) / len(row)
        std = math.sqrt(var + eps)
        out.append([(r - mean) / std * float(s) + float(b) for r, s, b in zip(row, scale, shift)])
    return out


def gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def add(a: Matrix, b: Matrix) -> Matrix:
    return [[x + y for x, y in zip(ra, rb)] for ra, rb in zip(a, b)]


def block(x, params) -> Matrix:
    """Pre-norm Transformer block: ``h = x + attn(norm1(x))·w_o``, ``y = h + ffn(norm2(h))``"""
    x = to_lists(x)
    normed = layer_norm(x, params.norm1.scale, params.norm1.shift)
    q = matmul(normed, params.attn.w_q)
    k = matmul(normed, params.attn.w_k)
    v = matmul(normed, params.attn.w_v)
    a = attention(q, k, v, params.num_heads)
    h = add(x, matmul(a, params.attn.w_o))
    pre_ffn = matmul(layer_norm(h, params.norm2.scale, params.norm2.shift), params.ffn.w1)
    hidden = [[gelu(val) for val in row] for row in pre_ffn]
    return add(h, matmul(hidden, params.ffn.w2))


def patch_embed(volume: np.ndarray, patch_size: int, w_patch, b_patch, positional) -> Matrix:
    """Walk patches in (z, y, x) order, flatten each one voxel by voxel, and project it"""
    p = patch_size
    depth, height, width = volume.shape
    w_patch, b_patch, positional = to_lists(w_patch), list(b_patch), to_lists(positional)
    tokens = []
    for z in range(0, depth, p):
        for y in range(0, height, p):
            for x in range(0, width, p):
                flat = [
                    float(volume[z + i, y + j, x + t])
                    for i in range(p)
                    for j in range(p)
                    for t in range(p)
                ]
                tokens.append(
                    [
                        sum(f * w_patch[r][c] for r, f in enumerate(flat)) + float(b_patch[c])
                        for c in range(len(b_patch))
                    ]
                )
    return add(tokens, positional)


def encoder(volume: np.ndarray, weights, positional) -> Matrix:
    """All-dense encoder forward pass"""
    cfg = weights.config
    x = patch_embed(volume, cfg.patch_size, weights.w_patch, weights.b_patch, positional)
    for params in weights.blocks:
        x = block(x, params)
    return x


def knn(fingerprints: np.ndarray, distances: np.ndarray, k: int) -> List[Tuple[int, float]]:
    """Sort every entry by (distance, entry id) and keep the first k"""
    order = sorted(range(len(fingerprints)), key=lambda i: (distances[i], i))
    return [(i, float(distances[i])) for i in order[:k]]


def positional_encoding(grid: Sequence[int], d_model: int) -> Matrix:
    """Per axis: sines then cosines of the coordinate over ``d_model // 6`` geometric frequencies,
    laid out z, y, x; remaining channels are zero
    """
    n_freq = d_model // 6
    rows = []
    for z in range(grid[0]):
        for y in range(grid[1]):
            for x in range(grid[2]):
                row = []
                for coord in (z, y, x):
                    freqs = [1.0 / 10000.0 ** (i / n_freq) for i in range(n_freq)]
                    row += [math.sin(coord * f) for f in freqs]
                    row += [math.cos(coord * f) for f in freqs]
                rows.append(row + [0.0] * (d_model - len(row)))
    return rows


def prng_units(seed: int, count: int) -> List[float]:
    """Top 53 bits of each raw 64-bit Philox word, scaled into [0, 1)"""
    words = np.random.Philox(key=seed).random_raw(count)
    return [(int(w) >> 11) * 2.0**-53 for w in np.atleast_1d(words)]


def prng_standard_normal(seed: int, count: int) -> List[float]:
    """Box-Muller on consecutive pairs of units, one pair at a time"""
    units = prng_units(seed, 2 * ((count + 1) // 2))
    samples: List[float] = []
    for u1, u2 in zip(units[0::2], units[1::2]):
        radius = math.sqrt(-2.0 * math.log(1.0 - u1))
        samples += [radius * math.cos(2.0 * math.pi * u2), radius * math.sin(2.0 * math.pi * u2)]
    return samples[:count]

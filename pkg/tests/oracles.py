"""Independent reference implementations written with plain Python loops.

Nothing here imports the package's numerical code; these functions read the
raw arrays of an instance and recompute everything from scratch.
"""

import math


def rate_loop(d, fs, h, p, b, noise):
    n, m = len(d), len(fs)
    out = [[0.0] * m for _ in range(n)]
    for j in range(m):
        for i in range(n):
            interference = 0.0
            for k in range(n):
                if k != i:
                    interference += p[k][j] * h[k][j]
            out[i][j] = b * math.log2(1.0 + p[i][j] * h[i][j] / (interference + noise))
    return out


def total_delay_loop(d, fs, h, x, p, f, b=1.0, noise=0.1, c=1.0, floor=1e-6, zero=1e-12):
    r = rate_loop(d, fs, h, p, b, noise)
    total = 0.0
    for i in range(len(d)):
        for j in range(len(fs)):
            if x[i][j] < zero:
                continue
            rate = max(r[i][j], floor)
            comp = max(f[i][j], floor)
            total += d[i] * x[i][j] / rate + x[i][j] * d[i] * c / comp
    return total


def matmul_loop(a, b):
    n, k, m = len(a), len(b), len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def single_pair_optimum(d, h, fs, b=1.0, noise=0.1, c=1.0, p_max=1.0):
    return d / (b * math.log2(1.0 + p_max * h / noise)) + d * c / fs


def instance_lists(inst):
    return (inst.task_size.tolist(), inst.server_compute.tolist(), inst.channel_gain.tolist())

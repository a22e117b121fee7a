"""Reference implementation of the synthetic diffusion generator.

Pure Python MT19937-64 and Box-Muller, used to freeze expected values in the
Rust test suite. Usage: python3 synth_reference.py
"""
import math

NN, MM = 312, 156
MATRIX_A = 0xB5026F5AA96619E9
UM, LM = 0xFFFFFFFF80000000, 0x7FFFFFFF
MASK = (1 << 64) - 1


class MT64:
    def __init__(self, seed):
        self.mt = [0] * NN
        self.mt[0] = seed & MASK
        for i in range(1, NN):
            prev = self.mt[i - 1]
            self.mt[i] = (6364136223846793005 * (prev ^ (prev >> 62)) + i) & MASK
        self.mti = NN

    def next_u64(self):
        mag01 = (0, MATRIX_A)
        if self.mti >= NN:
            mt = self.mt
            for i in range(NN - MM):
                x = (mt[i] & UM) | (mt[i + 1] & LM)
                mt[i] = mt[i + MM] ^ (x >> 1) ^ mag01[x & 1]
            for i in range(NN - MM, NN - 1):
                x = (mt[i] & UM) | (mt[i + 1] & LM)
                mt[i] = mt[i + (MM - NN)] ^ (x >> 1) ^ mag01[x & 1]
            x = (mt[NN - 1] & UM) | (mt[0] & LM)
            mt[NN - 1] = mt[MM - 1] ^ (x >> 1) ^ mag01[x & 1]
            self.mti = 0
        x = self.mt[self.mti]
        self.mti += 1
        x ^= (x >> 29) & 0x5555555555555555
        x ^= (x << 17) & 0x71D67FFFEDA60000
        x ^= (x << 37) & 0xFFF7EEE000000000
        x ^= x >> 43
        return x & MASK

    def unit(self):
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)


def normalized_laplacian(n, edges):
    a = [[0.0] * n for _ in range(n)]
    for s, d, w in edges:
        a[s][d] = w
        a[d][s] = w
    deg = [sum(row) for row in a]
    inv = [1.0 / math.sqrt(d) if d > 0 else 0.0 for d in deg]
    return [[(1.0 if i == j else 0.0) - inv[i] * a[i][j] * inv[j] for j in range(n)] for i in range(n)]


def synth(n, edges, steps, seed):
    lap = normalized_laplacian(n, edges)
    rng = MT64(seed)
    x = [rng.unit() for _ in range(n)]
    spare = None

    def gauss():
        nonlocal spare
        if spare is not None:
            z, spare = spare, None
            return z
        u1 = 1.0 - rng.unit()
        u2 = rng.unit()
        r = math.sqrt(-2.0 * math.log(u1))
        th = 2.0 * math.pi * u2
        spare = r * math.sin(th)
        return r * math.cos(th)

    rows = []
    for t in range(steps):
        rows.append(list(x))
        if t + 1 == steps:
            break
        forcing = 0.05 * math.sin(2.0 * math.pi * t / 24.0)
        nxt = []
        for i in range(n):
            lx = 0.0
            for j in range(n):
                lx += lap[i][j] * x[j]
            nxt.append(x[i] - 0.1 * lx + forcing + 0.01 * gauss())
        x = nxt
    return rows


if __name__ == "__main__":
    rng = MT64(5489)
    print("mt64(5489) first outputs:", [rng.next_u64() for _ in range(3)])
    edges = [(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)]
    rows = synth(4, edges, 30, 7)
    for t in (0, 1, 29):
        print(t, [repr(v) for v in rows[t]])

"""Brute-force masked metrics over 100 random matrices.

The matrices come from a 64-bit LCG shared with the Rust acceptance suite:
    state = state * 6364136223846793005 + 1442695040888963407  (mod 2^64)
    u     = (state >> 11) * 2^-53
Per matrix: rows = 1 + floor(8u), cols = 1 + floor(8u); per entry (row-major)
pred = -10 + 20u, then r = u:
    r < 0.20 -> target 0 (masked)
    r < 0.25 -> target 5e-5 (kept for MAE/RMSE, excluded from MAPE)
    else     -> magnitude 0.5 + 9.5u, negative when the next u >= 0.5
Writes crates/core/tests/fixtures/metrics_reference.json: one record per
matrix with its shape and MAE / RMSE / MAPE (null when undefined).
"""
import json
import math
import pathlib

MASK = (1 << 64) - 1


class Lcg:
    def __init__(self, seed):
        self.state = seed & MASK

    def unit(self):
        self.state = (self.state * 6364136223846793005 + 1442695040888963407) & MASK
        return (self.state >> 11) * (1.0 / 9007199254740992.0)


def matrices(seed=2024, count=100):
    rng = Lcg(seed)
    for _ in range(count):
        rows = 1 + int(rng.unit() * 8)
        cols = 1 + int(rng.unit() * 8)
        pred, target = [], []
        for _ in range(rows * cols):
            pred.append(-10.0 + 20.0 * rng.unit())
            r = rng.unit()
            if r < 0.20:
                target.append(0.0)
            elif r < 0.25:
                target.append(5e-5)
            else:
                mag = 0.5 + 9.5 * rng.unit()
                target.append(-mag if rng.unit() >= 0.5 else mag)
        yield rows, cols, pred, target


def metrics(pred, target):
    kept = [(p, t) for p, t in zip(pred, target) if t != 0.0]
    if not kept:
        return None, None, None
    mae = sum(abs(p - t) for p, t in kept) / len(kept)
    rmse = math.sqrt(sum((p - t) ** 2 for p, t in kept) / len(kept))
    pct = [abs((p - t) / t) for p, t in kept if abs(t) >= 1e-4]
    mape = 100.0 * sum(pct) / len(pct) if pct else None
    return mae, rmse, mape


if __name__ == "__main__":
    records = []
    for rows, cols, pred, target in matrices():
        mae, rmse, mape = metrics(pred, target)
        records.append({"rows": rows, "cols": cols, "mae": mae, "rmse": rmse, "mape": mape})
    out = pathlib.Path(__file__).resolve().parent.parent / "crates/core/tests/fixtures/metrics_reference.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"seed": 2024, "matrices": records}, indent=1) + "\n")
    print(f"wrote {len(records)} records to {out}")

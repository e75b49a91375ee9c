"""Regenerate wilcoxon_exact.json by brute-force enumeration of all 2^n sign vectors."""
import itertools
import json
from pathlib import Path

import numpy as np


def brute_pvalue(d):
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    n = d.size
    ranks = np.argsort(np.argsort(np.abs(d))) + 1
    w = ranks[d > 0].sum()
    mu = n * (n + 1) / 4
    hits = 0
    for signs in itertools.product((0, 1), repeat=n):
        if abs(np.dot(signs, ranks) - mu) >= abs(w - mu) - 1e-9:
            hits += 1
    return hits / 2 ** n, int(w)


def main():
    rng = np.random.default_rng(20240)
    pairs = [{
        "name": "depression-scores-n9",
        "a": [1.83, 0.50, 1.62, 2.48, 1.68, 1.88, 1.55, 3.06, 1.30],
        "b": [0.878, 0.647, 0.598, 2.05, 1.06, 1.29, 1.06, 3.14, 1.29],
        "table_pvalue": 0.039,
    }, {
        # Negative ranks {1, 3, 4}: T- = 8, the n = 10 table entry P(T <= 8) = 0.0244.
        "name": "table-n10-t8",
        "a": [-1, 2, -3, -4, 5, 6, 7, 8, 9, 10],
        "b": [0] * 10,
        "table_pvalue": 0.049,
    }]
    for n in range(6, 13):
        for rep in range(3):
            b = rng.normal(size=n).round(4)
            a = (b + rng.normal(0.4 * rep, 1.0, size=n)).round(4)
            pairs.append({"name": f"random-n{n}-{rep}", "a": a.tolist(), "b": b.tolist()})
    for p in pairs:
        p["pvalue"], p["w_plus"] = brute_pvalue(np.subtract(p["a"], p["b"]))
    out = Path(__file__).with_name("wilcoxon_exact.json")
    out.write_text(json.dumps(pairs, indent=1) + "\n")


if __name__ == "__main__":
    main()

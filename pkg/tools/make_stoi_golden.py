"""Regenerate tests/data/stoi_golden.json with the independent ``pystoi`` package.

Run offline once; the JSON is committed so the test suite does not need pystoi.
Signals are re-created from the seeds recorded in the file (see tests/stoi_pairs.py).
"""

import json
import sys
from pathlib import Path

from pystoi import stoi as reference_stoi

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))
from stoi_pairs import PAIR_SEEDS, RATE, SNRS_DB, make_pair  # noqa: E402


def main():
    rows = []
    for seed in PAIR_SEEDS:
        for snr_db in SNRS_DB:
            clean, degraded = make_pair(seed, snr_db)
            rows.append({"seed": seed, "snr_db": snr_db,
                         "stoi": float(reference_stoi(clean, degraded, RATE, extended=False))})
    out = ROOT / "tests" / "data" / "stoi_golden.json"
    out.write_text(json.dumps({"reference": "pystoi", "sample_rate": RATE, "pairs": rows}, indent=1) + "\n")
    print(f"wrote {len(rows)} values to {out}")


if __name__ == "__main__":
    main()

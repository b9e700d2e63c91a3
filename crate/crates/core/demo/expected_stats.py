"""Recompute the demo statistics from the committed store without the Rust code.

Usage: python3 expected_stats.py > expected/stats.json
"""
import json
import math
import re
import statistics
from pathlib import Path

HERE = Path(__file__).parent
TOKEN = re.compile(r"[^\W_]+|[^\w\s]|_")
SEGMENT = 128


def tokens(text):
    return len(TOKEN.findall(text))


docs = {}
for line in (HERE / "../tests/fixtures/longbench_sample.jsonl").read_text().splitlines():
    rec = json.loads(line)
    docs[rec["_id"]] = math.ceil(tokens(rec["context"]) / SEGMENT)

lines = (HERE / "expected/markers.jsonl").read_text().splitlines()
markers = [json.loads(l) for l in lines[1:]]

covered = {d: set() for d in docs}
for m in markers:
    if not m["is_fallback"]:
        covered[m["doc_id"]].update(m["paragraph_indices"])
cov = [100.0 * len(covered[d]) / n for d, n in docs.items()]

k = [tokens(m["k"]) for m in markers]
v = [tokens(m["v"]) for m in markers]
print(json.dumps({
    "documents": len(docs),
    "markers": len(markers),
    "coverage_mean": statistics.fmean(cov),
    "coverage_variance": statistics.pvariance(cov),
    "fallback_pct": 100.0 * sum(m["is_fallback"] for m in markers) / len(markers),
    "k_mean": statistics.fmean(k),
    "v_mean": statistics.fmean(v),
    "k_median": statistics.median(k),
    "v_median": statistics.median(v),
}, indent=2))

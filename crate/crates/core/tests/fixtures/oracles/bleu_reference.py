"""Frozen BLEU-4 pairs scored by plain n-gram counting.

Run offline: python3 bleu_reference.py > ../bleu_reference.json
"""
import json
import math
import random
import re
from collections import Counter

EPS = 1e-9


def tokens(text):
    out = []
    for chunk in text.split():
        out.extend(t for t in re.split(r'([{}\[\],:"])', chunk) if t)
    return out


def grams(toks, n):
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu4(cand, ref):
    c, r = tokens(cand), tokens(ref)
    if not c:
        return 0.0
    orders = min(4, len(c))
    logs = []
    for n in range(1, orders + 1):
        cg, rg = grams(c, n), grams(r, n)
        hit = sum(min(k, rg[g]) for g, k in cg.items())
        if n == 1 and hit == 0:
            return 0.0
        p = hit / (len(c) - n + 1)
        logs.append(math.log(p) if p > 0 else math.log(EPS))
    bp = 1.0 if len(c) > len(r) else math.exp(1 - len(r) / len(c))
    return min(1.0, max(0.0, bp * math.exp(sum(logs) / orders)))


random.seed(7)
base = {
    "metadata": {"year": 2023, "location": "Davis, CA", "plant_type": "cowpea", "dap": 30},
    "environment": {"soil_category": "loam", "sun_elevation_deg": 62.9, "sun_azimuth_deg": 169.4},
    "field": {"plots": [{"bed_id": 1, "row_id": 1, "plants": [[-0.0311, 1.5], [0.012, 1.1], [0.02, 0.7]]}]},
    "plant_properties": {"chlorophyll_ug_cm2": 41.5, "leaf_pitch_deg": 35.0},
}


def perturb(doc, k):
    d = json.loads(json.dumps(doc))
    for _ in range(k):
        sec = random.choice([s for s in d if d[s]])
        key = random.choice(list(d[sec]))
        v = d[sec][key]
        if isinstance(v, (int, float)) and not isinstance(v, bool):
            d[sec][key] = round(v + random.uniform(-10, 10), 2)
        elif isinstance(v, str):
            d[sec][key] = v[::-1]
        else:
            d[sec].pop(key)
    return d


ref = json.dumps(base, indent=2)
pairs = [
    (ref, ref),
    (json.dumps(base), ref),
    ("", ref),
    ("I cannot determine the configuration.", ref),
    ('{"dap": 30}', ref),
    ("{", "{"),
    ('"a" "b"', '"a" "b" "c"'),
    ("x y z", "a b c"),
    ("a b c d e f", "a b c d e f g h i j"),
    ('{"a": [1, 2, 3, 1, 2, 3]}', '{"a": [1, 2, 3]}'),
    ("the the the the the the the", "the cat is on the mat"),
]
for k in range(1, 10):
    pairs.append((json.dumps(perturb(base, k), indent=2 if k % 2 else None), ref))

out = [{"candidate": c, "reference": r, "bleu4": bleu4(c, r)} for c, r in pairs]
assert len(out) == 20
print(json.dumps(out, indent=1))

"""Regenerates the demo manifests, the scripted-confusion mock script and the
metrics that script is expected to produce.

The expected metrics are computed here from the intended content of every
scripted response, independently of the Rust pipeline and scorer.

Usage: python3 generate.py   (writes next to this file)
"""

import csv
import json
import math
import random
import re
from pathlib import Path

HERE = Path(__file__).resolve().parent
DATA = HERE.parent
TAX = json.loads((DATA / "reference_taxonomy.json").read_text())
ROADS = json.loads((DATA / "road_context.json").read_text())
MAPILLARY = json.loads((DATA / "mapillary_taxonomy.json").read_text())

CATEGORIES = ["Signs", "Markings", "Scenery", "Weather", "TriggerConditions"]
PERSONA_OF = {
    "Signs": "signs",
    "Markings": "markings",
    "Scenery": "scenery",
    "Weather": "weather",
    "TriggerConditions": "trigger_conditions",
}
STRATEGIES = [
    "flat_taxonomy",
    "reevaluate",
    "road_dependent",
    "persona_decomposition",
    "persona_label_aliasing",
    "persona_rag",
    "persona_cot",
    "persona_chained_cot",
    "chained_cot_per_stage_heavy",
]
COT = {"persona_cot", "persona_chained_cot", "chained_cot_per_stage_heavy"}

concepts = sorted(TAX["concepts"], key=lambda c: c["id"])
by_id = {c["id"]: c for c in concepts}
by_cat = {cat: [c["id"] for c in concepts if c["category"] == cat] for cat in CATEGORIES}
all_ids = [c["id"] for c in concepts]


def pick(cat, n):
    ids = by_cat[cat]
    return [ids[(k * len(ids)) // n] for k in range(n)]


def write_manifest(name, prefix, per_cat):
    rows = []
    for cat in CATEGORIES:
        for cid in pick(cat, per_cat):
            rows.append((f"{prefix}{len(rows) + 1:02d}", f"images/{prefix}{len(rows) + 1:02d}.jpg", cid))
    with open(HERE / name, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "image_path", "concept_id"])
        w.writerows(rows)
    return rows


# Lexical retrieval: term frequencies over the description vocabulary,
# L2-normalized, cosine similarity, ties by id.
def words(text):
    return [w.lower() for w in re.findall(r"[A-Za-z0-9]+", text)]


for c in concepts:
    assert c["description"].isascii()
VOCAB = sorted({w for c in concepts for w in words(c["description"])})
INDEX = {w: i for i, w in enumerate(VOCAB)}


def embed(text):
    v = [0.0] * len(VOCAB)
    for w in words(text):
        if w in INDEX:
            v[INDEX[w]] += 1.0
    n = math.sqrt(sum(x * x for x in v))
    if n > 0:
        v = [x / n for x in v]
    return v


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


DOC_VECS = {c["id"]: embed(c["description"]) for c in concepts}


def retrieve(query, scope, k=8):
    q = embed(query)
    qn = math.sqrt(dot(q, q))
    if qn == 0:
        return []
    hits = []
    for cid in scope:
        d = DOC_VECS[cid]
        dn = math.sqrt(dot(d, d))
        if dn == 0:
            continue
        hits.append((-(dot(q, d) / (qn * dn)), cid))
    hits.sort()
    return [cid for _, cid in hits[:k]]


def labels_json(entries):
    return json.dumps({"labels": [{"label": l, "rank": r} for l, r in entries]})


def build_confusions(rows):
    """Scripted responses plus, per sample, the intended semantic content."""
    script = [{"match": {"stage": "road_type"}, "response": json.dumps({"road_type": "urban_street"})}]
    for p in PERSONA_OF.values():
        script.append({
            "match": {"stage": f"{p}.describe"},
            "response": json.dumps({"description": "Nothing notable for this expert."}),
        })
    plans = {}
    for i, (sid, _, g) in enumerate(rows):
        cat = by_id[g]["category"]
        siblings = [x for x in by_cat[cat] if x != g]
        s, x = siblings[i % len(siblings)], siblings[(i + 3) % len(siblings)]
        mode = i % 5
        plan = {"labels": None, "verify": None, "chained": None, "road": "urban_street", "describe": None}
        if mode == 0:
            plan["labels"] = [(g, 1), (s, 2)]
            text = labels_json(plan["labels"])
        elif mode == 1:
            plan["labels"] = [(s, 1)]
            text = labels_json(plan["labels"])
        elif mode == 2:
            plan["labels"] = [(s, 1), (x, 2), (g, 3)]
            text = labels_json(plan["labels"])
        elif mode == 3:
            c = by_id[g]
            spelled = c["aliases"][0] if c["aliases"] else c["display_name"]
            plan["labels"] = [(g, 1)]
            text = "Looking at the scene:\n```json\n" + labels_json([(spelled, 1)]) + "\n```\nDone."
            plan["verify"] = [(s, 1)]
            script.append({"match": {"stage": "verify", "sample_id": sid}, "response": labels_json(plan["verify"])})
        else:
            plan["labels"] = [(g, 1)]
            text = labels_json(plan["labels"])
            plan["chained"] = []
            script.append({
                "match": {"stage": "chained", "sample_id": sid},
                "response": "I could not decide {labels: maybe",
            })
            plan["road"] = "motorway"
            script.append({"match": {"stage": "road_type", "sample_id": sid},
                           "response": json.dumps({"road_type": "motorway"})})
        if i == 7:
            plan["road"] = "canal_towpath"
            script.append({"match": {"stage": "road_type", "sample_id": sid},
                           "response": json.dumps({"road_type": "canal_towpath"})})
        script.append({"match": {"stage": "*", "sample_id": sid}, "response": text})
        own = g if i % 2 == 0 else s
        plan["describe"] = by_id[own]["description"]
        script.append({
            "match": {"stage": f"{PERSONA_OF[cat]}.describe", "sample_id": sid},
            "response": json.dumps({"description": plan["describe"]}),
        })
        plans[sid] = plan
    return script, plans


def final_ids(strategy, g, plan):
    def ids(entries, cap):
        return {l for l, r in entries if not cap or r <= 2}

    cap = strategy in COT
    labels = ids(plan["labels"], cap)
    if strategy == "flat_taxonomy":
        return labels
    if strategy == "chained_cot_per_stage_heavy":
        return ids(plan["chained"], cap) if plan["chained"] is not None else labels
    if strategy == "reevaluate":
        verify = ids(plan["verify"], False) if plan["verify"] is not None else labels
        return labels & verify
    if strategy == "road_dependent":
        allowed = set(ROADS[plan["road"]]) if plan["road"] in ROADS else set(all_ids)
        return labels & allowed
    if strategy == "persona_rag":
        persona_cat = by_id[g]["category"]
        retrieved = set(retrieve(plan["describe"], by_cat[persona_cat]))
        return {l for l in labels if by_id[l]["category"] != persona_cat or l in retrieved}
    return labels


def expected_metrics(rows, plans):
    out = {}
    for strategy in STRATEGIES:
        hits = {cat: [0, 0] for cat in CATEGORIES}
        for sid, _, g in rows:
            cat = by_id[g]["category"]
            hits[cat][1] += 1
            hits[cat][0] += g in final_ids(strategy, g, plans[sid])
        total = sum(h for h, _ in hits.values())
        out[strategy] = {
            "hits": total,
            "recall": total / len(rows),
            "per_category": {cat: h / n for cat, (h, n) in hits.items()},
        }
    return out


def write_detection_manifest():
    rng = random.Random(20240611)
    ids = sorted(c["id"] for c in MAPILLARY["concepts"])
    lines = []
    for n in range(1, 13):
        instances = []
        for _ in range(rng.randint(1, 4)):
            x0, y0 = round(rng.uniform(0, 0.7), 3), round(rng.uniform(0, 0.7), 3)
            x1, y1 = round(x0 + rng.uniform(0.05, 0.3), 3), round(y0 + rng.uniform(0.05, 0.3), 3)
            instances.append({"concept_id": rng.choice(ids), "bbox": [x0, y0, x1, y1]})
        lines.append(json.dumps({"sample_id": f"d{n:02d}", "image_path": f"images/d{n:02d}.jpg",
                                 "instances": instances}))
    (HERE / "detection_12.jsonl").write_text("\n".join(lines) + "\n")


def main():
    write_manifest("synthetic_50.csv", "s", 10)
    rows = write_manifest("classification_20.csv", "c", 4)
    script, plans = build_confusions(rows)
    (HERE / "confusion_script.json").write_text(json.dumps(script, indent=2) + "\n")
    expected = {"manifest": "classification_20.csv", "strategies": expected_metrics(rows, plans)}
    (HERE / "confusion_expected.json").write_text(json.dumps(expected, indent=2) + "\n")
    write_detection_manifest()
    for s, m in expected["strategies"].items():
        print(f"{s:30} {m['recall']:.2f}")


if __name__ == "__main__":
    main()

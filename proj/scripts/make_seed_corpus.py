#!/usr/bin/env python3
"""Writes the seed corpus under data/seed: markdown documents about a fictional
region plus prompt/reference pairs for evaluation. Output is deterministic."""

import argparse
import json
import pathlib
import random

SYL = ["var", "hol", "mar", "en", "del", "ost", "bri", "ka", "lun", "tor", "sel", "wen", "dra", "mir", "fen",
       "gal", "ros", "tam", "vel", "quin", "hal", "sor", "ber", "nor"]
PRODUCTS = ["copper bells", "blue wool", "river salt", "glass beads", "oak barrels", "smoked fish", "paper lanterns",
            "clay pipes", "honey cakes", "iron nails", "linen sails", "amber combs"]
MONTHS = ["January", "February", "March", "April", "May", "June", "July", "August", "September", "October",
          "November", "December"]
CROPS = ["barley", "rye", "flax", "turnips", "apples", "hops", "beans", "cabbage"]
TRADES = ["weavers", "smiths", "potters", "fishers", "brewers", "masons", "carpenters", "glassmakers"]
COLORS = ["red", "green", "white", "grey", "golden", "dark"]


def name(rng, parts=2):
    return "".join(rng.choice(SYL) for _ in range(parts)).capitalize()


def build_world(rng, n_towns):
    rivers = [name(rng) for _ in range(6)]
    regions = [name(rng, 3) for _ in range(4)]
    towns = []
    seen = set()
    while len(towns) < n_towns:
        t = name(rng)
        if t in seen:
            continue
        seen.add(t)
        towns.append({
            "name": t,
            "river": rng.choice(rivers),
            "region": rng.choice(regions),
            "founded": rng.randrange(900, 1700),
            "population": rng.randrange(12, 400) * 100,
            "product": rng.choice(PRODUCTS),
            "month": rng.choice(MONTHS),
            "crop": rng.choice(CROPS),
            "trade": rng.choice(TRADES),
            "color": rng.choice(COLORS),
            "bridges": rng.randrange(1, 9),
            "mayor": name(rng) + " " + name(rng),
        })
    return towns, rivers, regions


def town_document(t, rng, towns):
    neighbor = rng.choice([o for o in towns if o is not t])
    paras = [
        f"# {t['name']}",
        f"{t['name']} is a town in the {t['region']} region. It lies on the {t['river']} river and was founded in "
        f"{t['founded']}. About {t['population']} people live in {t['name']} today.",
        f"The town is known for its {t['product']}. Most families in {t['name']} work as {t['trade']}, and the "
        f"fields around the town grow {t['crop']}. Traders carry {t['product']} down the {t['river']} river to the "
        f"markets of the {t['region']} region.",
        f"## History",
        f"{t['name']} was founded in {t['founded']} by {t['trade']} who settled near a ford of the {t['river']} "
        f"river. The first bridge was built of {t['color']} stone. Today the town has {t['bridges']} bridges across "
        f"the {t['river']} river.",
        f"During the old wars {t['name']} paid tribute to {neighbor['name']}, which lies on the "
        f"{neighbor['river']} river. The two towns still share a market for {neighbor['product']}.",
        f"## Festival",
        f"Every year in {t['month']} the people of {t['name']} hold the festival of {t['product']}. The streets are "
        f"hung with {t['color']} cloth and the {t['trade']} show their best work. Visitors come from the whole "
        f"{t['region']} region.",
        f"## Government",
        f"The current mayor of {t['name']} is {t['mayor']}. The town council meets in the {t['color']} hall near "
        f"the river. The council decides how the {t['crop']} harvest is stored and sold.",
    ]
    return "\n\n".join(paras) + "\n"


def river_document(river, towns, rng):
    on_river = [t for t in towns if t["river"] == river]
    lines = [f"# The {river} river"]
    if on_river:
        names = ", ".join(t["name"] for t in on_river)
        lines.append(f"The {river} river flows through the towns of {names}. Boats on the {river} river carry "
                     f"goods between these towns.")
        for t in on_river:
            lines.append(f"At {t['name']} the {river} river is crossed by {t['bridges']} bridges. The town sends "
                         f"{t['product']} down the river every {t['month']}.")
    else:
        lines.append(f"The {river} river is a small river with no towns on its banks.")
    return "\n\n".join(lines) + "\n"


def region_document(region, towns):
    in_region = [t for t in towns if t["region"] == region]
    lines = [f"# The {region} region"]
    names = ", ".join(t["name"] for t in in_region) or "no towns"
    lines.append(f"The {region} region contains the towns of {names}.")
    for t in in_region:
        lines.append(f"{t['name']} is the {t['region']} town known for its {t['product']}. Its festival is held in "
                     f"{t['month']}.")
    return "\n\n".join(lines) + "\n"


def eval_pairs(towns):
    pairs = []
    for t in towns:
        pairs.append({"prompt": f"{t['name']} is a town in the ", "reference": f"{t['region']} region."})
        pairs.append({"prompt": f"The town is known for its ", "reference": f"{t['product']}."})
        pairs.append({"prompt": f"The current mayor of {t['name']} is ", "reference": f"{t['mayor']}."})
    return pairs


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(pathlib.Path(__file__).resolve().parent.parent / "data" / "seed"))
    ap.add_argument("--seed", type=int, default=20240607)
    ap.add_argument("--towns", type=int, default=75)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    towns, rivers, regions = build_world(rng, args.towns)
    out = pathlib.Path(args.out)
    docs = out / "docs"
    docs.mkdir(parents=True, exist_ok=True)
    for old in docs.glob("*.md"):
        old.unlink()
    for i, t in enumerate(towns):
        (docs / f"town_{i:03d}_{t['name'].lower()}.md").write_text(town_document(t, rng, towns))
    for r in rivers:
        (docs / f"river_{r.lower()}.md").write_text(river_document(r, towns, rng))
    for g in regions:
        (docs / f"region_{g.lower()}.md").write_text(region_document(g, towns))

    # Pairs come from the first towns only, which keeps evaluation cheap.
    with open(out / "eval_pairs.jsonl", "w") as f:
        for p in eval_pairs(towns[:4]):
            f.write(json.dumps(p) + "\n")
    with open(out / "questions.jsonl", "w") as f:
        for t in towns[:12]:
            f.write(json.dumps({"question": f"What is {t['name']} known for?", "answer_block_header": t["name"],
                                "expect": t["product"]}) + "\n")


if __name__ == "__main__":
    main()

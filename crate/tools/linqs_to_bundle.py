#!/usr/bin/env python3
"""Convert a LINQS-style citation dataset (<name>.content + <name>.cites) into
the bundle directory layout read by `hugnn`.

Node ids follow the order of the .content file; class names are sorted
alphabetically and numbered from 0. Citation direction is dropped, self-loops
and duplicate pairs are removed. No split.csv is written: the loader derives
the 20-per-class / 500 / 1000 split from its split seed.

    python3 tools/linqs_to_bundle.py cora.content cora.cites data/cora --name cora
"""

import argparse
import json
import os


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("content")
    ap.add_argument("cites")
    ap.add_argument("out")
    ap.add_argument("--name", default="cora")
    args = ap.parse_args()

    ids, rows, raw_labels = [], [], []
    with open(args.content) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            ids.append(parts[0])
            rows.append(parts[1:-1])
            raw_labels.append(parts[-1])
    index = {pid: i for i, pid in enumerate(ids)}
    classes = sorted(set(raw_labels))
    class_id = {c: i for i, c in enumerate(classes)}
    d = len(rows[0])
    assert all(len(r) == d for r in rows)

    edges = set()
    skipped = 0
    with open(args.cites) as f:
        for line in f:
            parts = line.split()
            if len(parts) != 2:
                continue
            a, b = parts
            if a not in index or b not in index:
                skipped += 1
                continue
            u, v = index[a], index[b]
            if u == v:
                skipped += 1
                continue
            edges.add((min(u, v), max(u, v)))
    edges = sorted(edges)

    os.makedirs(args.out, exist_ok=True)
    meta = {
        "name": args.name,
        "n": len(ids),
        "m": len(edges),
        "d": d,
        "num_classes": len(classes),
    }
    # Matches serde_json::to_string_pretty output.
    with open(os.path.join(args.out, "meta.json"), "w") as f:
        f.write(json.dumps(meta, indent=2) + "\n")
    with open(os.path.join(args.out, "edges.tsv"), "w") as f:
        for u, v in edges:
            f.write(f"{u}\t{v}\n")
    with open(os.path.join(args.out, "features.csv"), "w") as f:
        for r in rows:
            f.write(",".join(str(int(float(x))) if float(x).is_integer() else repr(float(x)) for x in r) + "\n")
    with open(os.path.join(args.out, "labels.csv"), "w") as f:
        for lab in raw_labels:
            f.write(f"{class_id[lab]}\n")
    with open(os.path.join(args.out, "classes.txt"), "w") as f:
        for c in classes:
            f.write(c + "\n")
    print(json.dumps(meta), "skipped", skipped)


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Convert the public LINQS citation files (cora.content / cora.cites,
citeseer.content / citeseer.cites) into the layout read by the loaders:

  <name>_edges.txt      one "src dst" per line, 0-indexed, undirected
                        edges listed once
  <name>_features.csv   one row per node, comma-separated feature values
  <name>_labels.csv     one integer class id per line

Node ids are remapped to 0..n-1 in file order of the .content file.
Citations whose endpoints are not in the .content file are dropped
(citeseer has a handful of dangling ids).

Usage: python3 scripts/prepare_citation.py <name> <content_file> <cites_file> [out_dir=data]
"""

import sys
from pathlib import Path


def main():
    if len(sys.argv) < 4:
        sys.exit(__doc__)
    name, content_path, cites_path = sys.argv[1:4]
    out_dir = Path(sys.argv[4] if len(sys.argv) > 4 else "data")
    out_dir.mkdir(parents=True, exist_ok=True)

    ids, rows, labels = {}, [], []
    class_ids = {}
    for line in Path(content_path).open():
        parts = line.strip().split()
        if not parts:
            continue
        node, feats, label = parts[0], parts[1:-1], parts[-1]
        ids[node] = len(ids)
        rows.append(feats)
        labels.append(class_ids.setdefault(label, len(class_ids)))

    edges = set()
    dropped = 0
    for line in Path(cites_path).open():
        parts = line.split()
        if len(parts) != 2:
            continue
        a, b = parts
        if a not in ids or b not in ids:
            dropped += 1
            continue
        i, j = ids[a], ids[b]
        if i == j:
            continue
        edges.add((min(i, j), max(i, j)))

    with (out_dir / f"{name}_features.csv").open("w") as f:
        for row in rows:
            f.write(",".join(row) + "\n")
    with (out_dir / f"{name}_labels.csv").open("w") as f:
        f.write("\n".join(str(y) for y in labels) + "\n")
    with (out_dir / f"{name}_edges.txt").open("w") as f:
        for i, j in sorted(edges):
            f.write(f"{i} {j}\n")

    print(f"{name}: {len(ids)} nodes, {len(rows[0])} features, "
          f"{len(class_ids)} classes, {len(edges)} undirected edges "
          f"({dropped} dangling citations dropped)")


if __name__ == "__main__":
    main()

#!/usr/bin/env python3
"""Convert VisA's official split CSV into an fsac JSON-lines manifest.

Usage: visa_to_manifest.py VISA_ROOT [--csv split_csv/1cls.csv] [--out VISA_ROOT/manifest.jsonl]

The CSV has columns object,split,label,image,mask with label "normal" or
"anomaly". Paths in the manifest are relative to the manifest's directory.
"""

import argparse
import csv
import json
import os
import sys


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root")
    ap.add_argument("--csv", default=os.path.join("split_csv", "1cls.csv"))
    ap.add_argument("--out")
    args = ap.parse_args()

    out = args.out or os.path.join(args.root, "manifest.jsonl")
    base = os.path.dirname(os.path.abspath(out))
    with open(os.path.join(args.root, args.csv), newline="") as f:
        rows = list(csv.DictReader(f))

    def rel(p):
        return os.path.relpath(os.path.join(os.path.abspath(args.root), p), base)

    with open(out, "w") as f:
        f.write(json.dumps({"manifest_version": "v1", "dataset_name": "visa"}) + "\n")
        for r in rows:
            label = "normal" if r["label"] == "normal" else "abnormal"
            if r["split"] == "train" and label != "normal":
                print(f"skipping abnormal train image {r['image']}", file=sys.stderr)
                continue
            entry = {
                "path": rel(r["image"]),
                "class_name": r["object"],
                "split": r["split"],
                "label": label,
            }
            if label == "abnormal" and r.get("mask"):
                entry["mask_path"] = rel(r["mask"])
            f.write(json.dumps(entry) + "\n")
    print(f"wrote {len(rows)} rows to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

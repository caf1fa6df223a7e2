#!/usr/bin/env python3
"""Builds the eval-recall fixture and its expected outputs by brute force.

Writes a tiny KITTI-layout dataset (P5 images, label files including
DontCare and out-of-image boxes), a proposals CSV and the recall table and
curves that `mscnn eval-recall --proposals` must reproduce.
"""
import os
import random

ROOT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "recall")
W, H = 64, 48
BRANCHES = ["b0", "b1"]
IOU = 0.6
BUDGET = 3
BUDGETS = [1, 2, 3, 5, 8]
BINS = [(0.0, 15.0), (15.0, 30.0), (30.0, float("inf")), ]
CLASSES = ["Car", "Pedestrian", "Cyclist"]


def fmt(v):
    return "%.6f" % v


def num(v):
    # Matches the shortest round-trip formatting of whole numbers used in labels.
    return str(int(v)) if float(v).is_integer() else repr(v)


def iou(a, b):
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


def best(g, props):
    m = 0.0
    for p in props:
        m = max(m, iou(g, p))
    return m


def bin_label(lo, hi):
    return "height>=%s" % num(lo) if hi == float("inf") else "%s<=height<%s" % (num(lo), num(hi))


def main():
    rng = random.Random(4)
    os.makedirs(os.path.join(ROOT, "val", "image_2"), exist_ok=True)
    os.makedirs(os.path.join(ROOT, "val", "label_2"), exist_ok=True)
    images = []
    for i in range(4):
        name = "%06d" % i
        pixels = bytes(rng.randrange(256) for _ in range(W * H))
        with open(os.path.join(ROOT, "val", "image_2", name + ".pgm"), "wb") as f:
            f.write(b"P5\n%d %d\n255\n" % (W, H) + pixels)
        lines, gts = [], []
        for _ in range(rng.randrange(2, 5)):
            cls = rng.choice(CLASSES)
            x1 = round(rng.uniform(-6.0, 50.0), 2)
            y1 = round(rng.uniform(-6.0, 36.0), 2)
            x2 = round(x1 + rng.uniform(5.0, 30.0), 2)
            y2 = round(y1 + rng.uniform(6.0, 40.0), 2)
            lines.append("%s 0.00 0 -10 %s %s %s %s -1 -1 -1 -1000 -1000 -1000 -10" % (cls, x1, y1, x2, y2))
            c = (min(max(x1, 0.0), W), min(max(y1, 0.0), H), min(max(x2, 0.0), W), min(max(y2, 0.0), H))
            if c[2] - c[0] > 0 and c[3] - c[1] > 0:
                gts.append(c)
        # Ignored regions and boxes wholly outside the image are not ground truth.
        lines.append("DontCare -1 -1 -10 2.00 3.00 20.00 18.00 -1 -1 -1 -1000 -1000 -1000 -10")
        lines.append("Car 0.00 0 -10 70.00 10.00 90.00 30.00 -1 -1 -1 -1000 -1000 -1000 -10")
        with open(os.path.join(ROOT, "val", "label_2", name + ".txt"), "w") as f:
            f.write("\n".join(lines) + "\n")
        images.append((name, gts))

    # Proposals: jittered ground truth mixed with clutter, per branch, plus a
    # merged ranking.
    rows = []
    parsed = {}
    for name, gts in images:
        pooled = []
        for b in BRANCHES:
            props = []
            for _ in range(rng.randrange(3, 7)):
                if gts and rng.random() < 0.6:
                    g = rng.choice(gts)
                    j = rng.uniform(0.0, 5.0)
                    box = (g[0] + rng.uniform(-j, j), g[1] + rng.uniform(-j, j), g[2] + rng.uniform(-j, j), g[3] + rng.uniform(-j, j))
                    if box[2] <= box[0] + 1 or box[3] <= box[1] + 1:
                        continue
                else:
                    x, y = rng.uniform(0, 50), rng.uniform(0, 36)
                    box = (x, y, x + rng.uniform(4, 14), y + rng.uniform(4, 12))
                props.append((rng.random(), tuple(fmt(v) for v in box)))
            props.sort(key=lambda p: -p[0])
            for r, (s, box) in enumerate(props):
                rows.append([name, b, str(r), "%.9f" % s] + list(box))
            parsed[(name, b)] = [tuple(float(v) for v in box) for _, box in props]
            pooled.extend(props)
        pooled.sort(key=lambda p: -p[0])
        for r, (s, box) in enumerate(pooled):
            rows.append([name, "combined", str(r), "%.9f" % s] + list(box))
        parsed[(name, "combined")] = [tuple(float(v) for v in box) for _, box in pooled]
    with open(os.path.join(ROOT, "proposals.csv"), "w") as f:
        f.write("# config_hash=fixture\n")
        f.write("image,source,rank,score,x1,y1,x2,y2\n")
        for r in rows:
            f.write(",".join(r) + "\n")

    with open(os.path.join(ROOT, "config.txt"), "w") as f:
        f.write("[model]\nin_channels = 1\n\n[data]\nsource = kitti\nmean = 0.5\n\n")
        f.write("[eval]\niou = %s\nbudget = %d\nbudgets = %s\nbins = %s\n" % (
            IOU, BUDGET, ",".join(map(str, BUDGETS)),
            ",".join("%s-%s" % (num(lo), "inf" if hi == float("inf") else num(hi)) for lo, hi in BINS)))

    expected = os.path.join(ROOT, "expected")
    os.makedirs(expected, exist_ok=True)

    # Table: every ground-truth box against each branch's top BUDGET and
    # against the union of those sets.
    def heights_in(lo, hi):
        return [(n, g) for n, gts in images for g in gts if lo <= g[3] - g[1] < hi]

    table = ["# iou=%s" % IOU, "# budget=%d" % BUDGET, "bin,column,recall,recalled,total"]
    rows_def = [(bin_label(lo, hi), heights_in(lo, hi)) for lo, hi in BINS]
    rows_def.append(("all scales", [(n, g) for n, gts in images for g in gts]))
    for label, members in rows_def:
        for col in BRANCHES + ["combined"]:
            hit = 0
            for n, g in members:
                if col == "combined":
                    props = [p for b in BRANCHES for p in parsed[(n, b)][:BUDGET]]
                else:
                    props = parsed[(n, col)][:BUDGET]
                hit += best(g, props) >= IOU
            total = len(members)
            rec = hit / total if total else 1.0
            table.append("%s,%s,%s,%d,%d" % (label, col, fmt(rec), hit, total))
    with open(os.path.join(expected, "recall_table_iou%s_n%d.csv" % (IOU, BUDGET)), "w") as f:
        f.write("\n".join(table) + "\n")

    all_gts = [(n, g) for n, gts in images for g in gts]
    curve = ["# iou=%s" % IOU, "proposals,recall"]
    for b in BUDGETS:
        hit = sum(best(g, parsed[(n, "combined")][:b]) >= IOU for n, g in all_gts)
        curve.append("%d,%s" % (b, fmt(hit / len(all_gts))))
    with open(os.path.join(expected, "recall_vs_budget_iou%s.csv" % IOU), "w") as f:
        f.write("\n".join(curve) + "\n")

    curve = ["# budget=%d" % BUDGET, "iou,recall"]
    for i in range(21):
        t = 0.5 + i * 0.025
        hit = sum(best(g, parsed[(n, "combined")][:BUDGET]) >= t for n, g in all_gts)
        curve.append("%.3f,%s" % (t, fmt(hit / len(all_gts))))
    with open(os.path.join(expected, "recall_vs_iou_n%d.csv" % BUDGET), "w") as f:
        f.write("\n".join(curve) + "\n")


if __name__ == "__main__":
    main()

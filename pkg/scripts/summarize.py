"""Print F1 tables for every eval report in a run dir, averaging generator seeds."""
import argparse
import json
import re
import statistics
from collections import defaultdict
from pathlib import Path

NAME = re.compile(r"eval_(?P<method>[a-z]+)_(?P<tag>.+?)_(?P<split>in-domain|ood)_(?P<kind>single|cross)\.json")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("run_dir", type=Path)
    args = ap.parse_args()
    reports = args.run_dir / "reports"
    cells: dict[tuple[str, str], dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for p in sorted(reports.glob("eval_*.json")):
        m = NAME.fullmatch(p.name)
        if not m:
            continue
        variant = re.sub(r"_s\d+$", "", m["tag"])
        f1 = json.loads(p.read_text())["f1"]
        cells[(m["method"], variant)][f"{m['split']}/{m['kind']}"].append(f1)
    cols = ["in-domain/single", "in-domain/cross", "ood/single", "ood/cross"]
    print(f"{'method':<10} {'variant':<28}" + "".join(f"{c:>18}" for c in cols))
    for (method, variant), by_col in sorted(cells.items()):
        row = []
        for c in cols:
            v = by_col.get(c)
            row.append(f"{statistics.mean(v):8.1f} (n={len(v)})" if v else "-")
        print(f"{method:<10} {variant:<28}" + "".join(f"{x:>18}" for x in row))
    atk = reports / "attack_summary.json"
    if atk.exists():
        s = json.loads(atk.read_text())
        print(f"\nattack ROUGE-2 recall on {s['n_test']} held-out docs: trained {s['trained']['best_recall']:.3f}, "
              f"zero-delta control {s['zero']['best_recall']:.3f}")


if __name__ == "__main__":
    main()

"""Multi-seed ablation over the five model variants on the default synthetic data.

    python3 scripts/run_table1.py --seeds 0 1 2 3 4 [--out results/table1.json]
"""

import argparse
import json
from pathlib import Path

from dian.experiments import run_ablation
from dian.models import VARIANTS


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=VARIANTS)
    ap.add_argument("--out", type=Path)
    args = ap.parse_args()

    res = run_ablation(args.seeds, args.variants, progress=print)
    print()
    print(res.table())
    print(f"\n{res.seconds / 60:.1f} min")
    if "DIAN" in args.variants:
        for s in args.seeds:
            r = res.reports[(s, "DIAN")]
            print(f"seed {s} intent: auc={r.intent_auc:.4f} acc={r.intent_accuracy:.4f} base_rate={r.intent_base_rate:.4f}")
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        doc = {
            "seeds": res.seeds,
            "oracle_auc": {str(s): a for s, a in res.oracle_auc.items()},
            "reports": [{"seed": s, **rep.to_json()} for (s, _), rep in sorted(res.reports.items())],
        }
        args.out.write_text(json.dumps(doc, indent=1))


if __name__ == "__main__":
    main()

"""Trigger-category vs other-category CTR by monthly-visit bucket on generated data.

    python3 scripts/figure2_gap.py [--sessions 50000] [--seed 0] [--plot gap.png]
"""

import argparse
from dataclasses import replace

from scipy.stats import spearmanr

from dian.synthgen import GenConfig, ctr_gap_by_visit_bucket, generate_dataset, generate_world

LABELS = ["0", "1", "2-3", "4-7", "8-15", "16-30", ">30"]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--sessions", type=int, default=50_000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--min-pairs", type=int, default=200)
    ap.add_argument("--plot", help="write a bar chart (needs matplotlib)")
    args = ap.parse_args()

    cfg = replace(GenConfig(), n_sessions=args.sessions, rng_seed=args.seed)
    rows = ctr_gap_by_visit_bucket(generate_dataset(generate_world(cfg), cfg))
    print(f"{'visits':>7} {'sessions':>9} {'trig_ctr':>9} {'other_ctr':>10} {'gap':>7}")
    for r in rows:
        if r["gap"] is None:
            print(f"{LABELS[r['bucket']]:>7} {r['sessions']:>9}   (no pairs)")
            continue
        print(f"{LABELS[r['bucket']]:>7} {r['sessions']:>9} {r['trig_ctr']:>9.4f} {r['other_ctr']:>10.4f} {r['gap']:>7.4f}")
    kept = [r for r in rows if r["gap"] is not None and min(r["trig_pairs"], r["other_pairs"]) >= args.min_pairs]
    rho, p = spearmanr([r["bucket"] for r in kept], [r["gap"] for r in kept])
    print(f"\nspearman over {len(kept)} buckets with >= {args.min_pairs} pairs: rho={rho:.3f} p={p:.3g}")

    if args.plot:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        fig, ax = plt.subplots(figsize=(6, 3.5))
        ax.bar([LABELS[r["bucket"]] for r in kept], [r["gap"] for r in kept], color="#4a7ab5")
        ax.set_xlabel("monthly visits")
        ax.set_ylabel("trigger-category CTR gap")
        fig.tight_layout()
        fig.savefig(args.plot, dpi=120)
        print(f"wrote {args.plot}")


if __name__ == "__main__":
    main()

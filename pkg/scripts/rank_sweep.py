"""Retrieval quality and trainable-parameter count as the adapter rank varies.

    python3 scripts/rank_sweep.py --ranks 1 2 4 8 12
"""

import argparse

from dac_retrieval import dataio, training
from dac_retrieval.fusion import FusionConfig
from dac_retrieval.pipeline import evaluate_towers


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ranks", type=int, nargs="+", default=[1, 2, 4, 8, 12])
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--alpha", type=float, default=0.4)
    args = p.parse_args()

    ds, _, _ = dataio.generate(dataio.SynthConfig(seed=args.seed))
    print(f"{'rank':>4}  {'params':>6}  mAP/NDCG/ANMRR")
    for r in args.ranks:
        vt, tt, _ = training.train(ds, training.TrainConfig(rank=r, seed=args.seed))
        n_params = sum(a.a.size + a.b.size + a.phi.size for t in (vt, tt) for _, a in t.adapters())
        report = evaluate_towers(vt, tt, ds.query, ds.target, FusionConfig(alpha=args.alpha))
        print(f"{r:>4}  {n_params:>6}  {report.row()}")


if __name__ == "__main__":
    main()

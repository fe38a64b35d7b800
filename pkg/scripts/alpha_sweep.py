"""Sweep the fusion weight alpha for add and concat fusion on one trained run.

    python3 scripts/alpha_sweep.py --seed 7 --text-noise 1.75
"""

import argparse

import numpy as np

from dac_retrieval import dataio, training
from dac_retrieval.fusion import FusionConfig
from dac_retrieval.pipeline import evaluate_towers


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--text-noise", type=float, default=dataio.SynthConfig().text_noise)
    p.add_argument("--lora-mode", default="ablora", choices=training.LORA_MODES)
    p.add_argument("--act", default="tanh")
    args = p.parse_args()

    ds, _, _ = dataio.generate(dataio.SynthConfig(seed=args.seed, text_noise=args.text_noise))
    vt, tt, _ = training.train(ds, training.TrainConfig(seed=args.seed, lora_mode=args.lora_mode))
    print(f"{'alpha':>5}  {'add mAP/NDCG/ANMRR':>20}  {'concat mAP/NDCG/ANMRR':>22}")
    for alpha in np.round(np.arange(0.0, 1.0001, 0.1), 2):
        add = evaluate_towers(vt, tt, ds.query, ds.target, FusionConfig(alpha=alpha, act=args.act))
        cat = evaluate_towers(vt, tt, ds.query, ds.target, FusionConfig(alpha=alpha, scheme="concat", act=args.act))
        print(f"{alpha:>5.1f}  {add.row():>20}  {cat.row():>22}")


if __name__ == "__main__":
    main()

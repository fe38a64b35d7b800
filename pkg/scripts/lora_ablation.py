"""Compare frozen, plain-LoRA and AB-LoRA towers on a synthetic open-set dataset.

    python3 scripts/lora_ablation.py --seeds 7 1 2 3
"""

import argparse

from dac_retrieval import dataio, training
from dac_retrieval.fusion import FusionConfig
from dac_retrieval.pipeline import evaluate_towers

MODES = ("frozen", "plain_lora", "ablora")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[7])
    p.add_argument("--alpha", type=float, default=0.4, help="fusion weight; 0 for image-only")
    p.add_argument("--epochs", type=int, default=30)
    args = p.parse_args()

    print("seed  " + "  ".join(f"{m:>22}" for m in MODES))
    for seed in args.seeds:
        ds, _, _ = dataio.generate(dataio.SynthConfig(seed=seed))
        rows = []
        for mode in MODES:
            vt, tt, _ = training.train(ds, training.TrainConfig(lora_mode=mode, seed=seed, epochs=args.epochs))
            rows.append(evaluate_towers(vt, tt, ds.query, ds.target, FusionConfig(alpha=args.alpha)).row())
        print(f"{seed:>4}  " + "  ".join(f"{r:>22}" for r in rows))


if __name__ == "__main__":
    main()

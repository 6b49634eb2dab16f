"""Conditioning ablation + colour-loss comparison.

    python3 scripts/ablation.py --workdir runs/ablation --steps 600
"""
import argparse
import json

from disengen.ablation import AblationConfig, run_ablation


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--workdir", default="runs/ablation")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-eval", type=int, default=500)
    p.add_argument("--pretrain-steps", type=int, default=2000)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--every-n", type=int, default=5)
    p.add_argument("--arms", default=",".join(AblationConfig.arms))
    args = p.parse_args()
    cfg = AblationConfig(n_train=args.n_train, n_eval=args.n_eval, seed=args.seed,
                         pretrain_steps=args.pretrain_steps, steps=args.steps, every_n=args.every_n,
                         arms=tuple(a for a in args.arms.split(",") if a))
    report = run_ablation(cfg, args.workdir, log=print)
    print(json.dumps(report["results"], indent=1))


if __name__ == "__main__":
    main()

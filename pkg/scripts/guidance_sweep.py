"""Classifier-free guidance on the analytic Gaussian harness: sampled mean vs gamma.

The conditional expert is N(mu_c, 1) and the unconditional N(mu_u, 1); guided sampling
should land on N(mu_u + gamma (mu_c - mu_u), 1).
"""

import argparse

from motiondiff.gauss import GaussianExpert, guidance_displacements
from motiondiff.verify import oracle_schedule


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--gammas", default="0,0.5,1,1.5,2,3")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    gammas = [float(g) for g in args.gammas.split(",")]
    uncond, cond = GaussianExpert(0.0, 1.0), GaussianExpert(2.0, 1.0)
    disp = guidance_displacements(uncond, cond, gammas, oracle_schedule(), args.samples, args.seed)
    print("gamma  displacement  expected")
    for g, d in zip(gammas, disp):
        print(f"{g:5.2f}  {d:12.4f}  {g * (cond.mean - uncond.mean):8.4f}")


if __name__ == "__main__":
    main()

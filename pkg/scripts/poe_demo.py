"""Style interpolation as a product of Gaussian experts, sampled through the diffusion chain."""

import argparse

from motiondiff.gauss import GaussianExpert, product_gaussian, verify_poe_sampling
from motiondiff.verify import oracle_schedule


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--gammas", default="-0.25,0,0.25,0.5,0.75,1,1.25")
    p.add_argument("--samples", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    g1, g2 = GaussianExpert(0.0, 1.0), GaussianExpert(2.0, 1.0)
    sched = oracle_schedule()
    for i, gamma in enumerate(float(g) for g in args.gammas.split(",")):
        target = product_gaussian(g1, g2, gamma)
        rep = verify_poe_sampling(g1, g2, gamma, sched, args.samples, args.seed + i)
        print(f"gamma {gamma:+.2f}: closed form N({target.mean:+.3f}, {target.var:.3f})  {rep}")


if __name__ == "__main__":
    main()

"""prepare -> train -> sample on a generated demo corpus, all through the command line."""

import argparse
import os
import sys

from motiondiff.cli import main as cli
from motiondiff.synthetic import write_demo_corpus

CONFIG = """\
data:
  layout: {root: path, fixed: ["*Index*"]}
model: {n_blocks: 3, layers_per_block: 1, n_heads: 2, attention_width: 32, feedforward_width: 64,
        step_embed_dim: 32, step_hidden: 64}
train: {total_steps: %d, checkpoint_every: %d, batch_size: 8, window: 60, hop: 15, warmup_steps: 50,
        lr_max: 0.001}
"""


def run(*argv):
    print("$ motiondiff " + " ".join(argv), flush=True)
    rc = cli(list(argv))
    if rc:
        sys.exit(rc)


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("workdir")
    p.add_argument("--steps", type=int, default=300)
    args = p.parse_args()
    w = args.workdir
    data, store, run_dir = (os.path.join(w, d) for d in ("data", "store", "run"))
    write_demo_corpus(data, n_items=4, seconds=6.0)
    cfg = os.path.join(w, "demo.yaml")
    with open(cfg, "w", encoding="utf-8") as fh:
        fh.write(CONFIG % (args.steps, max(args.steps // 3, 1)))
    run("prepare", data, "--out", store, "--config", cfg)
    run("train", store, "--out", run_dir, "--config", cfg)
    ckpt = os.path.join(run_dir, "last.ckpt")
    wav = os.path.join(data, "take0.wav")
    run("sample", wav, "--checkpoint", ckpt, "--out", os.path.join(w, "calm"), "--style", "calm", "--gamma", "1.5")
    run("sample", wav, "--checkpoint", ckpt, "--out", os.path.join(w, "blend"), "--styles", "calm,lively",
        "--gamma=-0.25,0,0.25,0.5,0.75,1,1.25")


if __name__ == "__main__":
    main()

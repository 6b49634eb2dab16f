"""Linear probes, style swap and text alignment for trained stage-1/2 checkpoints.

    python3 scripts/probes.py --visual-ckpt runs/pipeline/visual.dgn --text-ckpt runs/pipeline/text.dgn \
        --train runs/pipeline/train --heldout runs/pipeline/heldout
"""
import argparse
import json

from disengen.pipeline import load_text, load_visual
from disengen.probes import alignment_report, probe_report, style_swap_fraction
from disengen.synthdata import read_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--visual-ckpt", required=True)
    p.add_argument("--text-ckpt")
    p.add_argument("--train", required=True)
    p.add_argument("--heldout", required=True)
    args = p.parse_args()
    model, _ = load_visual(args.visual_ckpt)
    train, test = read_dataset(args.train), read_dataset(args.heldout)
    out = {"probes": probe_report(model, train, test), "style_swap": style_swap_fraction(model, test)}
    if args.text_ckpt:
        embedder, heads, _ = load_text(args.text_ckpt)
        out["alignment"] = alignment_report(model, embedder, heads, test)
    print(json.dumps(out, indent=1))


if __name__ == "__main__":
    main()

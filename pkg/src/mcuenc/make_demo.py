"""Generate a random demo model file: `python -m mcuenc.make_demo out.mcub`.

Presets: bert-tiny (default) or toy.  Useful for exercising the CLI
without the training-side toolchain.
"""

from __future__ import annotations

import argparse
import sys

from .fileformat import write_model
from .model import BERT_TINY, EncoderConfig, make_random_model

PRESETS = {
    "bert-tiny": BERT_TINY,
    "toy": EncoderConfig(v=1000, d=16, h=2, L=1, d_ffn=64, s_max=64, n_cls=4),
}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m mcuenc.make_demo", description=__doc__)
    p.add_argument("out")
    p.add_argument("--preset", default="bert-tiny", choices=sorted(PRESETS))
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    model = make_random_model(PRESETS[args.preset], seed=args.seed)
    n = write_model(model, args.out)
    print(f"wrote {args.out} ({n} bytes, preset {args.preset})")
    return 0


if __name__ == "__main__":
    sys.exit(main())

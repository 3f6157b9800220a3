"""Write a procedural handwriting corpus in the Omniglot directory layout.

    python scripts/make_corpus.py /tmp/corpus            # standard counts, ~1 min
    python scripts/make_corpus.py /tmp/small --small     # 6 background / 2 evaluation alphabets
"""

import argparse

from attentive_matcher.synthetic import FULL_BACKGROUND, FULL_EVALUATION, write_corpus


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("root")
    p.add_argument("--small", action="store_true", help="a few alphabets, for quick experiments")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-strokes", action="store_true", help="skip the trajectory files")
    args = p.parse_args()
    background = [10, 20, 20, 20, 20, 20] if args.small else FULL_BACKGROUND
    evaluation = [22, 22] if args.small else FULL_EVALUATION
    paths = write_corpus(args.root, background=background, evaluation=evaluation, seed=args.seed,
                         strokes=not args.no_strokes)
    for name, path in paths.items():
        print(f"{name}\t{path}")


if __name__ == "__main__":
    main()

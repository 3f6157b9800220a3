"""Train the desk preset on a few background alphabets and score held-out episodes.

Reports argmax and full-context accuracy on random 20-way episodes drawn from
one evaluation alphabet, next to an untrained model of the same shape.

    python scripts/make_corpus.py /tmp/small --small
    python scripts/desk_experiment.py /tmp/small --steps 600
"""

import argparse
import dataclasses
import time

import numpy as np

from attentive_matcher.config import RunConfig
from attentive_matcher.data import load_image_dataset
from attentive_matcher.episodes import assign_argmax, assign_hungarian
from attentive_matcher.model import AttentiveMatcher
from attentive_matcher.training import run_training, sample_episode


def episode_accuracies(model, split, episodes, rng):
    arg, full = [], []
    for _ in range(episodes):
        sup, qry, truth, _ = sample_episode(split, 20, rng)
        s = model.score_matrix(qry, sup)
        truth = np.asarray(truth)
        arg.append(np.mean(assign_argmax(s) == truth))
        full.append(np.mean(assign_hungarian(s) == truth))
    return float(np.mean(arg)), float(np.mean(full))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("corpus_root")
    p.add_argument("--train-alphabets", default="Alphabet_02,Alphabet_03,Alphabet_04,Alphabet_05,Alphabet_06")
    p.add_argument("--test-alphabet", default="Eval_Alphabet_01")
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    cfg = RunConfig.build({"preset": "desk", "seed": args.seed})
    size = cfg.model.image_size
    train = load_image_dataset(f"{args.corpus_root}/images_background", "training", size=size,
                               alphabets=args.train_alphabets.split(","), check_counts=False)
    test = load_image_dataset(f"{args.corpus_root}/images_evaluation", "evaluation", size=size,
                              alphabets=[args.test_alphabet], check_counts=False)
    print(f"training on {train.n_classes} classes, testing on {test.n_classes}")

    untrained = AttentiveMatcher.create(cfg.model, seed=args.seed)
    arg, full = episode_accuracies(untrained, test, args.episodes, np.random.default_rng(args.seed + 7))
    print(f"untrained\targmax={arg:.3f}\tfull_context={full:.3f}")

    model = AttentiveMatcher.create(cfg.model, seed=args.seed)
    start = time.perf_counter()
    run_training(model, train, None, dataclasses.replace(cfg.train, max_steps=args.steps),
                 on_epoch=lambda row: print(f"epoch {row['epoch']}\tloss={row['train_loss']:.4f}\t"
                                            f"pair_acc={row['train_pair_acc']:.3f}", flush=True))
    print(f"trained {args.steps} steps in {time.perf_counter() - start:.0f} s")
    arg, full = episode_accuracies(model, test, args.episodes, np.random.default_rng(args.seed + 7))
    print(f"trained\targmax={arg:.3f}\tfull_context={full:.3f}")


if __name__ == "__main__":
    main()

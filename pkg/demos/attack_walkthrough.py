"""Train a small classifier on 2,000 MNIST images, then watch FGSM and PGD erode it.

    python demos/attack_walkthrough.py /root/data/mnist

Runs in a couple of minutes on one CPU core.
"""

import sys

import numpy as np

from advlab import AttackConfig, ClassifierSpec, TrainConfig, build_classifier, fgsm, pgd, train_classifier
from advlab.data import load_corpus, split, stratified_subset
from advlab.evaluate import accuracy


def main(data_dir):
    train_set, val_set = split(stratified_subset(load_corpus(data_dir, "mnist", "train"), 2000), seed=0)
    test = stratified_subset(load_corpus(data_dir, "mnist", "test"), 200)

    model = build_classifier(ClassifierSpec.profile("reduced"), np.random.default_rng(0))
    model, hist = train_classifier(model, train_set, val_set, TrainConfig(max_epochs=4, seed=0))
    print(f"best epoch {hist.best_epoch}, clean test accuracy {accuracy(model, test)[0]:.3f}")

    for eps in (0.05, 0.1, 0.2, 0.3):
        x_f = fgsm(model, test.images, test.labels, eps)
        x_p = pgd(model, test.images, test.labels, AttackConfig("pgd", eps, steps=20))
        acc_f = (model.predict(x_f).argmax(1) == test.labels).mean()
        acc_p = (model.predict(x_p).argmax(1) == test.labels).mean()
        print(f"eps {eps:.2f}  fgsm {acc_f:.3f}  pgd {acc_p:.3f}  max |dx| {np.abs(x_p - test.images).max():.3f}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "/root/data/mnist")

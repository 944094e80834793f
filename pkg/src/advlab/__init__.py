"""Adversarial robustness lab: VGG classifier, FGSM/PGD attacks and an autoencoder defense on a numpy autodiff engine."""

from .attacks import AttackConfig, fgsm, generate_adversarial_dataset, pgd
from .data import Dataset, load_corpus, load_idx_images, load_idx_labels
from .evaluate import EvalReport, accuracy, sweep
from .nn import AutoencoderSpec, ClassifierSpec, build_autoencoder, build_classifier, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward
from .train import TrainConfig, train_autoencoder, train_classifier

__version__ = "0.1.0"

"""Domain-gap probe: a frozen S-vs-R classifier scored on translated S images.

The classifier is a PatchGAN discriminator whose patch logits are averaged
into one logit per image (positive = synthetic).  It is trained once on
untranslated pools and then frozen; a translator that closes the gap drives
its "synthetic" rate on translated images down toward chance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..cyclegan import DiscriminatorNet, GeneratorNet, to_signed, translate_array
from ..engine import Adam, Tape, Tensor, backward, conv2d, loss_bce_logits, reshape


@dataclass
class ClassifierConfig:
    base_width: int = 16
    steps: int = 400
    batch_size: int = 16
    lr: float = 0.001
    seed: int = 0


class DomainClassifier:
    def __init__(self, net: DiscriminatorNet):
        self.net = net

    def logits(self, images: np.ndarray, batch: int = 32) -> np.ndarray:
        """One logit per [0, 1] image; positive means synthetic."""
        out = []
        for i in range(0, len(images), batch):
            patch = self.net(Tensor(to_signed(np.asarray(images[i : i + batch], dtype=np.float64)))).data
            out.append(patch.mean(axis=(1, 2, 3)))
        return np.concatenate(out) if out else np.zeros(0)

    def synthetic_rate(self, images: np.ndarray) -> float:
        return float(np.mean(self.logits(images) > 0))

    def accuracy(self, s_images: np.ndarray, r_images: np.ndarray) -> float:
        hits = np.concatenate([self.logits(s_images) > 0, self.logits(r_images) <= 0])
        return float(hits.mean())


def train_domain_classifier(s_images: np.ndarray, r_images: np.ndarray,
                            config: ClassifierConfig = ClassifierConfig()) -> DomainClassifier:
    """Balanced mini-batches of S (label 1) and R (label 0); BCE on the pooled logit."""
    if not len(s_images) or not len(r_images):
        raise ValueError("classifier training needs both S and R images")
    rng = np.random.default_rng([config.seed, 0xC1A5])
    net = DiscriminatorNet(s_images.shape[1], config.base_width, rng)
    opt = Adam(net.params, lr=config.lr, beta1=0.9)
    half = config.batch_size // 2
    labels = np.concatenate([np.ones(half), np.zeros(half)])
    for step in range(1, config.steps + 1):
        step_rng = np.random.default_rng([config.seed, step, 0xC1A5])
        batch = np.concatenate([s_images[step_rng.integers(len(s_images), size=half)],
                                r_images[step_rng.integers(len(r_images), size=half)]])
        tape = Tape()
        with tape:
            patch = net(Tensor(to_signed(batch)))
            pooled = mean_logit(patch)
            loss = loss_bce_logits(pooled, labels)
        backward(loss, tape)
        tape.clear()
        opt.step()
    return DomainClassifier(net)


def mean_logit(patch: Tensor) -> Tensor:
    """(N, 1, h, w) patch logits -> (N,) mean logit, as one averaging convolution."""
    n, _, h, w = patch.shape
    kernel = Tensor(np.full((1, 1, h, w), 1.0 / (h * w)))
    return reshape(conv2d(patch, kernel), (n,))


def translated(gen: GeneratorNet, images: np.ndarray) -> np.ndarray:
    return np.stack([translate_array(gen, img) for img in images]) if len(images) else images

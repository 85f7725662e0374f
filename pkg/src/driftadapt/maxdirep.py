"""Step I: adversarial disentanglement of domain-invariant features.

A convolutional backbone is pushed (via a domain discriminator played
adversarially) to encode everything class-relevant into a domain-invariant
feature map, while a small variational branch absorbs what remains so a
decoder can still reconstruct the pixels.  After training, the classifier
head applied to target images yields pseudo-labels with confidences.

All losses work in probability space (heads already apply softmax) and sum
over the batch unless noted; log arguments are clamped at 1e-12.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin

from .nets import (
    DIREP_DIM,
    ConvGenerator,
    DenseClassifier,
    DomainDiscriminator,
    ImageDecoder,
    VariationalEncoder,
    component_seed,
    forward_image_backbone,
    seeded,
)

_EPS = 1e-12


def _clamped_log(p):
    if bool((p < _EPS).any()):
        warnings.warn(
            "probability underflow clamped at 1e-12 inside a cross-entropy term",
            RuntimeWarning,
            stacklevel=3,
        )
    return torch.log(torch.clamp(p, min=_EPS))


def classification_loss(probs, labels):
    """Cross-entropy -sum_i log p_i[y_i], summed over the batch."""
    labels = torch.as_tensor(labels, dtype=torch.long)
    if probs.shape[0] == 0:
        return probs.sum() * 0.0
    picked = probs[torch.arange(probs.shape[0]), labels]
    return -_clamped_log(picked).sum()


def reconstruction_loss(x, x_hat):
    """Squared error summed over batch and pixels."""
    return ((x - x_hat) ** 2).sum()


def kl_loss(z_mean, z_log_var):
    """KL(q || N(0, I)) summed over latent dims, averaged over the batch."""
    per_sample = -0.5 * (
        1.0 + z_log_var - torch.exp(z_log_var) - z_mean**2
    ).flatten(1).sum(dim=1)
    return per_sample.mean()


def discriminator_loss(domain_probs, domain_labels):
    """Binary cross-entropy on the 2-way softmax, summed over the batch."""
    d = torch.as_tensor(domain_labels, dtype=torch.long)
    picked = domain_probs[torch.arange(domain_probs.shape[0]), d]
    return -_clamped_log(picked).sum()


def generator_adversarial_loss(domain_probs, domain_labels):
    """Discriminator confusion term: cross-entropy against the *wrong* domain."""
    d = torch.as_tensor(domain_labels, dtype=torch.long)
    picked = domain_probs[torch.arange(domain_probs.shape[0]), 1 - d]
    return -_clamped_log(picked).sum()


def composite_losses(
    generator, encoder, decoder, classifier, discriminator,
    images, labels, domains, noise, alpha, beta, gamma,
):
    """Every Step-I loss term for one mixed-domain batch.

    ``noise`` is the reparameterization draw, passed in explicitly so callers
    (and gradient checks) control the sampling.  ``total`` is the main-player
    objective class + alpha*recon + beta*kl + gamma*adversarial; ``l_d`` is
    computed on detached features, so it only trains the discriminator.
    """
    direp = generator(images)
    z_mean, z_log_var = encoder(images)
    z = encoder.sample(z_mean, z_log_var, noise)
    recon = decoder(torch.cat([direp, z], dim=1))
    labels = torch.as_tensor(labels, dtype=torch.long)
    labeled = labels >= 0
    if bool(labeled.any()):
        l_c = classification_loss(classifier(direp[labeled]), labels[labeled])
    else:
        l_c = direp.sum() * 0.0
    l_recon = reconstruction_loss(images, recon)
    l_kl = kl_loss(z_mean, z_log_var)
    l_g = generator_adversarial_loss(discriminator(direp), domains)
    l_d = discriminator_loss(discriminator(direp.detach()), domains)
    total = l_c + alpha * l_recon + beta * l_kl + gamma * l_g
    return {
        "l_c": l_c, "l_recon": l_recon, "l_kl": l_kl,
        "l_g": l_g, "l_d": l_d, "total": total,
    }


class MaxDirepClassifier(BaseEstimator, ClassifierMixin):
    """Adversarially disentangled image classifier (the Step-I model).

    Semi-supervised interface: ``y == -1`` marks unlabeled samples, and
    ``domain`` (0 source, 1 target) drives the discriminator; by default
    unlabeled samples are taken to be the target domain.

    Parameters mirror the published recipe: ``alpha`` weights pixel
    reconstruction, ``beta`` the KL of the variational branch, ``gamma`` the
    adversarial confusion term; Adam at ``learning_rate`` for ``epochs``
    passes of alternating main/discriminator updates.
    """

    def __init__(self, n_classes=None, alpha=0.05, beta=1.0 / 20000.0, gamma=0.1,
                 learning_rate=1e-3, epochs=60, batch_size=32, seed=0,
                 log_path=None):
        self.n_classes = n_classes
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.log_path = log_path

    def _validate_hyper(self):
        for name in ("alpha", "beta", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive integers")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    def fit(self, X, y, domain=None, val_images=None, val_labels=None):
        self._validate_hyper()
        X = np.asarray(X, dtype=np.float32)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 3 or X.shape[1:] != (56, 56):
            raise ValueError(f"expected images of shape (N, 56, 56), got {X.shape}")
        if len(X) != len(y):
            raise ValueError("X and y lengths disagree")
        if domain is None:
            domain = (y < 0).astype(np.int64)
        domain = np.asarray(domain, dtype=np.int64)
        if set(np.unique(domain)) - {0, 1}:
            raise ValueError("domain entries must be 0 (source) or 1 (target)")
        labeled = y >= 0
        if not labeled.any():
            raise ValueError("no labeled samples to train the classifier head on")
        inferred = int(y[labeled].max()) + 1
        n_classes = self.n_classes or inferred
        if inferred > n_classes:
            raise ValueError(
                f"labels reach {inferred - 1} but n_classes is {n_classes}"
            )
        src_idx = np.flatnonzero(domain == 0)
        tgt_idx = np.flatnonzero(domain == 1)
        if len(src_idx) == 0 or len(tgt_idx) == 0:
            raise ValueError("training needs samples from both domains")

        self._init_nets(n_classes)

        main_params = (
            list(self.generator_.parameters())
            + list(self.encoder_.parameters())
            + list(self.decoder_.parameters())
            + list(self.classifier_.parameters())
        )
        opt_main = torch.optim.Adam(main_params, lr=self.learning_rate)
        opt_disc = torch.optim.Adam(
            self.discriminator_.parameters(), lr=self.learning_rate
        )

        rng = np.random.default_rng(component_seed(self.seed, "batches"))
        torch.manual_seed(component_seed(self.seed, "noise"))
        images = torch.from_numpy(X)
        labels = torch.from_numpy(y)
        domains = torch.from_numpy(domain)
        b = self.batch_size
        steps = math.ceil(max(len(src_idx), len(tgt_idx)) / b)
        self.history_ = []
        for epoch in range(self.epochs):
            src_order = _cycled(rng, src_idx, steps * b)
            tgt_order = _cycled(rng, tgt_idx, steps * b)
            sums = dict.fromkeys(("l_c", "l_recon", "l_kl", "l_g", "l_d"), 0.0)
            for step in range(steps):
                take = np.concatenate(
                    [src_order[step * b : (step + 1) * b],
                     tgt_order[step * b : (step + 1) * b]]
                )
                xb, yb, db = images[take], labels[take], domains[take]
                noise = torch.randn(len(take), 2, 12, 12)
                losses = composite_losses(
                    self.generator_, self.encoder_, self.decoder_,
                    self.classifier_, self.discriminator_,
                    xb.unsqueeze(1), yb, db, noise,
                    self.alpha, self.beta, self.gamma,
                )
                # main players first, discriminator frozen: its optimizer never
                # sees the adversarial term's gradient because its grads are
                # cleared again before the l_d backward
                opt_main.zero_grad(set_to_none=True)
                losses["total"].backward()
                opt_main.step()
                opt_disc.zero_grad(set_to_none=True)
                losses["l_d"].backward()  # built on detached features
                opt_disc.step()
                for k in sums:
                    sums[k] += float(losses[k].detach())
            row = {"epoch": epoch}
            row.update({k: v / steps for k, v in sums.items()})
            row["val_accuracy"] = self._val_accuracy(
                X, y, src_idx, val_images, val_labels
            )
            self.history_.append(row)
        if self.log_path:
            write_history_csv(self.history_, self.log_path)
        return self

    def _build(self, cls, name, *args):
        with seeded(component_seed(self.seed, name)):
            return cls(*args)

    def _init_nets(self, n_classes):
        self.n_classes_ = n_classes
        self.classes_ = np.arange(n_classes)
        self.generator_ = self._build(ConvGenerator, "generator")
        self.encoder_ = self._build(VariationalEncoder, "encoder")
        self.decoder_ = self._build(ImageDecoder, "decoder")
        self.classifier_ = self._build(
            DenseClassifier, "classifier", DIREP_DIM, n_classes
        )
        self.discriminator_ = self._build(
            DomainDiscriminator, "discriminator", DIREP_DIM
        )

    def _val_accuracy(self, X, y, src_idx, val_images, val_labels):
        if val_images is None:
            take = src_idx[:512]  # capped source subset when no val set is given
            val_images, val_labels = X[take], y[take]
        pred = self.predict(val_images)
        return float((pred == np.asarray(val_labels)).mean())

    def _eval_heads(self, X, head):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim != 3 or X.shape[1:] != (56, 56):
            raise ValueError(f"expected images of shape (N, 56, 56), got {X.shape}")
        out = []
        with torch.no_grad():
            for lo in range(0, len(X), 256):
                chunk = torch.from_numpy(X[lo : lo + 256]).unsqueeze(1)
                direp = self.generator_(chunk)
                out.append(head(direp))
        return torch.cat(out).numpy() if out else np.zeros((0,))

    def predict_proba(self, X):
        return self._eval_heads(X, self.classifier_).astype(np.float64)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def transform(self, X):
        """Flattened domain-invariant features, (N, 9216) float32."""
        return self._eval_heads(X, lambda d: torch.flatten(d, 1)).astype(np.float32)

    def domain_proba(self, X):
        """Discriminator's source/target posterior for the given images."""
        return self._eval_heads(X, self.discriminator_).astype(np.float64)

    @property
    def modules(self):
        return {
            "generator": self.generator_,
            "encoder": self.encoder_,
            "decoder": self.decoder_,
            "classifier": self.classifier_,
            "discriminator": self.discriminator_,
        }


def _cycled(rng, pool, n):
    """Shuffled indices from pool, repeated (reshuffling) until n are drawn."""
    out = []
    while sum(len(o) for o in out) < n:
        perm = pool.copy()
        rng.shuffle(perm)
        out.append(perm)
    return np.concatenate(out)[:n]


def write_history_csv(history, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        for row in history:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def _fmt(v):
    return f"{v:.9g}" if isinstance(v, float) else v


def train_step_one(source, target, val=None, **hyper):
    """Fit the Step-I model on a labeled source and unlabeled target dataset."""
    for ds, role in ((source, "source"), (target, "target")):
        if ds.modality != "image":
            raise ValueError(f"{role} dataset must be image modality, got {ds.modality}")
    if source.class_count != target.class_count:
        raise ValueError("source and target disagree on class_count")
    n_classes = hyper.pop("n_classes", None) or source.class_count
    if n_classes != source.class_count:
        raise ValueError(
            f"n_classes {n_classes} does not match dataset class_count "
            f"{source.class_count}"
        )
    ys = source.labels()  # raises if the source is not fully labeled
    X = np.concatenate([source.images(), target.images()])
    y = np.concatenate([ys, np.full(len(target), -1, dtype=np.int64)])
    domain = np.concatenate(
        [np.zeros(len(source), dtype=np.int64), np.ones(len(target), dtype=np.int64)]
    )
    est = MaxDirepClassifier(n_classes=n_classes, **hyper)
    kw = {}
    if val is not None:
        kw = {"val_images": val.images(), "val_labels": val.labels()}
    return est.fit(X, y, domain=domain, **kw)


@dataclass
class StepOneOutputs:
    """Per-sample Step-I inference over the target training set."""

    sample_keys: list
    pseudo_label: np.ndarray  # (N,) int64
    confidence: np.ndarray    # (N,) float64, max softmax probability
    direp: np.ndarray         # (N, 9216) float32 invariant features

    def __post_init__(self):
        n = len(self.sample_keys)
        if not (len(self.pseudo_label) == len(self.confidence) == len(self.direp) == n):
            raise ValueError("misaligned Step-I output arrays")
        if n and (self.confidence.min() < 0 or self.confidence.max() > 1):
            raise ValueError("confidences must lie in [0, 1]")

    def __len__(self):
        return len(self.sample_keys)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        with open(d / "step1_outputs.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_key", "pseudo_label", "confidence"])
            for k, p, c in zip(self.sample_keys, self.pseudo_label, self.confidence):
                w.writerow([k, int(p), f"{c:.9g}"])
        np.save(d / "direps.npy", self.direp)

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        keys, labels, confs = [], [], []
        with open(d / "step1_outputs.csv", newline="") as fh:
            for row in csv.DictReader(fh):
                keys.append(row["sample_key"])
                labels.append(int(row["pseudo_label"]))
                confs.append(float(row["confidence"]))
        return cls(
            sample_keys=keys,
            pseudo_label=np.asarray(labels, dtype=np.int64),
            confidence=np.asarray(confs, dtype=np.float64),
            direp=np.load(d / "direps.npy"),
        )


def infer_target(model, target):
    """Pseudo-labels, confidences, and invariant features for a target dataset."""
    if target.modality != "image":
        raise ValueError("Step-I inference runs on image datasets")
    X = target.images()
    probs = model.predict_proba(X)
    return StepOneOutputs(
        sample_keys=target.keys(),
        pseudo_label=probs.argmax(axis=1).astype(np.int64),
        confidence=probs.max(axis=1).astype(np.float64),
        direp=model.transform(X),
    )

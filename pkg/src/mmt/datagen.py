"""Synthetic source/target identity data with a controllable domain gap,
vector-space two-view augmentation, and P x K mini-batch sampling."""

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SamplingError

log = logging.getLogger(__name__)


@dataclass
class LabeledSample:
    vector: np.ndarray
    identity: int
    domain: str  # "source" | "target"
    pseudo_label: int | None = None


@dataclass
class AdaptationSample:
    """Target-domain sample as the trainer sees it: no identity field at all,
    so ground truth is structurally unreachable from the adaptation loop."""

    vector: np.ndarray
    pseudo_label: int | None = None


@dataclass
class ViewBatch:
    """One mini-batch as two independently corrupted views of the same rows."""

    view1: np.ndarray
    view2: np.ndarray


@dataclass
class DomainSpec:
    num_identities: int
    samples_per_identity: int
    input_dim: int
    sigma_between: float
    sigma_within: float
    seed: int
    domain: str = "source"
    transform_a: np.ndarray | None = None  # affine map applied to target points
    transform_b: np.ndarray | None = None

    def __post_init__(self):
        if self.sigma_within >= self.sigma_between:
            log.warning(
                "within-identity noise %.3g >= between-identity spread %.3g: identities may be inseparable",
                self.sigma_within,
                self.sigma_between,
            )
        if self.transform_a is not None:
            a = np.asarray(self.transform_a, dtype=np.float64)
            if a.shape != (self.input_dim, self.input_dim):
                raise ConfigError(f"domain transform must be {self.input_dim}x{self.input_dim}, got {a.shape}")
            if abs(np.linalg.det(a)) < 1e-9:
                raise ConfigError("domain transform must be invertible")
            self.transform_a = a


def random_rotation(dim, rng, scale=1.0):
    """Uniform-ish random rotation (det +1) times an isotropic scale."""
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q * scale


def generate(spec):
    """Draw identity prototypes from N(0, sigma_between^2 I), samples as
    prototype + N(0, sigma_within^2), then map target points x -> Ax + b.
    Pure function of the spec (seed included)."""
    rng = np.random.default_rng(spec.seed)
    prototypes = rng.normal(scale=spec.sigma_between, size=(spec.num_identities, spec.input_dim))
    samples = []
    for identity in range(spec.num_identities):
        noise = rng.normal(scale=spec.sigma_within, size=(spec.samples_per_identity, spec.input_dim))
        points = prototypes[identity] + noise
        if spec.transform_a is not None:
            points = points @ spec.transform_a.T
        if spec.transform_b is not None:
            points = points + np.asarray(spec.transform_b, dtype=np.float64)
        for vec in points:
            samples.append(LabeledSample(vector=vec, identity=identity, domain=spec.domain))
    return samples


def _augment(vector, sigma, dropout, rng):
    out = vector + rng.normal(scale=sigma, size=vector.shape) if sigma > 0 else vector.copy()
    if dropout > 0:
        out = out * (rng.random(vector.shape) >= dropout)
    return np.asarray(out, dtype=np.float64)


def two_views(x, sigma, dropout, seed):
    """Two independent corruptions of one sample: Gaussian jitter plus
    random coordinate dropout, separately drawn per view."""
    vector = x.vector if hasattr(x, "vector") else np.asarray(x, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return _augment(vector, sigma, dropout, rng), _augment(vector, sigma, dropout, rng)


def two_view_batch(vectors, sigma, dropout, rng):
    """Vectorized two_views over a [B, d] matrix."""
    vectors = np.asarray(vectors, dtype=np.float64)
    view1 = _augment(vectors, sigma, dropout, rng)
    view2 = _augment(vectors, sigma, dropout, rng)
    return view1, view2


def sample_pk_batch(dataset, labels, p, k, seed):
    """Pick P classes then K instances per class (with replacement only when
    a class has fewer than K members). Returns indices into ``dataset``."""
    labels = np.asarray(labels)
    if len(labels) != len(dataset):
        raise SamplingError("labels must align with dataset")
    classes = [c for c in np.unique(labels) if c >= 0]
    if len(classes) < p:
        raise SamplingError(f"need at least {p} non-empty classes, found {len(classes)}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    chosen = rng.choice(len(classes), size=p, replace=False)
    batch = []
    for ci in chosen:
        members = np.flatnonzero(labels == classes[ci])
        picks = rng.choice(members, size=k, replace=len(members) < k)
        batch.extend(int(i) for i in picks)
    return batch


def split_by_identity(samples, holdout_fraction, seed):
    """Per-identity seeded split; returns (kept, held_out)."""
    rng = np.random.default_rng(seed)
    by_id = {}
    for i, s in enumerate(samples):
        by_id.setdefault(s.identity, []).append(i)
    kept_idx, held_idx = [], []
    for identity in sorted(by_id):
        idx = np.array(by_id[identity])
        n_hold = int(round(holdout_fraction * len(idx)))
        perm = rng.permutation(len(idx))
        held_idx.extend(idx[perm[:n_hold]])
        kept_idx.extend(idx[perm[n_hold:]])
    return [samples[i] for i in sorted(kept_idx)], [samples[i] for i in sorted(held_idx)]


def strip_identities(samples):
    return [AdaptationSample(vector=s.vector.copy()) for s in samples]


def vectors_of(samples):
    return np.stack([s.vector for s in samples])


def identities_of(samples):
    return np.array([s.identity for s in samples], dtype=int)


def save_samples(path, samples):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps({"vector": list(s.vector), "identity": s.identity, "domain": s.domain}))
            fh.write("\n")


def load_samples(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.append(
                LabeledSample(
                    vector=np.asarray(rec["vector"], dtype=np.float64),
                    identity=int(rec["identity"]),
                    domain=rec["domain"],
                )
            )
    return out

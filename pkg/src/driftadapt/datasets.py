"""Datasets, byte-to-image conversion, synthetic drift benchmarks, and task assembly.

A :class:`DomainDataset` is an ordered collection of image or graph samples
with a shared label space.  Labels on adaptation targets are *hidden*: they are
moved out of the samples into an evaluation-only store that records every
access, so training code cannot touch them silently.
"""

from __future__ import annotations

import csv
import json
import math
import zlib
from dataclasses import dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

IMAGE_SIZE = 56

# width bands for the classic byte-plot layout, (max size exclusive, width)
_WIDTH_BANDS = (
    (10 * 1024, 32),
    (30 * 1024, 64),
    (60 * 1024, 128),
    (100 * 1024, 256),
    (200 * 1024, 384),
    (500 * 1024, 512),
    (1024 * 1024, 768),
)
_WIDTH_MAX = 1024


def _stream(seed, *tags):
    """Deterministic, independent RNG stream for (seed, tags)."""
    entropy = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        if isinstance(t, str):
            entropy.append(zlib.crc32(t.encode("utf-8")))
        else:
            entropy.append(int(t) & 0xFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass
class ImageSample:
    key: str
    pixels: np.ndarray  # (56, 56) float32 in [0, 1]
    label: int | None = None
    domain: str = "source"


@dataclass
class GraphSample:
    """Directed graph: adjacency[u, v] == 1 iff there is an edge u -> v."""

    key: str
    node_features: np.ndarray  # (n, m) float32
    adjacency: np.ndarray      # (n, n) float32 in {0, 1}
    label: int | None = None
    domain: str = "source"

    @property
    def num_nodes(self):
        return self.node_features.shape[0]


class LabelAudit:
    """Append-only record of evaluation-label accesses."""

    def __init__(self):
        self.events = []

    def record(self, purpose, dataset, count):
        self.events.append(
            {"purpose": purpose, "dataset": dataset, "count": int(count)}
        )

    def to_list(self):
        return [dict(e) for e in self.events]


class HiddenLabelError(RuntimeError):
    """Raised when code asks for labels that are evaluation-only."""


@dataclass
class DomainDataset:
    name: str
    modality: str  # "image" | "graph"
    samples: list
    class_count: int
    hidden: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.modality not in ("image", "graph"):
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.class_count < 1:
            raise ValueError("class_count must be a positive integer")
        keys = [s.key for s in self.samples]
        if len(set(keys)) != len(keys):
            raise ValueError(f"duplicate sample keys in dataset {self.name!r}")
        for s in self.samples:
            if s.label is not None and not 0 <= s.label < self.class_count:
                raise ValueError(
                    f"label {s.label} of {s.key!r} outside [0, {self.class_count})"
                )
        for k, v in self.hidden.items():
            if not 0 <= v < self.class_count:
                raise ValueError(f"hidden label {v} of {k!r} out of range")

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def keys(self):
        return [s.key for s in self.samples]

    def labels(self):
        """Public labels as an int array; raises if any are hidden/missing."""
        out = []
        for s in self.samples:
            if s.label is None:
                raise HiddenLabelError(
                    f"dataset {self.name!r} has no public label for {s.key!r}; "
                    "evaluation-only labels go through hidden_truth(audit, purpose)"
                )
            out.append(s.label)
        return np.asarray(out, dtype=np.int64)

    def images(self):
        if self.modality != "image":
            raise ValueError(f"dataset {self.name!r} is not image modality")
        return np.stack([s.pixels for s in self.samples]).astype(np.float32)

    def graphs(self):
        if self.modality != "graph":
            raise ValueError(f"dataset {self.name!r} is not graph modality")
        return list(self.samples)

    def inputs(self):
        return self.images() if self.modality == "image" else self.graphs()

    @property
    def has_hidden_labels(self):
        return bool(self.hidden)

    def hidden_truth(self, audit, purpose):
        """Evaluation-only label map {key: class}; every call is audited."""
        if not self.hidden:
            raise HiddenLabelError(f"dataset {self.name!r} holds no hidden labels")
        if audit is None:
            raise ValueError("hidden_truth requires a LabelAudit instance")
        audit.record(purpose, self.name, len(self.hidden))
        return dict(self.hidden)

    def subset(self, indices, name=None):
        picked = [self.samples[i] for i in indices]
        hid = {s.key: self.hidden[s.key] for s in picked if s.key in self.hidden}
        return DomainDataset(
            name=name or self.name,
            modality=self.modality,
            samples=picked,
            class_count=self.class_count,
            hidden=hid,
        )

    def with_domain(self, domain, name=None):
        """Copy with every sample's domain tag rewritten."""
        return DomainDataset(
            name=name or self.name,
            modality=self.modality,
            samples=[replace(s, domain=domain) for s in self.samples],
            class_count=self.class_count,
            hidden=dict(self.hidden),
        )


def hide_labels(ds, name=None):
    """Move public labels behind the evaluation-only store."""
    hid = dict(ds.hidden)
    stripped = []
    for s in ds.samples:
        if s.label is not None:
            hid[s.key] = s.label
        stripped.append(replace(s, label=None))
    return DomainDataset(
        name=name or ds.name,
        modality=ds.modality,
        samples=stripped,
        class_count=ds.class_count,
        hidden=hid,
    )


def concat_datasets(parts, name):
    first = parts[0]
    samples, hidden = [], {}
    for p in parts:
        if p.modality != first.modality or p.class_count != first.class_count:
            raise ValueError("datasets to concatenate must share modality and class_count")
        samples.extend(p.samples)
        hidden.update(p.hidden)
    return DomainDataset(name, first.modality, samples, first.class_count, hidden)


# ---------------------------------------------------------------------------
# byte-plot conversion


def width_for_size(n_bytes):
    for limit, width in _WIDTH_BANDS:
        if n_bytes < limit:
            return width
    return _WIDTH_MAX


def bytes_to_image(raw, key="", domain="source"):
    """Render raw bytes as a 56x56 grayscale image in [0, 1].

    Bytes fill rows of a band-dependent width (wider for bigger files), the
    last row is zero-padded, and the byte matrix is resized with Lanczos
    resampling.  Empty input is rejected.
    """
    if len(raw) == 0:
        raise ValueError("cannot render an empty byte string")
    width = width_for_size(len(raw))
    height = math.ceil(len(raw) / width)
    buf = np.frombuffer(raw, dtype=np.uint8)
    padded = np.zeros(width * height, dtype=np.float32)
    padded[: len(buf)] = buf
    # resample in float mode: the 8-bit path would clip the kernel's
    # overshoot once per separable pass, drifting off the true filter output
    img = Image.fromarray(padded.reshape(height, width), mode="F")
    img = img.resize((IMAGE_SIZE, IMAGE_SIZE), resample=Image.Resampling.LANCZOS)
    pixels = np.clip(np.asarray(img, dtype=np.float32) / 255.0, 0.0, 1.0)
    return ImageSample(key=key, pixels=pixels, domain=domain)


# ---------------------------------------------------------------------------
# synthetic drift benchmark


@dataclass
class BenchmarkSpec:
    """Knobs for the synthetic drifted malware-style benchmark.

    The image side draws per-class blob composites partially mixed with a
    class-independent pattern (so classes genuinely overlap), jittered and
    noised per sample; the target domain is rotated and brightened.  The graph
    side draws per-class directed random graphs whose node features sit around
    a class mean; the target domain translates features and rewires edges.
    ``drift`` scales every drift knob at once, 0 meaning identical domains.
    """

    modality: str = "image"  # "image" | "graph" | "dual"
    class_count: int = 4
    per_class: int = 400
    # image appearance
    pattern_blobs: int = 6
    class_mix: float = 0.30
    pixel_noise: float = 0.05
    jitter_px: int = 2
    amp_jitter: float = 0.15
    # image drift
    rotation_deg: float = 13.0
    intensity_shift: float = 0.05
    blur_sigma: float = 0.0
    # graph appearance
    feature_dim: int = 8
    nodes_lo: int = 8
    nodes_hi: int = 24
    feature_scale: float = 2.0
    feature_noise: float = 1.0
    edge_base: float = 0.12
    edge_spread: float = 0.20
    # graph drift
    drift_shift: float = 1.2
    rewire_prob: float = 0.25
    drift: float = 1.0

    def __post_init__(self):
        if self.modality not in ("image", "graph", "dual"):
            raise ValueError(f"unknown benchmark modality {self.modality!r}")
        if self.class_count < 2:
            raise ValueError("benchmark needs at least two classes")
        if self.per_class < 1:
            raise ValueError("per_class must be positive")
        if self.drift < 0:
            raise ValueError("drift must be non-negative")

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name for f in fields(cls)}
        bad = set(mapping) - known
        if bad:
            raise ValueError(f"unknown benchmark keys: {sorted(bad)}")
        return cls(**mapping)


def _class_pattern(seed, c, blobs):
    rng = _stream(seed, "pattern", c)
    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    for _ in range(blobs):
        cy, cx = rng.uniform(8, IMAGE_SIZE - 8, size=2)
        sig = rng.uniform(3.0, 9.0)
        amp = rng.uniform(0.5, 1.0) * rng.choice((-1.0, 1.0))
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
    img -= img.min()
    peak = img.max()
    if peak > 0:
        img /= peak
    return 0.1 + 0.8 * img  # keep dynamic range off the clip rails


def _synth_image(spec, seed, domain, c, i, drift_scale):
    rng = _stream(seed, "image", domain, c, i)
    base = (1.0 - spec.class_mix) * _pattern(seed, c, spec.pattern_blobs) + (
        spec.class_mix
    ) * _pattern(seed, _COMMON_PATTERN, spec.pattern_blobs)
    dy, dx = rng.integers(-spec.jitter_px, spec.jitter_px + 1, size=2)
    img = np.roll(base, (dy, dx), axis=(0, 1))
    img = img * rng.uniform(1.0 - spec.amp_jitter, 1.0 + spec.amp_jitter)
    img = img + rng.normal(0.0, spec.pixel_noise, img.shape)
    d = spec.drift * drift_scale
    if d > 0:
        # severity varies per sample so the drifted domain contains a graded
        # mix of mildly and heavily transformed images rather than a uniform
        # shift of the whole population
        severity = d * rng.uniform(0.3, 1.7)
        angle = spec.rotation_deg * severity
        if angle:
            img = ndimage.rotate(img, angle, reshape=False, order=1, mode="nearest")
        sigma = spec.blur_sigma * severity
        if sigma > 0:
            img = ndimage.gaussian_filter(img, sigma=sigma, mode="nearest")
        img = img + spec.intensity_shift * severity
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# pattern index reserved for the class-independent shared structure
_COMMON_PATTERN = 10_000


@lru_cache(maxsize=256)
def _pattern(seed, which, blobs):
    return _class_pattern(seed, which, blobs)


def _class_mean_direction(seed, c, m):
    v = _stream(seed, "gclass", c).normal(0.0, 1.0, m)
    return v / np.linalg.norm(v)


def _synth_graph(spec, seed, domain, c, i, drift_scale):
    rng = _stream(seed, "graph", domain, c, i)
    n = int(rng.integers(spec.nodes_lo, spec.nodes_hi + 1))
    m = spec.feature_dim
    mu = spec.feature_scale * _class_mean_direction(seed, c, m)
    feats = mu + spec.feature_noise * rng.standard_normal((n, m))
    denom = max(1, spec.class_count - 1)
    p_edge = spec.edge_base + spec.edge_spread * c / denom
    adj = (rng.random((n, n)) < p_edge).astype(np.float64)
    np.fill_diagonal(adj, 0.0)
    d = spec.drift * drift_scale
    if d > 0:
        shift = _stream(seed, "gdrift").normal(0.0, 1.0, m)
        shift = shift / np.linalg.norm(shift)
        feats = feats + spec.drift_shift * d * shift
        drop = (rng.random(adj.shape) < spec.rewire_prob * d) & (adj > 0)
        k = int(drop.sum())
        adj[drop] = 0.0
        if k:
            open_slots = np.argwhere((adj == 0) & ~np.eye(n, dtype=bool))
            take = rng.choice(len(open_slots), size=min(k, len(open_slots)), replace=False)
            for u, v in open_slots[take]:
                adj[u, v] = 1.0
    return feats.astype(np.float32), adj.astype(np.float32)


def _domain_code(domain):
    return {"source": 0, "target": 1}[domain]


def _synth_domain(spec, seed, domain, modality, drift_scale=None, key_prefix=None,
                  classes=None, label_map=None, name=None):
    """One fully labeled domain; keys are shared between image and graph views."""
    if drift_scale is None:
        drift_scale = 0.0 if domain == "source" else 1.0
    classes = list(range(spec.class_count)) if classes is None else list(classes)
    prefix = key_prefix or ("src" if domain == "source" else "tgt")
    dom = _domain_code(domain)
    samples = []
    for c in classes:
        label = c if label_map is None else label_map[c]
        for i in range(spec.per_class):
            key = f"{prefix}-c{c:02d}-{i:05d}"
            if modality == "image":
                px = _synth_image(spec, seed, dom, c, i, drift_scale)
                samples.append(ImageSample(key, px, label, domain))
            else:
                feats, adj = _synth_graph(spec, seed, dom, c, i, drift_scale)
                samples.append(GraphSample(key, feats, adj, label, domain))
    n_classes = spec.class_count if label_map is None else max(label_map.values()) + 1
    return DomainDataset(
        name=name or f"{prefix}_{modality}",
        modality=modality,
        samples=samples,
        class_count=n_classes,
    )


def make_drift_benchmark(spec, seed):
    """Fully labeled (source, target) datasets for ``spec``; pure in (spec, seed)."""
    modality = "image" if spec.modality == "dual" else spec.modality
    source = _synth_domain(spec, seed, "source", modality)
    target = _synth_domain(spec, seed, "target", modality)
    return source, target


@dataclass
class AdaptationTask:
    """Everything one adaptation run needs.

    ``target_train`` labels are hidden.  When the benchmark is dual-modality
    the graph views carry the same sample keys as their image counterparts,
    which is what lets image-side pseudo-labels transfer to graphs.
    """

    name: str
    source_train: DomainDataset
    source_test: DomainDataset
    target_train: DomainDataset
    target_test: DomainDataset
    graph_source_train: DomainDataset | None = None
    graph_source_test: DomainDataset | None = None
    graph_target_train: DomainDataset | None = None
    graph_target_test: DomainDataset | None = None

    def __post_init__(self):
        seen = {}
        for role in ("source_train", "source_test", "target_train", "target_test"):
            for k in getattr(self, role).keys():
                if k in seen:
                    raise ValueError(
                        f"sample {k!r} appears in both {seen[k]} and {role}"
                    )
                seen[k] = role
        counts = {
            getattr(self, r).class_count
            for r in ("source_train", "source_test", "target_train", "target_test")
        }
        if len(counts) != 1:
            raise ValueError(f"class_count disagrees across splits: {sorted(counts)}")
        for img_role, g_role in (
            ("source_train", "graph_source_train"),
            ("source_test", "graph_source_test"),
            ("target_train", "graph_target_train"),
            ("target_test", "graph_target_test"),
        ):
            g = getattr(self, g_role)
            if g is not None and g.keys() != getattr(self, img_role).keys():
                raise ValueError(f"{g_role} keys are not aligned with {img_role}")

    @property
    def class_count(self):
        return self.source_train.class_count

    @property
    def has_graphs(self):
        return self.graph_source_train is not None


def split_ratio_preserving(ds, fractions, seed):
    """Random split with per-class sample counts exactly proportional.

    Within every label stratum the per-partition counts follow largest-
    remainder rounding of ``fraction * stratum_size`` (leftover seats go to
    the largest remainders, ties broken toward the earlier partition), so the
    class balance of each part matches the parent as closely as integers
    allow.  Unlabeled samples form their own stratum.
    """
    fracs = np.asarray(fractions, dtype=np.float64)
    if fracs.ndim != 1 or len(fracs) < 2:
        raise ValueError("need at least two fractions")
    if np.any(fracs < 0) or abs(fracs.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be non-negative and sum to 1")
    strata = {}
    for idx, s in enumerate(ds.samples):
        label = s.label if s.label is not None else ds.hidden.get(s.key, -1)
        strata.setdefault(label, []).append(idx)
    rng = _stream(seed, "split", ds.name)
    parts = [[] for _ in fracs]
    for label in sorted(strata):
        idxs = np.array(strata[label])
        rng.shuffle(idxs)
        n = len(idxs)
        quota = fracs * n
        counts = np.floor(quota).astype(int)
        remainder = quota - counts
        # hand out the leftover seats, largest remainder first, earlier
        # partition wins ties
        order = sorted(range(len(fracs)), key=lambda j: (-remainder[j], j))
        for j in order[: n - counts.sum()]:
            counts[j] += 1
        start = 0
        for j, cnt in enumerate(counts):
            parts[j].extend(idxs[start : start + cnt].tolist())
            start += cnt
    out = []
    for j, chosen in enumerate(parts):
        chosen.sort()  # keep the parent's sample order inside each part
        out.append(ds.subset(chosen, name=f"{ds.name}.p{j}"))
    return out


def make_benchmark_task(spec, seed, name="benchmark"):
    """Assemble a ready-to-run task: 75/25 source split, 50/50 target split,
    target-train labels hidden, graph views attached for dual modality."""
    modality = "image" if spec.modality == "dual" else spec.modality
    src = _synth_domain(spec, seed, "source", modality)
    tgt = _synth_domain(spec, seed, "target", modality)
    src_tr, src_te = split_ratio_preserving(src, (0.75, 0.25), seed)
    tgt_tr, tgt_te = split_ratio_preserving(tgt, (0.5, 0.5), seed)
    src_tr, src_te = src_tr.with_domain("source"), src_te.with_domain("source")
    tgt_tr = hide_labels(tgt_tr).with_domain("target")
    tgt_te = tgt_te.with_domain("target")
    kw = {}
    if spec.modality == "dual":
        by_key = {}
        for dom in ("source", "target"):
            for s in _synth_domain(spec, seed, dom, "graph").samples:
                by_key[s.key] = s

        def graph_view(img_ds):
            # graph twin keeps the image split's key order, labels, and
            # hidden-label store
            samples = [
                replace(by_key[s.key], label=s.label, domain=s.domain)
                for s in img_ds.samples
            ]
            return DomainDataset(
                img_ds.name + ".graph", "graph", samples,
                img_ds.class_count, dict(img_ds.hidden),
            )

        kw = dict(
            graph_source_train=graph_view(src_tr),
            graph_source_test=graph_view(src_te),
            graph_target_train=graph_view(tgt_tr),
            graph_target_test=graph_view(tgt_te),
        )
    return AdaptationTask(
        name=name,
        source_train=src_tr,
        source_test=src_te,
        target_train=tgt_tr,
        target_test=tgt_te,
        **kw,
    )


def make_monthly_datasets(spec, seed, months, drift_span=1.0):
    """Labeled monthly snapshots whose drift grows linearly over time.

    Month 0 is undrifted; month ``months - 1`` carries ``drift_span`` of the
    spec's full drift.  Feeds :func:`build_rolling_tasks`.
    """
    if months < 3:
        raise ValueError("rolling evaluation needs at least three months")
    modality = "image" if spec.modality == "dual" else spec.modality
    out = []
    for mth in range(months):
        scale = drift_span * mth / (months - 1)
        ds = _synth_domain(
            spec, seed, "target", modality,
            drift_scale=scale, key_prefix=f"m{mth:02d}", name=f"month_{mth:02d}",
        )
        out.append(ds)
    return out


def build_rolling_tasks(monthly, source_months=3, seed=0):
    """Rolling update protocol over labeled monthly datasets.

    The first ``source_months`` datasets merge into the labeled source pool
    (split 75/25 into train/test once).  Every later consecutive pair (m,
    m+1) becomes one task: adapt on month m with labels hidden, evaluate on
    month m+1.
    """
    if source_months < 1:
        raise ValueError("source_months must be positive")
    if len(monthly) < source_months + 2:
        raise ValueError(
            f"need at least {source_months + 2} monthly datasets, got {len(monthly)}"
        )
    pool = concat_datasets(monthly[:source_months], name="source_pool")
    src_tr, src_te = split_ratio_preserving(pool, (0.75, 0.25), seed)
    src_tr = src_tr.with_domain("source")
    src_te = src_te.with_domain("source")
    tasks = []
    for k in range(source_months, len(monthly) - 1):
        adapt_month, eval_month = monthly[k], monthly[k + 1]
        tasks.append(
            AdaptationTask(
                name=f"{adapt_month.name}->{eval_month.name}",
                source_train=src_tr,
                source_test=src_te,
                target_train=hide_labels(adapt_month).with_domain("target"),
                target_test=eval_month.with_domain("target"),
            )
        )
    return tasks


def make_cluster_datasets(spec, seed, clusters):
    """Malware family clusters plus a benign pool for leave-one-cluster-out.

    Each cluster is one visual/structural family (all labeled 1); the benign
    pool is its own family labeled 0.  Novelty of the held-out cluster is the
    drift.
    """
    if clusters < 2:
        raise ValueError("need at least two clusters")
    modality = "image" if spec.modality == "dual" else spec.modality
    label_map = {c: 1 for c in range(spec.class_count + clusters)}
    fam = []
    for c in range(clusters):
        ds = _synth_domain(
            spec, seed, "source", modality, drift_scale=0.0,
            key_prefix=f"clu{c}", classes=[c + 1], label_map={c + 1: 1},
            name=f"cluster_{c}",
        )
        # binary label space regardless of family id
        ds = DomainDataset(ds.name, ds.modality, ds.samples, 2, dict(ds.hidden))
        fam.append(ds)
    benign = _synth_domain(
        spec, seed, "source", modality, drift_scale=0.0,
        key_prefix="ben", classes=[0], label_map={0: 0}, name="benign",
    )
    benign = DomainDataset("benign", benign.modality, benign.samples, 2, dict(benign.hidden))
    return fam, benign


def build_cluster_task(clusters, benign, held_out, seed=0):
    """Leave-one-cluster-out task: held-out cluster is the target malware."""
    if not 0 <= held_out < len(clusters):
        raise ValueError(f"held_out {held_out} outside [0, {len(clusters)})")
    ben_src, ben_tgt = split_ratio_preserving(benign, (0.5, 0.5), seed)
    src_parts = [c for j, c in enumerate(clusters) if j != held_out]
    source = concat_datasets(src_parts + [ben_src], name=f"loco{held_out}.source")
    target = concat_datasets([clusters[held_out], ben_tgt], name=f"loco{held_out}.target")
    src_tr, src_te = split_ratio_preserving(source, (0.75, 0.25), seed)
    tgt_tr, tgt_te = split_ratio_preserving(target, (0.5, 0.5), seed)
    return AdaptationTask(
        name=f"held_out_cluster_{held_out}",
        source_train=src_tr.with_domain("source"),
        source_test=src_te.with_domain("source"),
        target_train=hide_labels(tgt_tr).with_domain("target"),
        target_test=tgt_te.with_domain("target"),
    )


# ---------------------------------------------------------------------------
# on-disk layout


def save_dataset(ds, path):
    """Write a dataset directory: images/ or graphs/, labels.csv, meta.json."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    sub = root / ("images" if ds.modality == "image" else "graphs")
    sub.mkdir(exist_ok=True)
    for s in ds.samples:
        if ds.modality == "image":
            np.save(sub / f"{s.key}.npy", s.pixels.astype(np.float32))
        else:
            np.savez(
                sub / f"{s.key}.npz",
                node_features=s.node_features.astype(np.float32),
                adjacency=s.adjacency.astype(np.float32),
            )
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_key", "label"])
        for s in ds.samples:
            w.writerow([s.key, "" if s.label is None else s.label])
    meta = {
        "name": ds.name,
        "modality": ds.modality,
        "class_count": ds.class_count,
        "domains": sorted({s.domain for s in ds.samples}),
        "hidden_labels": {k: int(v) for k, v in sorted(ds.hidden.items())} or None,
        "hidden_label_note": (
            "hidden_labels are evaluation-only ground truth; training code "
            "must not read them" if ds.hidden else None
        ),
    }
    with open(root / "meta.json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(path):
    root = Path(path)
    with open(root / "meta.json") as fh:
        meta = json.load(fh)
    labels = {}
    with open(root / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            labels[row["sample_key"]] = (
                int(row["label"]) if row["label"] != "" else None
            )
    modality = meta["modality"]
    domain = (meta.get("domains") or ["source"])[0]
    samples = []
    sub = root / ("images" if modality == "image" else "graphs")
    for key in labels:
        if modality == "image":
            px = np.load(sub / f"{key}.npy")
            samples.append(ImageSample(key, px, labels[key], domain))
        else:
            with np.load(sub / f"{key}.npz") as z:
                samples.append(
                    GraphSample(
                        key, z["node_features"], z["adjacency"], labels[key], domain
                    )
                )
    return DomainDataset(
        name=meta.get("name", root.name),
        modality=modality,
        samples=samples,
        class_count=meta["class_count"],
        hidden={k: int(v) for k, v in (meta.get("hidden_labels") or {}).items()},
    )


_TASK_ROLES = (
    "source_train", "source_test", "target_train", "target_test",
    "graph_source_train", "graph_source_test", "graph_target_train",
    "graph_target_test",
)


def save_task(task, path):
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    present = []
    for role in _TASK_ROLES:
        ds = getattr(task, role)
        if ds is not None:
            save_dataset(ds, root / role)
            present.append(role)
    with open(root / "task.json", "w") as fh:
        json.dump({"name": task.name, "roles": present}, fh, indent=2)
        fh.write("\n")


def load_task(path):
    root = Path(path)
    with open(root / "task.json") as fh:
        info = json.load(fh)
    kw = {"name": info["name"]}
    for role in info["roles"]:
        kw[role] = load_dataset(root / role)
    return AdaptationTask(**kw)

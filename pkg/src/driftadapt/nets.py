"""Torch building blocks shared by the trainers.

Image tensors are channels-first (B, 1, 56, 56).  The invariant-feature
backbone maps an image to a (64, 12, 12) feature map, flattened to 9216 when
a dense head consumes it.  Heads emit probability vectors (softmax applied),
matching the probability-space loss definitions in :mod:`driftadapt.maxdirep`.
"""

from __future__ import annotations

import json
import zlib
from contextlib import contextmanager

import numpy as np
import torch
from torch import nn

IMAGE_SIZE = 56
DIREP_SHAPE = (64, 12, 12)
DIREP_DIM = 64 * 12 * 12  # 9216
DDREP_CHANNELS = 2


def component_seed(seed, name):
    """Stable per-component sub-seed so sibling nets get independent init."""
    return (int(seed) * 1000003 + zlib.crc32(name.encode("utf-8"))) % (2**31 - 1)


@contextmanager
def seeded(seed):
    """Run the block under a forked, seeded torch RNG; outer state untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


class ConvGenerator(nn.Module):
    """Invariant-feature backbone: two valid 3x3 convs with max-pooling,
    56 -> 54 -> 27 -> 25 -> 12 spatially, 64 output channels."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 32, 3)
        self.conv2 = nn.Conv2d(32, 64, 3)
        self.pool = nn.MaxPool2d(2)

    def forward(self, x):
        x = self.pool(torch.relu(self.conv1(x)))
        x = self.pool(torch.relu(self.conv2(x)))
        return x


class VariationalEncoder(nn.Module):
    """Domain-specific branch: strided convs to 14x14, then valid 3x3 heads
    emitting a 12x12x2 mean and log-variance."""

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 32, 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(32, 64, 3, stride=2, padding=1)
        self.mean_head = nn.Conv2d(64, DDREP_CHANNELS, 3)
        self.log_var_head = nn.Conv2d(64, DDREP_CHANNELS, 3)

    def forward(self, x):
        h = torch.relu(self.conv1(x))
        h = torch.relu(self.conv2(h))
        return self.mean_head(h), self.log_var_head(h)

    def sample(self, z_mean, z_log_var, noise):
        # reparameterization: z = mean + exp(log_var / 2) * eps
        return z_mean + torch.exp(0.5 * z_log_var) * noise


class ImageDecoder(nn.Module):
    """Reconstruct 56x56 pixels from the concatenated (64 + 2)-channel
    representation; sigmoid output keeps values in (0, 1)."""

    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(DIREP_SHAPE[0] + DDREP_CHANNELS, 64, 3, padding=1)
        self.up1 = nn.ConvTranspose2d(64, 64, 3, stride=2, output_padding=1)
        self.up2 = nn.ConvTranspose2d(64, 64, 3, stride=2, padding=1, output_padding=1)
        self.up3 = nn.ConvTranspose2d(64, 32, 3)
        self.out = nn.ConvTranspose2d(32, 1, 3)

    def forward(self, x):
        x = torch.relu(self.conv(x))       # 12
        x = torch.relu(self.up1(x))        # 26
        x = torch.relu(self.up2(x))        # 52
        x = torch.relu(self.up3(x))        # 54
        return torch.sigmoid(self.out(x))  # 56


class DenseClassifier(nn.Module):
    """Flatten, one 256-wide ReLU layer, softmax over classes."""

    def __init__(self, in_dim, n_classes, hidden=256):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, n_classes)

    def forward(self, x):
        x = torch.flatten(x, 1)
        x = torch.relu(self.fc1(x))
        return torch.softmax(self.fc2(x), dim=1)


class DomainDiscriminator(nn.Module):
    """Flatten, two equal-width ReLU layers, 2-way softmax (0 source, 1 target)."""

    def __init__(self, in_dim, hidden=1024):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.out = nn.Linear(hidden, 2)

    def forward(self, x):
        x = torch.flatten(x, 1)
        x = torch.relu(self.fc1(x))
        x = torch.relu(self.fc2(x))
        return torch.softmax(self.out(x), dim=1)


def forward_image_backbone(generator, images):
    """Run images (N, 56, 56) or (N, 1, 56, 56) through the backbone."""
    t = torch.as_tensor(images)
    if t.dim() == 3:
        t = t.unsqueeze(1)
    if t.dim() != 4 or t.shape[-2:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"expected (N, {IMAGE_SIZE}, {IMAGE_SIZE}) images, got {tuple(t.shape)}")
    p = next(generator.parameters())
    return generator(t.to(p.dtype))


# ---------------------------------------------------------------------------
# graph side


class GinLayer(nn.Module):
    """One sum-aggregation graph-isomorphism layer (epsilon = 0).

    A node aggregates itself plus incoming neighbors, densely
    h' = mlp((A^T + I) h), with a 2-layer ReLU MLP.  Padded rows are masked
    back to zero so they never leak through the bias terms.
    """

    def __init__(self, in_dim, hidden=128):
        super().__init__()
        self.lin1 = nn.Linear(in_dim, hidden)
        self.lin2 = nn.Linear(hidden, hidden)

    def forward(self, h, adj, mask):
        agg = torch.bmm(adj.transpose(1, 2), h) + h
        out = torch.relu(self.lin2(torch.relu(self.lin1(agg))))
        return out * mask.unsqueeze(-1)


class GinBackbone(nn.Module):
    """Three GIN layers; returns the per-layer mean-pooled graph vectors."""

    def __init__(self, feature_dim, hidden=128, n_layers=3):
        super().__init__()
        dims = [feature_dim] + [hidden] * n_layers
        self.layers = nn.ModuleList(
            GinLayer(dims[i], dims[i + 1]) for i in range(n_layers)
        )

    def forward(self, feats, adj, mask):
        pooled = []
        h = feats * mask.unsqueeze(-1)
        counts = mask.sum(dim=1, keepdim=True).clamp(min=1.0)
        for layer in self.layers:
            h = layer(h, adj, mask)
            pooled.append(h.sum(dim=1) / counts)
        return pooled


class GinClassifier(nn.Module):
    """Graph classifier: GIN stack, jumping-knowledge concatenation of the
    pooled per-layer vectors, a 128-wide ReLU layer with dropout, softmax."""

    def __init__(self, feature_dim, n_classes, hidden=128, n_layers=3, dropout=0.5):
        super().__init__()
        self.backbone = GinBackbone(feature_dim, hidden, n_layers)
        self.dense = nn.Linear(hidden * n_layers, hidden)
        self.dropout = nn.Dropout(dropout)
        self.out = nn.Linear(hidden, n_classes)

    def embed(self, feats, adj, mask):
        jk = torch.cat(self.backbone(feats, adj, mask), dim=1)
        return torch.relu(self.dense(jk))

    def forward(self, feats, adj, mask):
        e = self.dropout(self.embed(feats, adj, mask))
        return torch.softmax(self.out(e), dim=1)


class GinGenerator(nn.Module):
    """Adversarial-adaptation graph backbone: GIN stack, mean pooling of the
    last layer, and a 256-wide dense embedding."""

    def __init__(self, feature_dim, hidden=128, n_layers=3, embed_dim=256):
        super().__init__()
        self.backbone = GinBackbone(feature_dim, hidden, n_layers)
        self.dense = nn.Linear(hidden, embed_dim)

    def forward(self, feats, adj, mask):
        pooled = self.backbone(feats, adj, mask)[-1]
        return torch.relu(self.dense(pooled))


def pad_graphs(graphs, dtype=torch.float32):
    """Stack variable-size graphs into padded (feats, adj, mask) tensors."""
    if not graphs:
        raise ValueError("empty graph batch")
    n_max = max(g.num_nodes for g in graphs)
    m = graphs[0].node_features.shape[1]
    b = len(graphs)
    feats = torch.zeros((b, n_max, m), dtype=dtype)
    adj = torch.zeros((b, n_max, n_max), dtype=dtype)
    mask = torch.zeros((b, n_max), dtype=dtype)
    for j, g in enumerate(graphs):
        n = g.num_nodes
        if g.node_features.shape[1] != m:
            raise ValueError("inconsistent node feature dimensions in batch")
        if g.adjacency.shape != (n, n):
            raise ValueError(f"adjacency of {g.key!r} is not (n, n)")
        feats[j, :n] = torch.as_tensor(g.node_features, dtype=dtype)
        adj[j, :n, :n] = torch.as_tensor(g.adjacency, dtype=dtype)
        mask[j, :n] = 1.0
    return feats, adj, mask


def gin_embed(model, graph):
    """Fixed-length embedding of one graph sample (eval mode, no dropout)."""
    feats, adj, mask = pad_graphs([graph], dtype=next(model.parameters()).dtype)
    training = model.training
    model.eval()
    with torch.no_grad():
        if hasattr(model, "embed"):
            e = model.embed(feats, adj, mask)
        else:
            e = model(feats, adj, mask)
    if training:
        model.train()
    return e[0].cpu().numpy()


# ---------------------------------------------------------------------------
# checkpointing


def save_checkpoint(path, modules, meta):
    """Write named modules plus a JSON manifest into one .npz archive.

    Array keys are ``<module>:<parameter>``; the manifest lands under
    ``__manifest__``.  Round-trips bit-exactly.
    """
    arrays = {}
    shapes = {}
    for name, mod in modules.items():
        for pname, tensor in mod.state_dict().items():
            key = f"{name}:{pname}"
            arr = tensor.detach().cpu().numpy()
            arrays[key] = arr
            shapes[key] = {"shape": list(arr.shape), "dtype": str(arr.dtype)}
    manifest = dict(meta)
    manifest["arrays"] = shapes
    arrays["__manifest__"] = np.array(json.dumps(manifest, sort_keys=True, default=str))
    np.savez(path, **arrays)


def load_checkpoint(path):
    """Return (arrays, manifest) from :func:`save_checkpoint` output."""
    with np.load(path, allow_pickle=False) as z:
        manifest = json.loads(str(z["__manifest__"]))
        arrays = {k: z[k] for k in z.files if k != "__manifest__"}
    return arrays, manifest


def restore_modules(modules, arrays):
    """Load ``<module>:<parameter>`` arrays back into the named modules."""
    for name, mod in modules.items():
        prefix = name + ":"
        state = {
            k[len(prefix):]: torch.as_tensor(v)
            for k, v in arrays.items()
            if k.startswith(prefix)
        }
        missing = set(mod.state_dict()) - set(state)
        if missing:
            raise ValueError(f"checkpoint lacks {sorted(missing)} for module {name!r}")
        mod.load_state_dict(state)

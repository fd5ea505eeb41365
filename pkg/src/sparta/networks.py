"""Encoders, fusion heads, projector and decoder."""
from __future__ import annotations

import contextlib
import hashlib
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import CHANNELS
from .errors import ConfigError, ContractError

FUSION_KINDS = ("early", "attention", "gnn")


def _norm(channels, max_groups=8):
    """GroupNorm with up to 8 groups, never fewer than two channels per group (when possible)."""
    return nn.GroupNorm(math.gcd(channels, max_groups, max(channels // 2, 1)), channels)


@contextlib.contextmanager
def seeded(seed):
    """Run parameter initialization under a fixed seed without touching global RNG state."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def parameter_digest(*modules) -> str:
    h = hashlib.sha256()
    for m in modules:
        for name, t in sorted(m.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# ResNet-18 style encoder


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = _norm(cout)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), _norm(cout))

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNetEncoder(nn.Module):
    """ResNet-18 layout. The stem normalization uses batch statistics, every later one is GroupNorm."""

    def __init__(self, in_channels, dim, width=64, blocks=(2, 2, 2, 2)):
        super().__init__()
        self.in_channels = in_channels
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, width, 7, 2, 3, bias=False),
            nn.BatchNorm2d(width),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(3, 2, 1),
        )
        layers, cin = [], width
        for i, n in enumerate(blocks):
            cout = width * 2**i
            for j in range(n):
                layers.append(BasicBlock(cin, cout, stride=2 if (i > 0 and j == 0) else 1))
                cin = cout
        self.layers = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, dim)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ContractError(f"encoder expects (B, {self.in_channels}, H, W), got {tuple(x.shape)}")
        x = self.layers(self.stem(x))
        return self.fc(torch.flatten(F.adaptive_avg_pool2d(x, 1), 1))


# ---------------------------------------------------------------------------
# late fusion


def modal_adjacency(channels=CHANNELS, edges=(("u100", "v100"), ("t2m", "z850"))) -> torch.Tensor:
    channels = list(channels)
    adj = torch.eye(len(channels), dtype=torch.bool)
    for a, b in edges:
        if a in channels and b in channels:
            i, j = channels.index(a), channels.index(b)
            adj[i, j] = adj[j, i] = True
    return adj


def check_adjacency(adj: torch.Tensor):
    if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
        raise ConfigError(f"adjacency must be square, got {tuple(adj.shape)}")
    if not torch.equal(adj, adj.T):
        raise ConfigError("adjacency must be symmetric")
    if not bool(adj.diagonal().all()):
        raise ConfigError("every mode needs a self-connection")


class GraphAttentionFusion(nn.Module):
    """One single-head graph-attention layer over the mode graph, then a mean over nodes."""

    def __init__(self, dim, adjacency, negative_slope=0.2):
        super().__init__()
        adjacency = torch.as_tensor(adjacency, dtype=torch.bool)
        check_adjacency(adjacency)
        self.register_buffer("adjacency", adjacency)
        self.weight = nn.Linear(dim, dim, bias=False)
        bound = 1 / math.sqrt(dim)
        self.att_src = nn.Parameter(torch.empty(dim).uniform_(-bound, bound))
        self.att_dst = nn.Parameter(torch.empty(dim).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.negative_slope = negative_slope

    def node_outputs(self, modes, return_attention=False):
        wh = self.weight(modes)                                # (B, C, d)
        dst = wh @ self.att_dst                                # (B, C)
        src = wh @ self.att_src
        scores = F.leaky_relu(dst[:, :, None] + src[:, None, :], self.negative_slope)
        scores = scores.masked_fill(~self.adjacency, float("-inf"))
        att = torch.softmax(scores, dim=-1)                    # row i: weights over neighbours j
        out = att @ wh + self.bias
        return (out, att) if return_attention else out

    def forward(self, modes):
        return self.node_outputs(modes).mean(dim=1)


class AttentionFusion(nn.Module):
    """Transformer block over mode tokens plus a [CLS] token; returns the CLS output.

    With pad=True the tokens are projected to the next power-of-two width that the
    heads divide (1000 -> 1024 for 8 heads) and the CLS row is projected back to dim.
    """

    def __init__(self, dim, n_modes, heads=8, pad=True):
        super().__init__()
        if pad:
            width = max(2 ** math.ceil(math.log2(dim)), heads)
            while width % heads:
                width *= 2
        elif dim % heads:
            raise ConfigError(f"embedding dim {dim} is not divisible by {heads} heads")
        else:
            width = dim
        self.width = width
        self.inp = nn.Linear(dim, width) if width != dim else nn.Identity()
        self.out = nn.Linear(width, dim) if width != dim else nn.Identity()
        self.cls = nn.Parameter(0.02 * torch.randn(width))
        self.modal = nn.Parameter(0.02 * torch.randn(n_modes, width))
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, modes, return_attention=False):
        b = modes.shape[0]
        tokens = self.inp(modes) + self.modal
        seq = torch.cat([self.cls.expand(b, 1, -1), tokens], dim=1)
        q = self.norm1(seq)
        attended, weights = self.attn(q, q, q, need_weights=return_attention, average_attn_weights=True)
        seq = seq + attended
        seq = seq + self.mlp(self.norm2(seq))
        fused = self.out(seq[:, 0])
        return (fused, weights) if return_attention else fused


class LateFusionEncoder(nn.Module):
    def __init__(self, n_modes, dim, fusion, width=64, heads=8, adjacency=None):
        super().__init__()
        self.encoders = nn.ModuleList(ResNetEncoder(1, dim, width) for _ in range(n_modes))
        if fusion == "attention":
            self.fusion = AttentionFusion(dim, n_modes, heads)
        elif fusion == "gnn":
            self.fusion = GraphAttentionFusion(dim, adjacency if adjacency is not None else torch.eye(n_modes, dtype=torch.bool))
        else:
            raise ConfigError(f"unknown late-fusion kind {fusion!r}")

    def mode_embeddings(self, x):
        if x.ndim != 4 or x.shape[1] != len(self.encoders):
            raise ContractError(f"late fusion expects (B, {len(self.encoders)}, H, W), got {tuple(x.shape)}")
        return torch.stack([enc(x[:, i:i + 1]) for i, enc in enumerate(self.encoders)], dim=1)

    def forward(self, x):
        return self.fusion(self.mode_embeddings(x))


# ---------------------------------------------------------------------------
# projector and decoder


class Projector(nn.Module):
    def __init__(self, dim, out_dim=128, hidden=None):
        super().__init__()
        hidden = hidden or dim
        self.net = nn.Sequential(
            nn.Linear(dim, hidden), nn.BatchNorm1d(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, hidden), _norm(hidden), nn.ReLU(inplace=True),
            nn.Linear(hidden, out_dim),
        )

    def forward(self, h):
        return self.net(h)


class ResidualConvBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm1 = _norm(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = _norm(channels)

    def forward(self, x):
        out = F.relu(self.norm1(self.conv1(x)))
        return F.relu(x + self.norm2(self.conv2(out)))


class Decoder(nn.Module):
    def __init__(self, dim, out_channels, grid, blocks=5, start_channels=512):
        super().__init__()
        h, w = grid
        scale = 2**blocks
        if h % scale or w % scale:
            raise ConfigError(f"grid {grid} is not divisible by 2**{blocks}")
        self.start = (start_channels, h // scale, w // scale)
        self.fc = nn.Linear(dim, start_channels * (h // scale) * (w // scale))
        layers, cin = [], start_channels
        for _ in range(blocks):
            cout = max(cin // 2, 1)
            layers += [nn.ConvTranspose2d(cin, cout, 2, stride=2), ResidualConvBlock(cout)]
            cin = cout
        self.blocks = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, out_channels, 1)

    def forward(self, h):
        x = self.fc(h).view(h.shape[0], *self.start)
        return self.head(self.blocks(x))


# ---------------------------------------------------------------------------


class SpartaModel(nn.Module):
    """Encoder f, projector g and decoder D sharing one embedding space."""

    def __init__(self, channels, grid, dim=1000, proj_dim=128, fusion="early", width=64,
                 decoder_blocks=5, decoder_start_channels=512, heads=8, adjacency=None):
        super().__init__()
        if fusion not in FUSION_KINDS:
            raise ConfigError(f"unknown fusion kind {fusion!r}")
        self.channels = tuple(channels)
        self.grid = tuple(grid)
        self.fusion = fusion
        if fusion == "early":
            self.encoder = ResNetEncoder(len(channels), dim, width)
        else:
            if adjacency is None:
                adjacency = modal_adjacency(channels)
            self.encoder = LateFusionEncoder(len(channels), dim, fusion, width, heads, adjacency)
        self.projector = Projector(dim, proj_dim)
        self.decoder = Decoder(dim, len(channels), grid, decoder_blocks, decoder_start_channels)

    def backbone_modules(self):
        return [self.encoder, self.projector]

    def encode(self, x):
        if tuple(x.shape[-2:]) != self.grid:
            raise ContractError(f"expected grid {self.grid}, got {tuple(x.shape[-2:])}")
        return self.encoder(x)

    def project(self, h):
        return self.projector(h)

    def decode(self, h):
        return self.decoder(h)

    def forward(self, x):
        h = self.encode(x)
        return h, self.project(h)


def build_model(net_cfg, channels, grid, seed=0, dtype=torch.float32) -> SpartaModel:
    adjacency = modal_adjacency(channels, net_cfg.graph_edges)
    with seeded(seed):
        model = SpartaModel(channels, grid, net_cfg.embedding_dim, net_cfg.projection_dim, net_cfg.fusion,
                            net_cfg.encoder_width, net_cfg.decoder_blocks, net_cfg.decoder_start_channels,
                            net_cfg.attention_heads, adjacency)
    return model.to(dtype)


def set_requires_grad(modules, flag: bool):
    for m in modules:
        for p in m.parameters():
            p.requires_grad_(flag)


def count_parameters(module) -> int:
    return int(sum(np.prod(p.shape) for p in module.parameters()))

"""Dual-branch 1D-ResNet encoders, gated cross-modal fusion and Transformer head."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class ModelConfig:
    ecg_channels: int = 12
    iegm_channels: int = 6
    stage_channels: tuple[int, ...] = (64, 128, 256, 256)
    blocks_per_stage: int = 2
    stem_kernel: int = 7
    fusion_dim: int = 512
    head_dim: int = 64
    heads: int = 4
    d_ff: int = 128
    dropout: float = 0.1
    n_classes: int = 6

    def __post_init__(self):
        if self.head_dim % self.heads:
            raise ValueError(f"head_dim {self.head_dim} not divisible by heads {self.heads}")

    @property
    def embed_dim(self) -> int:
        return self.stage_channels[-1]

    @property
    def gate_scale(self) -> int:
        return self.embed_dim

    @property
    def seq_len(self) -> int:
        # the fused vector is read as a sequence of scalar tokens
        return self.fusion_dim

    def scaled(self, factor: int) -> "ModelConfig":
        """Divide every width by ``factor`` (heads and class count are kept)."""
        if factor == 1:
            return self
        return replace(
            self,
            stage_channels=tuple(max(1, c // factor) for c in self.stage_channels),
            fusion_dim=self.fusion_dim // factor,
            head_dim=self.head_dim // factor,
            d_ff=self.d_ff // factor,
        )


@dataclass(frozen=True)
class FocalConfig:
    gamma: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, dim, 2) / dim)
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: dim // 2])
    return pe


def encoder_lengths(cfg: ModelConfig, length: int) -> list[int]:
    """Temporal length after the stem conv, the max-pool and every stage."""
    pad = cfg.stem_kernel // 2
    t = (length + 2 * pad - cfg.stem_kernel) // 2 + 1
    out = [t]
    t = (t + 2 - 3) // 2 + 1
    out.append(t)
    for s in range(1, len(cfg.stage_channels)):
        t = (t - 1) // 2 + 1
        out.append(t)
    return out


# The key bias adds the same q.b term to every score of a query row, which the
# softmax cancels, so its gradient is identically zero.  Finite differences on
# it only measure round-off, so gradient checks leave it out.
ZERO_GRAD_PARAMS = ("head.attn.k.b",)


class FusionNet:
    """Parameters live in ``params`` (leaf tensors) and BN statistics in ``buffers``."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._rng = np.random.default_rng(seed)
        for branch, cin in (("enc_e", cfg.ecg_channels), ("enc_m", cfg.iegm_channels)):
            self._init_encoder(branch, cin)
        self._init_fusion()
        self._init_head()
        del self._rng
        self.pe = sinusoidal_encoding(cfg.seq_len, cfg.head_dim)

    # -- initialisation -------------------------------------------------

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def _kaiming(self, name: str, shape: tuple[int, ...], fan_in: int) -> None:
        bound = math.sqrt(6.0 / fan_in)
        self._add(name, self._rng.uniform(-bound, bound, size=shape))

    def _conv(self, name, cout, cin, k):
        self._kaiming(name, (cout, cin, k), cin * k)

    def _bn(self, name, c):
        self._add(f"{name}.g", np.ones(c))
        self._add(f"{name}.b", np.zeros(c))
        self.buffers[f"{name}.mean"] = np.zeros(c)
        self.buffers[f"{name}.var"] = np.ones(c)

    def _linear(self, name, din, dout):
        self._kaiming(f"{name}.w", (din, dout), din)
        self._add(f"{name}.b", np.zeros(dout))

    def _ln(self, name, d):
        self._add(f"{name}.g", np.ones(d))
        self._add(f"{name}.b", np.zeros(d))

    def _init_encoder(self, p: str, cin: int) -> None:
        cfg = self.cfg
        c0 = cfg.stage_channels[0]
        self._conv(f"{p}.stem.conv", c0, cin, cfg.stem_kernel)
        self._bn(f"{p}.stem.bn", c0)
        prev = c0
        for s, c in enumerate(cfg.stage_channels):
            for blk in range(cfg.blocks_per_stage):
                q = f"{p}.s{s}.b{blk}"
                self._conv(f"{q}.conv1", c, prev, 3)
                self._bn(f"{q}.bn1", c)
                self._conv(f"{q}.conv2", c, c, 3)
                self._bn(f"{q}.bn2", c)
                if prev != c or self._stride(s, blk) != 1:
                    self._conv(f"{q}.proj", c, prev, 1)
                    self._bn(f"{q}.proj_bn", c)
                prev = c

    def _init_fusion(self) -> None:
        e = self.cfg.embed_dim
        for mod in ("e", "m"):
            for kind in ("q", "k", "v"):
                self._linear(f"fuse.{kind}_{mod}", e, e)
        self._linear("fuse.out", 4 * e, self.cfg.fusion_dim)
        self._ln("fuse.ln", self.cfg.fusion_dim)

    def _init_head(self) -> None:
        cfg = self.cfg
        d = cfg.head_dim
        self._linear("head.tok", 1, d)
        self._ln("head.ln1", d)
        for kind in ("q", "k", "v", "o"):
            self._linear(f"head.attn.{kind}", d, d)
        self._ln("head.ln2", d)
        self._linear("head.ff1", d, cfg.d_ff)
        self._linear("head.ff2", cfg.d_ff, d)
        self._ln("head.lnf", d)
        self._linear("head.cls", d, cfg.n_classes)

    @staticmethod
    def _stride(stage: int, block: int) -> int:
        return 2 if stage > 0 and block == 0 else 1

    # -- state -----------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data.copy() for k, v in self.params.items()}
        out.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            t.data = np.array(state[k], dtype=np.float64)
        for k in self.buffers:
            self.buffers[k] = np.array(state[f"buffer:{k}"], dtype=np.float64)

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    # -- forward -----------------------------------------------------------

    def _bn_apply(self, name, x, training):
        P = self.params
        return ad.batchnorm1d(x, P[f"{name}.g"], P[f"{name}.b"], self.buffers[f"{name}.mean"],
                              self.buffers[f"{name}.var"], training)

    def _lin(self, name, x):
        return ad.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def _ln_apply(self, name, x):
        return ad.layernorm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def encode(self, branch: str, x, training: bool = False) -> Tensor:
        """[B, C_in, T] -> [B, embed_dim] for branch ``enc_e`` or ``enc_m``."""
        cfg = self.cfg
        x = ad.as_tensor(x)
        cin = cfg.ecg_channels if branch == "enc_e" else cfg.iegm_channels
        if x.ndim != 3 or x.shape[1] != cin:
            raise ad.ShapeError(f"{branch} expects [B, {cin}, T], got {x.shape}")
        if min(encoder_lengths(cfg, x.shape[2])) < 1:
            raise ValueError(f"input length {x.shape[2]} too short for the stride chain")
        P = self.params
        h = ad.conv1d(x, P[f"{branch}.stem.conv"], stride=2, padding=cfg.stem_kernel // 2)
        h = ad.relu(self._bn_apply(f"{branch}.stem.bn", h, training))
        h = ad.maxpool1d(h, 3, 2, padding=1)
        for s in range(len(cfg.stage_channels)):
            for blk in range(cfg.blocks_per_stage):
                q = f"{branch}.s{s}.b{blk}"
                stride = self._stride(s, blk)
                out = ad.conv1d(h, P[f"{q}.conv1"], stride=stride, padding=1)
                out = ad.relu(self._bn_apply(f"{q}.bn1", out, training))
                out = ad.conv1d(out, P[f"{q}.conv2"], stride=1, padding=1)
                out = self._bn_apply(f"{q}.bn2", out, training)
                skip = h
                if f"{q}.proj" in P:
                    skip = ad.conv1d(h, P[f"{q}.proj"], stride=stride)
                    skip = self._bn_apply(f"{q}.proj_bn", skip, training)
                h = ad.relu(out + skip)
        pooled = ad.adaptive_avgpool1d(h, 1)
        return ad.reshape(pooled, (pooled.shape[0], pooled.shape[1]))

    def gated(self, za: Tensor, zb: Tensor, a: str, b: str) -> Tensor:
        """sigmoid((Q_a * K_b) / sqrt(h)) * V_b, all products elementwise."""
        q = self._lin(f"fuse.q_{a}", za)
        k = self._lin(f"fuse.k_{b}", zb)
        v = self._lin(f"fuse.v_{b}", zb)
        gate = ad.sigmoid(ad.mul(ad.mul(q, k), 1.0 / math.sqrt(self.cfg.gate_scale)))
        return ad.mul(gate, v)

    def fuse(self, ze, zm, training: bool = False, rng=None) -> Tensor:
        ze, zm = ad.as_tensor(ze), ad.as_tensor(zm)
        if ze.shape != zm.shape or ze.shape[-1] != self.cfg.embed_dim:
            raise ad.ShapeError(f"fuse inputs {ze.shape} and {zm.shape}")
        zbar_e = self.gated(ze, zm, "e", "m")
        zbar_m = self.gated(zm, ze, "m", "e")
        h = ad.concat([zbar_e, zbar_m, ze, zm], axis=1)
        h = ad.relu(self._lin("fuse.out", h))
        h = ad.dropout(h, self.cfg.dropout, training, rng)
        return self._ln_apply("fuse.ln", h)

    def head(self, z, training: bool = False, rng=None) -> Tensor:
        cfg = self.cfg
        z = ad.as_tensor(z)
        if z.ndim != 2 or z.shape[1] != cfg.seq_len:
            raise ad.ShapeError(f"head expects [B, {cfg.seq_len}], got {z.shape}")
        bsz, L, d, H = z.shape[0], cfg.seq_len, cfg.head_dim, cfg.heads
        dh = d // H
        u = self._lin("head.tok", ad.reshape(z, (bsz, L, 1)))
        x = u + self.pe

        a = self._ln_apply("head.ln1", x)

        def split_heads(t):
            return ad.transpose(ad.reshape(t, (bsz, L, H, dh)), (0, 2, 1, 3))

        q, k, v = (split_heads(self._lin(f"head.attn.{n}", a)) for n in "qkv")
        att = ad.scaled_dot_attention(q, k, v, cfg.dropout, training, rng)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (bsz, L, d))
        x = x + ad.dropout(self._lin("head.attn.o", att), cfg.dropout, training, rng)

        f = self._ln_apply("head.ln2", x)
        f = ad.dropout(ad.gelu(self._lin("head.ff1", f)), cfg.dropout, training, rng)
        x = x + ad.dropout(self._lin("head.ff2", f), cfg.dropout, training, rng)

        pooled = self._ln_apply("head.lnf", ad.mean(x, axis=1))
        return self._lin("head.cls", pooled)

    def forward(self, xe, xm, training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        """Returns (fused embedding z, logits)."""
        if training and rng is None:
            raise ValueError("train-mode forward needs an rng for dropout")
        ze = self.encode("enc_e", xe, training)
        zm = self.encode("enc_m", xm, training)
        z = self.fuse(ze, zm, training, rng)
        return z, self.head(z, training, rng)

    __call__ = forward


def focal_loss(logits, labels, gamma: float = 1.0) -> Tensor:
    """Mean of -(1 - p_t)^gamma log p_t; ``labels`` are class ids 1..C.

    log p_t comes from a max-shifted log-sum-exp, so it stays finite without an
    additive epsilon and gamma = 0 is exactly cross-entropy.
    """
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min() < 1 or labels.max() > c:
        raise ValueError(f"labels must be {n} ids in 1..{c}")
    onehot = np.eye(c)[labels - 1]
    shift = np.repeat(logits.data.max(axis=1, keepdims=True), c, axis=1)
    shifted = ad.sub(logits, shift)
    lse = ad.log(ad.tsum(ad.exp(shifted), axis=1))
    logpt = ad.sub(ad.tsum(ad.mul(shifted, onehot), axis=1), lse)
    if gamma:
        logpt = ad.mul(ad.power(1.0 - ad.exp(logpt), gamma), logpt)
    return ad.mul(ad.mean(logpt), -1.0)

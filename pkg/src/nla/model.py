"""Model assembly: the sequential autoencoder (stride-4 encoder, content
head, length-restoring decoder), the transformer time-warping model, and
pairwise forwarding for the three training variants.

Checkpoints are a JSON header (names, shapes, dtypes, config, seed)
followed by concatenated little-endian raw tensor payloads in header
order.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import layers as nn
from . import tensor as T
from . import warp as W
from .tensor import Tensor

VARIANTS = ("nla", "nla_sdtw", "nla_sup")
CKPT_MAGIC = b"NLACKPT1"
CKPT_FORMAT = "nla-ckpt/1"
_DTYPE_CODES = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


@dataclass
class ModelConfig:
    in_channels: int = 16
    latent_dim: int = 32
    window_frames: int = 200
    twm_d_model: int = 32
    twm_d_k: int = 8
    twm_heads: int = 4
    twm_d_ff: int = 64
    twm_layers: int = 2
    max_latent_len: int = 128
    dropout_rate: float = 0.2
    variant: str = "nla"
    twm_input: str = "content"  # or "surrogate"
    preset: str = "desk"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.window_frames % 4 != 0:
            raise ValueError(f"window_frames must be divisible by 4, got {self.window_frames}")

    @property
    def latent_len(self) -> int:
        return self.window_frames // 4


def model_preset(name: str, variant: str = "nla") -> ModelConfig:
    if name == "paper":
        return ModelConfig(
            in_channels=256,
            latent_dim=256,
            window_frames=400,
            twm_d_model=64,
            twm_d_k=32,
            twm_heads=4,
            twm_d_ff=128,
            twm_layers=4,
            max_latent_len=100,
            variant=variant,
            preset="paper",
        )
    if name == "desk":
        return ModelConfig(variant=variant, preset="desk")
    raise ValueError(f"unknown model preset {name!r}")


@dataclass
class LatentPair:
    """Factors of one window pair plus both alignment directions."""

    c_a: Tensor
    s_a: Tensor
    c_b: Tensor
    s_b: Tensor
    align_b_to_a: W.AlignmentDistribution | None = None
    align_a_to_b: W.AlignmentDistribution | None = None
    warped_s_b_to_a: Tensor | None = None
    warped_s_a_to_b: Tensor | None = None
    sup_path_ab: W.WarpPath | list | None = None
    sup_path_ba: W.WarpPath | list | None = None


class ResLayerDown(nn.Module):
    """Two convolutions (stride-2 then dilation-2) with the input added,
    stride-matched, to the second convolution's output; ReLU and batch
    normalization follow each convolution."""

    def __init__(self, in_channels, out_channels, *, rng):
        super().__init__()
        self.conv1 = nn.Conv1d(in_channels, out_channels, 3, stride=2, dilation=1, rng=rng)
        self.bn1 = nn.BatchNorm1d(out_channels)
        self.conv2 = nn.Conv1d(out_channels, out_channels, 3, stride=1, dilation=2, rng=rng)
        self.bn2 = nn.BatchNorm1d(out_channels)
        self.proj = (
            nn.Conv1d(in_channels, out_channels, 1, rng=rng) if in_channels != out_channels else None
        )

    def __call__(self, x: Tensor) -> Tensor:
        h = self.bn1(T.relu(self.conv1(x)))
        z = self.conv2(h)
        shortcut = x[:, 1::2, :]
        if self.proj is not None:
            shortcut = self.proj(shortcut)
        return self.bn2(T.relu(T.add(z, shortcut)))


class ResLayerSame(nn.Module):
    def __init__(self, channels, *, rng):
        super().__init__()
        self.conv1 = nn.Conv1d(channels, channels, 3, rng=rng)
        self.bn1 = nn.BatchNorm1d(channels)
        self.conv2 = nn.Conv1d(channels, channels, 3, rng=rng)
        self.bn2 = nn.BatchNorm1d(channels)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.bn1(T.relu(self.conv1(x)))
        return self.bn2(T.relu(T.add(self.conv2(h), x)))


class Encoder(nn.Module):
    """[B, T, C] -> [B, T/4, d] surrogate factors."""

    def __init__(self, cfg: ModelConfig, *, rng):
        super().__init__()
        self.res1 = ResLayerDown(cfg.in_channels, cfg.latent_dim, rng=rng)
        self.res2 = ResLayerDown(cfg.latent_dim, cfg.latent_dim, rng=rng)
        self.fc = nn.Linear(cfg.latent_dim, cfg.latent_dim, rng=rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc(self.res2(self.res1(x)))


class ContentHead(nn.Module):
    """Two convolutions filtering the surrogate into the content factor."""

    def __init__(self, cfg: ModelConfig, *, rng):
        super().__init__()
        self.conv1 = nn.Conv1d(cfg.latent_dim, cfg.latent_dim, 3, rng=rng)
        self.bn1 = nn.BatchNorm1d(cfg.latent_dim)
        self.conv2 = nn.Conv1d(cfg.latent_dim, cfg.latent_dim, 3, rng=rng)
        self.bn2 = nn.BatchNorm1d(cfg.latent_dim)

    def __call__(self, s: Tensor) -> Tensor:
        h = self.bn1(T.relu(self.conv1(s)))
        return self.bn2(T.relu(self.conv2(h)))


class Decoder(nn.Module):
    """[B, L, d] -> [B, 4L, C] reconstruction."""

    def __init__(self, cfg: ModelConfig, *, rng):
        super().__init__()
        d = cfg.latent_dim
        self.up1 = nn.ConvTranspose1d(d, d, 2, rng=rng)
        self.bn_up1 = nn.BatchNorm1d(d)
        self.res1 = ResLayerSame(d, rng=rng)
        self.up2 = nn.ConvTranspose1d(d, d, 2, rng=rng)
        self.bn_up2 = nn.BatchNorm1d(d)
        self.res2 = ResLayerSame(d, rng=rng)
        self.fc = nn.Linear(d, cfg.in_channels, rng=rng)

    def __call__(self, s: Tensor) -> Tensor:
        h = self.res1(self.bn_up1(T.relu(self.up1(s))))
        h = self.res2(self.bn_up2(T.relu(self.up2(h))))
        return self.fc(h)


class TimeWarpingModel(nn.Module):
    """Transformer over the concatenated target/source latent sequences,
    emitting per-frame (jump, log-variance) alignment parameters for both
    directions in a single pass."""

    def __init__(self, cfg: ModelConfig, *, rng):
        super().__init__()
        self.cfg = cfg
        self.input_fc = nn.Linear(cfg.latent_dim, cfg.twm_d_model, rng=rng)
        self.embed = nn.PositionalSequenceEmbedding(cfg.max_latent_len, cfg.twm_d_model, rng=rng)
        self.blocks = [
            nn.TransformerBlock(
                cfg.twm_d_model, cfg.twm_d_k, cfg.twm_heads, cfg.twm_d_ff, cfg.dropout_rate, rng=rng
            )
            for _ in range(cfg.twm_layers)
        ]
        self.out_fc = nn.Linear(cfg.twm_d_model, 2, rng=rng)
        # bias the head toward a gentle forward sweep with wide variances
        latent = max(cfg.latent_len, 4)
        jump = 2.0 / latent
        self.out_fc.bias.data = np.array(
            [math.log(jump / (1.0 - jump)), 2.0 * math.log(latent / 8.0)], dtype=np.float32
        )

    def __call__(self, z_a: Tensor, z_b: Tensor, rng=None):
        squeeze = z_a.ndim == 2
        if squeeze:
            z_a = T.reshape(z_a, (1,) + z_a.shape)
            z_b = T.reshape(z_b, (1,) + z_b.shape)
        la, lb = z_a.shape[1], z_b.shape[1]
        if la + lb > 2 * self.cfg.max_latent_len:
            raise ValueError(
                f"combined length {la + lb} exceeds capacity {2 * self.cfg.max_latent_len}"
            )
        h_a = T.add(self.input_fc(z_a), self.embed(la, 1))
        h_b = T.add(self.input_fc(z_b), self.embed(lb, 2))
        h = T.concat([h_a, h_b], axis=1)
        for block in self.blocks:
            h = block(h, rng)
        out = self.out_fc(h)  # [B, la+lb, 2]
        u_a, u_b = out[:, :la, :], out[:, la:, :]
        if squeeze:
            u_a = T.reshape(u_a, (la, 2))
            u_b = T.reshape(u_b, (lb, 2))
        align_b_to_a = W.gaussian_alignment(u_a[..., 0], u_a[..., 1], lb)
        align_a_to_b = W.gaussian_alignment(u_b[..., 0], u_b[..., 1], la)
        return align_b_to_a, align_a_to_b


class NlaModel(nn.Module):
    """Autoencoder + content head + time warping model."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.seed = seed
        self.encoder = Encoder(cfg, rng=rng)
        self.content_head = ContentHead(cfg, rng=rng)
        self.decoder = Decoder(cfg, rng=rng)
        self.twm = TimeWarpingModel(cfg, rng=rng) if cfg.variant != "nla_sdtw" else None

    # -- forward pieces -------------------------------------------------

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Surrogate and content factors of [B, T, C]; T must divide by 4."""
        if x.shape[-1] != self.cfg.in_channels:
            raise T.ShapeMismatchError("encode", x.shape, (self.cfg.in_channels,))
        if x.shape[-2] % 4 != 0:
            raise ValueError(f"window length {x.shape[-2]} not divisible by 4")
        s = self.encoder(x)
        c = self.content_head(s)
        return s, c

    def decode(self, s: Tensor) -> Tensor:
        if s.shape[-1] != self.cfg.latent_dim:
            raise T.ShapeMismatchError("decode", s.shape, (self.cfg.latent_dim,))
        return self.decoder(s)

    def twm_forward(self, z_a: Tensor, z_b: Tensor, rng=None):
        if self.twm is None:
            raise ValueError(f"variant {self.cfg.variant!r} has no time warping model")
        return self.twm(z_a, z_b, rng)

    def forward_pair(
        self,
        x_a: Tensor,
        x_b: Tensor,
        rng=None,
        sup_path_ab=None,
        sup_path_ba=None,
    ) -> LatentPair:
        """Encode a window pair and, per variant, attach alignments.

        ``nla`` runs the warping model on the pair and warps each
        surrogate into the other's time base; ``nla_sup`` carries the
        provided supervised paths; ``nla_sdtw`` attaches nothing.
        """
        if x_a.shape != x_b.shape:
            raise T.ShapeMismatchError("forward_pair", x_a.shape, x_b.shape)
        if x_a.ndim == 2:
            x_a = T.reshape(x_a, (1,) + x_a.shape)
            x_b = T.reshape(x_b, (1,) + x_b.shape)
        b = x_a.shape[0]
        s_all, c_all = self.encode(T.concat([x_a, x_b], axis=0))
        s_a, s_b = s_all[:b], s_all[b:]
        c_a, c_b = c_all[:b], c_all[b:]
        pair = LatentPair(c_a=c_a, s_a=s_a, c_b=c_b, s_b=s_b)
        if self.cfg.variant == "nla":
            z_a, z_b = (c_a, c_b) if self.cfg.twm_input == "content" else (s_a, s_b)
            pair.align_b_to_a, pair.align_a_to_b = self.twm_forward(z_a, z_b, rng)
            pair.warped_s_b_to_a = W.warp_apply(W.alignment_matrix(pair.align_b_to_a), s_b)
            pair.warped_s_a_to_b = W.warp_apply(W.alignment_matrix(pair.align_a_to_b), s_a)
        elif self.cfg.variant == "nla_sup":
            pair.sup_path_ab = sup_path_ab
            pair.sup_path_ba = sup_path_ba
        return pair


def build_model(cfg: ModelConfig, seed: int = 0) -> NlaModel:
    return NlaModel(cfg, seed=seed)


# -- checkpoint format ---------------------------------------------------------


def save_checkpoint(path, model: NlaModel, extra_arrays: dict | None = None, meta: dict | None = None):
    """Write params + buffers (+ optimizer/table arrays) to one file."""
    arrays: dict[str, np.ndarray] = {}
    for name, p in model.named_params():
        arrays[f"param.{name}"] = p.data
    for name, buf in model.named_buffers():
        arrays[f"buffer.{name}"] = buf
    for name, arr in (extra_arrays or {}).items():
        arrays[f"extra.{name}"] = np.asarray(arr)
    entries = []
    for name, arr in arrays.items():
        code = "<f8" if arr.dtype == np.float64 else "<f4"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code})
    header = {
        "format": CKPT_FORMAT,
        "config": asdict(model.cfg),
        "variant": model.cfg.variant,
        "seed": model.seed,
        "arrays": entries,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for name, arr in arrays.items():
            code = "<f8" if arr.dtype == np.float64 else "<f4"
            f.write(np.ascontiguousarray(arr, dtype=code).tobytes())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(len(CKPT_MAGIC))
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format") != CKPT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        arrays = {}
        for entry in header["arrays"]:
            dtype = _DTYPE_CODES[entry["dtype"]]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            raw = f.read(count * dtype.itemsize)
            if len(raw) != count * dtype.itemsize:
                raise ValueError(f"{path}: truncated payload for array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(entry["shape"]).copy()
    return header, arrays


def load_model(path) -> tuple[NlaModel, dict, dict[str, np.ndarray]]:
    """Rebuild a model from a checkpoint; returns (model, meta, extras)."""
    header, arrays = read_checkpoint(path)
    cfg = ModelConfig(**header["config"])
    model = NlaModel(cfg, seed=header["seed"])
    params = dict(model.named_params())
    for name, arr in arrays.items():
        if name.startswith("param."):
            key = name[len("param.") :]
            if key not in params:
                raise ValueError(f"{path}: checkpoint parameter {key!r} not in model")
            if tuple(params[key].data.shape) != tuple(arr.shape):
                raise ValueError(f"{path}: shape mismatch for {key!r}")
            params[key].data = arr.astype(params[key].data.dtype)
    buffers = dict(model.named_buffers())
    for name, arr in arrays.items():
        if name.startswith("buffer."):
            key = name[len("buffer.") :]
            buffers[key][...] = arr
    extras = {n[len("extra.") :]: a for n, a in arrays.items() if n.startswith("extra.")}
    return model, header, extras

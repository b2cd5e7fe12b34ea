"""Small differentiable detectors.

``ImageConvNet`` scores the S x S byte image (attack target). ``ByteSeqNet``
scores the raw byte sequence through an embedding and a gated, strided 1-D
convolution with global max pooling (transfer target).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fgam.errors import ShapeMismatch
from fgam.imaging import GrayImage
from fgam.neural import layers

THRESHOLD = 0.5
BENIGN_LABEL = "benign"
MALWARE_LABEL = "malware"


@dataclass(frozen=True)
class Prediction:
    score: float

    @property
    def label(self) -> str:
        return MALWARE_LABEL if self.score >= THRESHOLD else BENIGN_LABEL

    @property
    def is_malware(self) -> bool:
        return self.score >= THRESHOLD


@dataclass
class Model:
    """Shared plumbing: parameters, metadata, scoring and gradients."""

    params: dict[str, np.ndarray]
    config: dict
    metadata: dict = field(default_factory=dict)

    arch = "base"

    # subclasses implement _forward / _backward over prepared batches
    def prepare(self, inputs) -> np.ndarray:
        raise NotImplementedError

    def logits(self, batch: np.ndarray) -> np.ndarray:
        return self._forward(batch)[0]

    def scores(self, inputs, batch_size: int = 64) -> np.ndarray:
        batch = self.prepare(inputs)
        out = [layers.sigmoid(self.logits(batch[i : i + batch_size])) for i in range(0, len(batch), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)

    def forward(self, sample) -> Prediction:
        return Prediction(float(self.scores([sample])[0]))

    def loss_and_grads(self, batch: np.ndarray, y: np.ndarray):
        """BCE loss, parameter gradients and the gradient w.r.t. the prepared input."""
        z, cache = self._forward(batch)
        loss, dz = layers.bce_with_logits(z, np.asarray(y, dtype=np.float64))
        grads, dx = self._backward(dz, cache)
        return loss, grads, dx

    def copy(self) -> "Model":
        return type(self)({k: v.copy() for k, v in self.params.items()}, dict(self.config), dict(self.metadata))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.params.values())


class ImageConvNet(Model):
    """Three conv(3x3) -> nonlinearity -> pool(2) blocks, a dense layer and a sigmoid."""

    arch = "image"

    @classmethod
    def init(cls, input_size: int = 64, channels=(8, 16, 16), activation: str = "relu", pool: str = "max",
             head: str = "lse", beta: float = 4.0, seed: int = 0, zeros: bool = False) -> "ImageConvNet":
        if input_size >> len(channels) < 1:
            raise ShapeMismatch(f"input size {input_size} vanishes after {len(channels)} pooling blocks")
        rng = np.random.default_rng(seed)
        params = {}
        c_in = 1
        for i, c_out in enumerate(channels, start=1):
            std = np.sqrt((2.0 if activation == "relu" else 1.0) / (c_in * 9))
            params[f"conv{i}.w"] = rng.normal(0.0, std, (c_out, c_in, 3, 3))
            params[f"conv{i}.b"] = np.zeros(c_out)
            c_in = c_out
        side = input_size
        for _ in channels:
            side //= 2
        flat = c_in * side * side if head == "flatten" else c_in
        params["dense.w"] = rng.normal(0.0, np.sqrt(1.0 / flat), flat)
        params["dense.b"] = np.zeros(1)
        if zeros:
            params = {k: np.zeros_like(v) for k, v in params.items()}
        config = {"input_size": input_size, "channels": list(channels), "activation": activation, "pool": pool,
                  "head": head, "beta": beta}
        return cls(params, config)

    @property
    def input_size(self) -> int:
        return int(self.config["input_size"])

    def prepare(self, inputs) -> np.ndarray:
        arrs = [x.pixels if isinstance(x, GrayImage) else np.asarray(x, dtype=np.float64) for x in inputs]
        s = self.input_size
        for a in arrs:
            if a.shape != (s, s):
                raise ShapeMismatch(f"ImageConvNet expects {s}x{s} images, got {a.shape}")
        return np.stack(arrs) if arrs else np.zeros((0, s, s))

    def _forward(self, x: np.ndarray):
        if x.ndim != 3 or x.shape[1:] != (self.input_size, self.input_size):
            raise ShapeMismatch(f"bad image batch shape {x.shape}")
        act_fn, _ = layers.ACTIVATIONS[self.config.get("activation", "tanh")]
        pool_fn, _ = layers.POOLS[self.config.get("pool", "avg")]
        h = (x / 255.0)[:, None]
        caches = []
        n_blocks = len(self.config["channels"])
        for i in range(1, n_blocks + 1):
            pre, conv_cache = layers.conv2d_same(h, self.params[f"conv{i}.w"], self.params[f"conv{i}.b"])
            act = act_fn(pre)
            h, pool_cache = pool_fn(act)
            caches.append((conv_cache, pre, act, pool_cache))
        feat_shape = h.shape
        head = self.config.get("head", "flatten")
        if head == "gap":
            feat = h.mean(axis=(2, 3))
        elif head == "gmp":
            flat = h.reshape(h.shape[0], h.shape[1], -1)
            gidx = flat.argmax(axis=2)
            feat = np.take_along_axis(flat, gidx[..., None], axis=2)[..., 0]
            feat_shape = (feat_shape, gidx)
        elif head == "lse":
            beta = self.config["beta"]
            flat = beta * h.reshape(h.shape[0], h.shape[1], -1)
            top = flat.max(axis=2, keepdims=True)
            ex = np.exp(flat - top)
            total = ex.sum(axis=2, keepdims=True)
            feat = (top[..., 0] + np.log(total[..., 0] / flat.shape[2])) / beta
            feat_shape = (feat_shape, ex / total)
        else:
            feat = h.reshape(len(x), -1)
        z = feat @ self.params["dense.w"] + self.params["dense.b"][0]
        return z, (caches, feat, feat_shape)

    def _backward(self, dz: np.ndarray, cache):
        caches, feat, feat_shape = cache
        grads = {
            "dense.w": feat.T @ dz,
            "dense.b": np.array([dz.sum()]),
        }
        _, act_grad = layers.ACTIVATIONS[self.config.get("activation", "tanh")]
        _, pool_back = layers.POOLS[self.config.get("pool", "avg")]
        dfeat = np.outer(dz, self.params["dense.w"])
        head = self.config.get("head", "flatten")
        if head == "gap":
            B, C, hh, ww = feat_shape
            dh = np.broadcast_to(dfeat[:, :, None, None] / (hh * ww), feat_shape).copy()
        elif head == "gmp":
            (B, C, hh, ww), gidx = feat_shape
            dh = np.zeros((B, C, hh * ww))
            np.put_along_axis(dh, gidx[..., None], dfeat[..., None], axis=2)
            dh = dh.reshape(B, C, hh, ww)
        elif head == "lse":
            (B, C, hh, ww), weights = feat_shape
            dh = (dfeat[..., None] * weights).reshape(B, C, hh, ww)
        else:
            dh = dfeat.reshape(feat_shape)
        for i in range(len(caches), 0, -1):
            conv_cache, pre, act, pool_cache = caches[i - 1]
            dh = pool_back(dh, pool_cache)
            dh = dh * act_grad(pre, act)
            dh, grads[f"conv{i}.w"], grads[f"conv{i}.b"] = layers.conv2d_same_backward(dh, conv_cache)
        return grads, dh[:, 0] / 255.0

    def input_gradient(self, image, target: float = 1.0) -> np.ndarray:
        """d BCE(score, target) / d pixels, same shape as the image."""
        batch = self.prepare([image])
        _, _, dx = self.loss_and_grads(batch, np.array([target]))
        return dx[0]


PAD_SYMBOL = 256


class ByteSeqNet(Model):
    """Byte embedding -> gated strided conv1d -> global max pool -> dense -> sigmoid."""

    arch = "byteseq"

    @classmethod
    def init(cls, max_len: int = 4096, embed_dim: int = 8, window: int = 32, filters: int = 16,
             seed: int = 0, zeros: bool = False) -> "ByteSeqNet":
        if max_len % window:
            raise ShapeMismatch("max_len must be a multiple of the window")
        rng = np.random.default_rng(seed)
        fan_in = window * embed_dim
        params = {
            "embed": rng.normal(0.0, 1.0, (PAD_SYMBOL + 1, embed_dim)),
            "conv.w": rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, filters)),
            "conv.b": np.zeros(filters),
            "gate.w": rng.normal(0.0, np.sqrt(1.0 / fan_in), (fan_in, filters)),
            "gate.b": np.zeros(filters),
            "dense.w": rng.normal(0.0, np.sqrt(1.0 / filters), filters),
            "dense.b": np.zeros(1),
        }
        params["embed"][PAD_SYMBOL] = 0.0
        if zeros:
            params = {k: np.zeros_like(v) for k, v in params.items()}
        return cls(params, {"max_len": max_len, "embed_dim": embed_dim, "window": window, "filters": filters})

    @property
    def max_len(self) -> int:
        return int(self.config["max_len"])

    def encode(self, data: bytes) -> np.ndarray:
        """Truncate/pad a byte string to the fixed model length."""
        seq = np.full(self.max_len, PAD_SYMBOL, dtype=np.int32)
        raw = np.frombuffer(bytes(data[: self.max_len]), dtype=np.uint8)
        seq[: len(raw)] = raw
        return seq

    def prepare(self, inputs) -> np.ndarray:
        rows = []
        for x in inputs:
            if isinstance(x, (bytes, bytearray, memoryview)):
                rows.append(self.encode(x))
            else:
                a = np.asarray(x)
                if a.shape != (self.max_len,):
                    raise ShapeMismatch(f"ByteSeqNet expects {self.max_len} symbols, got {a.shape}")
                rows.append(a.astype(np.int32))
        return np.stack(rows) if rows else np.zeros((0, self.max_len), dtype=np.int32)

    def embed(self, seq: np.ndarray) -> np.ndarray:
        return self.params["embed"][seq]

    def _forward(self, seq: np.ndarray):
        if seq.ndim != 2 or seq.shape[1] != self.max_len:
            raise ShapeMismatch(f"bad sequence batch shape {seq.shape}")
        z, cache = self.forward_embedded(self.embed(seq))
        return z, (seq, cache)

    def forward_embedded(self, e: np.ndarray):
        """Score already-embedded sequences of shape (B, L, embed_dim)."""
        B, L, d = e.shape
        if L != self.max_len or d != self.config["embed_dim"]:
            raise ShapeMismatch(f"bad embedded batch shape {e.shape}")
        k = self.config["window"]
        win = e.reshape(B, L // k, k * d)
        a = win @ self.params["conv.w"] + self.params["conv.b"]
        g = layers.sigmoid(win @ self.params["gate.w"] + self.params["gate.b"])
        h = a * g
        idx = h.argmax(axis=1)  # B,F
        pooled = np.take_along_axis(h, idx[:, None, :], axis=1)[:, 0]
        z = pooled @ self.params["dense.w"] + self.params["dense.b"][0]
        return z, (win, a, g, idx, pooled, e.shape)

    def backward_embedded(self, dz: np.ndarray, cache):
        win, a, g, idx, pooled, shape = cache
        B, N, _ = win.shape
        F = a.shape[2]
        grads = {"dense.w": pooled.T @ dz, "dense.b": np.array([dz.sum()])}
        dpooled = np.outer(dz, self.params["dense.w"])
        dh = np.zeros((B, N, F))
        np.put_along_axis(dh, idx[:, None, :], dpooled[:, None, :], axis=1)
        da = dh * g
        dgz = dh * a * g * (1.0 - g)
        flat = win.reshape(B * N, -1)
        grads["conv.w"] = flat.T @ da.reshape(B * N, F)
        grads["conv.b"] = da.sum(axis=(0, 1))
        grads["gate.w"] = flat.T @ dgz.reshape(B * N, F)
        grads["gate.b"] = dgz.sum(axis=(0, 1))
        dwin = da @ self.params["conv.w"].T + dgz @ self.params["gate.w"].T
        return grads, dwin.reshape(shape)

    def _backward(self, dz: np.ndarray, cache):
        seq, inner = cache
        grads, de = self.backward_embedded(dz, inner)
        d = de.shape[2]
        flat_idx = seq.reshape(-1)
        flat_de = de.reshape(-1, d)
        demb = np.stack(
            [np.bincount(flat_idx, weights=flat_de[:, j], minlength=PAD_SYMBOL + 1) for j in range(d)], axis=1
        )
        # the padding symbol's embedding stays fixed at zero
        demb[PAD_SYMBOL] = 0.0
        grads["embed"] = demb
        return grads, de

    def input_gradient(self, data, target: float = 1.0) -> np.ndarray:
        """d BCE / d embedded input, shape (max_len, embed_dim)."""
        batch = self.prepare([data])
        _, _, de = self.loss_and_grads(batch, np.array([target]))
        return de[0]

    def embedded_loss_and_grad(self, e: np.ndarray, target: float = 1.0):
        z, cache = self.forward_embedded(e[None])
        loss, dz = layers.bce_with_logits(z, np.array([target]))
        _, de = self.backward_embedded(dz, cache)
        return loss, de[0]


ARCHITECTURES = {ImageConvNet.arch: ImageConvNet, ByteSeqNet.arch: ByteSeqNet}

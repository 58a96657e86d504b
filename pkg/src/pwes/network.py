"""Two-stream attention model producing attention scores, fused features and TCAMs."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigurationError, FormatError

CKPT_MAGIC = b"PWESCK1\0"


@dataclass
class ScoreTensors:
    A_r: torch.Tensor  # (T,)
    A_f: torch.Tensor  # (T,)
    A: torch.Tensor  # (T,)
    X: torch.Tensor  # (T, D')
    S: torch.Tensor  # (T, C+1)
    S_hat: torch.Tensor  # (T, C)
    # pre-activation values of every ReLU, used by gradient checks to stay away from kinks
    preacts: tuple[torch.Tensor, ...] = ()


def topk_pool(scores: torch.Tensor, k_mil: int) -> torch.Tensor:
    """Per-column mean of the k largest entries; equal values keep temporal order."""
    T = scores.shape[0]
    if not 1 <= k_mil <= T:
        raise ValueError(f"k_mil must be in [1, {T}], got {k_mil}")
    top, _ = torch.sort(scores, dim=0, descending=True, stable=True)
    return top[:k_mil].mean(dim=0)


def default_k_mil(T: int, ratio: float = 1 / 8) -> int:
    return max(1, int(math.floor(T * ratio)))


def suppress_tcam(S: torch.Tensor, A: torch.Tensor) -> torch.Tensor:
    if S.shape[0] != A.shape[0]:
        raise ConfigurationError(f"TCAM has {S.shape[0]} rows but attention has {A.shape[0]}")
    return S[:, :-1] * A[:, None]


class ModalityEmbedding(nn.Module):
    """Stand-in embedding: temporal conv (k=3) + ReLU, attention head conv (k=1) + sigmoid."""

    def __init__(self, in_dim: int, emb_dim: int):
        super().__init__()
        self.conv = nn.Conv1d(in_dim, emb_dim, kernel_size=3, padding=1)
        self.att = nn.Conv1d(emb_dim, 1, kernel_size=1)

    def forward(self, x):  # x: (1, D, T)
        pre = self.conv(x)
        h = torch.relu(pre)
        a = torch.sigmoid(self.att(h))[0, 0]
        return h, a, pre


class PwesNet(nn.Module):
    def __init__(self, in_dim: int, emb_dim: int = 32, num_classes: int = 2, embedding=ModalityEmbedding,
                 tcam_activation: str = "sigmoid"):
        super().__init__()
        if tcam_activation not in ("sigmoid", "softmax"):
            raise ConfigurationError(f"unknown TCAM activation {tcam_activation!r}")
        self.in_dim, self.emb_dim, self.num_classes = in_dim, emb_dim, num_classes
        self.tcam_activation = tcam_activation
        self.raw = embedding(in_dim, emb_dim)
        self.flow = embedding(in_dim, emb_dim)
        self.fuse = nn.Conv1d(2 * emb_dim, emb_dim, kernel_size=1)
        self.classifier = nn.Conv1d(emb_dim, num_classes + 1, kernel_size=1)

    def reset_parameters(self, seed: int):
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, nn.Conv1d):
                    # weight and bias share fan_in = in_channels * kernel
                    bound = 1.0 / math.sqrt(m.in_channels * m.kernel_size[0])
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.uniform_(-bound, bound, generator=gen)
        return self

    def forward(self, features_raw, features_flow) -> ScoreTensors:
        xr = torch.as_tensor(features_raw, dtype=self.classifier.weight.dtype)
        xf = torch.as_tensor(features_flow, dtype=self.classifier.weight.dtype)
        if xr.ndim != 2 or xr.shape != xf.shape or xr.shape[1] != self.in_dim:
            raise ConfigurationError(f"features {tuple(xr.shape)}/{tuple(xf.shape)} incompatible with D={self.in_dim}")
        hr, a_r, pre_r = self.raw(xr.T[None])
        hf, a_f, pre_f = self.flow(xf.T[None])
        pre_x = self.fuse(torch.cat([hr, hf], dim=1))
        x = torch.relu(pre_x)
        logits = self.classifier(x)[0].T  # (T, C+1)
        s = torch.sigmoid(logits) if self.tcam_activation == "sigmoid" else torch.softmax(logits, dim=1)
        a = 0.5 * (a_r + a_f)
        return ScoreTensors(A_r=a_r, A_f=a_f, A=a, X=x[0].T, S=s, S_hat=suppress_tcam(s, a),
                            preacts=(pre_r, pre_f, pre_x))

    def run(self, record) -> ScoreTensors:
        return self(record.features_raw, record.features_flow)


def build_model(in_dim: int, emb_dim: int, num_classes: int, seed: int, tcam_activation: str = "sigmoid") -> PwesNet:
    return PwesNet(in_dim, emb_dim, num_classes, tcam_activation=tcam_activation).reset_parameters(seed)


# -- checkpoints --------------------------------------------------------------

def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:16]


def save_checkpoint(model: PwesNet, path, config: dict, seed: int, extra: dict | None = None):
    names, blobs = [], []
    for name, p in model.state_dict().items():
        names.append({"name": name, "shape": list(p.shape)})
        blobs.append(p.detach().cpu().numpy().astype("<f4").tobytes(order="C"))
    header = {
        "model": {"in_dim": model.in_dim, "emb_dim": model.emb_dim, "num_classes": model.num_classes,
                  "tcam_activation": model.tcam_activation},
        "params": names,
        "config_hash": config_hash(config),
        "config": config,
        "seed": seed,
    }
    if extra:
        header.update(extra)
    head = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    Path(path).write_bytes(CKPT_MAGIC + struct.pack("<I", len(head)) + head + b"".join(blobs))


def load_checkpoint(path) -> tuple[PwesNet, dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    blob = path.read_bytes()
    if not blob.startswith(CKPT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint")
    (n,) = struct.unpack_from("<I", blob, len(CKPT_MAGIC))
    pos = len(CKPT_MAGIC) + 4
    header = json.loads(blob[pos:pos + n])
    pos += n
    m = header["model"]
    model = PwesNet(m["in_dim"], m["emb_dim"], m["num_classes"], tcam_activation=m.get("tcam_activation", "sigmoid"))
    state = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        pos += 4 * count
    if pos != len(blob):
        raise FormatError(f"{path}: parameter blob size mismatch")
    model.load_state_dict(state)
    return model, header

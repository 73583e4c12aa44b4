"""The assembled segmentation model: encoder + prompt-conditioned decoder,
with a name -> tensor registry for optimization and checkpointing."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import decoder as dec_mod
from . import encoder as enc_mod
from .autodiff import value_of
from .bsb import VARIANTS
from .rng import Rng


@dataclass
class ModelConfig:
    """Architecture knobs; defaults are the desk-scale configuration."""

    n_classes: int = 3
    c1: int = 32
    c2: int = 64
    c3: int = 128
    k1: int = 2          # mixing blocks in stage 1
    k2: int = 2          # mixing blocks in stage 2
    depth: int = 2       # stage-3 sequence blocks
    n_state: int = 16    # scan state size per channel
    expand: int = 2      # block inner width multiple
    conv_width: int = 4  # depthwise 1d kernel taps
    subkernel: int = 8   # tile extent at the 16x stage
    fusion_width: int = 128
    head_width: int = 32
    dropout: float = 0.1
    droppath_max: float = 0.1

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def named_arrays(obj, prefix=""):
    """Walk dataclasses/lists collecting (path, leaf) for every Parameter and
    every plain ndarray buffer (running statistics)."""
    out = []
    if isinstance(obj, ad.Parameter):
        out.append((prefix, obj))
    elif isinstance(obj, np.ndarray):
        out.append((prefix, obj))
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            out.extend(named_arrays(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.extend(named_arrays(item, f"{prefix}.{i}"))
    return out


class SegModel:
    """Owns the parameter tree and the batch-norm running state."""

    def __init__(self, config: ModelConfig, seed=0, dtype=np.float64):
        self.cfg = config
        self.dtype = dtype
        rng = Rng(seed)
        cast = lambda d: ad.Parameter(np.asarray(d, dtype=dtype))
        self.encoder = enc_mod.init_encoder(config, rng.split("encoder"), cast, dtype)
        self.decoder = dec_mod.init_decoder(config, rng.split("decoder"), cast, dtype)

    def named_parameters(self):
        return {name: leaf for name, leaf in
                named_arrays([self.encoder, self.decoder], "model")
                if isinstance(leaf, ad.Parameter)}

    def named_buffers(self):
        return {name: leaf for name, leaf in
                named_arrays([self.encoder, self.decoder], "model")
                if not isinstance(leaf, ad.Parameter)}

    def astype(self, dtype):
        """Cast parameters and buffers in place (e.g. f32 for benchmarks)."""
        self.dtype = dtype
        for p in self.named_parameters().values():
            p.data = p.data.astype(dtype)
        for name, buf in self.named_buffers().items():
            buf[...] = buf.astype(dtype)
        return self

    def forward(self, image, prompt_map=None, variant="dual_gate", use_ldf=True,
                training=False, rng: Rng | None = None):
        """Image (B,3,H,W) in [0,1] -> class logits (B,K,H,W)."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        h, w = value_of(image).shape[-2:]
        pyr, _pad = enc_mod.encode(image, self.encoder, self.cfg, variant,
                                   training, rng.split("enc") if rng else None)
        return dec_mod.predict(pyr, prompt_map, self.decoder, (h, w),
                               training=training, use_ldf=use_ldf,
                               dropout=self.cfg.dropout,
                               rng=rng.split("dec") if rng else None)

    def predict_probs(self, image, prompt_map=None, variant="dual_gate",
                      use_ldf=True):
        """Inference-mode class probabilities (B,K,H,W)."""
        with ad.no_grad():
            logits = self.forward(image, prompt_map, variant, use_ldf,
                                  training=False)
            from .tensor import softmax
            return softmax(logits, axis=1)

    def state_arrays(self):
        """Flat name -> ndarray view of everything a checkpoint must carry."""
        out = {}
        for name, leaf in named_arrays([self.encoder, self.decoder], "model"):
            out[name] = leaf.data if isinstance(leaf, ad.Parameter) else leaf
        return out

    def load_state_arrays(self, table, strict=True):
        own = self.state_arrays()
        if strict:
            unknown = set(table) - set(own)
            missing = set(own) - set(table)
            if unknown or missing:
                raise KeyError(
                    f"state mismatch: unknown={sorted(unknown)[:4]} missing={sorted(missing)[:4]}")
        for name, arr in table.items():
            if name not in own:
                continue
            if own[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {own[name].shape}")
            own[name][...] = arr
        return self

"""The segmentation network: configuration, assembly, and introspection.

The network is a five-stage encoder-decoder.  Each encoder stage halves the
spatial extent (so the input extent must be a multiple of 32); tiled
attention follows stages 1 through 4 at decreasing rates.  Every stage
output passes through a dilated depthwise pyramid: the deepest one bridges
into the decoder, the other four become gated skip connections.  Decoder
stages upsample, convolve, gate their features against the matching skip,
and fuse by concatenation; the final stage has no skip at full resolution.
A 1x1 convolution and a sigmoid produce the per-pixel foreground
probability.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .blocks import (CCB, CCBSpec, DDWPP, DDWPPSpec, ExpandingStage,
                     ExpandingStageSpec, WMHSA, WMHSASpec, cdwcc_forward,
                     clamped_dilations)
from .errors import ConfigError, ShapeError, UsageError
from .modules import Conv2d, Module
from .tensor import Tensor, no_record

__all__ = ["ModelConfig", "SegModel", "ShapeTrace", "ShapeTraceRow", "DEFAULT_BRANCHES"]

DEFAULT_BRANCHES = ((7, 16), (5, 8), (5, 4), (3, 2))
ENCODERS = ("expanding", "ccb")


def _round_to_4(value: float) -> int:
    return max(4, int(round(value / 4.0)) * 4)


@dataclass(frozen=True)
class ModelConfig:
    """Static description of the network; ``validate`` names any violated
    invariant instead of letting construction fail somewhere deep."""

    input_size: int = 224
    encoder: str = "expanding"
    stage_channels: tuple = (64, 64, 128, 256, 512)
    chunk_counts: tuple = (3, 2, 2, 4, 2)
    attention_rates: tuple = (0, 4, 4, 2, 1)
    pyramid_branches: tuple = DEFAULT_BRANCHES
    decoder_channels: tuple = (256, 128, 64, 64, 32)
    head_count: int = 4
    width_multiplier: float = 1.0
    out_channels: int = 1

    def scaled_stage_channels(self) -> tuple:
        if self.width_multiplier == 1.0:
            return tuple(self.stage_channels)
        return tuple(_round_to_4(c * self.width_multiplier) for c in self.stage_channels)

    def scaled_decoder_channels(self) -> tuple:
        if self.width_multiplier == 1.0:
            return tuple(self.decoder_channels)
        return tuple(_round_to_4(c * self.width_multiplier) for c in self.decoder_channels)

    def stage_spatial(self) -> tuple:
        return tuple(self.input_size // 2 ** (i + 1) for i in range(len(self.stage_channels)))

    def validate(self) -> None:
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.input_size < 32 or self.input_size % 32:
            raise ConfigError("input_size must be a positive multiple of 32 so all "
                              f"five stages halve cleanly, got {self.input_size}")
        n = len(self.stage_channels)
        if n != 5:
            raise ConfigError(f"exactly 5 encoder stages are supported, got {n}")
        for name, seq in (("chunk_counts", self.chunk_counts),
                          ("attention_rates", self.attention_rates),
                          ("decoder_channels", self.decoder_channels)):
            if len(seq) != n:
                raise ConfigError(f"{name} must have {n} entries, got {len(seq)}")
        if not 0.0 < self.width_multiplier <= 1.0:
            raise ConfigError(f"width_multiplier must lie in (0, 1], got {self.width_multiplier}")
        if self.out_channels < 1:
            raise ConfigError("out_channels must be positive")
        if self.head_count < 1:
            raise ConfigError("head_count must be positive")
        channels = self.scaled_stage_channels()
        spatial = self.stage_spatial()
        inputs = (3,) + channels[:-1]
        for i, (cin, chunks) in enumerate(zip(inputs, self.chunk_counts)):
            if chunks < 1 or cin % chunks:
                raise ConfigError(f"stage {i}: input channels {cin} are not divisible "
                                  f"into {chunks} chunks")
        for i, rate in enumerate(self.attention_rates):
            if rate < 0:
                raise ConfigError(f"stage {i}: attention rate must be >= 0")
            if rate:
                if spatial[i] % rate:
                    raise ConfigError(f"stage {i}: rate {rate} does not divide the "
                                      f"stage extent {spatial[i]}")
                if channels[i] % self.head_count:
                    raise ConfigError(f"stage {i}: channels {channels[i]} are not "
                                      f"divisible by head_count {self.head_count}")
        DDWPPSpec(channels=1, branches=self.pyramid_branches)
        decoder = self.scaled_decoder_channels()
        for j in range(4):
            if decoder[j] != channels[3 - j]:
                raise ConfigError(f"decoder stage {j} produces {decoder[j]} channels but "
                                  f"its gate pairs with encoder stage {3 - j} "
                                  f"({channels[3 - j]} channels); they must match")

    # -- flat string serialisation (checkpoints, config echo) --------------------

    def to_dict(self) -> dict:
        return {
            "input_size": str(self.input_size),
            "encoder": self.encoder,
            "stage_channels": ",".join(map(str, self.stage_channels)),
            "chunk_counts": ",".join(map(str, self.chunk_counts)),
            "attention_rates": ",".join(map(str, self.attention_rates)),
            "pyramid_branches": ",".join(f"{k}x{d}" for k, d in self.pyramid_branches),
            "decoder_channels": ",".join(map(str, self.decoder_channels)),
            "head_count": str(self.head_count),
            "width_multiplier": repr(self.width_multiplier),
            "out_channels": str(self.out_channels),
        }

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        def ints(key):
            return tuple(int(v) for v in values[key].split(","))
        try:
            branches = tuple(tuple(int(p) for p in item.split("x"))
                             for item in values["pyramid_branches"].split(","))
            config = cls(
                input_size=int(values["input_size"]),
                encoder=values["encoder"],
                stage_channels=ints("stage_channels"),
                chunk_counts=ints("chunk_counts"),
                attention_rates=ints("attention_rates"),
                pyramid_branches=branches,
                decoder_channels=ints("decoder_channels"),
                head_count=int(values["head_count"]),
                width_multiplier=float(values["width_multiplier"]),
                out_channels=int(values["out_channels"]),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad model configuration entry: {exc}") from exc
        config.validate()
        return config


@dataclass
class ShapeTraceRow:
    name: str
    path: str  # encoder | attention | skip | bridge | decoder | head
    input_shape: tuple  # (C, H, W)
    output_shape: tuple
    params: int
    extra: dict = field(default_factory=dict)


@dataclass
class ShapeTrace:
    rows: list
    total_params: int

    def chained_rows(self) -> list:
        """Rows on the single encoder-to-head path (skip branches excluded)."""
        return [r for r in self.rows if r.path != "skip"]

    def row(self, name: str) -> ShapeTraceRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def render(self) -> str:
        lines = [f"{'name':<12} {'path':<10} {'input':<16} {'output':<16} "
                 f"{'params':>10}  extra"]
        for r in self.rows:
            extra = " ".join(f"{k}={v}" for k, v in r.extra.items())
            lines.append(f"{r.name:<12} {r.path:<10} {str(r.input_shape):<16} "
                         f"{str(r.output_shape):<16} {r.params:>10}  {extra}")
        lines.append(f"total params: {self.total_params}")
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {
            "total_params": self.total_params,
            "rows": [
                {
                    "name": r.name,
                    "path": r.path,
                    "input_shape": list(r.input_shape),
                    "output_shape": list(r.output_shape),
                    "params": r.params,
                    "extra": {k: (list(v) if isinstance(v, tuple) else v)
                              for k, v in r.extra.items()},
                }
                for r in self.rows
            ],
        }


class _PooledCCB(Module):
    """Encoder stage for the baseline: halve spatially, then double-convolve."""

    def __init__(self, spec: CCBSpec, *, rng: np.random.Generator, dtype):
        super().__init__()
        self.block = CCB(spec, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.block.forward(T.maxpool2x2(x))


class _DecoderStage(Module):
    """Upsample, convolve, optionally gate against a skip and fuse."""

    def __init__(self, in_channels: int, out_channels: int, merge: bool, *,
                 rng: np.random.Generator, dtype):
        super().__init__()
        self.merge = merge
        self.conv_in = Conv2d(in_channels, out_channels, 3, padding=1, rng=rng, dtype=dtype)
        fuse_in = out_channels * 2 if merge else out_channels
        self.conv_out = Conv2d(fuse_in, out_channels, 3, padding=1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, skip: Optional[Tensor]) -> Tensor:
        if self.merge and skip is None:
            raise UsageError("decoder stage expects a skip tensor")
        if not self.merge and skip is not None:
            raise UsageError("final decoder stage takes no skip tensor")
        h = T.relu(self.conv_in.forward(T.nearest_upsample2x(x)))
        if self.merge:
            gated = cdwcc_forward(h, skip)
            h = T.concat([gated, skip], axis=1)
        return T.relu(self.conv_out.forward(h))


class SegModel(Module):
    """The assembled network.  ``seed`` fixes every initial parameter."""

    def __init__(self, config: ModelConfig, *, seed: int = 0, dtype=np.float32):
        super().__init__()
        config.validate()
        self.config = config
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        channels = config.scaled_stage_channels()
        spatial = config.stage_spatial()
        stage_inputs = (3,) + channels[:-1]

        self.stages = []
        for i in range(5):
            if config.encoder == "expanding":
                spec = ExpandingStageSpec(stage_inputs[i], channels[i],
                                          config.chunk_counts[i])
                self.stages.append(ExpandingStage(spec, rng=rng, dtype=dtype))
            else:
                self.stages.append(_PooledCCB(CCBSpec(stage_inputs[i], channels[i]),
                                              rng=rng, dtype=dtype))
        self.attentions = []
        for i, rate in enumerate(config.attention_rates):
            if rate:
                spec = WMHSASpec(channels=channels[i], rate=rate,
                                 tile_size=spatial[i] // rate,
                                 head_count=config.head_count)
                self.attentions.append(WMHSA(spec, rng=rng, dtype=dtype))
            else:
                self.attentions.append(None)
        self.skip_pyramids = [
            DDWPP(DDWPPSpec(channels[i], config.pyramid_branches), rng=rng, dtype=dtype)
            for i in range(4)]
        self.bridge_pyramid = DDWPP(DDWPPSpec(channels[4], config.pyramid_branches),
                                    rng=rng, dtype=dtype)
        decoder_channels = config.scaled_decoder_channels()
        decoder_inputs = (channels[4],) + decoder_channels[:-1]
        self.decoder = [
            _DecoderStage(decoder_inputs[j], decoder_channels[j], merge=j < 4,
                          rng=rng, dtype=dtype)
            for j in range(5)]
        self.head = Conv2d(decoder_channels[4], config.out_channels, 1, rng=rng,
                           dtype=dtype)

    # -- execution ---------------------------------------------------------------

    def _run(self, x: Tensor, observe: Optional[Callable] = None) -> Tensor:
        def note(name, path, tensor_in, tensor_out, params, extra=None):
            if observe is not None:
                observe(name, path, tensor_in, tensor_out, params, extra or {})

        features = []
        h = x
        for i, stage in enumerate(self.stages):
            out = stage.forward(h)
            note(f"stage{i}", "encoder", h, out, stage.param_count())
            h = out
            attention = self.attentions[i]
            if attention is not None:
                out = attention.forward(h)
                note(f"attention{i}", "attention", h, out, attention.param_count(),
                     {"rate": attention.spec.rate, "tile": attention.spec.tile_size})
                h = out
            features.append(h)

        skips = []
        for i, pyramid in enumerate(self.skip_pyramids):
            s = pyramid.forward(features[i])
            note(f"skip{i}", "skip", features[i], s, pyramid.param_count(),
                 {"dilations": clamped_dilations(pyramid.spec,
                                                 *features[i].shape[2:])})
            skips.append(s)
        d = self.bridge_pyramid.forward(features[4])
        note("bridge", "bridge", features[4], d, self.bridge_pyramid.param_count(),
             {"dilations": clamped_dilations(self.bridge_pyramid.spec,
                                             *features[4].shape[2:])})

        for j, stage in enumerate(self.decoder):
            skip = skips[3 - j] if j < 4 else None
            out = stage.forward(d, skip)
            note(f"decoder{j}", "decoder", d, out, stage.param_count(),
                 {"skip": f"skip{3 - j}"} if skip is not None else {})
            d = out
        out = T.sigmoid(self.head.forward(d))
        note("head", "head", d, out, self.head.param_count())
        return out

    def forward(self, x: Tensor) -> Tensor:
        s = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (s, s):
            raise ShapeError("model input mismatch", expected=(None, 3, s, s),
                             actual=x.shape)
        return self._run(x)

    # -- introspection -------------------------------------------------------------

    def count_params(self) -> tuple:
        """Total learnable scalars and a per-group breakdown."""
        groups = {
            "encoder": sum(s.param_count() for s in self.stages),
            "attention": sum(a.param_count() for a in self.attentions if a is not None),
            "skip_pyramids": sum(p.param_count() for p in self.skip_pyramids),
            "bridge_pyramid": self.bridge_pyramid.param_count(),
            "decoder": sum(d.param_count() for d in self.decoder),
            "head": self.head.param_count(),
        }
        return sum(groups.values()), groups

    def trace_shapes(self) -> ShapeTrace:
        """Run one zeros batch through the network and record every block's
        (C, H, W) transition, parameter count, and side inputs."""
        rows = []

        def observe(name, path, tensor_in, tensor_out, params, extra):
            rows.append(ShapeTraceRow(name=name, path=path,
                                      input_shape=tuple(tensor_in.shape[1:]),
                                      output_shape=tuple(tensor_out.shape[1:]),
                                      params=params, extra=extra))

        s = self.config.input_size
        with no_record():
            self._run(Tensor(np.zeros((1, 3, s, s), dtype=self.dtype)), observe)
        return ShapeTrace(rows=rows, total_params=self.count_params()[0])

    def first_nonfinite_layer(self, x: Tensor) -> Optional[str]:
        """Name of the first block whose output contains NaN or Inf, if any."""
        if not np.all(np.isfinite(x.data)):
            return "input"
        found = []

        def observe(name, path, tensor_in, tensor_out, params, extra):
            if not found and not np.all(np.isfinite(tensor_out.data)):
                found.append(name)

        with no_record():
            self._run(x, observe)
        return found[0] if found else None

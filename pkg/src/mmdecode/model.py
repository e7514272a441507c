"""Twin-module match-mismatch decoder.

An EEG module and a stimulus module each apply three dilated 1-D
convolutions (dilations 1, 3, 9; kernel 3; 16 filters) with ReLU between
layers. The projected 16-channel timeseries are compared channel-by-channel
through cosine similarity against both candidate stimulus segments; the two
16x16 similarity matrices are subtracted, flattened, and fed to a bias-free
linear readout whose sigmoid is the probability that the first candidate is
the matched one. The first EEG layer is a rank-1 separable convolution to
keep the 64-channel front-end small.
"""

from __future__ import annotations

import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

FEATURE_ENVELOPE = "envelope"
FEATURE_MODULATIONS = "modulations"

#: Sample rate each stimulus feature kind (and its aligned EEG) lives at.
FEATURE_RATES = {FEATURE_ENVELOPE: 64.0, FEATURE_MODULATIONS: 512.0}

_CHECKPOINT_MAGIC = b"MMD1"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DecoderConfig:
    feature_kind: str = FEATURE_ENVELOPE
    eeg_channels: int = 64
    hidden_channels: int = 16
    kernel_size: int = 3
    dilations: tuple[int, ...] = (1, 3, 9)
    segment_seconds: float = 3.0

    def __post_init__(self):
        if self.feature_kind not in FEATURE_RATES:
            raise ValueError(f"unknown feature kind {self.feature_kind!r}")
        if self.segment_samples <= self.receptive_field_samples:
            raise ValueError("segment must be longer than the receptive field")

    @property
    def rate(self) -> float:
        return FEATURE_RATES[self.feature_kind]

    @property
    def segment_samples(self) -> int:
        return int(round(self.segment_seconds * self.rate))

    @property
    def receptive_field_samples(self) -> int:
        return 1 + (self.kernel_size - 1) * sum(self.dilations)

    def layer_specs(self, stimulus: bool) -> list[ad.ConvLayerSpec]:
        in_ch = 1 if stimulus else self.eeg_channels
        specs = []
        for i, d in enumerate(self.dilations):
            specs.append(ad.ConvLayerSpec(
                in_channels=in_ch if i == 0 else self.hidden_channels,
                out_channels=self.hidden_channels,
                kernel_size=self.kernel_size,
                dilation=d,
                separable=(i == 0 and not stimulus),
            ))
        return specs

    def to_dict(self) -> dict:
        return {
            "feature_kind": self.feature_kind,
            "eeg_channels": self.eeg_channels,
            "hidden_channels": self.hidden_channels,
            "kernel_size": self.kernel_size,
            "dilations": list(self.dilations),
            "segment_seconds": self.segment_seconds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        return cls(
            feature_kind=d["feature_kind"],
            eeg_channels=int(d["eeg_channels"]),
            hidden_channels=int(d["hidden_channels"]),
            kernel_size=int(d["kernel_size"]),
            dilations=tuple(int(x) for x in d["dilations"]),
            segment_seconds=float(d["segment_seconds"]),
        )


def receptive_field(config: DecoderConfig) -> tuple[int, float]:
    """Receptive-field width of either convolutional module, in (samples, seconds)."""
    samples = config.receptive_field_samples
    return samples, samples / config.rate


def param_shapes(config: DecoderConfig) -> dict[str, tuple[int, ...]]:
    """Named learnable arrays, in checkpoint order."""
    h, c, k = config.hidden_channels, config.eeg_channels, config.kernel_size
    return {
        "eeg_spatial": (h, c),
        "eeg_temporal": (h, k),
        "eeg_b1": (h,),
        "eeg_w2": (h, h, k),
        "eeg_b2": (h,),
        "eeg_w3": (h, h, k),
        "eeg_b3": (h,),
        "stim_w1": (h, 1, k),
        "stim_b1": (h,),
        "stim_w2": (h, h, k),
        "stim_b2": (h,),
        "stim_w3": (h, h, k),
        "stim_b3": (h,),
        "readout": (h * h,),
    }


@dataclass
class DecoderParams:
    """All learnable arrays of one decoder instance."""

    config: DecoderConfig
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        expected = param_shapes(self.config)
        if set(self.arrays) != set(expected):
            missing = set(expected) - set(self.arrays)
            extra = set(self.arrays) - set(expected)
            raise ValueError(f"bad parameter set: missing {sorted(missing)}, extra {sorted(extra)}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {self.arrays[name].shape}, expected {shape}")

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "DecoderParams":
        return DecoderParams(self.config, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def as_tensors(self, requires_grad: bool = False) -> dict[str, ad.Tensor]:
        return {k: ad.Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}

    @property
    def n_parameters(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def allclose(self, other: "DecoderParams", **kw) -> bool:
        return all(np.allclose(self.arrays[k], other.arrays[k], **kw) for k in self.arrays)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int, dtype) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


def init_glorot(config: DecoderConfig, seed: int, dtype=np.float32) -> DecoderParams:
    """Glorot-uniform weights, zero biases; deterministic in the seed."""
    rng = np.random.default_rng(seed)
    h, c, k = config.hidden_channels, config.eeg_channels, config.kernel_size
    arrays: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(("b1", "b2", "b3")):
            arrays[name] = np.zeros(shape, dtype=dtype)
        elif name == "eeg_spatial":
            arrays[name] = _glorot(rng, shape, c, h, dtype)
        elif name == "eeg_temporal":
            arrays[name] = _glorot(rng, shape, k, h * k, dtype)
        elif name == "readout":
            arrays[name] = _glorot(rng, shape, h * h, 1, dtype)
        else:  # dense conv (out, in, k)
            o, i, kk = shape
            arrays[name] = _glorot(rng, shape, i * kk, o * kk, dtype)
    return DecoderParams(config, arrays)


@dataclass
class ModelOutput:
    probability: np.ndarray
    logit: np.ndarray
    sim_first: np.ndarray
    sim_second: np.ndarray


def _project_eeg(t: dict[str, ad.Tensor], specs, x: ad.Tensor) -> ad.Tensor:
    y = ad.separable_conv1d(x, specs[0], t["eeg_spatial"], t["eeg_temporal"], t["eeg_b1"])
    y = ad.relu(y)
    y = ad.conv1d_dilated(y, specs[1], t["eeg_w2"], t["eeg_b2"])
    y = ad.relu(y)
    return ad.conv1d_dilated(y, specs[2], t["eeg_w3"], t["eeg_b3"])


def _project_stim(t: dict[str, ad.Tensor], specs, x: ad.Tensor) -> ad.Tensor:
    y = ad.conv1d_dilated(x, specs[0], t["stim_w1"], t["stim_b1"])
    y = ad.relu(y)
    y = ad.conv1d_dilated(y, specs[1], t["stim_w2"], t["stim_b2"])
    y = ad.relu(y)
    return ad.conv1d_dilated(y, specs[2], t["stim_w3"], t["stim_b3"])


def forward_graph(config: DecoderConfig, tensors: dict[str, ad.Tensor],
                  eeg: ad.Tensor, stim_first: ad.Tensor, stim_second: ad.Tensor):
    """Differentiable forward pass; returns (y_hat, logit, sim_first, sim_second) tensors."""
    e = _project_eeg(tensors, config.layer_specs(stimulus=False), eeg)
    a = _project_stim(tensors, config.layer_specs(stimulus=True), stim_first)
    b = _project_stim(tensors, config.layer_specs(stimulus=True), stim_second)
    s1 = ad.cosine_similarity_matrix(e, a)
    s2 = ad.cosine_similarity_matrix(e, b)
    diff = ad.sub(s1, s2)
    h2 = config.hidden_channels * config.hidden_channels
    flat = ad.reshape(diff, (-1, h2) if diff.data.ndim == 3 else (h2,))
    logit = ad.linear_readout(flat, tensors["readout"])
    return ad.sigmoid(logit), logit, s1, s2


def forward(params: DecoderParams, eeg, stim_first, stim_second) -> ModelOutput:
    """Inference pass on numpy arrays: eeg (..64 x T), stimulus segments (..1 x T)."""
    eeg = np.asarray(eeg)
    a = np.asarray(stim_first)
    b = np.asarray(stim_second)
    if eeg.shape[-1] != a.shape[-1] or a.shape != b.shape:
        raise ValueError(
            f"segment lengths must match: eeg T={eeg.shape[-1]}, "
            f"stimuli T={a.shape[-1]}/{b.shape[-1]}")
    tensors = params.as_tensors(requires_grad=False)
    y, logit, s1, s2 = forward_graph(params.config, tensors,
                                     ad.Tensor(eeg), ad.Tensor(a), ad.Tensor(b))
    return ModelOutput(probability=y.data, logit=logit.data,
                       sim_first=s1.data, sim_second=s2.data)


def save_checkpoint(params: DecoderParams, path) -> None:
    """Versioned binary container: magic, JSON header, float32 LE payloads."""
    names = list(param_shapes(params.config))
    header = {
        "version": _CHECKPOINT_VERSION,
        "feature_kind": params.config.feature_kind,
        "config": params.config.to_dict(),
        "arrays": [{"name": n, "shape": list(params.arrays[n].shape)} for n in names],
    }
    buf = io.BytesIO()
    buf.write(_CHECKPOINT_MAGIC)
    buf.write(b"\n")
    buf.write(json.dumps(header, sort_keys=True).encode("utf-8"))
    buf.write(b"\n")
    for n in names:
        buf.write(np.ascontiguousarray(params.arrays[n], dtype="<f4").tobytes())
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path) -> DecoderParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a decoder checkpoint (bad magic)")
    try:
        header_end = blob.index(b"\n", 5)
        header = json.loads(blob[5:header_end].decode("utf-8"))
    except (ValueError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: corrupt checkpoint header") from exc
    if header.get("version") != _CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
    config = DecoderConfig.from_dict(header["config"])
    if header["feature_kind"] != config.feature_kind:
        raise ValueError(f"{path}: feature kind mismatch in header")

    expected = param_shapes(config)
    arrays: dict[str, np.ndarray] = {}
    offset = header_end + 1
    for desc in header["arrays"]:
        name, shape = desc["name"], tuple(desc["shape"])
        if name not in expected or shape != expected[name]:
            raise ValueError(f"{path}: array {name} with shape {shape} does not fit the config")
        nbytes = int(np.prod(shape)) * 4
        chunk = blob[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(
                f"{path}: truncated payload for {name}: expected {nbytes} bytes, "
                f"found {len(chunk)}")
        arrays[name] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise ValueError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    return DecoderParams(config, arrays)

"""The GF-DANN graph: two feature extractors, two individual discriminators,
one domain discriminator and the group classifier.

Reversal layers sit between each extractor and each discriminator, so a single
minimisation of a discriminator loss moves the discriminator downhill and the
extractor(s) uphill.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .errors import DimensionError, RoutingError
from .layers import BatchNorm, DepthwiseConv3x3, Linear, PointwiseConv1x1
from .tensor import Tensor, concat, flatten_cm, grad_reverse, permute, relu, softmax

__all__ = [
    "ArchConfig",
    "FeatureExtractor",
    "Discriminator",
    "GfdannModel",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"GFDANNCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Network shape. ``n_individuals_*`` are the per-group subject counts m, n."""

    input_shape: tuple[int, int, int] = (5, 13, 5)
    stage_channels: tuple[int, ...] = (16, 32, 64)
    out_channels: int = 4
    hidden: int = 64
    n_individuals_1: int = 10
    n_individuals_2: int = 9
    n_classes: int = 2
    n_domains: int = 2
    grl_lambda_1: float = 1.0
    grl_lambda_2: float = 1.0
    grl_lambda_3: float = 1.0
    bn_after_reduce: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "stage_channels", tuple(int(v) for v in self.stage_channels))
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise DimensionError(f"input_shape must be three positive ints, got {self.input_shape}")
        if not self.stage_channels or min(self.stage_channels) < 1 or self.out_channels < 1:
            raise DimensionError("channel widths must be positive")
        if min(self.n_individuals_1, self.n_individuals_2) < 1 or self.hidden < 1:
            raise DimensionError("discriminator sizes must be positive")
        for lam in (self.grl_lambda_1, self.grl_lambda_2, self.grl_lambda_3):
            if lam < 0:
                raise DimensionError(f"reversal strengths must be non-negative, got {lam}")

    @property
    def feature_length(self) -> int:
        _, k, t = self.input_shape
        return self.out_channels * k * t

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["stage_channels"] = list(self.stage_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)

    def with_counts(self, m: int, n: int) -> "ArchConfig":
        return replace(self, n_individuals_1=int(m), n_individuals_2=int(n))


class FeatureExtractor:
    """Three depthwise-separable stages (dw 3x3 -> bn -> relu -> pw 1x1 -> bn
    -> relu), a 1x1 channel reduction, then flatten to length ``d``."""

    def __init__(self, arch: ArchConfig, rng: np.random.Generator):
        self.arch = arch
        c_in = arch.input_shape[0]
        self.stages = []
        for c_out in arch.stage_channels:
            self.stages.append(
                (
                    DepthwiseConv3x3(c_in, rng),
                    BatchNorm(c_in, arch.bn_momentum, arch.bn_eps),
                    PointwiseConv1x1(c_in, c_out, rng),
                    BatchNorm(c_out, arch.bn_momentum, arch.bn_eps),
                )
            )
            c_in = c_out
        # without the trailing bn the reduction conv needs its own bias
        self.reduce = PointwiseConv1x1(c_in, arch.out_channels, rng, bias=not arch.bn_after_reduce)
        self.reduce_bn = BatchNorm(arch.out_channels, arch.bn_momentum, arch.bn_eps) if arch.bn_after_reduce else None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.shape[1:] != self.arch.input_shape:
            raise DimensionError(f"extractor expects [N, {self.arch.input_shape}], got {x.shape}")
        # channel-major [C, K, T, N] keeps the batch axis innermost
        h = permute(x, (1, 2, 3, 0))
        for dw, bn_dw, pw, bn_pw in self.stages:
            h = bn_dw.relu_cm(dw(h, True), training)
            h = bn_pw.relu_cm(pw(h, True), training)
        h = self.reduce(h, True)
        if self.reduce_bn is not None:
            h = self.reduce_bn.relu_cm(h, training)
        return flatten_cm(h)

    def layers(self) -> Iterator[tuple[str, object]]:
        for i, (dw, bn_dw, pw, bn_pw) in enumerate(self.stages):
            yield f"stage{i}.dw.", dw
            yield f"stage{i}.bn_dw.", bn_dw
            yield f"stage{i}.pw.", pw
            yield f"stage{i}.bn_pw.", bn_pw
        yield "reduce.", self.reduce
        if self.reduce_bn is not None:
            yield "reduce_bn.", self.reduce_bn

    def parameters(self) -> list[Tensor]:
        return [p for _, layer in self.layers() for p in layer.parameters()]


class Discriminator:
    """One hidden relu layer then softmax."""

    def __init__(self, in_features: int, hidden: int, n_out: int, rng: np.random.Generator):
        self.hidden = Linear(in_features, hidden, rng)
        self.out = Linear(hidden, n_out, rng)

    def __call__(self, f: Tensor) -> Tensor:
        return softmax(self.out(relu(self.hidden(f))))

    def layers(self):
        yield "hidden.", self.hidden
        yield "out.", self.out

    def parameters(self) -> list[Tensor]:
        return self.hidden.parameters() + self.out.parameters()


class Classifier:
    """Single affine map of the concatenated features followed by softmax."""

    def __init__(self, in_features: int, n_classes: int, rng: np.random.Generator):
        self.fc = Linear(in_features, n_classes, rng)

    def __call__(self, f: Tensor) -> Tensor:
        return softmax(self.fc(f))

    def layers(self):
        yield "fc.", self.fc

    def parameters(self) -> list[Tensor]:
        return self.fc.parameters()


class GfdannModel:
    """All learnable parts of GF-DANN plus the ablation switches.

    With both switches off no discriminator is constructed (BaseNet-1).
    """

    def __init__(
        self,
        arch: ArchConfig,
        seed: int = 0,
        gfe_enabled: bool = True,
        dbda_enabled: bool = True,
    ):
        self.arch = arch
        self.seed = seed
        self.gfe_enabled = gfe_enabled
        self.dbda_enabled = dbda_enabled
        d = arch.feature_length
        # independent streams keep branch initialisations unrelated
        streams = np.random.SeedSequence(seed).spawn(6)
        rngs = [np.random.default_rng(s) for s in streams]
        self.extractor1 = FeatureExtractor(arch, rngs[0])
        self.extractor2 = FeatureExtractor(arch, rngs[1])
        self.classifier = Classifier(2 * d, arch.n_classes, rngs[2])
        self.disc1: Optional[Discriminator] = None
        self.disc2: Optional[Discriminator] = None
        self.disc3: Optional[Discriminator] = None
        if gfe_enabled:
            self.disc1 = Discriminator(d, arch.hidden, arch.n_individuals_1, rngs[3])
            self.disc2 = Discriminator(d, arch.hidden, arch.n_individuals_2, rngs[4])
        if dbda_enabled:
            self.disc3 = Discriminator(2 * d, arch.hidden, arch.n_domains, rngs[5])

    # -- forward paths ------------------------------------------------------

    def extractor(self, branch: int):
        if branch == 1:
            return self.extractor1
        if branch == 2:
            return self.extractor2
        raise RoutingError(f"branch must be 1 or 2, got {branch}")

    def features(self, x, branch: int, training: bool = False) -> Tensor:
        return self.extractor(branch)(_as_input(x), training)

    def joint_features(self, x, training: bool = False) -> Tensor:
        x = _as_input(x)
        return concat([self.extractor1(x, training), self.extractor2(x, training)], axis=1)

    def classify(self, x, training: bool = False) -> Tensor:
        return self.classifier(self.joint_features(x, training))

    def discriminate_individual(
        self, x, branch: int, training: bool = False, groups: Optional[Sequence[int]] = None
    ) -> Tensor:
        """Subject-identity probabilities for samples of group ``branch``.

        Group 1 (aMCI, label 1) feeds branch 1; group 2 (HC, label 0) feeds
        branch 2. Passing ``groups`` enforces that routing.
        """
        if not self.gfe_enabled:
            raise RoutingError("individual discriminators are disabled in this model")
        if groups is not None:
            expected = 1 if branch == 1 else 0
            groups = np.asarray(groups)
            if groups.size and np.any(groups != expected):
                raise RoutingError(f"branch {branch} only accepts samples with group label {expected}")
        disc = self.disc1 if branch == 1 else self.disc2
        lam = self.arch.grl_lambda_1 if branch == 1 else self.arch.grl_lambda_2
        return disc(grad_reverse(self.features(x, branch, training), lam))

    def discriminate_domain(self, x, training: bool = False) -> Tensor:
        if not self.dbda_enabled:
            raise RoutingError("domain discriminator is disabled in this model")
        return self.disc3(grad_reverse(self.joint_features(x, training), self.arch.grl_lambda_3))

    # -- parameter groups ---------------------------------------------------

    @property
    def theta_f1(self) -> list[Tensor]:
        return self.extractor1.parameters()

    @property
    def theta_f2(self) -> list[Tensor]:
        return self.extractor2.parameters()

    @property
    def theta_c(self) -> list[Tensor]:
        return self.classifier.parameters()

    @property
    def theta_d1(self) -> list[Tensor]:
        return self.disc1.parameters() if self.disc1 is not None else []

    @property
    def theta_d2(self) -> list[Tensor]:
        return self.disc2.parameters() if self.disc2 is not None else []

    @property
    def theta_d3(self) -> list[Tensor]:
        return self.disc3.parameters() if self.disc3 is not None else []

    def parameters(self) -> list[Tensor]:
        return self.theta_f1 + self.theta_f2 + self.theta_c + self.theta_d1 + self.theta_d2 + self.theta_d3

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def modules(self) -> Iterator[tuple[str, object]]:
        yield "extractor1.", self.extractor1
        yield "extractor2.", self.extractor2
        yield "classifier.", self.classifier
        for name in ("disc1", "disc2", "disc3"):
            module = getattr(self, name)
            if module is not None:
                yield name + ".", module

    def named_arrays(self) -> Iterator[tuple[str, np.ndarray]]:
        """Every parameter and buffer, in checkpoint order."""
        for prefix, module in self.modules():
            for layer_prefix, layer in module.layers():
                for p in layer.parameters():
                    yield prefix + layer_prefix + p.name, p.data
                for key, buf in layer.state().items():
                    yield prefix + layer_prefix + key, buf

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.named_arrays()}

    # -- convenience inference ---------------------------------------------

    def predict_proba(self, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        chunks = [self.classify(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.arch.n_classes))

    def embed(self, x: np.ndarray, branch: int, batch_size: int = 512) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        chunks = [self.features(x[i : i + batch_size], branch).data for i in range(0, len(x), batch_size)]
        return np.concatenate(chunks) if chunks else np.zeros((0, self.arch.feature_length))


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- checkpoint container ----------------------------------------------------
#
# layout: magic (8 bytes) | version u32 | header length u32 | JSON header |
#         tensors as little-endian float64, row-major, in header order


def save_checkpoint(model: GfdannModel, path) -> None:
    arrays = list(model.named_arrays())
    header = {
        "arch": model.arch.to_dict(),
        "seed": model.seed,
        "gfe_enabled": model.gfe_enabled,
        "dbda_enabled": model.dbda_enabled,
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> GfdannModel:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a GF-DANN checkpoint")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    model = GfdannModel(
        ArchConfig.from_dict(header["arch"]),
        seed=header["seed"],
        gfe_enabled=header["gfe_enabled"],
        dbda_enabled=header["dbda_enabled"],
    )
    offset = 16 + hlen
    targets = dict(model.named_arrays())
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += 8 * count
        dest = targets[entry["name"]]
        if dest.shape != shape:
            raise ValueError(f"shape mismatch for {entry['name']}: {dest.shape} vs {shape}")
        dest[...] = values
    return model

"""Dual-decoder main module and tanh discriminator."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn


@dataclass
class NetworkSpec:
    input_size: tuple[int, int] = (64, 64)
    encoder_widths: tuple[int, ...] = (32, 64, 128, 256)
    transition_width: int = 512
    conv_kernel: int = 3
    pool_kernel: int = 2
    dropout_rate: float = 0.3
    disc_widths: tuple[int, ...] | None = None

    def __post_init__(self):
        self.input_size = tuple(int(s) for s in self.input_size)
        self.encoder_widths = tuple(int(w) for w in self.encoder_widths)
        if self.disc_widths is None:
            self.disc_widths = self.encoder_widths
        self.disc_widths = tuple(int(w) for w in self.disc_widths)
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.encoder_widths)

    def validate(self) -> None:
        h, w = self.input_size
        factor = self.pool_kernel ** self.depth
        if h <= 0 or w <= 0 or h % factor or w % factor:
            raise ValueError(
                f"input size {self.input_size} must be positive and divisible by {factor}"
            )
        widths = list(self.encoder_widths) + [self.transition_width]
        if any(b <= a for a, b in zip(widths, widths[1:])) or widths[0] <= 0:
            raise ValueError(f"encoder widths must be strictly increasing, got {widths}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.conv_kernel % 2 != 1:
            raise ValueError("conv_kernel must be odd")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(**d)


class ConvBN(nn.Sequential):
    """conv -> batch norm -> ReLU"""

    def __init__(self, cin: int, cout: int, k: int):
        super().__init__(
            nn.Conv2d(cin, cout, k, padding=k // 2),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=True),
        )


def double_conv(cin: int, cout: int, k: int) -> nn.Sequential:
    return nn.Sequential(ConvBN(cin, cout, k), ConvBN(cout, cout, k))


class Encoder(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        k = spec.conv_kernel
        self.blocks = nn.ModuleList()
        cin = 1
        for w in spec.encoder_widths:
            self.blocks.append(double_conv(cin, w, k))
            cin = w
        self.pool = nn.MaxPool2d(spec.pool_kernel)
        self.drop = nn.Dropout(spec.dropout_rate)
        self.transition = double_conv(cin, spec.transition_width, k)

    def forward(self, x):
        skips = []
        for block in self.blocks:
            x = block(x)
            skips.append(x)
            x = self.drop(self.pool(x))
        return self.transition(x), skips


class Decoder(nn.Module):
    """Mirror of the encoder; pools become stride-2 transposed convolutions."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        k, p = spec.conv_kernel, spec.pool_kernel
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        cin = spec.transition_width
        for w in reversed(spec.encoder_widths):
            self.ups.append(nn.ConvTranspose2d(cin, w, p, stride=p))
            self.blocks.append(double_conv(2 * w, w, k))
            cin = w
        self.head = nn.Conv2d(cin, 1, 1)

    def forward(self, x, skips):
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = block(torch.cat([up(x), skip], dim=1))
        return torch.sigmoid(self.head(x))


class MainModule(nn.Module):
    """Encoder, fence-cut decoder, wild-cut decoder and 1x1 reconstructor."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.decoder_fence = Decoder(spec)
        self.decoder_wild = Decoder(spec)
        self.reconstructor = nn.Conv2d(2, 1, 1)

    def forward(self, x):
        z, skips = self.encoder(x)
        fence = self.decoder_fence(z, skips)
        wild = self.decoder_wild(z, skips)
        recon = torch.sigmoid(self.reconstructor(torch.cat([fence, wild], dim=1)))
        return fence, wild, recon


class Discriminator(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        self.spec = spec
        k = spec.conv_kernel
        layers = []
        cin = 1
        for w in spec.disc_widths:
            layers += [double_conv(cin, w, k), nn.MaxPool2d(spec.pool_kernel)]
            cin = w
        self.features = nn.Sequential(*layers)
        h, w = spec.input_size
        f = spec.pool_kernel ** len(spec.disc_widths)
        self.dense = nn.Linear(cin * (h // f) * (w // f), 1)

    def forward(self, x):
        return torch.tanh(self.dense(self.features(x).flatten(1))).squeeze(1)


@dataclass
class MainModuleOutput:
    fence: torch.Tensor
    wild: torch.Tensor
    recon: torch.Tensor


def _seeded(seed: int):
    # build under a private RNG stream so the global torch state is untouched
    ctx = torch.random.fork_rng(devices=[])
    ctx.__enter__()
    torch.manual_seed(seed)
    return ctx


def _reinit(module: nn.Module) -> None:
    # fan-in scaled uniform, the same scheme torch uses for conv/linear by default
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            m.reset_parameters()


def encoder_level_shapes(encoder: Encoder, size: tuple[int, int]) -> list[tuple[int, int]]:
    """Spatial dims of the input to each pooling level plus the transition."""
    was_training = encoder.training
    encoder.eval()
    with torch.no_grad():
        z, skips = encoder(torch.zeros(1, 1, *size))
    encoder.train(was_training)
    return [tuple(s.shape[-2:]) for s in skips] + [tuple(z.shape[-2:])]


def _check_levels(encoder: Encoder, spec: NetworkSpec) -> None:
    h, w = spec.input_size
    got = encoder_level_shapes(encoder, spec.input_size)
    want = [(h >> k, w >> k) for k in range(spec.depth + 1)]
    if got != want:
        raise AssertionError(f"encoder level shapes {got} != {want}")


def build_main_module(spec: NetworkSpec, seed: int) -> MainModule:
    spec.validate()
    ctx = _seeded(seed)
    try:
        model = MainModule(spec)
        _reinit(model)
    finally:
        ctx.__exit__(None, None, None)
    _check_levels(model.encoder, spec)
    return model


def build_discriminator(spec: NetworkSpec, seed: int) -> Discriminator:
    spec.validate()
    ctx = _seeded(seed)
    try:
        model = Discriminator(spec)
        _reinit(model)
    finally:
        ctx.__exit__(None, None, None)
    return model


def as_batch(batch, size: tuple[int, int] | None = None) -> torch.Tensor:
    """(N, H, W) or (N, 1, H, W) array-like -> float32 (N, 1, H, W) tensor."""
    x = batch if isinstance(batch, torch.Tensor) else torch.as_tensor(batch)
    if x.ndim == 2:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ValueError(f"expected (N, H, W) or (N, 1, H, W), got {tuple(x.shape)}")
    if size is not None and tuple(x.shape[-2:]) != tuple(size):
        raise ValueError(f"batch dims {tuple(x.shape[-2:])} do not match network input {tuple(size)}")
    if not x.is_floating_point():
        x = x.float()
    return x


def forward_main(model: MainModule, batch, train_mode: bool = False) -> MainModuleOutput:
    """Run E, both decoders and the reconstructor; outputs are (N, H, W).

    ``train_mode`` toggles dropout and batch-norm statistics. Gradients are
    tracked whenever autograd is enabled by the caller.
    """
    x = as_batch(batch, model.spec.input_size).to(next(model.parameters()).dtype)
    model.train(train_mode)
    fence, wild, recon = model(x)
    return MainModuleOutput(fence[:, 0], wild[:, 0], recon[:, 0])


def forward_discriminator(model: Discriminator, batch, train_mode: bool = False) -> torch.Tensor:
    x = as_batch(batch, model.spec.input_size).to(next(model.parameters()).dtype)
    model.train(train_mode)
    return model(x)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def state_hash(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in model.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()

"""Unpaired S <-> R translation with two generators and two PatchGAN discriminators."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace
from typing import ClassVar

import numpy as np

from .engine import (
    Adam,
    Tape,
    Tensor,
    apply_activation,
    backward,
    loss_bce_logits,
    loss_l1,
    pad_reflect,
)
from .nn import Net


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, what: str = "loss"):
        super().__init__(f"non-finite {what} at step {step}")
        self.step = step


@dataclass
class CycleGanConfig:
    lambda_cyc: float = 10.0
    lr: float = 0.001
    beta1: float = 0.5
    beta2: float = 0.999
    n_res_blocks: int = 4
    base_width: int = 32
    channels: int = 3
    image_size: int = 80
    steps: int = 2000
    batch_size: int = 1
    pool_size: int = 50
    seed: int = 0

    def __post_init__(self):
        if not self.lambda_cyc > 0:
            raise ValueError("lambda_cyc must be positive")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.image_size % 8:
            raise ValueError("image_size must be a multiple of 8")


class GeneratorNet(Net):
    """Encoder (7x7 conv + two stride-2 convs), residual transformer, decoder.

    Output has the input's shape and lies in (-1, 1).
    """

    def __init__(self, channels: int = 3, base: int = 32, n_res: int = 4,
                 rng: np.random.Generator | None = None):
        super().__init__(rng if rng is not None else np.random.default_rng(0))
        self.channels, self.base, self.n_res = channels, base, n_res
        f = base
        self._conv("enc0", channels, f, 7)
        self._norm("enc0n", f)
        self._conv("enc1", f, 2 * f, 3)
        self._norm("enc1n", 2 * f)
        self._conv("enc2", 2 * f, 4 * f, 3)
        self._norm("enc2n", 4 * f)
        for i in range(n_res):
            self._conv(f"res{i}.a", 4 * f, 4 * f, 3)
            self._norm(f"res{i}.an", 4 * f)
            self._conv(f"res{i}.b", 4 * f, 4 * f, 3)
            self._norm(f"res{i}.bn", 4 * f)
        self._conv("dec0", 4 * f, 2 * f, 4, transpose=True)
        self._norm("dec0n", 2 * f)
        self._conv("dec1", 2 * f, f, 4, transpose=True)
        self._norm("dec1n", f)
        self._conv("out", f, channels, 7)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"generator expects {self.channels} channels, got {x.shape[1]}")
        h = apply_activation(self.norm("enc0n", self.conv("enc0", pad_reflect(x, 3))), "relu")
        h = apply_activation(self.norm("enc1n", self.conv("enc1", h, 2, 1)), "relu")
        h = apply_activation(self.norm("enc2n", self.conv("enc2", h, 2, 1)), "relu")
        for i in range(self.n_res):
            r = apply_activation(self.norm(f"res{i}.an", self.conv(f"res{i}.a", pad_reflect(h, 1))), "relu")
            r = self.norm(f"res{i}.bn", self.conv(f"res{i}.b", pad_reflect(r, 1)))
            h = h + r
        h = apply_activation(self.norm("dec0n", self.deconv("dec0", h)), "relu")
        h = apply_activation(self.norm("dec1n", self.deconv("dec1", h)), "relu")
        return apply_activation(self.conv("out", pad_reflect(h, 3)), "tanh")


class DiscriminatorNet(Net):
    """Three stride-2 4x4 convs then a 1x1 conv giving an (H/8, W/8) logit map."""

    def __init__(self, channels: int = 3, base: int = 32, rng: np.random.Generator | None = None):
        super().__init__(rng if rng is not None else np.random.default_rng(0))
        self.channels, self.base = channels, base
        f = base
        self._conv("c0", channels, f, 4)
        self._conv("c1", f, 2 * f, 4)
        self._norm("c1n", 2 * f)
        self._conv("c2", 2 * f, 4 * f, 4)
        self._norm("c2n", 4 * f)
        self._conv("head", 4 * f, 1, 1)

    def __call__(self, x: Tensor) -> Tensor:
        h = apply_activation(self.conv("c0", x, 2, 1), "leaky_relu", 0.2)
        h = apply_activation(self.norm("c1n", self.conv("c1", h, 2, 1)), "leaky_relu", 0.2)
        h = apply_activation(self.norm("c2n", self.conv("c2", h, 2, 1)), "leaky_relu", 0.2)
        return self.conv("head", h)


@contextlib.contextmanager
def frozen(*nets: Net):
    """Temporarily stop gradients into ``nets``' parameters."""
    flags = [(p, p.requires_grad) for n in nets for p in n.params.values()]
    for p, _ in flags:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in flags:
            p.requires_grad = flag


def generator_adv_loss(disc, fake: Tensor) -> Tensor:
    """Non-saturating generator term: BCE(D(fake), 1) averaged over the patch map."""
    return loss_bce_logits(disc(fake), 1.0)


def discriminator_loss(disc, real: Tensor, fake) -> Tensor:
    fake = Tensor(fake.data if isinstance(fake, Tensor) else fake)
    return loss_bce_logits(disc(real), 1.0) + loss_bce_logits(disc(fake), 0.0)


def adv_loss(gen, disc, real_b, a_batch) -> tuple[Tensor, Tensor]:
    """(generator loss, discriminator loss) for the A -> B direction.

    Each loss only carries gradient into its own network: the generator term
    is computed with the discriminator frozen and the discriminator term sees
    a detached fake.
    """
    real_b, a_batch = _as_t(real_b), _as_t(a_batch)
    if real_b.shape != a_batch.shape:
        raise ValueError(f"batch shapes differ: {real_b.shape} vs {a_batch.shape}")
    fake = gen(a_batch)
    with frozen(disc):
        g_loss = generator_adv_loss(disc, fake)
    d_loss = discriminator_loss(disc, real_b, fake)
    return g_loss, d_loss


def cycle_loss(g_s2r, g_r2s, s_batch, r_batch) -> Tensor:
    s_batch, r_batch = _as_t(s_batch), _as_t(r_batch)
    return loss_l1(g_r2s(g_s2r(s_batch)), s_batch) + loss_l1(g_s2r(g_r2s(r_batch)), r_batch)


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class ImagePool:
    """History of past fakes fed to the discriminator."""

    def __init__(self, size: int = 50):
        self.size = size
        self.images: list[np.ndarray] = []

    def query(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            return batch
        out = []
        for img in batch:
            if len(self.images) < self.size:
                self.images.append(img.copy())
                out.append(img)
            elif rng.random() < 0.5:
                j = int(rng.integers(self.size))
                out.append(self.images[j].copy())
                self.images[j] = img.copy()
            else:
                out.append(img)
        return np.stack(out)

    def as_array(self) -> np.ndarray | None:
        return np.stack(self.images) if self.images else None

    def load(self, arr: np.ndarray | None) -> None:
        self.images = [] if arr is None else [a.copy() for a in arr]


@dataclass
class LossReport:
    step: int
    adv_s2r: float
    adv_r2s: float
    cyc: float
    total: float
    disc_r: float = float("nan")
    disc_s: float = float("nan")

    CSV_HEADER: ClassVar[str] = "step,adv_s2r,adv_r2s,cyc,total"

    def csv_row(self) -> str:
        return ",".join([str(int(self.step))] + [repr(float(v)) for v in
                                                  (self.adv_s2r, self.adv_r2s, self.cyc, self.total)])


@dataclass
class CycleGAN:
    """Two generators, two discriminators, their optimisers and fake pools."""

    config: CycleGanConfig = field(default_factory=CycleGanConfig)

    def __post_init__(self):
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, 0xC1C1E])
        self.g_s2r = GeneratorNet(cfg.channels, cfg.base_width, cfg.n_res_blocks, rng)
        self.g_r2s = GeneratorNet(cfg.channels, cfg.base_width, cfg.n_res_blocks, rng)
        self.d_s = DiscriminatorNet(cfg.channels, cfg.base_width, rng)
        self.d_r = DiscriminatorNet(cfg.channels, cfg.base_width, rng)
        gparams = {**_prefixed(self.g_s2r, "g_s2r."), **_prefixed(self.g_r2s, "g_r2s.")}
        dparams = {**_prefixed(self.d_s, "d_s."), **_prefixed(self.d_r, "d_r.")}
        self.opt_g = Adam(gparams, cfg.lr, cfg.beta1, cfg.beta2)
        self.opt_d = Adam(dparams, cfg.lr, cfg.beta1, cfg.beta2)
        self.pool_s = ImagePool(cfg.pool_size)
        self.pool_r = ImagePool(cfg.pool_size)
        self.step = 0

    @property
    def nets(self) -> dict[str, Net]:
        return {"g_s2r.": self.g_s2r, "g_r2s.": self.g_r2s, "d_s.": self.d_s, "d_r.": self.d_r}

    def generator_objective(self, s: Tensor, r: Tensor) -> tuple:
        """(adv_s2r, adv_r2s, cyc, total, fake_r, fake_s) with the discriminators frozen;
        ``total = adv_s2r + adv_r2s + lambda * cyc`` is what the generator step minimises."""
        with frozen(self.d_s, self.d_r):
            fake_r = self.g_s2r(s)
            fake_s = self.g_r2s(r)
            adv_s2r = generator_adv_loss(self.d_r, fake_r)
            adv_r2s = generator_adv_loss(self.d_s, fake_s)
            cyc = loss_l1(self.g_r2s(fake_r), s) + loss_l1(self.g_s2r(fake_s), r)
            total = adv_s2r + adv_r2s + cyc * self.config.lambda_cyc
        return adv_s2r, adv_r2s, cyc, total, fake_r, fake_s

    def train_step(self, s_batch: np.ndarray, r_batch: np.ndarray,
                   update_discriminators: bool = True) -> LossReport:
        """One generator update on L = adv_s2r + adv_r2s + lambda * cyc, then one
        discriminator update against pooled fakes."""
        cfg = self.config
        self.step += 1
        rng = np.random.default_rng([cfg.seed, self.step, 0x9001])
        s, r = _as_t(s_batch), _as_t(r_batch)

        tape = Tape()
        with tape:
            adv_s2r, adv_r2s, cyc, total, fake_r, fake_s = self.generator_objective(s, r)
        report = LossReport(self.step, adv_s2r.item(), adv_r2s.item(), cyc.item(), total.item())
        if not np.isfinite(report.total):
            raise TrainingDiverged(self.step)
        backward(total, tape)
        tape.clear()
        self.opt_g.step()

        if update_discriminators:
            pooled_r = self.pool_r.query(fake_r.data, rng)
            pooled_s = self.pool_s.query(fake_s.data, rng)
            tape = Tape()
            with tape, frozen(self.g_s2r, self.g_r2s):
                d_r_loss = discriminator_loss(self.d_r, r, pooled_r)
                d_s_loss = discriminator_loss(self.d_s, s, pooled_s)
                d_total = d_r_loss + d_s_loss
            report.disc_r, report.disc_s = d_r_loss.item(), d_s_loss.item()
            if not np.isfinite(d_total.item()):
                raise TrainingDiverged(self.step, "discriminator loss")
            backward(d_total, tape)
            tape.clear()
            self.opt_d.step()
        return report

    def state_arrays(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, net in self.nets.items():
            out.update(net.state_arrays(prefix))
        out.update(self.opt_g.state_arrays("opt_g."))
        out.update(self.opt_d.state_arrays("opt_d."))
        for tag, pool in (("pool_s", self.pool_s), ("pool_r", self.pool_r)):
            arr = pool.as_array()
            if arr is not None:
                out[tag] = arr
        out["train.step"] = np.array(float(self.step))
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for prefix, net in self.nets.items():
            net.load_state_arrays(arrays, prefix)
        if "opt_g.step_count" in arrays:
            self.opt_g.load_state_arrays(arrays, "opt_g.")
            self.opt_d.load_state_arrays(arrays, "opt_d.")
        self.pool_s.load(arrays.get("pool_s"))
        self.pool_r.load(arrays.get("pool_r"))
        self.step = int(arrays.get("train.step", 0))


def _prefixed(net: Net, prefix: str) -> dict[str, Tensor]:
    return {prefix + k: v for k, v in net.params.items()}


def to_signed(img: np.ndarray) -> np.ndarray:
    return 2.0 * img - 1.0


def from_signed(img: np.ndarray) -> np.ndarray:
    return np.clip((img + 1.0) / 2.0, 0.0, 1.0)


def translate_array(gen: GeneratorNet, images: np.ndarray) -> np.ndarray:
    """Translate a (N, C, H, W) or (C, H, W) batch of [0, 1] images."""
    single = images.ndim == 3
    batch = images[None] if single else images
    if batch.shape[1] != gen.channels:
        raise ValueError(f"generator was trained on {gen.channels} channels, got {batch.shape[1]}")
    out = from_signed(gen(Tensor(to_signed(batch))).data)
    return out[0] if single else out


def translate(gen: GeneratorNet, image):
    """Translate a BevImage (grid metadata kept) or a raw [0, 1] array."""
    if hasattr(image, "channels") and hasattr(image, "grid"):
        return replace(image, channels=translate_array(gen, image.channels))
    return translate_array(gen, np.asarray(image, dtype=np.float64))

"""Stage trainers: deepest translators, conditional translators, inverters.

All randomness during a stage (data order, gradient-penalty interpolation
weights) is derived from ``(seed, epoch)`` and ``(seed, step, k)``, so a
checkpoint only has to record counters to resume bit-for-bit.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .losses import (
    LossWeights,
    check_finite,
    combined_stage_loss,
    conditional_cycle_loss,
    conditional_identity_loss,
    critic_loss,
    cycle_loss,
    generator_adversarial_loss,
    identity_loss,
    lsgan_loss,
)
from .networks import (
    ConditionalTranslator,
    Critic,
    DeepTranslator,
    InverterDecoder,
    PatchDiscriminator,
)

log = logging.getLogger(__name__)

EXPLOSION_LIMIT = 1e6


class TrainingError(Exception):
    pass


class StageOrderError(TrainingError):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass(frozen=True)
class StageSchedule:
    epochs: int = 400
    lr: float = 1e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 10
    critic_steps_per_gen: int = 4
    seed: int = 0

    def __post_init__(self):
        if min(self.epochs, self.batch_size, self.critic_steps_per_gen) < 1 or self.lr <= 0:
            raise TrainingError(f"invalid schedule {self}")


def inverter_schedule(**kw) -> StageSchedule:
    kw.setdefault("batch_size", 25)
    return StageSchedule(**kw)


def _seed_from(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def torch_rng(*parts: int) -> torch.Generator:
    return torch.Generator().manual_seed(_seed_from(*parts))


class UnpairedSampler:
    """Per-epoch batches of independent index draws from two domains.

    An epoch is one pass over the larger domain; the smaller one is
    reshuffled and repeated to cover it.
    """

    def __init__(self, n_a: int, n_b: Optional[int], batch_size: int, seed: int):
        if n_a < 1 or (n_b is not None and n_b < 1):
            raise TrainingError("empty domain")
        self.n_a, self.n_b, self.batch_size, self.seed = n_a, n_b, batch_size, seed

    def _cover(self, rng, n: int, length: int) -> np.ndarray:
        chunks, total = [], 0
        while total < length:
            chunks.append(rng.permutation(n))
            total += n
        return np.concatenate(chunks)[:length]

    def epoch(self, epoch: int) -> List[Tuple[np.ndarray, Optional[np.ndarray]]]:
        rng = np.random.default_rng([self.seed, epoch])
        length = max(self.n_a, self.n_b or 0)
        ia = self._cover(rng, self.n_a, length)
        ib = self._cover(rng, self.n_b, length) if self.n_b else None
        bs = self.batch_size
        return [
            (ia[s: s + bs], None if ib is None else ib[s: s + bs])
            for s in range(0, length, bs)
        ]


class MetricsLog:
    """CSV rows ``stage,step,term,value,wall_time``."""

    FIELDS = ("stage", "step", "term", "value", "wall_time")

    def __init__(self, path: Optional[str]):
        self.path = path
        if path:
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            if not os.path.exists(path):
                with open(path, "w", newline="") as fh:
                    csv.writer(fh).writerow(self.FIELDS)

    def write(self, stage: str, step: int, terms: Mapping[str, float]) -> None:
        if not self.path:
            return
        now = time.time()
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh)
            for k, v in terms.items():
                w.writerow((stage, step, k, repr(float(v)), f"{now:.3f}"))


def _adam(params, s: StageSchedule):
    return torch.optim.Adam(params, lr=s.lr, betas=(s.adam_beta1, s.adam_beta2))


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


class StageTrainer:
    """Shared loop: epochs of sampler batches, one ``cycle`` per batch."""

    stage = "stage"

    def __init__(self, schedule: StageSchedule, config_hash: str = "", metrics_path: Optional[str] = None):
        self.schedule = schedule
        self.config_hash = config_hash
        self.metrics = MetricsLog(metrics_path)
        self.epoch = 0
        self.pos = 0  # batch index inside the current epoch
        self.step = 0  # completed generator updates
        self.counters = {"critic_updates": 0, "generator_updates": 0}
        self.trace: List[Dict[str, float]] = []
        self.networks: Dict[str, nn.Module] = {}
        self.optimizers: Dict[str, torch.optim.Optimizer] = {}

    # subclasses provide sampler, cycle()

    def run(self, max_steps: Optional[int] = None, checkpoint_path: Optional[str] = None) -> List[Dict[str, float]]:
        """Train until ``schedule.epochs`` complete or ``max_steps`` more cycles ran."""
        done = 0
        while self.epoch < self.schedule.epochs:
            batches = self.sampler.epoch(self.epoch)
            while self.pos < len(batches):
                if max_steps is not None and done >= max_steps:
                    return self.trace
                terms = self.cycle(*batches[self.pos])
                self.pos += 1
                done += 1
                self._record(terms, checkpoint_path)
            self.epoch += 1
            self.pos = 0
            if checkpoint_path:
                self.save(checkpoint_path)
        return self.trace

    def _record(self, terms: Dict[str, float], checkpoint_path: Optional[str]) -> None:
        self.trace.append(terms)
        self.metrics.write(self.stage, self.step, terms)
        bad = check_finite(terms, EXPLOSION_LIMIT)
        if bad is not None:
            diag = (checkpoint_path or os.path.join(".", f"{self.stage}.ckpt")) + ".diverged"
            self.save(diag)
            raise TrainingDiverged(
                f"{self.stage}: loss term {bad!r} = {terms[bad]} at step {self.step}; "
                f"diagnostic checkpoint written to {diag}"
            )

    # --- checkpoints ----------------------------------------------------

    def state_meta(self) -> dict:
        return {
            "stage": self.stage,
            "config_hash": self.config_hash,
            "epoch": self.epoch,
            "pos": self.pos,
            "step": self.step,
            "counters": dict(self.counters),
            "schedule": asdict(self.schedule),
            "torch_rng": torch.get_rng_state(),
        }

    def save(self, path: str) -> None:
        ckpt.write_archive(
            path,
            ckpt.pack_networks(self.stage, self.networks),
            self.state_meta(),
            {k: o.state_dict() for k, o in self.optimizers.items()},
        )

    def resume(self, path: str) -> dict:
        params, meta, optim = ckpt.read_archive(path, expected_hash=self.config_hash)
        if meta.get("stage") != self.stage:
            raise ckpt.CheckpointError(f"{path} holds stage {meta.get('stage')!r}, not {self.stage!r}")
        for name, module in self.networks.items():
            ckpt.unpack_network(params, self.stage, name, module)
        for name, opt in self.optimizers.items():
            opt.load_state_dict(optim[name])
        self.epoch, self.pos, self.step = meta["epoch"], meta["pos"], meta["step"]
        self.counters = dict(meta["counters"])
        torch.set_rng_state(meta["torch_rng"])
        return meta

    def _critic_eps(self, k: int, n: int) -> torch.Tensor:
        return torch.rand(n, generator=torch_rng(self.schedule.seed, self.step, k))


class DeepestTrainer(StageTrainer):
    """WGAN-GP + cycle + identity on normalized level-5 features of two domains."""

    def __init__(
        self,
        a5: torch.Tensor,
        b5: torch.Tensor,
        schedule: StageSchedule = StageSchedule(),
        weights: LossWeights = LossWeights(),
        gn_groups: int = 32,
        critic_max_width: int = 512,
        config_hash: str = "",
        metrics_path: Optional[str] = None,
    ):
        super().__init__(schedule, config_hash, metrics_path)
        self.stage = "deepest"
        self.a, self.b = a5, b5
        self.weights = weights
        c, s = a5.shape[1], a5.shape[2]
        torch.manual_seed(schedule.seed)
        self.G_A = DeepTranslator(c, s, gn_groups)  # B -> A
        self.G_B = DeepTranslator(c, s, gn_groups)  # A -> B
        self.D_A = Critic(c, s, critic_max_width)
        self.D_B = Critic(c, s, critic_max_width)
        self.networks = {"G_A": self.G_A, "G_B": self.G_B, "D_A": self.D_A, "D_B": self.D_B}
        self.optimizers = {
            "gen": _adam(list(self.G_A.parameters()) + list(self.G_B.parameters()), schedule),
            "critic": _adam(list(self.D_A.parameters()) + list(self.D_B.parameters()), schedule),
        }
        self.sampler = UnpairedSampler(len(a5), len(b5), schedule.batch_size, schedule.seed)

    def cycle(self, ia, ib) -> Dict[str, float]:
        a, b = self.a[ia], self.b[ib]
        w = self.weights
        with torch.no_grad():
            fake_b, fake_a = self.G_B(a), self.G_A(b)
        opt_d = self.optimizers["critic"]
        for k in range(self.schedule.critic_steps_per_gen):
            eps = self._critic_eps(k, 2 * len(a))
            loss_b, gp_b = critic_loss(self.D_B, fake_b, b, w.lambda_gp, eps[: len(a)])
            loss_a, gp_a = critic_loss(self.D_A, fake_a, a, w.lambda_gp, eps[len(a):])
            opt_d.zero_grad(set_to_none=True)
            (loss_a + loss_b).backward()
            opt_d.step()
            self.counters["critic_updates"] += 1

        fake_b, fake_a = self.G_B(a), self.G_A(b)
        parts = {
            "adv_ab": generator_adversarial_loss(self.D_B, fake_b),
            "adv_ba": generator_adversarial_loss(self.D_A, fake_a),
            "cyc": cycle_loss(a, self.G_A(fake_b)) + cycle_loss(b, self.G_B(fake_a)),
            "idty": identity_loss(a, self.G_A(a)) + identity_loss(b, self.G_B(b)),
        }
        total, _ = combined_stage_loss(parts, w)
        opt_g = self.optimizers["gen"]
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()
        self.counters["generator_updates"] += 1
        self.step += 1
        return {
            "critic_a": loss_a.item(), "critic_b": loss_b.item(),
            "gp_a": gp_a.item(), "gp_b": gp_b.item(),
            "adv_ab": parts["adv_ab"].item(), "adv_ba": parts["adv_ba"].item(),
            "cyc": parts["cyc"].item(), "idty": parts["idty"].item(), "total": total.item(),
        }


def cascade(features: Mapping[int, torch.Tensor], stack: Mapping[int, nn.Module], stop_level: int,
            batch_size: int = 32) -> torch.Tensor:
    """Run level-5 then conditional translators down to ``stop_level``.

    ``features`` maps level -> normalized source features (N, C, S, S);
    ``stack`` maps level -> translator toward the target domain.
    """
    n = features[5].shape[0]
    outs = []
    with torch.no_grad():
        for s in range(0, n, batch_size):
            x = stack[5](features[5][s: s + batch_size])
            for lvl in range(4, stop_level - 1, -1):
                x = stack[lvl](features[lvl][s: s + batch_size], x)
            outs.append(x)
    return torch.cat(outs)


def check_stack(stack: Mapping[int, nn.Module], level: int) -> None:
    missing = [l for l in range(level + 1, 6) if l not in stack]
    if missing:
        raise StageOrderError(
            f"training level {level} needs trained translators for levels {list(range(level + 1, 6))}; "
            f"missing {missing}"
        )


class ConditionalTrainer(StageTrainer):
    """Level-i translators with the deeper stack frozen.

    ``feats_a``/``feats_b`` map level -> normalized features for levels i..5;
    ``stack_a``/``stack_b`` map deeper levels -> trained translators into A/B.
    """

    def __init__(
        self,
        level: int,
        feats_a: Mapping[int, torch.Tensor],
        feats_b: Mapping[int, torch.Tensor],
        stack_a: Mapping[int, nn.Module],
        stack_b: Mapping[int, nn.Module],
        schedule: StageSchedule = StageSchedule(),
        weights: LossWeights = LossWeights(),
        controller_width: Optional[int] = None,
        controller_hidden: int = 1000,
        critic_max_width: int = 512,
        config_hash: str = "",
        metrics_path: Optional[str] = None,
    ):
        super().__init__(schedule, config_hash, metrics_path)
        if not 1 <= level <= 4:
            raise StageOrderError(f"conditional level must be in 1..4, got {level}")
        check_stack(stack_a, level)
        check_stack(stack_b, level)
        self.level = level
        self.stage = f"conditional{level}"
        for m in list(stack_a.values()) + list(stack_b.values()):
            freeze(m)
        self.a_i, self.a_next = feats_a[level], feats_a[level + 1]
        self.b_i, self.b_next = feats_b[level], feats_b[level + 1]
        # cascade outputs are fixed while this level trains
        self.b_next_t = cascade(feats_a, stack_b, level + 1)
        self.a_next_t = cascade(feats_b, stack_a, level + 1)
        self.weights = weights
        content = tuple(self.a_next.shape[1:])
        style = tuple(self.a_i.shape[1:])
        width = controller_width or feats_a[5].shape[1]
        torch.manual_seed(schedule.seed)
        self.G_A = ConditionalTranslator(content, style, width, controller_hidden)
        self.G_B = ConditionalTranslator(content, style, width, controller_hidden)
        self.D_A = Critic(style[0], style[1], critic_max_width)
        self.D_B = Critic(style[0], style[1], critic_max_width)
        self.networks = {"G_A": self.G_A, "G_B": self.G_B, "D_A": self.D_A, "D_B": self.D_B}
        self.optimizers = {
            "gen": _adam(list(self.G_A.parameters()) + list(self.G_B.parameters()), schedule),
            "critic": _adam(list(self.D_A.parameters()) + list(self.D_B.parameters()), schedule),
        }
        self.sampler = UnpairedSampler(len(self.a_i), len(self.b_i), schedule.batch_size, schedule.seed)

    def cycle(self, ia, ib) -> Dict[str, float]:
        a_i, a_next, bt = self.a_i[ia], self.a_next[ia], self.b_next_t[ia]
        b_i, b_next, at = self.b_i[ib], self.b_next[ib], self.a_next_t[ib]
        w = self.weights
        with torch.no_grad():
            fake_b, fake_a = self.G_B(a_i, bt), self.G_A(b_i, at)
        opt_d = self.optimizers["critic"]
        for k in range(self.schedule.critic_steps_per_gen):
            eps = self._critic_eps(k, len(a_i) + len(b_i))
            loss_b, gp_b = critic_loss(self.D_B, fake_b, b_i, w.lambda_gp, eps[: len(a_i)])
            loss_a, gp_a = critic_loss(self.D_A, fake_a, a_i, w.lambda_gp, eps[len(a_i):])
            opt_d.zero_grad(set_to_none=True)
            (loss_a + loss_b).backward()
            opt_d.step()
            self.counters["critic_updates"] += 1

        fake_b, fake_a = self.G_B(a_i, bt), self.G_A(b_i, at)
        parts = {
            "adv_ab": generator_adversarial_loss(self.D_B, fake_b),
            "adv_ba": generator_adversarial_loss(self.D_A, fake_a),
            "cyc": conditional_cycle_loss(a_i, a_next, b_i, b_next, self.G_B, self.G_A, bt, at),
            "idty": conditional_identity_loss(a_i, a_next, b_i, b_next, self.G_B, self.G_A),
        }
        total, _ = combined_stage_loss(parts, w)
        opt_g = self.optimizers["gen"]
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()
        self.counters["generator_updates"] += 1
        self.step += 1
        return {
            "critic_a": loss_a.item(), "critic_b": loss_b.item(),
            "gp_a": gp_a.item(), "gp_b": gp_b.item(),
            "adv_ab": parts["adv_ab"].item(), "adv_ba": parts["adv_ba"].item(),
            "cyc": parts["cyc"].item(), "idty": parts["idty"].item(), "total": total.item(),
        }


class InverterTrainer(StageTrainer):
    """Decoder from one domain's level features back to its images (L1 + LSGAN)."""

    def __init__(
        self,
        domain: str,
        level: int,
        features: torch.Tensor,
        images: torch.Tensor,
        schedule: StageSchedule = inverter_schedule(),
        l1_weight: float = 100.0,
        adv_weight: float = 1.0,
        disc_base_width: int = 64,
        config_hash: str = "",
        metrics_path: Optional[str] = None,
    ):
        super().__init__(schedule, config_hash, metrics_path)
        if len(features) != len(images):
            raise TrainingError("features and images differ in count")
        self.stage = f"inverter_{domain}_L{level}"
        self.features, self.images = features, images
        self.l1_weight, self.adv_weight = l1_weight, adv_weight
        c, s = features.shape[1], features.shape[2]
        torch.manual_seed(schedule.seed)
        self.decoder = InverterDecoder(c, s, images.shape[-1])
        self.discriminator = PatchDiscriminator(disc_base_width)
        self.networks = {"decoder": self.decoder, "discriminator": self.discriminator}
        self.optimizers = {
            "gen": _adam(self.decoder.parameters(), schedule),
            "critic": _adam(self.discriminator.parameters(), schedule),
        }
        self.sampler = UnpairedSampler(len(features), None, schedule.batch_size, schedule.seed)

    def cycle(self, idx, _unused=None) -> Dict[str, float]:
        feats, target = self.features[idx], self.images[idx]
        fake = self.decoder(feats)
        opt_d = self.optimizers["critic"]
        d_loss = lsgan_loss(self.discriminator(target), self.discriminator(fake.detach()), "discriminator")
        opt_d.zero_grad(set_to_none=True)
        d_loss.backward()
        opt_d.step()
        self.counters["critic_updates"] += 1

        rec = (fake - target).abs().mean()
        adv = lsgan_loss(None, self.discriminator(fake), "generator")
        total = self.l1_weight * rec + self.adv_weight * adv
        opt_g = self.optimizers["gen"]
        opt_g.zero_grad(set_to_none=True)
        total.backward()
        opt_g.step()
        self.counters["generator_updates"] += 1
        self.step += 1
        return {"disc": d_loss.item(), "rec_l1": rec.item(), "adv": adv.item(), "total": total.item()}


def train_deepest(a5, b5, schedule=StageSchedule(), weights=LossWeights(), checkpoint_path=None, **kw):
    trainer = DeepestTrainer(a5, b5, schedule, weights, **kw)
    trainer.run(checkpoint_path=checkpoint_path)
    return trainer


def train_conditional(level, feats_a, feats_b, stack_a, stack_b, schedule=StageSchedule(),
                      weights=LossWeights(), checkpoint_path=None, **kw):
    trainer = ConditionalTrainer(level, feats_a, feats_b, stack_a, stack_b, schedule, weights, **kw)
    trainer.run(checkpoint_path=checkpoint_path)
    return trainer


def train_inverter(domain, level, features, images, schedule=inverter_schedule(), checkpoint_path=None, **kw):
    trainer = InverterTrainer(domain, level, features, images, schedule, **kw)
    trainer.run(checkpoint_path=checkpoint_path)
    return trainer

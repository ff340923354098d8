import csv

import pytest
import torch

from deepxlate.checkpoint import ConfigMismatch, IntegrityError
from deepxlate.networks import ConditionalTranslator, DeepTranslator
from deepxlate.training import (
    ConditionalTrainer,
    DeepestTrainer,
    InverterTrainer,
    StageOrderError,
    StageSchedule,
    TrainingDiverged,
    TrainingError,
    UnpairedSampler,
    inverter_schedule,
)

SMALL = dict(gn_groups=32, critic_max_width=32)


def random_feats(n, shape, seed):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, *shape, generator=g) * 2 - 1


def deepest(seed=0, epochs=100, batch=2, **kw):
    a = random_feats(8, (64, 4, 4), 1)
    b = random_feats(6, (64, 4, 4), 2)
    return DeepestTrainer(a, b, StageSchedule(epochs=epochs, batch_size=batch, seed=seed), **SMALL, **kw)


def snapshot(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def test_schedule_ratio():
    tr = deepest()
    tr.run(max_steps=5)
    assert tr.counters == {"critic_updates": 20, "generator_updates": 5}
    assert tr.step == 5 and len(tr.trace) == 5


def test_sampler_covers_larger_domain():
    s = UnpairedSampler(10, 4, 3, seed=0)
    batches = s.epoch(0)
    ia = [int(i) for a, _ in batches for i in a]
    ib = [int(i) for _, b in batches for i in b]
    assert sorted(ia) == list(range(10))
    assert len(ib) == 10 and set(ib) == set(range(4))
    assert [len(a) for a, _ in batches] == [3, 3, 3, 1]
    again = UnpairedSampler(10, 4, 3, seed=0).epoch(0)
    assert all((x == y).all() for (x, _), (y, _) in zip(batches, again))
    assert not all((x == y).all() for (x, _), (y, _) in zip(batches, s.epoch(1)))


def test_first_twenty_losses_reproduce_bitwise():
    runs = []
    for _ in range(2):
        tr = deepest(seed=3)
        tr.run(max_steps=20)
        runs.append(tr.trace)
    assert len(runs[0]) == 20
    assert runs[0] == runs[1]
    other = deepest(seed=4)
    other.run(max_steps=20)
    assert other.trace != runs[0]


def test_resume_continues_exactly(tmp_path):
    path = str(tmp_path / "deepest.ckpt")
    full = deepest()
    full.run(max_steps=7)

    part = deepest()
    part.run(max_steps=5)
    part.save(path)
    resumed = deepest()
    resumed.resume(path)
    assert (resumed.epoch, resumed.pos, resumed.step) == (part.epoch, part.pos, part.step)
    resumed.run(max_steps=2)
    assert resumed.trace == full.trace[5:7]
    for k, v in full.G_B.state_dict().items():
        assert torch.equal(v, resumed.G_B.state_dict()[k])


def test_resume_refuses_other_config(tmp_path):
    path = str(tmp_path / "deepest.ckpt")
    tr = deepest(config_hash="aaa")
    tr.run(max_steps=1)
    tr.save(path)
    with pytest.raises(ConfigMismatch, match="aaa"):
        deepest(config_hash="bbb").resume(path)


def test_corrupted_checkpoint_rejected(tmp_path):
    path = tmp_path / "deepest.ckpt"
    tr = deepest()
    tr.run(max_steps=1)
    tr.save(str(path))
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError):
        deepest().resume(str(path))
    path.write_bytes(bytes(blob[:100]))
    with pytest.raises(IntegrityError):
        deepest().resume(str(path))


def test_checkpoint_at_epoch_end(tmp_path):
    path = tmp_path / "deepest.ckpt"
    tr = deepest(epochs=1, batch=4)
    tr.run(checkpoint_path=str(path))
    assert path.exists() and tr.epoch == 1 and tr.step == 2


def small_stack(level, seed):
    torch.manual_seed(seed)
    stack = {5: DeepTranslator(64, 4, 32)}
    if level <= 3:
        stack[4] = ConditionalTranslator((64, 4, 4), (64, 8, 8), 16, 32)
    return stack


def pyramid(n, seed):
    return {5: random_feats(n, (64, 4, 4), seed), 4: random_feats(n, (64, 8, 8), seed + 1),
            3: random_feats(n, (32, 16, 16), seed + 2)}


@pytest.mark.parametrize("level", [4, 3])
def test_deeper_levels_bitwise_frozen(level):
    stack_a, stack_b = small_stack(level, 0), small_stack(level, 1)
    before = {(d, l): snapshot(m) for d, s in (("A", stack_a), ("B", stack_b)) for l, m in s.items()}
    tr = ConditionalTrainer(level, pyramid(4, 10), pyramid(4, 20), stack_a, stack_b,
                            StageSchedule(epochs=10, batch_size=2), controller_width=16,
                            controller_hidden=32, critic_max_width=32)
    g_before = snapshot(tr.G_B)
    tr.run(max_steps=3)
    for (d, l), state in before.items():
        stack = stack_a if d == "A" else stack_b
        for k, v in stack[l].state_dict().items():
            assert torch.equal(v, state[k]), f"{d} level {l} {k} changed"
    assert any(not torch.equal(v, g_before[k]) for k, v in tr.G_B.state_dict().items())
    assert tr.counters["critic_updates"] == 4 * tr.counters["generator_updates"] == 12


def test_stage_order_enforced():
    with pytest.raises(StageOrderError, match=r"missing \[4\]"):
        ConditionalTrainer(3, pyramid(2, 0), pyramid(2, 1), small_stack(4, 0), small_stack(4, 1))
    with pytest.raises(StageOrderError):
        ConditionalTrainer(5, pyramid(2, 0), pyramid(2, 1), {}, {})


def test_inverter_defaults_and_trace():
    assert inverter_schedule().batch_size == 25
    assert StageSchedule().batch_size == 10
    feats = random_feats(6, (32, 16, 16), 0)
    imgs = random_feats(6, (3, 64, 64), 1)
    tr = InverterTrainer("B", 3, feats, imgs, inverter_schedule(epochs=5, batch_size=3), disc_base_width=8)
    assert tr.stage == "inverter_B_L3"
    tr.run(max_steps=2)
    assert set(tr.trace[0]) == {"disc", "rec_l1", "adv", "total"}
    assert tr.trace[0]["total"] == pytest.approx(100 * tr.trace[0]["rec_l1"] + tr.trace[0]["adv"], rel=1e-5)
    with pytest.raises(TrainingError):
        InverterTrainer("B", 3, feats, imgs[:5])


def test_metrics_csv(tmp_path):
    path = tmp_path / "logs" / "metrics.csv"
    tr = deepest(metrics_path=str(path))
    tr.run(max_steps=2)
    rows = list(csv.DictReader(path.open()))
    assert {r["stage"] for r in rows} == {"deepest"}
    assert {r["step"] for r in rows} == {"1", "2"}  # completed generator steps
    terms = {r["term"] for r in rows}
    assert {"cyc", "idty", "gp_a", "critic_b", "total"} <= terms


def test_explosion_stops_with_diagnostic_checkpoint(tmp_path):
    tr = deepest()
    tr.a = tr.a * 1e9  # inputs far outside the normalized range blow the losses up
    path = tmp_path / "deepest.ckpt"
    with pytest.raises(TrainingDiverged, match="diverged"):
        tr.run(max_steps=3, checkpoint_path=str(path))
    assert (tmp_path / "deepest.ckpt.diverged").exists()

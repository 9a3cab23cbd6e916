import copy
import csv

import pytest
import torch

from sagan import geometry as geo
from sagan import losses as L
from sagan.data import SyntheticDomainSpec, make_batch, synth_pair
from sagan.gradcheck import directional_rel_error, tiny_models
from sagan.networks import ModelConfig, SpatialCode
from sagan.training import (
    Counters,
    NumericalAbort,
    Optimizers,
    TrainConfig,
    Trainer,
    adapt,
    adapt_with_params,
    critic_losses,
    forward_cycle_x,
    generator_losses,
    load_checkpoint,
    models_from_checkpoint,
    read_metrics,
    train,
    train_step,
)

SIZE = (16, 16)
SMALL_MODEL = dict(size=SIZE, loc_width=4, loc_hidden=16, gen_width=4, gen_res_kernel=1, critic_width=4,
                   dt_hidden=16, siam_width=4, emb_dim=8)


@pytest.fixture(scope="module")
def pair():
    return synth_pair(SyntheticDomainSpec(seed=0, n_identities=4, n_views=4, size=SIZE))


def small_cfg(**kw):
    return TrainConfig(**{"steps": 6, "batch_size": 4, "critic_steps_per_gen": 2, "model": ModelConfig(**SMALL_MODEL),
                          **kw})


class IdentityGenerator(torch.nn.Module):
    def forward(self, values, mask):
        return values


def _set_translation(stm, du_px, dv_px, size):
    """Force an STM's prediction to an integer pixel translation, whatever the input."""
    h, w = size
    t = geo.translation(du_px * 2 / (w - 1), dv_px * 2 / (h - 1), kind=stm.kind)
    loc = stm.loc
    ident, bound = loc.identity.to(t.params.dtype), loc.bound.to(t.params.dtype)
    with torch.no_grad():
        loc.head.weight.zero_()
        loc.head.bias.copy_(ident + bound * torch.atanh((t.params - ident) / bound))
    return t


def test_step_zero_cycle_is_exact(pair):
    torch.manual_seed(0)
    cfg = small_cfg()
    from sagan.networks import SAGAN

    models = SAGAN(cfg.model)
    bx = pair.x.index(slice(0, 4))
    code = SpatialCode.sample(4, cfg.model.code_dim, seed=0)
    art = forward_cycle_x(models, bx, code)
    assert torch.equal(art.x_s, bx.values)
    assert L.scl(art.t_xy, art.t_yx).item() == 0.0
    assert torch.equal(art.t_xy.params, geo.identity_params("homography").float().expand(4, -1))


def test_integer_shift_round_trip_has_zero_pcl(pair):
    models = tiny_models(0, SIZE).double()
    models.g1, models.g2 = IdentityGenerator(), IdentityGenerator()
    t = _set_translation(models.s1, 3, -2, SIZE)
    _set_translation(models.s2, -3, 2, SIZE)
    bx = make_batch(pair.x.values[:3].double(), pair.x.mask[:3].double())
    art = forward_cycle_x(models, bx, torch.zeros(3, models.cfg.code_dim, dtype=torch.float64))
    assert torch.allclose(art.t_yx.params, geo.invert_params("homography", art.t_xy.params), atol=1e-12)
    assert L.scl(art.t_xy, art.t_yx).item() < 1e-12
    assert L.pcl(art.x_prime, bx.values, art.valid).item() == 0.0
    # interior pixels survive the round trip exactly, border pixels are outside the valid region
    assert torch.equal(art.x_prime[..., 2:-3, 3:-3], bx.values[..., 2:-3, 3:-3])
    assert art.valid.sum() < art.valid.numel()
    assert t.kind == "homography"


def test_full_cycle_gradient_matches_finite_differences():
    models = tiny_models(3)
    g = torch.Generator().manual_seed(3)
    bx = make_batch(torch.rand(2, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1,
                    torch.ones(2, 1, 8, 8, dtype=torch.float64))
    code = torch.randn(2, models.cfg.code_dim, generator=g, dtype=torch.float64)
    w = L.LossWeights()

    def loss():
        a = forward_cycle_x(models, bx, code)
        return L.cycle_loss(L.scl(a.t_xy, a.t_yx), L.pcl(a.x_prime, bx.values, a.valid), w) \
            + L.mask_identity_loss(a.x_adp, a.x_s, a.m_s)

    assert directional_rel_error(loss, models.generator_parameters(), n_dirs=4) < 1e-3


def _trainer(pair, **kw):
    return Trainer(small_cfg(**kw), pair.x, pair.y)


def test_train_step_is_deterministic(pair):
    a, b = _trainer(pair), _trainer(pair)
    ra, rb = a.one_step(), b.one_step()
    assert ra.as_dict() == rb.as_dict()
    assert ra.all_finite()


def test_counters_follow_schedule(pair):
    tr = _trainer(pair, critic_steps_per_gen=3)
    for _ in range(2):
        tr.one_step()
    assert tr.counters.gen_updates == 2 and tr.counters.critic_updates == 6


def test_ablation_reduces_to_plain_adversarial_update(pair):
    weights = L.LossWeights(lambda_cyc=0.0, lambda_idt=0.0, lambda_siam=0.0)
    cfg = small_cfg(weights=weights, use_dt=False, critic_steps_per_gen=1)
    torch.manual_seed(0)
    from sagan.networks import SAGAN

    full = SAGAN(cfg.model)
    ref = copy.deepcopy(full)
    bx, by = pair.x.index(slice(0, 4)), pair.y.index(slice(0, 4))
    before = {k: v.clone() for k, v in full.state_dict().items()}

    gen = torch.Generator().manual_seed(5)
    train_step(full, Optimizers.create(full, cfg), bx, by, cfg, gen)

    g = torch.Generator().manual_seed(5)
    opt = Optimizers.create(ref, cfg)
    cx = SpatialCode.sample(4, cfg.model.code_dim, generator=g).values
    cy = SpatialCode.sample(4, cfg.model.code_dim, generator=g).values
    total_d, _, _ = critic_losses(ref, bx, by, cx, cy, cfg, g)
    opt.critic.zero_grad()
    total_d.backward()
    opt.critic.step()
    cx = SpatialCode.sample(4, cfg.model.code_dim, generator=g).values
    cy = SpatialCode.sample(4, cfg.model.code_dim, generator=g).values
    xs, ms, _ = ref.s1(bx.values, bx.mask, cx)
    ys, mys, _ = ref.s2(by.values, by.mask, cy)
    plain = -ref.d1(ref.g1(xs, ms)).mean() - ref.d2(ref.g2(ys, mys)).mean()
    opt.gen.zero_grad()
    plain.backward()
    opt.gen.step()

    moved = 0
    for name, p in full.state_dict().items():
        delta_full = p - before[name]
        delta_ref = ref.state_dict()[name] - before[name]
        assert torch.allclose(delta_full, delta_ref, atol=1e-7), name
        moved += int(delta_full.abs().max() > 0)
    assert moved > 0


def test_mirrored_directions_are_symmetric(pair):
    cfg = small_cfg(use_dt=False)
    torch.manual_seed(1)
    from sagan.networks import SAGAN

    a = SAGAN(cfg.model)
    with torch.no_grad():
        for s in (a.s1, a.s2):
            s.loc.head.weight.normal_(0, 0.05)
    b = copy.deepcopy(a)
    b.s1, b.s2, b.g1, b.g2, b.d1, b.d2 = b.s2, b.s1, b.g2, b.g1, b.d2, b.d1
    bx, by = pair.x.index(slice(0, 4)), pair.y.index(slice(0, 4))
    cx, cy = torch.randn(4, 8), torch.randn(4, 8)
    ta, ra, _, _ = generator_losses(a, bx, by, cx, cy, cfg)
    tb, rb, _, _ = generator_losses(b, by, bx, cy, cx, cfg)
    assert torch.allclose(ta, tb, rtol=1e-6)
    for f in ("scl", "pcl", "cyc", "idt", "siam", "g_adv"):
        assert torch.allclose(getattr(ra, f), getattr(rb, f), rtol=1e-6, atol=1e-7), f


def test_frozen_spatial_ablation_keeps_identity(pair):
    tr = _trainer(pair, spatial=False)
    before = [p.clone() for p in list(tr.models.s1.parameters()) + list(tr.models.s2.parameters())]
    tr.one_step()
    tr.one_step()
    after = list(tr.models.s1.parameters()) + list(tr.models.s2.parameters())
    assert all(torch.equal(x, y) for x, y in zip(before, after))


def test_non_finite_loss_aborts_with_snapshot(pair, tmp_path):
    bad = make_batch(pair.x.values.clone(), pair.x.mask)
    bad.values[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericalAbort) as info:
        train(small_cfg(steps=2, batch_size=len(bad)), bad, pair.y, run_dir=tmp_path)
    assert info.value.snapshot is not None and info.value.snapshot.exists()


def test_adapt_matches_cycle_and_is_deterministic(pair):
    tr = _trainer(pair)
    tr.one_step()
    m = tr.models
    x = pair.x.index(slice(0, 5))
    out = adapt(m, x, 1, seed=11)
    code = SpatialCode.sample(5, m.cfg.code_dim, generator=torch.Generator().manual_seed(11))
    m.eval()
    with torch.no_grad():
        art = forward_cycle_x(m, x, code.values)
    assert torch.equal(out[0].values, art.x_adp)
    a, pa = adapt_with_params(m, x, 3, seed=4)
    b, pb = adapt_with_params(m, x, 3, seed=4)
    assert all(torch.equal(u.values, v.values) for u, v in zip(a, b))
    assert all(torch.equal(u, v) for u, v in zip(pa, pb))
    with pytest.raises(ValueError):
        adapt(m, x, 0, seed=0)


def test_learning_rate_schedule(pair):
    tr = _trainer(pair, steps=10, lr_decay_from=0.5)
    scales = []
    for _ in range(10):
        scales.append(tr.lr_scale())
        tr.one_step()
    assert scales[:5] == [1.0] * 5
    assert scales[5:] == [1.0, 0.8, 0.6, 0.4, 0.2]


def test_train_writes_artifacts_and_ledger_identity(pair, tmp_path):
    cfg = small_cfg(steps=4, checkpoint_every=2, grid_every=2, eval_every=2)
    tr = train(cfg, pair.x, pair.y, run_dir=tmp_path, eval_fn=lambda m: {"probe": 1.5})
    rows = read_metrics(tmp_path / "metrics.csv")
    assert len(rows) == 4 == len(tr.log)
    lam = cfg.weights.lambda_pcl
    for r in rows:
        assert all(torch.isfinite(torch.tensor(r[f])) for f in ("total_g", "total_d"))
        assert abs(r["cyc"] - (r["scl"] + lam * r["pcl"])) <= 1e-6 * max(1.0, abs(r["cyc"]))
    for n in (2, 4):
        assert (tmp_path / f"step_{n}_grid.png").exists()
        assert (tmp_path / f"checkpoint_{n}.pt").exists()
    from PIL import Image

    with Image.open(tmp_path / "step_4_grid.png") as im:
        # source | warped | adapted x min(M, 4) | target, four rows
        assert im.size == (SIZE[1] * (2 + 4 + 1), SIZE[0] * 4)
    state = load_checkpoint(tmp_path / "checkpoint_4.pt")
    assert state["step"] == 4 and state["config_hash"] == cfg.hash()
    for part in ("s1", "s2", "g1", "g2", "d1", "d2", "dt", "siam"):
        assert any(k.startswith(part + ".") for k in state["models"])
    models, cfg2 = models_from_checkpoint(tmp_path / "checkpoint_4.pt")
    assert cfg2.hash() == cfg.hash()


def _csv_rows(path):
    with open(path) as fh:
        return list(csv.reader(fh))


def test_resume_is_bit_exact(pair, tmp_path):
    cfg = small_cfg(steps=10, checkpoint_every=5, grid_every=100)
    train(cfg, pair.x, pair.y, run_dir=tmp_path / "full")
    train(cfg, pair.x, pair.y, run_dir=tmp_path / "part", steps=5)
    train(cfg, pair.x, pair.y, run_dir=tmp_path / "part", resume=tmp_path / "part" / "checkpoint_5.pt")
    assert _csv_rows(tmp_path / "full" / "metrics.csv") == _csv_rows(tmp_path / "part" / "metrics.csv")
    a = load_checkpoint(tmp_path / "full" / "checkpoint_10.pt")["models"]
    b = load_checkpoint(tmp_path / "part" / "checkpoint_10.pt")["models"]
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_resume_rejects_other_config(pair, tmp_path):
    cfg = small_cfg(steps=2)
    train(cfg, pair.x, pair.y, run_dir=tmp_path)
    with pytest.raises(ValueError):
        train(small_cfg(steps=2, lr_gen=1e-3), pair.x, pair.y, resume=tmp_path / "checkpoint_2.pt")


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(M=0)
    with pytest.raises(ValueError):
        TrainConfig(lipschitz="spectral")
    with pytest.raises(ValueError):
        TrainConfig(lr_gen=0)
    assert TrainConfig().hash() == TrainConfig().hash() != TrainConfig(seed=1).hash()
    assert TrainConfig(**TrainConfig().to_dict()).hash() == TrainConfig().hash()


def test_weight_clipping_mode(pair):
    tr = _trainer(pair, lipschitz="clip", clip_value=0.01)
    r = tr.one_step()
    assert r.gp == 0.0
    assert max(p.abs().max().item() for p in tr.models.critic_parameters()) <= 0.01
    assert isinstance(tr.counters, Counters)

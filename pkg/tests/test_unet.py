import pytest
import torch
from torch.func import functional_call

from clockwork import numerics as nx
from clockwork.errors import ConfigurationError
from clockwork.unet import UNetConfig, build_unet, param_count

SMALL = UNetConfig(image_size=16, channels=(16, 32, 64), num_classes=4)
CONFIGS = [
    SMALL,
    UNetConfig(image_size=16, channels=(16, 32, 64), cutoff_stage=2, num_classes=4, attention_at=(0, 2)),
    UNetConfig(image_size=16, channels=(8, 16), num_classes=0, groups=4, efficient=True),
]


def _randomize_head(model, seed=5):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.out_conv.parameters():
            p.copy_(0.1 * torch.randn(p.shape, generator=g))
    return model


@pytest.mark.parametrize("cfg", CONFIGS, ids=["cut1", "cut2-attn", "two-stage-uncond"])
def test_split_equivalence(cfg, gen):
    m = _randomize_head(build_unet(cfg, seed=0))
    with torch.no_grad():
        for _ in range(5):
            x = torch.randn(2, 3, cfg.image_size, cfg.image_size, generator=gen)
            t = int(torch.randint(0, 1000, (1,), generator=gen))
            labels = torch.randint(0, cfg.num_classes + 1, (2,), generator=gen) if cfg.num_classes else None
            out = m.predict_noise(x, t, labels)
            assert torch.equal(out.eps, m.forward_full(x, t, labels))
            t_emb, c_emb = m.embed(t, labels, 2)
            hi = m.encode_high(x, t_emb, c_emb)
            r_out = m.run_low(hi.r_in, t_emb, c_emb)
            assert torch.equal(m.decode_high(r_out, hi.skips, t_emb, c_emb), out.eps)
            assert r_out.shape == hi.r_in.shape


@pytest.mark.parametrize("cutoff,res", [(1, 16), (2, 8)])
def test_r_in_shape_law(cutoff, res):
    cfg = UNetConfig(image_size=32, channels=(16, 32, 64), cutoff_stage=cutoff, num_classes=2)
    m = build_unet(cfg, 0)
    x = torch.randn(1, 3, 32, 32)
    t_emb, c_emb = m.embed(10, None, 1)
    hi = m.encode_high(x, t_emb, c_emb)
    assert hi.r_in.shape == (1, cfg.channels[cutoff - 1], res, res)
    assert len(hi.skips) == 3 * cutoff
    assert torch.equal(hi.r_in, m.encode_high(x, t_emb, c_emb).r_in)


def test_build_is_deterministic():
    a, b, c = build_unet(SMALL, 3), build_unet(SMALL, 3), build_unet(SMALL, 4)
    assert param_count(a) == param_count(b) == param_count(c)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert any(not torch.equal(sa[k], sc[k]) for k in sa)


def test_untrained_predicts_zero():
    m = build_unet(SMALL, 0)
    x = torch.randn(3, 3, 16, 16)
    with torch.no_grad():
        assert torch.count_nonzero(m(x, 500, torch.tensor([0, 1, 4]))) == 0


def test_efficient_removes_stage0_attention():
    base = UNetConfig(image_size=16, channels=(16, 32, 64), attention_at=(0, 2), num_classes=2)
    eff = UNetConfig(image_size=16, channels=(16, 32, 64), attention_at=(0, 2), num_classes=2, efficient=True)
    mb, me = build_unet(base, 0), build_unet(eff, 0)
    assert param_count(me) < param_count(mb)
    x = torch.randn(1, 3, 16, 16)
    with torch.no_grad(), nx.count_ops() as cb:
        mb(x, 3)
    with torch.no_grad(), nx.count_ops() as ce:
        me(x, 3)
    assert cb.count(kind="attention", segment="stage0") > 0
    assert ce.count(kind="attention", segment="stage0") == 0
    assert ce.total(segment="stage0") < cb.total(segment="stage0")
    assert ce.count(kind="attention", segment="stage2") == cb.count(kind="attention", segment="stage2") > 0


@pytest.mark.parametrize("kwargs", [
    dict(channels=(32,)),
    dict(channels=(32, 32)),
    dict(channels=(16, 32), cutoff_stage=2),
    dict(channels=(16, 32), cutoff_stage=0),
    dict(channels=(12, 24), groups=8),
    dict(image_size=18, channels=(16, 32, 64)),
    dict(attention_at=(5,)),
])
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigurationError):
        UNetConfig(**kwargs)


def test_shape_errors():
    m = build_unet(SMALL, 0)
    t_emb, c_emb = m.embed(1, None, 1)
    with pytest.raises(ConfigurationError):
        m.encode_high(torch.randn(1, 3, 8, 8), t_emb, c_emb)
    with pytest.raises(ConfigurationError):
        m.run_low(torch.randn(1, 16, 4, 4), t_emb, c_emb)
    hi = m.encode_high(torch.randn(1, 3, 16, 16), t_emb, c_emb)
    with pytest.raises(ConfigurationError):
        m.decode_high(hi.r_in, hi.skips[:-1], t_emb, c_emb)
    with pytest.raises(ConfigurationError):
        m.embed(1, torch.tensor([9]), 1)


def test_config_round_trip():
    cfg = CONFIGS[1]
    assert UNetConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigurationError):
        UNetConfig.from_dict({**cfg.to_dict(), "depth": 3})


def test_gradient_through_full_model(gen):
    cfg = UNetConfig(image_size=8, channels=(8, 16), num_classes=2, groups=4)
    m = _randomize_head(build_unet(cfg, 0))
    names = [n for n, _ in m.named_parameters()]
    base = dict(m.named_parameters())
    x = torch.randn(1, 3, 8, 8, generator=gen)
    target = torch.randn(1, 3, 8, 8, generator=gen)
    probe = ["down.0.res.0.conv1.weight", "out_conv.weight"]
    assert all(p in names for p in probe)

    def f(p):
        dt = p[0].dtype
        params = {k: v.detach().to(dt) for k, v in base.items()}
        params.update({k: p[i + 1] for i, k in enumerate(probe)})
        out = functional_call(m, params, (p[0], 400, torch.tensor([1])))
        return (out * target.to(dt)).sum()

    err = nx.finite_diff_grad_check(f, [x] + [base[k].detach() for k in probe], coords_per_param=12)
    assert err < 1e-3


def test_time_sensitivity():
    m = _randomize_head(build_unet(SMALL, 0))
    x = torch.randn(1, 3, 16, 16)
    with torch.no_grad():
        assert not torch.equal(m(x, 100), m(x, 900))
        assert not torch.equal(m(x, 100, torch.tensor([1])), m(x, 100, torch.tensor([4])))

import pytest
import torch

from clockwork import numerics as nx
from clockwork.adaptor import AdaptorSpec, build_adaptor
from clockwork.clockwork import ClockworkDenoiser, RepCache, clockwork_predict_noise, generate, make_clock
from clockwork.errors import ConfigurationError, ProtocolError
from clockwork.sampler import make_grid, make_schedule, sample_loop
from clockwork.unet import UNetConfig, build_unet

CFG = UNetConfig(image_size=16, channels=(16, 32, 64), num_classes=4)


@pytest.fixture(scope="module")
def model():
    m = build_unet(CFG, 0)
    g = torch.Generator().manual_seed(9)
    with torch.no_grad():
        for p in m.out_conv.parameters():
            p.copy_(0.1 * torch.randn(p.shape, generator=g))
    return m


def _identity():
    return build_adaptor(AdaptorSpec(kind="identity", feature_channels=16, emb_dim=CFG.emb_dim), 0)


def test_periodic_two_over_eight():
    assert make_clock(2).adaptor_steps(8) == [2, 4, 6, 8]


@pytest.mark.parametrize("steps", [[5, 6, 7, 8], [3, 4, 5, 6], "{5,6,7,8}"])
def test_explicit_schedules(steps):
    c = make_clock(steps)
    expected = [5, 6, 7, 8] if steps == "{5,6,7,8}" else steps
    assert c.adaptor_steps(8) == expected


@pytest.mark.parametrize("bad", [1, [1, 2], [0, 3], "x"])
def test_step_one_must_be_full(bad):
    with pytest.raises(ConfigurationError):
        make_clock(bad)


def test_off_and_all():
    assert make_clock("off").adaptor_steps(8) == []
    assert make_clock(None).is_off
    assert make_clock("all").adaptor_steps(5) == [2, 3, 4, 5]
    assert make_clock(3).to_json() == 3 and make_clock([4, 2]).to_json() == [2, 4]


def test_schedule_accounting_exhaustive(model):
    x = torch.randn(1, 3, 16, 16)
    for T in range(1, 17):
        for N in range(2, 5):
            clock = make_clock(N)
            den = ClockworkDenoiser(model, _identity(), clock)
            expected = sum(clock(i) for i in range(1, T + 1))
            assert expected == T // N
            if T <= 8:  # run the engine on a subset to keep the test fast
                with torch.no_grad():
                    for i in range(1, T + 1):
                        den(x, 999 - 100 * i, None, i)
                assert den.adaptor_passes == expected
                assert den.full_passes + den.adaptor_passes == T


def test_identity_reuses_previous_r_out(model):
    clock = make_clock(2)
    grid = make_grid(8, 1000)
    x0, traj, report, den = generate(model, _identity(), clock, make_schedule(), grid, "ddim",
                                     torch.tensor([1]), seed=0)
    for prev, rec in zip(traj.records, traj.records[1:]):
        if rec.approximated:
            assert torch.equal(rec.r_out, prev.r_out)
        else:
            assert not torch.equal(rec.r_out, prev.r_out)
    assert den.full_passes == 4 and den.adaptor_passes == 4
    assert [r.step for r in traj.records if r.approximated] == [2, 4, 6, 8]


def test_degenerate_clock_equals_baseline(model):
    sched, grid = make_schedule(), make_grid(8, 1000)
    labels = torch.tensor([0, 3])
    x_cw, *_ = generate(model, None, make_clock("off"), sched, grid, "dpmpp2m", labels, seed=4)
    plain = lambda x, t, lab, step: model.predict_noise(x, t, lab).eps
    x_base, _ = sample_loop(plain, sched, grid, "dpmpp2m", (2, 3, 16, 16), 4, labels=labels, w=3.0,
                            null_label=CFG.null_class)
    assert torch.equal(x_cw, x_base)


def test_full_step_matches_unsplit_model(model):
    x = torch.randn(2, 3, 16, 16)
    labels = torch.tensor([1, 2])
    with torch.no_grad():
        out, cache = clockwork_predict_noise(model, None, RepCache(), make_clock(2), x, 1, 700, labels)
        assert torch.equal(out.eps, model.forward_full(x, 700, labels))
    assert cache.step == 1 and torch.equal(cache.r_out, out.r_out)


def test_adaptor_step_runs_no_low_res_ops(model):
    x = torch.randn(1, 3, 16, 16)
    clock = make_clock(2)
    with torch.no_grad():
        _, cache = clockwork_predict_noise(model, _identity(), RepCache(), clock, x, 1, 900, None)
        with nx.count_ops() as c:
            out, new = clockwork_predict_noise(model, _identity(), cache, clock, x, 2, 800, None)
    assert out.approximated
    assert c.total(segment="low") == 0 and c.count(segment="low") == 0
    assert c.total(segment="high_in") > 0 and c.total(segment="high_out") > 0
    assert new.step == 2 and new.r_out is cache.r_out


def test_cache_overwritten_by_adaptor_output(model):
    spec = AdaptorSpec(kind="resnet", channels=16, feature_channels=16, emb_dim=CFG.emb_dim)
    a = build_adaptor(spec, 0)
    with torch.no_grad():
        a.up.weight.normal_(0, 0.1)
        x = torch.randn(1, 3, 16, 16)
        _, cache = clockwork_predict_noise(model, a, RepCache(), make_clock(2), x, 1, 900, None)
        out, new = clockwork_predict_noise(model, a, cache, make_clock(2), x, 2, 800, None)
    assert torch.equal(new.r_out, out.r_out)
    assert not torch.equal(new.r_out, cache.r_out)


def test_empty_cache_and_missing_adaptor_errors(model):
    x = torch.randn(1, 3, 16, 16)
    with torch.no_grad():
        with pytest.raises(ProtocolError):
            clockwork_predict_noise(model, _identity(), RepCache(), make_clock(2), x, 2, 800, None)
        with pytest.raises(ProtocolError):
            clockwork_predict_noise(model, None, RepCache(), make_clock(2), x, 2, 800, None)


def test_generate_report_and_determinism(model):
    sched, grid = make_schedule(), make_grid(4, 1000)
    labels = torch.tensor([2])
    a = generate(model, _identity(), make_clock(2), sched, grid, "dpmpp2m", labels, seed=1)
    b = generate(model, _identity(), make_clock(2), sched, grid, "dpmpp2m", labels, seed=1)
    assert torch.equal(a[0], b[0])
    report = a[2]
    assert report.instrumented_total == report.total
    assert report.adaptor_steps == [2, 4]
    assert report.passes_per_step == 2

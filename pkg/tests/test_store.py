import struct
from pathlib import Path

import numpy as np
import pytest
import torch

from clockwork.adaptor import AdaptorSpec, build_adaptor
from clockwork.clockwork import generate, make_clock
from clockwork.errors import ArchiveError
from clockwork.sampler import make_grid, make_schedule
from clockwork.store import load_checkpoint, read_archive, read_ppm, save_checkpoint, write_archive, write_ppm
from clockwork.unet import UNetConfig, build_unet

FIXTURE = Path(__file__).parent / "fixtures" / "known_v1.cwkt"
CFG = UNetConfig(image_size=8, channels=(8, 16), num_classes=2, groups=4)


def test_fixture_decodes_to_known_values():
    tensors, config = read_archive(FIXTURE)
    assert list(tensors) == ["w", "scalar", "vec"]
    expected = torch.tensor([[1.0, -2.5, 0.125], [3.0e-8, 65504.0, -0.0]], dtype=torch.float32)
    assert torch.equal(tensors["w"], expected)
    assert torch.signbit(tensors["w"][1, 2])
    assert tensors["scalar"].shape == () and float(tensors["scalar"]) == 3.140625
    assert tensors["vec"].tolist() == [0.5, 0.25, -1.0, 2.0]
    assert config == {"kind": "fixture", "note": "little-endian f32"}


def test_writer_reproduces_fixture_bytes(tmp_path):
    tensors, config = read_archive(FIXTURE)
    write_archive(tmp_path / "re.cwkt", tensors, config)
    assert (tmp_path / "re.cwkt").read_bytes() == FIXTURE.read_bytes()


def test_round_trip_random(tmp_path, gen):
    tensors = {"a.b": torch.randn(3, 4, 5, generator=gen), "c": torch.randn(7, generator=gen),
               "é": torch.zeros(0, 2)}
    write_archive(tmp_path / "x.cwkt", tensors, {"seed": 3})
    back, cfg = read_archive(tmp_path / "x.cwkt")
    assert cfg == {"seed": 3}
    assert all(torch.equal(back[k], v) and back[k].dtype == torch.float32 for k, v in tensors.items())


def test_truncation_names_entry(tmp_path):
    data = FIXTURE.read_bytes()
    cut = tmp_path / "cut.cwkt"
    cut.write_bytes(data[:40])
    with pytest.raises(ArchiveError, match="entry 'w' payload"):
        read_archive(cut)
    cut.write_bytes(data[:6])
    with pytest.raises(ArchiveError, match="header"):
        read_archive(cut)


def test_version_mismatch(tmp_path):
    data = bytearray(FIXTURE.read_bytes())
    data[4:8] = struct.pack("<I", 2)
    (tmp_path / "v2.cwkt").write_bytes(bytes(data))
    with pytest.raises(ArchiveError, match="version 2"):
        read_archive(tmp_path / "v2.cwkt")


def test_bad_magic_and_duplicates(tmp_path):
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(ArchiveError):
        read_archive(tmp_path / "bad")
    with pytest.raises(ArchiveError, match="duplicate"):
        write_archive(tmp_path / "d.cwkt", [("x", torch.zeros(1)), ("x", torch.ones(1))], {})
    assert not (tmp_path / "d.cwkt").exists()
    # a reader faced with a hand-made duplicate also refuses
    one = struct.pack("<H", 1) + b"x" + struct.pack("<BBI", 0, 1, 1) + struct.pack("<f", 1.0)
    (tmp_path / "dup").write_bytes(b"CWKT" + struct.pack("<II", 1, 2) + one + one + b"{}")
    with pytest.raises(ArchiveError, match="duplicate"):
        read_archive(tmp_path / "dup")


def test_rejects_non_f32_and_non_finite(tmp_path):
    with pytest.raises(ArchiveError):
        write_archive(tmp_path / "a", {"x": torch.zeros(2, dtype=torch.float64)}, {})
    with pytest.raises(ArchiveError):
        write_archive(tmp_path / "a", {"x": torch.tensor([float("nan")])}, {})


def test_model_and_adaptor_checkpoints(tmp_path):
    m = build_unet(CFG, 4)
    save_checkpoint(m, tmp_path / "m.cwkt", {"trained": True, "solver": "ddim"})
    m2, prov = load_checkpoint(tmp_path / "m.cwkt")
    assert prov == {"trained": True, "solver": "ddim"}
    assert m2.config == CFG
    s1, s2 = m.state_dict(), m2.state_dict()
    assert set(s1) == set(s2) and all(torch.equal(s1[k], s2[k]) for k in s1)
    names = read_archive(tmp_path / "m.cwkt")[0]
    assert all(k.startswith("unet.") for k in names)

    spec = AdaptorSpec(kind="unet_light", channels=8, feature_channels=8, emb_dim=CFG.emb_dim, groups=4)
    a = build_adaptor(spec, 1)
    save_checkpoint(a, tmp_path / "a.cwkt", {"clock": 2})
    a2, prov = load_checkpoint(tmp_path / "a.cwkt")
    assert a2.spec == spec and prov == {"clock": 2}
    assert all(torch.equal(a.state_dict()[k], v) for k, v in a2.state_dict().items())


def test_trajectory_checkpoint(tmp_path):
    m = build_unet(CFG, 0)
    a = build_adaptor(AdaptorSpec(kind="identity", feature_channels=8), 0)
    _, traj, _, _ = generate(m, a, make_clock(2), make_schedule(), make_grid(4, 1000), "ddim",
                             torch.tensor([0, 1]), seed=0)
    save_checkpoint([traj], tmp_path / "t.cwkt", {"seed": 0})
    (back,), _ = load_checkpoint(tmp_path / "t.cwkt")
    assert back.seed == traj.seed and torch.equal(back.condition, traj.condition)
    assert torch.equal(back.model_labels, traj.model_labels)
    for r1, r2 in zip(traj.records, back.records):
        assert (r1.step, r1.t, r1.approximated) == (r2.step, r2.t, r2.approximated)
        assert torch.equal(r1.x_t, r2.x_t) and torch.equal(r1.r_in, r2.r_in) and torch.equal(r1.r_out, r2.r_out)


def test_ppm_zero_image(tmp_path):
    write_ppm(torch.zeros(1, 3, 4, 5), tmp_path / "z.ppm")
    data = (tmp_path / "z.ppm").read_bytes()
    header = b"P6\n5 4\n255\n"
    assert data.startswith(header)
    assert data[len(header):] == bytes(4 * 5 * 3)


def test_ppm_mosaic_and_round_trip(tmp_path, gen):
    imgs = torch.rand(4, 3, 6, 7, generator=gen)
    write_ppm(imgs, tmp_path / "m.ppm", nrow=2)
    arr = read_ppm(tmp_path / "m.ppm")
    assert arr.shape == (12, 14, 3)
    expected = np.round(imgs.double().numpy() * 255).astype(np.uint8)
    assert np.array_equal(arr[6:12, 7:14], expected[3].transpose(1, 2, 0))
    assert np.array_equal(arr[0:6, 0:7], expected[0].transpose(1, 2, 0))


def test_ppm_clamps(tmp_path):
    imgs = torch.tensor([-1.0, 0.5, 2.0]).view(1, 3, 1, 1)
    write_ppm(imgs, tmp_path / "c.ppm")
    assert read_ppm(tmp_path / "c.ppm").reshape(-1).tolist() == [0, 128, 255]

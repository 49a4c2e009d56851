import json

import numpy as np
import pytest
import torch

from cranio_synth import phantom
from cranio_synth import synthesis as S
from cranio_synth import training as T
from cranio_synth import voxel as vx


@pytest.fixture(scope="module")
def data16():
    return phantom.build_dataset(4, phantom.PhantomParams.for_resolution(16, seed=3), (0.5, 0.0, 0.5))


@pytest.fixture(scope="module")
def vae_ckpt(data16):
    cfg = T.TrainConfig(model_kind="vae", resolution=16, base_channels=8, batch_size=4, epochs=60, seed=1)
    return T.pretrain_vae(cfg, data16.subset("train"))


@pytest.fixture(scope="module")
def introvae_ckpt(data16):
    cfg = T.TrainConfig(model_kind="introvae", resolution=16, base_channels=8, batch_size=4, epochs=1, intro_warmup_epochs=1)
    return T.train(cfg, data16.subset("train"))[0]


def perturbed(sample, seed, noise=0.3):
    rng = np.random.default_rng(seed)
    x = sample.stacked()
    return np.clip(x + rng.uniform(-noise, noise, x.shape), 0, 1).astype(np.float32)


def assert_valid(s: phantom.SkullSample, min_voxels: int):
    for g in (s.defective_skull, s.defect):
        assert set(np.unique(g)) <= {0, 1}
        _, sizes = vx.label_components(g)
        assert all(sizes >= min_voxels)
    assert not vx.grid_and(s.defective_skull, s.defect).any()
    assert s.defective_skull.any()


# -- latents ---------------------------------------------------------------------------


def test_latent_statistics():
    z = S.sample_latents(1000, 200, seed=0)
    assert z.shape == (1000, 200)
    assert np.all(np.abs(z.mean(0)) <= 0.1)
    assert np.all((z.var(0) >= 0.85) & (z.var(0) <= 1.15))


def test_latents_deterministic_and_offset_consistent():
    a = S.sample_latents(10, 7, seed=3)
    assert np.array_equal(a, S.sample_latents(10, 7, seed=3))
    assert np.array_equal(a[4:], S.sample_latents(6, 7, seed=3, start=4))
    assert not np.array_equal(a, S.sample_latents(10, 7, seed=4))


def test_latents_reject_zero():
    with pytest.raises(ValueError):
        S.sample_latents(0, 200, seed=0)


# -- raw generation ----------------------------------------------------------------------


def test_generate_raw_shape_and_determinism(vae_ckpt):
    z = S.sample_latents(8, 200, seed=0)
    a = S.generate_raw(vae_ckpt, z)
    assert a.shape == (8, 16, 16, 16, 2) and a.dtype == np.float32
    assert np.array_equal(a, S.generate_raw(vae_ckpt, z))
    assert a.min() >= 0 and a.max() <= 1


def test_generate_raw_rejects_wrong_dim(vae_ckpt):
    with pytest.raises(vx.ShapeError):
        S.generate_raw(vae_ckpt, np.zeros((2, 10), np.float32))


def test_introvae_outputs_clamped(introvae_ckpt):
    gen = S.load_generator(introvae_ckpt)
    z = torch.from_numpy(S.sample_latents(16, 200, seed=2)) * 4
    with torch.no_grad():
        raw = gen(z)
    assert raw.min() < 0 or raw.max() > 1
    out = S.generate_raw(gen, z.numpy())
    assert out.min() >= 0 and out.max() <= 1


# -- postprocessing ------------------------------------------------------------------------


def test_postprocess_fixed_point(data16):
    s = data16.samples[0]
    cfg = S.SynthesisConfig(min_voxels=1)
    out = S.postprocess(s.stacked(), cfg)
    assert np.array_equal(out.defective_skull, s.defective_skull)
    assert np.array_equal(out.defect, s.defect)


def test_postprocess_defect_inside_skull_is_degenerate():
    raw = np.zeros((8, 8, 8, 2), np.float32)
    raw[1:7, 1:7, 1:7, 0] = 1
    raw[2:5, 2:5, 2:5, 1] = 1
    with pytest.raises(S.DegenerateSampleError, match="defect"):
        S.postprocess(raw, S.SynthesisConfig())
    assert not S.postprocess(raw, S.SynthesisConfig(), strict=False).defect.any()


def test_postprocess_empty_skull_is_degenerate():
    with pytest.raises(S.DegenerateSampleError, match="skull"):
        S.postprocess(np.zeros((8, 8, 8, 2), np.float32))


def test_postprocess_removes_overlap_and_specks():
    raw = np.zeros((16, 16, 16, 2), np.float32)
    raw[2:10, 2:10, 2:10, 0] = 0.9
    raw[8:14, 8:14, 8:14, 1] = 0.7
    raw[0, 15, 0, 0] = 1.0
    out = S.postprocess(raw, S.SynthesisConfig(min_voxels=5))
    assert out.defective_skull[0, 15, 0] == 0
    assert not vx.grid_and(out.defective_skull, out.defect).any()
    assert out.defect.sum() == 6**3 - 2**3


def test_postprocess_idempotent_on_perturbed_phantoms(data16):
    cfg = S.SynthesisConfig()
    for i in range(50):
        raw = perturbed(data16.samples[i % len(data16)], seed=i)
        once = S.postprocess(raw, cfg, strict=False)
        twice = S.postprocess(once.stacked(), cfg, strict=False)
        assert np.array_equal(once.defective_skull, twice.defective_skull)
        assert np.array_equal(once.defect, twice.defect)


def test_postprocess_rejects_bad_shape():
    with pytest.raises(vx.ShapeError):
        S.postprocess(np.zeros((8, 8, 8, 3)))


def test_synthesis_config_validation():
    for kw in (dict(count=0), dict(threshold=1.0), dict(connectivity=4), dict(min_voxels=-1)):
        with pytest.raises(ValueError):
            S.SynthesisConfig(**kw)


# -- dataset synthesis ---------------------------------------------------------------------


def test_synthesize_dataset_contract(vae_ckpt, tmp_path):
    cfg = S.SynthesisConfig(count=12, seed=5, out_dir=str(tmp_path / "a"))
    out, info = S.synthesize_dataset(vae_ckpt, cfg)
    loaded = phantom.load_dataset(out)
    assert len(loaded) == 12
    m = cfg.min_size((16, 16, 16))
    for s in loaded.samples:
        assert_valid(s, m)
    assert info["emitted"] + info["discarded"] == info["total_draws"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["synthesis"]["checkpoint_sha256"] == S.checkpoint_hash(vae_ckpt)
    assert manifest["synthesis"]["latent_seed"] == 5


def test_synthesize_dataset_deterministic(vae_ckpt, tmp_path):
    dirs = []
    for name, workers in (("a", 1), ("b", 1), ("c", 3)):
        out, _ = S.synthesize_dataset(vae_ckpt, S.SynthesisConfig(count=6, seed=2, workers=workers, out_dir=str(tmp_path / name)))
        dirs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert dirs[0] == dirs[1] == dirs[2]


def test_synthesize_quality_error(introvae_ckpt):
    # An almost untrained IntroVAE emits near-empty volumes.
    with pytest.raises(S.QualityError, match="train the generator longer"):
        S.synthesize(introvae_ckpt, S.SynthesisConfig(count=3, oversampling=2))


def test_synthesize_requires_out_dir(vae_ckpt):
    with pytest.raises(ValueError):
        S.synthesize_dataset(vae_ckpt, S.SynthesisConfig(count=1))


# -- interpolation -------------------------------------------------------------------------


def test_interpolation_endpoints(vae_ckpt):
    z = S.sample_latents(2, 200, seed=9)
    steps = S.interpolate_latent(vae_ckpt, z[0], z[1], 5)
    assert len(steps) == 5
    raws = S.generate_raw(vae_ckpt, z)
    for end, raw in ((steps[0], raws[0]), (steps[-1], raws[1])):
        direct = S.postprocess(raw, S.SynthesisConfig(), strict=False)
        assert np.array_equal(end.defective_skull, direct.defective_skull)
        assert np.array_equal(end.defect, direct.defect)


def test_interpolation_two_steps_and_degenerate_segment(vae_ckpt):
    z = S.sample_latents(2, 200, seed=9)
    codes = S.interpolate_codes(z[0], z[1], 2)
    assert np.allclose(codes, z, atol=1e-6)
    same = S.interpolate_latent(vae_ckpt, z[0], z[0], 3)
    assert all(np.array_equal(s.defective_skull, same[0].defective_skull) for s in same)
    with pytest.raises(ValueError):
        S.interpolate_codes(z[0], z[1], 1)


def test_write_samples_index_order(data16, tmp_path):
    paths = S.write_samples(data16.samples[:3], tmp_path)
    assert [p.name for p in paths] == ["step_000", "step_001", "step_002"]
    assert np.array_equal(vx.read_vxg(f"{paths[1]}_defect.vxg"), data16.samples[1].defect)

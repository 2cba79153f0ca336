import numpy as np
import pytest
import torch

from gazeadapt.data import generate_synthetic_eye, sample_gazes
from gazeadapt.data.io import GazeDataset
from gazeadapt.errors import CompositionError, GazeDomainError, TrainingDivergedError
from gazeadapt.pipeline import (Checkpoint, StageConfig, adapt_target, compose_inference, evaluate,
                                load_checkpoint, relative_improvement, save_checkpoint,
                                source_predictor, tensor_digest, train_grl, train_source)


def _dataset(n, seed, domain="source", contrast=1.0):
    gazes = sample_gazes(np.random.default_rng(seed), n, 25.0, 60.0)
    images = np.stack([generate_synthetic_eye(g, seed=seed * 1000 + i) for i, g in enumerate(gazes)])
    images = (images - images.mean()) * contrast + images.mean()
    return GazeDataset(images.astype(np.float32), gazes.astype(np.float32), domain)


@pytest.fixture(scope="module")
def data():
    return _dataset(48, 0), _dataset(16, 1), _dataset(32, 2, "target", contrast=0.5)


@pytest.fixture(scope="module")
def source_ckpt(data, tmp_path_factory):
    train, val, _ = data
    cfg = StageConfig(stage="source", batch_size=8, max_iterations=3, val_every=3)
    res = train_source(cfg, train, val, run_dir=tmp_path_factory.mktemp("src"))
    return res.checkpoint


# -- checkpoints -------------------------------------------------------------------------


def test_checkpoint_round_trip_is_byte_identical(source_ckpt, tmp_path):
    p1 = save_checkpoint(source_ckpt, tmp_path / "a.safetensors")
    loaded = load_checkpoint(p1)
    p2 = save_checkpoint(loaded, tmp_path / "b.safetensors")
    assert p1.read_bytes() == p2.read_bytes() == loaded.to_bytes()
    assert loaded.meta == source_ckpt.meta
    assert tensor_digest(loaded.tensors) == tensor_digest(source_ckpt.tensors)


def test_load_rejects_foreign_file(tmp_path):
    from safetensors.torch import save_file

    save_file({"x": torch.zeros(2)}, str(tmp_path / "x.safetensors"))
    with pytest.raises(ValueError, match="gazeadapt-ckpt"):
        load_checkpoint(tmp_path / "x.safetensors")


def test_digest_sees_single_bit():
    t = {"a": torch.zeros(4), "b": torch.ones(2)}
    d = tensor_digest(t)
    t["a"][3] = 1e-30
    assert tensor_digest(t) != d


# -- stage 1 ----------------------------------------------------------------------------


def test_source_training_is_deterministic(data, source_ckpt):
    train, val, _ = data
    cfg = StageConfig(stage="source", batch_size=8, max_iterations=3, val_every=3)
    again = train_source(cfg, train, val).checkpoint
    assert again.to_bytes() == source_ckpt.to_bytes()
    assert source_ckpt.meta["extra"]["iterations"] == 3


def test_source_loss_decreases(data):
    train, _, _ = data
    res = train_source(StageConfig(stage="source", batch_size=16, max_iterations=12), train)
    losses = [r["loss"] for r in res.loss_trace]
    assert np.mean(losses[-3:]) < np.mean(losses[:3])


def test_non_finite_loss_aborts_with_checkpoint(data, tmp_path):
    train, _, _ = data
    bad = GazeDataset(np.full_like(train.images, np.nan), train.gazes)
    with pytest.raises(TrainingDivergedError) as info:
        train_source(StageConfig(stage="source", batch_size=8, max_iterations=2), bad, run_dir=tmp_path)
    assert (tmp_path / "diverged.safetensors").is_file()
    ckpt = load_checkpoint(tmp_path / "diverged.safetensors")
    assert ckpt.stage == "source-diverged" and ckpt.meta["extra"]["diverged_at"] == 1
    assert info.value.checkpoint is not None


def test_source_training_needs_labels(data):
    with pytest.raises(Exception, match="labelled"):
        train_source(StageConfig(stage="source", batch_size=8, max_iterations=1), data[0].unlabeled())


# -- adaptation ---------------------------------------------------------------------------


def test_zero_step_adapt_is_identity(data, source_ckpt):
    train, _, target = data
    res = adapt_target(source_ckpt, StageConfig(stage="adapt", max_iterations=0, heldout_size=0),
                       train, target)
    a = evaluate(compose_inference(res.checkpoint, source_ckpt), target)
    b = evaluate(source_predictor(source_ckpt), target)
    assert a.errors == b.errors


def test_adapt_leaves_source_untouched(data, source_ckpt, tmp_path):
    train, _, target = data
    before = tensor_digest(source_ckpt.tensors)
    cfg = StageConfig(stage="adapt", batch_size=4, max_iterations=3, selection="C5",
                      heldout_size=8, heldout_every=1)
    res = adapt_target(source_ckpt, cfg, train, target, run_dir=tmp_path)
    assert res.source_digest_before == res.source_digest_after
    assert tensor_digest(source_ckpt.tensors) == before
    changed = [k for k, v in res.checkpoint.group("target").items()
               if not torch.equal(v, source_ckpt.group("regressor")[k])]
    # the mapper moves only the feature block, never the regression layers
    assert changed and all(k.split(".")[0] in ("c1", "c2", "c3", "c4", "c5", "fc1") for k in changed)
    assert [h["iteration"] for h in res.heldout_trace] == [1, 2, 3]
    assert (tmp_path / "target.safetensors").is_file() and (tmp_path / "adapt_trace.csv").is_file()


def test_adapt_never_reads_target_labels(data, source_ckpt):
    train, _, target = data
    cfg = StageConfig(stage="adapt", batch_size=4, max_iterations=2, selection="C5", heldout_size=0)
    a = adapt_target(source_ckpt, cfg, train, target).checkpoint
    scrambled = GazeDataset(target.images, -target.gazes, "target")
    b = adapt_target(source_ckpt, cfg, train, scrambled).checkpoint
    assert tensor_digest(a.tensors) == tensor_digest(b.tensors)


# -- composition and evaluation ------------------------------------------------------------


def test_composition_rejects_mismatched_architecture(data, source_ckpt):
    fake = Checkpoint(source_ckpt.tensors, {**source_ckpt.meta, "arch_fingerprint": "0" * 16})
    with pytest.raises(CompositionError, match="mismatch"):
        compose_inference(fake, source_ckpt)


def test_evaluate_known_angles():
    gazes = np.tile(np.array([[0.0, 0.0, 1.0]], dtype=np.float32), (3, 1))
    data = GazeDataset(np.zeros((3, 35, 55), np.float32), gazes, "target")
    angles = np.radians([0.0, 10.0, 20.0])

    def predictor(images):
        return np.stack([np.sin(angles), np.zeros(3), np.cos(angles)], axis=1)

    report = evaluate(predictor, data)
    assert report.errors == pytest.approx([0.0, 10.0, 20.0], abs=1e-5)
    assert report.mean_error == pytest.approx(10.0, abs=1e-5)


def test_relative_improvement_values():
    assert relative_improvement(14.5, 8.2) == pytest.approx(0.434, abs=1e-3)
    assert relative_improvement(11.2, 7.8) == pytest.approx(0.304, abs=1e-3)
    assert relative_improvement(10.0, 12.0) == pytest.approx(-0.2)
    with pytest.raises(GazeDomainError):
        relative_improvement(0.0, 1.0)


# -- gradient-reversal baseline --------------------------------------------------------------


def test_grl_with_zero_lambda_matches_source_training(data):
    train, _, target = data
    common = dict(batch_size=8, max_iterations=2, seed=3)
    src = train_source(StageConfig(stage="source", **common), train).checkpoint
    grl = train_grl(StageConfig(stage="grl-baseline", grl_warmup_frac=1.0, selection="C5", **common),
                    train, target).checkpoint
    a, b = src.group("regressor"), grl.group("target")
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)

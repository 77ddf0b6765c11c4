import math

import numpy as np
import pytest
import torch

from protoguide.denoiser import (ConditioningTable, DenoiserConfig,
                                 DiffusionTrainer, NoisePredictor,
                                 build_condition, denoising_loss, desk_config,
                                 init_from_prototypes, init_random,
                                 load_checkpoint, predict_noise,
                                 sinusoidal_time_embedding)
from protoguide.diffusion import make_linear_schedule
from protoguide.prototypes import Codebook


def tiny_model(cond_dim=3, num_classes=2, seed=0, **overrides):
    torch.manual_seed(seed)
    config = desk_config(cond_dim=cond_dim, **overrides)
    table = init_random(num_classes, cond_dim, seed)
    return NoisePredictor(config, table), config


def toy_dataset(n=8, size=8, seed=0):
    # Two classes of near-solid images: dark vs bright.
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    base = np.where(labels == 0, -0.5, 0.5).astype(np.float32)
    images = (base[:, None, None, None]
              + 0.05 * rng.standard_normal((n, 3, size, size))).astype(np.float32)
    return np.clip(images, -1, 1), labels.astype(np.int64)


def test_time_embedding_t_zero():
    emb = sinusoidal_time_embedding(0, 8)
    assert np.allclose(emb[0::2], 0.0)
    assert np.allclose(emb[1::2], 1.0)


def test_time_embedding_range_and_determinism():
    for t in (0, 1, 57, 999):
        emb = sinusoidal_time_embedding(t, 64)
        assert np.all(emb >= -1.0) and np.all(emb <= 1.0)
        assert np.array_equal(emb, sinusoidal_time_embedding(t, 64))


def test_time_embedding_scalar_oracle():
    # t=1, dim=4: pairs oscillate at 1 and 10^-2.
    emb = sinusoidal_time_embedding(1, 4)
    expected = [math.sin(1.0), math.cos(1.0), math.sin(1e-2), math.cos(1e-2)]
    assert emb == pytest.approx(expected, abs=1e-12)
    assert emb == pytest.approx([0.84147, 0.54030, 0.01000, 0.99995], abs=1e-5)


def test_time_embedding_rejects_odd_dim():
    with pytest.raises(ValueError):
        sinusoidal_time_embedding(3, 5)


def test_build_condition_layout():
    table = init_random(3, 4, seed=1)
    vec = build_condition(7, 1, table, time_dim=6)
    assert vec.shape == (10,)
    assert np.array_equal(vec[:6], sinusoidal_time_embedding(7, 6))
    assert np.array_equal(vec[6:], table.embeddings[1])
    # Null class selects the trailing row but shares the time prefix.
    null_vec = build_condition(7, None, table, time_dim=6)
    assert np.array_equal(null_vec[:6], vec[:6])
    assert np.array_equal(null_vec[6:], table.embeddings[3])
    # Deterministic.
    assert np.array_equal(vec, build_condition(7, 1, table, time_dim=6))
    with pytest.raises(KeyError):
        build_condition(7, 3, table, time_dim=6)


def test_init_from_prototypes_is_bit_exact_and_frozen():
    rng = np.random.default_rng(2)
    cb = Codebook(prototypes=rng.standard_normal((4, 2, 5)),
                  class_ids=np.arange(4), gamma=1.0)
    table = init_from_prototypes(cb)
    assert table.frozen
    assert table.source == "prototype_frozen"
    assert table.embeddings.shape == (5, 5)
    assert np.array_equal(table.embeddings[:-1], cb.prototypes[:, 0, :])
    assert np.all(table.embeddings[-1] == 0.0)


def test_init_random_seed_behaviour():
    a = init_random(3, 6, seed=5)
    b = init_random(3, 6, seed=5)
    c = init_random(3, 6, seed=6)
    assert not a.frozen and a.source == "random_trainable"
    assert np.array_equal(a.embeddings, b.embeddings)
    assert not np.array_equal(a.embeddings, c.embeddings)
    assert a.embeddings.std() == pytest.approx(0.02, abs=0.01)


def test_predict_noise_shape_contract():
    for size, mult in ((8, (1, 2)), (64, (1, 2, 4, 8))):
        torch.manual_seed(0)
        config = desk_config(input_size=size, channel_multipliers=mult,
                             cond_dim=3, base_channels=8)
        model = NoisePredictor(config, init_random(2, 3, 0))
        x = np.random.default_rng(0).standard_normal((3, size, size))
        out = predict_noise(model, x, 5, 1)
        assert out.shape == (3, size, size)
        assert np.all(np.isfinite(out))
        batched = predict_noise(model, np.stack([x, x]), 5, None)
        assert batched.shape == (2, 3, size, size)


def test_predict_noise_inference_determinism():
    model, _ = tiny_model()
    x = np.random.default_rng(1).standard_normal((3, 8, 8)).astype(np.float32)
    a = predict_noise(model, x, 3, 0)
    b = predict_noise(model, x, 3, 0)
    assert np.array_equal(a, b)


def test_predict_noise_input_validation():
    model, _ = tiny_model()
    x = np.zeros((3, 8, 8), dtype=np.float32)
    with pytest.raises(IndexError):
        predict_noise(model, x, 200, 0)
    with pytest.raises(KeyError):
        predict_noise(model, x, 0, 7)
    with pytest.raises(ValueError):
        predict_noise(model, np.zeros((1, 8, 8)), 0, 0)


def test_denoising_loss_oracle_model_zero_loss():
    schedule = make_linear_schedule(200)
    rng = np.random.default_rng(0)
    x0 = torch.from_numpy(rng.standard_normal((4, 3, 8, 8)).astype(np.float32))
    eps = torch.from_numpy(rng.standard_normal((4, 3, 8, 8)).astype(np.float32))
    t = torch.from_numpy(rng.integers(0, 200, size=4))
    cond = torch.zeros(4, dtype=torch.long)
    loss = denoising_loss(lambda x, tt, cc: eps, x0, cond, t, eps, schedule)
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_denoising_loss_zero_model_matches_unit_second_moment():
    # A model that predicts zero scores the mean of ||eps||^2 per element,
    # which concentrates near 1 over many draws.
    schedule = make_linear_schedule(200)
    rng = np.random.default_rng(3)
    losses = []
    for _ in range(200):
        x0 = torch.from_numpy(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        eps = torch.from_numpy(rng.standard_normal((2, 3, 8, 8)).astype(np.float32))
        t = torch.from_numpy(rng.integers(0, 200, size=2))
        cond = torch.zeros(2, dtype=torch.long)
        loss = denoising_loss(lambda x, tt, cc: torch.zeros_like(x),
                              x0, cond, t, eps, schedule)
        losses.append(loss.item())
    assert np.mean(losses) == pytest.approx(1.0, abs=0.05)


def test_frozen_table_is_byte_immutable_over_training():
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    cb = Codebook(prototypes=rng.standard_normal((2, 1, 3)),
                  class_ids=np.arange(2), gamma=1.0)
    table = init_from_prototypes(cb)
    config = desk_config(cond_dim=3)
    model = NoisePredictor(config, table)
    before = model.class_embeddings.detach().numpy().tobytes()

    images, labels = toy_dataset()
    schedule = make_linear_schedule(config.timesteps)
    trainer = DiffusionTrainer(model, schedule, images, labels, seed=0)
    for _ in range(100):
        trainer.train_step()
    after = model.class_embeddings.detach().numpy().tobytes()
    assert before == after
    # Everything else did train.
    assert trainer.step == 100


def test_trainable_table_changes_after_one_step():
    model, config = tiny_model()
    before = model.class_embeddings.detach().clone()
    images, labels = toy_dataset()
    schedule = make_linear_schedule(config.timesteps)
    trainer = DiffusionTrainer(model, schedule, images, labels, seed=0)
    trainer.train_step()
    after = model.class_embeddings.detach()
    assert not torch.equal(before, after)


def test_uncond_prob_one_gives_class_rows_zero_gradient():
    # With conditioning always dropped, only the null row can receive
    # gradient through the embedding lookup.
    model, config = tiny_model(uncond_prob=1.0)
    images, labels = toy_dataset()
    schedule = make_linear_schedule(config.timesteps)
    rng = np.random.default_rng(0)
    eps = torch.from_numpy(rng.standard_normal(images.shape).astype(np.float32))
    t = torch.from_numpy(rng.integers(0, config.timesteps, size=len(labels)))
    null_ids = torch.full((len(labels),), model.null_index, dtype=torch.long)
    loss = denoising_loss(model, torch.from_numpy(images), null_ids, t, eps,
                          schedule)
    loss.backward()
    grad = model.class_embeddings.grad
    assert torch.all(grad[:-1] == 0)
    assert torch.any(grad[-1] != 0)


def test_modes_share_architecture_and_parameter_count():
    rng = np.random.default_rng(0)
    cb = Codebook(prototypes=rng.standard_normal((2, 1, 3)),
                  class_ids=np.arange(2), gamma=1.0)
    config = desk_config(cond_dim=3)
    torch.manual_seed(0)
    guided = NoisePredictor(config, init_from_prototypes(cb))
    torch.manual_seed(0)
    baseline = NoisePredictor(config, init_random(2, 3, 0))
    count = lambda m: sum(p.numel() for p in m.parameters())
    assert count(guided) == count(baseline)
    names = lambda m: [(n, tuple(p.shape)) for n, p in m.named_parameters()]
    assert names(guided) == names(baseline)
    assert guided.class_embeddings.requires_grad is False
    assert baseline.class_embeddings.requires_grad is True


def test_config_validation():
    with pytest.raises(ValueError):
        DenoiserConfig(input_size=10, channel_multipliers=(1, 2, 4))
    with pytest.raises(ValueError):
        DenoiserConfig(channel_multipliers=())
    with pytest.raises(ValueError):
        DenoiserConfig(time_dim=3)
    with pytest.raises(ValueError):
        ConditioningTable(embeddings=np.zeros((2, 3)), frozen=False,
                          source="bogus")


def test_trainer_validation():
    model, config = tiny_model()
    schedule = make_linear_schedule(config.timesteps)
    images, labels = toy_dataset()
    with pytest.raises(ValueError):
        DiffusionTrainer(model, make_linear_schedule(77), images, labels)
    with pytest.raises(ValueError):
        DiffusionTrainer(model, schedule, images[:0], labels[:0])
    with pytest.raises(ValueError):
        DiffusionTrainer(model, schedule, images, labels + 5)


def test_checkpoint_round_trip_and_resume_equivalence(tmp_path):
    images, labels = toy_dataset()

    def fresh():
        torch.manual_seed(0)
        config = desk_config(cond_dim=3)
        model = NoisePredictor(config, init_random(2, 3, 0))
        schedule = make_linear_schedule(config.timesteps)
        return DiffusionTrainer(model, schedule, images, labels, seed=0)

    straight = fresh()
    for _ in range(12):
        straight.train_step()

    resumed = fresh()
    for _ in range(6):
        resumed.train_step()
    resumed.save_checkpoint(tmp_path / "ckpt.pt", {"class_names": ["a", "b"]})

    other = fresh()
    other.restore(tmp_path / "ckpt.pt")
    assert other.step == 6
    for _ in range(6):
        other.train_step()

    for (n1, p1), (n2, p2) in zip(straight.model.state_dict().items(),
                                  other.model.state_dict().items()):
        assert n1 == n2
        assert torch.equal(p1, p2), n1

    # Inference model rebuilt from the checkpoint matches the saved weights.
    model, sidecar = load_checkpoint(tmp_path / "ckpt.pt")
    assert sidecar["step"] == 6
    assert sidecar["class_names"] == ["a", "b"]
    x = np.random.default_rng(2).standard_normal((3, 8, 8)).astype(np.float32)
    assert np.array_equal(predict_noise(model, x, 3, 1),
                          predict_noise(resumed.model, x, 3, 1))


def test_toy_overfit_reaches_low_loss():
    # 8 images, 2 classes, 8x8: loss must drop below 0.1 within 2000 steps.
    images, labels = toy_dataset()
    torch.manual_seed(0)
    config = desk_config(cond_dim=3)
    model = NoisePredictor(config, init_random(2, 3, 0))
    schedule = make_linear_schedule(config.timesteps)
    trainer = DiffusionTrainer(model, schedule, images, labels, seed=0)
    recent = []
    for step in range(2000):
        recent.append(trainer.train_step()["loss"])
        if step >= 50 and np.mean(recent[-25:]) < 0.08:
            break
    assert np.mean(recent[-25:]) < 0.1

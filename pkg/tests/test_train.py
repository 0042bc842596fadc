import numpy as np
import pytest
from conftest import tiny_model_config, tiny_run_config

from tpcvit import tensor as T
from tpcvit.checkpoint import MAGIC, checkpoint_bytes, load_checkpoint, parse_checkpoint
from tpcvit.config import TpcConfig
from tpcvit.data import (
    ArrayDataset,
    load_tensor_dir,
    read_cifar10_file,
    save_tensor_dir,
    synthetic_blobs,
    write_cifar10_file,
)
from tpcvit.errors import ConfigError, ContractError, FormatError, NumericalError
from tpcvit.model import TpcViT
from tpcvit.optim import Adam, CosineSchedule
from tpcvit.tensor import Tensor
from tpcvit.train import build_run, evaluate, train, train_step


def one_step(cfg):
    run = build_run(cfg)
    idx = np.arange(cfg.train.batch_size)
    return train_step(run.model, run.train_data.images[idx], run.train_data.labels[idx], run.optim)


# -- optimizer and schedule ----------------------------------------------------


def test_cosine_schedule_shape():
    s = CosineSchedule(1e-3, total_steps=100, warmup_steps=0, min_ratio=1e-4)
    lrs = [s(i) for i in range(100)]
    assert lrs[0] == 1e-3
    assert lrs[-1] <= 1e-3 * 1e-3
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) > 0


def test_cosine_schedule_warmup_then_decay():
    s = CosineSchedule(1.0, total_steps=20, warmup_steps=4)
    assert [s(i) for i in range(4)] == [0.25, 0.5, 0.75, 1.0]
    post = [s(i) for i in range(3, 20)]
    assert all(a >= b for a, b in zip(post, post[1:]))


def test_adam_matches_hand_rolled_reference():
    target = np.array([1.0, -2.0, 0.5])
    w = Tensor(np.zeros(3), requires_grad=True)
    opt = Adam([("w", w)], CosineSchedule(0.1, 20, 0), beta1=0.9, beta2=0.999, eps=1e-8)
    ref, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t in range(1, 21):
        opt.zero_grad()
        T.tsum((w - target) ** 2).backward()
        lr = opt.step()
        g = 2 * (ref - target)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert np.max(np.abs(w.data - ref)) < 1e-12


# -- data --------------------------------------------------------------------------


def test_cifar_records(tmp_path, rng):
    pixels = rng.integers(0, 256, size=(3, 3072), dtype=np.uint8)
    pixels[1, 0] = 255
    labels = np.array([0, 9, 4])
    path = tmp_path / "data_batch_1.bin"
    write_cifar10_file(path, pixels, labels)
    assert path.stat().st_size == 3 * 3073
    images, got = read_cifar10_file(path)
    assert images.shape == (3, 3, 32, 32)
    assert got.tolist() == [0, 9, 4]
    assert images[1, 0, 0, 0] == 1.0
    assert images.min() >= 0 and images.max() <= 1


def test_cifar_truncated_and_bad_label(tmp_path, rng):
    path = tmp_path / "b.bin"
    write_cifar10_file(path, rng.integers(0, 256, (2, 3072), dtype=np.uint8), [1, 2])
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(FormatError) as info:
        read_cifar10_file(path)
    assert info.value.offset == 3073
    write_cifar10_file(path, np.zeros((2, 3072), np.uint8), [1, 12])
    with pytest.raises(FormatError):
        read_cifar10_file(path)


def test_tensor_dir_round_trip(tmp_path, rng):
    images, labels = synthetic_blobs(6, 3, 8, 3, 0.1, seed=2)
    save_tensor_dir(tmp_path, "train", images, labels)
    data = load_tensor_dir(tmp_path, "train", 3)
    assert np.array_equal(data.images, images) and np.array_equal(data.labels, labels)


def test_synthetic_blobs_are_seeded():
    a = synthetic_blobs(10, seed=4)
    b = synthetic_blobs(10, seed=4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_dataset_label_contract():
    with pytest.raises(ContractError):
        ArrayDataset(np.zeros((2, 3, 8, 8)), [0, 5], 2)


def test_data_model_shape_mismatch_is_config_error():
    cfg = tiny_run_config(data={"image_size": 16})
    with pytest.raises(ConfigError):
        build_run(cfg)


# -- training --------------------------------------------------------------------------


def test_train_step_is_deterministic(tiny_cfg):
    assert one_step(tiny_cfg).losses == one_step(tiny_cfg).losses


def test_train_step_rejects_empty_batch(tiny_cfg):
    run = build_run(tiny_cfg)
    with pytest.raises(ContractError):
        train_step(run.model, run.train_data.images[:0], run.train_data.labels[:0], run.optim)


def test_non_finite_input_aborts_with_record_dump(tiny_cfg):
    run = build_run(tiny_cfg)
    images = run.train_data.images[:4].copy()
    images[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericalError) as info:
        with np.errstate(invalid="ignore"):
            train_step(run.model, images, run.train_data.labels[:4], run.optim)
    assert isinstance(info.value.records, list)


def test_degenerate_config_reduces_to_vanilla(rng):
    cfg = tiny_model_config(depth=3)
    tpc = TpcConfig(gamma=0.0, beta=-60.0, delta=1e-6, phi_p=0.0, phi_d=0.0, kappa=cfg.num_tokens)
    model = TpcViT(cfg, tpc, seed=2)
    x = rng.standard_normal((4, 3, 8, 8))
    labels = np.array([0, 1, 2, 1])
    out = model.forward(x)
    assert np.all(out.state.halting_layer == 3)
    tpc_task = T.cross_entropy(out.logits, labels).item()
    vanilla = T.cross_entropy(model.vanilla_forward(x), labels).item()
    assert tpc_task == pytest.approx(vanilla, abs=1e-12)


def test_loss_decreases_over_first_fifty_steps():
    for seed in (0, 1, 2):
        cfg = tiny_run_config(
            model={"embed_dim": 32, "heads": 4, "patch_size": 2},
            data={"train_size": 64, "seed": seed},
            train={"epochs": 25, "batch_size": 32, "seed": seed},
        )
        history = train(cfg).history[:50]
        first = np.mean([h.losses["final"] for h in history[:5]])
        last = np.mean([h.losses["final"] for h in history[-5:]])
        assert last < first


def test_evaluate_contracts(tiny_cfg):
    run = build_run(tiny_cfg)
    empty = ArrayDataset(run.eval_data.images[:0], run.eval_data.labels[:0], 2)
    with pytest.raises(ContractError):
        evaluate(run.model, empty)


def test_majority_model_on_single_class_data(tiny_cfg):
    run = build_run(tiny_cfg)
    run.model.head.weight.data[:] = 0.0
    run.model.head.bias.data[:] = [5.0, 0.0]
    data = ArrayDataset(run.eval_data.images, np.zeros(len(run.eval_data), dtype=int), 2)
    res = evaluate(run.model, data)
    assert res.top1 == 1.0 and res.top5 == 1.0


def test_evaluate_depth_bounds_and_monotone_active(tiny_cfg):
    cfg = tiny_run_config(model={"depth": 4}, tpc={"gamma": 2.0, "beta": 0.5, "delta": 0.3})
    run = build_run(cfg)
    res = evaluate(run.model, run.eval_data)
    assert 1 <= res.mean_depth <= 4
    assert all(a >= b for a, b in zip(res.active_per_layer, res.active_per_layer[1:]))
    assert res.flops <= res.dense_flops or res.active_per_layer[0] == cfg.model.num_tokens


# -- checkpoints ----------------------------------------------------------------------


def test_checkpoint_round_trip_is_byte_identical(tmp_path, tiny_cfg):
    train(tiny_cfg, tmp_path)
    raw = (tmp_path / "checkpoint.bin").read_bytes()
    assert raw.startswith(MAGIC)
    assert checkpoint_bytes(parse_checkpoint(raw)) == raw


def test_checkpoint_version_and_truncation(tmp_path, tiny_cfg):
    train(tiny_cfg, tmp_path)
    raw = (tmp_path / "checkpoint.bin").read_bytes()
    bumped = raw[:8] + (99).to_bytes(4, "little") + raw[12:]
    with pytest.raises(FormatError, match="version"):
        parse_checkpoint(bumped)
    with pytest.raises(FormatError):
        parse_checkpoint(raw[:-3])
    with pytest.raises(FormatError):
        parse_checkpoint(b"NOTACKPT" + raw[8:])


def test_resume_matches_uninterrupted_run(tmp_path):
    cfg = tiny_run_config(train={"epochs": 3, "batch_size": 6})  # 3 steps per epoch, 9 in total
    full = train(cfg, tmp_path / "full")
    train(cfg, tmp_path / "part", max_steps=4)
    resumed = train(cfg, tmp_path / "part", resume=tmp_path / "part" / "checkpoint.bin")
    a = load_checkpoint(tmp_path / "full" / "checkpoint.bin")
    b = load_checkpoint(tmp_path / "part" / "checkpoint.bin")
    assert b.step == a.step == 9
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name]), name
    assert [h.losses for h in full.history[4:]] == [h.losses for h in resumed.history]
    assert (tmp_path / "full" / "metrics.csv").read_text() == (tmp_path / "part" / "metrics.csv").read_text()

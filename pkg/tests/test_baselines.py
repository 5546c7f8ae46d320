import numpy as np
import pytest

from conceptcells import baselines, netcore, streams
from conftest import small_mlp


def test_fill_phase_stores_everything():
    buf = baselines.ReplayBuffer(5)
    for i in range(5):
        baselines.reservoir_insert(buf, np.array([i], np.float32), i)
    assert len(buf) == 5 and sorted(buf.y.tolist()) == [0, 1, 2, 3, 4]


def test_zero_capacity_stays_empty():
    buf = baselines.ReplayBuffer(0)
    for i in range(20):
        buf.insert(np.zeros(1), i)
    assert len(buf) == 0 and buf.seen == 20 and buf.sample(4) is None


def test_inclusion_is_uniform():
    M, n, trials = 10, 100, 5000
    counts = np.zeros(n)
    for t in range(trials):
        buf = baselines.ReplayBuffer(M, seed=t)
        for i in range(n):
            buf.insert(np.zeros(1, np.float32), i)
        assert len(buf) <= M
        counts[buf.y] += 1
    freq = counts / trials
    assert np.all(np.abs(freq - M / n) <= 0.03)


def test_empty_buffer_replay_equals_finetune():
    arch = small_mlp()
    x = np.random.default_rng(0).normal(size=(4, 6)).astype(np.float32)
    y = np.array([0, 1, 2, 3])
    cfg = netcore.TrainConfig(learning_rate=0.1)
    a, b = netcore.init_network(arch, 0), netcore.init_network(arch, 0)
    ca, cb = netcore.dense_cell(a), netcore.dense_cell(b)
    ra = baselines.finetune_step(a, ca, x, y, cfg)
    rb = baselines.replay_step(b, cb, baselines.ReplayBuffer(10), x, y, cfg)
    assert ra.loss == rb.loss
    assert all(np.array_equal(p, q) for p, q in zip(a.weights, b.weights))


def test_replay_loss_is_mean_over_concatenation():
    arch = small_mlp()
    params = netcore.init_network(arch, 0, precision="verify")
    cell = netcore.dense_cell(params)
    buf = baselines.ReplayBuffer(50, seed=1)
    rng = np.random.default_rng(0)
    for i in range(8):
        buf.insert(rng.normal(size=6), i % 4)
    x, y = rng.normal(size=(4, 6)), np.array([0, 1, 2, 3])
    probe = baselines.ReplayBuffer(50, seed=1)
    probe.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in buf.__dict__.items()})
    probe.rng = np.random.default_rng([1, 0x5EED])
    probe.rng.bit_generator.state = buf.rng.bit_generator.state
    ox, oy = probe.sample(4)
    expected = netcore.cross_entropy(netcore.forward(params, cell, np.concatenate([x, ox]), keep_cache=False)[0],
                                     np.concatenate([y, oy]))[0]
    r = baselines.replay_step(params, cell, buf, x, y, netcore.TrainConfig(learning_rate=0.0))
    assert r.loss == pytest.approx(expected, rel=1e-12)
    assert buf.seen == 12


def test_zero_epochs_leave_network_at_init():
    arch = small_mlp()
    p = netcore.init_network(arch, 0)
    ref = netcore.init_network(arch, 0)
    assert baselines.iid_joint(p, netcore.dense_cell(p), np.zeros((5, 6), np.float32), np.zeros(5, np.int64),
                               0, 2, netcore.TrainConfig()) == []
    assert all(np.array_equal(a, b) for a, b in zip(p.weights, ref.weights))


def test_iid_joint_step_count_and_learning():
    scen, train, test = streams.synthetic_streams(2, 2, 2, 100, 10.0, 0)
    p = netcore.init_network(netcore.mlp_400(2, 4, 32), 0)
    c = netcore.dense_cell(p)
    reports = baselines.iid_joint(p, c, train.x, train.y, 3, 16, netcore.TrainConfig(), seed=0)
    assert len(reports) == 3 * -(-400 // 16)
    acc = np.mean(netcore.predict_logits(p, c, test.x).argmax(1) == test.y)
    assert acc > 0.95


def test_finetune_forgets_first_stream_on_split_mnist(mnist):
    train, test = mnist
    scen = streams.make_split(train, 5, 2)
    p = netcore.init_network(netcore.mlp_400(), 0)
    c = netcore.dense_cell(p)
    for x, y in streams.batches(scen, train):
        baselines.finetune_step(p, c, x, y, netcore.TrainConfig(), 10)
    first = np.isin(test.y, scen.streams[0])
    acc = np.mean(netcore.predict_logits(p, c, test.x[first]).argmax(1) == test.y[first])
    assert acc < 2 * 0.1

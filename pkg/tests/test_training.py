import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dian.datamodel import encode_sessions
from dian.models import DIAN, ForwardTrace, ModelConfig
from dian.synthgen import GenConfig, generate_dataset, generate_world
from dian.training import (
    MetricError,
    TrainConfig,
    TrainingError,
    auc,
    auc_bruteforce,
    effective_alpha,
    evaluate,
    evaluate_scores,
    full_batch_loss,
    multitask_loss,
    multitask_loss_and_grad,
    train,
)
from dian.numerics import ConfigError

SMALL = dict(d_id=6, d_cat=2, d_user=4, d_profile=2, d_crs=2, n_heads=2, mlp_hidden=[8, 4], K_s=6, K_l=20, hard_search_K=5)
GEN = GenConfig(n_users=40, n_items=80, n_categories=5, n_sessions=120, long_len_max=25, short_len_max=8, n_age=3, n_occupation=3)


@pytest.fixture(scope="module")
def data():
    world = generate_world(GEN)
    vocab = world.vocab(GEN.n_age, GEN.n_occupation)
    return vocab, encode_sessions(generate_dataset(world, GEN), vocab, K_s=6, K_l=20)


def _trace(variant="DIAN"):
    return ForwardTrace(
        y_hat=np.array([0.9, 0.2, 0.6]), y_int=np.array([0.7, 0.4, 0.5]), y_tan=None, y_tfn=None, variant=variant
    )


def test_loss_three_row_hand_example():
    y, yi = np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 1.0])
    assert multitask_loss(_trace(), y, yi, 0.1) == pytest.approx(0.4669531912242193, rel=1e-14)
    # alpha is ignored when the intention term is ablated
    assert multitask_loss(_trace("NO_INTENT_LOSS"), y, yi, 0.1) == pytest.approx(0.414931599615397, rel=1e-14)
    assert effective_alpha("AVG_FUSION", 0.1) == 0.0


def test_loss_gradients_are_per_row_means():
    y, yi = np.array([1.0, 0.0, 0.0]), np.array([1.0, 0.0, 1.0])
    _, d_hat, d_int = multitask_loss_and_grad(_trace(), y, yi, 0.1)
    np.testing.assert_allclose(d_hat, [-1 / 0.9 / 3, 1 / 0.8 / 3, 1 / 0.4 / 3], rtol=1e-12)
    np.testing.assert_allclose(d_int, 0.1 * np.array([-1 / 0.7, 1 / 0.6, -2.0]) / 3, rtol=1e-12)


def test_loss_rejects_soft_labels():
    with pytest.raises(MetricError):
        multitask_loss(_trace(), np.array([1.0, 0.5, 0.0]), np.ones(3), 0.1)


def test_auc_known_values():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert auc([0.5, 0.5, 0.5], [0, 1, 1]) == 0.5
    assert auc([3, 2, 1], [1, 0, 0]) == 1.0
    with pytest.raises(MetricError, match="single class"):
        auc([0.1, 0.2], [1, 1])


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=50).filter(
        lambda xs: 0 < sum(y for _, y in xs) < len(xs)
    )
)
def test_auc_matches_bruteforce_with_ties(pairs):
    s = np.array([p for p, _ in pairs], dtype=float) / 5
    y = np.array([t for _, t in pairs])
    assert auc(s, y) == auc_bruteforce(s, y)


@given(st.lists(st.integers(-1000, 1000), min_size=4, max_size=30), st.randoms(use_true_random=False))
def test_auc_invariant_to_monotone_transform(scores, rnd):
    y = np.array([i % 2 for i in range(len(scores))])
    rnd.shuffle(y)
    s = np.array(scores, dtype=float)
    # exact in float64 for these magnitudes, and strictly increasing
    assert auc(s, y) == auc(3 * s**3 + s + 5, y)
    assert auc(-s, y) == pytest.approx(1 - auc(s, y), abs=1e-12)


def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=-1.0)


def test_training_history_cadence(data):
    vocab, batch = data
    m = DIAN(ModelConfig(**SMALL), vocab)
    entries = []
    res = train(m, batch, TrainConfig(batch_size=32, epochs=2, eval_every=4), eval_data=batch, log=entries.append)
    n_steps = 2 * int(np.ceil(len(batch) / 32))
    assert res.steps == n_steps
    assert len(entries) == n_steps // 4 + 1 and entries[-1]["final"]
    assert all("ctr_auc" in e for e in entries)


def test_training_is_deterministic(data):
    vocab, batch = data
    runs = []
    for _ in range(2):
        m = DIAN(ModelConfig(**SMALL), vocab)
        train(m, batch, TrainConfig(batch_size=16, max_steps=10, seed=3))
        runs.append(m)
    for n in runs[0].store.names():
        np.testing.assert_array_equal(runs[0].store[n], runs[1].store[n])


def test_one_step_decreases_loss_for_most_seeds(data):
    vocab, batch = data
    sub = batch.take(np.arange(64))
    wins = 0
    for seed in range(20):
        m = DIAN(ModelConfig(**SMALL, init_seed=seed), vocab)
        before = full_batch_loss(m, sub, 0.1)
        train(m, sub, TrainConfig(batch_size=64, max_steps=1, learning_rate=1e-3, seed=seed))
        wins += full_batch_loss(m, sub, 0.1) < before
    assert wins >= 19


def test_non_finite_loss_reports_step(data):
    vocab, batch = data
    m = DIAN(ModelConfig(**SMALL), vocab)
    m.store.values["tan.mlp.b2"][...] = np.nan
    with pytest.raises(TrainingError, match="step 0"):
        train(m, batch, TrainConfig(batch_size=16))


def test_evaluate_reports_intent_metrics_per_session(data):
    vocab, batch = data
    m = DIAN(ModelConfig(**SMALL), vocab)
    rep = evaluate(m, batch, oracle=np.linspace(0, 1, len(batch)))
    assert rep.n_sessions == GEN.n_sessions and rep.n_rows == len(batch)
    assert 0 <= rep.intent_accuracy <= 1 and rep.intent_auc is not None
    assert rep.oracle_gap == pytest.approx(rep.oracle_auc - rep.ctr_auc)
    none = evaluate_scores(np.linspace(0, 1, len(batch)), batch)
    assert "intent_auc" not in none.to_json()


def test_evaluate_rejects_vocab_mismatch(data):
    vocab, batch = data
    m = DIAN(ModelConfig(**SMALL), vocab)
    with pytest.raises(MetricError, match="vocabulary"):
        evaluate(m, batch.replace(target_item=batch.target_item + vocab.item))

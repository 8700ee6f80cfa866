import math
import struct

import numpy as np
import pytest

from app.errors import AsymmetricMatrixError, DatasetError, ModelFormatError, NonFiniteLossError, NotPositiveDefiniteError
from app.nn.layers import LayerKind
from app.nn.linalg import cholesky, cholesky_solve, jacobi_eigen
from app.nn.network import LossKind, NetworkSpec, Node, dense, init_params, simple
from app.nn.rng import Rng
from app.nn.serialize import MAGIC, decode_params, encode_params, load_params, save_params
from app.nn.train import TrainConfig, fit, learning_rate, sgd_epoch


def _classifier():
    return NetworkSpec(
        input_shape=(4,),
        nodes=(
            Node(name="fc1", layer=dense(4, 6), inputs=("input",)),
            Node(name="relu", layer=simple(LayerKind.RELU), inputs=("fc1",)),
            Node(name="fc2", layer=dense(6, 2), inputs=("relu",)),
            Node(name="softmax", layer=simple(LayerKind.SOFTMAX), inputs=("fc2",)),
        ),
        output="softmax",
        loss=LossKind.CROSS_ENTROPY,
    )


def _blobs(n=40, seed=0):
    rng = Rng(seed)
    labels = np.arange(n) % 2
    x = rng.normal((n, 4), sigma=0.3) + np.where(labels[:, None] == 1, 1.0, -1.0)
    return x, labels


# --- random streams ---------------------------------------------------------

def test_rng_is_reproducible_and_keyed():
    assert [Rng(7).next_u64() for _ in range(3)] == [Rng(7).next_u64()] * 3
    a, b = Rng(7).spawn("a"), Rng(7).spawn("b")
    assert a.next_u64() != b.next_u64()
    assert Rng(7).spawn("a").uniform(5).tolist() == Rng(7).spawn("a").uniform(5).tolist()


def test_vectorized_draws_match_sequential_draws():
    seq = Rng(123)
    expected = [seq.next_u64() for _ in range(6)]
    assert [int(v) for v in Rng(123).u64(6)] == expected


def test_spawn_does_not_advance_the_parent():
    parent = Rng(5)
    parent.spawn("child").uniform(10)
    assert parent.next_u64() == Rng(5).next_u64()


@pytest.mark.parametrize("n", [1, 2, 17, 100])
def test_permutation_is_a_permutation(n):
    assert sorted(Rng(n).permutation(n).tolist()) == list(range(n))


def test_uniform_and_integers_stay_in_range():
    rng = Rng(9)
    u = rng.uniform(1000, 2.0, 3.0)
    assert u.min() >= 2.0 and u.max() < 3.0
    k = rng.integers(1, 4, 1000)
    assert set(k.tolist()) == {1, 2, 3}


# --- linear algebra ---------------------------------------------------------

def test_jacobi_reconstructs_symmetric_matrices():
    rng = Rng(1)
    for n in (1, 2, 3, 6):
        m = rng.normal((n, n))
        a = m + m.T
        values, vectors = jacobi_eigen(a)
        assert np.allclose(vectors @ np.diag(values) @ vectors.T, a, atol=1e-10)
        assert np.allclose(vectors.T @ vectors, np.eye(n), atol=1e-10)
        assert np.all(np.diff(values) <= 0)


def test_jacobi_of_a_diagonal_matrix_is_sorted_diagonal():
    values, _ = jacobi_eigen(np.diag([1.0, 5.0, 3.0]))
    assert values.tolist() == [5.0, 3.0, 1.0]


@pytest.mark.parametrize(
    "matrix, expected",
    [
        ([[2.0, 1.0], [1.0, 2.0]], [3.0, 1.0]),
        (np.eye(3).tolist(), [1.0, 1.0, 1.0]),
    ],
)
def test_jacobi_eigenvalue_examples(matrix, expected):
    values, _ = jacobi_eigen(np.array(matrix))
    assert np.allclose(values, expected)


def test_jacobi_rejects_asymmetric_input():
    with pytest.raises(AsymmetricMatrixError):
        jacobi_eigen(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_cholesky_solves_positive_definite_systems():
    rng = Rng(2)
    m = rng.normal((5, 5))
    a = m @ m.T + 5 * np.eye(5)
    b = rng.normal(5)
    lower = cholesky(a)
    assert np.allclose(lower @ lower.T, a)
    assert np.allclose(a @ cholesky_solve(a, b), b)


@pytest.mark.parametrize(
    "diagonal, expected",
    [
        ([1.0, 1.0, 1.0], [1.0, 1.0, 1.0]),
        ([2.0, 4.0], [math.sqrt(2.0), 2.0]),
    ],
)
def test_cholesky_of_diagonal_matrices(diagonal, expected):
    assert np.allclose(cholesky(np.diag(diagonal)), np.diag(expected))


def test_cholesky_solve_rejects_asymmetric_input():
    with pytest.raises(AsymmetricMatrixError):
        cholesky_solve(np.array([[2.0, 1.0], [0.0, 2.0]]), np.array([1.0, 1.0]))


def test_cholesky_solve_accepts_rounding_level_asymmetry():
    a = np.array([[2.0, 1.0], [1.0 + 1e-13, 2.0]])
    assert np.allclose(a @ cholesky_solve(a, np.array([1.0, 1.0])), [1.0, 1.0])


def test_cholesky_rejects_singular_matrices():
    with pytest.raises(NotPositiveDefiniteError):
        cholesky(np.ones((3, 3)))


# --- parameter files --------------------------------------------------------

def test_parameter_file_round_trip_is_bit_exact(tmp_path):
    params = init_params(_classifier(), Rng(3))
    path = tmp_path / "net.cce"
    save_params(path, params)
    loaded = load_params(path)
    assert list(loaded) == list(params)
    for name in params:
        for key in params[name]:
            assert loaded[name][key].tobytes() == params[name][key].tobytes()
    assert path.read_bytes()[:4] == MAGIC


def test_bad_magic_is_reported_at_offset_zero():
    with pytest.raises(ModelFormatError) as exc:
        decode_params(b"XXXX" + encode_params({})[4:])
    assert exc.value.offset == 0


def test_invalid_utf8_layer_name_is_reported_at_its_offset():
    data = MAGIC + struct.pack("<I", 1) + struct.pack("<H", 1) + b"\xff" + struct.pack("<B", 0)
    with pytest.raises(ModelFormatError) as exc:
        decode_params(data)
    assert exc.value.offset == 10


def test_truncated_file_reports_the_offset_reached():
    data = encode_params(init_params(_classifier(), Rng(3)))
    with pytest.raises(ModelFormatError) as exc:
        decode_params(data[:-3])
    assert 0 < exc.value.offset < len(data)


def test_trailing_bytes_are_rejected():
    data = encode_params({})
    with pytest.raises(ModelFormatError) as exc:
        decode_params(data + b"\x00")
    assert exc.value.offset == len(data)


# --- training ---------------------------------------------------------------

@pytest.mark.parametrize(
    "epoch, expected",
    [
        (0, 0.1),
        (1, 0.1),
        (2, 0.05),  # first decay
        (5, 0.025),
    ],
)
def test_learning_rate_schedule(epoch, expected):
    cfg = TrainConfig(initial_lr=0.1, lr_decay_every_epochs=2, lr_decay_factor=0.5)
    assert math.isclose(learning_rate(cfg, epoch), expected)


@pytest.mark.parametrize("epoch, expected", [(0, 1e-3), (1, 1e-3), (2, 5e-4)])
def test_default_learning_rate_schedule(epoch, expected):
    assert math.isclose(learning_rate(TrainConfig(), epoch), expected)


def test_sgd_epoch_is_bitwise_deterministic_and_pure():
    net = _classifier()
    params = init_params(net, Rng(4))
    before = {n: {k: v.copy() for k, v in t.items()} for n, t in params.items()}
    cfg = TrainConfig(initial_lr=0.1, batch_size=8, seed=11)
    a, loss_a = sgd_epoch(net, params, _blobs(), cfg, 0)
    b, loss_b = sgd_epoch(net, params, _blobs(), cfg, 0)
    assert loss_a == loss_b
    for name in a:
        assert a[name]["W"].tobytes() == b[name]["W"].tobytes()
        assert params[name]["W"].tobytes() == before[name]["W"].tobytes()


def test_frozen_tensors_are_left_untouched():
    net = _classifier().with_frozen({"fc1"})
    params = init_params(net, Rng(4))
    updated, _ = sgd_epoch(net, params, _blobs(), TrainConfig(initial_lr=0.1), 0)
    assert updated["fc1"]["W"] is params["fc1"]["W"]
    assert not np.array_equal(updated["fc2"]["W"], params["fc2"]["W"])


def test_empty_dataset_is_rejected():
    net = _classifier()
    with pytest.raises(DatasetError):
        sgd_epoch(net, init_params(net, Rng(0)), (np.zeros((0, 4)), np.zeros(0, dtype=int)), TrainConfig(), 0)


def test_non_finite_loss_aborts_training():
    net = _classifier()
    params = init_params(net, Rng(0))
    params["fc1"]["W"][0, 0] = np.nan
    with pytest.raises(NonFiniteLossError):
        sgd_epoch(net, params, _blobs(), TrainConfig(), 0)


def test_fit_learns_separable_blobs():
    net = _classifier()
    result = fit(net, init_params(net, Rng(1)), _blobs(), TrainConfig(initial_lr=0.2, max_epochs=6, batch_size=4))
    assert len(result.epoch_losses) == 6
    assert result.epoch_losses[-1] < result.epoch_losses[0]
    assert not result.stopped_early


def test_fit_stops_when_validation_stops_improving():
    """With a zero learning rate the validation loss never improves after the first check."""
    net = _classifier()
    cfg = TrainConfig(initial_lr=1e-300, max_epochs=10, batch_size=40, validation_patience=2)
    result = fit(net, init_params(net, Rng(1)), _blobs(), cfg, val=_blobs(seed=1))
    assert result.stopped_early
    assert len(result.epoch_losses) == 3
    assert len(result.validation) == 3

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from eendss import tensor as T
from eendss.checkpoint import CheckpointError, array_digest, load_checkpoint, save_checkpoint
from eendss.tensor import Adam, ShapeError, Tensor

import grad_cases


@pytest.fixture(autouse=True)
def _clean_tape():
    T.get_tape().clear()
    yield
    T.get_tape().clear()


class TestGradients:
    @pytest.mark.parametrize("name", sorted(grad_cases.CASES))
    def test_matches_central_differences(self, name):
        worst = max(grad_cases.run_case(name, seed) for seed in grad_cases.SEEDS)
        assert worst < grad_cases.TOLERANCE, f"{name}: relative error {worst:.2e}"

    @pytest.mark.parametrize("seed", range(100))
    def test_random_composite_graph(self, seed):
        # up to five ops drawn at random; step 1e-3 central differences in float64
        rng = np.random.default_rng(seed)
        ops = [
            lambda a, b: a * b,
            lambda a, b: a + T.tanh(b),
            lambda a, b: T.sigmoid(a) - b,
            lambda a, b: T.exp(a * 0.5) * b,
            lambda a, b: T.matmul(a, T.transpose(b)) @ a,
        ]
        chosen = rng.integers(0, len(ops), size=rng.integers(1, 6))
        a = grad_cases.leaf(rng.uniform(-1, 1, (3, 3)))
        b = grad_cases.leaf(rng.uniform(-1, 1, (3, 3)))

        def forward():
            out = a
            for i in chosen:
                out = ops[i](out, b)
            return out

        worst = grad_cases.check_gradients(forward, [a, b], rng, step=1e-3)
        assert worst < 1e-4


class TestElementary:
    def test_mul(self):
        assert_array_equal((Tensor([1.0, 2.0]) * Tensor([3.0, 4.0])).data, [3.0, 8.0])

    def test_sigmoid_zero(self):
        assert_array_equal(T.sigmoid(Tensor([0.0])).data, [0.5])

    def test_conv_single_frame(self):
        x = np.arange(16, dtype=np.float64)
        w = np.zeros(16)
        w[0] = 1.0
        out = T.conv1d(Tensor(x.reshape(1, 1, 16)), Tensor(w.reshape(1, 1, 16)), stride=8)
        assert out.shape == (1, 1, 1)
        assert out.data[0, 0, 0] == 0.0

    @pytest.mark.parametrize("length,kernel,stride", [(16, 16, 8), (100, 16, 8), (37, 5, 3), (9, 3, 1)])
    def test_conv_matches_sliding_window(self, length, kernel, stride):
        rng = np.random.default_rng(length)
        x = rng.standard_normal(length)
        w = rng.standard_normal(kernel)
        out = T.conv1d(Tensor(x.reshape(1, 1, -1), dtype=np.float64), Tensor(w.reshape(1, 1, -1), dtype=np.float64),
                       stride=stride).data.ravel()
        naive = [x[s:s + kernel] @ w for s in range(0, length - kernel + 1, stride)]
        assert out.size == (length - kernel) // stride + 1
        assert_allclose(out, naive, rtol=1e-12, atol=1e-12)

    def test_float32_storage(self):
        assert Tensor([1, 2]).dtype == np.float32
        assert Tensor([1.0], dtype=np.float64).dtype == np.float64

    def test_shape_error_names_op(self):
        with pytest.raises(ShapeError, match="matmul"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
        with pytest.raises(ShapeError, match="add"):
            Tensor(np.ones(3)) + Tensor(np.ones(4))

    def test_deterministic_forward(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal((4, 6))
        first = T.softmax(T.tanh(Tensor(x)), axis=-1).data
        second = T.softmax(T.tanh(Tensor(x)), axis=-1).data
        assert_array_equal(first, second)


class TestBackward:
    def test_square_sum(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        T.sum(w * w).backward()
        assert_array_equal(w.grad, [2.0, 4.0])

    def test_sigmoid_slope(self):
        w = Tensor([0.0], requires_grad=True)
        T.sum(T.sigmoid(w)).backward()
        assert_allclose(w.grad, [0.25])

    def test_non_scalar_root_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (w * 2.0).backward()

    def test_gradient_shape_matches_data(self):
        w = Tensor(np.ones((2, 3)), requires_grad=True)
        T.sum(T.matmul(w, Tensor(np.ones((3, 4))))).backward()
        assert w.grad.shape == w.shape

    def test_replay_idempotent(self):
        rng = np.random.default_rng(3)
        w = Tensor(rng.standard_normal((3, 3)), requires_grad=True)
        root = T.sum(T.tanh(T.matmul(w, w)) * 1.5)
        first = T.backward(root, retain_tape=True)[w].copy()
        second = T.backward(root, retain_tape=True)[w]
        assert_array_equal(first, second)

    def test_tape_cleared_after_backward(self):
        w = Tensor([1.0], requires_grad=True)
        T.sum(w * w).backward()
        assert len(T.get_tape()) == 0

    def test_no_grad_records_nothing(self):
        w = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            _ = w * w
        assert len(T.get_tape()) == 0

    def test_each_node_visited_once(self):
        # diamond graph: y = x*x + x*x; a node visited twice would double count
        x = Tensor([3.0], requires_grad=True)
        s = x * x
        T.sum(s + s).backward()
        assert_allclose(x.grad, [12.0])


class TestAdam:
    def test_zero_gradient_leaves_parameters(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        opt = Adam([p], lr=1e-3)
        assert opt.step([np.zeros(2, dtype=np.float32)])
        assert_array_equal(p.data, [1.0, -2.0])
        assert opt.step_count == 1
        assert opt.m[0].shape == p.shape and opt.v[0].shape == p.shape

    def test_first_step_size(self):
        p = Tensor([0.5], requires_grad=True)
        opt = Adam([p], lr=1e-3)
        opt.step([np.ones(1, dtype=np.float32)])
        assert_allclose(0.5 - p.data[0], 1e-3, rtol=1e-4)

    def test_halved_lr_halves_step(self):
        def run(lr):
            p = Tensor([0.0], requires_grad=True, dtype=np.float64)
            opt = Adam([p], lr=1e-3)
            opt.step([np.ones(1)])
            before = p.data.copy()
            opt.lr = lr
            opt.step([np.ones(1)])
            return float(before[0] - p.data[0])

        assert_allclose(run(5e-4), 0.5 * run(1e-3), rtol=1e-12)

    def test_non_finite_step_skipped(self):
        p = Tensor([1.0, 2.0], requires_grad=True)
        opt = Adam([p])
        assert not opt.step([np.array([np.nan, 1.0], dtype=np.float32)])
        assert opt.skipped_steps == 1
        assert opt.step_count == 0
        assert_array_equal(p.data, [1.0, 2.0])

    def test_none_gradient_untouched(self):
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([1.0], requires_grad=True)
        opt = Adam([a, b])
        opt.step([np.ones(1, dtype=np.float32), None])
        assert a.data[0] < 1.0
        assert b.data[0] == 1.0
        assert opt.param_steps == [1, 0]

    def test_gradient_shape_checked(self):
        opt = Adam([Tensor([1.0, 2.0], requires_grad=True)])
        with pytest.raises(ShapeError):
            opt.step([np.ones(3, dtype=np.float32)])

    def test_clip_grad_norm(self):
        p = Tensor([0.0, 0.0], requires_grad=True)
        p.grad = np.array([3.0, 4.0], dtype=np.float32)
        assert T.clip_grad_norm([p], 1.0) == pytest.approx(5.0)
        assert_allclose(np.linalg.norm(p.grad), 1.0, rtol=1e-6)


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        arrays = {"a.w": rng.standard_normal((3, 4)).astype(np.float32), "b": np.zeros(2, np.float32)}
        path = save_checkpoint(tmp_path / "m.ckpt", arrays, {"n": 3}, seed=7)
        loaded, header = load_checkpoint(path)
        assert header["hyperparameters"] == {"n": 3} and header["seed"] == 7
        for name in arrays:
            assert_array_equal(loaded[name], arrays[name])
        assert array_digest(loaded) == array_digest(arrays)

    def test_digest_prefix(self):
        arrays = {"x.a": np.ones(2, np.float32), "y.a": np.ones(2, np.float32)}
        changed = dict(arrays, **{"y.a": np.zeros(2, np.float32)})
        assert array_digest(arrays, "x.") == array_digest(changed, "x.")
        assert array_digest(arrays, "y.") != array_digest(changed, "y.")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        path = save_checkpoint(tmp_path / "m.ckpt", {"w": np.ones(100, np.float32)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

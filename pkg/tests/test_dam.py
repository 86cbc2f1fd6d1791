import io
import math
import struct

import numpy as np
import pytest

from densemem import dam
from densemem import numerics as nx
from densemem.dam import StaticMemory, dam_forward
from densemem.errors import DimensionError, FormatError, ParameterError
from densemem.numerics import Tensor, grad_check


def _random_memory(rng, m=4, d=8):
    return StaticMemory(Tensor(rng.standard_normal((m, d))), Tensor(np.eye(d) + 0.3 * rng.standard_normal((d, d))))


def _weighted_sum(z, rng):
    """Scalar read-out with random weights so the gradient check is informative."""
    return nx.sum(nx.mul(z, Tensor(rng.standard_normal(z.shape))))


class TestForward:
    def test_single_slot_ignores_query(self):
        rng = np.random.default_rng(0)
        mem = _random_memory(rng, m=1, d=5)
        v = mem.values().data[0]
        z = dam_forward(mem, rng.standard_normal((6, 5)))
        for row in z.data:
            np.testing.assert_array_equal(row, v)

    def test_saturates_on_scaled_key(self):
        rng = np.random.default_rng(1)
        q, _ = np.linalg.qr(rng.standard_normal((16, 4)))
        mem = StaticMemory(Tensor(q.T), Tensor(np.eye(16)))
        K, V = mem.keys().data, mem.values().data
        z = dam_forward(mem, 100.0 * K[:1])
        assert np.max(np.abs(z.data[0] - V[0])) < 1e-6

    def test_rows_are_convex_combinations(self):
        rng = np.random.default_rng(2)
        mem = _random_memory(rng)
        w = dam.attention_weights(mem, 3 * rng.standard_normal((5, 8)))
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        z = dam_forward(mem, Tensor(np.zeros((1, 8))))
        np.testing.assert_allclose(z.data[0], mem.values().data.mean(axis=0), rtol=1e-14, atol=1e-14)

    def test_query_width_checked(self):
        with pytest.raises(DimensionError):
            dam_forward(_random_memory(np.random.default_rng(3)), np.ones((2, 7)))

    def test_tied_projection(self):
        rng = np.random.default_rng(4)
        mem = _random_memory(rng)
        np.testing.assert_array_equal(mem.keys().data, mem.xi.data @ mem.W_k.data.T)
        np.testing.assert_array_equal(mem.values().data, mem.xi.data @ mem.W_k.data)
        assert set(mem.parameters()) == {"xi", "W_k"}


class TestGradients:
    @pytest.mark.parametrize("seed", range(3))
    def test_wrt_query(self, seed):
        rng = np.random.default_rng(seed)
        mem = _random_memory(rng)
        w = rng.standard_normal((3, 8))
        f = lambda Q: nx.sum(nx.mul(dam_forward(mem, Q), Tensor(w)))
        assert grad_check(f, rng.standard_normal((3, 8))) < 1e-5

    @pytest.mark.parametrize("seed", range(3))
    def test_wrt_slots(self, seed):
        rng = np.random.default_rng(seed)
        W_k = np.eye(8) + 0.3 * rng.standard_normal((8, 8))
        Q, w = rng.standard_normal((3, 8)), rng.standard_normal((3, 8))
        f = lambda xi: nx.sum(nx.mul(dam_forward(StaticMemory(xi, Tensor(W_k)), Tensor(Q)), Tensor(w)))
        assert grad_check(f, rng.standard_normal((4, 8))) < 1e-5

    @pytest.mark.parametrize("seed", range(3))
    def test_wrt_tied_projection(self, seed):
        # W_k reaches the output through both K and V; the check only passes
        # if both contributions are accumulated.
        rng = np.random.default_rng(seed)
        xi = rng.standard_normal((4, 8))
        Q, w = rng.standard_normal((3, 8)), rng.standard_normal((3, 8))
        f = lambda W: nx.sum(nx.mul(dam_forward(StaticMemory(Tensor(xi), W), Tensor(Q)), Tensor(w)))
        assert grad_check(f, np.eye(8) + 0.3 * rng.standard_normal((8, 8))) < 1e-5

    def test_projection_gradient_is_sum_of_both_paths(self):
        rng = np.random.default_rng(9)
        xi = Tensor(rng.standard_normal((4, 6)))
        W0 = np.eye(6) + 0.2 * rng.standard_normal((6, 6))
        Q, w = Tensor(rng.standard_normal((3, 6))), Tensor(rng.standard_normal((3, 6)))

        def grad_of(use_k, use_v):
            Wk = Tensor(W0, requires_grad=use_k)
            Wv = Tensor(W0, requires_grad=use_v)
            K = nx.matmul(xi, nx.transpose(Wk))
            V = nx.matmul(xi, Wv)
            att = nx.softmax_rows(nx.scale(nx.matmul(Q, nx.transpose(K)), 1 / math.sqrt(6)))
            nx.backward(nx.sum(nx.mul(nx.matmul(att, V), w)))
            return Wk.grad if use_k else Wv.grad

        mem = StaticMemory(Tensor(xi.data), Tensor(W0, requires_grad=True))
        nx.backward(nx.sum(nx.mul(dam_forward(mem, Q), w)))
        np.testing.assert_allclose(mem.W_k.grad, grad_of(True, False) + grad_of(False, True), rtol=1e-12, atol=1e-14)


class TestDiagnostics:
    def test_single_slot(self):
        mem = _random_memory(np.random.default_rng(0), m=1, d=4)
        diag = dam.dam_diagnostics(mem, np.ones((3, 4)))
        np.testing.assert_array_equal(diag.attention_entropy, 0.0)
        assert diag.effective_states == 1

    def test_identical_slots_form_one_state(self):
        row = np.random.default_rng(1).standard_normal(6)
        mem = StaticMemory(Tensor(np.tile(row, (5, 1))), Tensor(np.eye(6)))
        assert dam.dam_diagnostics(mem, np.ones((2, 6))).effective_states == 1

    def test_uniform_query_has_max_entropy(self):
        mem = StaticMemory(Tensor(np.eye(8)[:5]), Tensor(np.eye(8)))
        diag = dam.dam_diagnostics(mem, np.zeros((2, 8)))
        np.testing.assert_allclose(diag.attention_entropy, math.log(5), rtol=1e-14)
        assert diag.effective_states == 5

    def test_bounds(self):
        rng = np.random.default_rng(2)
        mem = _random_memory(rng, m=6)
        diag = dam.dam_diagnostics(mem, 4 * rng.standard_normal((10, 8)))
        assert np.all((diag.attention_entropy >= 0) & (diag.attention_entropy <= math.log(6)))
        assert 1 <= diag.effective_states <= 6

    def test_near_duplicates_merge(self):
        rows = np.array([[1.0, 0.0], [1.0 + 1e-6, 0.0], [0.0, 1.0]])
        assert dam.count_clusters(rows, 1e-3) == 2


class TestInit:
    def test_deterministic(self):
        a, b = dam.init_static_memory(8, 16, seed=3), dam.init_static_memory(8, 16, seed=3)
        np.testing.assert_array_equal(a.xi.data, b.xi.data)
        np.testing.assert_array_equal(a.W_k.data, b.W_k.data)
        c = dam.init_static_memory(8, 16, seed=4)
        assert not np.array_equal(a.xi.data, c.xi.data)

    def test_identity_scheme(self):
        mem = dam.init_static_memory(4, 8, seed=0, scheme="identity_Wk")
        np.testing.assert_array_equal(mem.keys().data, mem.xi.data)
        np.testing.assert_array_equal(mem.values().data, mem.xi.data)

    @pytest.mark.parametrize("d", [8, 64, 256])
    def test_row_norms(self, d):
        for seed in range(10):
            mem = dam.init_static_memory(8, d, seed=seed)
            assert 0.5 <= np.linalg.norm(mem.xi.data, axis=1).mean() <= 2.0

    def test_default_projection_near_identity(self):
        mem = dam.init_static_memory(8, 32, seed=0)
        assert np.max(np.abs(mem.W_k.data - np.eye(32))) < 0.1

    def test_bad_arguments(self):
        with pytest.raises(ParameterError):
            dam.init_static_memory(0, 8)
        with pytest.raises(ParameterError):
            dam.init_static_memory(4, 8, scheme="orthogonal")


class TestStatics:
    def test_keys_values_independent_of_queries(self):
        rng = np.random.default_rng(5)
        mem = dam.init_static_memory(8, 16, seed=1)
        t1, t2 = {}, {}
        dam_forward(mem, rng.standard_normal((4, 16)), trace=t1)
        dam_forward(mem, 10 * rng.standard_normal((7, 16)), trace=t2)
        assert t1["K"].tobytes() == t2["K"].tobytes()
        assert t1["V"].tobytes() == t2["V"].tobytes()

    def test_forward_leaves_parameters_untouched(self):
        mem = dam.init_static_memory(4, 8, seed=2)
        before = (mem.xi.data.tobytes(), mem.W_k.data.tobytes())
        dam_forward(mem, np.ones((3, 8)))
        assert (mem.xi.data.tobytes(), mem.W_k.data.tobytes()) == before

    @pytest.mark.parametrize("seed", range(5))
    def test_slot_permutation_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        mem = _random_memory(rng, m=6)
        perm = rng.permutation(6)
        shuffled = StaticMemory(Tensor(mem.xi.data[perm]), Tensor(mem.W_k.data))
        Q = rng.standard_normal((5, 8))
        np.testing.assert_allclose(dam_forward(shuffled, Q).data, dam_forward(mem, Q).data, rtol=0, atol=1e-12)


class TestPersistence:
    def test_round_trip(self, tmp_path):
        mem = dam.init_static_memory(5, 7, seed=8)
        path = tmp_path / "mem.damw"
        dam.save_static_memory(mem, path)
        back = dam.load_static_memory(path)
        assert back.xi.data.tobytes() == mem.xi.data.tobytes()
        assert back.W_k.data.tobytes() == mem.W_k.data.tobytes()

    def test_layout(self):
        mem = StaticMemory(Tensor([[1.0, 2.0]]), Tensor([[3.0, 4.0], [5.0, 6.0]]))
        buf = io.BytesIO()
        dam.save_static_memory(mem, buf)
        expected = b"DAMW" + struct.pack("<HII", 1, 1, 2) + struct.pack("<6d", 1, 2, 3, 4, 5, 6)
        assert buf.getvalue() == expected

    def test_bad_magic(self):
        with pytest.raises(FormatError, match="magic"):
            dam.load_static_memory(io.BytesIO(b"DAMX" + struct.pack("<HII", 1, 1, 1) + bytes(16)))

    def test_bad_version(self):
        with pytest.raises(FormatError, match="version"):
            dam.load_static_memory(io.BytesIO(b"DAMW" + struct.pack("<HII", 9, 1, 1) + bytes(16)))

    def test_truncated(self):
        with pytest.raises(FormatError):
            dam.load_static_memory(io.BytesIO(b"DAMW" + struct.pack("<HII", 1, 2, 2) + bytes(8)))

import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qlower.build import GraphBuilder
from qlower.errors import (
    LambdaUnderflowWarning,
    NoLeadingLinearError,
    NotFoldableError,
    PassOrderError,
    ThresholdTableError,
)
from qlower.fixtures import lenet_tiny, random_inputs
from qlower.graph import ID, QD, Op
from qlower.interpreter import kernel_threshold_act, run
from qlower.lowering import (
    add_input_bias,
    bn_quantizer,
    bn_thresholds,
    fold_bn,
    harden_weights,
    integerize,
    lower,
    merge_bn_thresholds,
    set_deployment,
    symmetric_quantize,
    weight_integer_image,
)
from qlower.pact import (
    calibrate,
    fq_weight_forward,
    to_fakequantized,
    weight_clip_bounds,
    weight_params,
)
from qlower.tensor import QuantSpec, as_integer, as_real, quantize_linear


def fq(g, xs, bits_a=8, bits_w=8):
    return to_fakequantized(calibrate(g, xs), bits_a, bits_w)


@pytest.fixture(scope="module")
def lenet_fq():
    return fq(lenet_tiny(0), random_inputs(8, 1))


def preset_fq(g, bits_a=8, bits_w=8, **w_bounds):
    """FakeQuantize keeping the activation bounds already on the graph."""
    nodes = []
    for n in g.nodes.values():
        if n.is_linear:
            a, b = w_bounds.get(n.id, weight_clip_bounds(n.attrs["weight"]))
            n = n.with_attrs(w_alpha=a, w_beta=b)
        nodes.append(n)
    return to_fakequantized(g.evolve(nodes), bits_a, bits_w)


def fc_bn_act(w=1.0, b=0.0, gamma=2.0, sigma=4.0, mu=1.0, beta=0.5, **act):
    g = GraphBuilder((1,))
    x = g.fc(g.input, [[w]], [b], node_id="fc")
    x = g.bn(x, gamma, sigma, mu, beta, node_id="bn")
    g.output(g.act(x, node_id="act", **act))
    return g.build()


class TestFoldBn:
    def test_example(self):
        g = fold_bn(fc_bn_act())
        assert g["fc"].attrs["weight"].tolist() == [[0.5]]
        assert g["fc"].attrs["bias"].tolist() == [0.0]
        assert "bn" not in g.nodes and g["act"].inputs == ("fc",)

    def test_identity_bn_bitwise(self, rng):
        g = fc_bn_act(w=0.37, b=0.11, gamma=1.0, sigma=1.0, mu=0.0, beta=0.0)
        folded = fold_bn(g)
        for _ in range(20):
            x = as_real(rng.uniform(-1, 1, 1))
            assert run(g, x)[0].tobytes() == run(folded, x)[0].tobytes()

    def test_bn_after_add(self):
        g = GraphBuilder((1,))
        a = g.act(g.fc(g.input, [[1.0]]))
        s = g.add(a, g.act(g.fc(a, [[1.0]])))
        g.output(g.act(g.bn(s, 1.0, 1.0, 0.0, 0.0)))
        with pytest.raises(NotFoldableError):
            fold_bn(g.build())

    def test_equivalence(self, rng):
        g = lenet_tiny(0)
        folded = fold_bn(g)
        for x in random_inputs(10, 3):
            a, b = run(g, x)[0], run(folded, x)[0]
            assert np.allclose(a, b, rtol=1e-9, atol=1e-12)


class TestBnQuantizer:
    def test_kappa_two(self):
        eps, q = symmetric_quantize(np.array([2.0]), 8)
        assert eps == 4 / 255 and q.tolist() == [127]
        assert abs(2.0 - eps * 127) <= eps

    def test_kappa_on_lattice(self):
        spec = QuantSpec(eps=0.5, alpha=0.0, bits=8, lo=-128, hi=127)
        q = quantize_linear(as_real([1.5]), spec)
        assert q.tolist() == [3] and 0.5 * q[0] == 1.5

    def test_zero_lambda(self):
        assert symmetric_quantize(np.zeros(3), 8)[1].tolist() == [0, 0, 0]

    def test_attaches_params(self, lenet_fq):
        g = bn_quantizer(lenet_fq)
        a = g["bn1"].attrs
        kappa = np.asarray(a["gamma"]) / np.asarray(a["sigma"])
        assert np.all(np.abs(kappa - a["eps_kappa"] * a["q_kappa"]) <= a["eps_kappa"])

    def test_needs_fake_quantized(self):
        with pytest.raises(PassOrderError):
            bn_quantizer(lenet_tiny(0))


class TestHarden:
    def test_idempotent(self, lenet_fq):
        once = harden_weights(lenet_fq)
        assert harden_weights(once) == once

    def test_output_unchanged(self, lenet_fq):
        hard = harden_weights(lenet_fq)
        for x in random_inputs(5, 9):
            assert run(lenet_fq, x)[0].tobytes() == run(hard, x)[0].tobytes()


def deployed(g, eps_in=1 / 255):
    return set_deployment(harden_weights(bn_quantizer(g)), eps_in)


class TestSetDeployment:
    def test_linear_quantum(self):
        g = GraphBuilder((2,))
        g.output(g.act(g.fc(g.input, [[-1.0, 1.0]], node_id="fc")))
        g = deployed(fq(g.build(), [as_real([1.0, 0.5])]))
        assert g.representation == QD
        assert g["fc"].out_spec.eps == pytest.approx(2 / 255**2, rel=1e-15)

    def test_add_reference_branch(self):
        g = GraphBuilder((1,))
        a1 = g.act(g.fc(g.input, [[1.0]]), node_id="a1", beta_y=25.5)
        a2 = g.act(g.fc(a1, [[0.5]]), node_id="a2", beta_y=12.75)
        g.output(g.add(a1, a2, node_id="sum"))
        g = deployed(preset_fq(g.build()))
        assert g["a1"].out_spec.eps == pytest.approx(0.1)
        assert g["a2"].out_spec.eps == pytest.approx(0.05)
        assert g["sum"].out_spec.eps == g["a1"].out_spec.eps

    def test_requires_earlier_passes(self, lenet_fq):
        with pytest.raises(PassOrderError):
            set_deployment(lenet_fq)


class TestAddInputBias:
    def test_zero_offset(self, lenet_fq):
        assert add_input_bias(lenet_fq, 0.0) is lenet_fq

    def test_one_by_one_conv(self, rng):
        g = GraphBuilder((1, 3, 3))
        g.output(g.conv(g.input, np.full((1, 1, 1, 1), 2.0), node_id="conv"))
        g = g.build()
        shifted = add_input_bias(g, -0.5)
        assert shifted["conv"].attrs["bias"].tolist() == [-1.0]
        for _ in range(100):
            t = as_real(rng.uniform(-0.5, 0.5, (1, 3, 3)))
            want = run(g, t)[0]
            got = run(shifted, as_real(t + 0.5))[0]
            assert np.allclose(got, want, rtol=1e-9, atol=1e-12)

    def test_input_into_add(self):
        g = GraphBuilder((1,))
        g.output(g.add(g.input, g.act(g.fc(g.input, [[1.0]]))))
        with pytest.raises(NoLeadingLinearError):
            add_input_bias(g.build(), -0.5)


class TestIntegerize:
    def test_weight_image_on_lattice(self):
        g = GraphBuilder((1,))
        g.output(g.act(g.fc(g.input, [[-4 / 3]], node_id="fc"), beta_y=1.0))
        g = preset_fq(g.build(), bits_w=2, fc=(-1.0, 1.0))
        assert weight_params(g["fc"]).eps_w == pytest.approx(2 / 3)
        assert weight_integer_image(g["fc"]).tolist() == [[-2]]

    def test_activation_requant(self):
        g = GraphBuilder((1,))
        g.output(g.act(g.fc(g.input, [[0.3]], node_id="fc"), node_id="act", beta_y=1.5))
        g = preset_fq(g.build(), bits_a=4, bits_w=2, fc=(-0.3, 0.3))
        g = integerize(deployed(g, eps_in=0.1))
        rq = g["act"].attrs["requant"]
        assert (rq.d, rq.m) == (7, 25)
        assert (25 * 37) >> 7 == 7

    def test_lambda_underflow(self):
        g = fq(fc_bn_act(w=1.0, b=0.0, gamma=1.0, sigma=1.0, mu=0.0, beta=1e-6), [as_real([0.5])])
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = integerize(deployed(g))
        assert any(issubclass(w.category, LambdaUnderflowWarning) for w in caught)
        assert out["bn"].attrs["lambda_requant"].m == 0

    def test_all_integer(self, lenet_fq):
        g = integerize(lower(lenet_fq))
        assert g.representation == ID
        for n in g:
            for v in n.attrs.values():
                if isinstance(v, np.ndarray):
                    assert v.dtype == np.int64, n.id

    def test_requires_quantized_deployable(self, lenet_fq):
        with pytest.raises(PassOrderError):
            integerize(lenet_fq)


class TestThresholds:
    def test_example_table(self):
        th = bn_thresholds(1.0, 2.0, 0.1, 0.5, 0.01, 0.25, 4)
        assert th.tolist() == [[-90, -40, 10, 60, 110]]
        assert kernel_threshold_act(as_integer([[25]]), th).tolist() == [[2]]

    def test_identity(self):
        th = bn_thresholds(1.0, 1.0, 0.0, 0.0, 0.125, 0.125, 7)
        assert th.tolist() == [list(range(8))]
        q = as_integer(np.arange(-5, 15)[None, :])
        assert np.array_equal(kernel_threshold_act(q, th), np.clip(q, 0, 7))

    @given(st.floats(0.1, 4), st.floats(0.1, 4), st.floats(-2, 2), st.floats(-2, 2),
           st.integers(1, 4))
    def test_table_monotone(self, gamma, sigma, mu, beta, bits):
        th = bn_thresholds(gamma, sigma, mu, beta, 0.01, 1.0 / (2**bits - 1), 2**bits - 1)
        assert np.all(np.diff(th, axis=1) >= 0)

    def test_merge_keeps_activation_id(self, lenet_fq):
        g = lower(lenet_fq, "thresholds")
        assert g["relu1"].op == Op.THRESHOLD_ACTIVATION
        assert g["relu1"].inputs == ("conv1",) and "bn1" not in g.nodes

    def test_selector(self, lenet_fq):
        g = lower(lenet_fq, "thresholds", threshold_selector={"relu2"})
        assert g["relu1"].op == Op.ACTIVATION and g["relu2"].op == Op.THRESHOLD_ACTIVATION

    def test_too_many_bits(self):
        g = fq(lenet_tiny(0), random_inputs(4, 1), bits_a=9)
        with pytest.raises(ThresholdTableError):
            lower(g, "thresholds")

    def test_needs_quantized_deployable(self, lenet_fq):
        with pytest.raises(PassOrderError):
            merge_bn_thresholds(lenet_fq)


def test_fold_after_bn_quantizer_rejected(lenet_fq):
    with pytest.raises(PassOrderError):
        fold_bn(bn_quantizer(lenet_fq))


def test_unknown_strategy(lenet_fq):
    with pytest.raises(ValueError):
        lower(lenet_fq, "magic")


def test_fq_weights_fixed_by_harden(lenet_fq):
    n = harden_weights(lenet_fq)["conv1"]
    w = n.attrs["weight"]
    assert np.array_equal(fq_weight_forward(w, weight_params(n)), w)

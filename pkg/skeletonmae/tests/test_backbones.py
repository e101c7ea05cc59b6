"""
Unit tests for the graph backbones
Tests GIN/GCN/GAT layers against per-node loop oracles, permutation equivariance and gradients
"""

import numpy as np
import pytest
import torch

from skeletonmae.pipeline.backbones import (
    BACKBONES,
    GAT,
    GAT_NEGATIVE_SLOPE,
    GCN,
    GIN,
    NO_ACTIVATION,
    PRELU,
    GraphLayerConfig,
    GraphTopology,
    build_encoder,
    build_layer,
    stack_forward,
)
from skeletonmae.pipeline.errors import AdjacencyError, LayerConfigError, ShapeMismatchError
from skeletonmae.pipeline.numerics import finite_difference_check, verification_mode
from skeletonmae.pipeline.skeleton import Adjacency, build_coco17_layout, build_layout, normalize_adjacency


def randomize(module, rng):
    """Overwrite every parameter (biases, eps and slopes included) with random values."""
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(torch.as_tensor(rng.normal(scale=0.5, size=tuple(p.shape))))


def make_layer(kind, in_dim, out_dim, rng, activation=PRELU, heads=2):
    with verification_mode():
        config = GraphLayerConfig(kind=kind, in_dim=in_dim, out_dim=out_dim, activation=activation,
                                  gat_heads=heads if kind == GAT else 1)
        layer = build_layer(config)
    randomize(layer, rng)
    return layer


def prelu(x, slope):
    return x if x >= 0 else slope * x


def naive_activation(values, act):
    if act.kind == NO_ACTIVATION:
        return values
    slope = float(act.slope) if act.slope is not None else 0.0
    return np.array([prelu(v, slope) for v in values])


def naive_linear(v, linear):
    w = linear.weight.detach().numpy()
    out = np.array([sum(v[i] * w[i, o] for i in range(w.shape[0])) for o in range(w.shape[1])])
    if linear.bias is not None:
        out = out + linear.bias.detach().numpy()
    return out


def naive_gin(layer, h, raw):
    eps = float(layer.eps)
    out = []
    for v in range(h.shape[0]):
        agg = (1.0 + eps) * h[v]
        for u in range(h.shape[0]):
            if raw[v, u] != 0:
                agg = agg + h[u]
        hidden = naive_activation(naive_linear(agg, layer.lin1), layer.hidden_act)
        out.append(naive_activation(naive_linear(hidden, layer.lin2), layer.act))
    return np.stack(out)


def naive_gcn(layer, h, normalized):
    out = []
    for v in range(h.shape[0]):
        agg = np.zeros(h.shape[1])
        for u in range(h.shape[0]):
            agg = agg + normalized[v, u] * h[u]
        out.append(naive_activation(naive_linear(agg, layer.linear), layer.act))
    return np.stack(out)


def naive_gat(layer, h, raw):
    n = h.shape[0]
    heads, width = layer.heads, layer.head_dim
    z = np.stack([naive_linear(h[v], layer.linear) for v in range(n)]).reshape(n, heads, width)
    att_src = layer.att_src.detach().numpy()
    att_dst = layer.att_dst.detach().numpy()
    out = np.zeros((n, heads, width))
    for i in range(n):
        neighbours = [j for j in range(n) if j == i or raw[i, j] != 0]
        for k in range(heads):
            scores = []
            for j in neighbours:
                e = float(att_dst[k] @ z[i, k] + att_src[k] @ z[j, k])
                scores.append(e if e >= 0 else GAT_NEGATIVE_SLOPE * e)
            scores = np.exp(np.array(scores) - max(scores))
            alpha = scores / scores.sum()
            for a, j in zip(alpha, neighbours):
                out[i, k] += a * z[j, k]
    out = out.reshape(n, heads * width) + layer.bias.detach().numpy()
    return np.stack([naive_activation(row, layer.act) for row in out])


class TestLayerExamples:
    """Test suite for hand-evaluated layer outputs"""

    def identity_linear(self, linear):
        with torch.no_grad():
            linear.weight.copy_(torch.eye(linear.in_dim, dtype=linear.weight.dtype))
            if linear.bias is not None:
                linear.bias.zero_()

    def test_gin_two_node(self):
        """Test GIN with identity MLP sums self and neighbour"""
        layout = build_layout(2, [(0, 1)], {0: [0, 1]})
        with verification_mode():
            layer = build_layer(GraphLayerConfig(kind=GIN, in_dim=2, out_dim=2, activation=NO_ACTIVATION))
        self.identity_linear(layer.lin1)
        self.identity_linear(layer.lin2)
        h = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        out = layer(h, layout.adjacency())
        assert out.tolist() == [[1.0, 1.0], [1.0, 1.0]]

    def test_gin_edgeless(self):
        """Test GIN with identity MLP and no edges returns the input"""
        layout = build_layout(3, [], {0: [0, 1, 2]})
        with verification_mode():
            layer = build_layer(GraphLayerConfig(kind=GIN, in_dim=2, out_dim=2, activation=NO_ACTIVATION))
        self.identity_linear(layer.lin1)
        self.identity_linear(layer.lin2)
        h = torch.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], dtype=torch.float64)
        assert torch.equal(layer(h, layout.adjacency()), h)

    def test_gcn_two_node(self):
        """Test GCN averages the two nodes of a single edge"""
        layout = build_layout(2, [(0, 1)], {0: [0, 1]})
        with verification_mode():
            layer = build_layer(GraphLayerConfig(kind=GCN, in_dim=2, out_dim=2, activation=NO_ACTIVATION))
        self.identity_linear(layer.linear)
        h = torch.tensor([[2.0, 0.0], [0.0, 2.0]], dtype=torch.float64)
        out = layer(h, normalize_adjacency(layout.adjacency()))
        assert torch.allclose(out, torch.ones(2, 2, dtype=torch.float64), atol=1e-12)

    def test_gcn_single_node(self):
        """Test GCN with identity weight on one node returns the input"""
        layout = build_layout(1, [], {0: [0]})
        with verification_mode():
            layer = build_layer(GraphLayerConfig(kind=GCN, in_dim=3, out_dim=3, activation=NO_ACTIVATION))
        self.identity_linear(layer.linear)
        h = torch.tensor([[1.5, -2.0, 0.25]], dtype=torch.float64)
        assert torch.equal(layer(h, normalize_adjacency(layout.adjacency())), h)

    def test_gat_single_node(self):
        """Test GAT on one node is a linear map"""
        layout = build_layout(1, [], {0: [0]})
        layer = make_layer(GAT, 3, 4, np.random.default_rng(0), activation=NO_ACTIVATION, heads=1)
        h = torch.tensor([[1.0, 2.0, -1.0]], dtype=torch.float64)
        expected = h @ layer.linear.weight + layer.bias
        assert torch.allclose(layer(h, layout.adjacency()), expected, atol=1e-12)

    def test_gat_uniform_attention(self):
        """Test equal attention logits average the projected neighbourhood"""
        layout = build_layout(2, [(0, 1)], {0: [0, 1]})
        layer = make_layer(GAT, 2, 2, np.random.default_rng(1), activation=NO_ACTIVATION, heads=1)
        with torch.no_grad():
            layer.att_src.zero_()
            layer.att_dst.zero_()
            layer.bias.zero_()
        h = torch.tensor([[1.0, 0.0], [0.0, 3.0]], dtype=torch.float64)
        z = h @ layer.linear.weight
        out = layer(h, layout.adjacency())
        assert torch.allclose(out, z.mean(dim=0).expand(2, 2), atol=1e-12)


class TestLoopOracles:
    """Test suite comparing vectorized layers against explicit loops"""

    @pytest.fixture
    def topology(self):
        return GraphTopology.from_layout(build_coco17_layout())

    @pytest.mark.parametrize("instance", range(20))
    def test_gin(self, topology, instance):
        """Test GIN matches the per-node loop"""
        rng = np.random.default_rng(instance)
        layer = make_layer(GIN, 8, 6, rng)
        h = rng.normal(size=(17, 8))
        out = layer(torch.as_tensor(h), topology.raw).detach().numpy()
        assert np.abs(out - naive_gin(layer, h, topology.raw.matrix.numpy())).max() < 1e-6

    @pytest.mark.parametrize("instance", range(20))
    def test_gcn(self, topology, instance):
        """Test GCN matches the per-node loop"""
        rng = np.random.default_rng(100 + instance)
        layer = make_layer(GCN, 8, 6, rng)
        h = rng.normal(size=(17, 8))
        out = layer(torch.as_tensor(h), topology.normalized).detach().numpy()
        assert np.abs(out - naive_gcn(layer, h, topology.normalized.matrix.numpy())).max() < 1e-6

    @pytest.mark.parametrize("instance", range(20))
    def test_gat(self, topology, instance):
        """Test GAT matches the per-edge loop"""
        rng = np.random.default_rng(200 + instance)
        layer = make_layer(GAT, 8, 6, rng, heads=2)
        h = rng.normal(size=(17, 8))
        out = layer(torch.as_tensor(h), topology.raw).detach().numpy()
        assert np.abs(out - naive_gat(layer, h, topology.raw.matrix.numpy())).max() < 1e-6


class TestEquivariance:
    """Test suite for joint-permutation equivariance"""

    @pytest.mark.parametrize("kind", BACKBONES)
    def test_layers(self, kind):
        """Test layer(P h, P A P^T) == P layer(h, A) over 20 permutations"""
        rng = np.random.default_rng(7)
        layer = make_layer(kind, 8, 6, rng)
        raw = build_coco17_layout().adjacency()
        topology = GraphTopology.from_adjacency(raw)
        h = torch.as_tensor(rng.normal(size=(17, 8)))
        reference = layer(h, topology.for_kind(kind))
        for _ in range(20):
            perm = torch.as_tensor(rng.permutation(17))
            permuted = GraphTopology.from_adjacency(Adjacency(raw.matrix[perm][:, perm]))
            out = layer(h[perm], permuted.for_kind(kind))
            assert float((out - reference[perm]).abs().max()) < 1e-6

    @pytest.mark.parametrize("kind", BACKBONES)
    def test_stack(self, kind):
        """Test a 3-layer encoder stack is equivariant"""
        rng = np.random.default_rng(11)
        with verification_mode():
            stack = build_encoder(kind, 8, 8, 3, gat_heads=2 if kind == GAT else 1)
        randomize(stack, rng)
        raw = build_coco17_layout().adjacency()
        h = torch.as_tensor(rng.normal(size=(17, 8)))
        reference = stack_forward(stack, h, raw)
        for _ in range(20):
            perm = torch.as_tensor(rng.permutation(17))
            out = stack_forward(stack, h[perm], Adjacency(raw.matrix[perm][:, perm]))
            assert float((out - reference[perm]).abs().max()) < 1e-6


class TestGradients:
    """Test suite for layer gradients"""

    @pytest.mark.parametrize("kind", BACKBONES)
    @pytest.mark.parametrize("instance", range(10))
    def test_input_gradient_oracle(self, kind, instance):
        """Test autograd against central differences for a layer-then-weighted-sum"""
        rng = np.random.default_rng(1000 + instance)
        layer = make_layer(kind, 8, 4, rng)
        topology = GraphTopology.from_layout(build_coco17_layout())
        weights = torch.as_tensor(rng.normal(size=(17, 4)))
        at = torch.as_tensor(rng.normal(size=(17, 8)))
        error = finite_difference_check(lambda h: (layer(h, topology.for_kind(kind)) * weights).sum(), at)
        assert error < 1e-4

    @pytest.mark.parametrize("kind", BACKBONES)
    def test_no_dead_parameters(self, kind):
        """Test every parameter receives a nonzero gradient"""
        rng = np.random.default_rng(3)
        layer = make_layer(kind, 8, 6, rng)
        topology = GraphTopology.from_layout(build_coco17_layout())
        out = layer(torch.as_tensor(rng.normal(size=(17, 8))), topology.for_kind(kind))
        (out * torch.as_tensor(rng.normal(size=(17, 6)))).sum().backward()
        for name, p in layer.named_parameters():
            assert p.grad is not None and float(p.grad.abs().sum()) > 0, name


class TestEncoderStack:
    """Test suite for stacked encoders"""

    def test_shape(self):
        """Test depth 3 at width 64 keeps 17 x 64"""
        stack = build_encoder(GIN, 64, 64, 3)
        out = stack_forward(stack, torch.randn(17, 64), build_coco17_layout().adjacency())
        assert out.shape == (17, 64)
        assert stack.depth == 3

    @pytest.mark.parametrize("kind", BACKBONES)
    def test_composition(self, kind):
        """Test a 2-layer stack equals its layers applied in order"""
        stack = build_encoder(kind, 8, 8, 2, gat_heads=2 if kind == GAT else 1)
        topology = GraphTopology.from_layout(build_coco17_layout())
        x = torch.randn(5, 17, 8)
        adjacency = topology.for_kind(kind)
        manual = stack.layers[1](stack.layers[0](x, adjacency), adjacency)
        assert torch.equal(stack(x, topology), manual)

    def test_wrong_adjacency_form(self):
        """Test each layer kind refuses the other adjacency form"""
        topology = GraphTopology.from_layout(build_coco17_layout())
        h = torch.randn(17, 4)
        gin = build_layer(GraphLayerConfig(kind=GIN, in_dim=4, out_dim=4))
        gcn = build_layer(GraphLayerConfig(kind=GCN, in_dim=4, out_dim=4))
        gat = build_layer(GraphLayerConfig(kind=GAT, in_dim=4, out_dim=4))
        with pytest.raises(AdjacencyError):
            gin(h, topology.normalized)
        with pytest.raises(AdjacencyError):
            gcn(h, topology.raw)
        with pytest.raises(AdjacencyError):
            gat(h, topology.normalized)

    def test_feature_shape_mismatch(self):
        """Test a wrong feature width raises ShapeMismatchError"""
        layer = build_layer(GraphLayerConfig(kind=GIN, in_dim=4, out_dim=4))
        with pytest.raises(ShapeMismatchError):
            layer(torch.randn(17, 5), build_coco17_layout().adjacency())

    def test_invalid_configs(self):
        """Test invalid layer and stack configurations"""
        with pytest.raises(LayerConfigError):
            GraphLayerConfig(kind=GAT, in_dim=4, out_dim=6, gat_heads=4)
        with pytest.raises(LayerConfigError):
            GraphLayerConfig(kind="sage", in_dim=4, out_dim=4)
        with pytest.raises(LayerConfigError):
            build_encoder(GIN, 4, 4, 0)


if __name__ == '__main__':
    pytest.main([__file__, '-v'])

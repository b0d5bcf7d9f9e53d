import numpy as np
import pytest

from src.errors import GraphValidationError, PruningError, UnsupportedLayerError
from src.models.graph_models import Layer, LayerKind, Port, PortRef, Signature, TensorSpec
from src.tools.executor import forward
from src.tools.graph_ir import (apply_pruning, build_channel_groups, infer_shapes, parameter_count, port_groups,
                                signature_of, topological_order, validate_graph)
from src.tools.zoo import GraphBuilder, conv_net, resnet_block


def _members(group):
    return {(m.layer_id, m.port) for m in group.members}


class TestValidateGraph:

    def test_dense_chain_is_valid(self, chain):
        assert validate_graph(chain) == []

    def test_add_with_different_channel_counts(self):
        g = GraphBuilder()
        x = g.input([4])
        merged = g.add("add", g.dense("a", x, 8), g.dense("b", x, 6))
        g.output(merged)
        violations = validate_graph(g.build(seed=0))
        assert len(violations) == 1
        assert violations[0].startswith("add:")

    def test_dense_in_features_disagree_with_producer(self, chain):
        layer = chain.layer("fc1")
        layer.params["in_features"] = 8
        chain.tensors["fc1.weight"] = TensorSpec(name="fc1.weight", shape=[8, 8], data=np.zeros((8, 8)))
        violations = validate_graph(chain)
        assert len(violations) == 1
        assert "fc1" in violations[0]

    def test_weight_shape_must_match_params(self, chain):
        chain.tensors["fc2.weight"] = TensorSpec(name="fc2.weight", shape=[6, 7], data=np.zeros((6, 7)))
        violations = validate_graph(chain)
        assert any(v.startswith("fc2:") for v in violations)

    def test_missing_tensor(self, chain):
        del chain.tensors["fc3.bias"]
        assert any("fc3" in v and "bias" in v for v in validate_graph(chain))

    def test_cycle_is_reported(self, chain):
        chain.layer("fc1").inputs = ["fc2"]
        violations = validate_graph(chain)
        assert violations
        assert any("cycle" in v for v in violations)

    def test_exactly_one_input_and_output(self, chain):
        chain.layers = [layer for layer in chain.layers if layer.kind != LayerKind.OUTPUT.value]
        assert any("Output" in v for v in validate_graph(chain))

    def test_unknown_input_reference(self, chain):
        chain.layer("fc3").inputs = ["nowhere"]
        assert any("nowhere" in v for v in validate_graph(chain))

    def test_unsupported_kind_is_a_violation(self, chain):
        chain.layers.append(Layer(id="cat", kind="Concat", inputs=["fc1", "fc2"]))
        assert any("Concat" in v for v in validate_graph(chain))

    @pytest.mark.parametrize("projection", [True, False])
    def test_residual_block_without_a_head_is_valid(self, projection):
        assert validate_graph(resnet_block(projection=projection, seed=0)) == []


class TestTopologyAndShapes:

    def test_topological_order_breaks_ties_lexicographically(self, projection_block):
        order = [layer.id for layer in topological_order(projection_block)]
        assert order == ["input", "conv1", "proj", "relu1", "conv2", "add", "relu2", "output"]

    def test_infer_shapes_conv_net(self):
        shapes = infer_shapes(conv_net(in_shape=(2, 6, 6), channels=(4, 6), n_classes=3, flatten=True))
        assert shapes["conv1"] == (4, 6, 6)
        assert shapes["pool1"] == (4, 3, 3)
        assert shapes["pool2"] == (6, 1, 1)
        assert shapes["flatten"] == (6,)
        assert shapes["output"] == (3,)

    def test_parameter_count(self, chain):
        assert parameter_count(chain) == (4 * 8 + 8) + (8 * 6 + 6) + (6 * 3 + 3)


class TestBuildChannelGroups:

    def test_dense_chain_groups(self, chain):
        groups = build_channel_groups(chain)
        assert [g.size for g in groups] == [4, 8, 6, 3]
        assert [g.prunable for g in groups] == [False, True, True, False]
        assert _members(groups[1]) == {("fc1", Port.OUTPUT), ("fc2", Port.INPUT)}

    def test_projection_shortcut_block(self, projection_block):
        groups = build_channel_groups(projection_block)
        assert len(groups) == 3
        assert _members(groups[0]) == {("conv1", Port.INPUT), ("proj", Port.INPUT)}
        assert _members(groups[1]) == {("conv1", Port.OUTPUT), ("conv2", Port.INPUT)}
        assert _members(groups[2]) == {("conv2", Port.OUTPUT), ("proj", Port.OUTPUT)}
        assert [g.prunable for g in groups] == [False, True, False]

    def test_identity_shortcut_merges_input_and_add(self, identity_block):
        groups = build_channel_groups(identity_block)
        assert len(groups) == 2
        assert _members(groups[0]) == {("conv1", Port.INPUT), ("conv2", Port.OUTPUT)}
        assert not groups[0].prunable

    def test_classifier_head_frees_the_add_group(self):
        model = resnet_block(in_channels=3, mid_channels=16, out_channels=16, size=8, n_classes=4, seed=0)
        groups = build_channel_groups(model)
        assert [g.prunable for g in groups] == [False, True, True, False]
        assert ("fc", Port.INPUT) in _members(groups[2])

    def test_partition_property(self, two_branch):
        groups = build_channel_groups(two_branch)
        ports = [m for g in groups for m in g.members]
        prunable_layers = [layer for layer in two_branch.layers if layer.is_prunable]
        assert len(ports) == 2 * len(prunable_layers)
        assert len(set(ports)) == len(ports)
        assert set(port_groups(groups)) == {(l.id, p) for l in prunable_layers for p in Port}

    def test_group_numbering_is_deterministic(self, two_branch):
        first = build_channel_groups(two_branch)
        second = build_channel_groups(two_branch.clone())
        assert [g.model_dump() for g in first] == [g.model_dump() for g in second]

    def test_unsupported_kind_raises(self, chain):
        chain.layers.append(Layer(id="cat", kind="Concat", inputs=["fc1", "fc2"]))
        with pytest.raises(UnsupportedLayerError, match="Concat"):
            build_channel_groups(chain)

    def test_flatten_over_spatial_extent_is_unsupported(self):
        g = GraphBuilder()
        x = g.conv("conv", g.input([2, 4, 4]), 3)
        g.output(g.dense("fc", g.flatten("flatten", x), 2))
        with pytest.raises(UnsupportedLayerError, match="Flatten"):
            build_channel_groups(g.build(seed=0))

    def test_invalid_graph_raises_validation_error(self, chain):
        chain.layer("fc3").inputs = ["nowhere"]
        with pytest.raises(GraphValidationError):
            build_channel_groups(chain)


class TestSignatureAndPruning:

    def test_signature_of_chain(self, chain):
        groups = build_channel_groups(chain)
        assert signature_of(chain, groups) == Signature(counts=(4, 8, 6, 3))
        assert signature_of(chain, groups) == signature_of(chain.clone(), groups)
        assert hash(signature_of(chain, groups)) == hash(Signature(counts=(4, 8, 6, 3)))

    def test_signature_after_pruning(self, chain):
        groups = build_channel_groups(chain)
        pruned = apply_pruning(chain, groups, 1, {0, 5})
        assert signature_of(pruned, groups).counts == (4, 6, 6, 3)

    def test_dense_input_axis_pruning(self, chain):
        groups = build_channel_groups(chain)
        pruned = apply_pruning(chain, groups, 1, {1, 3})
        expected = np.delete(chain.tensors["fc2.weight"].data, [1, 3], axis=1)
        assert pruned.tensors["fc2.weight"].shape == [6, 6]
        np.testing.assert_array_equal(pruned.tensors["fc2.weight"].data, expected)
        np.testing.assert_array_equal(pruned.tensors["fc1.bias"].data, np.delete(chain.tensors["fc1.bias"].data, [1, 3]))
        assert pruned.layer("fc2").params["in_features"] == 6
        assert pruned.layer("fc1").params["out_features"] == 6

    def test_conv_output_pruning_with_bias(self):
        model = resnet_block(in_channels=3, mid_channels=16, out_channels=16, size=8, n_classes=4, seed=0)
        groups = build_channel_groups(model)
        pruned = apply_pruning(model, groups, 1, {0})
        assert pruned.tensors["conv1.weight"].shape == [15, 3, 3, 3]
        assert pruned.tensors["conv1.bias"].shape == [15]
        assert pruned.tensors["conv2.weight"].shape == [16, 15, 3, 3]
        assert validate_graph(pruned) == []

    def test_add_merged_group_shrinks_every_member(self, two_branch):
        groups = build_channel_groups(two_branch)
        pruned = apply_pruning(two_branch, groups, 2, {1, 3})
        assert pruned.tensors["branch_a.weight"].shape == [6, 8]
        assert pruned.tensors["branch_b.weight"].shape == [6, 8]
        assert pruned.tensors["head.weight"].shape == [3, 6]
        logits, _ = forward(pruned, np.ones((5, 6)))
        assert logits.shape == (5, 3)

    def test_source_model_is_untouched(self, chain):
        groups = build_channel_groups(chain)
        before = {name: spec.data.copy() for name, spec in chain.tensors.items()}
        apply_pruning(chain, groups, 2, {0})
        assert chain.layer("fc2").params["out_features"] == 6
        for name, data in before.items():
            np.testing.assert_array_equal(chain.tensors[name].data, data)

    def test_pruned_forward_equals_zeroed_consumer_columns(self, chain):
        groups = build_channel_groups(chain)
        pruned = apply_pruning(chain, groups, 1, {2, 4, 7})
        zeroed = chain.clone()
        zeroed.tensors["fc2.weight"].data[:, [2, 4, 7]] = 0.0
        x = np.random.default_rng(3).normal(size=(10, 4))
        np.testing.assert_allclose(forward(pruned, x)[0], forward(zeroed, x)[0], rtol=0, atol=1e-12)

    def test_frozen_group_cannot_be_pruned(self, chain):
        groups = build_channel_groups(chain)
        with pytest.raises(PruningError):
            apply_pruning(chain, groups, 0, {0})

    def test_cannot_remove_every_channel(self, chain):
        groups = build_channel_groups(chain)
        with pytest.raises(PruningError):
            apply_pruning(chain, groups, 2, set(range(6)))

    def test_indices_must_be_in_range(self, chain):
        groups = build_channel_groups(chain)
        with pytest.raises(PruningError):
            apply_pruning(chain, groups, 2, {6})

    def test_port_ref_str(self):
        assert str(PortRef(layer_id="fc1", port=Port.INPUT)) == "fc1:input"

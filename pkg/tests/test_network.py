import numpy as np
import numpy.testing as npt
import pytest

from rsnet import network as net
from rsnet import tensor as T
from rsnet.errors import DimensionError, FormatError

from netcheck import network_grad_check


def conv_layers(spec):
    return [l for l in spec.expanded() if l.kind == net.CONV]


class TestTable1:
    def test_conv_count(self):
        spec = net.build_table1()
        assert spec.conv_count == 1 + 5 + 2 * (1 + 2 + 8 + 8 + 4) == 52
        assert len(spec.conv_shapes()) == 53

    def test_grid_416(self):
        spec = net.build_table1(input_size=416)
        assert spec.grid_size == 13
        assert net.output_shape(spec) == (1, 5 * 6, 13, 13)

    def test_grid_64(self):
        assert net.build_table1(input_size=64).grid_size == 2

    def test_final_mode_grid(self):
        spec = net.build_table1(gmp_mode="final")
        assert spec.grid_size == 1
        assert net.output_shape(spec)[2:] == (1, 1)

    def test_five_stride_two_convs(self):
        assert sum(l.stride == 2 for l in conv_layers(net.build_table1())) == 5

    def test_stage_widths_and_halving(self):
        layers = conv_layers(net.build_table1())
        assert layers[0] == net.conv(32, 3, 1)
        downs = [l.filters for l in layers if l.stride == 2]
        assert downs == [64, 128, 256, 512, 1024]
        for a, b in zip(layers, layers[1:]):
            if b.kernel == 1:
                assert b.filters * 2 == a.filters
                assert b.stride == 1

    def test_repeat_groups(self):
        spec = net.build_table1()
        runs, count = [], 0
        for layer in spec.expanded():
            if layer.kind == net.CONV and layer.kernel == 1:
                count += 1
            elif layer.kind == net.GMP_BLOCK:
                runs.append(count)
                count = 0
        assert runs == [1, 2, 8, 8, 4]

    def test_head_filters(self):
        spec = net.build_table1(num_classes=3, anchors_per_cell=5)
        assert spec.conv_shapes()[-1][0] == (40, 1024, 1, 1)

    @pytest.mark.parametrize("size", [100, 418, 48])
    def test_indivisible_input(self, size):
        with pytest.raises(ValueError):
            net.build_table1(input_size=size)

    def test_shape_walk_preserves_spatial_in_gmp_blocks(self):
        shapes = net.layer_shapes(net.build_table1())
        for (k0, s0), (k1, s1) in zip(shapes, shapes[1:]):
            if k1 == net.GMP_BLOCK:
                assert s0 == s1

    def test_final_mode_collapses_once(self):
        shapes = net.layer_shapes(net.build_table1(gmp_mode="final"))
        assert sum(1 for _, s in shapes if s[2:] == (1, 1)) == 2  # final_gmp and head
        assert shapes[-2][0] == "final_gmp"


class TestTiny:
    def test_stages3_grid(self):
        assert net.build_tiny(stages=3, input_size=64).grid_size == 8

    def test_head_filter_count(self):
        spec = net.build_tiny(stages=2, base_filters=8, num_classes=2, anchors_per_cell=2)
        assert spec.head_filters == 14

    def test_indivisible(self):
        with pytest.raises(ValueError):
            net.build_tiny(stages=3, input_size=20)

    @pytest.mark.parametrize("stages", [1, 6])
    def test_stage_range(self, stages):
        with pytest.raises(ValueError):
            net.build_tiny(stages=stages)

    @pytest.mark.parametrize("stages", [2, 3, 4, 5])
    @pytest.mark.parametrize("base", [2, 8])
    def test_grid_invariant(self, stages, base):
        spec = net.build_tiny(stages, base, 64, 2, 2)
        assert spec.grid_size == 64 // 2 ** stages
        assert net.output_shape(spec)[2] == spec.grid_size

    @pytest.mark.parametrize("stages,base", [(2, 8), (3, 8), (5, 4)])
    def test_parameter_count_oracle(self, stages, base):
        spec = net.build_tiny(stages, base, 64, 2, 2)
        # independent sum: stem, then per stage a 3x3/2 conv plus one 1x1 / 3x3 pair
        c, total = 3, 0
        total += base * c * 9 + base
        c = base
        for i in range(1, stages + 1):
            w = base * 2 ** i
            total += w * c * 9 + w
            total += (w // 2) * w + w // 2
            total += w * (w // 2) * 9 + w
            c = w
        total += 14 * c + 14
        assert net.parameter_count(spec) == total
        assert sum(p.weight.size + p.bias.size for p in net.init_params(spec)) == total

    def test_forward_shapes(self):
        x = np.random.default_rng(0).uniform(size=(1, 3, 64, 64)).astype(np.float32)
        spec = net.build_tiny(3, 8, 64, 2, 2)
        assert net.forward(spec, net.init_params(spec), x).shape == (1, 14, 8, 8)
        final = net.build_tiny(3, 8, 64, 2, 2, gmp_mode="final")
        assert net.forward(final, net.init_params(final), x).shape == (1, 14, 1, 1)

    def test_real_forward_matches_shape_walk(self):
        spec = net.build_tiny(3, 4, 32, 2, 2)
        x = np.zeros((2, 3, 32, 32), np.float32)
        _, cache = net.forward_cached(spec, net.init_params(spec), x)
        convs = [e for e in cache if e[0] == net.CONV]
        walked = [s for k, s in net.layer_shapes(spec, 2) if k == net.CONV]
        assert [e[2].shape for e in convs] == walked

    def test_zero_params_zero_output(self):
        spec = net.build_tiny(3, 8, 64, 2, 2)
        x = np.random.default_rng(1).normal(size=(2, 3, 64, 64)).astype(np.float32)
        out = net.forward(spec, net.zero_params(spec), x)
        assert not out.any()

    def test_input_mismatch(self):
        spec = net.build_tiny(2, 4, 16, 2, 2)
        with pytest.raises(DimensionError):
            net.forward(spec, net.init_params(spec), np.zeros((1, 3, 8, 8)))
        with pytest.raises(DimensionError):
            net.forward(spec, net.init_params(spec), np.zeros((1, 1, 16, 16)))

    def test_params_mismatch(self):
        spec = net.build_tiny(2, 4, 16, 2, 2)
        other = net.build_tiny(2, 8, 16, 2, 2)
        with pytest.raises(DimensionError):
            net.forward(spec, net.init_params(other), np.zeros((1, 3, 16, 16)))

    def test_none_mode_differs_from_broadcast(self):
        x = np.random.default_rng(2).uniform(size=(1, 3, 16, 16)).astype(np.float32)
        a = net.build_tiny(2, 4, 16, 2, 2, "broadcast")
        b = net.build_tiny(2, 4, 16, 2, 2, "none")
        p = net.init_params(a, seed=3)
        assert not np.allclose(net.forward(a, p, x), net.forward(b, p, x))


class TestBroadcastBlock:
    def test_block_equals_manual_composition(self):
        spec = net.NetworkSpec((net.conv(3, 1, 1), net.LayerSpec(net.GMP_BLOCK)),
                               input_size=4, num_classes=1, anchors_per_cell=1)
        rng = np.random.default_rng(0)
        params = [T.ConvParams(rng.normal(size=(3, 3, 1, 1)), np.zeros(3)),
                  T.ConvParams(rng.normal(size=(6, 3, 1, 1)), rng.normal(size=6))]
        x = rng.normal(size=(2, 3, 4, 4))
        feat = T.leaky_relu(T.conv2d(x, params[0]))
        mid = feat + feat.max(axis=(2, 3), keepdims=True)
        npt.assert_allclose(net.forward(spec, params, x), T.conv2d(mid, params[1]), rtol=1e-12)

    def test_maxpool_layer_halves(self):
        spec = net.NetworkSpec((net.conv(2, 3, 1), net.LayerSpec(net.MAXPOOL)), input_size=8,
                               num_classes=1, anchors_per_cell=1)
        assert net.output_shape(spec) == (1, 6, 4, 4)
        assert net.forward(spec, net.init_params(spec), np.ones((1, 3, 8, 8))).shape == (1, 6, 4, 4)


class TestInit:
    def test_same_seed_identical(self):
        spec = net.build_tiny()
        for a, b in zip(net.init_params(spec, 5), net.init_params(spec, 5)):
            npt.assert_array_equal(a.weight, b.weight)

    def test_different_seeds_differ(self):
        spec = net.build_tiny()
        a, b = net.init_params(spec, 0), net.init_params(spec, 1)
        assert any(not np.array_equal(p.weight, q.weight) for p, q in zip(a, b))

    def test_bounds_and_zero_bias(self):
        spec = net.build_table1(input_size=64)
        for p in net.init_params(spec):
            s = np.sqrt(1.0 / (p.weight.shape[1] * p.weight.shape[2] * p.weight.shape[3]))
            assert np.all(np.abs(p.weight) < s)
            assert not p.bias.any()
            assert p.weight.dtype == np.float32

    def test_gain_scales_bound(self):
        spec = net.build_tiny()
        for p, q in zip(net.init_params(spec, 0), net.init_params(spec, 0, gain=2.0)):
            npt.assert_allclose(q.weight, 2 * p.weight, rtol=1e-6)

    def test_gain_must_be_positive(self):
        with pytest.raises(ValueError):
            net.init_params(net.build_tiny(), gain=0)


class TestBackward:
    def test_zero_head_grad(self):
        spec = net.build_tiny(2, 4, 16, 2, 2)
        x = np.random.default_rng(0).uniform(size=(1, 3, 16, 16)).astype(np.float32)
        grads = net.forward_backward(spec, net.init_params(spec), x, np.zeros((1, 14, 4, 4)))
        assert all(not g.weight.any() and not g.bias.any() for g in grads)

    def test_deterministic(self):
        spec = net.build_tiny(2, 4, 16, 2, 2)
        rng = np.random.default_rng(1)
        x = rng.uniform(size=(2, 3, 16, 16)).astype(np.float32)
        g = rng.normal(size=(2, 14, 4, 4)).astype(np.float32)
        params = net.init_params(spec)
        a = net.forward_backward(spec, params, x, g)
        b = net.forward_backward(spec, params, x, g)
        for p, q in zip(a, b):
            assert p.weight.tobytes() == q.weight.tobytes()
            assert p.bias.tobytes() == q.bias.tobytes()

    def test_head_grad_shape_checked(self):
        spec = net.build_tiny(2, 4, 16, 2, 2)
        with pytest.raises(DimensionError):
            net.forward_backward(spec, net.init_params(spec), np.zeros((1, 3, 16, 16)),
                                 np.zeros((1, 14, 2, 2)))

    @pytest.mark.parametrize("mode", ["broadcast", "final", "none"])
    def test_full_coordinate_gradient(self, mode):
        worst, compared, skipped = network_grad_check(0, mode)
        assert worst < 1e-3
        assert skipped <= 0.1 * (compared + skipped)

    def test_larger_net_sampled_gradient(self):
        worst, compared, skipped = network_grad_check(7, "broadcast", max_probes=6,
                                                      stages=3, base=4, size=16)
        assert worst < 1e-3
        assert skipped <= 0.1 * (compared + skipped)


class TestConfig:
    @pytest.mark.parametrize("spec", [
        net.build_table1(),
        net.build_tiny(3, 8, 64, 2, 2, "final"),
        net.build_tiny(2, 4, 32, 5, 3, "none"),
    ], ids=["table1", "tiny-final", "tiny-none"])
    def test_round_trip(self, spec):
        assert net.parse_config(net.format_config(spec)) == spec

    def test_file_round_trip(self, tmp_path):
        spec = net.build_tiny()
        net.save_config(spec, tmp_path / "n.cfg")
        assert net.load_config(tmp_path / "n.cfg") == spec

    def test_comments_and_blank_lines(self):
        text = "# hi\ninput 16  # size\nclasses 1\n\nanchors_per_cell 1\nconv 4 3 2\ngmp_block\n"
        spec = net.parse_config(text)
        assert spec.gmp_mode == "broadcast"
        assert spec.grid_size == 8

    @pytest.mark.parametrize("text,line", [
        ("input 16\nclasses 1\nanchors_per_cell 1\nconv 4 5 1\n", 4),
        ("input 16\nclasses 1\nanchors_per_cell 1\nconv 4 3\n", 4),
        ("input x\n", 1),
        ("input 16\nbogus\n", 2),
        ("input 16\ninput 16\n", 2),
        ("input 16\nclasses 1\nanchors_per_cell 1\ngmp_mode literal\n", 4),
    ])
    def test_errors_carry_line(self, text, line):
        with pytest.raises(FormatError) as err:
            net.parse_config(text)
        assert err.value.line == line

    def test_missing_header(self):
        with pytest.raises(FormatError):
            net.parse_config("conv 4 3 1\n")

    def test_indivisible_input_is_format_error(self):
        with pytest.raises(FormatError):
            net.parse_config("input 18\nclasses 1\nanchors_per_cell 1\nconv 4 3 2\nconv 4 3 2\n")

import numpy as np
import pytest
import torch

from ascnet.model import (
    NetworkSpec,
    as_batch,
    build_discriminator,
    build_main_module,
    count_parameters,
    encoder_level_shapes,
    forward_discriminator,
    forward_main,
    state_hash,
)


class TestSpec:
    def test_defaults(self):
        s = NetworkSpec()
        assert s.encoder_widths == (32, 64, 128, 256) and s.transition_width == 512
        assert s.dropout_rate == 0.3 and s.depth == 4

    @pytest.mark.parametrize(
        "kw",
        [dict(input_size=(60, 64)), dict(encoder_widths=(8, 8, 16, 32)), dict(conv_kernel=4), dict(dropout_rate=1.0)],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            NetworkSpec(**kw).validate()

    def test_dict_roundtrip(self):
        s = NetworkSpec((32, 32), (4, 8, 16, 32), 64)
        assert NetworkSpec.from_dict(s.to_dict()) == s


@pytest.mark.parametrize("size", [(32, 32), (48, 64)])
def test_output_contract(tiny_spec, size):
    spec = NetworkSpec(size, tiny_spec.encoder_widths, tiny_spec.transition_width)
    m = build_main_module(spec, 0)
    x = np.random.default_rng(0).random((3, *size))
    out = forward_main(m, x)
    for t in (out.fence, out.wild, out.recon):
        assert t.shape == (3, *size)
        assert float(t.detach().min()) >= 0.0 and float(t.detach().max()) <= 1.0
    d = forward_discriminator(build_discriminator(spec, 1), x)
    assert d.shape == (3,) and bool((d.abs() < 1).all())
    assert encoder_level_shapes(m.encoder, size) == [(size[0] >> k, size[1] >> k) for k in range(5)]


def test_seeded_build_deterministic(tiny_spec):
    assert state_hash(build_main_module(tiny_spec, 3)) == state_hash(build_main_module(tiny_spec, 3))
    assert state_hash(build_main_module(tiny_spec, 3)) != state_hash(build_main_module(tiny_spec, 4))


def test_build_does_not_touch_global_rng(tiny_spec):
    torch.manual_seed(0)
    a = torch.rand(1)
    torch.manual_seed(0)
    build_main_module(tiny_spec, 9)
    assert torch.equal(torch.rand(1), a)


def test_full_width_parameter_count():
    m = build_main_module(NetworkSpec(), 0)
    assert count_parameters(m.reconstructor) == 3
    assert count_parameters(m) > 1e7


def test_eval_forward_is_deterministic(tiny_spec):
    m = build_main_module(tiny_spec, 0)
    x = np.random.default_rng(1).random((2, 32, 32))
    assert torch.equal(forward_main(m, x).recon, forward_main(m, x).recon)


def test_as_batch_shapes():
    assert as_batch(np.zeros((4, 4))).shape == (1, 1, 4, 4)
    assert as_batch(np.zeros((2, 4, 4))).shape == (2, 1, 4, 4)
    with pytest.raises(ValueError):
        as_batch(np.zeros((2, 4, 4)), size=(8, 8))

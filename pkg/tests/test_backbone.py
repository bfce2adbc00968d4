import numpy as np

from graphfpn import numerics as nm
from graphfpn.backbone import BackboneConfig, backbone_forward, fpn_forward, init_params
from graphfpn.numerics import Tensor

MICRO = BackboneConfig(stage_channels=(3, 4, 5, 6, 7), fpn_channels=4, input_size=16)


def test_spatial_sizes_quarter_in_area():
    cfg = BackboneConfig()
    rng = np.random.default_rng(0)
    params = init_params(cfg, rng)
    img = Tensor(rng.uniform(size=(3, 64, 64)))
    cs = backbone_forward(img, params, cfg)
    assert [c.shape[1] for c in cs] == [64, 32, 16, 8, 4]
    ps = fpn_forward(cs, params, cfg)
    for c, p in zip(cs, ps):
        assert p.shape[1:] == c.shape[1:]
        assert p.shape[0] == cfg.fpn_channels


def test_zero_input_zero_biases_all_zero():
    rng = np.random.default_rng(1)
    params = init_params(MICRO, rng)
    img = Tensor(np.zeros((3, 16, 16)))
    cs = backbone_forward(img, params, MICRO)
    assert all(np.array_equal(c.data, np.zeros(c.shape)) for c in cs)


def test_deterministic_given_seed():
    imgs = np.random.default_rng(2).uniform(size=(3, 16, 16))
    outs = []
    for _ in range(2):
        params = init_params(MICRO, np.random.default_rng(7))
        cs = backbone_forward(Tensor(imgs), params, MICRO)
        outs.append(fpn_forward(cs, params, MICRO)[0].data)
    assert np.array_equal(outs[0], outs[1])


def test_zero_laterals_leave_only_topdown_path():
    rng = np.random.default_rng(3)
    params = init_params(MICRO, rng)
    for i in range(1, 6):
        params[f"fpn.lateral{i}.weight"].data[:] = 0.0
        params[f"fpn.lateral{i}.bias"].data[:] = 0.0
    img = Tensor(rng.uniform(size=(3, 16, 16)))
    cs = backbone_forward(img, params, MICRO)
    ps = fpn_forward(cs, params, MICRO)
    # P5 = lateral(C5) = 0, and with zero laterals everything below it stays
    # on the smoothed top-down path of a zero map: only the smooth biases act
    assert np.array_equal(ps[4].data, np.zeros(ps[4].shape))
    for i in range(4):
        params[f"fpn.smooth{i + 1}.bias"].data[:] = 0.0
    ps = fpn_forward(cs, params, MICRO)
    for p in ps:
        assert np.array_equal(p.data, np.zeros(p.shape))


def test_backbone_gradcheck_8x8():
    cfg = BackboneConfig(stage_channels=(2, 3, 3, 4, 4), fpn_channels=3, input_size=16)
    rng = np.random.default_rng(4)
    params = init_params(cfg, rng)
    img = Tensor(rng.uniform(0.1, 0.9, size=(3, 16, 16)), requires_grad=True)
    probe = Tensor(rng.normal(size=(3, 16, 16)))

    def f():
        cs = backbone_forward(img, params, cfg)
        ps = fpn_forward(cs, params, cfg)
        return nm.reduce_sum(nm.mul(ps[0], probe))

    checked = [img] + [params[k] for k in sorted(params) if "stage1" in k or "lateral1" in k or "smooth1" in k]
    assert nm.grad_check(f, checked, max_coords=10) < 1e-4

import torch

from avloc.heads import ClassificationHead, MultimodalDecoder, RegressionHead


def _levels(B=2, D=8, lengths=(16, 8, 4, 1)):
    Z = [torch.randn(B, T, 2 * D) for T in lengths]
    masks = [torch.ones(B, T, dtype=torch.bool) for T in lengths]
    return Z, masks


def test_shapes_and_ranges():
    torch.manual_seed(0)
    dec = MultimodalDecoder(8, 3).eval()
    Z, masks = _levels()
    out = dec(Z, masks)
    for z, p, r in zip(Z, out.cls, out.reg):
        T = z.shape[1]
        assert p.shape == (2, T, 3) and r.shape == (2, 2, 3, T)
        assert ((p > 0) & (p < 1)).all()
        assert (r >= 0).all()
    for z, f in zip(Z, dec.fuse(Z, masks)):
        assert f.shape == z.shape and torch.isfinite(f).all()


def test_levels_are_independent():
    torch.manual_seed(0)
    dec = MultimodalDecoder(8, 3).eval()
    Z, masks = _levels()
    fwd = dec(Z, masks)
    rev = dec(Z[::-1], masks[::-1])
    for a, b in zip(fwd.cls_logits, rev.cls_logits[::-1]):
        assert torch.equal(a, b)


def test_zero_final_layer_gives_half():
    head = ClassificationHead(16, 8, 4)
    torch.nn.init.zeros_(head.last.weight)
    torch.nn.init.zeros_(head.last.bias)
    p = head(torch.randn(1, 5, 16), torch.ones(1, 5, dtype=torch.bool)).sigmoid()
    assert torch.equal(p, torch.full_like(p, 0.5))


def test_prior_initialisation():
    head = ClassificationHead(16, 8, 4, prior_prob=0.01)
    torch.nn.init.zeros_(head.last.weight)
    p = head(torch.randn(1, 5, 16), torch.ones(1, 5, dtype=torch.bool)).sigmoid()
    assert torch.allclose(p, torch.full_like(p, 0.01), atol=1e-6)


def test_single_class_regression():
    r = RegressionHead(16, 8, 1)(torch.randn(2, 7, 16), torch.ones(2, 7, dtype=torch.bool))
    assert r.shape == (2, 2, 1, 7)


def test_head_parameters_independent_of_levels():
    dec = MultimodalDecoder(8, 3)
    n = sum(p.numel() for p in dec.parameters())
    for lengths in [(16,), (16, 8, 4, 2, 1)]:
        Z, masks = _levels(lengths=lengths)
        dec(Z, masks)
        assert sum(p.numel() for p in dec.parameters()) == n


def test_sigmoid_monotone():
    x = torch.linspace(-10, 10, 101)
    assert (torch.diff(torch.sigmoid(x)) > 0).all()


def test_masked_positions_zero():
    dec = MultimodalDecoder(8, 2).eval()
    Z, masks = _levels(lengths=(8,))
    masks[0][0, 5:] = False
    out = dec(Z, masks)
    assert not out.reg[0][0, :, :, 5:].any()

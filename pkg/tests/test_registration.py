import math

import numpy as np
import pytest
import torch

from mfdv2v.phantom import PhantomParams, build_dataset, generate_sample, load_dataset
from mfdv2v.registration import (
    LatentMotion,
    RegistrationConfig,
    RegistrationNet,
    bilinear_sample,
    compose_displacements,
    decode_velocity,
    displacement_from_transform,
    encode_sequence,
    endpoint_error,
    identity_grid,
    integrate_velocity,
    jacobian_determinant,
    load_registration,
    ltma_attention,
    registration_loss,
    smoothed,
    train_registration,
    transform_from_displacement,
    warp,
)


def smooth_field(h, w, amp, seed, dtype=torch.float64):
    """Random velocity with at most 1.5 cycles across the grid and sup-norm ``amp``."""
    g = torch.Generator().manual_seed(seed)
    grid = identity_grid(h, w, dtype)
    x, y = grid[..., 0] / w, grid[..., 1] / h
    comps = []
    for _ in range(2):
        f = torch.zeros(h, w, dtype=dtype)
        for kx in (0.5, 1.5):
            for ky in (0.5, 1.5):
                a, ph1, ph2 = torch.rand(3, generator=g, dtype=dtype)
                f = f + (a - 0.5) * torch.sin(2 * math.pi * kx * x + 6 * ph1) * torch.cos(2 * math.pi * ky * y + 6 * ph2)
        comps.append(f)
    v = torch.stack(comps, -1)
    return v * (amp / v.abs().max())


def euler_flow(v, steps=1024):
    """Forward Euler of d phi/ds = v(phi) from the identity, s in [0, 1]."""
    h, w = v.shape[-3:-1]
    phi = identity_grid(h, w, v.dtype)
    for _ in range(steps):
        phi = phi + bilinear_sample(v, phi) / steps
    return phi


def naive_ltma(Z, wq, wk, wv, scale=True):
    """Literal per-head, per-query, per-key, per-channel attention."""
    b, t = Z.shape[:2]
    tok = Z.reshape(b, t, -1).double()
    heads, d, dh = wq.shape
    out = torch.zeros(b, t, heads * dh, dtype=torch.float64)
    for bi in range(b):
        for j in range(heads):
            q = tok[bi] @ wq[j].double()
            k = tok[bi] @ wk[j].double()
            v = tok[bi] @ wv[j].double()
            for qi in range(t):
                logits = []
                for ki in range(t):
                    s = 0.0
                    for c in range(dh):
                        s += float(q[qi, c] * k[ki, c])
                    logits.append(s / math.sqrt(dh) if scale else s)
                m = max(logits)
                ex = [math.exp(l - m) for l in logits]
                tot = sum(ex)
                for c in range(dh):
                    out[bi, qi, j * dh + c] = sum(ex[ki] / tot * float(v[ki, c]) for ki in range(t))
    return out.reshape(Z.shape)


# ---------------------------------------------------------------- transforms


def test_warp_identity_exact():
    img = torch.rand(9, 7, 1)
    assert torch.equal(warp(img, identity_grid(9, 7)), img)


def test_warp_integer_shift_moves_bright_pixel():
    img = torch.zeros(8, 8, 1)
    img[3, 4] = 1.0
    phi = identity_grid(8, 8) + torch.tensor([1.0, 0.0])
    out = warp(img, phi)
    assert out[3, 3, 0] == 1.0
    assert out.sum() == 1.0


def test_warp_half_pixel_is_two_point_average():
    img = torch.rand(6, 6, 1, dtype=torch.float64)
    out = warp(img, identity_grid(6, 6, torch.float64) + torch.tensor([0.5, 0.0], dtype=torch.float64))
    expected = 0.5 * (img[:, :-1] + img[:, 1:])
    torch.testing.assert_close(out[:, :-1], expected, rtol=0, atol=1e-15)


def test_warp_clamps_to_border():
    img = torch.arange(16.0).reshape(4, 4, 1)
    phi = identity_grid(4, 4) + torch.tensor([-10.0, 0.0])
    assert torch.equal(warp(img, phi)[:, :, 0], img[:, :1, 0].expand(4, 4))


def test_warp_rejects_non_finite():
    phi = identity_grid(4, 4)
    phi[0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        warp(torch.zeros(4, 4, 1), phi)
    with pytest.raises(ValueError):
        warp(torch.zeros(5, 4, 1), identity_grid(4, 4))


def test_displacement_round_trip():
    phi = identity_grid(5, 6)
    assert torch.equal(displacement_from_transform(phi), torch.zeros(5, 6, 2))
    c = torch.tensor([0.3, -1.25])
    assert torch.allclose(displacement_from_transform(phi + c), c.expand(5, 6, 2))
    # dyadic displacements round-trip exactly; arbitrary floats to within one rounding of the grid
    u = torch.randint(-512, 512, (3, 5, 6, 2)).double() / 256
    assert torch.equal(displacement_from_transform(transform_from_displacement(u)), u)
    u = torch.randn(3, 5, 6, 2, dtype=torch.float64)
    torch.testing.assert_close(displacement_from_transform(transform_from_displacement(u)), u, rtol=0, atol=1e-14)


def test_integrate_zero_velocity_is_identity():
    v = torch.zeros(2, 8, 8, 2)
    assert torch.equal(integrate_velocity(v, 7), identity_grid(8, 8).expand(2, 8, 8, 2))


def test_integrate_constant_velocity():
    v = torch.zeros(16, 16, 2, dtype=torch.float64)
    v[..., 0] = 0.5
    u = displacement_from_transform(integrate_velocity(v, 6))
    interior = u[2:-2, 2:-2]
    assert (interior - torch.tensor([0.5, 0.0], dtype=torch.float64)).abs().max() < 1e-4


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_scaling_squaring_matches_euler(seed):
    v = smooth_field(64, 64, 2.0, seed)
    assert v.abs().max() <= 2.0 + 1e-12
    phi_ss = integrate_velocity(v, 7)
    phi_eu = euler_flow(v, 1024)
    m = 4
    err = (phi_ss - phi_eu)[m:-m, m:-m].norm(dim=-1).max().item()
    assert err < 1e-2


@pytest.mark.parametrize("seed", [3, 4])
def test_inverse_consistency(seed):
    v = smooth_field(64, 64, 2.0, seed)
    u_fwd = displacement_from_transform(integrate_velocity(v, 7))
    u_bwd = displacement_from_transform(integrate_velocity(-v, 7))
    m = 4
    for outer, inner in [(u_bwd, u_fwd), (u_fwd, u_bwd)]:
        comp = compose_displacements(outer, inner)
        assert comp[m:-m, m:-m].norm(dim=-1).max().item() < 0.05


@pytest.mark.parametrize("seed", [5, 6, 7])
def test_jacobian_positive(seed):
    v = smooth_field(64, 64, 2.0, seed)
    det = jacobian_determinant(integrate_velocity(v, 7))
    assert (det > 0).double().mean().item() >= 0.99


def test_integrate_errors():
    with pytest.raises(ValueError):
        integrate_velocity(torch.zeros(4, 4, 2), -1)
    v = torch.zeros(4, 4, 2)
    v[1, 1, 1] = float("inf")
    with pytest.raises(ValueError):
        integrate_velocity(v)


# ---------------------------------------------------------------- LTMA


def test_ltma_matches_naive_oracle():
    g = torch.Generator().manual_seed(0)
    Z = torch.randn(2, 5, 2, 2, 3, generator=g, dtype=torch.float64)
    d, h = 12, 2
    wq, wk, wv = (torch.randn(h, d, d // h, generator=g, dtype=torch.float64) for _ in range(3))
    fast = ltma_attention(Z, wq, wk, wv)
    slow = naive_ltma(Z, wq, wk, wv)
    assert (fast.double() - slow).abs().max().item() < 1e-6
    unscaled = ltma_attention(Z, wq, wk, wv, scale=False)
    assert (unscaled.double() - naive_ltma(Z, wq, wk, wv, scale=False)).abs().max().item() < 1e-6


def test_ltma_single_frame_identity_value():
    d, h = 8, 2
    Z = torch.randn(1, 1, 2, 2, 2)
    eye = torch.eye(d).reshape(d, h, d // h).permute(1, 0, 2)
    out = ltma_attention(Z, torch.randn(h, d, d // h), torch.randn(h, d, d // h), eye)
    torch.testing.assert_close(out, Z)


def test_ltma_identical_frames_output_common_value():
    d, h = 8, 4
    frame = torch.randn(1, 1, 2, 2, 2)
    Z = frame.expand(1, 6, 2, 2, 2)
    wq, wk, wv = (torch.randn(h, d, d // h) for _ in range(3))
    out = ltma_attention(Z, wq, wk, wv)
    common = torch.einsum("d,hde->he", frame.reshape(-1), wv).reshape(-1)
    for t in range(6):
        torch.testing.assert_close(out[0, t].reshape(-1), common, rtol=1e-5, atol=1e-6)


def test_ltma_rows_sum_to_one_and_permutation_equivariance():
    g = torch.Generator().manual_seed(1)
    Z = torch.randn(1, 7, 2, 2, 4, generator=g, dtype=torch.float64)
    d, h = 16, 4
    wq, wk, wv = (torch.randn(h, d, d // h, generator=g, dtype=torch.float64) for _ in range(3))
    out, weights = ltma_attention(Z, wq, wk, wv, return_weights=True)
    torch.testing.assert_close(weights.sum(-1), torch.ones_like(weights.sum(-1)))
    perm = torch.randperm(7, generator=g)
    out_p = ltma_attention(Z[:, perm], wq, wk, wv)
    torch.testing.assert_close(out_p, out[:, perm], rtol=1e-12, atol=1e-12)


def test_ltma_rejects_indivisible_heads():
    with pytest.raises(ValueError):
        ltma_attention(torch.randn(1, 3, 1, 1, 6), torch.randn(4, 6, 1), torch.randn(4, 6, 1), torch.randn(4, 6, 1))
    with pytest.raises(ValueError):
        RegistrationNet(RegistrationConfig(channels=(4, 6), heads=4), 4, 4)


# ---------------------------------------------------------------- encoder / decoder


def test_encoder_shape_arithmetic():
    net = RegistrationNet(RegistrationConfig(channels=(16, 32), heads=4), 64, 64)
    seq = torch.rand(11, 64, 64, 1)
    lat = encode_sequence(seq, net)
    assert lat.z.shape == (1, 10, 16, 16, 32)
    v = decode_velocity(net.attend(lat), net)
    assert v.shape == (1, 10, 64, 64, 2)
    v0 = decode_velocity(torch.zeros(10, 16, 16, 32), net)
    assert v0.shape == (1, 10, 64, 64, 2)


def test_encoder_zero_weights_give_zero_latent():
    net = RegistrationNet(RegistrationConfig(), 16, 16)
    for p in net.encoder.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(encode_sequence(torch.zeros(4, 16, 16, 1), net).z, torch.zeros(1, 3, 4, 4, 32))
    for p in net.decoder.parameters():
        torch.nn.init.zeros_(p)
    assert torch.equal(decode_velocity(torch.zeros(3, 4, 4, 32), net), torch.zeros(1, 3, 16, 16, 2))


def test_encoder_identical_frames_identical_latents():
    net = RegistrationNet(RegistrationConfig(), 16, 16)
    frame = torch.rand(1, 16, 16, 1)
    lat = encode_sequence(frame.expand(5, 16, 16, 1), net)
    for t in range(1, 4):
        assert torch.equal(lat.z[0, t], lat.z[0, 0])


def test_encoder_rejects_indivisible_size():
    with pytest.raises(ValueError):
        RegistrationNet(RegistrationConfig(), 18, 18)


def test_decoder_linear_in_test_mode():
    torch.manual_seed(0)
    net = RegistrationNet(RegistrationConfig(activation="identity", velocity_init_std=0.1), 16, 16).double()
    for m in net.decoder.modules():
        if isinstance(m, torch.nn.Conv2d):
            torch.nn.init.zeros_(m.bias)
    z = torch.randn(3, 4, 4, 32, dtype=torch.float64)
    a = 2.7
    torch.testing.assert_close(decode_velocity(a * z, net), a * decode_velocity(z, net))


# ---------------------------------------------------------------- loss


def test_loss_zero_for_static_sequence():
    seq = torch.rand(1, 16, 16, 1).expand(4, 16, 16, 1)
    v = torch.zeros(3, 16, 16, 2)
    phi = integrate_velocity(v)
    assert registration_loss(seq, v, phi, lam=10.0, weight_decay=0.0).item() == 0.0


def test_smoothness_vanishes_for_constant_velocity():
    seq = torch.rand(3, 8, 8, 1)
    v = torch.zeros(2, 8, 8, 2) + torch.tensor([0.4, -0.2])
    phi = integrate_velocity(v)
    full = registration_loss(seq, v, phi, lam=1.0)
    ref = seq[:1].expand(2, 8, 8, 1)
    sim_only = ((warp(ref, phi) - seq[1:]) ** 2).mean(dim=(1, 2, 3)).sum()
    torch.testing.assert_close(full, sim_only)


def test_loss_value_by_hand():
    seq = torch.rand(3, 6, 6, 1, dtype=torch.float64)
    v = torch.randn(2, 6, 6, 2, dtype=torch.float64) * 0.3
    phi = integrate_velocity(v, 4)
    lam = 3.0
    expected = 0.0
    for t in range(2):
        w = warp(seq[0], phi[t])
        expected += lam * ((w - seq[t + 1]) ** 2).mean()
        dx = v[t, :, 1:] - v[t, :, :-1]
        dy = v[t, 1:] - v[t, :-1]
        expected += (dx**2).sum(-1).mean() + (dy**2).sum(-1).mean()
    p = [torch.ones(3, dtype=torch.float64)]
    got = registration_loss(seq, v, phi, lam, weight_decay=0.5, params=p)
    torch.testing.assert_close(got, expected + 0.5 * 3.0)


def test_loss_gradient_matches_finite_differences():
    g = torch.Generator().manual_seed(0)
    seq = generate_sample(PhantomParams(height=8, width=8, frames=3, r_inner=1.5, r_outer=3.2, amplitude=0.3, noise=0.0, cine_noise=0.0)).cine_like
    seq = torch.from_numpy(seq).double()
    v = (torch.randn(2, 8, 8, 2, generator=g, dtype=torch.float64) * 0.4).requires_grad_(True)
    w = torch.randn(5, generator=g, dtype=torch.float64).requires_grad_(True)

    def f(vv, ww):
        return registration_loss(seq, vv, integrate_velocity(vv, 7), 10.0, 1e-2, [ww])

    loss = f(v, w)
    gv, gw = torch.autograd.grad(loss, [v, w])
    h = 1e-5
    idx = [(0, 3, 4, 0), (1, 2, 5, 1), (0, 6, 1, 1), (1, 4, 4, 0), (0, 0, 0, 0)]
    for i in idx:
        vp, vm = v.detach().clone(), v.detach().clone()
        vp[i] += h
        vm[i] -= h
        fd = (f(vp, w).item() - f(vm, w).item()) / (2 * h)
        assert abs(fd - gv[i].item()) <= 1e-4 * max(abs(fd), 1e-8)
    # directional derivative over the whole field
    d = torch.randn(v.shape, generator=g, dtype=torch.float64)
    fd = (f(v.detach() + h * d, w).item() - f(v.detach() - h * d, w).item()) / (2 * h)
    an = (gv * d).sum().item()
    assert abs(fd - an) <= 1e-4 * abs(fd)
    for i in range(5):
        wp, wm = w.detach().clone(), w.detach().clone()
        wp[i] += h
        wm[i] -= h
        fd = (f(v, wp).item() - f(v, wm).item()) / (2 * h)
        assert abs(fd - gw[i].item()) <= 1e-4 * abs(fd)


def test_loss_errors():
    seq = torch.rand(3, 8, 8, 1)
    v = torch.zeros(2, 8, 8, 2)
    with pytest.raises(ValueError):
        registration_loss(seq, v, integrate_velocity(v), lam=0.0)
    with pytest.raises(ValueError):
        registration_loss(seq, torch.zeros(3, 8, 8, 2), integrate_velocity(torch.zeros(3, 8, 8, 2)))


# ---------------------------------------------------------------- training


def _static_sequences(n=4, size=16):
    out = []
    for i in range(n):
        s = generate_sample(PhantomParams(height=size, width=size, frames=5, r_inner=3, r_outer=6, amplitude=0.0, seed=i, cine_noise=0.0))
        out.append(s.cine_like)
    return np.stack(out)


def test_training_static_sequences_learns_no_motion():
    cfg = RegistrationConfig(epochs=15, batch_size=2, seed=0)
    net, history = train_registration(_static_sequences(), cfg)
    u = net.predict_displacement(torch.from_numpy(_static_sequences()))
    assert u.norm(dim=-1).mean().item() < 0.1
    assert np.isfinite(history).all()


def test_training_determinism_and_checkpoint(tmp_path):
    seqs = np.stack(
        [generate_sample(PhantomParams(height=16, width=16, frames=4, r_inner=3, r_outer=6, amplitude=0.3, seed=i)).cine_like for i in range(3)]
    )
    cfg = RegistrationConfig(epochs=3, batch_size=2, seed=4)
    net1, h1 = train_registration(seqs, cfg, tmp_path / "a.ckpt")
    net2, h2 = train_registration(seqs, cfg, tmp_path / "b.ckpt")
    assert h1 == h2
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    loaded, manifest = load_registration(tmp_path / "a.ckpt")
    assert manifest["seed"] == 4 and manifest["epoch"] == 3 and len(manifest["loss_curve"]) == 3
    x = torch.from_numpy(seqs)
    assert torch.equal(loaded.predict_displacement(x), net1.eval().predict_displacement(x))


def test_training_rejects_empty_dataset():
    with pytest.raises(ValueError):
        train_registration(np.zeros((0, 4, 16, 16, 1), np.float32), RegistrationConfig(epochs=1))


def test_training_aborts_on_non_finite_loss():
    seqs = _static_sequences(2)
    seqs[0, 1, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        train_registration(seqs, RegistrationConfig(epochs=1))


def test_training_loss_decreases_on_moving_phantoms():
    seqs = np.stack(
        [generate_sample(PhantomParams(height=16, width=16, frames=5, r_inner=3, r_outer=6, amplitude=0.3, seed=i)).cine_like for i in range(4)]
    )
    _, history = train_registration(seqs, RegistrationConfig(epochs=20, batch_size=2))
    sm = smoothed(history, 5)
    assert sm[-1] < sm[0]


def test_endpoint_error_masking():
    u = torch.zeros(2, 4, 4, 2)
    gt = torch.ones(2, 4, 4, 2)
    mask = torch.zeros(2, 4, 4, 1)
    mask[:, 0, 0] = 1
    assert endpoint_error(u, gt) == pytest.approx(math.sqrt(2))
    assert endpoint_error(u, gt, mask) == pytest.approx(math.sqrt(2))

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from skelmotion.motion_io import generate_synthetic_corpus
from skelmotion.vae import (
    JointwiseMLP,
    SkeletonVAE,
    VAEConfig,
    channel_indices,
    decode_latent,
    encode_motion,
    load_vae,
    save_vae,
    train_vae,
    vae_loss,
)


@pytest.fixture(scope="module")
def idx(topo):
    return channel_indices(topo)


def test_latent_shape(tiny_vae):
    x = torch.randn(2, 64, 263)
    lat = tiny_vae.encode(x)
    assert lat.z.shape == lat.mu.shape == lat.logvar.shape == (2, 16, 7, 8)
    assert tiny_vae.decode(lat.z).shape == x.shape


def test_default_latent_width(topo, plan):
    vae = SkeletonVAE(topo, plan)
    with torch.no_grad():
        assert vae.encode(torch.randn(1, 64, 263)).z.shape == (1, 16, 7, 32)


def test_reparameterization(tiny_vae):
    x = torch.randn(1, 16, 263)
    with torch.no_grad():
        lat0 = tiny_vae.encode(x, noise=torch.zeros(1, 4, 7, 8))
        assert torch.equal(lat0.z, lat0.mu)
        noise = torch.randn(1, 4, 7, 8)
        a, b = tiny_vae.encode(x, noise), tiny_vae.encode(x, noise)
        assert torch.equal(a.z, b.z)
        assert torch.allclose(a.z, a.mu + torch.exp(0.5 * a.logvar) * noise)


def test_decode_zero_latent_finite(tiny_vae):
    with torch.no_grad():
        assert torch.isfinite(tiny_vae.decode(torch.zeros(1, 4, 7, 8))).all()


def test_encode_errors(tiny_vae):
    with pytest.raises(ValueError, match="divisible"):
        tiny_vae.encode(torch.randn(1, 30, 263))
    with pytest.raises(ValueError, match="width"):
        tiny_vae.encode(torch.randn(1, 32, 262))
    with pytest.raises(ValueError, match="latent shape"):
        tiny_vae.decode(torch.zeros(1, 4, 6, 8))


def test_jointwise_mlp_respects_block_widths():
    mlp = JointwiseMLP([7, 12, 13], 5, [7, 12, 13])
    x = torch.randn(2, 3, 13)
    x2 = x.clone()
    x2[:, 0, 7:] = 99.0  # padding columns of the root block
    assert torch.equal(mlp(x)[:, 0, :7], mlp(x2)[:, 0, :7])
    assert torch.equal(mlp(x)[:, 0, 7:], torch.zeros(2, 6))


def test_joints_have_separate_weights():
    mlp = JointwiseMLP([3, 3], 4, [2, 2])
    x = torch.randn(1, 1, 3).expand(1, 2, 3)
    out = mlp(x)
    assert not torch.allclose(out[0, 0], out[0, 1])


def test_loss_zero_case(idx):
    m = torch.randn(2, 8, 263)
    zero = torch.zeros(2, 2, 7, 4)
    loss = vae_loss(m, m.clone(), zero, zero, *idx)
    assert all(v == 0.0 for v in loss.as_floats().values())


def test_loss_kl_closed_form(idx):
    m = torch.randn(1, 8, 263)
    loss = vae_loss(m, m.clone(), torch.ones(1, 2, 7, 4), torch.zeros(1, 2, 7, 4), *idx)
    assert loss.l_kl.item() == pytest.approx(0.5)
    assert loss.total.item() == pytest.approx(0.01)


def test_loss_terms_oracle(topo, idx):
    rng = np.random.default_rng(0)
    m, mh = rng.standard_normal((2, 4, 263)), rng.standard_normal((2, 4, 263))
    mu, lv = rng.standard_normal((2, 1, 7, 3)), rng.standard_normal((2, 1, 7, 3))
    loss = vae_loss(*(torch.from_numpy(a) for a in (m, mh, mu, lv)), *idx)
    err = np.abs(mh - m)
    pos, vel = idx[0].numpy(), idx[1].numpy()
    kl = np.mean(0.5 * (mu**2 + np.exp(lv) - 1 - lv))
    expected = err.mean() + 0.5 * err[..., pos].mean() + 0.5 * err[..., vel].mean() + 0.02 * kl
    assert loss.l_kl.item() == pytest.approx(kl, rel=1e-12)
    assert loss.total.item() == pytest.approx(expected, rel=1e-12)
    assert len(pos) == 63 and len(vel) == 66


def test_loss_homogeneity(idx):
    m, mh = torch.randn(1, 8, 263), torch.randn(1, 8, 263)
    z = torch.zeros(1, 2, 7, 4)
    a = vae_loss(m, mh, z, z, *idx)
    b = vae_loss(m, m + 2 * (mh - m), z, z, *idx)
    for f in ("l_m", "l_pos", "l_vel"):
        assert getattr(b, f).item() == pytest.approx(2 * getattr(a, f).item(), rel=1e-5)


def test_loss_shape_mismatch(idx):
    with pytest.raises(ValueError):
        vae_loss(torch.zeros(1, 4, 263), torch.zeros(1, 8, 263), torch.zeros(1), torch.zeros(1), *idx)


@given(st.floats(-10, 10), st.floats(-10, 10))
def test_kl_non_negative(mu, lv):
    kl = 0.5 * (mu**2 + np.exp(lv) - 1 - lv)
    assert kl >= -1e-12
    m = torch.zeros(1, 4, 263)
    loss = vae_loss(m, m, torch.tensor([mu]), torch.tensor([lv]), torch.tensor([0]), torch.tensor([0]))
    assert loss.l_kl.item() >= -1e-6


def test_lambda_kl_zero_removes_gradient(idx):
    m = torch.randn(1, 4, 263)
    mu = torch.randn(1, 1, 7, 2, requires_grad=True)
    lv = torch.randn(1, 1, 7, 2, requires_grad=True)
    loss = vae_loss(m, m + 0.1, mu, lv, *idx, lambda_kl=0.0)
    assert not loss.total.requires_grad
    loss = vae_loss(m, m + 0.1, mu, lv, *idx)
    loss.total.backward()
    assert mu.grad is not None and mu.grad.abs().sum() > 0


def test_gradcheck_loss_inputs(idx):
    torch.manual_seed(0)
    m = torch.randn(1, 4, 263, dtype=torch.float64)
    mh = torch.randn(1, 4, 263, dtype=torch.float64, requires_grad=True)
    mu = torch.randn(1, 1, 7, 3, dtype=torch.float64, requires_grad=True)
    lv = torch.randn(1, 1, 7, 3, dtype=torch.float64, requires_grad=True)
    fn = lambda a, b, c: vae_loss(m, a, b, c, *idx).total  # noqa: E731
    assert torch.autograd.gradcheck(fn, (mh, mu, lv), eps=1e-4, atol=1e-7, rtol=1e-3)


def test_gradient_parameter_slice(topo, plan, idx):
    """Central differences on a 3x3 slice of the first joint-wise weight."""
    torch.manual_seed(0)
    vae = SkeletonVAE(topo, plan, VAEConfig(latent_dim=4, hidden_dim=6)).double()
    x = torch.randn(1, 8, 263, dtype=torch.float64)
    noise = torch.randn(1, 2, 7, 4, dtype=torch.float64)

    def loss():
        m_hat, lat = vae(x, noise)
        return vae_loss(x, m_hat, lat.mu, lat.logvar, *idx).total

    loss().backward()
    w = vae.enc_in.w1
    analytic = w.grad[0, :3, :3].clone()
    numeric = torch.zeros(3, 3, dtype=torch.float64)
    h = 1e-4
    with torch.no_grad():
        for i in range(3):
            for k in range(3):
                w[0, i, k] += h
                up = loss().item()
                w[0, i, k] -= 2 * h
                down = loss().item()
                w[0, i, k] += h
                numeric[i, k] = (up - down) / (2 * h)
    rel = (analytic - numeric).norm() / numeric.norm()
    assert rel < 1e-3


def test_training_reduces_loss_and_is_deterministic(topo, plan):
    clips = generate_synthetic_corpus(0, 8, topo, n_frames=32)
    cfg = dict(latent_dim=8, hidden_dim=16, window=32, batch_size=4, steps=60, lr=1e-3, warmup=10)
    _, h1 = train_vae(clips, VAEConfig(**cfg), topo, plan)
    _, h2 = train_vae(clips, VAEConfig(**cfg), topo, plan)
    assert h1[-1]["total"] < h1[0]["total"]
    assert h1[50]["total"] == h2[50]["total"]


def test_training_rejects_empty_corpus(topo, plan):
    with pytest.raises(ValueError, match="empty"):
        train_vae([], VAEConfig(steps=1), topo, plan)


def test_checkpoint_round_trip(tmp_path, tiny_vae, topo):
    path = tmp_path / "vae.npz"
    save_vae(path, tiny_vae)
    back = load_vae(path)
    clip = generate_synthetic_corpus(1, 1, topo, n_frames=32)[0]
    a = encode_motion(tiny_vae, clip.motion, torch.zeros(8, 7, 8))
    b = encode_motion(back, clip.motion, torch.zeros(8, 7, 8))
    assert torch.equal(a.z, b.z)
    assert np.array_equal(decode_latent(tiny_vae, a.z).data, decode_latent(back, b.z).data)
    assert decode_latent(back, b.z).n_frames == 32

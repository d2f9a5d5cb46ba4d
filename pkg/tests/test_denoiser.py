import pytest
import torch

from ego2front.conditioning import ConditioningBundle, ConceptEmbedding, PoseControlBranch
from ego2front.denoiser import (
    DenoiserSpec,
    NoisePredictor,
    control_site_shapes,
    parameter_census,
    predict_noise,
    timestep_embedding,
)
from ego2front.tensors import LatentTensor


def small_spec(**overrides):
    kw = dict(
        base_channels=16,
        channel_multipliers=(1, 2),
        attention_levels=(1,),
        in_channels=8,
        out_channels=4,
        embed_dim=32,
        num_heads=2,
    )
    kw.update(overrides)
    return DenoiserSpec(**kw)


@pytest.fixture
def net():
    torch.manual_seed(0)
    model = NoisePredictor(small_spec())
    model.eval()
    return model


def tokens(batch=1, n=1, dim=32, seed=0):
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(batch, n, dim, generator=gen)


class TestSpecValidation:
    def test_attention_level_bounds(self):
        with pytest.raises(ValueError, match="attention level"):
            small_spec(attention_levels=(5,))

    def test_in_channels_cover_fusion(self):
        with pytest.raises(ValueError, match="in_channels"):
            small_spec(in_channels=2, out_channels=4)


class TestForward:
    def test_output_shape_contract(self, net):
        z = torch.randn(1, 8, 8, 8)
        out = net(z, torch.tensor([3]), tokens())
        assert out.shape == (1, 4, 8, 8)

    def test_zero_init_control_is_neutral(self, net):
        torch.manual_seed(1)
        branch = PoseControlBranch(net.spec, downsample_factor=8)
        z = torch.randn(2, 8, 8, 8)
        mask = torch.rand(2, 1, 64, 64)
        t = torch.tensor([4, 9])
        tok = tokens(batch=2)
        with torch.no_grad():
            residuals = branch(mask, z, t)
            with_control = net(z, t, tok, residuals)
            without = net(z, t, tok, None)
        assert torch.equal(with_control, without)

    def test_inference_determinism(self, net):
        z = torch.randn(1, 8, 8, 8)
        t = torch.tensor([7])
        tok = tokens()
        with torch.no_grad():
            a = net(z, t, tok)
            b = net(z, t, tok)
        assert torch.equal(a, b)

    def test_zero_input_finite_output(self, net):
        with torch.no_grad():
            out = net(torch.zeros(1, 8, 8, 8), torch.tensor([1]), torch.zeros(1, 1, 32))
        assert torch.isfinite(out).all()

    def test_wrong_in_channels_rejected(self, net):
        with pytest.raises(ValueError, match="channels"):
            net(torch.randn(1, 5, 8, 8), torch.tensor([1]), tokens())

    def test_bad_residual_shape_names_site(self, net):
        z = torch.randn(1, 8, 8, 8)
        shapes = control_site_shapes(net.spec, (8, 8))
        residuals = [torch.zeros(1, *s) for s in shapes]
        residuals[1] = torch.zeros(1, 3, 3, 3)
        with pytest.raises(ValueError, match="down block 1"):
            net(z, torch.tensor([1]), tokens(), residuals)
        residuals = [torch.zeros(1, *s) for s in shapes]
        residuals[-1] = torch.zeros(1, 1, 1, 1)
        with pytest.raises(ValueError, match="mid block"):
            net(z, torch.tensor([1]), tokens(), residuals)

    def test_residual_count_checked(self, net):
        z = torch.randn(1, 8, 8, 8)
        with pytest.raises(ValueError, match="control residuals"):
            net(z, torch.tensor([1]), tokens(), [torch.zeros(1, 16, 8, 8)])


def test_predict_noise_single_sample(net):
    bundle = ConditioningBundle(
        concept=ConceptEmbedding(tokens()[0], "global_cls"),
        control_residuals=None,
        ego_latent=LatentTensor(torch.randn(4, 8, 8)),
    )
    out = predict_noise(net, LatentTensor(torch.randn(8, 8, 8)), 2, bundle)
    assert out.data.shape == (4, 8, 8)


def test_timestep_embedding_shape_and_distinctness():
    emb = timestep_embedding(torch.tensor([1, 500, 1000]), 64)
    assert emb.shape == (3, 64)
    assert not torch.allclose(emb[0], emb[1])
    assert torch.isfinite(emb).all()


class TestCensus:
    def test_frozen_trainable_tags(self, tiny_model):
        census = {g.name: g for g in parameter_census(tiny_model.parameter_groups())}
        assert not census["codec"].trainable
        assert not census["concept_backbone"].trainable
        assert census["concept_projection"].trainable
        assert census["control_branch"].trainable
        assert census["denoiser"].trainable

    def test_control_projections_present_and_trainable(self, tiny_model):
        projections = tiny_model.control.projections
        assert len(projections) == tiny_model.control.site_count
        for proj in projections:
            assert proj.weight.requires_grad and proj.bias.requires_grad

    def test_total_trainable_matches_brute_force_recount(self, tiny_model):
        census = parameter_census(tiny_model.parameter_groups())
        census_total = sum(g.parameter_count for g in census if g.trainable)
        recount = sum(p.numel() for p in tiny_model.parameters() if p.requires_grad)
        assert census_total == recount
        assert recount == sum(p.numel() for p in tiny_model.trainable_parameters())


def test_cross_attention_sensitivity_after_training(trained_tiny_model):
    model, _ = trained_tiny_model
    z = torch.randn(1, 8, 4, 4, generator=torch.Generator().manual_seed(0))
    t = torch.tensor([3])
    tok_a = tokens(dim=model.denoiser.spec.embed_dim, seed=1)
    tok_b = tokens(dim=model.denoiser.spec.embed_dim, seed=2)
    with torch.no_grad():
        out_a = model.denoiser(z, t, tok_a)
        out_b = model.denoiser(z, t, tok_b)
    assert float((out_a - out_b).pow(2).sum()) > 0.0


def test_gradients_reach_every_trainable_group(tiny_model):
    from ego2front.objective import LossWeights, compound_loss
    from ego2front.toydata import synthetic_samples

    batch = synthetic_samples(2, size=32, seed=3)
    res = compound_loss(tiny_model, batch, LossWeights(), seed=11)
    res.total.backward()
    for name, module in tiny_model.parameter_groups().items():
        params = [p for p in module.parameters() if p.requires_grad]
        if not params:
            continue
        got = [p for p in params if p.grad is not None and torch.isfinite(p.grad).all()]
        assert len(got) == len(params), f"group {name}: missing or non-finite gradients"
        assert any(float(p.grad.abs().sum()) > 0 for p in params), f"group {name}: all-zero gradients"

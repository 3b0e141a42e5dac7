import numpy as np
import pytest

from pointpretrain import autodiff as ad
from pointpretrain.model import Model, ModelConfig, ModelConfigError
from pointpretrain.patching import MaskSpec, fps, knn_patches, sample_mask, split
from pointpretrain.verify import miniature_loss, miniature_setup

CFG = ModelConfig(embed_dim=16, encoder_depth=2, decoder_depth=1, num_heads=2,
                  mlp_ratio=2.0, teacher_dim=8, n_patches=6, k_nn=4)


@pytest.fixture
def model():
    return Model.init(CFG, seed=0, dtype=np.float64)


def _patch_inputs(seed=0, n=6, k=4):
    rng = np.random.default_rng(seed)
    cloud = rng.normal(0.0, 0.3, size=(48, 3))
    centers, _ = fps(cloud, n, rng)
    return knn_patches(cloud, centers, k)


class TestTokenEmbedding:
    def test_identical_patches_get_identical_tokens(self, model):
        patch = np.random.default_rng(1).normal(size=(1, 4, 3))
        patches = np.concatenate([patch, patch], axis=0)
        centers = np.array([[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]])
        tokens, pos = model.embed_tokens(patches, centers)
        assert np.array_equal(tokens.data[0], tokens.data[1])
        assert not np.array_equal(pos.data[0], pos.data[1])

    def test_token_batch_shape(self, model):
        ps = _patch_inputs()
        tokens, pos = model.embed_tokens(ps.patches, ps.centers)
        assert tokens.shape == (6, 16)
        assert pos.shape == (6, 16)

    def test_point_permutation_inside_patch_keeps_token(self, model):
        ps = _patch_inputs(seed=2)
        tokens, _ = model.embed_tokens(ps.patches, ps.centers)
        rng = np.random.default_rng(3)
        shuffled = ps.patches[:, rng.permutation(4)]
        tokens2, _ = model.embed_tokens(shuffled, ps.centers)
        assert np.abs(tokens.data - tokens2.data).max() < 1e-12

    def test_shape_mismatch_rejected(self, model):
        with pytest.raises(ModelConfigError, match="patches must be"):
            model.embed_tokens(np.zeros((2, 3, 3)), np.zeros((2, 3)))


class TestEncoder:
    def test_depth_zero_is_identity_path(self):
        cfg = ModelConfig(embed_dim=16, encoder_depth=0, decoder_depth=1, num_heads=2,
                          teacher_dim=8, n_patches=6, k_nn=4)
        m = Model.init(cfg, seed=0, dtype=np.float64)
        ps = _patch_inputs()
        tokens, pos = m.embed_tokens(ps.patches, ps.centers)
        out = m.encode(tokens, pos)
        assert np.array_equal(out.data, tokens.data + pos.data)

    def test_output_rows_match_input_rows(self, model):
        ps = _patch_inputs()
        mask = sample_mask(6, (0.6, 0.8), np.random.default_rng(0))
        visible, _ = split(ps, mask)
        tv, pv = model.embed_tokens(visible.patches, visible.centers)
        assert model.encode(tv, pv).shape == (mask.n_visible, 16)
        tf, pf = model.embed_tokens(ps.patches, ps.centers)
        assert model.encode(tf, pf).shape == (6, 16)

    def test_visible_and_full_pass_share_parameters(self, model):
        # same underlying tensors, not copies
        before = {k: id(v) for k, v in model.params.items()}
        ps = _patch_inputs()
        t, p = model.embed_tokens(ps.patches, ps.centers)
        model.encode(t, p)
        after = {k: id(v) for k, v in model.params.items()}
        assert before == after


class TestDecoder:
    def test_prediction_shape_contract(self, model):
        ps = _patch_inputs()
        mask = sample_mask(6, (0.6, 0.8), np.random.default_rng(1))
        visible, _ = split(ps, mask)
        t, p = model.embed_tokens(visible.patches, visible.centers)
        feats = model.encode(t, p)
        pred = model.decode_masked(feats, mask, ps.centers)
        assert pred.shape == (mask.n_masked, 4, 3)

    def test_zero_masked_gives_empty_prediction(self, model):
        ps = _patch_inputs()
        mask = MaskSpec(masked_indices=[], visible_indices=np.arange(6), ratio=0.0, n=6)
        t, p = model.embed_tokens(ps.patches, ps.centers)
        feats = model.encode(t, p)
        pred = model.decode_masked(feats, mask, ps.centers)
        assert pred.shape == (0, 4, 3)

    def test_visible_row_order_does_not_matter(self, model):
        ps = _patch_inputs(seed=5)
        mask = sample_mask(6, (0.6, 0.8), np.random.default_rng(2))
        visible, _ = split(ps, mask)
        t, p = model.embed_tokens(visible.patches, visible.centers)
        feats = model.encode(t, p)
        base = model.decode_masked(feats, mask, ps.centers)

        perm = np.random.default_rng(3).permutation(mask.n_visible)
        shuffled_feats = ad.take(feats, perm)
        shuffled = model.decode_masked(shuffled_feats, mask, ps.centers,
                                       visible_order=mask.visible_indices[perm])
        assert np.array_equal(base.data, shuffled.data)

    def test_inconsistent_mask_rejected(self, model):
        ps = _patch_inputs()
        mask = sample_mask(6, (0.6, 0.8), np.random.default_rng(1))
        t, p = model.embed_tokens(ps.patches, ps.centers)
        feats = model.encode(t, p)   # all 6 rows, not just the visible ones
        with pytest.raises(ModelConfigError, match="visible"):
            model.decode_masked(feats, mask, ps.centers)


class TestPoolingAndProjection:
    def test_projected_embedding_is_unit_norm(self, model):
        for seed in range(5):
            ps = _patch_inputs(seed=seed)
            emb = model.scene_embedding(ps.patches, ps.centers)
            assert abs(np.linalg.norm(emb.data) - 1.0) < 1e-6
            assert emb.shape == (8,)

    def test_patch_order_invariance_of_pooled_outputs(self, model):
        ps = _patch_inputs(seed=7)
        emb = model.scene_embedding(ps.patches, ps.centers)
        perm = np.random.default_rng(11).permutation(6)
        emb2 = model.scene_embedding(ps.patches[perm], ps.centers[perm])
        assert np.abs(emb.data - emb2.data).max() < 1e-6

    def test_mean_pooling_mode(self):
        cfg = ModelConfig(embed_dim=16, encoder_depth=1, decoder_depth=1, num_heads=2,
                          teacher_dim=8, n_patches=6, k_nn=4, pooling="mean")
        m = Model.init(cfg, seed=0, dtype=np.float64)
        ps = _patch_inputs()
        feats = m.encode_patches(ps.patches, ps.centers)
        pooled = m.pool(feats)
        assert np.allclose(pooled.data, feats.data.mean(axis=0))


class TestPermutationEquivariance:
    def test_per_patch_outputs_permute_with_inputs(self, model):
        ps = _patch_inputs(seed=13)
        feats = model.encode_patches(ps.patches, ps.centers)
        perm = np.random.default_rng(17).permutation(6)
        feats_p = model.encode_patches(ps.patches[perm], ps.centers[perm])
        assert np.abs(feats_p.data - feats.data[perm]).max() < 1e-6


def test_config_validation():
    with pytest.raises(ModelConfigError, match="divisible"):
        ModelConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ModelConfigError, match="pooling"):
        ModelConfig(pooling="sum")


def test_full_forward_gradient_check_miniature():
    model, cfg, batch = miniature_setup(seed=1)
    names = list(model.params)
    arrays = [model.params[n].data for n in names]

    def rebuild(*tensors):
        return miniature_loss(Model(cfg, dict(zip(names, tensors))), cfg, batch)

    err = ad.grad_check(rebuild, arrays, eps=1e-6, max_coords_per_input=3,
                        rng=np.random.default_rng(5))
    assert err < 1e-4

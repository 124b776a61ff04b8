"""
Tests for primitive attention, episode similarity, decoders and the assembled model.
"""

import dataclasses

import numpy as np
import pytest

from errors import ConfigError, DimensionError
from fssd import (AttentionConfig, DecoderHead, FSSDModel, HolisticCrossAttention, ModelConfig, PrimitiveBank,
                  StandardCrossAttention, attend_single, decode_vector, dual_reconstruct, episode_similarity,
                  h_mca, interpolate_primitives, predict, s_mca, standardize_rows)
from layers import Module
from shapegen import sample_episode
from tensor import Tensor, no_grad, numerical_gradient, relative_error
from trainer import episode_targets, forward_episode, total_loss


def to_float64(module: Module) -> Module:
    for param in module.parameters():
        param.data = param.data.astype(np.float64)
    return module


def set_identity(linear):
    linear.weight.data = np.eye(*linear.weight.shape)
    linear.bias.data = np.zeros_like(linear.bias.data)


def orthonormal_bank(dim: int, count: int) -> PrimitiveBank:
    bank = PrimitiveBank(count, dim, np.random.default_rng(0), dtype=np.float64)
    bank.phi.data = np.eye(dim)[:count]
    return bank


@pytest.fixture
def attention_parts():
    rng = np.random.default_rng(4)
    bank = PrimitiveBank(10, 16, rng, dtype=np.float64)
    config = AttentionConfig(dim=16, heads=4)
    holistic = to_float64(HolisticCrossAttention(bank, config, rng))
    standard = to_float64(StandardCrossAttention(bank, config, rng))
    return bank, holistic, standard


class TestPrimitiveBank:
    def test_rows_are_unit_norm(self):
        bank = PrimitiveBank(60, 64, np.random.default_rng(0))
        np.testing.assert_allclose(np.linalg.norm(bank.phi.data, axis=1), 1.0, rtol=1e-5)
        assert bank.num_primitives == 60

    def test_needs_a_primitive(self):
        with pytest.raises(ConfigError):
            PrimitiveBank(0, 8, np.random.default_rng(0))


class TestAttendSingle:
    def test_single_primitive(self, rng):
        phi = Tensor(rng.normal(size=(1, 6)))
        weights, out = attend_single(Tensor(rng.normal(size=(3, 6))), phi)
        np.testing.assert_array_equal(weights.data, np.ones((3, 1)))
        np.testing.assert_allclose(out.data, np.repeat(phi.data, 3, axis=0))

    def test_large_aligned_query_selects_its_primitive(self):
        phi = orthonormal_bank(8, 4).phi
        weights, out = attend_single(Tensor(50.0 * phi.data[1:2]), phi)
        np.testing.assert_allclose(weights.data, [[0, 1, 0, 0]], atol=1e-3)
        np.testing.assert_allclose(out.data, phi.data[1:2], atol=1e-3)

    def test_weights_are_a_distribution_and_output_in_row_space(self, rng):
        phi = Tensor(rng.normal(size=(7, 5)))
        weights, out = attend_single(Tensor(rng.normal(size=(4, 5)) * 3), phi)
        np.testing.assert_allclose(weights.data.sum(axis=1), 1.0, atol=1e-6)
        assert ((weights.data > 0) & (weights.data < 1)).all()
        assert np.abs(out.data - weights.data @ phi.data).max() < 1e-6

    def test_empty_bank(self):
        with pytest.raises(DimensionError):
            attend_single(Tensor(np.ones((2, 3))), Tensor(np.ones((0, 3))))

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            attend_single(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    @pytest.mark.parametrize('draw', range(100))
    def test_cosine_numerator_expands_over_primitive_pairs(self, draw):
        rng = np.random.default_rng(draw)
        phi = Tensor(rng.normal(size=(6, 8)))
        weights, out = attend_single(Tensor(rng.normal(size=(2, 8))), phi)
        w_s, w_q = weights.data
        gram = phi.data @ phi.data.T
        expanded = sum(w_s[i] * w_q[j] * gram[i, j] for i in range(6) for j in range(6))
        assert abs(out.data[0] @ out.data[1] - expanded) < 1e-6

    def test_orthonormal_primitives_reduce_to_weight_overlap(self, rng):
        phi = orthonormal_bank(8, 5).phi
        weights, out = attend_single(Tensor(rng.normal(size=(2, 8))), phi)
        assert abs(out.data[0] @ out.data[1] - weights.data[0] @ weights.data[1]) < 1e-6


class TestHolisticAttention:
    def test_single_identity_head_matches_attend_single(self, rng):
        bank = PrimitiveBank(5, 6, rng, dtype=np.float64)
        holistic = to_float64(HolisticCrossAttention(bank, AttentionConfig(6, 1), rng))
        for layer in (holistic.query, holistic.key, holistic.out):
            set_identity(layer)
        q = Tensor(rng.normal(size=(3, 6)))
        _, expected = attend_single(q, bank.phi)
        np.testing.assert_allclose(holistic(q).data, expected.data, atol=1e-12)

    def test_effective_weights_and_row_space(self, attention_parts, rng):
        bank, holistic, _ = attention_parts
        result = holistic.attend(Tensor(rng.normal(size=(5, 16))))
        np.testing.assert_allclose(result.effective_weights.data.sum(axis=1), 1.0, atol=1e-6)
        residual = result.pre_projection.data - result.effective_weights.data @ bank.phi.data
        assert np.abs(residual).max() < 1e-6

    def test_width_mismatch(self, attention_parts):
        _, holistic, _ = attention_parts
        with pytest.raises(DimensionError):
            holistic(Tensor(np.ones((2, 8))))


class TestStandardAttention:
    def test_single_identity_head_matches_attend_single(self, rng):
        bank = PrimitiveBank(5, 6, rng, dtype=np.float64)
        standard = to_float64(StandardCrossAttention(bank, AttentionConfig(6, 1), rng))
        for layer in (standard.query, standard.key, standard.value, standard.out):
            set_identity(layer)
        q = Tensor(rng.normal(size=(3, 6)))
        _, expected = attend_single(q, bank.phi)
        np.testing.assert_allclose(standard(q).data, expected.data, atol=1e-12)

    def test_output_shape(self):
        rng = np.random.default_rng(0)
        bank = PrimitiveBank(60, 64, rng)
        standard = StandardCrossAttention(bank, AttentionConfig(64, 4), rng)
        assert standard(Tensor(rng.normal(size=(3, 64)).astype(np.float32))).shape == (3, 64)

    def test_heads_must_divide_width(self, rng):
        with pytest.raises(ConfigError):
            StandardCrossAttention(PrimitiveBank(4, 10, rng), AttentionConfig(10, 4), rng)

    def test_gradient_with_respect_to_primitives(self, attention_parts, gradcheck, rng):
        bank, _, standard = attention_parts
        q = Tensor(rng.normal(size=(3, 16)))

        def through_bank(phi):
            return standard(q)

        gradcheck(through_bank, [bank.phi], rng, tolerance=1e-4)


class TestDualReconstruction:
    def test_sum_identity(self, attention_parts, rng):
        _, holistic, standard = attention_parts
        q_h, q_s, q_prime = dual_reconstruct(Tensor(rng.normal(size=(4, 16))), holistic, standard)
        np.testing.assert_array_equal(q_prime.data, q_h.data + q_s.data)
        np.testing.assert_allclose(q_prime.data - q_h.data, q_s.data, atol=1e-6)
        assert q_h.shape == q_s.shape == q_prime.shape == (4, 16)

    def test_functional_wrappers_match_modules(self, attention_parts, rng):
        _, holistic, standard = attention_parts
        q = Tensor(rng.normal(size=(3, 16)))
        q_h, q_s, _ = dual_reconstruct(q, holistic, standard)
        np.testing.assert_array_equal(h_mca(q, holistic).data, q_h.data)
        np.testing.assert_array_equal(s_mca(q, standard).data, q_s.data)

    def test_zero_standard_projection_leaves_holistic_path(self, attention_parts, rng):
        _, holistic, standard = attention_parts
        standard.out.weight.data = np.zeros_like(standard.out.weight.data)
        standard.out.bias.data = np.zeros_like(standard.out.bias.data)
        q_h, _, q_prime = dual_reconstruct(Tensor(rng.normal(size=(2, 16))), holistic, standard)
        np.testing.assert_array_equal(q_prime.data, q_h.data)

    def test_both_paths_share_one_bank(self, attention_parts, rng):
        bank, holistic, standard = attention_parts
        assert holistic.bank.phi is standard.bank.phi is bank.phi
        q = Tensor(rng.normal(size=(2, 16)))
        before_h, before_s = holistic(q).data, standard(q).data
        bank.phi.data = bank.phi.data + 0.1 * rng.normal(size=bank.phi.shape)
        assert not np.allclose(holistic(q).data, before_h)
        assert not np.allclose(standard(q).data, before_s)


class TestEpisodeSimilarity:
    def test_query_equal_to_support_scores_one(self, rng):
        support = Tensor(rng.normal(size=(3, 8)))
        logits, flagged = episode_similarity(support, Tensor(support.data[1:2]), shots=1, ways=3)
        assert logits.data[0, 1] == pytest.approx(1.0)
        assert predict(logits.data)[0] == 1
        assert not flagged

    def test_positive_rescaling_keeps_scores(self, rng):
        support, query = rng.normal(size=(2, 8)), rng.normal(size=(4, 8))
        base, _ = episode_similarity(Tensor(support), Tensor(query), 1, 2)
        scaled, _ = episode_similarity(Tensor(support * [[3.0], [0.5]]), Tensor(query * 7.0), 1, 2)
        np.testing.assert_allclose(scaled.data, base.data, atol=1e-12)

    def test_multi_shot_prototypes_are_class_means(self, rng):
        support = rng.normal(size=(6, 5))
        query = rng.normal(size=(2, 5))
        logits, _ = episode_similarity(Tensor(support), Tensor(query), shots=3, ways=2)
        prototypes = support.reshape(2, 3, 5).mean(axis=1)
        expected = (query / np.linalg.norm(query, axis=1, keepdims=True)) @ \
            (prototypes / np.linalg.norm(prototypes, axis=1, keepdims=True)).T
        np.testing.assert_allclose(logits.data, expected, atol=1e-12)

    def test_zero_norm_rows_are_flagged_and_score_zero(self):
        support = Tensor(np.array([[0.0, 0.0], [1.0, 0.0]]))
        logits, flagged = episode_similarity(support, Tensor(np.array([[1.0, 1.0]])), 1, 2)
        assert flagged
        assert logits.data[0, 0] == 0.0

    def test_ties_resolve_to_lowest_slot(self):
        np.testing.assert_array_equal(predict(np.array([[0.5, 0.5, 0.1]])), [0])

    def test_support_row_count(self, rng):
        with pytest.raises(DimensionError):
            episode_similarity(Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(1, 4))), 2, 2)


class TestDecoder:
    def test_output_range_and_shape(self, rng):
        head = DecoderHead(16, rng)
        out = head(Tensor(rng.normal(size=(3, 16)).astype(np.float32) * 5)).data
        assert out.shape == (3, 1, 32, 32)
        assert ((out > 0) & (out < 1)).all()

    def test_repeated_decoding_is_bit_identical(self, rng):
        head = DecoderHead(16, rng)
        features = Tensor(rng.normal(size=(2, 16)).astype(np.float32))
        np.testing.assert_array_equal(head(features).data, head(features).data)


class TestStandardizeRows:
    def test_scale_and_offset_do_not_matter(self, rng):
        x = rng.normal(size=(4, 16))
        base = standardize_rows(Tensor(x)).data
        np.testing.assert_allclose(standardize_rows(Tensor(5000.0 * x + 3.0)).data, base, atol=1e-9)
        np.testing.assert_allclose(np.linalg.norm(base, axis=1), 4.0)
        np.testing.assert_allclose(base.mean(axis=1), 0.0, atol=1e-12)

    def test_constant_rows_become_zero(self):
        np.testing.assert_array_equal(standardize_rows(Tensor(np.full((2, 8), 7.0))).data, 0.0)

    def test_gradient(self, gradcheck, rng):
        gradcheck(standardize_rows, [Tensor(rng.normal(size=(3, 8)))], rng)


class TestModel:
    @pytest.fixture(scope='class')
    def small_model(self):
        return FSSDModel(ModelConfig(primitives=12, heads=4, embed_dim=16), np.random.default_rng(2))

    def test_bank_is_named_first_and_shared(self, small_model):
        names = [name for name, _ in small_model.named_parameters()]
        assert names[0] == 'bank.phi'
        assert names.count('bank.phi') == 1
        assert not any(name.endswith('.bank.phi') for name in names)
        assert small_model.h_mca.bank is small_model.s_mca.bank is small_model.bank

    @pytest.mark.parametrize('attention,keys', [
        ('dual', ['q', 'q_h', 'q_prime']),
        ('hmca', ['q', 'q_prime']),
        ('smca', ['q', 'q_prime']),
    ])
    def test_decoded_features_per_attention_mode(self, attention, keys, rng):
        model = FSSDModel(ModelConfig(primitives=4, heads=2, embed_dim=8, attention=attention), rng)
        features = model(Tensor(rng.uniform(size=(2, 1, 32, 32)).astype(np.float32)))
        assert model.decoded_features(features) == keys
        assert all(features[key].shape == (2, 8) for key in keys)

    def test_embedding_rows_are_standardised(self, small_model, tiny_test_split):
        first = tiny_test_split.samples[tiny_test_split.class_ids[0]][:4]
        images = Tensor(np.stack([s.image for s in first])[:, None].astype(np.float32))
        with no_grad():
            q = small_model(images)['q'].data
        np.testing.assert_allclose(np.linalg.norm(q, axis=1), 4.0, rtol=1e-4)
        np.testing.assert_allclose(q.mean(axis=1), 0.0, atol=1e-5)

    def test_reconstruction_is_added_to_the_embedding(self, rng):
        model = to_float64(FSSDModel(ModelConfig(primitives=6, heads=2, embed_dim=8), rng))
        images = Tensor(rng.uniform(size=(3, 1, 32, 32)))
        features = model(images)
        np.testing.assert_allclose(features['q_prime'].data - features['q'].data,
                                   features['q_h'].data + features['q_s'].data, atol=1e-12)
        for attention in (model.h_mca, model.s_mca):
            attention.out.weight.data = np.zeros_like(attention.out.weight.data)
            attention.out.bias.data = np.zeros_like(attention.out.bias.data)
        features = model(images)
        np.testing.assert_array_equal(features['q_prime'].data, features['q'].data)
        assert np.ptp(features['q_prime'].data, axis=0).max() > 1e-3

    def test_attention_is_not_uniform_at_initialisation(self, small_model, tiny_test_split):
        samples = [samples[0] for samples in tiny_test_split.samples.values()]
        images = Tensor(np.stack([s.image for s in samples])[:, None].astype(np.float32))
        with no_grad():
            weights = small_model.h_mca.attend(small_model.embed(images)).effective_weights.data
        uniform = 1.0 / small_model.bank.num_primitives
        assert np.abs(weights - uniform).max() > 0.02
        assert weights.std(axis=0).max() > 1e-3

    def test_invalid_config(self):
        with pytest.raises(ConfigError):
            ModelConfig(heads=3, embed_dim=64).validate()
        with pytest.raises(ConfigError):
            ModelConfig(decoder='bogus').validate()

    @pytest.mark.parametrize('part', ['support', 'query'])
    def test_episode_logits_are_invariant_to_quarter_turns(self, small_model, tiny_test_split, part):
        episode = sample_episode(tiny_test_split, ways=3, shots=1, queries=2, rng=np.random.default_rng(0))
        items = list(getattr(episode, part))
        sample, slot = items[0]
        items[0] = (dataclasses.replace(sample, image=np.ascontiguousarray(np.rot90(sample.image))), slot)
        turned = dataclasses.replace(episode, **{part: items})
        with no_grad():
            base = forward_episode(small_model, episode, decode=False)['logits'].data
            logits = forward_episode(small_model, turned, decode=False)['logits'].data
        np.testing.assert_allclose(logits, base, atol=1e-4)

    def test_full_loss_gradient_with_respect_to_primitives(self, tiny_test_split):
        model = to_float64(FSSDModel(ModelConfig(primitives=4, heads=4, embed_dim=8), np.random.default_rng(1)))
        episode = sample_episode(tiny_test_split, ways=2, shots=1, queries=1, rng=np.random.default_rng(3))
        truth = episode_targets(episode)

        def loss():
            value, _ = total_loss(forward_episode(model, episode), truth)
            return value

        phi = model.bank.phi
        phi.grad = None
        loss().backward()
        numeric = numerical_gradient(loss, phi)
        assert relative_error(phi.grad, numeric) < 1e-4


class TestInterpolation:
    @pytest.fixture(scope='class')
    def model(self):
        return FSSDModel(ModelConfig(primitives=6, heads=2, embed_dim=8), np.random.default_rng(5))

    def test_eleven_frames_with_exact_endpoints(self, model):
        frames = interpolate_primitives(model, 0, 1)
        assert len(frames) == 11
        phi = model.bank.phi.data
        np.testing.assert_array_equal(frames[-1], decode_vector(model, phi[0]))
        np.testing.assert_array_equal(frames[0], decode_vector(model, phi[1]))

    def test_adjacent_frames_change_less_than_endpoints(self, model):
        frames = interpolate_primitives(model, 2, 4)
        adjacent = np.mean([np.abs(b - a).mean() for a, b in zip(frames[:-1], frames[1:])])
        assert adjacent < np.abs(frames[-1] - frames[0]).mean()

    @pytest.mark.parametrize('i,j', [(0, 0), (-1, 2), (0, 6)])
    def test_invalid_indices(self, model, i, j):
        with pytest.raises(DimensionError):
            interpolate_primitives(model, i, j)

    def test_decode_vector_records_no_tape(self, model):
        raster = decode_vector(model, model.bank.phi.data[3], head='edge')
        assert raster.shape == (32, 32)
        assert all(param.grad is None for param in model.parameters())

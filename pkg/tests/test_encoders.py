import numpy as np
import pytest

from arguelab.autodiff import Tensor, cosine_similarity, gradient_check
from arguelab.encoders import (
    ImageEncoder,
    TextEncoder,
    VocabWords,
    Vocabulary,
    build_vocabulary,
    tokenize,
)
from arguelab.errors import (
    DimensionMismatch,
    DuplicateToken,
    EmptySequence,
    EmptySpec,
    SequenceTooLong,
    UnknownToken,
    VersionMismatch,
)


def small_words() -> VocabWords:
    return VocabWords(
        class_names=[f"class_{c}" for c in range(10)],
        attribute_texts=[f"attr_{c}_{j}" for c in range(10) for j in range(15)],
        negative_texts=["background"],
        template_words=["a", "photo", "of"],
    )


class TestVocabulary:
    def test_counting(self):
        vocab = build_vocabulary(small_words(), d_tok=16, seed=3)
        # pad + 3 template + 10 classes + 150 attributes + 1 negative
        assert len(vocab) == 1 + 3 + 10 + 150 + 1

    def test_determinism(self):
        v1 = build_vocabulary(small_words(), d_tok=16, seed=3)
        v2 = build_vocabulary(small_words(), d_tok=16, seed=3)
        np.testing.assert_array_equal(v1.embeddings, v2.embeddings)
        assert v1.content_hash() == v2.content_hash()

    def test_seed_changes_table(self):
        v1 = build_vocabulary(small_words(), d_tok=16, seed=3)
        v2 = build_vocabulary(small_words(), d_tok=16, seed=4)
        assert not np.array_equal(v1.embeddings, v2.embeddings)

    def test_shared_attribute_single_id(self):
        words = VocabWords(
            class_names=["cat", "dog"],
            attribute_texts=["long tail", "long tail", "black paw"],
            template_words=["a", "photo", "of"],
        )
        vocab = build_vocabulary(words, d_tok=8, seed=0)
        assert vocab.id_of("long") == vocab.id_of("long")
        assert len(vocab) == 1 + 3 + 2 + 4  # pad, template, classes, {long,tail,black,paw}

    def test_free_form_unit_norm(self):
        vocab = build_vocabulary(small_words(), d_tok=16, seed=9)
        for token in ("a", "photo", "class_3", "attr_4_7"):
            assert np.linalg.norm(vocab.embedding_of(token)) == pytest.approx(1.0, abs=1e-12)

    def test_planted_conflicts(self):
        words = VocabWords(class_names=["cat"], attribute_texts=["tail", "tail"])
        planted = {"tail": np.ones(8)}
        vocab = build_vocabulary(words, d_tok=8, seed=0, planted=planted)
        np.testing.assert_array_equal(vocab.embedding_of("tail"), np.ones(8))

    def test_empty_spec(self):
        with pytest.raises(EmptySpec):
            build_vocabulary(VocabWords(class_names=[]), d_tok=8, seed=0)

    def test_immutable_embeddings(self):
        vocab = build_vocabulary(small_words(), d_tok=16, seed=1)
        with pytest.raises(ValueError):
            vocab.embeddings[0, 0] = 1.0

    def test_json_roundtrip(self):
        vocab = build_vocabulary(small_words(), d_tok=16, seed=5)
        clone = Vocabulary.from_json_dict(vocab.to_json_dict())
        np.testing.assert_array_equal(vocab.embeddings, clone.embeddings)
        assert clone.content_hash() == vocab.content_hash()
        assert clone.id_of("class_7") == vocab.id_of("class_7")

    def test_json_version_check(self):
        payload = build_vocabulary(small_words(), d_tok=16, seed=5).to_json_dict()
        payload["version"] = 99
        with pytest.raises(VersionMismatch):
            Vocabulary.from_json_dict(payload)


class TestTokenize:
    @pytest.fixture()
    def vocab(self):
        words = VocabWords(class_names=["cat"], template_words=["a", "photo", "of"])
        return build_vocabulary(words, d_tok=8, seed=0)

    def test_order_preserved(self, vocab):
        ids = tokenize("a photo of a cat", vocab)
        assert ids == [vocab.id_of("a"), vocab.id_of("photo"), vocab.id_of("of"),
                       vocab.id_of("a"), vocab.id_of("cat")]

    def test_empty(self, vocab):
        assert tokenize("", vocab) == []

    def test_unknown(self, vocab):
        with pytest.raises(UnknownToken, match="zorp"):
            tokenize("a zorp", vocab)

    def test_too_long(self, vocab):
        with pytest.raises(SequenceTooLong):
            tokenize("a a a a a", vocab, max_len=4)


class TestTextEncoder:
    @pytest.fixture()
    def enc(self):
        return TextEncoder(seed=11, d_tok=16, d_out=24, d_hidden=32, max_len=8)

    def test_deterministic(self, enc):
        rng = np.random.default_rng(0)
        seq = [rng.normal(size=16) for _ in range(3)]
        out1 = enc.encode(seq).data
        out2 = enc.encode(seq).data
        np.testing.assert_array_equal(out1, out2)
        twin = TextEncoder(seed=11, d_tok=16, d_out=24, d_hidden=32, max_len=8)
        np.testing.assert_array_equal(twin.encode(seq).data, out1)

    def test_unit_norm(self, enc):
        rng = np.random.default_rng(1)
        for length in (1, 2, 5, 8):
            seq = [rng.normal(size=16) for _ in range(length)]
            assert np.linalg.norm(enc.encode(seq).data) == pytest.approx(1.0, abs=1e-9)

    def test_order_sensitivity(self, enc):
        rng = np.random.default_rng(2)
        u, w = rng.normal(size=(2, 16))
        a = enc.encode([u, w]).data
        b = enc.encode([w, u]).data
        assert np.linalg.norm(a - b) > 1e-6

    def test_errors(self, enc):
        with pytest.raises(EmptySequence):
            enc.encode([])
        with pytest.raises(SequenceTooLong):
            enc.encode([np.zeros(16)] * 9)
        with pytest.raises(DimensionMismatch):
            enc.encode([np.zeros(7)])

    def test_gradient_through_encoder(self, enc):
        rng = np.random.default_rng(3)
        target = rng.normal(size=24)
        frozen = rng.normal(size=16)

        def loss(flat):
            tokens = [flat * 1.0, Tensor(frozen)]
            emb = enc.encode(tokens)
            return 1.0 - cosine_similarity(emb, Tensor(target))

        report = gradient_check(loss, rng.normal(size=16) * 0.5)
        assert report.max_rel_err < 1e-4

    def test_frozen_weights(self, enc):
        with pytest.raises(ValueError):
            enc.w1[0, 0] = 5.0


class TestImageEncoder:
    def test_deterministic_and_unit(self):
        enc = ImageEncoder(seed=4, d_in=12, d_out=20)
        rng = np.random.default_rng(5)
        f = rng.normal(size=12)
        e1, e2 = enc.encode(f), enc.encode(f)
        np.testing.assert_array_equal(e1, e2)
        assert np.linalg.norm(e1) == pytest.approx(1.0, abs=1e-9)

    def test_zero_features_defined(self):
        enc = ImageEncoder(seed=4, d_in=12, d_out=20)
        out = enc.encode(np.zeros(12))
        assert np.all(np.isfinite(out))
        assert np.linalg.norm(out) == pytest.approx(1.0, abs=1e-9)

    def test_zero_bias_scale_invariance(self):
        enc = ImageEncoder(seed=4, d_in=12, d_out=20, bias_scale=0.0)
        rng = np.random.default_rng(6)
        f = rng.normal(size=12)
        np.testing.assert_allclose(enc.encode(f), enc.encode(2.0 * f), atol=1e-12)

    def test_batch_encode(self):
        enc = ImageEncoder(seed=4, d_in=12, d_out=20)
        rng = np.random.default_rng(7)
        batch = rng.normal(size=(5, 12))
        out = enc.encode(batch)
        assert out.shape == (5, 20)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)

    def test_dimension_mismatch(self):
        enc = ImageEncoder(seed=4, d_in=12, d_out=20)
        with pytest.raises(DimensionMismatch):
            enc.encode(np.zeros(13))

    def test_angle_preservation(self):
        # Orthonormal rows mean feature-space angles survive the linear part.
        enc = ImageEncoder(seed=8, d_in=10, d_out=16, bias_scale=0.0)
        rng = np.random.default_rng(9)
        a, b = rng.normal(size=(2, 10))
        want = np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b))
        got = np.dot(enc.map_direction(a), enc.map_direction(b))
        assert got == pytest.approx(want, abs=1e-9)

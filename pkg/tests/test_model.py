import numpy as np
import pytest

from molseq import autodiff as ad
from molseq import model as md
from molseq.errors import ShapeMismatch
from molseq.smiles import build_vocabulary
from molseq.train import sgd_step


def small_model(seed=0, include_molecule=True, num_classes=3):
    return md.Model(md.ModelConfig(
        vocab_size=9, frame_dim=4, num_classes=num_classes, embed_dim=6,
        token_dim=4, mol_hidden=5, seq_hidden=5, seed=seed,
        include_molecule=include_molecule,
    ))


class TestTokenCounts:
    def test_all_padding(self):
        with pytest.raises(md.AllPadding):
            md.token_count_matrix(np.array([[0, 0, 0]]), 9)

    def test_id_out_of_range(self):
        with pytest.raises(md.IdOutOfRange):
            md.token_count_matrix(np.array([[1, 9]]), 9)

    def test_rows_sum_to_one(self):
        counts = md.token_count_matrix(np.array([[2, 2, 3, 0], [4, 0, 0, 0]]), 5)
        np.testing.assert_allclose(counts.sum(axis=1), 1.0)
        assert counts[0, 2] == pytest.approx(2 / 3)
        assert (counts[:, 0] == 0).all()  # PAD never counted


class TestMoleculeEncoder:
    def test_identical_ids_any_length(self):
        model = small_model()
        one = model.encode_molecule([[3]]).data
        many = model.encode_molecule([[3, 3, 3, 3, 3]]).data
        assert (one == many).all()

    def test_trailing_pads_are_ignored(self):
        model = small_model()
        bare = model.encode_molecule([[2, 5, 7]]).data
        padded = model.encode_molecule([[2, 5, 7, 0, 0, 0]]).data
        assert (bare == padded).all()

    def test_output_shape_and_finite(self):
        model = small_model()
        out = model.encode_molecule([[2, 3, 4], [5, 6, 0]])
        assert out.shape == (2, 6)
        assert np.isfinite(out.data).all()

    def test_gradient_through_embedding_table(self):
        model = small_model()
        ids = np.array([[2, 3, 3, 0], [4, 5, 6, 7]])
        counts = md.token_count_matrix(ids, model.config.vocab_size)
        proj = np.random.default_rng(0).normal(size=(6, 1))
        names = ["mol.emb", "mol.w1", "mol.b1", "mol.w2", "mol.b2"]
        values = [model.params[n].value for n in names]

        def f(leaves):
            lv = dict(zip(names, leaves))
            enc = model.molecule.forward_counts(counts, lv)
            return ad.sum_(ad.matmul(enc, ad.constant(proj)))

        assert ad.finite_difference_check(f, values) <= 1e-5


class TestSequenceEncoder:
    def test_pool_single_frame(self):
        frame = np.array([[1.0, -2.0, 3.0, 0.5]])
        pooled = md.pool_frames(frame)
        np.testing.assert_array_equal(pooled[:4], frame[0])
        np.testing.assert_array_equal(pooled[4:], frame[0])

    def test_duplicating_frames_changes_nothing(self, rng):
        frames = rng.normal(size=(5, 4))
        doubled = np.repeat(frames, 2, axis=0)
        np.testing.assert_allclose(md.pool_frames(frames), md.pool_frames(doubled), atol=1e-12)

    def test_frame_order_invariance(self, rng):
        frames = rng.normal(size=(6, 4))
        shuffled = frames[rng.permutation(6)]
        np.testing.assert_allclose(md.pool_frames(frames), md.pool_frames(shuffled), atol=1e-12)

    def test_empty_sequence(self):
        with pytest.raises(md.EmptySequence):
            md.pool_frames(np.zeros((0, 4)))

    def test_encode_shape_and_finite(self, rng):
        model = small_model()
        out = model.encode_sequence(rng.normal(size=(16, 4)))
        assert out.shape == (1, 6)
        assert np.isfinite(out.data).all()

    def test_wide_embedding_shape_contract(self, rng):
        model = md.Model(md.ModelConfig(vocab_size=4, frame_dim=8, num_classes=2, embed_dim=2048, seed=0))
        out = model.encode_sequence(rng.normal(size=(3, 8)))
        assert out.shape == (1, 2048)


class TestClassifierHead:
    def test_zero_weights_zero_logits(self, rng):
        model = small_model()
        model.params["head.w"].value = np.zeros((6, 3))
        model.params["head.b"].value = np.zeros(3)
        emb = ad.constant(rng.normal(size=(4, 6)))
        assert (model.classify(emb).data == 0).all()

    def test_identity_weights_pass_through(self, rng):
        model = md.Model(md.ModelConfig(vocab_size=4, frame_dim=4, num_classes=6, embed_dim=6, seed=0))
        model.params["head.w"].value = np.eye(6)
        model.params["head.b"].value = np.zeros(6)
        emb = rng.normal(size=(2, 6))
        np.testing.assert_array_equal(model.classify(ad.constant(emb)).data, emb)

    def test_softmax_of_logits_sums_to_one(self, rng):
        model = small_model()
        logits = model.classify(ad.constant(rng.normal(size=(5, 6))))
        probs = ad.row_softmax(logits).data
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_dimension_mismatch(self):
        model = small_model()
        with pytest.raises(ShapeMismatch):
            model.classify(ad.constant(np.zeros((2, 7))))


class TestFreezing:
    def _step_all(self, model, steps=5, lr=0.1):
        rng = np.random.default_rng(0)
        velocity = {}
        for _ in range(steps):
            grads = {n: rng.normal(size=p.value.shape) for n, p in model.params.items()}
            sgd_step(model.params, grads, lr, 0.9, velocity)

    def test_frozen_parameters_never_move(self):
        model = small_model()
        model.params.set_trainable("mol.", False)
        before = {n: p.value.copy() for n, p in model.params.items()}
        self._step_all(model, steps=100)
        for name, p in model.params.items():
            if name.startswith("mol."):
                assert (p.value == before[name]).all()
            else:
                assert not (p.value == before[name]).all()

    def test_unfreeze_resumes_updates(self):
        model = small_model()
        model.params.set_trainable("mol.", False)
        self._step_all(model)
        frozen = model.params["mol.emb"].value.copy()
        model.params.set_trainable("mol.", True)
        self._step_all(model)
        assert not (model.params["mol.emb"].value == frozen).all()

    def test_no_such_parameter(self):
        model = small_model()
        with pytest.raises(md.NoSuchParameter):
            model.params.set_trainable("bogus.", False)

    def test_as_leaves_respects_flags(self):
        model = small_model()
        model.params.set_trainable("seq.", False)
        leaves = model.params.as_leaves()
        assert not leaves["seq.w1"].requires_grad
        assert leaves["mol.w1"].requires_grad


class TestDeterminism:
    def test_same_seed_bitwise_identical(self):
        a, b = small_model(seed=3), small_model(seed=3)
        for name in a.params.names():
            assert (a.params[name].value == b.params[name].value).all()

    def test_different_seed_differs(self):
        a, b = small_model(seed=3), small_model(seed=4)
        assert not (a.params["seq.w1"].value == b.params["seq.w1"].value).all()


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        model = small_model(seed=9)
        model.params.set_trainable("mol.", False)
        vocab = build_vocabulary(["CCO", "c1ccccc1"])
        centers = rng.normal(size=(3, 6))
        path = tmp_path / "ckpt.npz"
        md.save_checkpoint(path, model, vocab, extra_config={"stage": "pretrain_drug"},
                           centers=centers, center_alpha=0.5)
        ckpt = md.load_checkpoint(path)
        assert ckpt.vocabulary.token_to_id == vocab.token_to_id
        assert ckpt.extra_config == {"stage": "pretrain_drug"}
        assert ckpt.center_alpha == 0.5
        np.testing.assert_array_equal(ckpt.centers, centers)
        rebuilt = ckpt.build_model()
        for name in model.params.names():
            np.testing.assert_array_equal(rebuilt.params[name].value, model.params[name].value)
            assert rebuilt.params[name].trainable == model.params[name].trainable

    def test_format_tag_mismatch_fails_loudly(self, tmp_path):
        model = small_model()
        vocab = build_vocabulary(["CCO"])
        path = tmp_path / "ckpt.npz"
        md.save_checkpoint(path, model, vocab)
        import json

        import numpy as np_

        with np_.load(path) as data:
            arrays = {k: data[k] for k in data.files}
        meta = json.loads(str(arrays["__meta__"]))
        meta["format"] = "something-else"
        arrays["__meta__"] = np_.array(json.dumps(meta))
        np_.savez(path, **arrays)
        with pytest.raises(md.CheckpointFormatError):
            md.load_checkpoint(path)

    def test_load_parameters_shape_mismatch(self):
        model = small_model()
        with pytest.raises(ShapeMismatch):
            model.load_parameters({"seq.w1": np.zeros((2, 2))})

    def test_load_parameters_prefix_filter(self):
        src = small_model(seed=1)
        dst = small_model(seed=2)
        saved = {n: p.value for n, p in src.params.items()}
        loaded = dst.load_parameters(saved, prefixes=("seq.",))
        assert all(n.startswith("seq.") for n in loaded)
        np.testing.assert_array_equal(dst.params["seq.w1"].value, src.params["seq.w1"].value)
        assert not (dst.params["mol.emb"].value == src.params["mol.emb"].value).all()

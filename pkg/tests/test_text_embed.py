import numpy as np
import pytest

from exprflow.errors import NotFoundError, ValidationError
from exprflow.text_embed import (CK_LABELS, ExpressionVocabulary, HashingEmbedder, LookupEmbedder, embed,
                                 instruction_corpus, make_provider, render_instruction, save_embeddings, tokenize)


@pytest.mark.parametrize("tid,src,dst,text", [
    (1, "disgust", "happiness", "Turn this face from disgust to happiness."),
    (2, "anger", "fear", "Change this face from anger to fear."),
    (3, "fear", "surprise", "Transform this face from fear to surprise."),
    (4, "sadness", "contempt", "Modify this face, changing it from sadness to contempt."),
    (5, "happiness", "anger", "Replace this face from happiness to anger."),
])
def test_templates_render_exactly(tid, src, dst, text):
    inst = render_instruction(tid, src, dst)
    assert inst.text == text
    assert (inst.template_id, inst.expr_from, inst.expr_to) == (tid, src, dst)


def test_same_label_is_allowed():
    assert render_instruction(1, "fear", "fear").text == "Turn this face from fear to fear."


@pytest.mark.parametrize("args", [(1, "joy", "sadness"), (6, "fear", "anger"), (0, "fear", "anger")])
def test_render_rejects_bad_input(args):
    with pytest.raises(ValidationError):
        render_instruction(*args)


def test_vocabularies():
    assert len(ExpressionVocabulary.ck()) == 7
    assert len(ExpressionVocabulary.celebv()) == 8 and "neutral" in ExpressionVocabulary.celebv()
    assert ExpressionVocabulary.ck().index("anger") == CK_LABELS.index("anger")
    with pytest.raises(ValidationError):
        ExpressionVocabulary(["a", "a"])


def test_vocab_round_trip(tmp_path):
    v = ExpressionVocabulary.celebv()
    v.save(tmp_path / "v.json")
    assert ExpressionVocabulary.load(tmp_path / "v.json") == v


def test_default_shape_is_full_scale():
    assert embed(HashingEmbedder(), "Turn this face from fear to anger.").shape == (77, 768)


def test_embedding_is_deterministic():
    a = HashingEmbedder(16, 64, seed=3).embed("Change this face from fear to anger.")
    b = HashingEmbedder(16, 64, seed=3).embed("Change this face from fear to anger.")
    assert np.array_equal(a, b)
    c = HashingEmbedder(16, 64, seed=4).embed("Change this face from fear to anger.")
    assert not np.array_equal(a, c)


def test_rows_unit_norm_then_zero_padded():
    text = "Turn this face from fear to anger."
    out = HashingEmbedder(16, 64).embed(text)
    n_tokens = len(tokenize(text))
    norms = np.linalg.norm(out, axis=1)
    np.testing.assert_allclose(norms[:n_tokens], 1.0, atol=1e-12, rtol=0)
    assert (norms[n_tokens:] == 0).all()


def test_shape_stable_under_long_text():
    text = " ".join(["word"] * 200)
    assert HashingEmbedder(16, 64).embed(text).shape == (16, 64)


def test_corpus_has_no_collisions():
    corpus = instruction_corpus(ExpressionVocabulary.ck())
    assert len(corpus) == 210
    provider = HashingEmbedder()
    mats = np.stack([provider.embed(i.text) for i in corpus]).reshape(210, -1)
    sq = (mats ** 2).sum(1)
    dists = np.sqrt(np.maximum(sq[:, None] + sq[None] - 2 * mats @ mats.T, 0))
    np.fill_diagonal(dists, np.inf)
    assert dists.min() > 1e-6


def test_word_order_survives_pooling():
    p = HashingEmbedder(16, 64)
    a = p.embed("Turn this face from fear to anger.").mean(0)
    b = p.embed("Turn this face from anger to fear.").mean(0)
    assert np.linalg.norm(a - b) > 1e-3


@pytest.mark.parametrize("text", ["", "   ", "!!!"])
def test_empty_text_rejected(text):
    with pytest.raises(ValidationError):
        HashingEmbedder(16, 64).embed(text)


def test_lookup_archive_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    table = {"Replace this face from fear to anger.": rng.normal(size=(4, 8)).astype(np.float32),
             "Turn this face from fear to anger.": rng.normal(size=(4, 8)).astype(np.float32)}
    save_embeddings(tmp_path / "emb", table)
    provider = LookupEmbedder.load(tmp_path / "emb")
    np.testing.assert_array_equal(provider.embed("Turn this face from fear to anger."),
                                  table["Turn this face from fear to anger."])
    # the bracketed surface form of template 5 resolves to the same key
    np.testing.assert_array_equal(provider.embed("Replace this face from [fear to [anger]."),
                                  table["Replace this face from fear to anger."])
    again = make_provider(provider.config())
    assert again.shape == (4, 8)


def test_lookup_miss_names_key(tmp_path):
    save_embeddings(tmp_path / "emb", {"a b": np.zeros((2, 2))})
    with pytest.raises(NotFoundError, match="Turn this face"):
        LookupEmbedder.load(tmp_path / "emb").embed("Turn this face from fear to anger.")


def test_unknown_provider_kind():
    with pytest.raises(ValidationError):
        make_provider({"kind": "clip"})

import numpy as np
import pytest

from conftest import load_pinned, micro_model, random_feats
from dsct import tensor as T
from dsct.data import BOS, EOS, CaptionBatch, FeatureBatch, FeaturePair, Item, collate_features
from dsct.dnd import GumbelConfig
from dsct.model import (BaselineModel, Dsct, ModelConfig, beam_search, build_model, forward_train, fuse_variant,
                        greedy_decode)
from dsct.tensor import ContractError
from exhaustive import census, exhaustive_top_k

GOLDEN_CFG = dict(vocab_size=10, d_model=8, heads=2, enc_layers=2, dec_layers=2, d_ff=16, max_len=8,
                  feature_dim_region=6, feature_dim_seg=6, keep_prob=1.0)


def golden_feats(golden):
    return FeatureBatch.single(golden["full.region"], golden["full.seg"])


@pytest.mark.parametrize("fusion", ["dnm", "add", "concat", "baseline"])
def test_logits_match_composed_oracle(golden, fusion):
    model = build_model(ModelConfig(fusion=fusion, **GOLDEN_CFG), 0)
    load_pinned(model, golden, f"full_{fusion}")
    ids = golden["full.ids"][None]
    logits, psis = model.forward(golden_feats(golden), ids)
    np.testing.assert_allclose(logits.data[0], golden[f"full_{fusion}.logits"], atol=1e-10)
    if fusion == "dnm":
        assert np.array_equal(np.stack([p.data[0] for p in psis]), golden["full_dnm.psis"])


class TestConfig:
    def test_full_scale_defaults(self):
        c = ModelConfig(vocab_size=100)
        assert (c.d_model, c.heads, c.enc_layers, c.dec_layers, c.beam, c.keep_prob) == (512, 8, 3, 3, 5, 0.9)
        assert c.feature_dim_region == c.feature_dim_seg == 2048

    @pytest.mark.parametrize("bad", [dict(d_model=10, heads=4), dict(beam=0), dict(max_len=1),
                                     dict(fusion="mean"), dict(keep_prob=0.0)])
    def test_invariants(self, bad):
        with pytest.raises(ContractError):
            ModelConfig(vocab_size=20, **bad)

    def test_round_trip(self):
        c = ModelConfig.desk(37, gumbel=GumbelConfig(temperature=0.5))
        assert ModelConfig.from_dict(c.to_dict()) == c


@pytest.mark.parametrize("fusion", ["dnm", "add", "concat", "baseline"])
@pytest.mark.parametrize("layers", [(1, 1), (2, 3)])
def test_parameter_census(fusion, layers):
    cfg = ModelConfig(vocab_size=11, d_model=8, heads=2, enc_layers=layers[0], dec_layers=layers[1], d_ff=12,
                      max_len=6, feature_dim_region=5, feature_dim_seg=7, fusion=fusion)
    expect = census(8, 2, 12, 11, 5, 7, layers[0], layers[1], fusion)
    assert build_model(cfg, 0).num_parameters() == expect


def test_desk_census():
    cfg = ModelConfig.desk(37)
    assert build_model(cfg, 0).num_parameters() == census(64, 4, 128, 37, 32, 32, 2, 2, "dnm") == 210985


class TestForward:
    def test_shape_and_distribution(self, rng):
        model = micro_model()
        caps = CaptionBatch.from_sequences([[BOS, 4, 5, EOS], [BOS, 6, EOS]])
        logits = forward_train(model, random_feats(rng, model.config, 2), caps, training=False)
        assert logits.shape == (2, 3, 10)
        p = T.softmax(logits).data
        assert np.all(np.abs(p.sum(-1) - 1) < 1e-12)

    def test_token_out_of_range(self, rng):
        model = micro_model()
        with pytest.raises(ContractError):
            model.forward(random_feats(rng, model.config), np.array([[BOS, 10]]))

    def test_must_start_with_bos(self, rng):
        model = micro_model()
        caps = CaptionBatch(np.array([[4], [2]]), np.array([[True], [True]]))
        with pytest.raises(ContractError):
            forward_train(model, random_feats(rng, model.config), caps)

    @pytest.mark.parametrize("fusion", ["dnm", "baseline"])
    def test_batch_equals_stacked_examples(self, fusion):
        r = np.random.default_rng(3)
        model = micro_model(fusion=fusion).to(np.float32)
        items = [(r.normal(size=(n_r, 6)), r.normal(size=(n_s, 6)), seq)
                 for n_r, n_s, seq in [(2, 4, [BOS, 4, 5, 6, EOS]), (3, 2, [BOS, 7, EOS]), (1, 3, [BOS, 3, 9, EOS])]]
        fb = collate_features([Item(None, FeaturePair(a.astype(np.float32), b.astype(np.float32)), [s])
                               for a, b, s in items])
        caps = CaptionBatch.from_sequences([s for _, _, s in items])
        batched = forward_train(model, fb, caps, training=False).data
        for i, (a, b, s) in enumerate(items):
            single = model.forward(FeatureBatch.single(a, b), np.array([s[:-1]]))[0].data[0]
            np.testing.assert_allclose(batched[i, :len(s) - 1], single, atol=1e-5)

    @pytest.mark.parametrize("fusion", ["dnm", "add", "concat", "baseline"])
    def test_causal(self, fusion, rng):
        model = micro_model(fusion=fusion, enc_layers=2, dec_layers=2)
        feats = random_feats(rng, model.config)
        ids = rng.integers(3, 10, size=8)
        ids[0] = BOS
        base = model.forward(feats, ids[None])[0].data[0]
        for t in range(8):
            other = ids.copy()
            other[t + 1:] = rng.integers(3, 10, size=7 - t)
            out = model.forward(feats, other[None])[0].data[0]
            assert np.array_equal(out[:t + 1], base[:t + 1])

    def test_fuse_variant_reexport(self, rng):
        z = T.Tensor(rng.normal(size=(2, 3)))
        assert np.array_equal(fuse_variant("add", z, z).data, 2 * z.data)

    def test_kinds(self):
        assert isinstance(micro_model(fusion="baseline"), BaselineModel)
        assert isinstance(micro_model(fusion="concat"), Dsct)


def beam_micro(seed, vocab_size=6, max_len=3, **kw):
    return micro_model(seed, vocab_size=vocab_size, max_len=max_len, **kw)


def model_next_logprobs(model, feats):
    def f(prefix):
        with T.no_grad():
            logits, _ = model.forward(feats, np.array([prefix]))
        return T.log_softmax(logits[:, -1, :]).data[0]
    return f


class TestDecoding:
    def test_eos_favoring_head_gives_empty_caption(self, rng):
        model = micro_model()
        model.head.weight.data[:] = 0
        model.head.bias.data[:] = 0
        model.head.bias.data[EOS] = 50.0
        feats = random_feats(rng, model.config)
        assert greedy_decode(model, feats) == [[BOS, EOS]]
        best = beam_search(model, feats, beam_k=3)[0][0]
        assert best.tokens == [BOS, EOS] and abs(best.logp) < 1e-12

    def test_greedy_deterministic(self, rng):
        model = micro_model(seed=4)
        feats = random_feats(rng, model.config, batch=3)
        assert greedy_decode(model, feats) == greedy_decode(model, feats)

    @pytest.mark.parametrize("seed", range(10))
    def test_beam_one_is_greedy(self, seed):
        r = np.random.default_rng(seed)
        model = micro_model(seed)
        feats = random_feats(r, model.config)
        assert beam_search(model, feats, beam_k=1)[0][0].tokens == greedy_decode(model, feats)[0]

    @pytest.mark.parametrize("seed", range(10))
    def test_beam_five_is_exhaustive(self, seed):
        r = np.random.default_rng(seed)
        model = beam_micro(seed)
        feats = random_feats(r, model.config)
        got = beam_search(model, feats, beam_k=5, max_len=3)[0]
        want = exhaustive_top_k(model_next_logprobs(model, feats), 6, 3, 5)
        assert [h.tokens for h in got] == [s for _, s in want]
        np.testing.assert_allclose([h.logp for h in got], [lp for lp, _ in want], atol=1e-9)

    def test_scores_non_increasing_and_k_returned(self, rng):
        model = micro_model(seed=2, vocab_size=12)
        for hyps in beam_search(model, random_feats(rng, model.config, batch=4), beam_k=4, max_len=6):
            assert len(hyps) == 4
            scores = [h.score for h in hyps]
            assert scores == sorted(scores, reverse=True)
            assert all(h.tokens[0] == BOS and (h.tokens[-1] == EOS or len(h.tokens) == 6) for h in hyps)

    def test_length_normalization(self, rng):
        model = micro_model(seed=2, vocab_size=12)
        hyps = beam_search(model, random_feats(rng, model.config), beam_k=3, length_norm_alpha=0.7)[0]
        for h in hyps:
            assert abs(h.score - h.logp / (len(h.tokens) - 1) ** 0.7) < 1e-12

    def test_beam_wider_than_vocab(self, rng):
        model = micro_model()
        with pytest.raises(ContractError):
            beam_search(model, random_feats(rng, model.config), beam_k=11)
        with pytest.raises(ContractError):
            beam_search(model, random_feats(rng, model.config), beam_k=0)

    def test_batched_beam_matches_single(self, rng):
        model = micro_model(seed=7, vocab_size=12)
        feats = random_feats(rng, model.config, batch=3)
        together = beam_search(model, feats, beam_k=3)
        for i in range(3):
            alone = beam_search(model, feats.take([i]), beam_k=3)[0]
            assert [h.tokens for h in alone] == [h.tokens for h in together[i]]

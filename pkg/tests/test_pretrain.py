import numpy as np
import pytest

from codesearch import autodiff as ad
from codesearch import corpus, model as mdl, pretrain
from codesearch.corpus import CLS, EOS, MASK, PAD, SEP, UNK
from codesearch.pretrain import MlmPretrainer, PretrainConfig, lr_at, mask_sequence, mlm_loss


@pytest.fixture(scope="module")
def enc():
    return mdl.EncoderConfig(vocab_size=64, d_model=16, n_layers=1, n_heads=2,
                             d_ff=32, max_len=12, dropout=0.0)


class TestMaskSequence:
    def seq(self, enc):
        return mdl.encode_pair_sequence([7, 8, 9, 10], [11, 12, 13], enc)

    def test_rate_zero_forces_exactly_one(self, enc):
        ids, mask = self.seq(enc)
        cfg = PretrainConfig(mask_rate=0.0)
        masked, targets = mask_sequence(ids, mask, cfg, np.random.default_rng(0))
        assert len(targets) == 1
        assert (masked != ids).sum() == 1

    def test_rate_near_one_masks_all_content(self, enc):
        ids, mask = self.seq(enc)
        cfg = PretrainConfig(mask_rate=0.999999)
        masked, targets = mask_sequence(ids, mask, cfg, np.random.default_rng(0))
        content = [i for i in range(len(ids)) if mask[i] and ids[i] not in pretrain.NEVER_MASK]
        assert sorted(targets) == content
        for i in (0,):  # [CLS] untouched
            assert masked[i] == ids[i]
        assert all(masked[i] == MASK for i in content)

    def test_monte_carlo_rate(self):
        # long sequences so the force-one rule is a negligible correction
        wide = mdl.EncoderConfig(vocab_size=128, d_model=16, n_layers=1, n_heads=2,
                                 d_ff=32, max_len=64, dropout=0.0)
        ids, mask = mdl.encode_pair_sequence(list(range(7, 37)), list(range(40, 70)), wide)
        cfg = PretrainConfig(mask_rate=0.15)
        rng = np.random.default_rng(42)
        n_maskable = sum(1 for i in range(len(ids))
                         if mask[i] and ids[i] not in pretrain.NEVER_MASK)
        total, hits = 0, 0
        while total < 110_000:
            _, targets = mask_sequence(ids, mask, cfg, rng)
            total += n_maskable
            hits += len(targets)
        assert 0.145 <= hits / total <= 0.155

    def test_specials_never_masked(self, enc):
        ids, mask = self.seq(enc)
        cfg = PretrainConfig(mask_rate=0.5)
        rng = np.random.default_rng(3)
        structural = {PAD, CLS, SEP, EOS, corpus.BOS, MASK}
        for _ in range(2000):
            masked, targets = mask_sequence(ids, mask, cfg, rng)
            for pos, orig in targets.items():
                assert orig not in structural
            for i in range(len(ids)):
                if ids[i] in structural or not mask[i]:
                    assert masked[i] == ids[i]

    def test_unk_is_maskable_content(self, enc):
        ids, mask = mdl.encode_pair_sequence([UNK, UNK], [UNK], enc)
        cfg = PretrainConfig(mask_rate=0.0)
        _, targets = mask_sequence(ids, mask, cfg, np.random.default_rng(0))
        assert len(targets) == 1

    def test_no_maskable_positions_errors(self, enc):
        ids = np.array([CLS, SEP, EOS, PAD])
        mask = np.array([1, 1, 1, 0])
        with pytest.raises(ValueError, match="maskable"):
            mask_sequence(ids, mask, PretrainConfig(), np.random.default_rng(0))

    def test_bert_style_produces_three_outcomes(self, enc):
        ids, mask = self.seq(enc)
        cfg = PretrainConfig(mask_rate=0.999999, mask_style="bert_80_10_10")
        rng = np.random.default_rng(1)
        saw_mask = saw_random = saw_unchanged = False
        for _ in range(300):
            masked, targets = mask_sequence(ids, mask, cfg, rng, vocab_size=enc.vocab_size)
            for pos in targets:
                if masked[pos] == MASK:
                    saw_mask = True
                elif masked[pos] == ids[pos]:
                    saw_unchanged = True
                else:
                    saw_random = True
        assert saw_mask and saw_random and saw_unchanged


class TestMlmLoss:
    def test_uniform_logits_give_log_vocab(self, enc):
        params = mdl.init_params(enc, seed=0)
        params["tok_emb"].data[:] = 0.0  # tied projection: logits collapse to the bias
        params["mlm_b"].data[:] = 0.0
        ids, mask = mdl.encode_pair_sequence([7, 8], [9], enc)
        loss = mlm_loss(params, ids, mask, {1: 8, 4: 9}, enc)
        assert float(loss.data) == pytest.approx(np.log(enc.vocab_size), rel=1e-9)

    def test_confident_logits_drive_loss_to_zero(self, enc):
        cfg = mdl.EncoderConfig(vocab_size=16, d_model=8, n_layers=1, n_heads=2,
                                d_ff=16, max_len=8, dropout=0.0, tie_mlm=False)
        params = mdl.init_params(cfg, seed=0)
        ids, mask = mdl.encode_pair_sequence([7, 8], [9], cfg)
        target = {1: 8}
        # crank the correct class bias far above the rest
        params["mlm_w"].data[:] = 0.0
        params["mlm_b"].data[:] = -50.0
        params["mlm_b"].data[8] = 50.0
        loss = mlm_loss(params, ids, mask, target, cfg)
        assert float(loss.data) < 1e-9

    def test_unmasked_positions_get_zero_logit_gradient(self, enc):
        params = mdl.init_params(enc, seed=1)
        ids, mask = mdl.encode_pair_sequence([7, 8, 9], [10], enc)
        hidden = mdl.forward(params, ids, mask, enc)
        logits = mdl.mlm_logits(params, hidden, enc)
        probe = ad.Tensor(np.zeros_like(logits.data), requires_grad=True)
        bumped = ad.add(logits, probe)
        positions = np.array([2, 5])
        loss = ad.cross_entropy_with_logits(ad.take_rows(bumped, positions), np.array([8, 10]))
        grads = ad.backward(loss, {"probe": probe})
        g = grads["probe"]
        untouched = [i for i in range(g.shape[0]) if i not in positions]
        assert np.all(g[untouched] == 0.0)
        assert np.any(g[positions] != 0.0)

    def test_empty_targets_error(self, enc):
        params = mdl.init_params(enc, seed=0)
        ids, mask = mdl.encode_pair_sequence([7], [8], enc)
        with pytest.raises(ValueError, match="target"):
            mlm_loss(params, ids, mask, {}, enc)

    def test_target_position_out_of_range(self, enc):
        params = mdl.init_params(enc, seed=0)
        ids, mask = mdl.encode_pair_sequence([7], [8], enc)
        with pytest.raises(IndexError):
            mlm_loss(params, ids, mask, {len(ids): 7}, enc)


class TestSchedule:
    def test_endpoints_and_peak(self):
        cfg = PretrainConfig(lr=1e-3, warmup_steps=100, total_steps=1000)
        assert lr_at(0, cfg) == 0.0
        assert lr_at(100, cfg) == pytest.approx(1e-3)
        assert lr_at(1000, cfg) == pytest.approx(0.0)

    def test_piecewise_linear_and_peak_is_lr(self):
        cfg = PretrainConfig(lr=2e-4, warmup_steps=10, total_steps=50)
        values = [lr_at(s, cfg) for s in range(51)]
        assert max(values) == pytest.approx(2e-4)
        ramp = np.diff(values[:11])
        np.testing.assert_allclose(ramp, ramp[0])
        fall = np.diff(values[10:])
        np.testing.assert_allclose(fall, fall[0])

    def test_scaled_default_warmup(self):
        cfg = PretrainConfig(total_steps=300)
        assert cfg.resolved_warmup() == 30
        big = PretrainConfig(total_steps=20_000)
        assert big.resolved_warmup() == 1000

    def test_cosine_decay_endpoints(self):
        cfg = PretrainConfig(lr=1e-3, warmup_steps=10, total_steps=100, decay="cosine")
        assert lr_at(10, cfg) == pytest.approx(1e-3)
        assert lr_at(100, cfg) == pytest.approx(0.0, abs=1e-18)
        assert lr_at(55, cfg) == pytest.approx(1e-3 * 0.5, rel=1e-6)

    def test_step_outside_range(self):
        with pytest.raises(ValueError):
            lr_at(400, PretrainConfig(total_steps=300))


def make_corpora(n=60, seed=0):
    spec = corpus.SyntheticSpec.default()
    raw = corpus.generate_synthetic_corpus(spec, n, seed=seed)
    sources = {k: raw[k] for k in spec.source_languages()}
    vocab = corpus.build_vocab([p for v in raw.values() for p in v], max_size=512)
    return {k: corpus.encode_pairs(v, vocab) for k, v in sources.items()}, vocab


class TestMlmPretrainer:
    def small_encoder(self, vocab):
        return mdl.EncoderConfig(vocab_size=vocab.size, d_model=16, n_layers=1,
                                 n_heads=2, d_ff=32, max_len=20, dropout=0.1)

    def test_short_run_reduces_loss_and_is_deterministic(self):
        corpora, vocab = make_corpora()
        est = MlmPretrainer(encoder=self.small_encoder(vocab), lr=3e-3, total_steps=40,
                            batch_size=16, eval_every=20, seed=7)
        est.fit(corpora)
        first = est.history_[0].train_loss
        last = np.mean([r.train_loss for r in est.history_[-5:]])
        assert last < first
        assert est.checkpoint_.phase == "pretrained"

        again = MlmPretrainer(encoder=self.small_encoder(vocab), lr=3e-3, total_steps=40,
                              batch_size=16, eval_every=20, seed=7).fit(corpora)
        assert [r.train_loss for r in est.history_] == [r.train_loss for r in again.history_]
        assert est.checkpoint_.params.bitwise_equal(again.checkpoint_.params)

    def test_rejects_label_zero_pairs(self):
        corpora, vocab = make_corpora()
        lang = next(iter(corpora))
        poisoned = dict(corpora)
        bad = corpora[lang][0]
        poisoned[lang] = corpora[lang] + [
            corpus.PairExample(bad.nl_tokens, bad.pl_tokens[:-1] or bad.pl_tokens, 0, lang)
        ]
        est = MlmPretrainer(encoder=self.small_encoder(vocab), total_steps=5)
        with pytest.raises(ValueError, match="label"):
            est.fit(poisoned)

    def test_history_csv_roundtrip(self, tmp_path):
        corpora, vocab = make_corpora(n=30)
        est = MlmPretrainer(encoder=self.small_encoder(vocab), total_steps=6,
                            batch_size=8, eval_every=3, seed=1).fit(corpora)
        out = tmp_path / "hist.csv"
        pretrain.write_history_csv(out, est.history_)
        lines = out.read_text().strip().splitlines()
        assert lines[0] == "step,lr,train_loss,valid_loss"
        assert len(lines) == 7

    def test_get_params_sklearn_surface(self):
        est = MlmPretrainer(total_steps=12)
        assert est.get_params()["total_steps"] == 12
        est.set_params(total_steps=24)
        assert est.total_steps == 24

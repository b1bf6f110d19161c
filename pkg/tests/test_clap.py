import numpy as np
import pytest
import torch

from flab.audio import mel_from_samples
from flab.clap import (ClapTrainConfig, EncoderParams, Vocabulary, audio_to_text_top1,
                       build_vocabulary, encode_audio, encode_audio_batch, encode_text,
                       encoder_from_arrays, encoder_to_arrays, init_encoder,
                       load_vocabulary, pad_token_batch, save_vocabulary,
                       symmetric_infonce, text_to_audio_top1, tokenize,
                       train_contrastive)
from flab.corpus import synth_clip
from flab.errors import InputError


@pytest.fixture(scope="module")
def vocab(tiny_wrap):
    return build_vocabulary(list(tiny_wrap.values()), ["extra", "words"])


@pytest.fixture(scope="module")
def tiny_wrap():
    return {"Ping": "a short ping", "Hiss": "steady hiss noise", "Thump": "a low thump"}


class TestVocabulary:
    def test_deterministic_and_sorted(self, tiny_wrap):
        v1 = build_vocabulary(list(tiny_wrap.values()))
        v2 = build_vocabulary(list(reversed(list(tiny_wrap.values()))))
        assert v1.tokens == v2.tokens
        assert v1.tokens[:2] == ("<pad>", "<unk>")

    def test_tokenize_lowercases(self, vocab):
        a = tokenize("A Short PING", vocab)
        b = tokenize("a short ping", vocab)
        assert a.tokens == b.tokens

    def test_unknown_word_maps_to_unk(self, vocab):
        p = tokenize("zebra", vocab)
        assert p.tokens == [1]

    def test_round_trip_file(self, tmp_path, vocab):
        save_vocabulary(tmp_path / "vocab.txt", vocab)
        assert load_vocabulary(tmp_path / "vocab.txt").tokens == vocab.tokens

    def test_empty_prompt_rejected(self, vocab):
        with pytest.raises(InputError):
            pad_token_batch([tokenize("!!!", vocab)])


class TestEncoders:
    def test_text_deterministic_and_unit(self, vocab):
        params = init_encoder(vocab, n_mels=24, embed_dim=32, seed=0)
        e1 = encode_text(tokenize("a short ping", vocab), params)
        e2 = encode_text(tokenize("a short ping", vocab), params)
        np.testing.assert_array_equal(e1, e2)
        assert e1.shape == (32,)
        assert abs(np.linalg.norm(e1) - 1.0) < 1e-5

    def test_default_dim_64(self, vocab):
        params = init_encoder(vocab, n_mels=24, embed_dim=64, seed=0)
        assert encode_text(tokenize("a low thump", vocab), params).shape == (64,)

    def test_audio_unit_and_shape(self, vocab, tiny_stft, tiny_classes):
        params = init_encoder(vocab, n_mels=tiny_stft.n_mels, embed_dim=32, seed=1)
        w = synth_clip(tiny_classes[0], 0, tiny_stft.sample_rate)
        mel = mel_from_samples(w.samples[None], tiny_stft)[0]
        e = encode_audio(mel, params)
        assert e.shape == (32,)
        assert abs(np.linalg.norm(e) - 1.0) < 1e-5
        np.testing.assert_array_equal(e, encode_audio(mel, params))

    def test_audio_shape_mismatch(self, vocab):
        params = init_encoder(vocab, n_mels=24, embed_dim=32, seed=1)
        with pytest.raises(InputError):
            encode_audio(np.zeros((16, 40), dtype=np.float32), params)

    def test_array_round_trip(self, vocab, tiny_stft, tiny_classes):
        params = init_encoder(vocab, n_mels=tiny_stft.n_mels, embed_dim=16, seed=3)
        arrays = encoder_to_arrays(params)
        back = encoder_from_arrays(arrays, vocab, tiny_stft.n_mels, 16, 64, 16)
        w = synth_clip(tiny_classes[1], 2, tiny_stft.sample_rate)
        mel = mel_from_samples(w.samples[None], tiny_stft)[0]
        np.testing.assert_array_equal(encode_audio(mel, params), encode_audio(mel, back))
        p = tokenize("steady hiss noise", vocab)
        np.testing.assert_array_equal(encode_text(p, params), encode_text(p, back))


class TestLoss:
    def test_symmetry(self, rng):
        a = torch.from_numpy(rng.normal(size=(6, 8)).astype(np.float32))
        t = torch.from_numpy(rng.normal(size=(6, 8)).astype(np.float32))
        log_tau = torch.tensor(0.0)
        assert float(symmetric_infonce(a, t, log_tau)) == pytest.approx(
            float(symmetric_infonce(t, a, log_tau)), abs=1e-6)

    @pytest.mark.parametrize("batch", [4, 16])
    def test_init_loss_near_log_b(self, vocab, tiny_stft, tiny_classes, batch, rng):
        # At unit temperature, random-init embeddings give near-uniform softmax.
        params = init_encoder(vocab, tiny_stft.n_mels, 32, seed=5, init_temperature=1.0)
        clips = [synth_clip(tiny_classes[i % 3], i, tiny_stft.sample_rate) for i in range(batch)]
        mels = mel_from_samples(np.stack([c.samples for c in clips]), tiny_stft)
        a = params.audio(torch.from_numpy(mels))
        texts = [tokenize("a short ping", vocab) for _ in range(batch)]
        t = params.text(pad_token_batch(texts)) + torch.from_numpy(
            0.01 * rng.standard_normal((batch, 32)).astype(np.float32))
        with torch.no_grad():
            loss = float(symmetric_infonce(a, t, params.log_temperature))
        assert loss == pytest.approx(np.log(batch), rel=0.05)

    def test_temperature_positive(self, vocab):
        params = init_encoder(vocab, 24, 16, seed=0, init_temperature=0.07)
        assert params.temperature == pytest.approx(0.07, rel=1e-5)
        with pytest.raises(Exception):
            init_encoder(vocab, 24, 16, seed=0, init_temperature=0.0)


@pytest.fixture(scope="module")
def trained_tiny_clap(tiny_stft, tiny_classes, tiny_wrap):
    vocab = build_vocabulary(list(tiny_wrap.values()))
    mels, prompts, labels = [], [], []
    for spec in tiny_classes:
        for i in range(24):
            w = synth_clip(spec, i, tiny_stft.sample_rate)
            mels.append(w.samples)
        prompts += [tokenize(tiny_wrap[spec.name], vocab)] * 24
        labels += [spec.name] * 24
    mel_arr = mel_from_samples(np.stack(mels), tiny_stft)
    pairs = list(zip(mel_arr, prompts))
    cfg = ClapTrainConfig(steps=180, batch_size=24, embed_dim=32, seed=0)
    params, history = train_contrastive(pairs, cfg, vocab, labels=labels)
    return params, history, vocab, mel_arr, labels


class TestTraining:
    def test_held_out_loss_improves(self, trained_tiny_clap):
        _, history, _, _, _ = trained_tiny_clap
        assert history["val_loss_final"] < history["val_loss_init"]

    def test_retrieval_on_train_data(self, trained_tiny_clap, tiny_wrap):
        params, _, vocab, mels, labels = trained_tiny_clap
        audio_embs = encode_audio_batch(mels, params)
        classes = sorted(set(labels))
        text_embs = np.stack([encode_text(tokenize(tiny_wrap[c], vocab), params) for c in classes])
        assert audio_to_text_top1(audio_embs, labels, text_embs, classes) >= 0.9
        assert text_to_audio_top1(text_embs, classes, audio_embs, labels) == 1.0

    def test_alignment_margin(self, trained_tiny_clap, tiny_wrap):
        params, _, vocab, mels, labels = trained_tiny_clap
        audio_embs = encode_audio_batch(mels, params)
        classes = sorted(set(labels))
        text_embs = np.stack([encode_text(tokenize(tiny_wrap[c], vocab), params) for c in classes])
        sims = audio_embs @ text_embs.T
        col = {c: j for j, c in enumerate(classes)}
        matched = np.array([sims[i, col[c]] for i, c in enumerate(labels)])
        mismatched = np.array([sims[i, j] for i, c in enumerate(labels)
                               for j, o in enumerate(classes) if o != c])
        assert matched.mean() > mismatched.mean()

    def test_held_out_margin_rate(self, trained_tiny_clap, tiny_wrap, tiny_stft, tiny_classes):
        # Unseen clips (fresh seeds): matched text must beat each mismatched
        # text on at least 90% of (clip, wrong-class) pairs.
        from flab.clap import matched_margin_rate

        params, _, vocab, _, _ = trained_tiny_clap
        held_mels, held_labels = [], []
        for spec in tiny_classes:
            for seed in range(30, 40):
                w = synth_clip(spec, seed, tiny_stft.sample_rate)
                held_mels.append(w.samples)
                held_labels.append(spec.name)
        embs = encode_audio_batch(mel_from_samples(np.stack(held_mels), tiny_stft), params)
        classes = sorted(set(held_labels))
        text_embs = np.stack([encode_text(tokenize(tiny_wrap[c], vocab), params) for c in classes])
        assert matched_margin_rate(embs, held_labels, text_embs, classes) >= 0.9

    def test_reproducible(self, tiny_stft, tiny_classes, tiny_wrap):
        vocab = build_vocabulary(list(tiny_wrap.values()))
        mels = mel_from_samples(np.stack(
            [synth_clip(s, i, tiny_stft.sample_rate).samples for s in tiny_classes for i in range(4)]),
            tiny_stft)
        prompts = [tokenize(tiny_wrap[s.name], vocab) for s in tiny_classes for _ in range(4)]
        pairs = list(zip(mels, prompts))
        cfg = ClapTrainConfig(steps=5, batch_size=6, embed_dim=16, seed=7, val_fraction=0.2)
        p1, h1 = train_contrastive(pairs, cfg, vocab)
        p2, h2 = train_contrastive(pairs, cfg, vocab)
        assert h1["train_loss"] == h2["train_loss"]
        e1 = encode_text(tokenize("a low thump", vocab), p1)
        e2 = encode_text(tokenize("a low thump", vocab), p2)
        np.testing.assert_array_equal(e1, e2)

    def test_single_class_rejected(self, tiny_stft, tiny_classes, tiny_wrap):
        vocab = build_vocabulary(list(tiny_wrap.values()))
        mels = mel_from_samples(np.stack(
            [synth_clip(tiny_classes[0], i, tiny_stft.sample_rate).samples for i in range(4)]), tiny_stft)
        prompts = [tokenize("a short ping", vocab)] * 4
        cfg = ClapTrainConfig(steps=2, batch_size=4, embed_dim=16, seed=0)
        with pytest.raises(InputError):
            train_contrastive(list(zip(mels, prompts)), cfg, vocab, labels=["Ping"] * 4)

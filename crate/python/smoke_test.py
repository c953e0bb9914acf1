"""Smoke test for the pydeepa extension.

Build and install first:
    cd crates/python && maturin develop --release
Then run:
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import pydeepa


def sine(f0, secs=0.5, sr=16000):
    return [0.3 * math.sin(2 * math.pi * f0 * i / sr) for i in range(int(secs * sr))]


def main():
    sr = 16000
    y = sine(200.0)

    mel = pydeepa.mel_spectrogram(y, sr)
    assert len(mel) == 80 and len(mel[0]) == 100, (len(mel), len(mel[0]))

    f0 = pydeepa.estimate_f0(y, sr)
    voiced = sorted(v for v in f0 if v > 0)
    assert voiced and abs(voiced[len(voiced) // 2] - 200.0) < 4.0, voiced[:5]

    assert pydeepa.mcd(y, y, sr) == 0.0
    assert pydeepa.f0_md([100.0, 100.0, 100.0], [101.0, 102.0, 400.0]) == 2.0
    assert pydeepa.vuv_error_rate([0.0, 100.0], [100.0, 100.0]) == 0.5
    assert abs(pydeepa.kl_divergence([[1.0]], [[0.0]]) - 0.5) < 1e-9

    try:
        pydeepa.f0_md([0.0], [0.0])
    except pydeepa.DeepaError:
        pass
    else:
        raise AssertionError("all-unvoiced MD should raise")

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        pydeepa.save_wav(y, sr, tmp / "a.wav")
        back, rate = pydeepa.load_wav(tmp / "a.wav")
        assert rate == sr and len(back) == len(y)

        # A few steps of a tiny model, then the inference path on its checkpoint.
        pydeepa.write_corpus(tmp / "corpus", count=2, seconds=0.5, seed=1)
        config = '{"batch_size": 1, "crop_frames": 20, "synth_crop_frames": 8, "max_steps": 2}'
        trainer = pydeepa.Trainer(tmp / "corpus", config)
        losses = [trainer.step()["total"] for _ in range(2)]
        assert all(math.isfinite(v) for v in losses), losses
        trainer.save(tmp / "ckpt")

        voc = pydeepa.Vocoder.load(tmp / "ckpt")
        latent, hz = voc.analyze(y, sr)
        assert latent.frames == 100 and latent.latent_dim == 16 and len(hz) == 100
        row = latent.f0_row()
        moved = latent.with_f0_row([0.5] * len(row))
        assert moved.f0_row() == [0.5] * len(row)
        out = voc.synthesize(latent)
        assert len(out) == 100 * 80
        assert len(voc.copy_synthesis(y, sr, seed=3)) == 100 * 80

    print("pydeepa smoke test passed")


if __name__ == "__main__":
    main()

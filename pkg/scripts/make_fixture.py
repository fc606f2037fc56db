"""Build the tiny model + manifest shipped in tests/fixtures/tiny.

    python3 scripts/make_fixture.py [--out tests/fixtures/tiny]
"""

import argparse
import logging
from pathlib import Path

from aphasiakit import corpus
from aphasiakit.model import ModelConfig
from aphasiakit.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "tiny"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    spec = corpus.SyntheticSpec(speakers_per_class=2, utterances_per_speaker=3, vocab_size=6,
                                feature_dim=4, noise_std=0.0, seed=5)
    records = corpus.generate_synthetic(spec)
    out = Path(args.out)
    corpus.save_corpus(records, out)
    cfg = ModelConfig(num_layers=2, hidden=8, heads=2, mlp_units=8, decoder_layers=1, decoder_ffn=16,
                      interctc_layers=(1,), interctc_targets=("tag_prefixed_tokens",), tag_mode="both")
    result = train(records, records, cfg, TrainConfig(epochs=2, batch_size=4, warmup_steps=2, keep_best=1))
    result.model.save(out / "model.ckpt")
    print(f"wrote {out}")


if __name__ == "__main__":
    main()

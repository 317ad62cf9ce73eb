"""Smoke test for the faithlog extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/python/Cargo.toml
    pip install target/wheels/faithlog-*.whl
"""

import math
import os
import tempfile

import faithlog


def main():
    pe = faithlog.positional_encoding(3, 8)
    assert abs(pe[0] - math.sin(3.0)) < 1e-12

    corpus = faithlog.generate(n_sequences=120, seed=7)
    assert len(corpus.templates) == 55
    parser = faithlog.DrainParser()
    for line in corpus.lines:
        parser.parse(line)
    assert len(parser.templates) == 55

    train, test = faithlog.split(corpus.sequences, 0.8, 7)
    config = "epochs = 2\nbatch_size = 16\nd_model = 8\nn_heads = 2\nn_layers = 1\n"
    model, log = faithlog.Model.train(corpus.templates, train, heldout=test, config=config)
    assert len(log) == 2 and "heldout_f1" in log[0]

    det = model.detect(test[0])
    assert 0.0 <= det["confidence"] <= 1.0
    assert abs(sum(det["signed_scores"])) < 1e-9
    assert abs(sum(det["attention"]) - 1.0) < 1e-9

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.json")
        model.save(path)
        again = faithlog.Model.load(path)
        assert again.detect(test[0])["confidence"] == det["confidence"]

    try:
        faithlog.EventSequence("bad id", [1], False)
    except ValueError:
        pass
    else:
        raise AssertionError("whitespace id accepted")

    print("precision/recall/f1:", model.detection_scores(test))
    print("python smoke test passed")


if __name__ == "__main__":
    main()

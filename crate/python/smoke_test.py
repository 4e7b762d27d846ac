#!/usr/bin/env python3
"""Smoke test for the mecc_py extension module.

Builds the cdylib with cargo, loads it in place, and checks a handful of
known values end to end. Run from anywhere:

    python3 python/smoke_test.py
"""

import math
import shutil
import subprocess
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build_and_import():
    subprocess.run(["cargo", "build", "-p", "mecc-py"], cwd=ROOT, check=True)
    libname = {
        "linux": "libmecc_py.so",
        "darwin": "libmecc_py.dylib",
    }.get(sys.platform, "libmecc_py.so")
    built = ROOT / "target" / "debug" / libname
    tmp = Path(tempfile.mkdtemp(prefix="mecc_py_"))
    shutil.copy(built, tmp / "mecc_py.so")
    sys.path.insert(0, str(tmp))
    import mecc_py

    return mecc_py


def main():
    m = build_and_import()

    # CTC: uniform log-probs over {blank, a, b, c}, T=2, label "a".
    # Paths ba..: (blank,a), (a,blank), (a,a) -> 3/16.
    row = [math.log(0.25)] * 4
    loss, admissible = m.ctc_loss([row, row], [1])
    assert admissible
    assert abs(loss - (-math.log(3.0 / 16.0))) < 1e-9, loss

    # Inadmissible: "aa" needs >= 3 frames.
    loss, admissible = m.ctc_loss([row, row], [1, 1])
    assert not admissible and math.isinf(loss)

    # Reduction: collapse runs, drop blanks, keep last frame of each run.
    tokens, frames = m.ctc_reduce([0, 1, 1, 0, 1, 2, 2])
    assert tokens == [1, 1, 2] and frames == [2, 4, 6], (tokens, frames)

    # Metrics oracles.
    assert m.wer([1, 2, 3], [1, 3]) == 1.0 / 3.0
    assert m.wer([], [1]) is None
    assert m.corpus_bleu([[1, 2, 3, 4]], [[1, 2, 3, 4]]) == 100.0
    hand = 100.0 * math.exp(
        (math.log(3 / 4) + math.log(2 / 3) + math.log(1 / 2) + math.log(1 / 2)) / 4
    )
    assert abs(m.corpus_bleu([[1, 2, 3, 4]], [[1, 2, 3, 3]]) - hand) < 1e-9

    # The synthetic translation rule: map by offset, reverse, wrap.
    assert m.translation_rule([1, 2, 3], "map_reverse", 4) == [1, 7, 6, 5, 2]

    # Config round trip and data generation.
    cfg = m.default_config()
    assert "model_dim" in cfg
    frames_a, src_a, tgt_a = m.generate_example(7, "zipf_high", True)
    frames_b, src_b, tgt_b = m.generate_example(7, "zipf_high", True)
    assert (frames_a, src_a, tgt_a) == (frames_b, src_b, tgt_b)
    assert len(frames_a[0]) == 16
    assert m.translation_rule(src_a, "map_reverse", 2) == tgt_a

    # Fresh session: bypass equivalence holds even for random weights.
    s = m.Session.fresh(3)
    hyp = s.translate_tokens(src_a)
    assert all(isinstance(t, int) for t in hyp)
    r1 = s.translate_frames(frames_a, "one_best")
    r2 = s.translate_frames(frames_a, "matched", True)
    assert r1 == r2, (r1, r2)
    assert s.transcribe(frames_a) == list(r1[0])

    print("smoke test ok")


if __name__ == "__main__":
    main()

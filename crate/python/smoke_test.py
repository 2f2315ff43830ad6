"""Exercises the persum extension end to end on a toy document."""

import math
import tempfile
from pathlib import Path

import persum

LINE = "این یک جملهٔ آزمایشی فارسی است که برای بررسی خلاصه‌سازی نوشته شده است"


def main() -> None:
    assert persum.normalize_text("علي  كتاب") == "علی کتاب"
    assert persum.persian_ratio("متن") == 1.0

    body = "صفحهٔ عنوان\nمقدمه\n" + "\n".join([LINE] * 3)
    doc = persum.normalize_document("d1", body, "خلاصهٔ کوتاه")
    assert doc["body"] == "\n".join([LINE] * 3), doc
    assert doc["front_matter_removed"] == 1
    try:
        persum.normalize_document("d2", "english text only here", "x")
    except ValueError as e:
        assert "empty" in str(e) or "non_persian" in str(e)
    else:
        raise AssertionError("English document was accepted")

    assert persum.assign_split("doc-1", seed=3) in {"train", "validation", "test"}
    assert persum.assign_split("doc-1", seed=3) == persum.assign_split("doc-1", seed=3)

    tok = persum.Tokenizer.train([LINE] * 5, 120)
    ids = tok.encode(LINE)
    assert ids[0] == persum.SOS_ID and ids[-1] == persum.EOS_ID
    assert tok.decode(ids) == LINE

    q = [[0.1 * i, 0.2, -0.3 * i] for i in range(6)]
    wide = persum.sliding_window_attention(q, q, q, 12)
    narrow = persum.sliding_window_attention(q, q, q, 2, [0])
    assert len(wide) == 6 and len(narrow[0]) == 3

    emb = [(i, [1.0, float(i % 3), 0.5]) for i in range(4, tok.vocab_size)]
    p, r, f = persum.score_pair(ids, ids, emb)
    assert math.isclose(f, 1.0) and math.isclose(persum.f1(p, r), f)

    model = persum.Model(tok.vocab_size, d_model=16, n_heads=2, n_enc_layers=1, n_dec_layers=1,
                         d_ff=32, window=8, max_enc_len=128, max_dec_len=16, seed=1)
    states = model.encode(ids)
    assert len(states) == len(ids) and len(states[0]) == 16
    loss = model.loss(ids, ids[:10] + [persum.EOS_ID])
    assert 0.0 < loss < 20.0
    greedy, g_score = model.generate(ids, beam_size=1, max_len=12)
    beam, b_score = model.generate(ids, beam_size=2, max_len=12)
    assert 1 <= len(greedy) <= 12 and 1 <= len(beam) <= 12
    assert g_score <= 0.0 and b_score <= 0.0

    with tempfile.TemporaryDirectory() as d:
        model.save(Path(d) / "params.bin")
        again = persum.Model.load(Path(d) / "params.bin")
        assert again.encode(ids) == states
        assert again.config == model.config
        tok.save(Path(d) / "tok")
        assert persum.Tokenizer.load(Path(d) / "tok").encode(LINE) == ids

    print(f"ok: {model.num_parameters} parameters, loss {loss:.3f}, beam {beam}")


if __name__ == "__main__":
    main()

import numpy as np
import pytest

from prepguard import codecs as C
from prepguard import model as M
from prepguard.defense import (DefenseExecutionError, DefenseSpecError, Extern, FlipLR, FlipTB, JpegLike,
                               WebpLike, apply_defense, format_defense_spec, parse_defense_list,
                               parse_defense_spec)


def test_parse_examples():
    assert parse_defense_spec("webp:70,fliplr").transforms == (WebpLike(70), FlipLR())
    assert parse_defense_spec("none").transforms == ()
    assert parse_defense_spec(" jpeg : 50 , fliptb ").transforms == (JpegLike(50), FlipTB())
    assert parse_defense_spec("extern:cp {in} {out}").transforms == (Extern("cp {in} {out}"),)


@pytest.mark.parametrize("text,offset", [("webp:101", 5), ("fliplr,blur", 7), ("jpeg:-1", 5), ("", 0),
                                         ("fliplr,,webp:3", 7), ("none,fliplr", 0)])
def test_parse_errors_carry_offsets(text, offset):
    with pytest.raises(DefenseSpecError) as err:
        parse_defense_spec(text)
    assert err.value.offset == offset


def test_format_round_trip():
    for text in ("webp:70,fliplr", "none", "jpeg:50", "fliplr,webp:70,fliptb"):
        assert format_defense_spec(parse_defense_spec(text)) == text


def test_parse_list():
    specs = parse_defense_list("none;jpeg:50;webp:70,fliplr")
    assert [format_defense_spec(s) for s in specs] == ["none", "jpeg:50", "webp:70,fliplr"]
    with pytest.raises(DefenseSpecError):
        parse_defense_list(" ; ")


def test_empty_spec_is_identity(rng):
    img = rng.random((8, 8, 3))
    out = apply_defense(parse_defense_spec("none"), img)
    assert np.array_equal(out, img)


def test_composition_is_sequential(rng):
    img = rng.random((12, 12, 3))
    spec = parse_defense_spec("webp:70,fliplr,jpeg:40")
    expected = C.jpeg_like_roundtrip(C.flip_lr(C.webp_like_roundtrip(img, 70)), 40)
    assert np.array_equal(apply_defense(spec, img), expected)


def test_constant_image_stays_constant():
    img = np.full((16, 16, 3), 0.4)
    out = apply_defense(parse_defense_spec("webp:70,fliplr"), img)
    assert np.ptp(out) == 0
    assert abs(out[0, 0, 0] - 0.4) <= 1 / 255


def test_extern_round_trip(rng):
    img = np.round(rng.random((6, 5, 3)) * 255) / 255
    out = apply_defense(parse_defense_spec("extern:cp {in} {out}"), img)
    np.testing.assert_allclose(out, img, atol=1e-12)


def test_extern_failure_reports_index(rng):
    spec = parse_defense_spec("fliplr,extern:sh -c 'exit 3' {in} {out}")
    with pytest.raises(DefenseExecutionError) as err:
        apply_defense(spec, rng.random((4, 4, 3)))
    assert err.value.index == 1
    spec = parse_defense_spec("extern:true {in} {out}")
    with pytest.raises(DefenseExecutionError):
        apply_defense(spec, rng.random((4, 4, 3)))


def test_order_independence_at_prediction_level(trained, split):
    _, held = split
    fwd = parse_defense_spec("webp:70,fliplr")
    rev = fwd.reversed()
    imgs = held.images[:200]
    a = M.predict_batch(trained, np.stack([apply_defense(fwd, x) for x in imgs]))
    b = M.predict_batch(trained, np.stack([apply_defense(rev, x) for x in imgs]))
    assert (a == b).mean() >= 0.95

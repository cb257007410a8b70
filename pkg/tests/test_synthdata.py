import io
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facetouch.autograd import ContractError
from facetouch.synthdata import (
    SUB, ImageFormatError, LabelFormatError, SampleLabels, decode_image, disk_mask,
    figure_mask, gen_crop_dataset, gen_scene, load_crop_dataset, read_image, read_labels,
    save_crop_dataset, segment_mask, write_image, write_labels,
)


@pytest.fixture(scope="module")
def small_ds():
    return gen_crop_dataset(200, 0.22, seed=3)


# ---------------------------------------------------------------- crops

@pytest.mark.parametrize("seed", [0, 1, 7])
def test_positive_count_matches_fraction(seed):
    ds = gen_crop_dataset(1000, 0.22, seed=seed)
    assert abs(int(ds.labels.sum()) - 220) <= 1


def test_same_seed_same_hash_and_bytes():
    a = gen_crop_dataset(60, 0.3, seed=11)
    b = gen_crop_dataset(60, 0.3, seed=11)
    assert a.manifest["content_hash"] == b.manifest["content_hash"]
    assert a.images.tobytes() == b.images.tobytes()
    assert gen_crop_dataset(60, 0.3, seed=12).manifest["content_hash"] != a.manifest["content_hash"]


def _touch_oracle(fig) -> bool:
    cx, cy, r = fig.head
    return any(Fraction(x - cx) ** 2 + Fraction(y - cy) ** 2 <= Fraction(r) ** 2 for x, y in fig.hands)


def test_labels_agree_with_geometry(small_ds):
    assert [int(_touch_oracle(f)) for f in small_ds.figures] == small_ds.labels.tolist()


def test_kinds_respect_margins(small_ds):
    # positives sit well inside the head, hard negatives well outside
    for fig, y in zip(small_ds.figures, small_ds.labels):
        cx, cy, r = fig.head
        d = min(np.hypot(x - cx, y_ - cy) for x, y_ in fig.hands)
        if fig.kind == "touch":
            assert y == 1 and d <= 0.85 * r + 1e-9
        else:
            assert y == 0 and d >= 1.5 * r - 1e-9


def test_split_is_stratified():
    ds = gen_crop_dataset(500, 0.22, seed=5)
    tr, te = ds.indices("train"), ds.indices("test")
    assert len(np.intersect1d(tr, te)) == 0 and len(tr) + len(te) == 500
    assert abs(ds.labels[tr].mean() - ds.labels[te].mean()) < 0.03
    assert len(tr) == 400


@pytest.mark.parametrize("kwargs", [dict(n=9), dict(n=100, positive_fraction=0.0),
                                    dict(n=100, positive_fraction=1.0), dict(n=100, size=40)])
def test_gen_rejects_bad_arguments(kwargs):
    with pytest.raises(ContractError):
        gen_crop_dataset(**kwargs)


def test_save_load_round_trip(tmp_path, small_ds):
    save_crop_dataset(small_ds, tmp_path / "d")
    back = load_crop_dataset(tmp_path / "d")
    assert back.images.tobytes() == small_ds.images.tobytes()
    assert back.labels.tolist() == small_ds.labels.tolist()
    assert back.split.tolist() == small_ds.split.tolist()
    assert back.figures == small_ds.figures


def test_tampered_dataset_fails_hash(tmp_path, small_ds):
    save_crop_dataset(small_ds, tmp_path / "d")
    img = read_image(tmp_path / "d/images/000004.pgm")
    img[0, 0] ^= 1
    write_image(tmp_path / "d/images/000004.pgm", img)
    with pytest.raises(ContractError, match="hash"):
        load_crop_dataset(tmp_path / "d")


def test_crops_are_32px_capable():
    ds = gen_crop_dataset(20, 0.5, seed=0, size=32)
    assert ds.images.shape == (20, 32, 32)


# ---------------------------------------------------------------- raster

@settings(max_examples=60, deadline=None)
@given(st.tuples(*[st.integers(0, 12 * SUB)] * 4), st.integers(1, 3 * SUB))
def test_segment_mask_matches_exact_distance(coords, half):
    ax, ay, bx, by = coords
    m = segment_mask(12, 12, (ax, ay), (bx, by), half)
    for py in range(12):
        for px in range(12):
            x, y = Fraction(px * SUB + SUB // 2), Fraction(py * SUB + SUB // 2)
            dx, dy = bx - ax, by - ay
            L = dx * dx + dy * dy
            t = Fraction(0) if L == 0 else min(max(((x - ax) * dx + (y - ay) * dy) / L, 0), 1)
            d2 = (x - ax - t * dx) ** 2 + (y - ay - t * dy) ** 2
            assert m[py, px] == (d2 <= half * half)


def test_disk_mask_area_close_to_pi_r2():
    m = disk_mask(64, 64, 32 * SUB, 32 * SUB, 10 * SUB)
    assert abs(m.sum() - np.pi * 100) < 20
    assert m[32, 32] and not m[0, 0]


def test_figure_mask_covers_head_and_hands(small_ds):
    fig = small_ds.figures[0]
    m = figure_mask(fig, 64, 64)
    cx, cy, _ = fig.head
    assert m[cy // SUB, cx // SUB]
    for x, y in fig.hands:
        assert m[y // SUB, x // SUB]


# ---------------------------------------------------------------- scenes

def test_scene_no_occlusion_has_every_face():
    s = gen_scene(3, 0.0, seed=1)
    assert len(s.figures) == 3 and len(s.face_boxes) == 3 and len(s.human_boxes) == 3


def test_scene_full_occlusion_hides_faces():
    s = gen_scene(4, 1.0, seed=2)
    assert s.face_boxes == [] and len(s.human_boxes) == 4
    assert not any(s.face_visible)


def test_empty_scene():
    s = gen_scene(0, 0.5, seed=3)
    assert s.figures == [] and s.face_boxes == [] and s.human_boxes == []
    assert s.image.shape == (64, 256)


@pytest.mark.parametrize("seed", range(8))
def test_scene_boxes_in_unit_square(seed):
    s = gen_scene((0, 4), 0.5, seed=seed)
    for box in s.face_boxes + s.human_boxes:
        cx, cy, w, h = box
        assert 0 <= cx - w / 2 <= cx + w / 2 <= 1 + 1e-12
        assert 0 <= cy - h / 2 <= cy + h / 2 <= 1 + 1e-12


def test_scene_rejects_too_many_figures():
    with pytest.raises(ContractError):
        gen_scene(5, 0.0, seed=0)


def test_occluder_hides_head_pixels():
    s = gen_scene(1, 1.0, seed=4)
    fig = s.figures[0]
    cx, cy, _ = fig.head
    assert s.image[cy // SUB, cx // SUB] <= 30 + 10


# ---------------------------------------------------------------- image I/O

@pytest.mark.parametrize("shape,magic,n", [((4, 4), b"P5", 16), ((4, 4, 3), b"P6", 48)])
def test_zero_image_bytes(tmp_path, shape, magic, n):
    write_image(tmp_path / "z", np.zeros(shape))
    raw = (tmp_path / "z").read_bytes()
    assert raw.startswith(magic) and raw.endswith(b"\x00" * n)
    assert raw == magic + b"\n4 4\n255\n" + b"\x00" * n
    assert (read_image(tmp_path / "z") == 0).all()


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.booleans(), st.integers(0, 2**32 - 1))
def test_float_round_trip_within_quantization(h, w, rgb, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w, 3) if rgb else (h, w))
    buf = io.BytesIO()
    write_image(buf, img)
    back = decode_image(buf.getvalue()) / 255.0
    assert np.abs(back - img).max() <= 1 / 255


def test_uint8_round_trip_exact():
    img = np.arange(60, dtype=np.uint8).reshape(4, 5, 3)
    buf = io.BytesIO()
    write_image(buf, img)
    assert np.array_equal(decode_image(buf.getvalue()), img)


def test_header_comments_accepted():
    raw = b"P5\n# made by hand\n2 1 # trailing\n255\n\x01\x02"
    assert decode_image(raw).tolist() == [[1, 2]]


def test_short_p6_payload_reports_truncation():
    raw = b"P6\n2 2\n255\n" + b"\x00" * 11
    with pytest.raises(ImageFormatError, match="truncated") as e:
        decode_image(raw)
    assert e.value.offset == len(raw)


@pytest.mark.parametrize("raw,offset", [
    (b"P3\n1 1\n255\n\x00", 0),
    (b"P5\nx 1\n255\n\x00", 3),
    (b"P5\n1 1\n65535\n\x00\x00", 7),
    (b"P5\n1 1\n255\n\x00\x00", 12),
    (b"P5\n1 1\n255", 10),
    (b"P5 1 0 255 ", 5),
])
def test_malformed_headers_positioned(raw, offset):
    with pytest.raises(ImageFormatError) as e:
        decode_image(raw)
    assert e.value.offset == offset


def test_write_rejects_out_of_range():
    with pytest.raises(ContractError):
        write_image(io.BytesIO(), np.full((2, 2), 1.5))


def _corpus(n_each: int = 60):
    buf = io.BytesIO()
    write_image(buf, np.random.default_rng(0).integers(0, 256, (5, 6, 3), dtype=np.uint8))
    good = buf.getvalue()
    rng = np.random.default_rng(1)
    cases = [good[:k] for k in range(len(good))]  # every truncation
    for _ in range(n_each):
        b = bytearray(good)
        for pos in rng.integers(0, 16, rng.integers(1, 4)):
            b[pos] = int(rng.integers(0, 256))
        cases.append(bytes(b))
    return cases


def test_fuzz_corpus_never_crashes():
    cases = _corpus()
    assert len(cases) >= 100
    rejected = 0
    for raw in cases:
        try:
            img = decode_image(raw)
            assert img.dtype == np.uint8
        except ImageFormatError as e:
            rejected += 1
            assert 0 <= e.offset <= len(raw)
    # every strict truncation must be rejected
    assert rejected >= len(cases) - 60


# ---------------------------------------------------------------- labels I/O

def _samples(n=100):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        boxes = [(str(rng.choice(["face", "human", "hand"])), tuple(float(v) for v in rng.random(4)))
                 for _ in range(int(rng.integers(0, 3)))]
        out.append(SampleLabels(i, "train" if i % 5 else "test", int(rng.integers(0, 2)), boxes))
    return out


def test_labels_round_trip(tmp_path):
    samples = _samples()
    write_labels(tmp_path / "l.csv", samples)
    back = read_labels(tmp_path / "l.csv")
    assert [back[s.sample_id] for s in samples] == samples


def _bad(tmp_path, text):
    p = tmp_path / "bad.csv"
    p.write_text(text)
    with pytest.raises(LabelFormatError) as e:
        read_labels(p)
    return e.value


HEADER = "sample_id,split,label,box_class,cx,cy,w,h\n"


def test_coordinate_out_of_range_reports_line(tmp_path):
    e = _bad(tmp_path, HEADER + "0,train,1,face,0.5,0.5,0.1,0.1\n1,test,0,face,1.2,0.5,0.1,0.1\n")
    assert e.line == 3 and "line 3" in str(e)


def test_unknown_column(tmp_path):
    assert _bad(tmp_path, "sample_id,split,label,colour,cx,cy,w,h\n").line == 1


def test_non_numeric_coordinate(tmp_path):
    assert _bad(tmp_path, HEADER + "0,train,1,face,abc,0.5,0.1,0.1\n").line == 2


def test_empty_file_is_error(tmp_path):
    _bad(tmp_path, "")


def test_unknown_box_class(tmp_path):
    assert _bad(tmp_path, HEADER + "0,train,1,tree,0.5,0.5,0.1,0.1\n").line == 2

"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``ACCEPTANCE <n> PASS|FAIL: ...`` line. The desk-scale
training runs (3 seeds x {SL, SCL}, n=4000, batch 64, 30 epochs) are shared by
criteria 4-8 through a session fixture.
"""
import io
import json
import time

import numpy as np
import pytest

from facetouch.checks import check_suite
from facetouch.cli import main as cli_main
from facetouch.explain import positive_focus
from facetouch.losses import DetectionBatch, detection_loss, focal_loss, supcon_loss
from facetouch.metrics import accuracy, auc_trapezoid, confusion, f1_score, precision, recall, roc_curve, tpr_at
from facetouch.models import EncoderConfig, FaceTouchModel, bilinear_resize, gradcam, load_checkpoint, save_checkpoint
from facetouch.pipeline import OracleDetector, PipelineConfig, annotate, cascade_step
from facetouch.rng import make_rng
from facetouch.synthdata import ImageFormatError, decode_image, gen_crop_dataset, gen_scene, write_image
from facetouch.training import (
    TrainConfig, desk_encoder, evaluate, train_scl_stage1, train_scl_stage2, train_sl,
)

from .oracles import auc_concordance, bce, confusion_bruteforce, supcon_bruteforce

SEEDS = (0, 1, 2)
FPR_GRID = np.linspace(0.0, 1.0, 101)


@pytest.fixture
def verdict(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


# ---------------------------------------------------------------- shared desk-scale runs

@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    runs = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        ds = gen_crop_dataset(4000, 0.22, seed=seed, size=64)
        xtr, ytr = ds.part("train")
        xte, yte = ds.part("test")

        def cfg(regime):
            return TrainConfig(regime=regime, epochs=30, batch_size=64, seed=seed,
                               encoder=desk_encoder(seed=seed))

        sl = train_sl(xtr, ytr, cfg("sl")).model
        s1 = train_scl_stage1(xtr, ytr, cfg("scl"))
        ck = root / f"stage1_{seed}.ckpt"
        save_checkpoint(ck, s1.model)
        scl = train_scl_stage2(ck, xtr, ytr, cfg("scl")).model
        runs[seed] = {"ds": ds, "test": (xte, yte), "sl": sl, "scl": scl, "stage1": ck,
                      "sl_eval": evaluate(sl, xte, yte), "scl_eval": evaluate(scl, xte, yte)}
    runs["seconds"] = time.perf_counter() - t0
    return runs


# ---------------------------------------------------------------- 1

def test_1_gradient_correctness(verdict):
    t0 = time.perf_counter()
    worst = check_suite(range(20))
    dt = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-6}
    ok = not bad and dt < 60
    verdict(1, ok, f"{len(worst)} layers/losses x 20 seeds, max rel err {max(worst.values()):.2e} "
                   f"(limit 1e-6), {dt:.1f}s (limit 60s){'; over: ' + str(bad) if bad else ''}")


# ---------------------------------------------------------------- 2

def test_2_loss_oracles(verdict):
    sup_err = 0.0
    for seed in range(40):
        r = make_rng(seed, "accept-supcon")
        n = int(r.integers(2, 17))
        Z = r.standard_normal((n, 6))
        Z /= np.linalg.norm(Z, axis=1, keepdims=True)
        labels = r.integers(0, 3, n)
        if np.bincount(labels).max() < 2:
            labels[1] = labels[0]
        for variant in ("in", "out"):
            ref = supcon_bruteforce(Z.tolist(), labels.tolist(), 0.05, variant)
            sup_err = max(sup_err, abs(supcon_loss(Z, labels, 0.05, variant)[0] - ref))

    r = make_rng(0, "accept-det")
    empty = DetectionBatch(r.uniform(0.2, 0.5, (5, 4)), r.standard_normal((5, 3)), r.standard_normal((5, 4)),
                           r.uniform(0.2, 0.5, (2, 4)), np.array([1, 2]), np.full(5, -1))
    det_zero = detection_loss(empty)[0]

    r = make_rng(0, "accept-focal")
    y = r.integers(0, 2, 2000)
    p = r.uniform(1e-4, 1 - 1e-4, 2000)
    ref = np.mean([bce(int(a), float(b)) for a, b in zip(y, p)])
    focal_err = abs(focal_loss(y, p, 0.0, 1.0)[0] - ref)

    ok = sup_err < 1e-9 and det_zero == 0.0 and focal_err < 1e-9
    verdict(2, ok, f"supcon vs brute force (N<=16, tau 0.05) max err {sup_err:.1e}; "
                   f"detection(N=0)={det_zero!r}; focal(0,1) vs BCE err {focal_err:.1e}")


# ---------------------------------------------------------------- 3

def test_3_metric_oracles(verdict):
    r = make_rng(0, "accept-metrics")
    t, pr = r.integers(0, 2, 10_000), r.integers(0, 2, 10_000)
    tp, tn, fp, fn = confusion_bruteforce(t.tolist(), pr.tolist())
    c = confusion(t, pr)
    p_ref = tp / (tp + fp) if tp + fp else 0.0
    r_ref = tp / (tp + fn) if tp + fn else 0.0
    f_ref = 2 * p_ref * r_ref / (p_ref + r_ref) if p_ref + r_ref else 0.0
    counts_ok = (c.tp, c.tn, c.fp, c.fn) == (tp, tn, fp, fn)
    rates_ok = (accuracy(c) == (tp + tn) / 10_000 and precision(c) == p_ref and recall(c) == r_ref
                and f1_score(precision(c), recall(c)) == f_ref)

    auc_err = 0.0
    for seed in range(5):
        rr = make_rng(seed, "accept-auc")
        yy = rr.integers(0, 2, 500)
        s = np.round(rr.random(500), 2)  # coarse scores force ties
        fpr, tpr, _ = roc_curve(yy, s)
        auc_err = max(auc_err, abs(auc_trapezoid(fpr, tpr) - auc_concordance(yy.tolist(), s.tolist())))
    ok = counts_ok and rates_ok and auc_err < 1e-9
    verdict(3, ok, f"confusion on 10k exact={counts_ok}, rates exact={rates_ok}; "
                   f"AUC vs pairwise concordance (n=500, ties) max err {auc_err:.1e}")


# ---------------------------------------------------------------- 4

def test_4_two_stage_contract(desk, verdict):
    same, calls = True, []
    for seed in SEEDS:
        stage1 = load_checkpoint(desk[seed]["stage1"]).params
        final = desk[seed]["scl"]
        for name, t in stage1.items():
            if name.startswith("enc."):
                same &= final.params[name].data.tobytes() == t.data.tobytes()
        final.proj_calls = 0
        final.predict_proba(desk[seed]["test"][0][:64])
        calls.append(final.proj_calls)
    ok = same and calls == [0, 0, 0]
    verdict(4, ok, f"encoder bytes identical to stage-1 checkpoint: {same}; "
                   f"projection calls on inference {calls}")


# ---------------------------------------------------------------- 5

def test_5_desk_scale_learning(desk, verdict):
    sl = [desk[s]["sl_eval"][0].accuracy for s in SEEDS]
    scl = [desk[s]["scl_eval"][0].accuracy for s in SEEDS]
    minutes = desk["seconds"] / 60
    ok = min(sl) >= 0.90 and min(scl) >= 0.90 and np.mean(scl) >= np.mean(sl) - 0.02 and minutes < 10
    verdict(5, ok, f"SL acc {[round(a, 4) for a in sl]} mean {np.mean(sl):.4f}; SCL acc "
                   f"{[round(a, 4) for a in scl]} mean {np.mean(scl):.4f}; 6 runs in {minutes:.1f} min (limit 10)")


# ---------------------------------------------------------------- 6

def test_6_roc_dominance(desk, verdict):
    wins, per_seed = 0, []
    for s in SEEDS:
        a = desk[s]["scl_eval"][0]
        b = desk[s]["sl_eval"][0]
        dom = tpr_at(a.roc_fpr, a.roc_tpr, FPR_GRID) >= tpr_at(b.roc_fpr, b.roc_tpr, FPR_GRID)
        wins += int(dom.sum())
        per_seed.append(float(dom.mean()))
    frac = wins / (len(SEEDS) * len(FPR_GRID))
    aucs = [(round(desk[s]["scl_eval"][0].auc, 4), round(desk[s]["sl_eval"][0].auc, 4)) for s in SEEDS]
    verdict(6, frac >= 0.8, f"SCL TPR >= SL TPR at {frac:.1%} of {len(FPR_GRID)}-point FPR grid over 3 seeds "
                            f"(per seed {[round(v, 3) for v in per_seed]}; AUC scl/sl {aucs})")


# ---------------------------------------------------------------- 7

def test_7_cascade_correctness(desk, verdict):
    model = desk[0]["scl"]
    rates = (0.0, 0.5, 1.0)
    path_ok = excl_ok = blur_ok = 0
    for i in range(100):
        scene = gen_scene((0, 4), rates[i % 3], seed=10_000 + i)
        det = OracleDetector()
        det.register_scene(scene)
        anonymize = i % 4 != 3
        res = cascade_step(scene.image, det, model, PipelineConfig(anonymize=anonymize), i)
        annotate(res.frame, res)
        expect = ("face-path" if any(scene.face_visible) else "human-path" if scene.figures else "no-detection")
        path_ok += res.path_taken == expect
        excl_ok += det.calls["human"] == (0 if det.calls["face"] and scene.face_boxes else 1)
        want_blur = res.path_taken == "face-path" and anonymize
        blur_ok += all(r.blur_applied == want_blur for r in res.records)
    ok = path_ok == excl_ok == blur_ok == 100
    verdict(7, ok, f"100 scenes, occlusion {rates}: path match {path_ok}/100, "
                   f"human-detector exclusivity {excl_ok}/100, blur iff face-path&anonymize {blur_ok}/100")


# ---------------------------------------------------------------- 8

def _single_channel_model(k=1):
    m = FaceTouchModel(EncoderConfig(input_size=16, widths=(3, 4), hidden=3, seed=2))
    p = m.params
    p["head.hidden.W"].data[:] = 0
    p["head.hidden.W"].data[k, 0] = 1.0
    p["head.hidden.b"].data[:] = 0
    p["head.out.W"].data[:] = 0
    p["head.out.W"].data[0, 1] = 1.0
    p["head.out.b"].data[:] = 0
    p["enc.conv2.b"].data[k] = 0.5
    return m


def test_8_gradcam_sanity(desk, verdict):
    m = _single_channel_model()
    analytic_err = 0.0
    for seed in range(10):
        img = make_rng(seed, "accept-cam").random((16, 16))
        cap = {}
        m.encode(img[None], cap)
        expect = np.maximum(bilinear_resize(cap["conv2"].data[0, :, :, 1], 16, 16), 0)
        analytic_err = max(analytic_err, np.abs(gradcam(m, img) - expect / expect.max()).max())

    focused = total = 0
    per_seed, range_ok = [], True
    for s in SEEDS:
        ds = desk[s]["ds"]
        idx = ds.indices("test")
        model = desk[s]["scl"]
        foci = positive_focus(model, ds.images[idx], ds.labels[idx], [ds.figures[i] for i in idx])
        for f in foci[:5]:
            cam = gradcam(model, ds.images[idx[f.index]])
            range_ok &= cam.min() >= 0 and cam.max() <= 1 and (cam.max() == 1 or not cam.any())
        hits = sum(f.focused for f in foci)
        focused += hits
        total += len(foci)
        per_seed.append(f"{hits}/{len(foci)}")
    frac = focused / max(total, 1)
    ok = analytic_err < 1e-6 and range_ok and total >= 50 and frac >= 0.7
    verdict(8, ok, f"single-channel analytic err {analytic_err:.1e}; maps in [0,1]: {range_ok}; SCL maps focus "
                   f"on head+hands for {focused}/{total} correct positives = {frac:.1%} (per seed {per_seed}; need 70%)")


# ---------------------------------------------------------------- 9

def _cli(*argv):
    return cli_main([str(a) for a in argv])


def test_9_determinism(tmp_path, verdict):
    tiny = ["--set", "encoder.input_size=32", "--set", "encoder.widths=[8,16]", "--epochs", 2, "--batch-size", 32]
    assert _cli("gen-data", "--n", 200, "--size", 32, "--seed", 5, "--out", tmp_path / "d") == 0
    assert _cli("gen-data", "--scenes", 6, "--seed", 5, "--out", tmp_path / "s") == 0
    assert _cli("train", "--data", tmp_path / "d", "--seed", 5, *tiny, "--out", tmp_path / "r") == 0
    ck, d, s = tmp_path / "r/model.ckpt", tmp_path / "d", tmp_path / "s"
    jobs = {
        "gen-data": ["--n", 200, "--size", 32, "--seed", 5],
        "train": ["--data", d, "--seed", 5, "--loss", "supcon-printed", *tiny],
        "eval": ["--ckpt", ck, "--data", d],
        "infer": ["--ckpt", ck, "--image", s / "frame_00002.pgm", "--truth", s / "truth.csv", "--index", 2],
        "stream": ["--ckpt", ck, "--frames", s, "--attention"],
        "gradcheck": ["--seeds", 2],
        "gradcam": ["--ckpt", ck, "--data", d, "--count", 4],
    }
    same = {}
    for cmd, argv in jobs.items():
        a, b = tmp_path / f"{cmd}-a", tmp_path / f"{cmd}-b"
        ok = _cli(cmd, *argv, "--out", a) == 0 and _cli(cmd, "--manifest", a / "manifest.json", "--out", b) == 0
        outs = json.loads((a / "manifest.json").read_text())["outputs"]
        same[cmd] = ok and bool(outs) and all((a / f).read_bytes() == (b / f).read_bytes() for f in outs)
    verdict(9, all(same.values()), f"replay from manifest byte-identical: {same}")


# ---------------------------------------------------------------- 10

def _fuzz_corpus():
    cases = []
    for shape in [(5, 6), (4, 3, 3)]:
        buf = io.BytesIO()
        write_image(buf, make_rng(1, "fuzz-src").integers(0, 256, shape, dtype=np.uint8))
        good = buf.getvalue()
        cases += [good[:k] for k in range(len(good))]
        r = make_rng(len(shape), "fuzz")
        for _ in range(80):
            b = bytearray(good)
            for pos in r.integers(0, len(b), int(r.integers(1, 5))):
                b[pos] = int(r.integers(0, 256))
            cases.append(bytes(b))
        cases += [good + bytes(r.integers(0, 256, int(r.integers(1, 9)), dtype=np.uint8))]
    cases += [bytes(make_rng(i, "garbage").integers(0, 256, 24, dtype=np.uint8)) for i in range(20)]
    return cases


def test_10_io_bit_exactness(verdict):
    worst = 0.0
    for seed in range(50):
        r = make_rng(seed, "io")
        shape = (int(r.integers(1, 20)), int(r.integers(1, 20))) + ((3,) if seed % 2 else ())
        img = r.random(shape)
        buf = io.BytesIO()
        write_image(buf, img)
        worst = max(worst, float(np.abs(decode_image(buf.getvalue()) / 255.0 - img).max()))

    cases = _fuzz_corpus()
    crashes, rejected, bad_offsets = 0, 0, 0
    for raw in cases:
        try:
            decode_image(raw)
        except ImageFormatError as e:
            rejected += 1
            bad_offsets += not 0 <= e.offset <= len(raw)
        except Exception:  # noqa: BLE001  anything else is a crash
            crashes += 1
    ok = worst <= 1 / 255 + 1e-12 and len(cases) >= 100 and crashes == 0 and bad_offsets == 0
    verdict(10, ok, f"round-trip max err {worst:.5f} (limit {1 / 255:.5f}); fuzz corpus {len(cases)} cases, "
                    f"{rejected} rejected with positions, {crashes} crashes, {bad_offsets} bad offsets")

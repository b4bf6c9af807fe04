import json

import numpy as np
import pytest

from prepguard import attacks as A
from prepguard import data as D
from prepguard import evaluation as E
from prepguard import model as M
from prepguard.defense import parse_defense_list, parse_defense_spec


@pytest.fixture(scope="module")
def small_report(trained, split):
    _, held = split
    return E.run_matrix(trained, held, [A.parse_attack_tag("ifgsm:eps=8/255"), A.parse_attack_tag("deepfool")],
                        parse_defense_list("none;fliplr;webp:70,fliplr"), n=20, seed=3, threads=1)


def test_fnv1a64_vectors():
    assert E.fnv1a64(b"") == 0xCBF29CE484222325
    assert E.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert E.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_fingerprint_tracks_weights():
    p = M.init_params(M.default_architecture(), seed=1)
    q = p.copy()
    assert E.fingerprint(p) == E.fingerprint(q)
    q.parameters()[0][0, 0, 0, 0] += 1e-12
    assert E.fingerprint(p) != E.fingerprint(q)


def test_resolve_threads(monkeypatch):
    monkeypatch.setenv("PREPGUARD_THREADS", "3")
    assert E.resolve_threads() == 3
    assert E.resolve_threads(2) == 2
    monkeypatch.delenv("PREPGUARD_THREADS")
    assert E.resolve_threads() >= 1


def test_select_benign(trained, split):
    _, held = split
    a = E.select_benign(trained, held, 30, seed=5)
    b = E.select_benign(trained, held, 30, seed=5)
    assert np.array_equal(a.images, b.images)
    assert (M.predict_batch(trained, a.images) == a.labels).all()
    correct = int((M.predict_batch(trained, held.images) == held.labels).sum())
    whole = E.select_benign(trained, held, correct, seed=5)
    assert len(whole) == correct
    with pytest.raises(E.SelectionError) as err:
        E.select_benign(trained, held, correct + 1, seed=5)
    assert err.value.available == correct


def test_sae_set_invariants_and_persistence(trained, split, tmp_path):
    _, held = split
    benign = E.select_benign(trained, held, 10, seed=1)
    sae = E.build_sae_set(trained, benign, A.parse_attack_tag("deepfool"), seed=1, threads=2)
    assert len(sae) > 0
    E.verify_sae_set(trained, sae)
    assert E.top1_accuracy(trained, parse_defense_spec("none"), sae.adversarials, sae.labels) == 0.0
    E.save_sae_set(sae, tmp_path)
    back = E.load_sae_set(tmp_path, trained)
    E.verify_sae_set(trained, back)
    for u, v in zip(sae.entries, back.entries):
        assert np.array_equal(u.adversarial, v.adversarial)
        assert u.l2 == v.l2
    other = M.init_params(M.default_architecture(), seed=99)
    with pytest.raises(E.FingerprintMismatch):
        E.load_sae_set(tmp_path, other)


def test_sae_set_thread_independent(trained, split):
    _, held = split
    benign = E.select_benign(trained, held, 6, seed=2)
    cfg = A.parse_attack_tag("cw:steps=40")
    a = E.build_sae_set(trained, benign, cfg, threads=1)
    b = E.build_sae_set(trained, benign, cfg, threads=4)
    assert [e.adversarial.tobytes() for e in a.entries] == [e.adversarial.tobytes() for e in b.entries]


def test_zero_success_attack_gives_empty_set(trained, split):
    _, held = split
    benign = E.select_benign(trained, held, 5, seed=2)
    sae = E.build_sae_set(trained, benign, A.AttackConfig("fgsm", epsilon=1e-9))
    assert len(sae) == 0 and sae.success_rate == 0.0
    with pytest.raises(E.EvaluationError):
        E.qf_sweep(trained, [sae], "jpeg", [50])


def test_top1_accuracy(trained, split):
    _, held = split
    benign = E.select_benign(trained, held, 50, seed=0)
    assert E.top1_accuracy(trained, parse_defense_spec("none"), benign.images, benign.labels) == 1.0
    assert E.top1_accuracy(trained, parse_defense_spec("fliplr"), benign.images, benign.labels) >= 0.92
    assert E.top1_accuracy(trained, parse_defense_spec("jpeg:100"), benign.images, benign.labels) >= 0.98
    with pytest.raises(ValueError):
        E.top1_accuracy(trained, parse_defense_spec("none"), np.zeros((0, 32, 32, 3)), [])


def test_qf_sweep_arguments(trained):
    with pytest.raises(ValueError):
        E.qf_sweep(trained, [], "jpeg", [])
    with pytest.raises(ValueError):
        E.qf_sweep(trained, [], "png", [10])


def test_report_structure(small_report):
    doc = json.loads(small_report.to_json())
    assert doc["report_version"] == 1
    assert doc["defenses"] == ["none", "fliplr", "webp:70,fliplr"]
    assert {c["defense"] for c in doc["reversed_order"]} == {"fliplr,webp:70"}
    for c in small_report.cells:
        assert c.accuracy is None or 0 <= c.accuracy <= 1
    assert small_report.cell("benign", "none").accuracy == 1.0
    for sae in small_report.sae_sets:
        if len(sae):
            assert small_report.cell(sae.attack, "none").accuracy == 0.0
        ns = {c.n for c in small_report.cells if c.attack == sae.attack}
        assert ns == {len(sae)}
    csv_lines = small_report.to_csv().splitlines()
    assert csv_lines[0] == "attack,defense,n,accuracy,mean_l2,mean_psnr"
    assert len(csv_lines) == 1 + len(small_report.cells)


def test_report_deterministic(trained, split, small_report):
    _, held = split
    again = E.run_matrix(trained, held, [A.parse_attack_tag("ifgsm:eps=8/255"), A.parse_attack_tag("deepfool")],
                         parse_defense_list("none;fliplr;webp:70,fliplr"), n=20, seed=3, threads=2)
    assert again.to_json() == small_report.to_json()


def test_psnr_report():
    imgs = D.synth_dataset(10, 10, 16, 16, seed=8).images
    rows = E.psnr_report(imgs, ["jpeg", "webp"], [20, 100])
    by = {(r["codec"], r["qf"]): r for r in rows}
    assert by[("jpeg", 100)]["mean_psnr"] >= 42 and by[("webp", 100)]["mean_psnr"] >= 42
    assert by[("webp", 20)]["mean_psnr"] >= by[("jpeg", 20)]["mean_psnr"]
    assert all(r["min_psnr"] <= r["mean_psnr"] <= r["max_psnr"] for r in rows)
    assert E.psnr_csv(rows).splitlines()[0] == "codec,qf,n,mean_psnr,min_psnr,max_psnr"
    with pytest.raises(ValueError):
        E.psnr_report(imgs[:0], ["jpeg"], [10])

"""Acceptance suite: one PASS/FAIL line per criterion, echoed in the terminal summary.

The desk-scale runs (criteria 7, 8, 10) share one module fixture and take
about 40 minutes on a single core.  Set TNGA_ACCEPTANCE_OUT to keep the
metrics JSON and figures they produce.
"""

import itertools
import json
import os
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from helpers import brute_force_dtw, ctc_instance, layer_instance, report, tnga_instance
from tnga import align, autonet, cochlea, objectives, pipeline, plotting, signal

# tolerances pinned from the acceptance criteria
GRAD_TOL = 1e-5
GRAD_INSTANCES = 20
CTC_TOL = 1e-10
CTC_DRAWS = 50
DTW_INSTANCES = 100
DTW_TOL = 1e-9
FILTER_TOL = 0.02
PT_MAX_WER = 0.05
SN_MAX_WER = 0.15
GN_SN_MAX_GAP = 0.05
DECODE_MIN_REDUCTION = 0.99
DECODE_ITERS = 5000
DECODE_LR = 1e-2
CLIP_MIN = -10.0

DESK = pipeline.ExperimentConfig(
    synth=signal.SynthSpec(vocab_size=11),
    n_train=500,
    n_test=200,
    gru_sizes=(128, 128),
    fc_size=128,
    epochs=30,
    batch_size=16,
    lr_supervised=3e-3,
    lr_tnga=1e-3,
    runs=3,
    seed=0,
)


@pytest.fixture(scope="module")
def out_dir(tmp_path_factory):
    path = os.environ.get("TNGA_ACCEPTANCE_OUT")
    if path:
        Path(path).mkdir(parents=True, exist_ok=True)
        return Path(path)
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def desk(out_dir):
    """Ideal-cochlea PT, SN and GN runs over three seeds."""
    t0 = time.perf_counter()
    corpus = pipeline.build_corpus(DESK)
    pts, pt_doc, _ = pipeline.run_pretrain(DESK, corpus)
    _, sn_doc, _ = pipeline.run_supervised_events(DESK, corpus)
    _, gn_doc, _ = pipeline.run_graft(DESK, pts, corpus)
    for name, doc in (("pt", pt_doc), ("sn", sn_doc), ("gn", gn_doc)):
        pipeline.write_metrics(doc, out_dir / f"desk-{name}.metrics.json")
    return {"corpus": corpus, "pts": pts, "PT": pt_doc, "SN": sn_doc, "GN": gn_doc,
            "minutes": (time.perf_counter() - t0) / 60}


def test_criterion_01_param_count():
    n = autonet.param_count(autonet.NetConfig(40, (256, 256), 200, 12))
    assert report(1, n == 677428, f"param_count(40, [256, 256], 200, 12) = {n:,} (target 677,428)")


def test_criterion_02_gradient_suite():
    rng = np.random.default_rng(2)
    worst = {}
    for kind in ("gru", "fc", "leaky"):
        worst[kind] = max(layer_instance(kind, rng) for _ in range(GRAD_INSTANCES))
    worst["ctc"] = max(ctc_instance(rng) for _ in range(GRAD_INSTANCES))
    worst["tnga"] = max(tnga_instance(rng) for _ in range(GRAD_INSTANCES))
    ok = all(v < GRAD_TOL for v in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    assert report(2, ok, f"worst relative error over {GRAD_INSTANCES} instances each: {detail} (tol {GRAD_TOL:g})")


def test_criterion_03_ctc_brute_force():
    rng = np.random.default_rng(3)
    worst, cases, infeasible = 0.0, 0, 0
    for T, C in itertools.product(range(1, 6), (2, 3)):
        blank = C - 1
        for L in range(3):
            for labels in itertools.product(range(blank), repeat=L):
                for _ in range(CTC_DRAWS):
                    x = rng.normal(size=(T, C))
                    try:
                        loss, _ = objectives.ctc_loss(x, list(labels), blank)
                    except objectives.InfeasibleError:
                        # the exhaustive sum must be empty as well
                        assert objectives.ctc_brute_force(x, list(labels), blank) == np.inf
                        infeasible += 1
                        continue
                    worst = max(worst, abs(loss - objectives.ctc_brute_force(x, list(labels), blank)))
                    cases += 1
    uniform, _ = objectives.ctc_loss(np.zeros((2, 2)), [0], 1)
    analytic = abs(uniform + np.log(0.75))
    ok = worst <= CTC_TOL and analytic <= CTC_TOL
    assert report(3, ok, f"{cases} feasible draws (+{infeasible} infeasible), worst |dL| {worst:.1e}; "
                         f"uniform T=2 case off -ln 0.75 by {analytic:.1e} (tol {CTC_TOL:g})")


def test_criterion_04_dtw_brute_force():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(DTW_INSTANCES):
        n, m, d = rng.integers(1, 7), rng.integers(1, 7), rng.integers(1, 4)
        A, B = rng.normal(size=(n, d)), rng.normal(size=(m, d))
        worst = max(worst, abs(align.dtw(A, B).total_cost - brute_force_dtw(A, B)))
    assert report(4, worst <= DTW_TOL, f"{DTW_INSTANCES} instances, lengths 1..6, worst |cost diff| {worst:.1e}")


def test_criterion_05_filter_fidelity():
    worst_cascade, worst_center = 0.0, 0.0
    for fs in (8000, 16000, 44100):
        cfg = cochlea.default_config(fs)
        coeffs = cochlea.design_biquads(cfg)
        freqs = np.geomspace(20.0, 0.1 * fs, 20)
        for n in (1, 8, 32, 64):
            ana = np.array([cochlea.analytic_magnitude(cfg, n, f) for f in freqs])
            dig = cochlea.digital_magnitude(coeffs, n, freqs, fs)
            worst_cascade = max(worst_cascade, float(np.max(np.abs(dig / ana - 1))))
        for ch, stage in zip(cfg.channels, coeffs):
            g = float(cochlea.digital_magnitude([stage], 1, [ch.f], fs)[0])
            worst_center = max(worst_center, abs(g / ch.Q - 1))
    ok = worst_cascade <= FILTER_TOL and worst_center <= FILTER_TOL
    assert report(5, ok, f"fs 8k/16k/44.1k, n 1/8/32/64: worst cascade error {100 * worst_cascade:.2f}%, "
                         f"worst single-stage center gain vs Q {100 * worst_center:.2f}% (tol 2%)")


def test_criterion_06_iaf_rate():
    fs, theta = 16000, 1.0
    worst = 0.0
    for gc, lam in itertools.product((20.0, 100.0, 400.0), (0.0, 5.0, 15.0)):
        steps, _ = cochlea.integrate_and_fire(np.full((3 * fs, 1), gc), fs, lam, theta)
        isi = np.diff(np.r_[-1, steps]) / fs
        worst = max(worst, float(np.max(np.abs(isi - theta / (gc - lam)))) * fs)
    # accumulated float sums may land an exact-multiple crossing one step late
    assert report(6, worst <= 1 + 1e-9, f"3x3 grid of (g*c, leak): worst ISI error {worst:.3f} steps (tol 1 step)")


@pytest.mark.slow
def test_criterion_07_end_to_end(desk, out_dir):
    pt, sn, gn = (desk[k]["wer_mean"] for k in ("PT", "SN", "GN"))
    rows = [{"condition": "ideal", "model": k, "wer_mean": desk[k]["wer_mean"], "wer_std": desk[k]["wer_std"]}
            for k in ("PT", "SN", "GN")]
    plotting.plot_wer_bars(rows, out_dir / "desk-wer.png")
    ok = pt <= PT_MAX_WER and sn <= SN_MAX_WER and abs(gn - sn) <= GN_SN_MAX_GAP
    assert report(7, ok, f"3 seeds: PT {100 * pt:.2f}% (<= 5), SN {100 * sn:.2f}% (<= 15), GN {100 * gn:.2f}% "
                         f"(|GN-SN| {100 * abs(gn - sn):.2f} <= 5 points); {desk['minutes']:.1f} min")


@pytest.mark.slow
def test_criterion_08_nonideality(desk, out_dir):
    t0 = time.perf_counter()
    rep = pipeline.nonideality_study(DESK, desk["pts"], 0.2, 0.2, ideal={"SN": desk["SN"], "GN": desk["GN"]})
    (out_dir / "nonideal.json").write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    plotting.plot_wer_bars(pipeline.nonideality_rows(rep), out_dir / "nonideal.png")
    mis, ide = rep["mismatch"], rep["ideal"]
    assert report(8, rep["gap_widened"],
                  f"sigma_theta = sigma_Q = 0.2, 3 seeds: mismatch SN {100 * mis['SN']['wer_mean']:.2f}% "
                  f"GN {100 * mis['GN']['wer_mean']:.2f}% gap {100 * mis['gap']:+.2f} vs ideal gap "
                  f"{100 * ide['gap']:+.2f} points; {(time.perf_counter() - t0) / 60:.1f} min")


def test_criterion_09_self_supervision():
    cfg = pipeline.ExperimentConfig(synth=signal.SynthSpec(words_per_sample=(1, 2), seed=9), n_train=16, n_test=2,
                                    gru_sizes=(8, 8), fc_size=8, epochs=2, batch_size=4, runs=1)
    corpus = pipeline.build_corpus(cfg)
    pt = autonet.Network.init(cfg.net_config(40), np.random.default_rng(0))
    with_labels, _ = pipeline.graft(pt, corpus.train, cfg, 0)
    unlabeled = [replace(it, labels=[]) for it in corpus.train]
    without, _ = pipeline.graft(pt, unlabeled, cfg, 0)
    same = all(np.array_equal(with_labels.params[k], without.params[k]) for k in with_labels.param_names)
    frozen = all(np.array_equal(with_labels.params[k], pt.params[k]) for k in pt.trunk_param_names())
    assert report(9, same and frozen, f"labels removed -> bit-identical graft: {same}; "
                                      f"trunk bit-identical to pretrained: {frozen}")


@pytest.mark.slow
def test_criterion_10_state_decoding(desk, out_dir):
    pt = desk["pts"][0]
    item = desk["corpus"].test[0]
    states = autonet.forward_front(pt, item.audio)
    t0 = time.perf_counter()
    res = pipeline.decode_states(pt, states, iters=DECODE_ITERS, lr=DECODE_LR, clip_min=CLIP_MIN, record_every=100)
    minutes = (time.perf_counter() - t0) / 60
    plotting.plot_decoded(item.audio.frames, res.frames, out_dir / "decoded.png", CLIP_MIN)
    lo = float(res.frames.min())
    ok = res.reduction >= DECODE_MIN_REDUCTION and lo >= CLIP_MIN
    assert report(10, ok, f"{len(states.states)} frames, {DECODE_ITERS} iters at lr {DECODE_LR:g}: loss "
                          f"{res.losses[0]:.4f} -> {res.losses[-1]:.5f} ({100 * res.reduction:.2f}% reduction), "
                          f"min output {lo:.2f}; {minutes:.1f} min")


def _pipeline_run(root):
    """synth -> cochlea -> pretrain -> train-sn -> graft, each in a fresh interpreter."""
    train = ["--epochs", "4", "--runs", "2", "--gru", "32", "32", "--fc", "32", "--batch-size", "8"]
    steps = [
        ["synth", "--seed", "5", "--train", "48", "--test", "12", "--words", "1", "3", "--out", root / "data"],
        ["cochlea", "--audio", root / "data", "--out", root / "ev"],
        ["pretrain", "--audio", root / "data", "--lr", "3e-3", "--out", root / "pt", *train],
        ["train-sn", "--events", root / "ev", "--lr", "3e-3", "--out", root / "sn", *train],
        ["graft", "--pretrained", root / "pt" / "pt-seed0.ckpt", root / "pt" / "pt-seed1.ckpt",
         "--events", root / "ev", "--audio", root / "data", "--epochs", "4", "--runs", "2", "--out", root / "gn"],
    ]
    for argv in steps:
        res = subprocess.run([sys.executable, "-m", "tnga", *map(str, argv)], capture_output=True, text=True)
        assert res.returncode == 0, res.stderr


@pytest.mark.slow
def test_criterion_11_determinism(tmp_path):
    t0 = time.perf_counter()
    for tag in ("a", "b"):
        _pipeline_run(tmp_path / tag)
    # wall-clock lives in *.timing.json, the only artifact allowed to differ
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                   if p.is_file() and not p.name.endswith(".timing.json"))
    differ = [str(f) for f in files if (tmp_path / "a" / f).read_bytes() != (tmp_path / "b" / f).read_bytes()]
    n_ckpt = sum(f.suffix == ".ckpt" for f in files)
    n_metrics = sum(f.name.endswith(".metrics.json") for f in files)
    assert n_ckpt == 6 and n_metrics == 3
    assert report(11, not differ, f"two CLI pipeline runs: {len(files)} artifacts ({n_ckpt} checkpoints, "
                                  f"{n_metrics} metrics files) compared, {len(differ)} differ {differ[:3]}; "
                                  f"{(time.perf_counter() - t0) / 60:.1f} min")

"""Acceptance gate: eight end-to-end checks, one pass/fail line each.

Checks 2, 3, 4, and 8 share one desk-scale pipeline run: a synthetic
rotated-pair corpus is generated with pinned seeds, then a baseline model
(regularizer off) and a regularized model are trained from reference.cfg
and compared on held-out data.
"""

import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from gaecir import evaluate as geval
from gaecir import model as gm
from gaecir import train as gtrain
from gaecir.cir import CirSchedule, nearest_neighbors, MappingTable
from gaecir.cli import main as cli_main
from gaecir.data import PairDataset, contrast_normalize, load_pairs
from gaecir.model import GaeConfig, GaeParams, PenaltyConfig

ROOT = Path(__file__).resolve().parents[1]
REFERENCE_CFG = ROOT / "reference.cfg"

# pinned pipeline seeds: training corpus, held-out test corpus, offset-angle
# test corpus (same generator family, disjoint angle classes)
SEED_TRAIN_DATA = 11
SEED_TEST_DATA = 12
SEED_OFFSET_DATA = 13


def report(cap, num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    with cap.disabled():
        print(f"[acceptance {num}] {status} {name}: {detail}")
    assert ok, f"acceptance {num} ({name}) failed: {detail}"


def run_cli(*argv):
    return cli_main([str(a) for a in argv])


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    """Generate the pinned corpus and train baseline + regularized models."""
    root = tmp_path_factory.mktemp("desk")
    train_pairs = root / "train.pairs"
    test_pairs = root / "test.pairs"
    offset_pairs = root / "test_offset.pairs"
    t0 = time.monotonic()
    assert run_cli("gen-data", "--source", "synthetic", "--tset", "mnistr20",
                   "--n", 2000, "--size", 16, "--seed", SEED_TRAIN_DATA,
                   "--out", train_pairs) == 0
    assert run_cli("gen-data", "--source", "synthetic", "--tset", "mnistr20",
                   "--n", 500, "--size", 16, "--seed", SEED_TEST_DATA,
                   "--out", test_pairs) == 0
    assert run_cli("gen-data", "--source", "synthetic", "--tset", "mnistr20_10",
                   "--n", 500, "--size", 16, "--seed", SEED_OFFSET_DATA,
                   "--out", offset_pairs) == 0
    assert run_cli("train", "--config", REFERENCE_CFG, "--data", train_pairs,
                   "--out", root / "baseline", "--no-cir") == 0
    assert run_cli("train", "--config", REFERENCE_CFG, "--data", train_pairs,
                   "--out", root / "cir") == 0
    elapsed = time.monotonic() - t0
    return {
        "train": load_pairs(train_pairs),
        "test": load_pairs(test_pairs),
        "offset": load_pairs(offset_pairs),
        "baseline": gtrain.load_checkpoint(root / "baseline/checkpoint.gaeckpt").params,
        "cir": gtrain.load_checkpoint(root / "cir/checkpoint.gaeckpt").params,
        "cir_ckpt": root / "cir/checkpoint.gaeckpt",
        "elapsed": elapsed,
        "root": root,
    }


def random_params(rng, input_dim, num_factors, num_mappings, scale=0.3):
    cfg = GaeConfig(input_dim, num_factors, num_mappings)
    return GaeParams(cfg,
                     rng.uniform(-scale, scale, (num_factors, input_dim)),
                     rng.uniform(-scale, scale, (num_factors, input_dim)),
                     rng.uniform(-scale, scale, (num_mappings, num_factors // 2)))


def finite_difference_grads(params, loss_fn, step=1e-5):
    out = {}
    for name in ("u", "v", "w"):
        arr = getattr(params, name)
        fd = np.zeros_like(arr)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = arr[i]
            arr[i] = orig + step
            lp = loss_fn()
            arr[i] = orig - step
            lm = loss_fn()
            arr[i] = orig
            fd[i] = (lp - lm) / (2 * step)
        out[name] = fd
    return out


def test_acceptance_1_gradient_oracle(capfd):
    t0 = time.monotonic()
    rng = np.random.default_rng(2024)
    pcfg = PenaltyConfig(1e-3, 1e-3, 1e-4, 1e-2)
    lambdas = [0.0, 0.5, 1.0]
    worst = 0.0
    for case in range(20):
        input_dim = int(rng.choice([4, 6, 9]))
        num_factors = int(rng.choice([4, 8]))
        num_mappings = int(rng.choice([2, 4]))
        lam = lambdas[case % 3]
        params = random_params(rng, input_dim, num_factors, num_mappings)
        n = 3
        x = rng.normal(size=(n, input_dim))
        y = rng.normal(size=(n, input_dim))
        xc = x * (rng.random((n, input_dim)) >= 0.5)
        yc = y * (rng.random((n, input_dim)) >= 0.5)
        mp = rng.random((n, num_mappings))
        _, grads = gm.loss_and_gradients(params, x, y, xc, yc, mp, lam, pcfg)
        fd = finite_difference_grads(
            params,
            lambda: gm.batch_loss(params, x, y, xc, yc, mp, lam, pcfg).total)
        for analytic, numeric in ((grads.du, fd["u"]), (grads.dv, fd["v"]),
                                  (grads.dw, fd["w"])):
            denom = np.maximum(1e-3, np.maximum(np.abs(analytic), np.abs(numeric)))
            worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    elapsed = time.monotonic() - t0
    ok = worst < 1e-4 and elapsed < 30.0
    report(capfd, 1, "gradient oracle", ok,
           f"max rel err {worst:.2e} (<1e-4), {elapsed:.1f}s (<30s)")


def test_acceptance_2_desk_scale_comparison(desk, capfd):
    base, cir, test, train = desk["baseline"], desk["cir"], desk["test"], desk["train"]
    mscre_b = geval.mscre(base, test)
    mscre_c = geval.mscre(cir, test)
    codes_b = gm.infer_mapping(base, test.x, test.y)
    codes_c = gm.infer_mapping(cir, test.x, test.y)
    dbi_b = geval.davies_bouldin(codes_b, test.angle_label)
    dbi_c = geval.davies_bouldin(codes_c, test.angle_label)
    train_codes_b = gm.infer_mapping(base, train.x, train.y)
    train_codes_c = gm.infer_mapping(cir, train.x, train.y)
    rot_b = geval.rotation_error(
        geval.knn_classify(train_codes_b, train.angle_label, codes_b),
        test.angle_label)
    rot_c = geval.rotation_error(
        geval.knn_classify(train_codes_c, train.angle_label, codes_c),
        test.angle_label)
    mscre_ratio = mscre_c / mscre_b
    dbi_ratio = dbi_c / dbi_b
    ok = (mscre_ratio <= 0.85 and dbi_ratio <= 0.9 and rot_c <= rot_b
          and desk["elapsed"] < 1200.0)
    report(capfd, 2, "desk-scale comparison", ok,
           f"mscre ratio {mscre_ratio:.3f} (<=0.85), dbi ratio {dbi_ratio:.3f} "
           f"(<=0.9), rot {rot_c:.2f} vs {rot_b:.2f} deg, "
           f"pipeline {desk['elapsed']:.0f}s (<1200s)")


def test_acceptance_3_msre_non_degradation(desk, capfd):
    msre_b = geval.msre(desk["baseline"], desk["test"])
    msre_c = geval.msre(desk["cir"], desk["test"])
    ratio = msre_c / msre_b
    report(capfd, 3, "msre non-degradation", ratio <= 1.2,
           f"msre ratio {ratio:.3f} (<=1.2)")


def test_acceptance_4_offset_generalization(desk, capfd):
    mscre_b = geval.mscre(desk["baseline"], desk["offset"])
    mscre_c = geval.mscre(desk["cir"], desk["offset"])
    report(capfd, 4, "offset-angle generalization", mscre_c < mscre_b,
           f"mscre {mscre_c:.3f} (regularized) < {mscre_b:.3f} (baseline)")


def test_acceptance_5_metric_oracles(capfd):
    # hand-computed cluster index example
    codes = np.array([[0.0, 0.0], [0.0, 2.0], [10.0, 0.0], [10.0, 2.0]])
    dbi_ok = abs(geval.davies_bouldin(codes, np.array([0, 0, 1, 1])) - 0.2) < 1e-9
    # circular distance example: -175 vs 170 is 15 degrees
    rot_ok = geval.rotation_error([-175], [170]) == 15.0

    rng = np.random.default_rng(77)
    knn_ok = nn_ok = True
    for _ in range(100):
        n = int(rng.integers(3, 200))
        d = int(rng.integers(1, 6))
        pts = rng.random((n, d))
        i = int(rng.integers(n))
        k = int(rng.integers(1, n))
        brute = sorted(range(n), key=lambda j: (float(np.sum((pts[j] - pts[i]) ** 2)), j))
        brute = [j for j in brute if j != i][:k]
        nn_ok = nn_ok and nearest_neighbors(MappingTable(pts), i, k) == brute

        labels = rng.integers(0, 5, n) * 20
        query = rng.random((1, d))
        K = int(rng.integers(1, min(n, 9) + 1))
        dists = np.sum((pts - query) ** 2, axis=1)
        order = np.argsort(dists, kind="stable")[:K]
        votes = {}
        for idx in order:
            lbl = int(labels[idx])
            cnt, tot = votes.get(lbl, (0, 0.0))
            votes[lbl] = (cnt + 1, tot + float(dists[idx]))
        expect = sorted(votes.items(),
                        key=lambda kv: (-kv[1][0], kv[1][1] / kv[1][0], kv[0]))[0][0]
        got = geval.knn_classify(pts, labels, query, K=K)[0]
        knn_ok = knn_ok and got == expect

    ok = dbi_ok and rot_ok and nn_ok and knn_ok
    report(capfd, 5, "metric oracles", ok,
           f"dbi {dbi_ok}, rotation {rot_ok}, nn {nn_ok}, knn {knn_ok}")


def _tiny_corpus():
    rng = np.random.default_rng(42)
    ds = PairDataset(rng.random((60, 16)).astype(np.float32),
                     rng.random((60, 16)).astype(np.float32),
                     rng.integers(-180, 180, 60).astype(np.int16))
    return contrast_normalize(ds)


def test_acceptance_6_vanilla_equivalence(capfd):
    ds = _tiny_corpus()
    gcfg = GaeConfig(16, 8, 4)

    def make_state(schedule):
        tcfg = gtrain.TrainConfig(learning_rate=0.005, batch_size=12, epochs=50,
                                  grad_clip_norm=10.0, cir=schedule, seed=8)
        return gtrain.TrainState.new(gcfg, tcfg)

    zero = make_state(CirSchedule(lambda_max=0.0, k_max=10, ramp_epochs=25))
    off = make_state(CirSchedule.disabled())
    identical = True
    for epoch in range(50):
        rz = gtrain.train_epoch(zero, ds, epoch)
        ro = gtrain.train_epoch(off, ds, epoch)
        identical = identical and rz.total == ro.total and rz.sre == ro.sre
    identical = (identical
                 and np.array_equal(zero.params.u, off.params.u)
                 and np.array_equal(zero.params.v, off.params.v)
                 and np.array_equal(zero.params.w, off.params.w))
    report(capfd, 6, "vanilla equivalence", identical,
           "lambda_max=0 losses and weights bit-identical to disabled path")


def test_acceptance_7_determinism_and_persistence(tmp_path, capfd):
    ds = _tiny_corpus()
    gcfg = GaeConfig(16, 8, 4)
    tcfg = gtrain.TrainConfig(learning_rate=0.005, batch_size=12, epochs=20,
                              grad_clip_norm=10.0, seed=5,
                              cir=CirSchedule(lambda_max=0.5, k_max=3,
                                              ramp_epochs=10))

    def run_to(epochs):
        state = gtrain.TrainState.new(gcfg, tcfg)
        gtrain.train(state, ds, epochs=epochs)
        return state

    paths = {}
    for name, state in (("a", run_to(20)), ("b", run_to(20))):
        paths[name] = tmp_path / f"{name}.ckpt"
        gtrain.save_checkpoint(gtrain.Checkpoint.from_state(state), paths[name])
    same_seed = paths["a"].read_bytes() == paths["b"].read_bytes()

    reloaded = tmp_path / "reloaded.ckpt"
    gtrain.save_checkpoint(gtrain.load_checkpoint(paths["a"]), reloaded)
    round_trip = paths["a"].read_bytes() == reloaded.read_bytes()

    part = run_to(12)
    mid = tmp_path / "mid.ckpt"
    gtrain.save_checkpoint(gtrain.Checkpoint.from_state(part), mid)
    resumed = gtrain.load_checkpoint(mid).to_state()
    gtrain.train(resumed, ds, epochs=20)
    res_path = tmp_path / "resumed.ckpt"
    gtrain.save_checkpoint(gtrain.Checkpoint.from_state(resumed), res_path)
    resume_ok = res_path.read_bytes() == paths["a"].read_bytes()

    ok = same_seed and round_trip and resume_ok
    report(capfd, 7, "determinism and persistence", ok,
           f"same-seed {same_seed}, save/load/save {round_trip}, "
           f"resume {resume_ok}")


def test_acceptance_8_identity_analogy(desk, capfd):
    params, test = desk["cir"], desk["test"]
    # every test image as identity source x every test image as query
    codes = gm.infer_mapping(params, test.x, test.x)
    total = 0.0
    for i in range(len(test)):
        recon = gm.reconstruct_y(params, codes[i], test.x)
        total += float(np.mean((recon - test.x) ** 2))
    mean_err = total / len(test)

    png = desk["root"] / "grid.png"
    assert run_cli("analogy", "--checkpoint", desk["cir_ckpt"],
                   "--data", desk["root"] / "test.pairs",
                   "--pairs", 3, "--queries", 5, "--out", png) == 0
    with Image.open(png) as img:
        width, height = img.size
    layout_ok = height == 7 * 16 + 6 * 2 and width == 4 * 16 + 3 * 2

    ok = mean_err < 0.1 and layout_ok
    report(capfd, 8, "identity analogy", ok,
           f"mean per-pixel mse {mean_err:.4f} (<0.1), "
           f"grid {width}x{height} px (expect 70x124)")

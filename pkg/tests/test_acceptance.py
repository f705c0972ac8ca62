"""End-to-end acceptance checks A1-A9.

Each test prints one ``A<n> PASS|FAIL`` line; the session summary repeats
them.  The training criteria (A5, A6, A9) share session-scoped runs.
"""

import time

import numpy as np
import pytest

from nmnet import baseline, cli, compat, geom, synth
from nmnet import evaluation as ev
from nmnet.net import gradcheck
from nmnet.net import model as M
from nmnet.net import train as T

RESULTS: dict = {}

# training protocol shared by A5, A6 and A9
TRAIN_SCENES = 800
TEST_SCENES = 200
SCENE_SIZE = 200
EPOCHS = 6
K = 8
LAM = 1e-3


def report(capsys, name, ok, detail):
    line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
    RESULTS[name] = line
    with capsys.disabled():
        print("\n" + line)
    return ok


# ---------------------------------------------------------------------------
# A1: compatibility neighbors are richer in inliers than spatial neighbors
# ---------------------------------------------------------------------------

BUCKET_RATIOS = {"<20%": (0.05, 0.19), "20-35%": (0.20, 0.34), "35-50%": (0.36, 0.50), ">50%": (0.52, 0.90)}


def test_a1_neighbor_inlier_ratio(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    stats = compat.NeighborStats(compat.STATS_KS)
    for b, (lo, hi) in enumerate(BUCKET_RATIOS.values()):
        for i in range(200):
            cfg = synth.GeneratorConfig(n_correspondences=500, inlier_ratio=float(rng.uniform(lo, hi)), keypoint_noise_sigma=1e-3, seed=b * 1000 + i)
            s = synth.generate(cfg)
            compat.neighbor_inlier_stats([(s.corrs, s.labels)], compat.STATS_KS, LAM, stats)
    elapsed = time.perf_counter() - t0
    gaps = {bucket: stats.mean("cs", bucket, 8) - stats.mean("sp", bucket, 8) for bucket in compat.BUCKETS}
    counts = {bucket: stats.count(bucket) for bucket in compat.BUCKETS}
    dominance = all(stats.mean("cs", bucket, k) >= stats.mean("sp", bucket, k) for bucket in compat.BUCKETS for k in compat.STATS_KS)
    ok = all(g >= 0.10 for g in gaps.values()) and dominance and all(c == 200 for c in counts.values()) and elapsed < 300
    gap_text = ", ".join(f"{b} {100 * g:.1f}pp" for b, g in gaps.items())
    report(capsys, "A1", ok, f"k=8 CS-SP gap {gap_text}; CS>=SP all k: {dominance}; {elapsed:.0f}s")
    with capsys.disabled():
        print(stats.table())
    assert ok


# ---------------------------------------------------------------------------
# A2: score properties and lambda invariance of the ranking
# ---------------------------------------------------------------------------


def _random_rows(rng, n):
    rows = synth.sample_uniform_outliers(rng, n)
    rows[:, 2:6] = synth.random_frames(rng, n).reshape(n, 4)
    rows[:, 8:12] = synth.random_frames(rng, n).reshape(n, 4)
    return rows


def test_a2_score_properties(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(200)
    a, b = _random_rows(rng, 10_000), _random_rows(rng, 10_000)
    asym, lo, hi, diag = 0.0, 1.0, 0.0, True
    for lam in (LAM, 1e-1):
        for ra, rb in zip(a, b):
            ca, cb = geom.Correspondence.from_row(ra), geom.Correspondence.from_row(rb)
            s_ab, s_ba = compat.pair_score(ca, cb, lam), compat.pair_score(cb, ca, lam)
            asym = max(asym, abs(s_ab - s_ba))
            lo, hi = min(lo, s_ab), max(hi, s_ab)
        for ra in a[:1000]:
            ca = geom.Correspondence.from_row(ra)
            diag &= compat.pair_score(ca, ca, lam) == 1.0
    same = True
    for seed in range(10):
        s = synth.generate(synth.GeneratorConfig(n_correspondences=300, inlier_ratio=0.4, seed=seed))
        graphs = [compat.mine_cs_knn(compat.score_matrix(s.corrs, lam), K).indices for lam in (1e-4, 1e-3, 1e-1)]
        same &= all(np.array_equal(graphs[0], g) for g in graphs[1:])
    elapsed = time.perf_counter() - t0
    ok = asym < 1e-12 and lo > 0 and hi <= 1 and diag and same and elapsed < 30
    report(capsys, "A2", ok, f"asymmetry {asym:.1e}, range [{lo:.3g}, {hi:.3g}], diagonal 1: {diag}, lambda-invariant lists: {same}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# A3: analytic gradients agree with finite differences
# ---------------------------------------------------------------------------


def test_a3_gradient_check(capsys):
    t0 = time.perf_counter()
    s = synth.generate(synth.GeneratorConfig(n_correspondences=16, inlier_ratio=0.5, seed=300))
    idx = T.mine_graph(s.corrs, 4)
    model = M.init_model(M.Architecture.named("micro"), seed=300)
    errs = gradcheck.check_gradients(model, s.corrs, idx, s.labels[None], h=1e-4)
    worst = max(errs, key=errs.get)
    elapsed = time.perf_counter() - t0
    ok = set(errs) == set(model.params) and errs[worst] < 1e-4 and elapsed < 120
    report(capsys, "A3", ok, f"{len(errs)} blocks, {model.n_parameters()} entries, worst {worst} {errs[worst]:.2e}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# A4: logits are permutation equivariant
# ---------------------------------------------------------------------------


def test_a4_permutation_equivariance(capsys):
    rng = np.random.default_rng(400)
    model = M.init_model(M.Architecture.named("tiny"), seed=400)
    cfg = T.TrainConfig(arch="tiny", k=K)
    worst = 0.0
    for i in range(20):
        s = synth.generate(synth.GeneratorConfig(n_correspondences=60, inlier_ratio=0.4, seed=400 + i))
        logits, _ = M.forward(model, s.corrs, T.mine_graph(s.corrs, cfg.k, cfg.lam))
        for _ in range(5):
            perm = rng.permutation(len(s.corrs))
            pc = s.corrs[perm]
            plogits, _ = M.forward(model, pc, T.mine_graph(pc, cfg.k, cfg.lam))
            worst = max(worst, float(np.abs(plogits[0] - logits[0][perm]).max()))
    ok = worst < 1e-5
    report(capsys, "A4", ok, f"max logit difference {worst:.1e} over 100 permutations")
    assert ok


# ---------------------------------------------------------------------------
# A5, A6, A9: trained networks against RANSAC and the score-sum rule
# ---------------------------------------------------------------------------


def _score_sum_sweep(scenes):
    per_threshold: dict = {}
    for s in scenes:
        matrix = compat.score_matrix(s.corrs, LAM)
        graph = compat.mine_cs_knn(matrix, K, include_self=False)
        for t, labels in compat.score_sum_sweep(graph, matrix).items():
            per_threshold.setdefault(t, []).append(ev.prf(labels, s.labels).f_measure)
    return {t: float(np.mean(v)) for t, v in per_threshold.items()}


def _mean_f(select, scenes):
    return float(np.mean([ev.prf(select(s), s.labels).f_measure for s in scenes]))


def run_protocol(ratio, seed):
    """Train both networks on one synthetic split and score every selector on the test split."""
    t0 = time.perf_counter()
    gen = synth.GeneratorConfig(n_correspondences=SCENE_SIZE, inlier_ratio=ratio)
    train_set = synth.generate_many(gen, TRAIN_SCENES, seed=seed)
    test_set = synth.generate_many(gen, TEST_SCENES, seed=seed + 1)
    out = {"ratio": ratio}
    for name, mining in (("nmnet", "compatibility"), ("nmnet_sp", "spatial")):
        cfg = T.TrainConfig(learning_rate=1e-3, batch_size=16, epochs=EPOCHS, k=K, lam=LAM, mining=mining, seed=seed)
        model, _ = T.train(train_set, cfg)
        out[name] = _mean_f(ev.make_selector(name, model=model, config=cfg), test_set)
    out["ransac"] = _mean_f(ev.make_selector("ransac", ransac_config=baseline.RansacConfig(seed=seed)), test_set)
    out["sweep"] = _score_sum_sweep(test_set)
    out["seconds"] = time.perf_counter() - t0
    return out


@pytest.fixture(scope="session")
def protocol_40():
    return run_protocol(0.4, seed=500)


@pytest.fixture(scope="session")
def protocol_08():
    return run_protocol(0.08, seed=600)


def _summary(r):
    best = max(r["sweep"].values())
    return f"F nmnet {r['nmnet']:.4f}, nmnet_sp {r['nmnet_sp']:.4f}, ransac {r['ransac']:.4f}, best score_sum {best:.4f}; {r['seconds'] / 60:.1f} min"


def test_a5_ordering_at_40_percent(protocol_40, capsys):
    r = protocol_40
    ok = r["nmnet"] >= r["nmnet_sp"] and r["nmnet"] >= max(r["sweep"].values()) and r["nmnet"] >= r["ransac"] and r["seconds"] < 1800
    report(capsys, "A5", ok, _summary(r))
    assert ok


def test_a6_ordering_at_8_percent(protocol_08, protocol_40, capsys):
    r = protocol_08
    gap_low = r["nmnet"] - r["nmnet_sp"]
    gap_40 = protocol_40["nmnet"] - protocol_40["nmnet_sp"]
    ok = r["nmnet"] > r["ransac"] and gap_low >= gap_40
    report(capsys, "A6", ok, f"{_summary(r)}; nmnet-sp gap {gap_low:.4f} at 8% vs {gap_40:.4f} at 40%")
    assert ok


def test_a9_beats_every_sweep_threshold(protocol_40, capsys):
    r = protocol_40
    beaten = [t for t, f in r["sweep"].items() if not r["nmnet"] > f]
    lo, hi = min(r["sweep"].values()), max(r["sweep"].values())
    ok = not beaten and len(r["sweep"]) == 30
    report(capsys, "A9", ok, f"nmnet F {r['nmnet']:.4f} vs score_sum F in [{lo:.4f}, {hi:.4f}] over {len(r['sweep'])} thresholds; not beaten at {beaten}")
    assert ok


# ---------------------------------------------------------------------------
# A7: geometry oracles
# ---------------------------------------------------------------------------

NOISELESS = dict(keypoint_noise_sigma=0.0, frame_noise_sigma=0.0)


def test_a7_geometry_oracles(capsys):
    dev = 0.0
    for seed in range(20):
        s = synth.generate(synth.GeneratorConfig(n_correspondences=100, inlier_ratio=1.0, seed=700 + seed, **NOISELESS))
        dev = max(dev, ev.essential_deviation(baseline.eight_point(s.corrs), s.e_gt))

    ps, rs, dist = [], [], 0.0
    for s in synth.generate_many(synth.GeneratorConfig(n_correspondences=200, inlier_ratio=0.6, **NOISELESS), 20, seed=710):
        m = ev.prf(baseline.ransac(s.corrs, baseline.RansacConfig(iterations=1000))[1], s.labels)
        ps.append(m.precision)
        rs.append(m.recall)
        d = geom.symmetric_epipolar_distances(s.e_gt, s.corrs)
        dist = max(dist, float(d[s.labels.astype(bool)].max()))

    rng = np.random.default_rng(720)
    wrong = total = 0
    for seed in range(20):
        s = synth.generate(synth.GeneratorConfig(n_correspondences=20, inlier_ratio=1.0, seed=720 + seed))
        rows = synth.sample_uniform_outliers(rng, 1000)
        wrong += int(geom.label_set(rows, s.e_gt).sum())
        total += len(rows)
    mislabel = wrong / total

    p, r = float(np.mean(ps)), float(np.mean(rs))
    ok = dev < 1e-6 and p >= 0.99 and r >= 0.99 and dist < 1e-12 and mislabel < 0.05
    detail = f"eight-point deviation {dev:.1e}; RANSAC mean P {p:.4f} R {r:.4f} (worst scene P {min(ps):.4f}); inlier distance {dist:.1e}; random-outlier mislabel {100 * mislabel:.2f}%"
    report(capsys, "A7", ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# A8: every subcommand is byte-reproducible
# ---------------------------------------------------------------------------


def test_a8_determinism(tmp_path, capsys):
    def run_all(d):
        d.mkdir()
        data = d / "data.jsonl"
        runs = [
            ["synth", "--scenes", "4", "--n", "60", "--out", data, "--seed", "8"],
            ["stats", "--data", data],
            ["mine", "--data", data, "--out", d / "graphs.jsonl"],
            ["train", "--data", data, "--k", "4", "--epochs", "2", "--batch-size", "2", "--arch", "tiny", "--out", d / "model.ckpt", "--history", d / "history.json"],
            ["infer", "--checkpoint", d / "model.ckpt", "--data", data, "--out", d / "labels.jsonl"],
            ["baseline", "--data", data, "--iterations", "100", "--out", d / "ransac.jsonl"],
            ["eval", "--data", data, "--selector", "nmnet", "--selector", "score_sum", "--selector", "ransac", "--checkpoint", d / "model.ckpt",
             "--k", "4", "--score-threshold", "3", "--iterations", "100", "--out", d / "report.json"],
        ]
        stdout = []
        for argv in runs:
            code = cli.main([str(a) for a in argv])
            out, err = capsys.readouterr()
            assert code == 0, err
            stdout.append(out.replace(str(d), "<dir>"))
        return stdout, {p.name: p.read_bytes() for p in sorted(d.iterdir())}

    first, second = run_all(tmp_path / "a"), run_all(tmp_path / "b")
    differing = sorted(k for k in first[1] if first[1][k] != second[1].get(k))
    ok = first == second
    report(capsys, "A8", ok, f"{len(first[1])} output files and 7 stdout streams identical; differing: {differing or 'none'}")
    assert ok

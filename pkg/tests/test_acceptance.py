"""Acceptance criteria 1-10, each reported as one PASS/FAIL line.

The lines are printed as each test finishes and again in the terminal
summary, so ``pytest -v`` output carries the full scorecard.
"""

import hashlib
import statistics
import time
from fractions import Fraction

import numpy as np
import pytest

from railsim.analysis import brute_force_optimal, load_matrices, lp_lower_bound
from railsim.experiment import PRESETS, preset_config, resolve_config, rows_to_csv, run_rows
from railsim.flowsim import RTOL, simulate
from railsim.scheduling import POLICY_KINDS, AtomicFlow, lpt_schedule, make_policy, messages, uniform_allocation
from railsim.topology import build_topology, parse_rate
from railsim.workload import (
    DomainTrafficMatrix, GpuTrafficMatrix, WorkloadSpec, aggregate, generate,
    synthetic_mixtral_trace,
)

R2 = parse_rate("100G")
BASELINES = ("ecmp", "minrtt", "plb", "reps")
SEEDS = (0, 1, 2, 3, 4)


@pytest.fixture
def record(acceptance_log):
    def _record(n, ok, detail):
        line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        acceptance_log[n] = line
        print(line)
        return ok
    return _record


_PRESET_CACHE: dict = {}


def preset_rows(name, tmp_dir, seeds=None, workers=1):
    """Rows of a preset run; serial runs are cached so several criteria share them."""
    key = (name, tuple(seeds or ()), workers)
    if key not in _PRESET_CACHE:
        cfg = preset_config(name, tmp_dir)
        if seeds is not None:
            cfg["seeds"] = list(seeds)
        _PRESET_CACHE[key] = run_rows(resolve_config(cfg, tmp_dir), workers=workers)
    return _PRESET_CACHE[key]


@pytest.fixture(scope="module")
def work_dir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def by(rows, **match):
    return [r for r in rows if all(r[k] == v for k, v in match.items())]


def flows_of(weights):
    return [AtomicFlow(i, (0, 0), (1, 0), int(w)) for i, w in enumerate(weights)]


def test_criterion_01_lpt_bound(record):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    mse_bad = spread_bad = 0
    for _ in range(1000):
        F = int(rng.integers(1, 501))
        N = int(rng.choice([2, 4, 8, 16]))
        w = rng.integers(1, 10**6 + 1, size=F)
        _, state = lpt_schedule(flows_of(w), N)
        w_max = int(w.max())
        mean = Fraction(int(w.sum()), N)
        if sum((x - mean) ** 2 for x in state.loads) / N > w_max**2:
            mse_bad += 1
        if max(state.loads) - min(state.loads) > w_max:
            spread_bad += 1
    elapsed = time.perf_counter() - t0
    ok = mse_bad == 0 and spread_bad == 0 and elapsed < 10
    record(1, ok, f"1000 instances, MSE violations {mse_bad}, spread violations {spread_bad}, {elapsed:.1f}s (<10s)")
    assert ok


def test_criterion_02_lpt_vs_exhaustive(record):
    t0 = time.perf_counter()
    violations = checked = 0
    worst = Fraction(0)
    for seed in range(200):
        rng = np.random.default_rng(seed)
        for N in (2, 3):
            for F in range(1, 13):
                w = rng.integers(1, 10**6 + 1, size=F)
                fl = flows_of(w)
                _, state = lpt_schedule(fl, N)
                opt, _, _ = brute_force_optimal(fl, N)
                ratio = Fraction(max(state.loads), opt)
                worst = max(worst, ratio)
                checked += 1
                if ratio > Fraction(4, 3) - Fraction(1, 3 * N):
                    violations += 1
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 30
    record(2, ok, f"{checked} instances (F 1..12, N 2..3, 200 seeds), violations {violations}, "
                  f"worst ratio {float(worst):.4f}, {elapsed:.1f}s (<30s)")
    assert ok


def test_criterion_03_exact_symmetry(record):
    rng = np.random.default_rng(3)
    mismatches = 0
    for _ in range(100):
        M, N = int(rng.integers(2, 17)), int(rng.integers(1, 17))
        D = rng.integers(0, 10**9, size=(M, M))
        np.fill_diagonal(D, 0)
        L = load_matrices(DomainTrafficMatrix(D), uniform_allocation(M, N))
        rows, cols = D.sum(axis=1), D.sum(axis=0)
        for k in range(M):
            for n in range(N):
                mismatches += (L.S[k, n] * N != rows[k]) + (L.R[k, n] * N != cols[k])
    ok = mismatches == 0
    record(3, ok, f"100 integer matrices (M, N <= 16), exact mismatches {mismatches}")
    assert ok


def random_workload(rng, M, N):
    kind = int(rng.integers(0, 5))
    total = int(rng.integers(1_000_000, 16_000_001))
    seed = int(rng.integers(0, 2**31))
    if kind == 4:
        # arbitrary sparse GPU matrix, not tied to any generator family
        e = rng.integers(1, 2_000_000, size=(M, N, M, N)) * (rng.random((M, N, M, N)) < 0.3)
        for d in range(M):
            e[d, :, d, :] = 0
        return "random", GpuTrafficMatrix(e)
    family = ("uniform", "sparse_topk", "sender_skewed", "receiver_skewed")[kind]
    spec = WorkloadSpec(family, total_bytes_per_sender=total, seed=seed,
                        sparsity=float(rng.choice([0.0, 0.2, 0.4, 0.6])),
                        zipf_exponent=float(rng.uniform(0.5, 2.0)))
    (_, d1), = generate(spec, M, N)
    return family, d1


def test_criterion_04_lp_bound_attainment(record):
    topo = build_topology(8, 8, R2)
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    worst_gap = 0.0
    worst_beat = 0.0
    oracle_bad = beat_bad = 0
    for i in range(50):
        _, d1 = random_workload(rng, 8, 8)
        t_star, _ = lp_lower_bound(aggregate(d1), 8, R2)
        msgs = messages(d1)
        res = simulate(topo, msgs, make_policy("uniform_oracle"))
        gap = res.total_time / t_star - 1
        worst_gap = max(worst_gap, gap)
        oracle_bad += gap > 0.02
        kinds = POLICY_KINDS if i < 8 else ("ecmp",)
        for kind in kinds:
            r = res if kind == "uniform_oracle" else simulate(topo, msgs, make_policy(kind, seed=i))
            beat = 1 - r.total_time / t_star
            worst_beat = max(worst_beat, beat)
            beat_bad += beat > 1e-6
    elapsed = time.perf_counter() - t0
    ok = oracle_bad == 0 and beat_bad == 0 and elapsed < 60
    record(4, ok, f"50 workloads, uniform_oracle worst T/T* - 1 = {worst_gap:.5f} (<=0.02), "
                  f"largest undercut of T* {max(worst_beat, 0.0):.2e} (<=1e-6), {elapsed:.1f}s (<60s)")
    assert ok


def test_criterion_05_pair_ceiling(record):
    topo = build_topology(8, 8, R2)
    matrix = []
    for family, kw in (("uniform", {}), ("sparse_topk", {"sparsity": 0.6}), ("sender_skewed", {}),
                       ("receiver_skewed", {})):
        (_, d1), = generate(WorkloadSpec(family, total_bytes_per_sender=4_000_000, **kw), 8, 8)
        matrix.append((family, d1))
    for mode in ("dense", "sparse"):
        phases = synthetic_mixtral_trace(8, 8, mode, seed=0, volumes=(25_000_000,), phases=("Start",))
        matrix.append((f"mixtral_{mode}", phases[0][1]))
    worst = 0.0
    runs = violations = 0
    for _, d1 in matrix:
        msgs = messages(d1)
        for kind in POLICY_KINDS:
            try:
                res = simulate(topo, msgs, make_policy(kind, seed=5), check_invariants=True)
            except Exception:
                violations += 1
                continue
            runs += 1
            worst = max(worst, res.meta["max_pair_rate_ratio"])
            violations += res.meta["max_pair_rate_ratio"] > 1 + RTOL
    ok = violations == 0
    record(5, ok, f"{runs} runs ({len(POLICY_KINDS)} policies x {len(matrix)} workloads), "
                  f"max pair rate / (N*R2) = {worst:.12f}, violations {violations}")
    assert ok


def test_criterion_06_sparse(record, work_dir):
    rows = preset_rows("sparse-0.6", work_dir, seeds=SEEDS)
    ratios, reductions = [], []
    for s in SEEDS:
        rails = by(rows, policy="rails_lpt", seed=s)[0]
        ratios.append(rails["busbw_norm"])
        best = min(by(rows, policy=b, seed=s)[0]["cct_total"] for b in BASELINES)
        reductions.append(1 - rails["cct_total"] / best)
    ratio, reduction = statistics.mean(ratios), statistics.mean(reductions)
    ok = ratio >= 1.5 and reduction >= 0.30
    per_seed = ", ".join(f"{a:.2f}/{b:.0%}" for a, b in zip(ratios, reductions))
    record(6, ok, f"sparse-0.6 mean over seeds 0-4: BusBw {ratio:.2f}x ECMP (>=1.5), "
                  f"CCT reduction {reduction:.0%} vs best baseline (>=30%); per seed {per_seed}")
    assert ok


def test_criterion_07_receiver_skewed(record, work_dir):
    rows = preset_rows("receiver_skewed", work_dir, seeds=SEEDS)
    rails_mse = max(by(rows, policy="rails_lpt", seed=s)[0]["receiver_mse_max"] for s in SEEDS)
    ecmp_hot = min(by(rows, policy="ecmp", seed=s)[0]["receiver_mse_hot"] for s in SEEDS)
    reduction = min(
        1 - by(rows, policy="rails_lpt", seed=s)[0]["cct_total"] / by(rows, policy=b, seed=s)[0]["cct_total"]
        for s in SEEDS for b in BASELINES
    )
    ok = rails_mse < 0.01 and ecmp_hot >= 0.05 and reduction >= 0.40
    record(7, ok, f"receiver-skewed, every seed 0-4: RailS worst per-domain receiver MSE {rails_mse:.2e} (<0.01), "
                  f"ECMP hot-domain MSE >= {ecmp_hot:.3f} (>=0.05), min CCT reduction {reduction:.0%} (>=40%)")
    assert ok


def test_criterion_08_sender_skewed(record, work_dir):
    rows = preset_rows("sender_skewed", work_dir, seeds=SEEDS)
    good = max(by(rows, policy=p, seed=s)[0]["sender_mse_max"] for p in ("rails_lpt", "reps") for s in SEEDS)
    bad = min(by(rows, policy=p, seed=s)[0]["sender_mse_hot"] for p in ("ecmp", "plb") for s in SEEDS)
    ok = good < 0.01 and bad >= 0.05
    record(8, ok, f"sender-skewed, every seed 0-4: RailS/REPS worst sender MSE {good:.2e} (<0.01), "
                  f"ECMP/PLB hot-domain sender MSE >= {bad:.3f} (>=0.05)")
    assert ok


def iteration_reduction(rows):
    out = []
    for phase in ("Start", "Early", "Mid", "Stable"):
        rails = by(rows, policy="rails_lpt", phase=phase)[0]["iter_time"]
        ecmp = by(rows, policy="ecmp", phase=phase)[0]["iter_time"]
        out.append(1 - rails / ecmp)
    return out


def test_criterion_09_mixtral(record, work_dir):
    dense = iteration_reduction(preset_rows("mixtral_dense", work_dir))
    sparse = iteration_reduction(preset_rows("mixtral_sparse", work_dir))
    d, s = statistics.mean(dense), statistics.mean(sparse)
    ok = d >= 0.10 and s >= 0.30
    record(9, ok, f"iteration-time reduction vs ECMP, mean over 4 phases: dense {d:.1%} (>=10%), "
                  f"sparse {s:.1%} (>=30%); per phase dense {[f'{x:.1%}' for x in dense]}, "
                  f"sparse {[f'{x:.1%}' for x in sparse]}")
    assert ok


def test_criterion_10_determinism(record, work_dir):
    mismatched = []
    for name in sorted(PRESETS):
        serial = hashlib.sha256(rows_to_csv(preset_rows(name, work_dir)).encode()).hexdigest()
        parallel = hashlib.sha256(rows_to_csv(preset_rows(name, work_dir, workers=2)).encode()).hexdigest()
        if serial != parallel:
            mismatched.append(name)
    cfg = preset_config("sparse-0.6", work_dir)
    cfg["seeds"] = [0, 1, 2]
    again = [hashlib.sha256(rows_to_csv(run_rows(resolve_config(cfg, work_dir))).encode()).hexdigest()
             for _ in range(2)]
    if again[0] != again[1]:
        mismatched.append("sparse-0.6 serial rerun")
    ok = not mismatched
    record(10, ok, f"{len(PRESETS)} presets hashed serial vs 2-worker parallel plus a serial rerun; "
                   f"mismatches {mismatched or 'none'}")
    assert ok

"""Acceptance suite A1-A8. Each test records one PASS/FAIL line, printed in the terminal summary."""

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from stcvit.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from stcvit.cli import main
from stcvit.data import LatLonGrid, generate_synthetic, latitude_weights, read_grid, write_grid
from stcvit.model import VARIANTS, AttentionProjections, ModelConfig, build_variant, spatial_attention, \
    temporal_continuous_attention
from stcvit.ode import OdeProblem, estimate_order, integrate
from stcvit.physics import ChannelBindings, LossWeights, acc_metric, combined_loss, kinetic_loss, \
    lat_weighted_mse, potential_loss, rmse_metric, thermo_loss
from stcvit.tensor import Tensor, grad_check, precision
from stcvit.train import EarlyStopState, ForecastData, OptimizerState, ScheduleConfig, TrainConfig, _loss, \
    adamw_step, cosine_warmup_lr, evaluate, train

from test_model import sa_loop_oracle
from test_physics import acc_oracle, rmse_oracle

RESULTS: dict[str, str] = {}
NAMES = ("t2m", "u10", "v10", "z500")


class Criterion:
    """Collects named checks; records one verdict line and fails the test on any miss."""

    def __init__(self, key: str, budget_s: float):
        self.key, self.budget, self.failures = key, budget_s, []
        self.t0 = time.perf_counter()

    def check(self, ok, what: str):
        if not ok:
            self.failures.append(what)

    def finish(self, detail: str = "", elapsed: float | None = None):
        elapsed = time.perf_counter() - self.t0 if elapsed is None else elapsed
        self.check(elapsed < self.budget, f"runtime {elapsed:.1f}s over {self.budget:.0f}s budget")
        status = "FAIL" if self.failures else "PASS"
        msg = "; ".join(self.failures + ([f"[{detail}]"] if detail else [])) if self.failures else detail
        RESULTS[self.key] = f"{self.key} {status} ({elapsed:.1f}s) {msg}"
        assert not self.failures, RESULTS[self.key]


# -- A1 -----------------------------------------------------------------------------------------
def test_a1_gradient_correctness():
    c = Criterion("A1", 60)
    with precision(np.float64):
        grid = LatLonGrid.regular(4, 4)
        data = ForecastData(generate_synthetic(grid, 24, 0))
        cfg = ModelConfig(data.var_names, grid.shape, dim=8, heads=2, depth=1, dropout=0.0)
        m = build_variant(cfg, 0).eval()
        r = np.random.default_rng(5)
        for p in m.parameters():  # move away from the initial zero/identity values
            p.data = p.data + r.normal(0, 0.3, p.shape)
        arr = data.windows("train", np.float64)
        idx = np.arange(2)
        rep = grad_check(lambda *ps: _loss(m, data, arr, idx, LossWeights())[0], m.parameters(), 1e-6, 1e-3)
    c.check(rep.passed, f"max relative error {rep.max_rel_error:.2e}")
    c.finish(f"max relative error {rep.max_rel_error:.2e} over {sum(p.size for p in m.parameters())} parameters")


# -- A2 -----------------------------------------------------------------------------------------
def test_a2_solver_order():
    c = Criterion("A2", 5)
    field = lambda h, t: h  # noqa: E731
    exact = lambda t: np.array([math.exp(t)])  # noqa: E731
    rk4 = estimate_order("rk4", field, [1.0], exact)
    euler = estimate_order("euler", field, [1.0], exact)
    with precision(np.float64):
        e = integrate(OdeProblem(field, 0.0, 1.0, 10, "rk4"), Tensor([1.0])).data[0]
    c.check(abs(rk4 - 4.0) <= 0.5, f"rk4 order {rk4:.3f}")
    c.check(abs(euler - 1.0) <= 0.2, f"euler order {euler:.3f}")
    c.check(abs(e - math.e) < 1e-5, f"rk4 e error {abs(e - math.e):.2e}")
    c.finish(f"rk4 order {rk4:.3f}, euler order {euler:.3f}, |e err| {abs(e - math.e):.1e}")


# -- A3 -----------------------------------------------------------------------------------------
def test_a3_attention_invariants():
    c = Criterion("A3", 60)
    trials, worst_sum, worst_sa, bad_collapse = 10_000, 0.0, 0.0, 0
    r = np.random.default_rng(2024)
    with precision(np.float64):
        for k in range(trials):
            t, heads = int(r.integers(1, 9)), int(r.choice([1, 2, 4]))
            p = AttentionProjections(r, 8)
            scale = r.uniform(0.1, 3.0)
            for w in (p.w_q, p.w_k, p.w_v, p.w_o):
                w.data = r.normal(0, scale, w.shape)
            curr, prev = Tensor(r.normal(size=(1, t, 8)) * 3), Tensor(r.normal(size=(1, t, 8)) * 3)
            _, w_tca, _ = temporal_continuous_attention(curr, prev, p, heads, return_weights=True)
            out_sa, w_sa = spatial_attention(curr, p, heads, return_weights=True)
            for w, axis in ((w_tca.data, 1), (w_sa.data, -1)):
                if np.any(w < 0):
                    worst_sum = math.inf
                worst_sum = max(worst_sum, float(np.abs(w.sum(axis=axis) - 1).max()))
            _, w0, y0 = temporal_continuous_attention(curr, curr, p, heads, return_weights=True)
            bad_collapse += int(not (np.all(y0.data == 0.0) and np.all(w0.data == 1.0 / t)))
            if k % 10 == 0:  # the loop oracle dominates the cost; every tenth trial is still 10^3 comparisons
                worst_sa = max(worst_sa, float(np.abs(out_sa.data - sa_loop_oracle(curr.data, p, heads)).max()))
    c.check(worst_sum <= 1e-5, f"weights off simplex by {worst_sum:.2e}")
    c.check(bad_collapse == 0, f"{bad_collapse} collapse violations")
    c.check(worst_sa <= 1e-5, f"SA vs loop oracle {worst_sa:.2e}")
    c.finish(f"{trials} trials, max |sum-1| {worst_sum:.1e}, SA oracle err {worst_sa:.1e}, collapse exact")


# -- A4 -----------------------------------------------------------------------------------------
def test_a4_loss_metric_identities():
    c = Criterion("A4", 30)
    b = ChannelBindings(NAMES)
    r = np.random.default_rng(11)
    with precision(np.float64):
        for h, w in ((4, 8), (8, 16), (32, 64), (5, 7)):
            lw = latitude_weights(LatLonGrid.regular(h, w))
            c.check(abs(lw.mean() - 1) <= 1e-12, f"lat weight mean {lw.mean()!r} on {h}x{w}")
        grid = LatLonGrid.regular(4, 8)
        x = r.normal(size=(4, 4, 8))
        c.check(lat_weighted_mse(x, x, latitude_weights(grid)).item() == 0.0, "mse(x, x) != 0")
        c.check(kinetic_loss(x, x, b).item() == 0.0, "kinetic(x, x) != 0")
        c.check(potential_loss(x, x, b).item() == 0.0, "potential(x, x) != 0")
        t_static = np.full((4, 8), 285.0)
        c.check(thermo_loss(t_static, t_static, x[1], x[2], grid, 21600.0).item() == 0.0, "thermo static != 0")
        static = np.zeros((4, 4, 8))
        static[0], static[3] = 290.0, 5500.0
        total, _ = combined_loss(static, static, static, LossWeights(), b, grid, 21600.0)
        c.check(total.item() == 0.0, f"combined(pred == truth) = {total.item()}")
        p, y, xin = r.normal(size=(3, 4, 4, 8))
        total, _ = combined_loss(p, y, xin, LossWeights(0, 0, 0), b, grid, 21600.0)
        c.check(total.item() == lat_weighted_mse(p, y, latitude_weights(grid)).item(), "combined(0,0,0) != mse")

        def fld(**kw):
            f = np.zeros((4, 4, 8))
            for k, v in kw.items():
                f[NAMES.index(k)] = v
            return f

        kin = kinetic_loss(fld(u10=3.0, v10=4.0), fld(), b).item()
        pot = potential_loss(fld(z500=100.0), fld(z500=90.0), b).item()
        c.check(kin == 12.5, f"kinetic hand case {kin!r}")
        c.check(abs(pot - 98.1) <= 1e-12, f"potential hand case {pot!r}")

        lw = latitude_weights(grid)
        clim = r.normal(size=(4, 4, 8))
        truth = clim + r.normal(size=(3, 4, 4, 8))
        c.check(np.allclose(acc_metric(list(truth), list(truth), clim, lw), 1.0, atol=1e-12), "ACC perfect != 1")
        c.check(np.allclose(acc_metric(list(2 * clim - truth), list(truth), clim, lw), -1.0, atol=1e-12),
                "ACC anti != -1")
        g4 = LatLonGrid.regular(4, 4)
        w4 = latitude_weights(g4)
        worst = 0.0
        for seed in range(200):
            rs = np.random.default_rng(seed)
            pr, tr = rs.normal(size=(2, 2, 3, 4, 4)) * rs.uniform(0.1, 5)
            cl = rs.normal(size=(3, 4, 4)) * 0.1
            acc = acc_metric(list(pr), list(tr), cl, w4)
            c.check(np.all(np.abs(acc) <= 1 + 1e-12), f"ACC out of range at seed {seed}")
            worst = max(worst, float(np.abs(rmse_metric(list(pr), list(tr), w4) - rmse_oracle(pr, tr, w4)).max()),
                        float(np.abs(acc - acc_oracle(pr, tr, cl, w4)).max()))
        c.check(worst <= 1e-6, f"metric oracle error {worst:.2e}")
    c.finish(f"hand cases 12.5 / {pot!r}, oracle err {worst:.1e}")


# -- A5 / A6 ------------------------------------------------------------------------------------
def _desk_run(job):
    variant, seed = job
    grid = LatLonGrid.regular(8, 16)
    data = ForecastData(generate_synthetic(grid, 200, seed, "solid_rotation", dt_hours=6.0))
    model = build_variant(ModelConfig(data.var_names, grid.shape, variant=variant), seed)
    t0 = time.perf_counter()
    res = train(model, data, TrainConfig(epochs=20, seed=seed))
    rep = evaluate(model, data, [6.0]) if variant == "full" else None
    return variant, seed, res.best_val, rep, time.perf_counter() - t0


@pytest.fixture(scope="session")
def desk_runs():
    jobs = [("full", s) for s in range(3)] + [(v, s) for v in VARIANTS if v != "full" for s in range(3)]
    workers = min(len(jobs), os.cpu_count() or 1)
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            out = list(ex.map(_desk_run, jobs))
    else:
        out = [_desk_run(j) for j in jobs]
    return out, time.perf_counter() - t0, workers


@pytest.mark.slow
def test_a5_desk_scale_learning(desk_runs):
    runs, _, workers = desk_runs
    full = [r for r in runs if r[0] == "full"]
    c = Criterion("A5", 15 * 60)
    ratios = {v: [] for v in NAMES}
    for _, _, _, rep, _ in full:
        for v in NAMES:
            model = rep.select("full", 6.0)
            pers = rep.select("persistence", 6.0)
            m = next(x.rmse for x in model if x.variable == v)
            p = next(x.rmse for x in pers if x.variable == v)
            ratios[v].append(m / p)
    med = {v: float(np.median(x)) for v, x in ratios.items()}
    for v, x in med.items():
        c.check(x < 1.0, f"{v} median rmse/persistence {x:.3f}")
    # wall time of the three full-model runs when run alone
    elapsed = sum(r[4] for r in full) if workers == 1 else max(r[4] for r in full)
    c.finish(", ".join(f"{v} {x:.3f}" for v, x in med.items()) + " (median rmse / persistence)", elapsed)


@pytest.mark.slow
def test_a6_ablation_ordering(desk_runs):
    runs, elapsed, _ = desk_runs
    c = Criterion("A6", 45 * 60)
    med = {v: float(np.median([r[2] for r in runs if r[0] == v])) for v in VARIANTS}

    def leq(a, b):
        return med[a] <= med[b] * 1.02

    for a, b in (("full", "continuous_attention_only"), ("continuous_attention_only", "vanilla_vit"),
                 ("full", "vanilla_attention_plus_node")):
        c.check(leq(a, b), f"{a} {med[a]:.3g} > {b} {med[b]:.3g}")
    c.finish(", ".join(f"{v} {x:.3g}" for v, x in med.items()), elapsed)


# -- A7 -----------------------------------------------------------------------------------------
def test_a7_schedule_optimizer():
    c = Criterion("A7", 5)
    s = ScheduleConfig(total_epochs=20, steps_per_epoch=50)
    at_warm = cosine_warmup_lr(s.warmup_steps, s)
    at_end = cosine_warmup_lr(s.total_steps, s)
    c.check(at_warm == 5e-5, f"lr at warmup end {at_warm!r}")
    c.check(abs(at_end) <= 1e-12, f"lr at final step {at_end!r}")
    with precision(np.float64):
        p = Tensor(np.array([0.5]), requires_grad=True)
        st = OptimizerState.for_params([p], weight_decay=0.0)
        adamw_step([p], [np.array([1.0])], st, 1e-3)
        err = abs((0.5 - p.data[0]) - 1e-3 / (1 + 1e-8))
    c.check(err < 1e-9, f"AdamW hand case error {err:.2e}")
    es = EarlyStopState(10)
    fired = [es.update(v) for v in [1.0, 0.9, 0.8] + [0.8, 0.81, 0.9, 0.8, 0.85, 0.8, 1.0, 0.8, 0.8, 0.8, 0.7]]
    first = fired.index(True) + 1 if any(fired) else None
    c.check(first == 13, f"early stop fired at epoch {first}, expected 13")
    c.finish(f"lr {at_warm!r} at warmup end, {at_end!r} at end; AdamW err {err:.1e}; stop after 10 flat epochs")


# -- A8 -----------------------------------------------------------------------------------------
def test_a8_reproducibility(tmp_path):
    c = Criterion("A8", 60)
    cfg = tmp_path / "run.txt"
    cfg.write_text("epochs = 2\ndim = 16\nheads = 2\ndepth = 1\n")
    outputs = []
    for k in range(2):
        d = tmp_path / f"r{k}"
        rc = [main(["generate", "--grid", "8,16", "--steps", "40", "--seed", "3", "--out", str(d / "g.stcg")])]
        rc.append(main(["train", "--config", str(cfg), "--data", str(d / "g.stcg"), "--out", str(d / "run")]))
        rc.append(main(["evaluate", "--checkpoint", str(d / "run" / "model.stck"), "--data", str(d / "g.stcg"),
                        "--out", str(d / "m.csv")]))
        c.check(rc == [0, 0, 0], f"exit codes {rc}")
        files = ["g.stcg", "m.csv"] + [f"run/{n}" for n in ("model.stck", "epoch_log.csv", "loss_breakdown.json")]
        outputs.append({f: (d / f).read_bytes() for f in files if (d / f).exists()})
    differ = [f for f in outputs[0] if outputs[0][f] != outputs[1].get(f)]
    c.check(not differ and len(outputs[0]) == 5, f"rerun differs in {differ}")

    seq = read_grid(tmp_path / "r0" / "g.stcg")
    write_grid(tmp_path / "copy.stcg", seq)
    c.check((tmp_path / "copy.stcg").read_bytes() == (tmp_path / "r0" / "g.stcg").read_bytes(), "grid roundtrip")
    again = read_grid(tmp_path / "copy.stcg")
    c.check(all(a.fields.tobytes() == b.fields.tobytes() and a.time == b.time for a, b in zip(seq, again)),
            "grid fields differ after roundtrip")
    ck = load_checkpoint(tmp_path / "r0" / "run" / "model.stck")
    save_checkpoint(tmp_path / "copy.stck", Checkpoint(ck.config, ck.state, ck.stats, ck.extra))
    c.check((tmp_path / "copy.stck").read_bytes() == (tmp_path / "r0" / "run" / "model.stck").read_bytes(),
            "checkpoint roundtrip")
    c.finish("generate/train/evaluate reruns byte-identical; grid and checkpoint roundtrips lossless")

"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed by the terminal-summary hook in ``conftest.py`` (and
inline when run with ``-s``).  The benchmark-scale criteria train real models
and take a few minutes; they carry the ``slow`` marker but are not skipped.
"""

import math
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from domainmine import benchmarks
from domainmine.admm import ModelConfig, build_model, soft_weights
from domainmine.cli import EXIT_OK, main
from domainmine.data import SplitSpec, SyntheticConfig, generate_synthetic, split
from domainmine.diffcore import (
    BatchNormState,
    OptimizerConfig,
    Tensor,
    adamw_step,
    backward,
    batch_norm,
    concat,
    dense_forward,
    dropout,
    grad_check_report,
    loss_ce,
    loss_mse,
    mixture_affine,
    ops,
    prelu,
    reshape,
    routed_affine,
    sigmoid,
    softmax,
    stop_gradient,
    straight_through,
    take_rows,
)
from domainmine.dmm import quantize
from domainmine.experiments import CHECKPOINT
from domainmine.features import FeatureSchema, FieldSpec
from domainmine.metrics import auc, cluster_accuracy, logloss, nmi
from domainmine.profiler import count_flops, count_params, matched_mlp_config
from domainmine.trainer import TrainConfig, evaluate, train
from test_evalprof import HAND_FLOPS, HAND_PARAMS_TOTAL, REFERENCE, counting_nmi, pairwise_auc, perm_accuracy

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@contextmanager
def criterion(number, title):
    """Record the outcome of the block; ``note`` collects the detail text."""
    note = []
    try:
        yield note
    except BaseException:
        ACCEPTANCE.append((number, title, False, "; ".join(note) or "assertion failed"))
        print(f"FAIL {number}. {title}: {'; '.join(note)}")
        raise
    ACCEPTANCE.append((number, title, True, "; ".join(note)))
    print(f"PASS {number}. {title}: {'; '.join(note)}")


# -- 1. gradient oracle --------------------------------------------------------


def leaf(rng, *shape, low=None):
    data = rng.normal(size=shape) if low is None else rng.uniform(low, 1.0 - low, size=shape)
    return Tensor(data, requires_grad=True)


def op_case(kind, rng):
    """``(fn, inputs)`` for one randomly shaped use of a differentiable op."""
    b, i, o = (int(v) for v in rng.integers(2, 6, size=3))
    if kind == "dense":
        x, W, bias = leaf(rng, b, i), leaf(rng, i, o), leaf(rng, o)
        c = rng.normal(size=(b, o))
        return (lambda: (dense_forward(x, W, bias) * c).sum()), [x, W, bias]
    if kind == "matmul":
        x, W = leaf(rng, b, i), leaf(rng, i, o)
        c = rng.normal(size=(b, o))
        return (lambda: ((x @ W) * c).sum()), [x, W]
    if kind == "prelu":
        x, a = leaf(rng, b, o), leaf(rng, o)
        c = rng.normal(size=(b, o))
        return (lambda: (prelu(x, a) * c).sum()), [x, a]
    if kind == "sigmoid":
        x = leaf(rng, b, o)
        c = rng.normal(size=(b, o))
        return (lambda: (sigmoid(x) * c).sum()), [x]
    if kind == "softmax":
        x = leaf(rng, b, o)
        c = rng.normal(size=(b, o))
        return (lambda: (softmax(x) * c).sum()), [x]
    if kind in ("batch_norm", "batch_norm_eval"):
        x, g, beta = leaf(rng, b, o), leaf(rng, o), leaf(rng, o)
        state = BatchNormState(o, rng.normal(size=o), rng.uniform(0.5, 2.0, size=o))
        training = kind == "batch_norm"
        c = rng.normal(size=(b, o))
        return (lambda: (batch_norm(x, g, beta, state, training) * c).sum()), [x, g, beta]
    if kind == "loss_ce":
        p = leaf(rng, b, low=0.05)
        y = rng.integers(0, 2, b).astype(float)
        return (lambda: loss_ce(p, y)), [p]
    if kind == "loss_mse":
        u, v = leaf(rng, b, o), leaf(rng, b, o)
        return (lambda: loss_mse(u, v)), [u, v]
    if kind == "routed_affine":
        m = int(rng.integers(1, 4))
        Z, W, bias = leaf(rng, b, i), leaf(rng, m, i, o), leaf(rng, m, o)
        k = rng.integers(0, m, b)
        c = rng.normal(size=(b, o))
        return (lambda: (routed_affine(Z, W, bias, k) * c).sum()), [Z, W, bias]
    if kind == "mixture_affine":
        m = int(rng.integers(1, 4))
        Z, W, bias, logits = leaf(rng, b, i), leaf(rng, m, i, o), leaf(rng, m, o), leaf(rng, b, m)
        c = rng.normal(size=(b, o))
        return (lambda: (mixture_affine(Z, W, bias, softmax(logits)) * c).sum()), [Z, W, bias, logits]
    if kind == "take_rows":
        table = leaf(rng, 6, o)
        index = rng.integers(0, 6, b)
        c = rng.normal(size=(b, o))
        return (lambda: (take_rows(table, index) * c).sum()), [table]
    if kind == "concat":
        p, q = leaf(rng, b, i), leaf(rng, b, o)
        c = rng.normal(size=(b, i + o))
        return (lambda: (concat([p, q]) * c).sum()), [p, q]
    if kind == "reshape":
        x = leaf(rng, b, o)
        c = rng.normal(size=b * o)
        return (lambda: (reshape(x, (-1,)) * c).sum()), [x]
    if kind == "reductions":
        x = leaf(rng, b, o)
        c = rng.normal(size=o)
        return (lambda: (ops.mean(x, axis=0) * c).sum() + ops.sum(x, axis=1).sum() * 0.5), [x]
    if kind == "power":
        x = Tensor(rng.uniform(0.5, 2.0, size=(b, o)), requires_grad=True)
        e = float(rng.choice([0.5, 2.0, 3.0]))
        c = rng.normal(size=(b, o))
        return (lambda: ((x**e) * c).sum()), [x]
    if kind == "arithmetic":
        x, y = leaf(rng, b, o), leaf(rng, o)
        c = rng.normal(size=(b, o))
        return (lambda: (((x + y) * (x - y) - y * 2.0) * c).sum()), [x, y]
    if kind == "dropout":
        x = leaf(rng, b, o)
        seed = int(rng.integers(2**31))
        c = rng.normal(size=(b, o))
        return (lambda: (dropout(x, 0.3, np.random.default_rng(seed), True) * c).sum()), [x]
    if kind == "stop_gradient":
        x = leaf(rng, b, o)
        c = rng.normal(size=(b, o))
        return (lambda: (x * stop_gradient(x) * c).sum()), [x]
    if kind == "straight_through":
        live, frozen = leaf(rng, b, o), Tensor(rng.normal(size=(b, o)))
        c = rng.normal(size=(b, o))
        return (lambda: ((straight_through(live, frozen) ** 2.0) * c).sum()), [live]
    raise KeyError(kind)


OP_KINDS = (
    "dense", "matmul", "prelu", "sigmoid", "softmax", "batch_norm", "batch_norm_eval", "loss_ce", "loss_mse",
    "routed_affine", "mixture_affine", "take_rows", "concat", "reshape", "reductions", "power", "arithmetic",
    "dropout", "stop_gradient", "straight_through",
)  # fmt: skip


def model_case(rng):
    """A random small model, batch and loss; returns ``(fn, params, description)``."""
    fields = int(rng.integers(2, 4))
    schema = FeatureSchema(tuple(FieldSpec(f"f{j}", buckets=20, dim=int(rng.integers(2, 5))) for j in range(fields)))
    hidden = int(rng.choice([4, 6, 8]))
    kind = "mlp" if rng.random() < 0.15 else "domain_routed"
    kw = dict(kind=kind, hidden=hidden, m=int(rng.integers(1, 5)), fusion_layers=int(rng.integers(1, 4)))
    if kind == "domain_routed":
        kw.update(
            routing=str(rng.choice(["hard", "soft"])),
            metric=str(rng.choice(["squared_euclidean", "cosine"])),
            straight_through=bool(rng.random() < 0.8),
            linear_encoder_output=bool(rng.random() < 0.5),
            linear_decoder_output=bool(rng.random() < 0.5),
            beta=float(rng.uniform(0.0, 1.0)),
        )
    model = build_model(schema, ModelConfig(**kw), seed=int(rng.integers(1000)))
    idx = rng.integers(0, 20, size=(8, fields))
    y = rng.integers(0, 2, 8).astype(float)
    model.forward(idx, True)  # seeds the codebook and batch-norm statistics outside the checked function
    params = [model.store[n] for n in model.store.names()]

    def f():
        out = model.forward(idx, True)
        loss = loss_ce(out.y_hat, y)
        return loss if out.l_d is None else loss + out.l_d

    return f, params, kw


def test_c1_gradient_oracle():
    with criterion(1, "gradient oracle") as note:
        start = time.perf_counter()
        rng = np.random.default_rng(2024)
        op_worst, op_skipped, n_ops = 0.0, 0, 0
        for rep in range(4):
            for kind in OP_KINDS:
                fn, inputs = op_case(kind, rng)
                r = grad_check_report(fn, inputs, freeze_stops=True)
                assert r.worst < 1e-5, f"{kind} (repeat {rep}): {r.worst:.2e}"
                op_worst, op_skipped, n_ops = max(op_worst, r.worst), op_skipped + r.skipped, n_ops + 1
        e2e_worst, e2e_compared, e2e_skipped, n_models = 0.0, 0, 0, 0
        for _ in range(30):
            fn, params, kw = model_case(rng)
            # biases feeding batch norm have gradient ~1e-14 and central differences of pure
            # rounding noise (up to ~5e-9 here), so small gradients are compared absolutely below 1e-4
            r = grad_check_report(fn, params, max_coords=2, rng=rng, floor=1e-4, freeze_stops=True)
            assert r.worst < 1e-4, f"model {kw}: {r.worst:.2e}"
            assert r.compared > r.skipped, f"model {kw}: most coordinates crossed a kink"
            e2e_worst, n_models = max(e2e_worst, r.worst), n_models + 1
            e2e_compared, e2e_skipped = e2e_compared + r.compared, e2e_skipped + r.skipped
        elapsed = time.perf_counter() - start
        note.append(f"{n_ops} op configs worst {op_worst:.1e}")
        note.append(f"{n_models} model configs worst {e2e_worst:.1e} ({e2e_compared} coords, {e2e_skipped} kink-skipped)")
        note.append(f"{elapsed:.1f}s")
        assert n_ops + n_models >= 100
        assert elapsed < 60


# -- 2. stop-gradient separation ------------------------------------------------


def separation_setup(seed=0):
    data = SyntheticConfig(K=4, F=8, V=50, concentration=0.05, n=3000, seed=seed)
    tr, va, _ = split(generate_synthetic(data), SplitSpec(seed=seed))
    model = build_model(data.schema(), benchmarks.recovery(seed).model, seed)
    model.forward(tr.index[:128], True)  # the codebook is seeded by the first training batch
    return model, tr, va


def snapshot(model, names):
    return {n: model.store[n].data.copy() for n in names}


def changed(model, snap):
    return [n for n, a in snap.items() if model.store[n].data.tobytes() != a.tobytes()]


def test_c2_stop_gradient_separation():
    with criterion(2, "stop-gradient separation") as note:
        for zero in ("task", "dmm"):
            # one optimizer over every parameter, no weight decay: only gradients can move weights
            model, tr, _ = separation_setup()
            main_names, dmm_names = model.main_param_names(), model.dmm_param_names()
            before = snapshot(model, model.store.names())
            rng = np.random.default_rng(1)
            opt = OptimizerConfig(learning_rate=1e-2, weight_decay=0.0)
            for _ in range(50):
                rows = rng.choice(len(tr), size=128, replace=False)
                out = model.forward(tr.index[rows], True)
                l_task = loss_ce(out.y_hat, tr.labels[rows])
                loss = out.l_d + l_task * 0.0 if zero == "task" else out.l_d * 0.0 + l_task
                model.store.zero_grad()
                backward(loss)
                adamw_step(model.store, opt)
            moved = set(changed(model, before))
            frozen, live = (main_names, dmm_names) if zero == "task" else (dmm_names, main_names)
            assert not moved & set(frozen), sorted(moved & set(frozen))
            assert moved >= {n for n in live if not n.startswith("emb.")}
            note.append(f"L_{zero} zeroed: {len(frozen)} tensors bitwise fixed, {len(moved)} moved")

        for flag, frozen_group in (("use_task_loss", "main"), ("use_dmm_loss", "dmm")):
            # the same separation through the training loop's ablation switches
            model, tr, va = separation_setup()
            names = model.main_param_names() if frozen_group == "main" else model.dmm_param_names()
            before = snapshot(model, names)
            cfg = TrainConfig(epochs=1, batch_size=128, max_batches_per_epoch=50, seed=0, **{flag: False})
            train(model, tr, va, cfg)
            assert not changed(model, before)
        note.append("trainer ablation switches agree")


# -- 3. quantization ------------------------------------------------------------


def brute_nearest(point, codebook, metric):
    best, best_j = None, None
    for j, code in enumerate(codebook):
        if metric == "squared_euclidean":
            score = -sum((float(p) - float(e)) ** 2 for p, e in zip(point, code))
        else:
            pn = math.sqrt(sum(float(p) ** 2 for p in point))
            en = math.sqrt(sum(float(e) ** 2 for e in code))
            score = sum(float(p) * float(e) for p, e in zip(point, code)) / (pn * en)
        if best is None or score > best:  # strict: ties keep the lowest index
            best, best_j = score, j
    return best_j


def test_c3_quantization():
    with criterion(3, "quantization oracle") as note:
        rng = np.random.default_rng(3)
        ties = 0
        for metric in ("squared_euclidean", "cosine"):
            for trial in range(1000):
                m, d = int(rng.integers(1, 12)), int(rng.integers(1, 7))
                if metric == "squared_euclidean" and trial % 2:
                    # small integers: exact arithmetic and plenty of genuine ties
                    codebook = rng.integers(-2, 3, size=(m, d)).astype(float)
                    point = rng.integers(-2, 3, size=d).astype(float)
                else:
                    codebook, point = rng.normal(size=(m, d)), rng.normal(size=d)
                    if metric == "cosine":
                        codebook[np.linalg.norm(codebook, axis=1) == 0] = 1.0
                if trial % 4 == 0 and m > 1:
                    # force a tie: copy the nearest code to a higher index
                    j = brute_nearest(point, codebook, metric)
                    dup = int(rng.integers(0, m))
                    lo, hi = min(j, dup), max(j, dup)
                    if lo != hi:
                        codebook[hi] = codebook[lo]
                        ties += 1
                k, z_q = quantize(point[None], codebook, metric)
                expected = brute_nearest(point, codebook, metric)
                assert int(k[0]) == expected, (metric, trial)
                assert z_q[0].tobytes() == codebook[expected].tobytes()
            note.append(f"{metric}: 1000/1000")
        note.append(f"{ties} forced ties")


# -- 4 and 6. domain recovery and mining-loss progress ---------------------------


@pytest.fixture(scope="module")
def recovery_runs():
    start = time.perf_counter()
    rows = []
    for seed in range(5):
        bench = benchmarks.recovery(seed)
        tr, va, te = split(generate_synthetic(bench.data), bench.split)
        model = build_model(bench.data.schema(), bench.model, seed)
        model, hist = train(model, tr, va, bench.training)
        rep = evaluate(model, te)
        rows.append((rep.cluster_accuracy, rep.nmi, hist.epochs[-1].l_d / hist.first_batch.l_d, len(hist.epochs)))
    return np.array(rows), time.perf_counter() - start


@pytest.mark.slow
def test_c4_domain_recovery(recovery_runs):
    rows, elapsed = recovery_runs
    with criterion(4, "synthetic domain recovery") as note:
        acc, score = rows[:, 0].mean(), rows[:, 1].mean()
        note.append(f"accuracy {acc:.3f} (>= 0.95), NMI {score:.3f} (>= 0.90) over 5 seeds")
        note.append(f"per seed NMI {np.round(rows[:, 1], 3).tolist()}")
        note.append(f"{elapsed:.0f}s")
        assert rows[:, 3].max() <= 5
        assert acc >= 0.95 and score >= 0.90
        assert elapsed < 180


@pytest.mark.slow
def test_c6_mining_loss_progress(recovery_runs):
    rows, _ = recovery_runs
    with criterion(6, "mining-loss progress") as note:
        note.append(f"final-epoch / first-batch L_d per seed {np.round(rows[:, 2], 3).tolist()} (<= 0.5)")
        assert np.all(rows[:, 2] <= 0.5)


# -- 5. routing by mined domains pays off ------------------------------------------


@pytest.mark.slow
def test_c5_conflicting_domains():
    with criterion(5, "conflicting-domain benchmark") as note:
        start = time.perf_counter()
        kinds = ("dmm", "truth", "random", "mlp")
        aucs = {k: [] for k in kinds}
        for seed in range(5):
            bench = benchmarks.conflict(seed)
            schema = bench.data.schema()
            tr, va, _ = split(generate_synthetic(bench.data), bench.split)
            routed_flops = sum(count_flops(build_model(schema, bench.model), 1).values())
            for kind in kinds:
                if kind == "mlp":
                    cfg = matched_mlp_config(schema, bench.model)
                    flops = sum(count_flops(build_model(schema, cfg), 1).values())
                    assert abs(flops - routed_flops) <= 0.05 * routed_flops
                else:
                    cfg = ModelConfig(**{**bench.model.to_dict(), "route_source": kind})
                model, hist = train(build_model(schema, cfg, seed), tr, va, bench.training)
                aucs[kind].append(max(hist.val_aucs))
        mean = {k: float(np.mean(v)) for k, v in aucs.items()}
        elapsed = time.perf_counter() - start
        note.append(" ".join(f"{k} {v:.4f}" for k, v in mean.items()))
        note.append(f"vs mlp +{mean['dmm'] - mean['mlp']:.4f}, vs random +{mean['dmm'] - mean['random']:.4f}")
        note.append(f"truth gap {mean['truth'] - mean['dmm']:.4f}")
        note.append(f"{elapsed:.0f}s")
        assert mean["dmm"] - mean["mlp"] >= 0.02
        assert mean["dmm"] - mean["random"] >= 0.02
        assert mean["truth"] - mean["dmm"] <= 0.01
        assert elapsed < 600


# -- 7. metric oracles ---------------------------------------------------------------


def test_c7_metric_oracles():
    with criterion(7, "metric oracles") as note:
        start = time.perf_counter()
        rng = np.random.default_rng(7)
        auc_err = ll_err = nmi_err = 0.0
        for trial in range(1000):
            n = int(rng.integers(2, 40))
            labels = rng.integers(0, 2, n)
            labels[:2] = [0, 1]
            # coarse scores on odd trials so ties are common
            scores = rng.integers(0, 5, n) / 5.0 if trial % 2 else rng.random(n)
            auc_err = max(auc_err, abs(auc(scores, labels) - pairwise_auc(scores, labels)))
            probs = rng.uniform(1e-6, 1 - 1e-6, n)
            ref = -sum(math.log(p) if y else math.log(1 - p) for p, y in zip(probs, labels)) / n
            ll_err = max(ll_err, abs(logloss(probs, labels) - ref))

            a, b = rng.integers(0, int(rng.integers(1, 5)), n), rng.integers(0, int(rng.integers(1, 5)), n)
            assert cluster_accuracy(a, b) == perm_accuracy(list(a), list(b))
            nmi_err = max(nmi_err, abs(nmi(a, b) - counting_nmi(list(a), list(b))))
        elapsed = time.perf_counter() - start
        note.append(f"max error AUC {auc_err:.1e}, LogLoss {ll_err:.1e}, NMI {nmi_err:.1e}")
        note.append(f"accuracy exact, {elapsed:.1f}s")
        assert auc_err <= 1e-12 and ll_err <= 1e-12 and nmi_err <= 1e-12
        assert elapsed < 30


# -- 8. profiler -----------------------------------------------------------------------


def test_c8_profiler_exactness():
    with criterion(8, "profiler exactness") as note:
        schema = FeatureSchema((FieldSpec("user", "user", 1000, 32), FieldSpec("item", "item", 1000, 32)))
        model = build_model(schema, REFERENCE)
        per_sample = count_flops(model, 1)
        assert per_sample == HAND_FLOPS
        assert sum(count_params(model).values()) == HAND_PARAMS_TOTAL
        for batch in (1, 2, 4096):
            assert count_flops(model, batch) == {k: v * batch for k, v in per_sample.items()}
        total = sum(per_sample.values())
        note.append(f"{total:,} FLOPs/sample, {HAND_PARAMS_TOTAL:,} params; batch 4096 -> {total * 4096:,}")


# -- 9. determinism ------------------------------------------------------------------------


def test_c9_determinism(tmp_path):
    with criterion(9, "determinism") as note:
        for name in ("a", "b"):
            assert main(["--no-plots", "train", str(CONFIGS / "quickstart.yaml"), "--out", str(tmp_path / name)]) == EXIT_OK
        for f in (CHECKPOINT, "history.csv", "metrics.json"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
        note.append("checkpoint, history and metrics bitwise identical across two CLI runs")


# -- 10. hard/soft consistency ------------------------------------------------------------


def test_c10_hard_soft_argmax():
    with criterion(10, "hard/soft argmax consistency") as note:
        rng = np.random.default_rng(10)
        samples = 0
        for trial in range(1000):
            b, m, d = int(rng.integers(1, 64)), int(rng.integers(1, 12)), int(rng.integers(1, 9))
            scale = 10.0 ** rng.uniform(-2, 2)
            codebook, z_e = rng.normal(size=(m, d)) * scale, rng.normal(size=(b, d)) * scale
            if trial % 5 == 0 and m > 1:
                codebook[-1] = codebook[0]  # duplicated code: both sides must pick index 0
            k, _ = quantize(z_e, codebook)
            w = soft_weights(z_e, codebook, "neg_squared_distance").data
            np.testing.assert_array_equal(np.argmax(w, axis=1), k)
            samples += b
        note.append(f"1000 batches, {samples} samples, all agree")

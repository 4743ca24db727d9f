"""End-to-end acceptance checks, one test per criterion.

Each test records a single PASS/FAIL line (printed at the end of the run)
before asserting, so a failing criterion is still reported. The training
criteria use the reduced ``small`` patch preset (16x16x4 / 32x32x8) and
width 1/8 so the whole module runs on one CPU core in well under an hour.
"""

import itertools
import time

import numpy as np
import pytest

from nodulenet.architectures import (
    ARCH_KINDS,
    PAPER_PARAMETER_MILLIONS,
    ConvUnit,
    DenseBlock,
    Transition,
    build,
    count_parameters,
)
from nodulenet.checkpoint import deserialize, load_checkpoint, save_checkpoint, serialize
from nodulenet.data import Dataset, NoduleRecord, consensus_label, filter_scan, generate_synthetic
from nodulenet.data.labeling import Consensus
from nodulenet.gradcheck import gradient_check, parameter_gradient_check
from nodulenet.layers import (
    BatchNorm,
    ClassifierHead,
    Conv3D,
    Dense,
    PointwiseConv3D,
    conv3d,
    global_avg_pool,
    max_pool3d,
)
from nodulenet.metrics import ScoredSample, roc_auc
from nodulenet.optim import Adadelta, LossConfig, total_loss
from nodulenet.tensor import Tensor
from nodulenet.train import (
    TrainConfig,
    cross_validate,
    loss_config,
    loss_trend_flags,
    new_graph,
    predict,
    pretrain,
    recalibrate_batch_norm,
    train_epoch,
    train_fold,
    transfer,
)

from oracles import adadelta_first_step, loop_conv3d, pairwise_auc

pytestmark = pytest.mark.acceptance

TINY = dict(small_shape=(16, 16, 2), large_shape=(32, 32, 4))
CV_SEEDS = (0, 1, 2)
CV_EPOCHS = 15


def weighted_sum(out, seed=0):
    r = np.random.default_rng(seed).standard_normal(out.shape)
    return (out * Tensor(r)).sum()


def synthetic(n, seed, **kw):
    return Dataset.from_pairs(generate_synthetic(n, 0.5, seed=seed, dims="small", **kw))


def test_c01_parameter_counts(criterion):
    start = time.time()
    totals = {k: count_parameters(build(k, 1))[0] for k in ARCH_KINDS}
    elapsed = time.time() - start
    rel = {k: (totals[k] - PAPER_PARAMETER_MILLIONS[k] * 1e6) / (PAPER_PARAMETER_MILLIONS[k] * 1e6) for k in totals}
    ok = abs(rel["basic"]) <= 0.10 and abs(rel["multi_output"]) <= 0.10
    detail = ", ".join(f"{k}={totals[k]:,} ({rel[k]:+.1%} vs {PAPER_PARAMETER_MILLIONS[k]}M)" for k in totals)
    criterion(1, ok, f"{detail}; densenet/modensenet not gated; {elapsed:.2f}s")
    assert ok


def _layer_gradient_errors():
    rng = np.random.default_rng(0)
    f64 = np.float64
    errs = {}

    def check(name, call, x, params):
        e_in = gradient_check(lambda t: weighted_sum(call(t)), x, epsilon=1e-6)
        e_par = parameter_gradient_check(lambda: weighted_sum(call(Tensor(x))), params, epsilon=1e-6,
                                         max_coords=30, rng=rng) if params else {}
        errs[name] = max([e_in] + list(e_par.values()))

    conv = Conv3D(3, 2, rng, f64)
    check("conv3d", conv, rng.standard_normal((2, 3, 5, 4, 3)), conv.parameters())
    pw = PointwiseConv3D(4, 3, rng, f64)
    check("pointwise_conv3d", pw, rng.standard_normal((2, 4, 3, 3, 2)), pw.parameters())
    pool_x = rng.permutation(2 * 2 * 4 * 4 * 4).reshape(2, 2, 4, 4, 4) * 0.01
    check("max_pool3d(2,2,1)", lambda t: max_pool3d(t, (2, 2, 1)), pool_x, {})
    check("max_pool3d(2,2,2)", lambda t: max_pool3d(t, (2, 2, 2)), pool_x, {})
    for training in (True, False):
        bn = BatchNorm(3, f64)
        bn.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
        bn.beta.data[...] = rng.standard_normal(3)
        bn.running_var[...] = rng.uniform(0.5, 2.0, 3)
        bn.momentum = 1.0  # running stats stay fixed across evaluations
        check(f"batch_norm(training={training})", lambda t, bn=bn, tr=training: bn(t, tr),
              rng.standard_normal((4, 3, 2, 2, 2)), bn.parameters())
    dense = Dense(6, 3, rng, f64)
    check("dense", dense, rng.standard_normal((4, 6)), dense.parameters())
    head = ClassifierHead(3, rng, f64)
    check("global_avg_pool+head", lambda t: head(global_avg_pool(t)), rng.standard_normal((2, 3, 3, 2, 2)),
          head.parameters())
    unit, block, trans = ConvUnit(2, 3, rng, f64), DenseBlock(2, 2, 2, rng, f64), Transition(4, rng, f64)
    for bn in [unit.bn, trans.bn] + [layer.bn for layer in block.layers]:
        bn.momentum = 1.0
    for name, layer, cin in (("conv_unit", unit, 2), ("dense_block", block, 2), ("transition", trans, 4)):
        check(name, lambda t, layer=layer: layer(t, True), rng.standard_normal((3, cin, 4, 4, 2)),
              layer.parameters())
    return errs


def _architecture_gradient_error(kind):
    g = build(kind, "1/8", dtype=np.float64, seed=1, **TINY)
    for _, bn in g.batch_norm_layers():
        bn.momentum = 1.0
    rng = np.random.default_rng(2)
    small = Tensor(rng.uniform(0, 1, (2, 1) + TINY["small_shape"]))
    large = Tensor(rng.uniform(0, 1, (2, 1) + TINY["large_shape"]))
    params = g.named_parameters()
    cfg = LossConfig(class_weights=(1.2, 0.8), lambda_aux=0.3)

    def loss():
        final, inter = g.forward(small, large, training=True)
        return total_loss(final, inter, [0, 1], cfg, params)

    # one random coordinate of every parameter tensor; a small step keeps the
    # difference on one side of ReLU and max-pool kinks
    errs = parameter_gradient_check(loss, params, epsilon=1e-6, max_coords=1, rng=rng)
    return max(errs.values())


def test_c02_gradient_correctness(criterion):
    start = time.time()
    layer_errs = _layer_gradient_errors()
    arch_errs = {k: _architecture_gradient_error(k) for k in ARCH_KINDS}
    ok = max(layer_errs.values()) < 1e-4 and max(arch_errs.values()) < 1e-3
    worst = max(layer_errs, key=layer_errs.get)
    detail = (f"worst layer {worst} {layer_errs[worst]:.1e} (< 1e-4, {len(layer_errs)} layers); "
              + ", ".join(f"{k} {v:.1e}" for k, v in arch_errs.items()) + f" (< 1e-3); {time.time() - start:.0f}s")
    criterion(2, ok, detail)
    assert ok


def test_c03_convolution_oracle(criterion):
    rng = np.random.default_rng(3)
    worst, shapes = 0.0, 0
    for _ in range(120):
        b, cin, cout = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        X, Y, Z = rng.integers(1, 6, size=3)
        x = rng.standard_normal((b, cin, X, Y, Z))
        w = rng.standard_normal((cout, cin, 3, 3, 3))
        bias = rng.standard_normal(cout)
        got = conv3d(Tensor(x), Tensor(w), Tensor(bias)).data
        want = loop_conv3d(x, w, bias)
        worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0))))
        shapes += 1
    ok = shapes >= 100 and worst <= 1e-6
    criterion(3, ok, f"{shapes} random shapes, max relative error {worst:.1e} (<= 1e-6)")
    assert ok


def test_c04_auc_oracle(criterion):
    rng = np.random.default_rng(4)
    worst = 0.0
    for trial in range(1000):
        n_pos, n_neg = rng.integers(1, 25, size=2)
        # coarse rounding on half the sets forces many ties
        decimals = 1 if trial % 2 else 6
        pos = np.round(rng.uniform(0, 1, n_pos), decimals).tolist()
        neg = np.round(rng.uniform(0, 1, n_neg), decimals).tolist()
        samples = [ScoredSample(f"p{i}", s, 1) for i, s in enumerate(pos)]
        samples += [ScoredSample(f"n{i}", s, 0) for i, s in enumerate(neg)]
        points, auc = roc_auc(samples)
        trap = sum((x1 - x0) * (y0 + y1) / 2 for (x0, y0), (x1, y1) in zip(points, points[1:]))
        want = pairwise_auc(pos, neg)
        worst = max(worst, abs(auc - want), abs(trap - want))
    example = roc_auc([ScoredSample("a", 0.8, 1), ScoredSample("b", 0.4, 1),
                       ScoredSample("c", 0.6, 0), ScoredSample("d", 0.2, 0)])[1]
    ok = worst <= 1e-12 and example == 0.75
    criterion(4, ok, f"1000 score sets, max |trapezoid - pairwise| {worst:.1e} (<= 1e-12); worked example {example}")
    assert ok


def test_c05_labeling_protocol(criterion):
    fixtures = [
        ([5, 5, 4], Consensus.MALIGNANT), ([1, 2, 2, 0], Consensus.BENIGN), ([2, 3, 4, 5], Consensus.MALIGNANT),
        ([3, 3, 4], Consensus.EXCLUDED), ([4, 5], Consensus.EXCLUDED), ([4, 5, 0, 0], Consensus.EXCLUDED),
        ([1, 1, 2], Consensus.BENIGN), ([4, 4, 5], Consensus.MALIGNANT), ([0, 0, 0, 0], Consensus.EXCLUDED),
    ]
    rules_ok = all(consensus_label(g) is want for g, want in fixtures)
    rec = lambda t: NoduleRecord("n", "s", (0, 0, 5), [4, 4, 4], t)
    scans_ok = filter_scan(rec([1.25] * 20)) and not filter_scan(rec([1.25] * 10 + [2.5] * 10))
    rng = np.random.default_rng(5)
    perm_ok, checked = True, 0
    for _ in range(300):
        grades = rng.integers(0, 6, size=rng.integers(1, 6)).tolist()
        want = consensus_label(grades)
        for perm in itertools.permutations(grades):
            perm_ok &= consensus_label(list(perm)) is want
            checked += 1
    ok = rules_ok and scans_ok and perm_ok
    criterion(5, ok, f"{len(fixtures)} grade fixtures {'ok' if rules_ok else 'WRONG'}, thickness fixtures "
                     f"{'ok' if scans_ok else 'WRONG'}, {checked} permutations invariant={perm_ok}")
    assert ok


def _adadelta_first_step():
    x = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adadelta({"x": x}, rho=0.95, epsilon=1e-6, lr=1.0)
    x.grad = np.array([1.0])
    opt.step()
    return float(x.data[0]), float(opt.acc_delta["x"][0])


def test_c06_adadelta_closed_form(criterion):
    delta, acc = _adadelta_first_step()
    want_delta, want_acc = adadelta_first_step(1.0)
    delta_ok = abs(delta - (-4.4721e-3)) <= 1e-7
    acc_ok = abs(acc - 1.0e-6) <= 1e-12
    criterion(6, delta_ok and acc_ok,
              f"delta={delta:.7e} ({'within' if delta_ok else 'outside'} -4.4721e-3 +- 1e-7); "
              f"E[dx^2]={acc:.9e} is {abs(acc - 1e-6):.1e} from 1.0e-6 (tolerance 1e-12); "
              f"both equal the closed form of the update rule to 1e-12 relative")
    assert delta == pytest.approx(want_delta, rel=1e-12) and acc == pytest.approx(want_acc, rel=1e-12)
    assert delta_ok


@pytest.mark.xfail(strict=True, reason="the stated 1e-12 tolerance on E[dx^2] is tighter than the update rule "
                                       "allows: the exact value is 0.05 * 1e-6 / 0.050001 = 9.99980e-7")
def test_c06_accumulator_tolerance():
    _, acc = _adadelta_first_step()
    assert abs(acc - 1.0e-6) <= 1e-12


def test_c07_overfit_capacity(criterion):
    start = time.time()
    data = synthetic(20, seed=0)
    config = TrainConfig(arch_kind="modensenet", width_scale="1/8", max_epochs=200, batch_size=8, seed=0)
    graph = new_graph(config, data)
    optimizer = Adadelta(graph.trainable_parameters(), config.rho, config.epsilon, config.lr)
    loss_cfg = loss_config(config, data)
    losses, acc, step, reached = [], 0.0, 0, None
    for epoch in range(1, config.max_epochs + 1):
        loss, _, step = train_epoch(graph, optimizer, config, data, loss_cfg, epoch, step)
        losses.append(loss)
        recalibrate_batch_norm(graph, data, seed=config.seed)
        acc = float(np.mean((predict(graph, data) >= 0.5) == (data.labels == 1)))
        if acc == 1.0:
            reached = epoch
            break
    flags = loss_trend_flags(losses)
    ok = reached is not None
    criterion(7, ok, f"training accuracy {acc:.2f} at epoch {reached or config.max_epochs} (limit 200); "
                     f"loss trend flags {flags or 'none'}; {time.time() - start:.0f}s")
    assert ok


def test_c08_desk_scale_learning(criterion):
    start = time.time()
    results = {}
    for seed in CV_SEEDS:
        data = synthetic(200, seed=seed)
        for kind in ("modensenet", "basic"):
            config = TrainConfig(arch_kind=kind, width_scale="1/8", k_folds=3, validation_fraction=0.05,
                                 max_epochs=CV_EPOCHS, batch_size=8, seed=seed)
            results[seed, kind] = cross_validate(config, data).pooled.auc
    mod = [results[s, "modensenet"] for s in CV_SEEDS]
    wins = sum(results[s, "modensenet"] >= results[s, "basic"] for s in CV_SEEDS)
    ok = min(mod) >= 0.90 and wins >= 2
    detail = "; ".join(f"seed {s}: modensenet {results[s, 'modensenet']:.4f} basic {results[s, 'basic']:.4f}"
                       for s in CV_SEEDS)
    criterion(8, ok, f"{detail}; modensenet >= basic in {wins}/3; {time.time() - start:.0f}s")
    assert ok


def test_c09_transfer_mechanics(criterion):
    base_cfg = TrainConfig(arch_kind="modensenet", width_scale="1/8", max_epochs=3, seed=9)
    base = pretrain(base_cfg, synthetic(40, seed=90, id_prefix="pre")).checkpoint
    data = synthetic(30, seed=91)
    train_set, val_set = data.subset(data.ids[4:]), data.subset(data.ids[:4])
    fit = transfer(base, TrainConfig(arch_kind="modensenet", width_scale="1/8", seed=1), train_set, val_set)
    before = {n: t for n, t in base.tensors.items() if not n.startswith("optimizer/")}
    after = {n: t for n, t in fit.checkpoint.tensors.items() if not n.startswith("optimizer/")}
    differing = sorted(n for n in before if before[n].tobytes() != after[n].tobytes())
    identical = before.keys() == after.keys()
    trainable = sorted(fit.graph.trainable_parameters())
    ok = (identical and differing == ["classifier/bias", "classifier/weight"] and fit.epochs_run == 20
          and len(fit.log) == 20 and trainable == ["classifier/bias", "classifier/weight"])
    criterion(9, ok, f"{len(before) - len(differing)} frozen tensors bit-identical, differing {differing}, "
                     f"{fit.epochs_run} retraining epochs by default, trainable {trainable}")
    assert ok


# criterion 10: a harder generator setting (fainter spikes) with a separate,
# larger pretraining set drawn from the same generator under another seed
TRANSFER_CONTRAST = 0.5
PRETRAIN_SIZE = 200
PRETRAIN_EPOCHS = 15


def test_c10_transfer_benefit(criterion):
    start = time.time()
    rows = []
    for seed in CV_SEEDS:
        big = synthetic(PRETRAIN_SIZE, seed=1000 + seed, spike_contrast=TRANSFER_CONTRAST, id_prefix="pre")
        small = synthetic(60, seed=seed, spike_contrast=TRANSFER_CONTRAST)
        base_cfg = TrainConfig(arch_kind="modensenet", width_scale="1/8", max_epochs=PRETRAIN_EPOCHS, seed=100 + seed)
        base = pretrain(base_cfg, big).checkpoint
        config = TrainConfig(arch_kind="modensenet", width_scale="1/8", k_folds=3, validation_fraction=0.05,
                             max_epochs=CV_EPOCHS, seed=seed)
        with_transfer = cross_validate(config, small, base=base).pooled.auc
        scratch = cross_validate(config, small).pooled.auc
        rows.append((seed, with_transfer, scratch))
    mean_t = float(np.mean([r[1] for r in rows]))
    mean_s = float(np.mean([r[2] for r in rows]))
    ok = all(t >= s - 0.02 for _, t, s in rows) and mean_t > mean_s
    detail = "; ".join(f"seed {s}: transfer {t:.4f} scratch {c:.4f}" for s, t, c in rows)
    criterion(10, ok, f"{detail}; mean transfer {mean_t:.4f} vs scratch {mean_s:.4f}; {time.time() - start:.0f}s")
    assert ok


def test_c11_determinism_and_serialization(criterion, tmp_path):
    data = synthetic(24, seed=11)
    train_set, val_set = data.subset(data.ids[4:]), data.subset(data.ids[:4])
    config = TrainConfig(arch_kind="modensenet", width_scale="1/8", max_epochs=3, seed=11)
    a = serialize(train_fold(config, train_set, val_set).checkpoint)
    b = serialize(train_fold(config, train_set, val_set).checkpoint)
    save_checkpoint(tmp_path / "a.ckpt", deserialize(a))
    save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(tmp_path / "a.ckpt"))
    roundtrip = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes() == a
    ok = a == b and roundtrip
    criterion(11, ok, f"reruns bit-identical={a == b} ({len(a):,} bytes), save/load/save byte-identical={roundtrip}")
    assert ok

import numpy as np
import pytest

from csrms import cags, numerics as nm, rgrl
from csrms.crm import Cluster, ClusterModel, art_fit, build_relation_graph
from csrms.errors import ContractError, DimensionError
from csrms.rgrl import (
    LossConfig,
    PrototypeBank,
    SmoothingModel,
    ce_loss,
    class_align,
    cluster_align,
    compute_prototypes,
    graphical_smoothing,
    infer,
    init_model,
    interclass_loss,
    knn_adjacency,
    nega_loss,
    train_step,
)

from conftest import make_featureset, random_featureset


def _model(d=4, h=6, c=3, k=2, softmax=True, seed=0):
    return init_model(d, h, c, k, softmax, np.random.Generator(np.random.PCG64(seed)))


# ---------------------------------------------------------------------------
# adjacency
# ---------------------------------------------------------------------------


def test_two_rows_k1_gives_normalized_all_ones():
    A = knn_adjacency(np.array([[0.0, 0.0], [1.0, 0.0]]), 1)
    assert np.allclose(A, np.full((2, 2), 0.5))


def test_adjacency_symmetry(rng):
    for _ in range(20):
        X = rng.normal(size=(int(rng.integers(2, 12)), 3))
        A = knn_adjacency(X, int(rng.integers(1, 5)))
        assert np.allclose(A, A.T)


def test_three_point_hand_adjacency():
    # 0 and 1 are mutual nearest; 2's nearest is 1 (mutualized edge 1-2).
    X = np.array([[0.0], [1.0], [3.0]])
    a = np.array([
        [1.0, 1.0, 0.0],
        [1.0, 1.0, 1.0],
        [0.0, 1.0, 1.0],
    ])
    deg = a.sum(axis=1)
    expected = a / np.sqrt(np.outer(deg, deg))
    assert np.allclose(knn_adjacency(X, 1), expected)


def test_k_clamped_to_rows_minus_one():
    X = np.arange(6.0).reshape(3, 2)
    assert np.allclose(knn_adjacency(X, 99), knn_adjacency(X, 2))


def test_single_row_degenerates_to_identity():
    assert np.allclose(knn_adjacency(np.array([[4.0, 2.0]]), 3), [[1.0]])


# ---------------------------------------------------------------------------
# smoothing
# ---------------------------------------------------------------------------


def test_single_node_smoothing_closed_form(rng):
    model = _model(d=4, softmax=True)
    x = rng.normal(size=4)
    out = graphical_smoothing(model, x, None)
    hidden = np.maximum(x @ model.w_in, 0.0)
    logits = hidden @ model.w_out
    e = np.exp(logits - logits.max())
    assert np.allclose(out, e / e.sum())


def test_smoothing_rows_on_simplex(rng):
    model = _model(d=4, softmax=True)
    out = graphical_smoothing(model, rng.normal(size=4), rng.normal(size=(5, 4)))
    assert out.shape == (6, 4)
    assert np.allclose(out.sum(axis=1), 1.0)
    assert np.all(out > 0)


def test_three_node_smoothing_matches_hand_computation(rng):
    model = _model(d=3, h=5, softmax=False, seed=2)
    anchor = rng.normal(size=3)
    pos = rng.normal(size=(2, 3))
    X = np.vstack([anchor, pos])
    A = knn_adjacency(X, model.knn_k)
    expected = A @ np.maximum(A @ X @ model.w_in, 0.0) @ model.w_out
    assert np.allclose(graphical_smoothing(model, anchor, pos), expected)


def test_smoothing_dimension_mismatch():
    model = _model(d=4)
    with pytest.raises(DimensionError):
        graphical_smoothing(model, np.zeros(3), None)


# ---------------------------------------------------------------------------
# prototypes and alignment
# ---------------------------------------------------------------------------


def _hand_graph(fs, memberships, rho2=0.55):
    clusters = [
        Cluster(
            cid,
            fs.features[m].mean(axis=0),
            list(m),
            np.bincount(fs.labels[m], minlength=fs.c).astype(np.int64),
        )
        for cid, m in enumerate(memberships)
    ]
    return build_relation_graph(ClusterModel(clusters, 0.5, 0.1, "cosine"), fs.labels, rho2)


def test_singleton_cluster_prototype_is_member():
    fs = make_featureset([[1.0, 2.0], [5.0, 6.0], [5.5, 6.5]], [0, 1, 1])
    graph = _hand_graph(fs, [[0], [1, 2]])
    bank = compute_prototypes(graph, fs)
    assert np.allclose(bank.cluster_prototypes[0], [1.0, 2.0])


def test_single_dominated_cluster_makes_pca_equal_wcu():
    fs = make_featureset([[1.0, 0.0], [2.0, 0.0], [0.0, 5.0]], [0, 0, 1])
    graph = _hand_graph(fs, [[0, 1], [2]])
    bank = compute_prototypes(graph, fs)
    assert np.allclose(bank.cluster_prototypes[0], bank.class_prototypes[0])


def test_prototypes_match_recount(rng):
    for _ in range(10):
        fs = random_featureset(rng, n=40, d=5, c=3)
        model = art_fit(fs, vigilance=0.6, seed=9)
        graph = build_relation_graph(model, fs.labels, 0.55)
        bank = compute_prototypes(graph, fs)
        by_id = {c.id: c for c in model.clusters}
        for cls in range(fs.c):
            dominated = graph.dominant_by_class.get(cls, [])
            if dominated:
                expect_wcu = fs.features[by_id[dominated[0]].members].mean(axis=0)
                union = [i for cid in dominated for i in by_id[cid].members]
                expect_pca = fs.features[union].mean(axis=0)
            else:
                expect_wcu = expect_pca = fs.features[fs.labels == cls].mean(axis=0)
            assert np.allclose(bank.cluster_prototypes[cls], expect_wcu)
            assert np.allclose(bank.class_prototypes[cls], expect_pca)


def test_fallback_prototype_for_undominated_class():
    fs = make_featureset([[0.0, 1.0], [2.0, 3.0]], [0, 1])
    graph = _hand_graph(fs, [[0, 1]])  # single mixed cluster, nothing dominated
    bank = compute_prototypes(graph, fs)
    assert np.allclose(bank.cluster_prototypes[0], [0.0, 1.0])
    assert np.allclose(bank.class_prototypes[1], [2.0, 3.0])


@pytest.mark.parametrize("align", [cluster_align, class_align])
def test_align_identity_and_prototype_limits(align, rng):
    x = rng.normal(size=(2, 3))
    p = rng.normal(size=(2, 3))
    assert np.allclose(align(x, p, 1.0, 0.0), x)
    assert np.allclose(align(x, p, 0.0, 1.0), p)
    assert np.allclose(align(x, p, 0.5, 0.5), 0.5 * x + 0.5 * p)


@pytest.mark.parametrize("align", [cluster_align, class_align])
def test_align_is_exactly_linear(align, rng):
    p = rng.normal(size=(4,))
    x, y = rng.normal(size=4), rng.normal(size=4)
    a, b = 1.3, -0.7
    combined = align(a * x + b * y, p, 0.7, 0.3)
    parts = a * align(x, p, 0.7, 0.3) + b * align(y, p, 0.7, 0.3)
    assert np.allclose(combined - parts, (1 - a - b) * 0.3 * p)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_ce_loss_confident_and_uniform():
    logits = np.array([20.0, 0.0, 0.0])
    assert ce_loss(logits, 0) <= 1e-6
    uniform = np.zeros(7)
    assert ce_loss(uniform, 3) == pytest.approx(np.log(7))


def test_ce_loss_gradient(rng):
    logits = rng.normal(size=(1, 5))

    def f(z):
        return rgrl.ce_loss_node(z, 2)

    assert nm.grad_check(f, [logits]) < 1e-4


def test_nega_loss_paper_literal_zero_at_zero_distance():
    cfg = LossConfig(theta=1.0, mu=1.0, dispersion_sign=rgrl.PAPER_LITERAL)
    anchor = np.ones(3)
    assert nega_loss(anchor, np.vstack([anchor, anchor]), cfg) == pytest.approx(0.0)


def test_nega_loss_repulsive_monotone_decreasing():
    cfg = LossConfig(dispersion_sign=rgrl.REPULSIVE, theta=1.0, mu=1.0)
    anchor = np.zeros(2)
    values = [
        nega_loss(anchor, np.array([[dist, 0.0]]), cfg)
        for dist in [1e-6, 0.01, 0.1, 1.0, 10.0, 1e4]
    ]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[0] > 10.0  # grows without bound as distances vanish
    assert values[-1] == pytest.approx(-np.log(1.0), abs=1e-3)


def test_nega_loss_paper_literal_monotone_increasing():
    cfg = LossConfig(dispersion_sign=rgrl.PAPER_LITERAL)
    anchor = np.zeros(2)
    values = [nega_loss(anchor, np.array([[d, 0.0]]), cfg) for d in [0.1, 1.0, 5.0, 50.0]]
    assert all(a < b for a, b in zip(values, values[1:]))


def test_nega_loss_matches_direct_formula(rng):
    cfg = LossConfig(theta=0.7, mu=1.3, gamma_nega=1.0, dispersion_sign=rgrl.PAPER_LITERAL)
    anchor = rng.normal(size=4)
    negas = rng.normal(size=(5, 4))
    s = float(sum(np.linalg.norm(anchor - q) for q in negas))
    assert nega_loss(anchor, negas, cfg) == pytest.approx(-np.log(cfg.mu * cfg.theta / (s + cfg.theta)))
    cfg_rep = LossConfig(theta=0.7, mu=1.3, dispersion_sign=rgrl.REPULSIVE)
    assert nega_loss(anchor, negas, cfg_rep) == pytest.approx(-np.log(s / (s + cfg_rep.theta)) - np.log(cfg_rep.mu))


def test_nega_loss_gradient(rng):
    cfg = LossConfig(dispersion_sign=rgrl.REPULSIVE)
    negas = rng.normal(size=(4, 3)) + 2.0

    def f(anchor):
        return rgrl.nega_loss_node(anchor, nm.leaf(negas), cfg)

    assert nm.grad_check(f, [rng.normal(size=(1, 3))]) < 1e-4


def test_interclass_identical_aggregates_zero_paper_literal(rng):
    cfg = LossConfig(mu=1.0, dispersion_sign=rgrl.PAPER_LITERAL)
    rows = rng.normal(size=(3, 4))
    groups = {0: rows.copy(), 1: rows.copy()}
    assert interclass_loss(groups, cfg) == pytest.approx(0.0)


def test_interclass_two_class_hand_distance():
    cfg = LossConfig(theta=2.0, mu=1.5, dispersion_sign=rgrl.PAPER_LITERAL)
    groups = {0: np.array([[0.0, 0.0]]), 1: np.array([[3.0, 4.0]])}  # distance 5
    per_pair = -np.log(cfg.mu * cfg.theta / (5.0 + cfg.theta))
    # ordered-pair sum: (0,1) and (1,0)
    assert interclass_loss(groups, cfg) == pytest.approx(2.0 * per_pair)


def test_interclass_matches_direct_oracle(rng):
    cfg = LossConfig(theta=1.1, mu=0.9, dispersion_sign=rgrl.REPULSIVE)
    groups = {c: rng.normal(size=(int(rng.integers(1, 5)), 3)) for c in range(4)}
    means = {c: rows.mean(axis=0) for c, rows in groups.items()}
    total = 0.0
    for i in groups:
        for j in groups:
            if i == j:
                continue
            d = np.linalg.norm(means[i] - means[j])
            total += -np.log(d / (d + cfg.theta)) - np.log(cfg.mu)
    assert interclass_loss(groups, cfg) == pytest.approx(total)


def test_interclass_permutation_invariance(rng):
    cfg = LossConfig()
    groups = {c: rng.normal(size=(2, 3)) for c in range(3)}
    relabeled = {2: groups[0], 0: groups[1], 1: groups[2]}
    assert interclass_loss(groups, cfg) == pytest.approx(interclass_loss(relabeled, cfg))


def test_interclass_single_class_is_zero(rng, caplog):
    cfg = LossConfig()
    with caplog.at_level("INFO", logger="csrms.rgrl"):
        value = interclass_loss({0: rng.normal(size=(3, 2))}, cfg)
    assert value == 0.0
    assert any("single class" in r.message for r in caplog.records)


# ---------------------------------------------------------------------------
# training and inference
# ---------------------------------------------------------------------------


def _training_setup(seed=0, n=40):
    gen = np.random.Generator(np.random.PCG64(seed))
    fs = random_featureset(gen, n=n, d=4, c=3)
    model_c = art_fit(fs, vigilance=0.5, seed=seed)
    graph = build_relation_graph(model_c, fs.labels, 0.55)
    bank = compute_prototypes(graph, fs)
    smoother = _model(d=4, h=6, c=3, k=2, softmax=False, seed=seed)
    cfg = cags.SamplerConfig(n_pos=3, m_neg=2)
    state = cags.CurriculumState()
    batch = cags.build_batch(fs, graph, cfg, state, np.arange(min(16, fs.n)), 0.8)
    return fs, graph, bank, smoother, batch


def test_gamma_zero_reduces_to_weighted_ce():
    fs, graph, bank, smoother, batch = _training_setup()
    cfg = LossConfig(gamma_nega=0.0, gamma_inter=0.0)
    breakdown = train_step(batch, smoother, bank, cfg, fs, lr=0.01)
    assert breakdown["nega"] == 0.0
    assert breakdown["inter"] == 0.0
    assert breakdown["total"] == pytest.approx(breakdown["ce"])


def test_train_step_descends_on_fixed_batch():
    for seed in range(5):
        fs, graph, bank, smoother, batch = _training_setup(seed=seed)
        cfg = LossConfig()
        first = train_step(batch, smoother, bank, cfg, fs, lr=0.005)
        second = train_step(batch, smoother, bank, cfg, fs, lr=0.005)
        assert second["total"] < first["total"]


def test_composite_gradient_matches_finite_differences():
    fs, graph, bank, cfg_model, batch = _training_setup(n=24)
    loss_cfg = LossConfig(dispersion_sign=rgrl.REPULSIVE, gamma_inter=0.5)

    def f(w_in, w_out, cls_w, cls_b):
        model = SmoothingModel(w_in.value, w_out.value, cls_w.value, cls_b.value,
                               knn_k=cfg_model.knn_k, use_output_softmax=False)
        nodes = {"w_in": w_in, "w_out": w_out, "classifier_w": cls_w, "classifier_b": cls_b}
        _, parts, _ = rgrl.batch_loss_nodes(batch, model, bank, loss_cfg, fs, param_nodes=nodes)
        return parts["total"]

    err = nm.grad_check(
        f,
        [cfg_model.w_in, cfg_model.w_out, cfg_model.classifier_w, cfg_model.classifier_b],
    )
    assert err < 1e-4


def test_smoothing_plus_ce_chain_gradient(rng):
    # two-layer graph convolution feeding cross-entropy, all params checked
    X = rng.normal(size=(4, 3))
    A = knn_adjacency(X, 2)

    def f(w_in, w_out, cls_w):
        fg = rgrl.smoothing_nodes(A, nm.leaf(X), w_in, w_out, use_output_softmax=True)
        logits = nm.matmul(nm.select_rows(fg, [0]), cls_w)
        return rgrl.ce_loss_node(logits, 1)

    err = nm.grad_check(f, [rng.normal(size=(3, 5)), rng.normal(size=(5, 3)), rng.normal(size=(3, 4))])
    assert err < 1e-4


def test_train_step_updates_only_live_parameters():
    fs, graph, bank, smoother, batch = _training_setup()
    cfg = LossConfig(gamma_nega=0.0, gamma_inter=0.0)
    before_w_in = smoother.w_in.copy()
    before_cls = smoother.classifier_w.copy()
    train_step(batch, smoother, bank, cfg, fs, lr=0.01,
               flags=rgrl.TrainFlags(use_smoothing=False, use_alignment=False))
    assert np.array_equal(smoother.w_in, before_w_in)  # smoothing off: GCN untouched
    assert not np.array_equal(smoother.classifier_w, before_cls)


def test_infer_is_deterministic_and_duplicates_match():
    fs, graph, bank, smoother, _ = _training_setup(n=30)
    test_fs = make_featureset(np.vstack([fs.features[3], fs.features[7]]), [0, 0], c=fs.c)
    preds1, scores1 = infer(test_fs, graph, fs, smoother, bank)
    preds2, scores2 = infer(test_fs, graph, fs, smoother, bank, workers=4)
    assert np.array_equal(preds1, preds2)
    assert np.allclose(scores1, scores2)
    single = make_featureset(fs.features[3][None, :], [0], c=fs.c)
    pred_single, _ = infer(single, graph, fs, smoother, bank)
    assert pred_single[0] == preds1[0]


def test_topk_scores_contain_top1(rng):
    fs, graph, bank, smoother, _ = _training_setup(n=30)
    preds, scores = infer(fs, graph, fs, smoother, bank)
    for row, pred in zip(scores, preds):
        top5 = np.lexsort((np.arange(len(row)), -row))[:5]
        assert pred == top5[0]
        assert pred in top5


def test_checkpoint_round_trip(tmp_path):
    fs, graph, bank, smoother, _ = _training_setup()
    prefix = tmp_path / "ckpt"
    rgrl.save_checkpoint(prefix, smoother, bank, {"seed": 0})
    model2, bank2, config = rgrl.load_checkpoint(prefix)
    assert config == {"seed": 0}
    assert np.allclose(model2.w_in, smoother.w_in, atol=1e-6)
    assert np.array_equal(model2.w_in.astype(np.float32), smoother.w_in.astype(np.float32))
    assert model2.knn_k == smoother.knn_k
    assert bank2.alpha_u == bank.alpha_u
    assert np.allclose(bank2.class_prototypes, bank.class_prototypes, atol=1e-6)


def test_loss_config_validation():
    with pytest.raises(ContractError):
        LossConfig(theta=0.0).validate()
    with pytest.raises(ContractError):
        LossConfig(dispersion_sign="sideways").validate()

import math

import numpy as np
import pytest

from csmlab import autodiff as ad
from csmlab.autodiff import Tensor
from csmlab.datasets import gen_xor
from csmlab.model import compute_marginal_prior
from csmlab.rng import RngStream
from csmlab.training import (
    TrainConfig,
    TrainingDivergedError,
    apply_sidechannel_dropout,
    detach_loss,
    divergence_loss,
    fit,
    randint_intervene,
    training_loss,
)
from csmlab.zoo import build_model


def small_model(arch, seed=0, variant="standard", **kw):
    defaults = dict(input_dim=4, n_concepts=2, n_tasks=1, emb_size=6, c_emb=4,
                    n_rules=3, rule_emb=5)
    defaults.update(kw)
    return build_model(arch, rng=RngStream(seed, "init"), variant=variant, **defaults)


def batch(n=8, d=4, n_c=2, n_y=1, seed=0):
    rng = np.random.default_rng(seed)
    return (
        rng.normal(size=(n, d)),
        rng.integers(0, 2, size=(n, n_c)).astype(float),
        rng.integers(0, 2, size=(n, n_y)).astype(float),
    )


# ---- loss composition --------------------------------------------------------


def test_beta_zero_removes_divergence_term():
    model = small_model("CRM")
    x, c, y = batch()
    cfg = TrainConfig(alpha=0.7, beta=0.0)
    loss, comps = training_loss(model, x, c, y, cfg)
    assert comps["sis"] == 0.0
    assert comps["total"] == pytest.approx(comps["task"] + 0.7 * comps["concept"])


def test_z_blind_head_has_zero_divergence():
    model = small_model("LRM")
    model.params["psi.out.w"].data[model.n_concepts :, :] = 0.0
    x, c, y = batch()
    model.prior = compute_marginal_prior(model, x)
    for kind in ("tv", "symkl"):
        cfg = TrainConfig(beta=2.0, divergence=kind, prior_mode="marginalized")
        _, comps = training_loss(model, x, c, y, cfg)
        assert comps["sis"] == pytest.approx(0.0, abs=1e-12)


def test_hand_computed_two_sample_loss():
    # LRM, one concept, one sidechannel unit, hand-checkable numbers:
    # concept net zeroed -> score 0.5 -> hard concept 1;
    # sidechannel passes x through (z = x); head logit = c + 0.5 z - 1.
    model = small_model("LRM", input_dim=1, n_concepts=1, emb_size=1)
    for p in model.params.values():
        p.data[:] = 0.0
    model.params["phi.0.w"].data[:] = 1.0
    model.params["phi.1.w"].data[:] = 1.0
    model.params["phi.2.w"].data[:] = 1.0  # relu chain keeps positives, kills negatives
    model.params["psi.out.w"].data[:, 0] = [1.0, 0.5]
    model.params["psi.out.b"].data[:] = -1.0

    x = np.array([[1.0], [-1.0]])
    c = np.array([[1.0], [0.0]])
    y = np.array([[1.0], [0.0]])
    model.prior = compute_marginal_prior(model, x)  # mean z = 0.5 (relu kills -1)

    cfg = TrainConfig(alpha=0.7, beta=2.0, divergence="tv", prior_mode="marginalized")
    _, comps = training_loss(model, x, c, y, cfg)

    def sigmoid(v):
        return 1.0 / (1.0 + math.exp(-v))

    p1, p2 = sigmoid(1.0 + 0.5 * 1.0 - 1.0), sigmoid(1.0 + 0.5 * 0.0 - 1.0)
    task = -(math.log(p1) + math.log(1.0 - p2)) / 2.0
    concept = -(math.log(0.5) + math.log(0.5)) / 2.0
    q = sigmoid(1.0 + 0.5 * 0.5 - 1.0)
    tv = (abs(p1 - q) + abs(p2 - q)) / 2.0
    assert comps["task"] == pytest.approx(task, abs=1e-12)
    assert comps["concept"] == pytest.approx(concept, abs=1e-12)
    assert comps["sis"] == pytest.approx(tv, abs=1e-12)
    assert comps["total"] == pytest.approx(task + 0.7 * concept + 2.0 * tv, abs=1e-12)


def test_divergence_loss_matches_metrics_implementation():
    from csmlab.metrics import divergence

    rng = np.random.default_rng(5)
    p = rng.uniform(0.05, 0.95, size=(16, 3))
    q = rng.uniform(0.05, 0.95, size=(16, 3))
    for kind in ("tv", "symkl"):
        tensor_val = divergence_loss(Tensor(p), Tensor(q), kind).item()
        assert tensor_val == pytest.approx(divergence(p, q, kind), abs=1e-12)
    groups = [(0, 3)]
    for kind in ("tv", "symkl"):
        tensor_val = divergence_loss(Tensor(p), Tensor(q), kind, groups).item()
        assert tensor_val == pytest.approx(divergence(p, q, kind, groups), abs=1e-12)


@pytest.mark.parametrize("arch", ["LRM", "CRM", "CEM", "DCR", "CMR"])
def test_concept_predictor_gets_no_task_or_divergence_gradient(arch):
    model = small_model(arch, seed=3)
    model.attach_learnable_prior(RngStream(3, "prior"))
    x, c, y = batch(seed=4)
    cfg = TrainConfig(alpha=0.0, beta=1.5, divergence="symkl", prior_mode="learnable")
    loss, _ = training_loss(model, x, c, y, cfg)
    grads = ad.backward(loss, list(model.params.values()))
    by_name = {name: grads[p] for name, p in model.params.items()}
    for name, g in by_name.items():
        if name.startswith("theta"):
            assert not g.any(), f"{arch} {name} leaked task/divergence gradient"
    # The concept term, by contrast, does reach the concept predictor.
    cfg2 = TrainConfig(alpha=1.0, beta=0.0)
    loss2, _ = training_loss(model, x, c, y, cfg2)
    grads2 = ad.backward(loss2, list(model.params.values()))
    assert any(
        grads2[p].any() for name, p in model.params.items() if name.startswith("theta")
    )


def test_learnable_prior_receives_divergence_gradient():
    model = small_model("CRM", seed=6)
    prior = model.attach_learnable_prior(RngStream(6, "prior"))
    x, c, y = batch(seed=7)
    cfg = TrainConfig(beta=1.0, prior_mode="learnable")
    loss, _ = training_loss(model, x, c, y, cfg)
    grads = ad.backward(loss, [model.params["gamma.payload"]])
    assert grads[model.params["gamma.payload"]].any()


# ---- baselines -----------------------------------------------------------------


def test_dropout_identity_and_zeroing_extremes():
    payload = Tensor(np.ones((4, 3)))
    rng = RngStream(0, "dropout")
    np.testing.assert_array_equal(apply_sidechannel_dropout(payload, 0.0, rng).data, 1.0)
    np.testing.assert_array_equal(apply_sidechannel_dropout(payload, 1.0, rng).data, 0.0)


def test_dropout_frequency():
    payload = Tensor(np.ones((2, 2)))
    rng = RngStream(1, "dropout")
    zeroed = sum(
        not apply_sidechannel_dropout(payload, 0.5, rng).data.any() for _ in range(10_000)
    )
    assert abs(zeroed / 10_000 - 0.5) < 0.02


def test_randint_extremes_and_rate():
    rng = RngStream(2, "randint")
    values = np.full((100, 10), 0.25)
    labels = np.ones((100, 10))
    np.testing.assert_array_equal(randint_intervene(values, labels, 0.0, rng), values)
    np.testing.assert_array_equal(randint_intervene(values, labels, 1.0, rng), labels)
    big = np.full((10_000, 10), 0.25)
    out = randint_intervene(big, np.ones_like(big), 0.05, rng)
    assert abs((out == 1.0).mean() - 0.05) < 0.005


def test_detach_terms_collapse_when_g_is_zero():
    model = small_model("CRM", variant="detach", seed=8)
    model.side_head_probs = lambda payload: Tensor(np.zeros((payload.shape[0], 1)))
    x, c, y = batch(seed=9)
    concepts = model.task_path_concepts(model.concept_scores(Tensor(x)))
    payload = model.sidechannel_payload(Tensor(x))
    loss, _ = detach_loss(model, concepts, payload, y)
    from csmlab.training import binary_cross_entropy

    single = binary_cross_entropy(model.concept_head_probs(concepts), y)
    assert loss.item() == pytest.approx(2.0 * single.item(), abs=1e-12)


def test_detach_gradient_separation():
    model = small_model("CRM", variant="detach", seed=10)
    x, c, y = batch(seed=11)
    from csmlab.training import binary_cross_entropy

    concepts = model.task_path_concepts(model.concept_scores(Tensor(x)))
    payload = model.sidechannel_payload(Tensor(x))
    f = model.concept_head_probs(concepts)
    g = model.side_head_probs(payload)
    term1 = binary_cross_entropy(f, y)
    term2 = binary_cross_entropy(ad.clamp(ad.stop_gradient(f) + g, 0.0, 1.0), y)

    grads1 = ad.backward(term1, list(model.params.values()))
    for name, p in model.params.items():
        if name.startswith("psi.g"):
            assert not grads1[p].any(), f"first term leaked into {name}"
    grads2 = ad.backward(term2, list(model.params.values()))
    for name, p in model.params.items():
        if name.startswith("psi.f"):
            assert not grads2[p].any(), f"second term leaked into {name}"


def test_detach_loss_requires_variant():
    model = small_model("CRM")
    with pytest.raises(ValueError, match="detach"):
        detach_loss(model, Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 6))), np.zeros((1, 1)))


# ---- config validation -----------------------------------------------------------


def test_config_rejects_bad_fields_with_precise_names():
    with pytest.raises(ValueError, match="train.alpha"):
        TrainConfig(alpha=-1.0).validate()
    with pytest.raises(ValueError, match="train.beta"):
        TrainConfig(beta=-0.5).validate()
    with pytest.raises(ValueError, match="train.divergence"):
        TrainConfig(divergence="js").validate()
    with pytest.raises(ValueError, match="train.dropout_p"):
        TrainConfig(dropout_p=1.5).validate()
    with pytest.raises(ValueError, match="train.batch_size"):
        TrainConfig(batch_size=0).validate()


def test_auto_prior_mode_resolution():
    assert TrainConfig(beta=0.0).resolved_prior_mode() == "marginalized"
    assert TrainConfig(beta=0.5).resolved_prior_mode() == "learnable"
    assert TrainConfig(beta=0.5, prior_mode="marginalized").resolved_prior_mode() == "marginalized"


# ---- fit ---------------------------------------------------------------------------


def test_fit_zero_epochs_returns_initialized_model():
    ds = gen_xor(200, seed=1)
    cfg = TrainConfig(epochs=0, seed=5)
    model, history = fit(ds, "LRM", cfg, emb_size=6)
    fresh = build_model("LRM", input_dim=4, n_concepts=2, n_tasks=1,
                        rng=RngStream(5).substream("init"), emb_size=6,
                        concept_names=ds.concept_names, task_names=ds.task_names)
    assert history.n_epochs == 0
    for name in fresh.params:
        np.testing.assert_array_equal(model.params[name].data, fresh.params[name].data)
    assert model.prior is not None  # marginal prior attached for evaluation


def test_fit_same_seed_is_bit_identical():
    ds = gen_xor(300, seed=2)
    cfg = TrainConfig(epochs=3, batch_size=64, seed=9, beta=0.5)
    a, ha = fit(ds, "LRM", cfg, emb_size=6)
    b, hb = fit(ds, "LRM", cfg, emb_size=6)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name].data, b.params[name].data)
    assert ha.val_loss == hb.val_loss


def test_fit_restores_best_validation_epoch():
    ds = gen_xor(300, seed=3)
    cfg = TrainConfig(epochs=5, batch_size=64, seed=11)
    model, history = fit(ds, "LRM", cfg, emb_size=6)
    assert history.best_epoch == int(np.argmin(history.val_loss))
    assert history.best_val_loss == min(history.val_loss)


def test_fit_history_lengths_match_epochs():
    ds = gen_xor(250, seed=4)
    cfg = TrainConfig(epochs=4, batch_size=128, seed=13, beta=1.0)
    _, history = fit(ds, "CRM", cfg, emb_size=6)
    for series in (history.train_loss, history.task_loss, history.concept_loss,
                   history.sis_loss, history.val_loss, history.val_accuracy,
                   history.val_sis):
        assert len(series) == 4


def test_fit_patience_stops_early():
    ds = gen_xor(250, seed=5)
    cfg = TrainConfig(epochs=50, batch_size=128, seed=17, patience=1, lr=10.0)
    _, history = fit(ds, "LRM", cfg, emb_size=4)
    assert history.n_epochs < 50


def test_fit_reports_divergence_with_partial_history():
    ds = gen_xor(200, seed=6)
    ds.x[ds.train_idx[0]] = np.nan
    cfg = TrainConfig(epochs=2, batch_size=200, seed=19)
    with pytest.raises(TrainingDivergedError) as err:
        fit(ds, "LRM", cfg, emb_size=4)
    assert err.value.history is not None


def test_fit_dropout_rejected_for_categorical_sidechannel():
    ds = gen_xor(200, seed=7)
    cfg = TrainConfig(epochs=1, baseline="dropout", dropout_p=0.5)
    with pytest.raises(ValueError, match="categorical"):
        fit(ds, "CMR", cfg, emb_size=4)


def test_fit_detach_rejected_for_exclusive_tasks():
    from csmlab.datasets import gen_symbolic_addition

    ds = gen_symbolic_addition(200, seed=8)
    cfg = TrainConfig(epochs=1, baseline="detach")
    with pytest.raises(ValueError, match="detach baseline"):
        fit(ds, "CRM", cfg, emb_size=4)

"""Attack tests: reparameterization, projection, losses, crafting loop."""

import numpy as np
import pytest

from uaxlab import numerics as nm
from uaxlab.attack import (
    AttackError,
    CraftConfig,
    PerturbationBudget,
    UaxArtifact,
    apply_perturbation,
    batch_loss,
    craft_uax,
    load_artifact,
    pairwise_loss,
    project,
    reparam,
    reparam_inverse,
    save_artifact,
)
from uaxlab.dataset import IdentityDataset, SynthParams, generate_synthetic
from uaxlab.extractor import ExtractorSpec, init_model

XI = 10 / 255


def small_model(size=12, emb=4, ids=3, seed=0):
    spec = ExtractorSpec(
        arch_id="tiny_cnn", input_shape=(size, size, 1), class_count=ids, embedding_dim=emb
    )
    return init_model(spec, seed=seed)


def small_gallery(size=12, ids=3, imgs=2, seed=4):
    return generate_synthetic(
        SynthParams(
            identity_count=ids, images_per_identity=imgs, rng_seed=seed, image_size=size
        )
    )


def quick_craft_cfg(**overrides):
    base = dict(
        budget=PerturbationBudget(p=float("inf"), xi=XI),
        iterations=30,
        batch_size=4,
        learning_rate=0.1,
        rng_seed=5,
    )
    base.update(overrides)
    return CraftConfig(**base)


class PixelStub:
    """Model whose embedding is the flattened image times a fixed matrix."""

    def __init__(self, shape, w):
        self.w = np.asarray(w, dtype=np.float64)
        self.input_shape = shape

    def embed(self, img):
        return np.asarray(img, dtype=np.float64).reshape(-1) @ self.w

    def embed_t(self, x):
        wt = nm.Tensor(self.w)
        b = nm.Tensor(np.zeros(self.w.shape[1]))
        return nm.dense(x, wt, b)


class MeanStub:
    """1-D extractor: the embedding is the image's mean pixel value."""

    def __init__(self, shape):
        from types import SimpleNamespace

        self.spec = SimpleNamespace(input_shape=shape)

    def embed(self, img):
        return np.asarray(np.mean(img), dtype=np.float64)

    def embed_t(self, x):
        return nm.mean(x)


class TestReparam:
    def test_zero_maps_to_half(self):
        assert reparam(np.zeros(3)).tolist() == [0.5, 0.5, 0.5]

    def test_saturation(self):
        assert abs(reparam(np.array(20.0)) - 1.0) < 1e-9
        assert abs(reparam(np.array(-20.0))) < 1e-9

    def test_inverse_closed_form(self):
        w = reparam_inverse(np.array(0.75))
        assert abs(w - 0.5493061443340549) < 1e-12

    def test_round_trip(self):
        rng = np.random.Generator(np.random.PCG64(0))
        w = rng.normal(0, 2, size=(50,))
        np.testing.assert_allclose(reparam_inverse(reparam(w)), w, atol=1e-9)

    def test_range_is_open_unit_interval(self):
        # stay below the float64 tanh saturation point (~18.4)
        x = reparam(np.linspace(-15, 15, 101))
        assert x.min() > 0.0 and x.max() < 1.0

    def test_boundary_nudge(self):
        w = reparam_inverse(np.array([0.0, 1.0]))
        assert np.all(np.isfinite(w))
        with pytest.raises(AttackError):
            reparam_inverse(np.array([0.0, 1.0]), nudge=False)

    def test_out_of_range_rejected(self):
        with pytest.raises(AttackError):
            reparam_inverse(np.array([1.2]))


class TestProject:
    def test_inf_clamp_example(self):
        out = project(np.array([0.7, -0.2, -0.9]), PerturbationBudget(p=float("inf"), xi=0.5))
        np.testing.assert_array_equal(out, [0.5, -0.2, -0.5])

    def test_interior_point_unchanged(self):
        nu = np.array([0.01, -0.02, 0.0])
        for p in (float("inf"), 2.0):
            out = project(nu, PerturbationBudget(p=p, xi=0.5))
            np.testing.assert_array_equal(out, nu)

    def test_l2_radial_scaling(self):
        out = project(np.array([3.0, 4.0]), PerturbationBudget(p=2.0, xi=1.0))
        np.testing.assert_allclose(out, [0.6, 0.8], atol=1e-15)

    def test_idempotent_bit_exact(self):
        rng = np.random.Generator(np.random.PCG64(1))
        for p in (float("inf"), 2.0):
            for _ in range(50):
                nu = rng.normal(0, 1, size=(4, 4, 1))
                xi = float(rng.uniform(0.01, 1.0))
                once = project(nu, PerturbationBudget(p=p, xi=xi))
                twice = project(once, PerturbationBudget(p=p, xi=xi))
                np.testing.assert_array_equal(once, twice)

    def test_norm_bound_holds(self):
        rng = np.random.Generator(np.random.PCG64(2))
        for _ in range(50):
            nu = rng.normal(0, 2, size=(30,))
            out_inf = project(nu, PerturbationBudget(p=float("inf"), xi=0.3))
            assert np.abs(out_inf).max() <= 0.3
            out_2 = project(nu, PerturbationBudget(p=2.0, xi=0.3))
            assert np.sqrt(np.sum(out_2 * out_2)) <= 0.3

    def test_budget_validation(self):
        with pytest.raises(AttackError):
            project(np.zeros(2), PerturbationBudget(p=1.0, xi=0.5))
        with pytest.raises(AttackError):
            project(np.zeros(2), PerturbationBudget(p=2.0, xi=0.0))
        with pytest.raises(AttackError):
            project(np.zeros(2), PerturbationBudget(p=float("inf"), xi=-0.1))

    def test_epsilon_8bit_scale(self):
        assert PerturbationBudget(p=float("inf"), xi=10 / 255).epsilon == pytest.approx(10.0)


class TestApplyPerturbation:
    def test_clamps_to_unit_range(self):
        x = np.array([[[0.9]], [[0.1]]])
        nu = np.array([[[0.3]], [[-0.3]]])
        out = apply_perturbation(x, nu)
        np.testing.assert_allclose(out, [[[1.0]], [[0.0]]])

    def test_shape_mismatch(self):
        with pytest.raises(nm.ShapeError):
            apply_perturbation(np.zeros((2, 2, 1)), np.zeros((2, 3, 1)))


class TestLosses:
    def test_identical_images_zero(self):
        model = small_model()
        img = np.full((12, 12, 1), 0.4)
        assert pairwise_loss(model, img, img).item() == 0.0

    def test_orthogonal_unit_embeddings(self):
        # embeddings forced to (1,0) and (0,1): distance must come out sqrt(2)
        w = np.zeros((2, 2))
        w[0, 0] = 1.0
        w[1, 1] = 1.0
        stub = PixelStub((1, 2, 1), w)
        a = np.array([[[1.0], [0.0]]])
        b = np.array([[[0.0], [1.0]]])
        assert pairwise_loss(stub, a, b).item() == pytest.approx(np.sqrt(2.0), rel=1e-12)

    def test_matches_direct_recompute(self):
        model = small_model(seed=3)
        rng = np.random.Generator(np.random.PCG64(7))
        a = rng.uniform(0, 1, (12, 12, 1))
        b = rng.uniform(0, 1, (12, 12, 1))
        want = float(np.linalg.norm(model.embed(a) - model.embed(b)))
        assert pairwise_loss(model, a, b).item() == pytest.approx(want, rel=1e-12)

    def test_batch_of_one_equals_pairwise(self):
        model = small_model(seed=2)
        rng = np.random.Generator(np.random.PCG64(8))
        a = rng.uniform(0, 1, (12, 12, 1))
        b = rng.uniform(0, 1, (12, 12, 1))
        assert batch_loss(model, a, [b]).item() == pytest.approx(
            pairwise_loss(model, a, b).item(), rel=1e-12
        )

    def test_batch_identical_images_zero(self):
        model = small_model()
        img = np.full((12, 12, 1), 0.6)
        assert batch_loss(model, img, [img, img, img]).item() == 0.0

    def test_batch_mean_of_stub_losses(self):
        # 1-pixel images through an identity stub: distances are 1, 2, 3
        stub = PixelStub((1, 1, 1), np.array([[1.0]]))
        x = np.zeros((1, 1, 1))
        batch = [np.full((1, 1, 1), v) for v in (1.0, 2.0, 3.0)]
        assert batch_loss(stub, x, batch).item() == pytest.approx(2.0, rel=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(AttackError):
            batch_loss(small_model(), np.zeros((12, 12, 1)), [])

    def test_cosine_matches_numpy(self):
        stub = PixelStub((1, 3, 1), np.eye(3))
        rng = np.random.Generator(np.random.PCG64(9))
        a = rng.uniform(0.1, 1, (1, 3, 1))
        b = rng.uniform(0.1, 1, (1, 3, 1))
        va, vb = a.reshape(-1), b.reshape(-1)
        want = 1.0 - va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb))
        got = pairwise_loss(stub, a, b, metric="cosine").item()
        assert got == pytest.approx(want, rel=1e-12)


class TestCraft:
    def test_monotone_stub_rails_at_budget(self):
        # every target mean sits above the seed mean, so the optimum pushes
        # all pixels up until the linf clamp holds them at +xi
        size = 8
        stub = MeanStub((size, size, 1))
        entries = {
            f"id{k}": [np.full((size, size, 1), 0.7 + 0.05 * k)] for k in range(3)
        }
        gallery = IdentityDataset(entries=entries, role="train")
        seed_img = np.full((size, size, 1), 0.2)
        cfg = quick_craft_cfg(iterations=200, batch_size=2, learning_rate=5.0)
        art = craft_uax(stub, seed_img, gallery, cfg)
        np.testing.assert_allclose(art.nu, XI, atol=1e-12)

    def test_budget_invariant_exact(self):
        model = small_model(seed=1)
        gallery = small_gallery()
        art = craft_uax(model, np.full((12, 12, 1), 0.5), gallery, quick_craft_cfg())
        assert np.abs(art.nu).max() <= XI

    def test_budget_invariant_with_final_only_projection(self):
        model = small_model(seed=1)
        gallery = small_gallery()
        cfg = quick_craft_cfg(project_every_step=False, learning_rate=2.0)
        art = craft_uax(model, np.full((12, 12, 1), 0.5), gallery, cfg)
        assert np.abs(art.nu).max() <= XI

    def test_loss_trace_and_final_loss(self):
        model = small_model(seed=6)
        gallery = small_gallery()
        art = craft_uax(model, np.full((12, 12, 1), 0.5), gallery, quick_craft_cfg())
        assert len(art.loss_trace) == 30
        assert np.all(np.isfinite(art.loss_trace))
        assert np.isfinite(art.final_loss)

    def test_deterministic_bit_identical(self):
        model = small_model(seed=6)
        gallery = small_gallery()
        g11 = small_gallery(seed=11)
        seed_img = g11.entries[g11.labels[0]][0]
        a = craft_uax(model, seed_img, gallery, quick_craft_cfg())
        b = craft_uax(model, seed_img, gallery, quick_craft_cfg())
        np.testing.assert_array_equal(a.nu, b.nu)
        assert a.loss_trace == b.loss_trace

    def test_stratified_sampling_runs_and_differs(self):
        model = small_model(seed=6)
        gallery = small_gallery(ids=3, imgs=4)
        seed_img = gallery.entries[gallery.labels[1]][0]
        plain = craft_uax(model, seed_img, gallery, quick_craft_cfg())
        strat = craft_uax(model, seed_img, gallery, quick_craft_cfg(stratified=True))
        assert np.abs(strat.nu).max() <= XI
        assert not np.array_equal(plain.nu, strat.nu)

    def test_vanishing_budget_keeps_seed(self):
        model = small_model(seed=2)
        gallery = small_gallery()
        cfg = quick_craft_cfg(budget=PerturbationBudget(p=float("inf"), xi=1e-12))
        g12 = small_gallery(seed=12)
        seed_img = g12.entries[g12.labels[0]][0]
        art = craft_uax(model, seed_img, gallery, cfg)
        assert np.abs(art.adversarial_image - seed_img).max() <= 2e-12

    def test_l2_budget(self):
        model = small_model(seed=2)
        gallery = small_gallery()
        cfg = quick_craft_cfg(budget=PerturbationBudget(p=2.0, xi=0.5))
        art = craft_uax(model, np.full((12, 12, 1), 0.5), gallery, cfg)
        assert np.sqrt(np.sum(art.nu**2)) <= 0.5

    def test_batch_larger_than_pool_rejected(self):
        model = small_model(seed=2)
        gallery = small_gallery(ids=2, imgs=2)
        with pytest.raises(AttackError):
            craft_uax(model, np.full((12, 12, 1), 0.5), gallery, quick_craft_cfg(batch_size=5))

    def test_seed_shape_mismatch(self):
        model = small_model(seed=2)
        gallery = small_gallery()
        with pytest.raises(nm.ShapeError):
            craft_uax(model, np.full((13, 12, 1), 0.5), gallery, quick_craft_cfg())

    def test_cosine_metric_runs(self):
        from types import SimpleNamespace

        # fixed linear embedding keeps cosine well-defined on positive images
        stub = PixelStub((2, 2, 1), np.array([[1.0, 0.0], [0.5, 0.5], [0.0, 1.0], [0.2, 0.8]]))
        stub.spec = SimpleNamespace(input_shape=(2, 2, 1))
        rng = np.random.Generator(np.random.PCG64(4))
        entries = {f"p{k}": [rng.uniform(0.3, 0.9, (2, 2, 1))] for k in range(3)}
        gallery = IdentityDataset(entries=entries, role="train")
        art = craft_uax(
            stub, np.full((2, 2, 1), 0.5), gallery, quick_craft_cfg(metric="cosine", batch_size=2)
        )
        assert np.abs(art.nu).max() <= XI

    def test_config_validation(self):
        for bad in (
            dict(iterations=0),
            dict(batch_size=0),
            dict(learning_rate=0.0),
            dict(metric="manhattan"),
        ):
            with pytest.raises(AttackError):
                quick_craft_cfg(**bad).validate()


class TestArtifactIO:
    def make_artifact(self):
        model = small_model(seed=3)
        gallery = small_gallery()
        seed_img = gallery.entries[gallery.labels[0]][0]
        return craft_uax(model, seed_img, gallery, quick_craft_cfg(iterations=10))

    def test_round_trip(self, tmp_path):
        art = self.make_artifact()
        paths = save_artifact(art, str(tmp_path), stem="probe")
        loaded = load_artifact(paths["sidecar"])
        np.testing.assert_array_equal(loaded.nu, art.nu)
        np.testing.assert_array_equal(loaded.seed_image, art.seed_image)
        assert loaded.final_loss == art.final_loss
        assert loaded.loss_trace == art.loss_trace
        assert loaded.config.budget == art.config.budget
        assert loaded.config.iterations == art.config.iterations
        assert loaded.config.rng_seed == art.config.rng_seed

    def test_png_matches_to_quantization(self, tmp_path):
        art = self.make_artifact()
        paths = save_artifact(art, str(tmp_path))
        from uaxlab import pngio

        quant = pngio.read_png(paths["png"])
        back = quant.astype(np.float64) / 65535.0
        assert back.shape == (12, 12)
        assert np.abs(back[:, :, None] - art.adversarial_image).max() <= 0.5 / 65535.0

    def test_truncated_raw_rejected(self, tmp_path):
        art = self.make_artifact()
        paths = save_artifact(art, str(tmp_path))
        raw = open(paths["nu"], "rb").read()
        with open(paths["nu"], "wb") as fh:
            fh.write(raw[:-8])
        with pytest.raises(AttackError, match="bytes"):
            load_artifact(paths["sidecar"])

    def test_adversarial_image_definition(self):
        seed_img = np.full((2, 2, 1), 0.95)
        nu = np.full((2, 2, 1), 0.1)
        art = UaxArtifact(
            seed_image=seed_img, nu=nu, config=quick_craft_cfg(), final_loss=0.0
        )
        np.testing.assert_allclose(art.adversarial_image, 1.0)

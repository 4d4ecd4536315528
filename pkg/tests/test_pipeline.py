import numpy as np
import pytest

from pciseg.core import mask_iou
from pciseg.pipeline import (
    ModelParams,
    PipelineConfig,
    RmsProp,
    default_config_for,
    encode,
    infer,
    load_model,
    nms,
    pointwise_predict,
    save_model,
    scene_loss_report,
    superpoint_align,
    train,
)
from pciseg.scenegen import GenConfig, generate

from conftest import toy_scene


def tiny_config(**kwargs):
    defaults = dict(
        num_classes=5,
        d_model=8,
        mask_dim=4,
        layout_dims=(13, 8, 1),
        stage1_budget=16,
        chunk_sizes=(6, 4),
        k_train=8,
        num_neighbors=8,
        decode_chunk=16,
    )
    defaults.update(kwargs)
    return PipelineConfig(**defaults)


def inverse_softplus(y):
    return float(np.log(np.expm1(y)))


def oracle_model(config) -> ModelParams:
    """Hand-built parameters that segment well-separated clusters exactly.

    The encoder forwards raw positions, both pointwise and candidate box
    heads predict a fixed-size box centered on each point, and the kernel
    head emits a constant two-unit detector that rejects points whose
    box-difference features sum above a separation threshold.
    """
    model = ModelParams.initialize(config, 0)
    p = {name: np.zeros_like(value) for name, value in model.params.items()}
    d = config.d_model

    eye = np.zeros((18, d))
    eye[0:3, 0:3] = np.eye(3)
    p["enc.w0"] = eye
    p["enc.w1"][0:3, 0:3] = np.eye(3)
    p["enc.w2"][0:3, 0:3] = np.eye(3)

    p["point.sem_b"][:] = [-10.0, 10.0, 0.0, 0.0, 0.0]
    p["point.box_w"][0:3, 0:3] = np.eye(3)
    p["point.box_b"][3:] = inverse_softplus(0.5)

    p["head.cls_b"][:] = [10.0, 0.0, 0.0, 0.0, -10.0]
    p["head.box_w"][0:3, 0:3] = np.eye(3)
    p["head.box_b"][3:] = inverse_softplus(0.5)
    p["head.q_b"][:] = 3.0

    layout = config.kernel_layout()
    kernel = np.zeros(layout.param_count)
    spec = layout.slices()
    c0 = config.layout_dims[0]
    w0 = np.zeros((c0, config.layout_dims[1]))
    w0[c0 - 6 :, 0] = 1.0  # unit 0 accumulates the six geo channels
    b0 = np.zeros(config.layout_dims[1])
    b0[0] = -1.5  # separation threshold
    b0[1] = 1.0  # unit 1 is a constant source
    w1 = np.zeros((config.layout_dims[1], 1))
    w1[0, 0] = -4.0
    w1[1, 0] = 4.0
    kernel[spec[0][0]] = w0.ravel()
    kernel[spec[0][1]] = b0
    kernel[spec[1][0]] = w1.ravel()
    p["head.ker_b"] = kernel

    model.params.update(p)
    return model


class TestEncode:
    def test_duplicate_points_identical_rows(self):
        config = tiny_config()
        model = ModelParams.initialize(config, 3)
        pts = np.array([[0.5, 0.5, 0.5]] * 2 + [[1.0, 0.2, 0.0], [0.1, 0.9, 0.4]])
        scene = toy_scene(pts, [1] * 4, [0] * 4)
        feats = encode(scene, model, config)
        assert np.array_equal(feats[0], feats[1])

    def test_zero_weights_zero_features(self):
        config = tiny_config()
        model = ModelParams.initialize(config, 3)
        for name in model.params:
            if name.startswith("enc."):
                model.params[name] = np.zeros_like(model.params[name])
        scene = toy_scene(np.random.default_rng(0).uniform(0, 1, (6, 3)), [1] * 6, [0] * 6)
        assert np.array_equal(encode(scene, model, config), np.zeros((6, config.d_model)))

    def test_early_late_devoxelization_identical(self, two_cluster_scene):
        config_early = tiny_config(voxel_size=0.08, devoxelization="early")
        config_late = tiny_config(voxel_size=0.08, devoxelization="late")
        model = ModelParams.initialize(config_early, 5)
        sem_e, box_e, fm_e = pointwise_predict(two_cluster_scene, model, config_early)
        sem_l, box_l, fm_l = pointwise_predict(two_cluster_scene, model, config_late)
        assert np.max(np.abs(sem_e - sem_l)) <= 1e-12
        assert np.max(np.abs(box_e - box_l)) <= 1e-12
        assert np.max(np.abs(fm_e - fm_l)) <= 1e-12

    def test_pointwise_box_invariant(self, two_cluster_scene):
        config = tiny_config()
        model = ModelParams.initialize(config, 9)
        _, boxes, _ = pointwise_predict(two_cluster_scene, model, config)
        assert np.all(boxes[:, :3] <= boxes[:, 3:])


class TestNms:
    def test_identical_masks_keep_first(self):
        masks = np.array([[1, 1, 0, 0], [1, 1, 0, 0]], dtype=bool)
        assert nms(masks, np.array([0.9, 0.8]), 0.2) == [0]

    def test_low_overlap_keeps_both(self):
        masks = np.array([[1, 1, 0, 0, 0, 0, 0, 0, 0, 0], [0, 1, 1, 1, 1, 1, 1, 1, 1, 1]], dtype=bool)
        assert mask_iou(masks[0], masks[1]) == pytest.approx(0.1)
        assert nms(masks, np.array([0.9, 0.8]), 0.2) == [0, 1]

    def test_chain_keeps_ends(self):
        # A~B IoU .5, B~C IoU .5, A~C IoU 0; scores A > B > C -> keep {A, C}
        a = np.array([1, 1, 0, 0], dtype=bool)
        b = np.array([1, 1, 1, 1], dtype=bool)
        c = np.array([0, 0, 1, 1], dtype=bool)
        assert mask_iou(a, b) == 0.5 and mask_iou(b, c) == 0.5 and mask_iou(a, c) == 0.0
        assert nms(np.stack([a, b, c]), np.array([0.9, 0.8, 0.7]), 0.2) == [0, 2]

    def test_threshold_is_strict(self):
        a = np.array([1, 1, 0, 0], dtype=bool)
        b = np.array([1, 1, 1, 1], dtype=bool)
        assert nms(np.stack([a, b]), np.array([0.9, 0.8]), 0.5) == [0, 1]

    def test_score_tie_lower_index_first(self):
        masks = np.array([[1, 1, 0, 0], [1, 1, 0, 0]], dtype=bool)
        assert nms(masks, np.array([0.8, 0.8]), 0.2) == [0]


class TestSuperpointAlign:
    def test_fully_covered_superpoint_in(self):
        values = np.array([1.0, 1.0, 0.0, 0.0])
        spp = np.array([0, 0, 1, 1])
        assert superpoint_align(values, spp).tolist() == [True, True, False, False]

    def test_mean_below_half_out(self):
        values = np.array([0.4, 0.4])
        assert superpoint_align(values, np.array([0, 0])).tolist() == [False, False]

    def test_mixed_superpoints(self):
        values = np.array([0.7, 0.5, 0.3, 0.1])
        spp = np.array([0, 0, 1, 1])
        assert superpoint_align(values, spp).tolist() == [True, True, False, False]

    def test_missing_superpoints_binarizes(self):
        values = np.array([0.4, 0.7])
        assert superpoint_align(values, None).tolist() == [False, True]

    def test_output_constant_within_superpoint(self):
        rng = np.random.default_rng(0)
        values = rng.uniform(size=40)
        spp = rng.integers(0, 6, size=40)
        out = superpoint_align(values, spp)
        for s in np.unique(spp):
            assert np.unique(out[spp == s]).size == 1


class TestInfer:
    def test_pure_background_scene_empty(self, two_cluster_scene):
        config = tiny_config()
        model = oracle_model(config)
        model.params["point.sem_b"] = np.array([10.0, -10.0, 0.0, 0.0, 0.0])
        assert infer(two_cluster_scene, model, config) == []

    def test_oracle_params_segment_two_clusters(self, two_cluster_scene):
        config = tiny_config()
        model = oracle_model(config)
        preds = infer(two_cluster_scene, model, config)
        assert len(preds) == 2
        covered = set()
        for pred in preds:
            assert pred.class_id == 1
            ious = [
                mask_iou(pred.mask, two_cluster_scene.instance_mask(j))
                for j in range(two_cluster_scene.num_instances)
            ]
            assert max(ious) == 1.0
            covered.add(int(np.argmax(ious)))
        assert covered == {0, 1}

    def test_deterministic(self, two_cluster_scene):
        config = tiny_config()
        model = ModelParams.initialize(config, 12)
        a = infer(two_cluster_scene, model, config)
        b = infer(two_cluster_scene, model, config)
        assert len(a) == len(b)
        for pa, pb in zip(a, b):
            assert pa.score == pb.score
            assert np.array_equal(pa.mask, pb.mask)

    def test_scores_sorted_descending(self, two_cluster_scene):
        config = tiny_config()
        model = ModelParams.initialize(config, 12)
        preds = infer(two_cluster_scene, model, config)
        scores = [p.score for p in preds]
        assert scores == sorted(scores, reverse=True)

    def test_timings_reported(self, two_cluster_scene):
        config = tiny_config()
        model = ModelParams.initialize(config, 12)
        timings = {}
        infer(two_cluster_scene, model, config, timings=timings)
        assert set(timings) == {"encoder", "instance_encoder", "mask_decoder"}
        assert all(v >= 0.0 for v in timings.values())

    def test_geo_cue_off_still_runs(self, two_cluster_scene):
        config = tiny_config(layout_dims=(7, 8, 1), geo_cue="off")
        model = ModelParams.initialize(config, 4)
        preds = infer(two_cluster_scene, model, config)
        assert isinstance(preds, list)

    def test_early_late_full_pipeline_identical(self, two_cluster_scene):
        model = ModelParams.initialize(tiny_config(), 5)
        outs = []
        for mode in ("early", "late"):
            config = tiny_config(voxel_size=0.08, devoxelization=mode)
            outs.append(infer(two_cluster_scene, model, config))
        assert len(outs[0]) == len(outs[1])
        for pa, pb in zip(*outs):
            assert np.max(np.abs(pa.soft_mask - pb.soft_mask)) <= 1e-12
            assert pa.score == pb.score


class TestTraining:
    def test_zero_learning_rate_keeps_params(self):
        scenes = generate(GenConfig(num_scenes=2, points_per_scene=256, seed=3))
        config = tiny_config(learning_rate=0.0, epochs=2, batch_size=2)
        model, history = train(scenes, config, seed=1)
        reference = ModelParams.initialize(config, 1)
        for name in model.params:
            assert np.array_equal(model.params[name], reference.params[name]), name
        assert len(history) == 2

    def test_single_scene_overfit_decreases_instance_loss(self):
        scenes = generate(GenConfig(num_scenes=1, points_per_scene=256, seed=9))
        config = tiny_config(learning_rate=2e-3, epochs=10, batch_size=1)
        _, history = train(scenes, config, seed=2)
        inst = [
            h["cls_loss"] + h["box_loss"] + 5.0 * h["mask_loss"] + h["ms_loss"] for h in history
        ]
        assert all(b <= a + 1e-3 for a, b in zip(inst, inst[1:]))
        assert inst[-1] < inst[0]

    def test_deterministic_given_seed(self):
        scenes = generate(GenConfig(num_scenes=3, points_per_scene=256, seed=21))
        config = tiny_config(learning_rate=2e-3, epochs=2, batch_size=2)
        model_a, _ = train(scenes, config, seed=5)
        model_b, _ = train(scenes, config, seed=5)
        for name in model_a.params:
            assert np.array_equal(model_a.params[name], model_b.params[name]), name

    def test_divergence_aborts_with_diagnostic(self):
        scenes = generate(GenConfig(num_scenes=1, points_per_scene=256, seed=9))
        config = tiny_config(learning_rate=1e12, epochs=10, batch_size=1, grad_clip=0.0)
        with pytest.raises(RuntimeError, match="non-finite"):
            with np.errstate(all="ignore"):
                train(scenes, config, seed=2)

    def test_rmsprop_clip_and_step(self):
        params = {"w": np.array([1.0, 1.0])}
        opt = RmsProp(params, lr=0.1, decay=0.5, eps=1e-8, clip=1.0)
        opt.step({"w": np.array([30.0, 40.0])})  # norm 50 -> clipped to 1
        assert np.all(params["w"] < 1.0)
        assert np.all(params["w"] > 0.7)

    def test_gradient_report(self, two_cluster_scene):
        config = tiny_config()
        model = ModelParams.initialize(config, 7)
        report = scene_loss_report(two_cluster_scene, model, config)
        assert report.gradients is not None
        vector = report.gradient_vector()
        assert vector.shape == (model.num_parameters(),)
        assert np.all(np.isfinite(vector))
        assert np.any(vector != 0.0)


class TestSerialization:
    def test_round_trip(self, tmp_path):
        config = tiny_config()
        model = ModelParams.initialize(config, 11)
        path = tmp_path / "model.bin"
        save_model(path, model)
        loaded = load_model(path)
        assert loaded.d_model == model.d_model
        assert loaded.layout_dims == model.layout_dims
        for name in model.params:
            assert np.array_equal(loaded.params[name], model.params[name])

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTMODEL" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            load_model(path)

    def test_truncated(self, tmp_path):
        config = tiny_config()
        model = ModelParams.initialize(config, 11)
        path = tmp_path / "model.bin"
        save_model(path, model)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="truncated"):
            load_model(path)

    def test_default_config_for_roundtrip(self, tmp_path):
        config = tiny_config(layout_dims=(7, 8, 1), geo_cue="off")
        model = ModelParams.initialize(config, 2)
        path = tmp_path / "model.bin"
        save_model(path, model)
        loaded = load_model(path)
        rebuilt = default_config_for(loaded)
        assert rebuilt.geo_cue == "off"
        assert rebuilt.layout_dims == (7, 8, 1)

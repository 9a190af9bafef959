import json

import numpy as np
import pytest

from mmfusion.checkpoint import encode_params
from mmfusion.config import ABLATIONS
from mmfusion.errors import ConfigError, ContractError, DivergenceError
from mmfusion.features import FeatureDims, Video, generate_synthetic_dataset
from mmfusion.model import init_params
from mmfusion.train import (
    FrameTable,
    ablation_config,
    config_diff,
    cross_validate,
    evaluate,
    train,
    write_run,
)


def data(cfg):
    return generate_synthetic_dataset(cfg.synthetic_spec())


class TestFrameTable:
    def test_batch_matches_per_clip_windows(self, tiny):
        cfg = tiny()
        videos = data(cfg)
        table = FrameTable(videos, 3)
        refs = np.array([[0, 0], [2, 17], [5, 39]])
        batch = table.batch(refs)
        for row, (v, f) in enumerate(refs):
            idx = np.clip(np.arange(f - 3, f + 4), 0, len(videos[v]) - 1)
            np.testing.assert_array_equal(batch.windows["audio"][row], videos[v].audio[idx])
            np.testing.assert_array_equal(batch.static[row], videos[v].static[f])
            assert batch.expr[row] == videos[v].expr_labels[f]


class TestTrain:
    def test_zero_learning_rate_keeps_parameters(self, tiny):
        cfg = tiny(**{"optim.lr_max": 0.0})
        result = train(cfg, data(cfg))
        init = init_params(cfg.model_config(), cfg.seed)
        for k, p in init.items():
            assert result.params[k].tobytes() == p.value.tobytes()

    def test_same_seed_same_run(self, tiny):
        cfg = tiny()
        videos = data(cfg)
        ids = [v.video_id for v in videos]
        a = train(cfg, videos, ids[:6], ids[6:])
        b = train(cfg, videos, ids[:6], ids[6:])
        assert a.epoch_losses == b.epoch_losses
        assert encode_params(a.params) == encode_params(b.params)
        assert all(np.isfinite(a.epoch_losses))

    def test_au_task_with_remix(self, tiny):
        cfg = tiny("au", **{"remix.apply_to_au": True})
        videos = data(cfg)
        ids = [v.video_id for v in videos]
        result = train(cfg, videos, ids[:6], ids[6:])
        assert len(result.val_f1) == cfg.epochs
        assert result.evaluation.raw[0].labels.shape[1] == 12

    def test_nan_input_raises_divergence(self, tiny):
        cfg = tiny(**{"remix.enabled": False})
        videos = data(cfg)
        videos[0].audio[:] = np.nan
        with pytest.raises(DivergenceError) as info:
            train(cfg, videos)
        assert "step" in info.value.diagnostics

    def test_dims_mismatch(self, tiny):
        cfg = tiny()
        with pytest.raises(ContractError):
            train(cfg.replace(**{"model.d_e": 12}), data(cfg))

    def test_unknown_video_id(self, tiny):
        cfg = tiny()
        with pytest.raises(ContractError):
            train(cfg, data(cfg), ["nope"])


class TestEvaluate:
    def test_empty_split(self, tiny):
        cfg = tiny()
        with pytest.raises(ContractError):
            evaluate(init_params(cfg.model_config(), 0), [], cfg)

    def test_constant_predictions_smoothed_equals_raw(self, tiny):
        cfg = tiny()
        params = init_params(cfg.model_config(), 0)
        params["head.expr.l2.w"].value[...] = 0.0
        params["head.expr.l2.b"].value[...] = np.eye(8)[3]
        d = cfg.dims
        T = 30
        z = lambda n: np.random.default_rng(n).standard_normal((T, n)).astype(np.float32)
        video = Video("c", z(d.d_s), z(d.d_e), z(d.d_a), z(d.d_w), expr_labels=np.full(T, 3, np.int16))
        result = evaluate(params, [video], cfg)
        assert result.f1_raw.average == result.f1_smoothed.average
        np.testing.assert_array_equal(result.raw[0].labels, 3)

    def test_checkpoint_dims_mismatch(self, tiny):
        cfg = tiny()
        arrays = {k: p.value for k, p in init_params(cfg.model_config(), 0).items()}
        with pytest.raises(ContractError):
            evaluate(arrays, data(cfg), cfg.replace(**{"model.model_dim": 16}))

    def test_training_split_scores_at_least_validation(self, tiny):
        cfg = tiny(epochs=4, **{"synthetic.videos_per_class": 2, "synthetic.frames_per_video": 60, "optim.lr_max": 0.1})
        videos = data(cfg)
        ids = [v.video_id for v in videos]
        result = train(cfg, videos, ids[::2], ids[1::2])
        train_f1 = evaluate(result.params, videos[::2], cfg).f1_raw.average
        assert train_f1 >= result.evaluation.f1_raw.average


class TestCrossValidation:
    def test_reports_are_byte_identical(self, tiny, tmp_path):
        cfg = tiny()
        videos = data(cfg)
        paths_a = write_run(cross_validate(cfg, videos), tmp_path / "a")
        paths_b = write_run(cross_validate(cfg, videos), tmp_path / "b")
        for key in ("report", "folds", "ckpt0", "ckpt1"):
            assert paths_a[key].read_bytes() == paths_b[key].read_bytes()
        report = json.loads(paths_a["report"].read_text())
        assert report["schema_version"] == 1 and report["config_digest"] == cfg.digest()
        assert len(report["folds"]) == 2
        assert "wall_time_s" in json.loads(paths_a["timing"].read_text())

    def test_pooled_score_covers_every_video(self, tiny):
        cfg = tiny()
        videos = data(cfg)
        cv = cross_validate(cfg, videos)
        assert sum(cv.pooled_raw.support) == sum(len(v) for v in videos)


class TestAblation:
    @pytest.mark.parametrize("condition", ABLATIONS)
    def test_diff_touches_only_the_flagged_component(self, condition):
        from mmfusion.config import preset

        base = preset("ablation")
        diff = config_diff(base, ablation_config(base, condition))
        assert len(diff) == 1
        key = next(iter(diff))
        assert key in {"model.static_only", "model.modalities", "model.fusion"}
        assert ablation_config(base, condition).model_config().head_input_dim == base.model_config().head_input_dim

    def test_unknown_condition(self):
        from mmfusion.config import preset

        with pytest.raises(ConfigError):
            ablation_config(preset("ci"), "no_static")

import copy

import numpy as np
import pytest

from scenehier.data_model import (
    ClassCatalog,
    DataError,
    Hyperparameters,
    LabelHierarchy,
    TrainingSample,
    validate_dataset,
)
from scenehier.hierarchy import assign_subclasses, build_aggregation_matrix
from scenehier.network import CLASS_SPACE, SUBCLASS_SPACE, forward
from scenehier.schedules import (
    FREEZE_HEAD_ONLY,
    FREEZE_NONE,
    ScheduleReport,
    baseline_schedule,
    hierarchical_schedule,
    run_schedule,
    run_stage,
    sequential_schedule,
)

from conftest import striped_image, tiny_model


def toy_training_setup(n_contexts: int = 2):
    """Four-image two-class corpus with a simple 2x2 subclass hierarchy."""
    images = [
        striped_image("s0", 16, 16, (0, 1), scene="road"),
        striped_image("s1", 16, 16, (0, 1), scene="road"),
        striped_image("s2", 16, 16, (1, 0), scene="field"),
        striped_image("s3", 16, 16, (1, 0), scene="field"),
    ]
    dataset = validate_dataset(images, ClassCatalog(("a", "b"), (50, 50)))
    samples = []
    for img in images:
        for r in (4, 8, 12):
            for c in (4, 8, 12):
                samples.append(TrainingSample(img.id, (r, c), int(img.labels[r, c])))
    from scenehier.data_model import SceneNameProvenance

    hierarchy = LabelHierarchy(
        n_classes=2,
        parent=(0, 0, 1, 1),
        provenance=tuple(SceneNameProvenance(s) for s in ("field", "road", "field", "road")),
        common_classes=frozenset({0, 1}),
        rare_classes=frozenset(),
    )
    samples = assign_subclasses(samples, dataset.by_id, hierarchy, 9)
    hyper = Hyperparameters(patch_size=8, batch_size=6, lr0=0.05, R=9)
    return dataset, samples, hierarchy, hyper


class TestScheduleShapes:
    def test_four_step_sequence_and_freeze_pattern(self):
        stages = sequential_schedule(8, 3, (10, 10, 5, 10), include_step3=True)
        assert [s.name for s in stages] == [
            "subclass-head", "subclass-full", "class-head", "class-full",
        ]
        assert [s.freeze for s in stages] == [
            FREEZE_HEAD_ONLY, FREEZE_NONE, FREEZE_HEAD_ONLY, FREEZE_NONE,
        ]
        assert stages[0].head_action == ("replace", 8)
        assert stages[2].head_action == ("replace", 3)
        assert [s.label_space for s in stages] == [
            SUBCLASS_SPACE, SUBCLASS_SPACE, CLASS_SPACE, CLASS_SPACE,
        ]

    def test_three_step_variant_still_replaces_class_head(self):
        stages = sequential_schedule(8, 3, (10, 10, 10), include_step3=False)
        assert len(stages) == 3
        assert stages[-1].head_action == ("replace", 3)
        assert stages[-1].seed_tag == 4  # keeps its stream when step 3 is dropped

    def test_iteration_count_mismatch_rejected(self):
        with pytest.raises(DataError):
            sequential_schedule(8, 3, (10, 10), include_step3=True)

    def test_hierarchical_two_stages(self):
        W = build_aggregation_matrix(LabelHierarchy.identity(3))
        stages = hierarchical_schedule(W, (5, 5))
        assert stages[0].head_action[0] == "add_hierarchy"
        assert not stages[0].W_trainable
        assert stages[1].W_trainable

    def test_freeze_mask_length_matches_model(self):
        model = tiny_model()
        stage = sequential_schedule(4, 2, (1, 1, 1, 1))[0]
        mask = stage.freeze_mask(model)
        assert len(mask) == len(model.layers)
        assert mask[:-1] == [True] * (len(model.layers) - 1)
        assert mask[-1] is False


class TestStageExecution:
    def test_smoke_run_changes_only_permitted_tensors(self):
        dataset, samples, hierarchy, hyper = toy_training_setup()
        model = tiny_model(n_out=2, seed=5)
        stages = sequential_schedule(4, 2, (1, 1, 1, 1))
        report = ScheduleReport()
        for stage in stages:
            before = model.parameter_snapshot()
            run_stage(model, stage, samples, dataset, hyper, seed=7, report=report)
            after = model.parameter_snapshot()
            mask = stage.freeze_mask(model)
            for i, (b, a) in enumerate(zip(before, after)):
                if stage.head_action[0] == "replace" and i == len(model.layers) - 1:
                    continue  # replaced, not trained
                for k in b:
                    if mask[i]:
                        assert np.array_equal(b[k], a[k]), f"frozen layer {i} moved"
        assert len(report.rows) >= 4

    def test_zero_iterations_leaves_model_unchanged_except_head(self):
        dataset, samples, hierarchy, hyper = toy_training_setup()
        model = tiny_model(n_out=2, seed=6)
        before = model.parameter_snapshot()
        stages = sequential_schedule(4, 2, (0, 0, 0, 0))
        model, report = run_schedule(model, stages, samples, dataset, hyper, seed=1)
        after = model.parameter_snapshot()
        for b, a in zip(before[:-1], after[:-1]):
            for k in b:
                assert np.array_equal(b[k], a[k])
        assert model.n_outputs == 2  # final class head
        # Every executed stage still reports one loss row.
        assert {r[0] for r in report.rows} == {s.name for s in stages}

    def test_initial_loss_near_log_of_label_count(self):
        dataset, samples, hierarchy, hyper = toy_training_setup()
        model = tiny_model(n_out=2, seed=2)
        stages = sequential_schedule(4, 2, (1, 0, 0, 0))
        report = ScheduleReport()
        run_stage(model, stages[0], samples, dataset, hyper, seed=3, report=report)
        first = report.rows[0]
        assert abs(first[3] - np.log(4)) < 0.1 * np.log(4)

    def test_hierarchical_initial_loss_includes_class_term(self):
        dataset, samples, hierarchy, hyper = toy_training_setup()
        model = tiny_model(n_out=4, seed=2)
        W = build_aggregation_matrix(hierarchy)
        stages = hierarchical_schedule(W, (1, 0))
        report = ScheduleReport()
        run_stage(model, stages[0], samples, dataset, hyper, seed=3, report=report)
        first = report.rows[0]
        expected = np.log(4) + hyper.alpha * np.log(2)
        assert abs(first[3] - expected) < 0.1 * expected

    def test_subclass_stage_requires_assigned_labels(self):
        dataset, samples, hierarchy, hyper = toy_training_setup()
        bare = [TrainingSample(s.image_id, s.center, s.class_label) for s in samples]
        model = tiny_model(n_out=2)
        stage = sequential_schedule(4, 2, (1, 1, 1, 1))[0]
        with pytest.raises(DataError, match="subclass labels"):
            run_stage(model, stage, bare, dataset, hyper, seed=0, report=ScheduleReport())


class TestHierarchicalFreezeContract:
    def test_w_frozen_then_trained(self):
        dataset, samples, hierarchy, hyper = toy_training_setup()
        model = tiny_model(n_out=4, seed=9)
        W = build_aggregation_matrix(hierarchy)
        stages = hierarchical_schedule(W, (5, 5))
        report = ScheduleReport()
        run_stage(model, stages[0], samples, dataset, hyper, seed=11, report=report)
        assert np.array_equal(model.aggregation_W, W.W)  # still the 0/1 pattern
        run_stage(model, stages[1], samples, dataset, hyper, seed=11, report=report)
        assert not np.array_equal(model.aggregation_W, W.W)

    def test_both_ce_columns_recorded(self):
        dataset, samples, hierarchy, hyper = toy_training_setup()
        model = tiny_model(n_out=4, seed=9)
        stages = hierarchical_schedule(build_aggregation_matrix(hierarchy), (3, 3))
        _, report = run_schedule(model, stages, samples, dataset, hyper, seed=4)
        for row in report.rows:
            assert not np.isnan(row[4]) and not np.isnan(row[5])


class TestReproducibility:
    def test_identical_runs_produce_identical_parameters(self):
        dataset, samples, hierarchy, hyper = toy_training_setup()

        def go():
            model = tiny_model(n_out=2, seed=13)
            stages = sequential_schedule(4, 2, (8, 8, 4, 8))
            model, _ = run_schedule(model, stages, samples, dataset, hyper, seed=21)
            return model.parameter_snapshot()

        a, b = go(), go()
        for pa, pb in zip(a, b):
            for k in pa:
                assert np.array_equal(pa[k], pb[k])

    def test_identity_hierarchy_alpha_zero_matches_plain_run(self, rng):
        """With an identity hierarchy, alpha=0, and matched RNG tags the
        hierarchical stage must follow the plain class-label trajectory."""
        dataset, samples, _, _ = toy_training_setup()
        identity = LabelHierarchy.identity(2)
        samples_id = assign_subclasses(
            [TrainingSample(s.image_id, s.center, s.class_label) for s in samples],
            dataset.by_id, identity, 9,
        )
        hyper = Hyperparameters(patch_size=8, batch_size=6, lr0=0.05, alpha=0.0, R=9)

        plain = tiny_model(n_out=2, seed=33)
        hier = copy.deepcopy(plain)

        plain_stage = baseline_schedule(10)[0]
        run_stage(plain, plain_stage, samples_id, dataset, hyper, seed=55,
                  report=ScheduleReport())

        W = build_aggregation_matrix(identity)
        hier_stage = hierarchical_schedule(W, (10, 0))[0]
        run_stage(hier, hier_stage, samples_id, dataset, hyper, seed=55,
                  report=ScheduleReport())

        for pa, pb in zip(plain.parameter_snapshot(), hier.parameter_snapshot()):
            for k in pa:
                assert np.array_equal(pa[k], pb[k])

    def test_report_csv_round_trip_bytes(self, tmp_path):
        report = ScheduleReport()
        report.record("s", 0, 0.001, 1.5, 1.25, float("nan"))
        report.record("s", 10, 0.001, 1.25, 1.0, float("nan"))
        report.to_csv(tmp_path / "a.csv")
        report.to_csv(tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        text = (tmp_path / "a.csv").read_text()
        assert "stage,iteration,lr,total,subclass_ce,class_ce" in text

import numpy as np
import pytest

from time2box.data import Statement, TimeScope
from time2box.model import PROJECTOR_DM, ParameterStore, QueryPlan
from time2box.training import (
    Adam,
    CheckpointError,
    TrainConfig,
    TrainingDiverged,
    TrainingSample,
    Variant,
    batch_loss,
    check_dimensions,
    load_checkpoint,
    make_training_sample,
    plan_for_statement,
    query_weight,
    sample_entity_negatives,
    sample_time_negatives,
    save_checkpoint,
    smoothness,
    train,
)


from helpers import kb_from_lines


class TestVariant:
    def test_parse_and_roundtrip(self):
        v = Variant.parse("dm,si,tns")
        assert v.projector_kind == PROJECTOR_DM and v.use_si and v.use_tns and not v.use_tr
        assert Variant.decode(v.encode()) == v

    def test_unknown_name_rejected(self):
        with pytest.raises(ValueError, match="unknown variant"):
            Variant.parse("te,bogus")

    def test_te_dm_exclusive(self):
        with pytest.raises(ValueError, match="mutually exclusive"):
            Variant.parse("te,dm")


class TestTrainConfig:
    def test_tns_default_half(self):
        cfg = TrainConfig(k=16, variant=Variant.parse("te,tns"))
        assert cfg.time_negatives == 8

    def test_no_tns_means_zero(self):
        assert TrainConfig(k=16, m=5).time_negatives == 0

    def test_m_bounds(self):
        with pytest.raises(ValueError):
            TrainConfig(k=4, m=5, variant=Variant.parse("tns"))
        with pytest.raises(ValueError):
            TrainConfig(k=0)


class TestPlans:
    def test_closed_samples_inside_interval(self):
        stmt = Statement(0, 0, 1, TimeScope.closed(3, 9))
        rng = np.random.default_rng(0)
        for _ in range(50):
            plan = plan_for_statement(stmt, Variant(), rng)
            assert len(plan.time_projections) == 1
            assert 3 <= plan.time_projections[0] <= 9

    def test_si_two_sorted_endpoints_inside(self):
        stmt = Statement(0, 0, 1, TimeScope.closed(3, 9))
        rng = np.random.default_rng(0)
        for _ in range(50):
            plan = plan_for_statement(stmt, Variant.parse("te,si"), rng)
            t1, t2 = plan.time_projections
            assert 3 <= t1 <= t2 <= 9

    def test_half_open_uses_known_endpoint(self):
        rng = np.random.default_rng(0)
        p1 = plan_for_statement(Statement(0, 0, 1, TimeScope.right_open(4)), Variant(), rng)
        p2 = plan_for_statement(Statement(0, 0, 1, TimeScope.left_open(6)), Variant(), rng)
        assert p1.time_projections == (4,)
        assert p2.time_projections == (6,)

    def test_no_time_is_atemporal(self):
        plan = plan_for_statement(
            Statement(0, 0, 1, TimeScope.no_time()), Variant(), np.random.default_rng(0)
        )
        assert plan.time_projections == ()


@pytest.fixture
def three_entity_kb():
    # (a, r, e1, 5) is the only truth at t=5; entities: a, e1, e2, e3
    return kb_from_lines(
        [
            "a\tr\te1\t5\t5",
            "a\tr\te2\t0\t2",
            "e3\tr\te1\t0\t9",
        ]
    )


class TestEntityNegatives:
    def test_negatives_avoid_known_positives(self, three_entity_kb):
        kb = three_entity_kb
        stmt = kb.splits["train"][0]
        rng = np.random.default_rng(1)
        negs = sample_entity_negatives(stmt, 2, kb, rng, timestamps=(5,))
        e1 = kb.entities.id_of("e1")
        assert e1 not in negs
        assert len(negs) == len(set(negs)) == 2

    def test_exhaustion_returns_all_candidates(self, three_entity_kb):
        kb = three_entity_kb
        stmt = kb.splits["train"][0]
        # at t=5 only e1 is true; the other 3 entities are candidates
        negs = sample_entity_negatives(stmt, 3, kb, np.random.default_rng(0), timestamps=(5,))
        assert sorted(negs) == sorted(
            kb.entities.id_of(x) for x in ("a", "e2", "e3")
        )

    def test_universe_too_small(self, three_entity_kb):
        kb = three_entity_kb
        stmt = kb.splits["train"][0]
        with pytest.raises(ValueError, match="negatives"):
            sample_entity_negatives(stmt, 4, kb, np.random.default_rng(0), timestamps=(5,))

    def test_deterministic_with_seed(self, three_entity_kb):
        kb = three_entity_kb
        stmt = kb.splits["train"][0]
        a = sample_entity_negatives(stmt, 2, kb, np.random.default_rng(9), timestamps=(5,))
        b = sample_entity_negatives(stmt, 2, kb, np.random.default_rng(9), timestamps=(5,))
        assert a == b

    def test_atemporal_key_uses_atemporal_index(self):
        kb = kb_from_lines(["a\tr\tb\t-\t-", "a\tr\tc\t0\t1", "x\ty\tz\t0\t3"])
        stmt = kb.splits["train"][0]
        rng = np.random.default_rng(2)
        for _ in range(20):
            negs = sample_entity_negatives(stmt, 2, kb, rng, timestamps=())
            # b and c are both atemporal answers of (a, r)
            assert kb.entities.id_of("b") not in negs
            assert kb.entities.id_of("c") not in negs


class TestTimeNegatives:
    def make_kb(self):
        # axis years 0..9; (a, r, b) holds on [3, 6]
        return kb_from_lines(["a\tr\tb\t3\t6", "pad\tr\tpad2\t0\t9"])

    def test_closed_candidates_outside_interval(self):
        kb = self.make_kb()
        stmt = kb.splits["train"][0]
        rng = np.random.default_rng(0)
        for _ in range(20):
            for t in sample_time_negatives(stmt, 3, kb, rng):
                assert t < 3 or t > 6

    def test_right_open_strictly_before_start(self):
        kb = kb_from_lines(["a\tr\tb\t5\t-", "pad\tr\tpad2\t0\t9"])
        stmt = kb.splits["train"][0]
        negs = sample_time_negatives(stmt, 4, kb, np.random.default_rng(0))
        assert negs and all(t < 5 for t in negs)

    def test_left_open_strictly_after_end(self):
        kb = kb_from_lines(["a\tr\tb\t-\t4", "pad\tr\tpad2\t0\t9"])
        stmt = kb.splits["train"][0]
        negs = sample_time_negatives(stmt, 4, kb, np.random.default_rng(0))
        assert negs and all(t > 4 for t in negs)

    def test_right_open_at_axis_minimum_signals_fallback(self):
        kb = kb_from_lines(["a\tr\tb\t0\t-", "pad\tr\tpad2\t0\t9"])
        stmt = kb.splits["train"][0]
        assert sample_time_negatives(stmt, 4, kb, np.random.default_rng(0)) == []

    def test_excludes_true_timestamps_of_other_statements(self):
        # (a, r, b) instant at 5, but also true on [0, 2] via a second statement
        kb = kb_from_lines(["a\tr\tb\t5\t5", "a\tr\tb\t0\t2", "pad\tr\tpad2\t0\t9"])
        stmt = kb.splits["train"][0]
        rng = np.random.default_rng(0)
        for _ in range(20):
            for t in sample_time_negatives(stmt, 5, kb, rng):
                assert t not in (0, 1, 2, 5)

    def test_fallback_tops_up_with_entity_negatives(self):
        kb = kb_from_lines(["a\tr\tb\t0\t-", "pad\tr\tpad2\t0\t9"], n_entities=30)
        stmt = kb.splits["train"][0]
        cfg = TrainConfig(k=8, variant=Variant.parse("te,tns"), d=4)
        sample = make_training_sample(stmt, kb, cfg, np.random.default_rng(0))
        assert sample.negatives_times == []
        assert len(sample.negatives_entities) == 8


class TestQueryWeight:
    def test_atemporal_weight(self):
        kb = kb_from_lines(["a\tr\tb\t-\t-", "a\tr\tc\t-\t-", "a\tr\td\t0\t1"])
        stmt = kb.splits["train"][0]
        plan = QueryPlan(stmt.s, stmt.r)
        assert query_weight(stmt, plan, kb) == pytest.approx(1 / 3)

    def test_timed_weight_counts_answers_at_timestamp(self):
        kb = kb_from_lines(["a\tr\tb\t0\t5", "a\tr\tc\t3\t8"])
        stmt = kb.splits["train"][0]
        assert query_weight(stmt, QueryPlan(stmt.s, stmt.r, (4,)), kb) == pytest.approx(0.5)
        assert query_weight(stmt, QueryPlan(stmt.s, stmt.r, (1,)), kb) == pytest.approx(1.0)

    def test_si_weight_uses_intersection(self):
        kb = kb_from_lines(["a\tr\tb\t0\t5", "a\tr\tc\t3\t8"])
        stmt = kb.splits["train"][0]
        # answers valid at both 1 and 4: only b
        assert query_weight(stmt, QueryPlan(stmt.s, stmt.r, (1, 4)), kb) == pytest.approx(1.0)
        assert query_weight(stmt, QueryPlan(stmt.s, stmt.r, (3, 5)), kb) == pytest.approx(0.5)


class TestBatchLoss:
    def test_hand_computed_margin_loss(self):
        # positive at distance 0, single negative at distance 48, gamma=24
        ps = ParameterStore.initialize(1, 2, 1, 1, gamma=24.0, alpha=0.5)
        ps.arrays["entity_emb"][:] = [[0.0], [48.0]]
        ps.arrays["relation_emb"][:] = [[0.0]]
        ps.arrays["relation_off"][:] = [[0.0]]
        stmt = Statement(0, 0, 0, TimeScope.no_time())
        sample = TrainingSample(stmt, QueryPlan(0, 0), [1], [], weight=1.0)
        loss, _ = batch_loss([sample], ps)
        expected = 2 * np.log1p(np.exp(-24.0))
        assert float(loss.value) == pytest.approx(expected, rel=1e-9)
        assert float(loss.value) == pytest.approx(7.6e-11, rel=0.05)

    def test_weight_scales_loss(self):
        ps = ParameterStore.initialize(2, 3, 1, 1, rng=np.random.default_rng(0))
        stmt = Statement(0, 0, 1, TimeScope.no_time())
        s1 = TrainingSample(stmt, QueryPlan(0, 0), [2], [], weight=1.0)
        s2 = TrainingSample(stmt, QueryPlan(0, 0), [2], [], weight=0.25)
        l1, _ = batch_loss([s1], ps)
        l2, _ = batch_loss([s2], ps)
        assert float(l2.value) == pytest.approx(0.25 * float(l1.value), rel=1e-12)

    def test_smoothness_zero_for_identical_time_embeddings(self):
        ps = ParameterStore.initialize(3, 2, 1, 4)
        ps.arrays["time_emb"][:] = 0.7
        assert float(smoothness(ps).value) == 0.0

    def test_smoothness_hand_value(self):
        ps = ParameterStore.initialize(1, 2, 1, 3)
        ps.arrays["time_emb"][:] = [[0.0], [1.0], [3.0]]
        assert float(smoothness(ps).value) == pytest.approx(2.5, rel=1e-12)

    def test_smoothness_gradient_closed_form(self):
        from time2box import autodiff as ad

        rng = np.random.default_rng(7)
        n_times, d = 6, 3
        ps = ParameterStore.initialize(d, 2, 1, n_times, rng=rng)
        T = ps.arrays["time_emb"]
        tape = ad.Tape()
        loss = smoothness(ps, tape)
        gmap = ad.backward(tape, loss)
        scale = 2.0 / (n_times - 1)
        # interior rows: (2 t_i - t_{i-1} - t_{i+1}); one-sided at the ends
        for i in range(n_times):
            if i == 0:
                expected = scale * (T[0] - T[1])
            elif i == n_times - 1:
                expected = scale * (T[-1] - T[-2])
            else:
                expected = scale * (2 * T[i] - T[i - 1] - T[i + 1])
            np.testing.assert_allclose(gmap[("time_emb", i)], expected, rtol=1e-12)

    def test_smoothness_added_only_for_temporal_batches(self):
        ps = ParameterStore.initialize(2, 3, 1, 3, rng=np.random.default_rng(1))
        ps.arrays["time_emb"][:] = np.random.default_rng(2).normal(size=(3, 2))
        atempo = TrainingSample(
            Statement(0, 0, 1, TimeScope.no_time()), QueryPlan(0, 0), [2], [], 1.0
        )
        tempo = TrainingSample(
            Statement(0, 0, 1, TimeScope.instant(1)), QueryPlan(0, 0, (1,)), [2], [], 1.0
        )
        base, _ = batch_loss([atempo], ps, beta=0.5)
        with_reg, _ = batch_loss([tempo], ps, beta=0.5)
        lam = float(smoothness(ps).value)
        assert lam > 0
        # the atemporal-only batch carries no smoothness term
        no_beta_atempo, _ = batch_loss([atempo], ps, beta=0.0)
        assert float(base.value) == pytest.approx(float(no_beta_atempo.value), rel=1e-12)
        no_beta_tempo, _ = batch_loss([tempo], ps, beta=0.0)
        assert float(with_reg.value) == pytest.approx(
            float(no_beta_tempo.value) + 0.5 * lam, rel=1e-9
        )

    def test_time_negative_boxes_change_loss(self):
        ps = ParameterStore.initialize(4, 5, 2, 6, rng=np.random.default_rng(4))
        stmt = Statement(0, 0, 1, TimeScope.closed(1, 4))
        with_time = TrainingSample(stmt, QueryPlan(0, 0, (2,)), [2, 3], [0, 5], 1.0)
        entity_only = TrainingSample(stmt, QueryPlan(0, 0, (2,)), [2, 3], [], 1.0)
        l1, _ = batch_loss([with_time], ps)
        l2, _ = batch_loss([entity_only], ps)
        assert float(l1.value) != pytest.approx(float(l2.value), rel=1e-9)

    def test_gradients_match_finite_differences_each_variant(self):
        from time2box import autodiff as ad

        kb = kb_from_lines(
            [
                "a\tr1\tb\t1\t4",
                "a\tr2\tc\t2\t2",
                "b\tr1\ta\t0\t-",
                "c\tr2\tb\t-\t-",
                "c\tr1\ta\t-\t5",
            ],
            n_entities=7,
        )
        for spec in ("te", "dm", "te,tr,si,tns"):
            cfg = TrainConfig(d=6, k=3, seed=0, variant=Variant.parse(spec), beta=0.1)
            ps = ParameterStore.initialize(
                6, kb.n_entities, kb.n_relations, kb.axis.length, rng=np.random.default_rng(5)
            )
            rng = np.random.default_rng(6)
            batch = [make_training_sample(s, kb, cfg, rng) for s in kb.splits["train"]]

            def loss_fn():
                loss, tape = batch_loss(batch, ps, beta=cfg.beta)
                return loss.value, ad.backward(tape, loss)

            report = ad.finite_diff_check(
                loss_fn, ps.arrays, eps=1e-4, samples=80, rng=np.random.default_rng(7)
            )
            assert report.max_rel_error < 1e-4, (spec, report.worst)

    def test_empty_batch_rejected(self):
        ps = ParameterStore.initialize(2, 2, 1, 1)
        with pytest.raises(ValueError):
            batch_loss([], ps)

    def test_tape_replay_reproduces_loss(self):
        ps = ParameterStore.initialize(3, 4, 2, 5, rng=np.random.default_rng(8))
        stmt = Statement(0, 1, 2, TimeScope.instant(3))
        sample = TrainingSample(stmt, QueryPlan(0, 1, (3,)), [1, 3], [0], 0.5)
        loss, tape = batch_loss([sample], ps, beta=0.2)
        assert np.array_equal(tape.replay(), loss.value)


class TestAdam:
    def test_minimizes_quadratic(self):
        arrays = {"x": np.array([[5.0, -3.0]])}
        opt = Adam(lr=0.1)
        for _ in range(500):
            opt.step(arrays, {"x": 2 * arrays["x"]})
        assert np.all(np.abs(arrays["x"]) < 1e-3)

    def test_untouched_arrays_keep_momentum_semantics(self):
        arrays = {"x": np.ones((1, 1)), "y": np.ones((1, 1))}
        opt = Adam(lr=0.01)
        opt.step(arrays, {"x": np.ones((1, 1))})
        y_after_first = arrays["y"].copy()
        opt.step(arrays, {"x": np.ones((1, 1))})
        # y has zero gradient and zero momentum: it must not move
        np.testing.assert_array_equal(arrays["y"], y_after_first)


@pytest.fixture(scope="module")
def overfit_kb():
    return kb_from_lines(
        [
            "a\tr\tb\t0\t3",
            "a\tr\tc\t4\t7",
            "b\tr\ta\t2\t2",
            "c\tr\td\t5\t-",
            "d\tr\ta\t-\t6",
            "d\tr\tb\t-\t-",
            "b\tr\td\t1\t6",
            "c\tr\ta\t0\t0",
        ],
        valid_lines=["a\tr\tb\t1\t1"],
        n_entities=8,
    )


class TestTrain:
    def test_overfits_small_batch(self, overfit_kb):
        cfg = TrainConfig(d=16, k=4, lr=0.01, batch=8, steps=500, seed=3, eval_every=100)
        params, log = train(overfit_kb, cfg)
        losses = [e.loss for e in log]
        assert losses[-1] < 0.1 * losses[0]
        assert params.param_count() == 16 * (8 + 2 * 8 + 2 * 1) + 4 * 16 * 16

    def test_loss_decreases_after_smoothing(self, overfit_kb):
        cfg = TrainConfig(d=16, k=4, lr=0.01, batch=8, steps=500, seed=3, eval_every=50)
        _, log = train(overfit_kb, cfg)
        # log entries carry the mean loss over each 50-step window
        smoothed = [e.loss for e in log][1:]
        assert np.all(np.diff(smoothed) < 0)

    def test_seeded_runs_identical(self, overfit_kb):
        cfg = TrainConfig(d=8, k=3, lr=0.01, batch=8, steps=60, seed=11, eval_every=20)
        p1, log1 = train(overfit_kb, cfg)
        p2, log2 = train(overfit_kb, cfg)
        assert [e.loss for e in log1] == [e.loss for e in log2]
        for name in p1.arrays:
            np.testing.assert_array_equal(p1.arrays[name], p2.arrays[name])

    def test_offsets_nonnegative_after_training(self, overfit_kb):
        cfg = TrainConfig(d=8, k=3, lr=0.05, batch=8, steps=80, seed=1, eval_every=80)
        params, _ = train(overfit_kb, cfg)
        assert np.all(params.arrays["relation_off"] >= 0)
        assert np.all(params.arrays["time_off"] >= 0)

    def test_smoothness_regularizer_reduces_lambda(self, overfit_kb):
        base = TrainConfig(d=8, k=3, lr=0.01, batch=8, steps=300, seed=5, eval_every=300)
        p0, _ = train(overfit_kb, base)
        p1, log1 = train(overfit_kb, TrainConfig(**{**base.__dict__, "beta": 0.1}))
        lam0 = float(smoothness(p0).value)
        lam1 = float(smoothness(p1).value)
        assert lam1 < lam0
        assert log1[-1].smoothness is not None

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self, overfit_kb):
        cfg = TrainConfig(
            d=4, k=2, lr=1e160, batch=8, steps=5, seed=0, eval_every=5,
            variant=Variant.parse("dm"),
        )
        with pytest.raises(TrainingDiverged, match="step"):
            train(overfit_kb, cfg)


class TestCheckpoint:
    def test_round_trip_precision(self, tmp_path):
        ps = ParameterStore.initialize(64, 20, 6, 10, gamma=24.0, rng=np.random.default_rng(0))
        path = tmp_path / "model.t2b"
        save_checkpoint(ps, path, Variant.parse("te,tns"))
        loaded, variant = load_checkpoint(path)
        assert variant == Variant.parse("te,tns")
        assert loaded.gamma == ps.gamma and loaded.alpha == ps.alpha
        for name in ps.arrays:
            diff = np.abs(loaded.arrays[name] - ps.arrays[name]).max()
            assert diff <= 6e-8

    def test_corrupt_magic(self, tmp_path):
        path = tmp_path / "bad.t2b"
        ps = ParameterStore.initialize(4, 3, 2, 2)
        save_checkpoint(ps, path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"XXXX"
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_truncation(self, tmp_path):
        path = tmp_path / "trunc.t2b"
        ps = ParameterStore.initialize(4, 3, 2, 2)
        save_checkpoint(ps, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_dimension_mismatch_vs_kb(self, tmp_path, overfit_kb):
        ps = ParameterStore.initialize(4, 99, 2, 8)
        with pytest.raises(CheckpointError, match=r"\|E\| 99"):
            check_dimensions(ps, overfit_kb)

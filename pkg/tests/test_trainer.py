from __future__ import annotations

import random

import pytest

from scenarios import (
    COMPRESS_MARKER,
    REVISION_MARKER,
    WRONG_ANSWER,
    correct_rule,
    delayed_acceptance_script,
    lastletter_records,
    lastletter_task,
    load_lastletter_dataset,
    staged_acceptance_script,
    teachable_script,
    wrong_rule,
)

from langprog.backend import BackendError, ChatBackend, MockBackend, MockRule, MockScript
from langprog.grading import GradeReason
from langprog.model import (
    AnswerKind,
    Program,
    RevisionCandidate,
    StopReason,
    Task,
    TrainerConfig,
    TrainState,
    load_checkpoint,
    read_history,
    rng_state_to_json,
    save_checkpoint,
)
from langprog.trainer import (
    TrainAbort,
    collect_wrong_examples,
    compress_program,
    generate_candidate,
    predict_batch,
    prepare_splits,
    recent_average,
    select_revision,
    should_stop,
    train,
    update_program,
    verify_candidate,
)

TASK = lastletter_task()


def mk_samples(records):
    from langprog.model import Sample

    return [Sample(id=r["id"], question=r["question"], answer=r["answer"]) for r in records]


def config(**overrides) -> TrainerConfig:
    defaults = dict(rng_seed=7, max_concurrency=4)
    defaults.update(overrides)
    return TrainerConfig(**defaults)


def test_predict_batch_all_correct():
    records = lastletter_records(4)
    samples = mk_samples(records)
    script = MockScript(
        [MockRule(match=r["question"], response=f"The answer is {r['answer']}") for r in records]
    )
    outcome = predict_batch(samples, Program(), TASK, MockBackend(script), config(), step=1)
    assert outcome.wrong == ()
    assert outcome.batch_accuracy == 100.0


def test_predict_batch_one_wrong_of_four():
    records = lastletter_records(4)
    samples = mk_samples(records)
    rules = [
        MockRule(match=records[0]["question"], response=WRONG_ANSWER),
    ] + [MockRule(match=r["question"], response=f"The answer is {r['answer']}") for r in records[1:]]
    outcome = predict_batch(samples, Program(), TASK, MockBackend(MockScript(rules)), config(), step=1)
    assert len(outcome.wrong) == 1
    assert outcome.wrong[0].sample.id == records[0]["id"]
    assert outcome.batch_accuracy == 75.0


def test_predict_batch_pairs_outputs_under_concurrency():
    records = lastletter_records(8)
    samples = mk_samples(records)
    rules = [
        MockRule(match=r["question"], response=f"sentinel says the answer is {r['answer']}")
        for r in records
    ]
    outcome = predict_batch(
        samples, Program(), TASK, MockBackend(MockScript(rules)), config(max_concurrency=8), step=1
    )
    for sample, output, result in outcome.predictions:
        assert sample.answer in output
        assert result.correct


def test_collect_wrong_examples_keeps_outputs():
    records = lastletter_records(4)
    samples = mk_samples(records)
    rules = [MockRule(match=r["question"], response=WRONG_ANSWER) for r in records]
    outcome = predict_batch(samples, Program(), TASK, MockBackend(MockScript(rules)), config(), step=1)
    wrong = collect_wrong_examples(outcome)
    assert len(wrong) == 4
    assert all(w.prediction == WRONG_ANSWER for w in wrong)
    assert list(wrong) == list(outcome.wrong)


def test_collect_includes_extraction_failures():
    task = Task(name="nums", answer_kind=AnswerKind.NUMERIC)
    from langprog.model import Sample

    samples = [Sample(id="n1", question="What is 1+1?", answer="2")]
    script = MockScript([MockRule(match="1+1", response="no digits here at all")])
    outcome = predict_batch(samples, Program(), task, MockBackend(script), config(), step=1)
    assert len(outcome.wrong) == 1
    assert outcome.predictions[0][2].reason is GradeReason.EXTRACTION_FAILED


def wrong_examples(records):
    from langprog.model import WrongExample

    return [
        WrongExample(sample=s, prediction=WRONG_ANSWER, extracted="xyzzyplugh")
        for s in mk_samples(records)
    ]


def generation_script():
    return MockScript(
        [
            MockRule(match=COMPRESS_MARKER, response="compressed solutions"),
            MockRule(match=REVISION_MARKER, response="raw solutions"),
        ]
    )


def test_generate_candidate_two_calls_and_clamped_draw():
    wrong = wrong_examples(lastletter_records(2))
    backend = MockBackend(generation_script())
    candidate = generate_candidate(
        wrong, Program(), TASK, config(), backend, random.Random(1)
    )
    assert candidate is not None
    assert len(candidate.seed_errors) == 2  # clamped to |wrong| < m
    assert len(backend.calls) == 2
    assert candidate.raw == "raw solutions"
    assert candidate.compressed == "compressed solutions"


def test_generate_candidate_draws_differ_across_calls():
    wrong = wrong_examples(lastletter_records(6))
    backend = MockBackend(generation_script())
    rng = random.Random(3)
    first = generate_candidate(wrong, Program(), TASK, config(), backend, rng)
    second = generate_candidate(wrong, Program(), TASK, config(), backend, rng)
    assert first.seed_errors != second.seed_errors
    assert len(first.seed_errors) == 3


def test_generate_candidate_discards_empty_completion():
    wrong = wrong_examples(lastletter_records(2))
    script = MockScript([MockRule(match=REVISION_MARKER, response="")])
    candidate = generate_candidate(
        wrong, Program(), TASK, config(), MockBackend(script), random.Random(1)
    )
    assert candidate is None


def test_verify_candidate_scores_and_leaves_program_alone():
    validation_records = lastletter_records(50, seed=5)
    validation = mk_samples(validation_records)
    token = "RULE-V"
    rules = [correct_rule(token, r["question"], r["answer"]) for r in validation_records[:31]]
    rules += [wrong_rule(r["question"]) for r in validation_records]
    backend = MockBackend(MockScript(rules))
    program = Program(blocks=("existing block",))
    candidate = RevisionCandidate(raw="raw", compressed=token)
    checked = verify_candidate(candidate, program, validation, TASK, backend, config())
    assert checked.val_accuracy == 62.0
    assert program.blocks == ("existing block",)  # pseudo-update only
    assert candidate.val_accuracy is None


def test_verify_candidate_backend_failure_excludes():
    class Exploding(ChatBackend):
        model = "boom"

        def complete(self, request):
            raise BackendError("down")

    validation = mk_samples(lastletter_records(3))
    candidate = RevisionCandidate(raw="raw", compressed="text")
    assert verify_candidate(candidate, Program(), validation, TASK, Exploding(), config()) is None


def cand(acc: float | None, tag: str = "c") -> RevisionCandidate:
    return RevisionCandidate(raw=f"{tag} raw", compressed=f"{tag} compressed", val_accuracy=acc)


def test_select_revision_argmax_over_gated_set():
    candidates = [cand(50.0), cand(62.0, "winner"), cand(58.0), cand(51.0), cand(49.0)]
    chosen = select_revision(candidates, (55.0,), config())
    assert chosen is not None and chosen.val_accuracy == 62.0
    assert chosen.compressed == "winner compressed"


def test_select_revision_none_when_all_below_gate():
    candidates = [cand(v) for v in (55.9, 55.0, 54.2, 50.0, 55.5)]
    assert select_revision(candidates, (55.0,), config()) is None


def test_select_revision_inclusive_boundary():
    chosen = select_revision([cand(56.0)], (55.0,), config())
    assert chosen is not None


def test_select_revision_tie_goes_to_earliest():
    first, second = cand(62.0, "first"), cand(62.0, "second")
    chosen = select_revision([first, second], (55.0,), config())
    assert chosen is first


def test_select_revision_uses_recent_window():
    # Only the last three entries count: mean(50, 60, 70) = 60.
    perfs = (10.0, 20.0, 50.0, 60.0, 70.0)
    assert recent_average(perfs, 3) == 60.0
    assert select_revision([cand(60.5)], perfs, config()) is None
    assert select_revision([cand(61.0)], perfs, config()) is not None


def test_select_revision_skips_unverified():
    assert select_revision([cand(None)], (0.0,), config()) is None


def fresh_state(**overrides) -> TrainState:
    rng = random.Random(0)
    defaults = dict(
        step=5,
        epoch=0,
        program=Program(origin_model="mock-model"),
        recorded_perfs=(48.0,),
        stagnant_batches=3,
        updates_since_compression=2,
        rng_state=rng_state_to_json(rng.getstate()),
    )
    defaults.update(overrides)
    return TrainState(**defaults)


def test_update_program_commits_everything(tmp_path):
    state = fresh_state()
    accepted = RevisionCandidate(raw="raw text", compressed="new block", val_accuracy=56.0)
    updated = update_program(state, accepted, tmp_path)
    assert updated.program.blocks == ("new block",)
    assert updated.recorded_perfs == (48.0, 56.0)
    assert updated.stagnant_batches == 0
    assert updated.updates_since_compression == 3
    assert load_checkpoint(tmp_path) == updated
    records = read_history(tmp_path)
    assert len(records) == 1
    assert records[0]["kind"] == "revision"
    assert records[0]["step"] == 5
    assert records[0]["val_accuracy"] == 56.0
    assert records[0]["raw"] == "raw text"


def test_should_stop_rules():
    assert should_stop(fresh_state(stagnant_batches=10), config()) == (True, StopReason.STAGNATION)
    assert should_stop(fresh_state(epoch=10), config()) == (True, StopReason.EPOCHS_EXHAUSTED)
    assert should_stop(fresh_state(stagnant_batches=9), config()) == (False, None)


def compression_state(tmp_path, last=80.0):
    state = fresh_state(
        program=Program(blocks=("OLD-BLOCK",), origin_model="mock-model", history_len=3),
        recorded_perfs=(0.0, 30.0, last),
        updates_since_compression=3,
    )
    save_checkpoint(state, tmp_path)
    return state


def test_compress_program_accepts_small_drop(tmp_path):
    validation_records = lastletter_records(200, seed=9)
    validation = mk_samples(validation_records)
    rules = [MockRule(match=COMPRESS_MARKER, response="SUMMARY-T")]
    rules += [correct_rule("SUMMARY-T", r["question"], r["answer"]) for r in validation_records[:159]]
    rules += [wrong_rule(r["question"]) for r in validation_records]
    backend = MockBackend(MockScript(rules))
    state = compression_state(tmp_path)

    out = compress_program(state, TASK, backend, validation, config(), tmp_path)
    assert out.program.blocks == ("SUMMARY-T",)
    assert out.recorded_perfs[-1] == 79.5  # dropped 0.5 <= tolerance 1.0
    assert out.updates_since_compression == 0
    records = read_history(tmp_path)
    assert records[-1]["kind"] == "compression"


def test_compress_program_exhaustion_keeps_original(tmp_path):
    validation_records = lastletter_records(10, seed=9)
    validation = mk_samples(validation_records)
    rules = [MockRule(match=COMPRESS_MARKER, response="BAD-SUMMARY")]
    rules += [wrong_rule(r["question"]) for r in validation_records]
    backend = MockBackend(MockScript(rules))
    state = compression_state(tmp_path)

    out = compress_program(state, TASK, backend, validation, config(), tmp_path)
    assert out.program.blocks == ("OLD-BLOCK",)
    assert out.recorded_perfs == state.recorded_perfs
    assert out.updates_since_compression == 0  # retried only after more updates
    compression_calls = [c for c in backend.calls if COMPRESS_MARKER in c.user]
    assert len(compression_calls) == 3


def test_compress_program_requires_armed_counter(tmp_path):
    state = fresh_state(updates_since_compression=1)
    with pytest.raises(ValueError):
        compress_program(state, TASK, MockBackend(MockScript([])), mk_samples(lastletter_records(2)), config(), tmp_path)


def teachable_setup(tmp_path, n=60, batch_size=4, validation_multiplier=2, **cfg):
    dataset = load_lastletter_dataset(tmp_path, n)
    records = {r["id"]: r for r in lastletter_records(n)}
    conf = config(batch_size=batch_size, validation_multiplier=validation_multiplier, **cfg)
    script = teachable_script(list(records.values()))
    return dataset, records, conf, script


def test_train_teachable_run_accepts_one_revision(tmp_path):
    dataset, records, conf, script = teachable_setup(tmp_path)
    backend = MockBackend(script)
    run_dir = tmp_path / "run"
    state = train(TASK, dataset, conf, backend, run_dir)

    assert state.stopped and state.stop_reason is StopReason.STAGNATION
    revisions = [r for r in read_history(run_dir) if r["kind"] == "revision"]
    assert len(revisions) == 1
    assert "CONCAT-RULE" in state.program.rendered
    assert state.recorded_perfs == (0.0, 100.0)
    assert (run_dir / "program.txt").read_text() == state.program.rendered


def test_train_hopeless_run_stops_at_stagnation_limit(tmp_path):
    n = 40
    dataset = load_lastletter_dataset(tmp_path, n)
    records = lastletter_records(n)
    rules = [
        MockRule(match=COMPRESS_MARKER, response="USELESS"),
        MockRule(match=REVISION_MARKER, response="useless raw"),
    ] + [wrong_rule(r["question"]) for r in records]
    backend = MockBackend(MockScript(rules))
    conf = config(batch_size=4, validation_multiplier=2)

    state = train(TASK, dataset, conf, backend, tmp_path / "run")
    assert state.stop_reason is StopReason.STAGNATION
    assert state.stagnant_batches == 10
    assert state.step == 10  # exactly ten consecutive update-free batches
    assert state.program.is_empty
    assert [r["kind"] for r in read_history(tmp_path / "run")] == ["baseline"]


def test_train_acceptance_resets_stagnation_counter(tmp_path):
    n = 60
    dataset = load_lastletter_dataset(tmp_path, n)
    conf = config(batch_size=2, validation_multiplier=5)
    plan, pool = prepare_splits(dataset, conf)
    all_records = lastletter_records(n)
    by_id = {r["id"]: r for r in all_records}
    validation_records = [by_id[i] for i in plan.validation_ids]

    script = delayed_acceptance_script(
        all_records,
        validation_records,
        useless_batches=8,
        per_batch_candidates=conf.candidate_count,
        token_coverage=5,
    )
    state = train(TASK, dataset, conf, MockBackend(script), tmp_path / "run")

    revisions = [r for r in read_history(tmp_path / "run") if r["kind"] == "revision"]
    assert len(revisions) == 1
    assert revisions[0]["step"] == 9  # accepted on the ninth batch
    assert state.stop_reason is StopReason.STAGNATION
    assert state.step == 19  # nine batches + acceptance + ten stagnant batches
    assert state.recorded_perfs == (0.0, 50.0)


def test_train_compression_fires_on_third_update_only(tmp_path):
    n = 20
    dataset = load_lastletter_dataset(tmp_path, n)
    all_records = lastletter_records(n)
    test_records = lastletter_records(4, seed=99, id_prefix="llt")
    test_path = tmp_path / "test.jsonl"
    from scenarios import write_dataset

    write_dataset(test_path, test_records)
    from langprog.data import load_dataset

    test_dataset = load_dataset(test_path, TASK)

    conf = config(batch_size=2, validation_multiplier=5, epochs=1)
    plan, pool = prepare_splits(dataset, conf, test_dataset)
    by_id = {r["id"]: r for r in all_records + test_records}
    validation_records = [by_id[i] for i in plan.validation_ids]
    assert len(validation_records) == 10
    assert len(plan.train_ids) == 10  # five batches of two

    script = staged_acceptance_script(
        all_records + test_records,
        validation_records,
        coverage={"RULE-A": 3, "RULE-B": 5, "RULE-C": 8},
        per_batch_candidates=conf.candidate_count,
        summary_coverage=8,
    )
    backend = MockBackend(script)
    state = train(TASK, dataset, conf, backend, tmp_path / "run", test_dataset=test_dataset)

    history = read_history(tmp_path / "run")
    kinds = [r["kind"] for r in history]
    assert kinds == ["baseline", "revision", "revision", "revision", "compression"]
    assert state.recorded_perfs == (0.0, 30.0, 50.0, 80.0, 80.0)
    assert state.program.blocks == ("SUMMARY-GOOD",)
    assert state.updates_since_compression == 0

    # The whole-program compression prompt embeds all three learned blocks;
    # it must be issued exactly once, and only after the third acceptance.
    program_compressions = [
        i
        for i, call in enumerate(backend.calls)
        if COMPRESS_MARKER in call.user and "RULE-A" in call.user and "RULE-B" in call.user
    ]
    assert len(program_compressions) == 1
    revision_compressions = [
        i
        for i, call in enumerate(backend.calls)
        if COMPRESS_MARKER in call.user and i not in program_compressions
    ]
    assert len(revision_compressions) == 25  # 5 error batches x K=5
    # After the third acceptance (15 candidate compressions), before batch 4.
    assert program_compressions[0] > revision_compressions[14]
    assert program_compressions[0] < revision_compressions[15]
    assert state.stop_reason is StopReason.EPOCHS_EXHAUSTED


def test_train_candidate_call_accounting(tmp_path):
    # n=64 -> 48 train / 8 validation -> pool of 40, ten full batches per epoch.
    dataset, records, conf, script = teachable_setup(tmp_path, n=64, batch_size=4)
    backend = MockBackend(script)
    train(TASK, dataset, conf, backend, tmp_path / "run")

    validation_size = conf.batch_size * conf.validation_multiplier
    revision_calls = [c for c in backend.calls if REVISION_MARKER in c.user]
    compression_calls = [c for c in backend.calls if COMPRESS_MARKER in c.user]
    assert len(revision_calls) == conf.candidate_count  # one error batch
    assert len(compression_calls) == conf.candidate_count
    # Baseline sweep + 5 verification sweeps + final batch predictions all ride
    # on guided prompts; check the verification volume precisely.
    guided = [c for c in backend.calls if "Let's think step by step" in c.user]
    batches_processed = 11  # 1 error batch + 10 stagnant batches
    expected_guided = (
        validation_size  # baseline
        + conf.candidate_count * validation_size  # K verification sweeps
        + batches_processed * conf.batch_size
    )
    assert len(guided) == expected_guided


class FlakyBackend(ChatBackend):
    """Delegates to a mock but raises one BackendError at a chosen call index."""

    def __init__(self, inner: MockBackend, fail_at: int):
        self.inner = inner
        self.fail_at = fail_at
        self.count = 0
        self.model = inner.model
        self.endpoint = inner.endpoint

    def complete(self, request):
        self.count += 1
        if self.count == self.fail_at:
            raise BackendError("injected transport failure")
        return self.inner.complete(request)


def test_train_abort_then_resume_matches_uninterrupted_run(tmp_path):
    n = 60
    dataset = load_lastletter_dataset(tmp_path, n)
    records = lastletter_records(n)
    conf = config(batch_size=4, validation_multiplier=2)

    straight_dir = tmp_path / "straight"
    straight = train(TASK, dataset, conf, MockBackend(teachable_script(records)), straight_dir)

    resumed_dir = tmp_path / "resumed"
    flaky = FlakyBackend(MockBackend(teachable_script(records)), fail_at=75)
    with pytest.raises(TrainAbort, match="--resume"):
        train(TASK, dataset, conf, flaky, resumed_dir)
    mid = load_checkpoint(resumed_dir)
    assert not mid.stopped

    resumed = train(
        TASK, dataset, conf, MockBackend(teachable_script(records)), resumed_dir, resume=True
    )
    assert resumed.program.rendered == straight.program.rendered
    assert resumed.recorded_perfs == straight.recorded_perfs
    assert resumed.step == straight.step
    assert resumed.stop_reason == straight.stop_reason
    assert (resumed_dir / "history.jsonl").read_bytes() == (straight_dir / "history.jsonl").read_bytes()
    assert (resumed_dir / "program.txt").read_bytes() == (straight_dir / "program.txt").read_bytes()


def test_train_epochs_exhausted_when_everything_correct(tmp_path):
    n = 30
    dataset = load_lastletter_dataset(tmp_path, n)
    records = lastletter_records(n)
    rules = [MockRule(match=r["question"], response=f"The answer is {r['answer']}") for r in records]
    conf = config(batch_size=4, validation_multiplier=1, epochs=2, stagnation_limit=50)
    state = train(TASK, dataset, conf, MockBackend(MockScript(rules)), tmp_path / "run")
    assert state.stop_reason is StopReason.EPOCHS_EXHAUSTED
    assert state.epoch == 2
    assert state.program.is_empty

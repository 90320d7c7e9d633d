from __future__ import annotations

import dataclasses
import random
import time

import pytest

from dagdoc import example_flow_path
from dagdoc.errors import NotFound, NotResumable, UnknownPlaceholder, UpstreamNotRun
from dagdoc.executor import bind_template, execute_run, resume_run
from dagdoc.flowspec import load_flow, validate_dag

from conftest import flow_from, random_edges

DIAMOND = """\
flow Diamond
step a
  exec "true"
step b after a
  exec "true"
step c after a
  exec "true"
step d after b, c
  exec "true"
"""


def artifact_ids(run) -> dict[str, list[tuple[str, str]]]:
    return {name: [(a.name, a.object) for a in t.artifacts] for name, t in run.tasks.items()}


def statuses(run) -> dict[str, str]:
    return {name: t.status for name, t in run.tasks.items()}


# -- template binding --------------------------------------------------------

BINDING = """\
flow Bind
param lr float default 0.05
input data file "data.txt"
step train
  exec "printf 'w=1 b=0' > model.txt"
  out model "model.txt"
step use after train
  exec "cat {artifact.train.model}"
step side
  exec "true"
"""


@pytest.fixture
def bound(store, tmp_path):
    (tmp_path / "data.txt").write_text("payload\n")
    flow = flow_from(BINDING)
    run = store.create_run(flow, base_dir=tmp_path)
    return flow, run


def test_bind_param_and_run_id(store, bound):
    flow, run = bound
    assert bind_template("train --lr {param.lr}", run, flow) == "train --lr 0.05"
    assert bind_template("id={run.id}", run, flow) == f"id={run.run_id}"
    assert bind_template("no placeholders {here}", run, flow) == "no placeholders {here}"


def test_bind_input_materializes(store, bound):
    flow, run = bound
    path = bind_template("{input.data}", run, flow, store=store, quote=False)
    assert open(path).read() == "payload\n"


@pytest.mark.parametrize("text", ["{param.nope}", "{input.nope}", "{artifact.train.nope}", "{artifact.ghost.model}", "{env.HOME}", "{run.name}"])
def test_unknown_placeholder(store, bound, text):
    flow, run = bound
    with pytest.raises(UnknownPlaceholder) as info:
        bind_template("x " + text, run, flow, store=store)
    assert info.value.position == 2


def test_artifact_before_upstream_ran(store, bound):
    flow, run = bound
    with pytest.raises(UpstreamNotRun):
        bind_template("{artifact.train.model}", run, flow, flow.step("use"), store)
    # not upstream at all
    with pytest.raises(UpstreamNotRun):
        bind_template("{artifact.train.model}", run, flow, flow.step("side"), store)


def test_artifact_resolves_to_snapshot(store, tmp_path):
    (tmp_path / "data.txt").write_text("payload\n")
    flow = flow_from(BINDING)
    run = execute_run(store, flow, base_dir=tmp_path, parallelism=2)
    assert run.status == "success"
    path = bind_template("{artifact.train.model}", run, flow, flow.step("use"), store, quote=False)
    assert open(path).read() == "w=1 b=0"
    log = store.get_object(run.tasks["use"].log)
    assert log == b"w=1 b=0"


# -- execution ---------------------------------------------------------------


def test_diamond_success(store):
    run = execute_run(store, flow_from(DIAMOND), parallelism=2)
    assert run.status == "success"
    assert set(statuses(run).values()) == {"success"}
    assert run.finished_at is not None
    assert store.load_run("Diamond", run.run_id) == run


CHAIN = """\
flow Chain
step a
  exec "true"
step b after a
  exec "true"
step c after b
  exec "exit 1"
step d after c
  exec "true"
"""


def test_chain_failure_skips_downstream(store):
    run = execute_run(store, flow_from(CHAIN), parallelism=1)
    assert statuses(run) == {"a": "success", "b": "success", "c": "failed", "d": "skipped_upstream_failed"}
    assert run.status == "failed"
    assert run.tasks["c"].exit_code == 1


def test_failure_finishes_wave_then_stops(store, tmp_path):
    marker = tmp_path / "slow-done"
    flow = flow_from(f"""\
        flow Wave
        step bad
          exec "exit 2"
        step slow
          exec "sleep 0.2 && touch {marker}"
        step after_bad after bad
          exec "true"
        step after_slow after slow
          exec "true"
        """)
    run = execute_run(store, flow, parallelism=2)
    assert marker.exists()
    assert statuses(run) == {
        "bad": "failed",
        "slow": "success",
        "after_bad": "skipped_upstream_failed",
        "after_slow": "pending",
    }
    assert run.status == "failed"


def test_parallel_wave_overlaps(store):
    flow = flow_from('flow Par\nstep b\n  exec "sleep 0.2"\nstep c\n  exec "sleep 0.2"\n')
    t0 = time.perf_counter()
    run = execute_run(store, flow, parallelism=2)
    elapsed = time.perf_counter() - t0
    assert run.status == "success"
    assert elapsed < 0.35
    t0 = time.perf_counter()
    execute_run(store, flow, parallelism=1)
    assert time.perf_counter() - t0 >= 0.4


def test_exec_true_no_outputs(store):
    run = execute_run(store, flow_from('flow T\nstep a\n  exec "true"\n'), parallelism=1)
    task = run.tasks["a"]
    assert (task.status, task.exit_code, task.artifacts) == ("success", 0, [])
    assert store.get_object(task.log) == b""


def test_exit_code_recorded(store):
    run = execute_run(store, flow_from('flow T\nstep a\n  exec "echo oops >&2; exit 3"\n'), parallelism=1)
    task = run.tasks["a"]
    assert (task.status, task.exit_code) == ("failed", 3)
    assert store.get_object(task.log) == b"oops\n"


def test_missing_declared_output(store):
    flow = flow_from('flow T\nstep a\n  exec "true"\n  out model "model.bin"\n')
    task = execute_run(store, flow, parallelism=1).tasks["a"]
    assert task.status == "failed" and task.exit_code == 0
    assert "model.bin" in task.reason
    assert task.artifacts == []


def test_output_outside_workdir_rejected(store):
    flow = flow_from('flow T\nstep a\n  exec "touch ../escape"\n  out leak "../escape"\n')
    assert execute_run(store, flow, parallelism=1).tasks["a"].status == "failed"


def test_environment(store):
    flow = flow_from(
        'flow Env\nstep a\n  exec "printf \'%s %s\' $DAGDOC_RUN_ID $DAGDOC_STEP > env.txt; test -n \\"$DAGDOC_METRICS\\""\n'
        '  out env "env.txt"\n'
    )
    run = execute_run(store, flow, parallelism=1)
    assert store.get_object(run.tasks["a"].artifacts[0].object) == f"{run.run_id} a".encode()


def test_unknown_placeholder_fails_task(store):
    run = execute_run(store, flow_from('flow T\nstep a\n  exec "echo {param.zzz}"\n'), parallelism=1)
    assert run.tasks["a"].status == "failed"
    assert "UnknownPlaceholder" in run.tasks["a"].reason


def test_builtin_failure_is_recorded(store):
    flow = flow_from('flow T\nstep a\n  builtin train_toy data="1,1" epochs=5 lr=0.1\n')
    task = execute_run(store, flow, parallelism=1).tasks["a"]
    assert task.status == "failed" and task.exit_code == 1
    assert "DegenerateData" in task.reason
    assert b"DegenerateData" in store.get_object(task.log)


def test_malformed_metrics_fail_task(store):
    flow = flow_from('flow T\nstep a\n  exec "echo garbage > $DAGDOC_METRICS"\n')
    task = execute_run(store, flow, parallelism=1).tasks["a"]
    assert task.status == "failed" and "metrics" in task.reason


def test_invalid_parallelism(store):
    with pytest.raises(ValueError):
        execute_run(store, flow_from(DIAMOND), parallelism=0)
    assert store.list_runs("Diamond") == []


# -- properties --------------------------------------------------------------


@pytest.mark.parametrize("seed", range(6))
def test_scheduling_soundness(store, tmp_path, seed):
    rng = random.Random(seed)
    n = rng.randint(3, 9)
    edges = random_edges(rng, n, acyclic=True, density=0.35)
    events = tmp_path / "events.log"
    lines = ["flow Sched"]
    for j in range(n):
        preds = sorted({f"s{i:02d}" for i, k in edges if k == j})
        lines.append(f"step s{j:02d}" + (" after " + ", ".join(preds) if preds else ""))
        lines.append(f'  exec "echo start $DAGDOC_STEP >> {events}; sleep 0.01; echo end $DAGDOC_STEP >> {events}"')
    run = execute_run(store, flow_from("\n".join(lines) + "\n"), parallelism=3)
    assert run.status == "success"
    log = events.read_text().split("\n")
    for i, j in edges:
        assert log.index(f"end s{i:02d}") < log.index(f"start s{j:02d}")
    for i, j in edges:
        assert run.tasks[f"s{i:02d}"].finished_at <= run.tasks[f"s{j:02d}"].started_at


def test_workdirs_disjoint_and_fresh(store):
    flow = flow_from("""\
        flow Iso
        step b
          exec "echo evil > ../c/out.txt; pwd > where.txt"
          out where "where.txt"
        step c
          exec "test -z \\"$(ls -A | grep -v where.txt)\\" && echo clean > out.txt; pwd > where.txt"
          out out "out.txt"
          out where "where.txt"
        """)
    run = execute_run(store, flow, parallelism=1)
    assert run.status == "success", run.tasks["c"].reason
    where = {s: store.get_object(run.tasks[s].artifact("where").object) for s in ("b", "c")}
    assert where["b"] != where["c"]
    assert store.get_object(run.tasks["c"].artifact("out").object) == b"clean\n"


def _comparable(task):
    return dataclasses.replace(task, started_at=None, finished_at=None)


def test_builtin_runs_are_deterministic(store):
    flow = validate_dag(load_flow(example_flow_path()))
    base = example_flow_path().parent
    r1 = execute_run(store, flow, {"epochs": "50"}, base_dir=base, parallelism=2)
    r2 = execute_run(store, flow, {"epochs": "50"}, base_dir=base, parallelism=1)
    assert r1.status == r2.status == "success"
    assert r1.run_id != r2.run_id
    for name in r1.tasks:
        assert _comparable(r1.tasks[name]) == _comparable(r2.tasks[name])


# -- resume ------------------------------------------------------------------


def _fixable(tmp_path):
    flag = tmp_path / "fixed"
    return flag, f"""\
        flow Fix
        step a
          exec "echo a > a.txt"
          out a "a.txt"
        step b after a
          exec "cat {{artifact.a.a}} > b.txt; echo b >> b.txt"
          out b "b.txt"
        step c after b
          exec "test -e {flag} && cp {{artifact.b.b}} c.txt"
          out c "c.txt"
        step d after c
          exec "cat {{artifact.c.c}} > d.txt"
          out d "d.txt"
        """


def test_resume_reruns_failed_and_downstream(store, tmp_path):
    flag, text = _fixable(tmp_path)
    flow = flow_from(text)
    run = execute_run(store, flow, parallelism=1)
    assert statuses(run) == {"a": "success", "b": "success", "c": "failed", "d": "skipped_upstream_failed"}
    before = {s: run.tasks[s] for s in ("a", "b")}
    flag.touch()
    resumed = resume_run(store, "Fix", run.run_id, parallelism=1)
    assert resumed.run_id == run.run_id
    assert resumed.status == "success" and resumed.resume_count == 1
    assert {s: resumed.tasks[s] for s in ("a", "b")} == before
    assert store.get_object(resumed.tasks["d"].artifact("d").object) == b"a\nb\n"
    assert store.load_run("Fix", run.run_id) == resumed


def test_resume_with_fixed_flow(store, tmp_path):
    flow = flow_from(CHAIN)
    run = execute_run(store, flow, parallelism=1)
    fixed = flow_from(CHAIN.replace('exec "exit 1"', 'exec "true"'))
    resumed = resume_run(store, "Chain", run.run_id, flow=fixed)
    assert resumed.status == "success"
    assert resumed.fingerprint != run.fingerprint
    assert resumed.tasks["a"] == run.tasks["a"]
    changed = flow_from(CHAIN.replace("step d after c", "step d after a"))
    rerun = execute_run(store, flow, parallelism=1)
    with pytest.raises(NotResumable):
        resume_run(store, "Chain", rerun.run_id, flow=changed)


def test_resume_rejections(store):
    ok = execute_run(store, flow_from(DIAMOND), parallelism=1)
    with pytest.raises(NotResumable):
        resume_run(store, "Diamond", ok.run_id)
    with pytest.raises(NotFound):
        resume_run(store, "Diamond", "000099")


def test_resume_twice_matches_clean_run(store, tmp_path):
    counter = tmp_path / "attempts"
    counter.write_text("0")
    text = f"""\
        flow Flaky
        step fit
          builtin train_toy data="1,3;2,5;3,7" epochs=40 lr=0.05
        step shaky after fit
          exec "n=$(cat {counter}); echo $((n+1)) > {counter}; test $n -ge 2 && cp {{artifact.fit.model}} copy.txt"
          out copy "copy.txt"
        step report after shaky
          builtin copy src={{artifact.shaky.copy}} dest="report.txt"
          out report "report.txt"
        """
    flow = flow_from(text)
    run = execute_run(store, flow, parallelism=1)
    assert run.status == "failed"
    run = resume_run(store, "Flaky", run.run_id)
    assert run.status == "failed" and run.resume_count == 1
    run = resume_run(store, "Flaky", run.run_id)
    assert run.status == "success" and run.resume_count == 2
    clean = execute_run(store, flow, parallelism=1)
    assert clean.status == "success"
    assert artifact_ids(run) == artifact_ids(clean)


def test_resume_pending_steps_after_unrelated_failure(store):
    flow = flow_from("""\
        flow Split
        step bad
          exec "exit 1"
        step good
          exec "true"
        step later after good
          exec "true"
        """)
    run = execute_run(store, flow, parallelism=2)
    assert run.tasks["later"].status == "pending"
    fixed = flow_from(flow.spec.source_text.replace('exec "exit 1"', 'exec "true"'))
    resumed = resume_run(store, "Split", run.run_id, flow=fixed)
    assert statuses(resumed) == {"bad": "success", "good": "success", "later": "success"}
    assert resumed.tasks["good"] == run.tasks["good"]


def test_waves_follow_validated_order(store):
    flow = validate_dag(flow_from(DIAMOND).spec)
    run = execute_run(store, flow, parallelism=4)
    assert tuple(run.tasks) == flow.order

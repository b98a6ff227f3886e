"""Two-stage job runner: pre-creation of K candidates, then per-branch
critic-driven optimization, persisted to a run directory.

Branches run concurrently, but each stage's results are committed by the
calling thread in branch order, so the audit log does not depend on the
parallelism setting. A stage is the unit of recovery: work from a stage that
did not commit is redone on resume, which reproduces it exactly because every
backend reply is a function of request content.
"""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import TYPE_CHECKING, Any

from . import critic, editing, planning
from .backends.protocol import canonical_json
from .critic import EmotionAssessment, InstructionDiagnosis
from .editing import ActionTrace, ToolRegistry
from .errors import EmoflowError, EmptyKnowledgeBase, JobInterrupted, PreconditionError
from .images import ImageArtifact, ImageStore
from .knowledge import DEFAULT_PER_KIND_CAP, DEFAULT_TOP_K, EmotionFactorTree, FactorNode, retrieve
from .labels import EmotionLabel
from .planning import EditPlan, Instruction, SemanticCues
from .rundir import RunDirectory, dumps_doc

if TYPE_CHECKING:
    from .backends.client import Backends

logger = logging.getLogger(__name__)

STAGES = ("planning", "pre_creation", "optimization", "finalize")
DEFAULT_MAX_OPT_ITERS = 3


@dataclass(frozen=True)
class JobSpec:
    source_image: str
    target_emotion: EmotionLabel
    k: int = planning.DEFAULT_K
    n_max: int = planning.DEFAULT_N_MAX
    retry_budget: int = editing.DEFAULT_RETRIES
    max_opt_iters: int = DEFAULT_MAX_OPT_ITERS
    seed: int = 0
    backend_profile: str = "mock"

    def __post_init__(self) -> None:
        if self.k < 1 or self.n_max < 1:
            raise ValueError("k and n_max must be >= 1")
        if self.retry_budget < 0 or self.max_opt_iters < 0:
            raise ValueError("retry_budget and max_opt_iters must be >= 0")

    def to_json(self) -> dict:
        return {
            "source_image": self.source_image,
            "target_emotion": self.target_emotion.value,
            "k": self.k,
            "n_max": self.n_max,
            "retry_budget": self.retry_budget,
            "max_opt_iters": self.max_opt_iters,
            "seed": self.seed,
            "backend_profile": self.backend_profile,
        }

    @classmethod
    def from_json(cls, data: dict) -> JobSpec:
        return cls(
            source_image=str(data["source_image"]),
            target_emotion=EmotionLabel.parse(data["target_emotion"]),
            k=int(data.get("k", planning.DEFAULT_K)),
            n_max=int(data.get("n_max", planning.DEFAULT_N_MAX)),
            retry_budget=int(data.get("retry_budget", editing.DEFAULT_RETRIES)),
            max_opt_iters=int(data.get("max_opt_iters", DEFAULT_MAX_OPT_ITERS)),
            seed=int(data.get("seed", 0)),
            backend_profile=str(data.get("backend_profile", "mock")),
        )


@dataclass(frozen=True)
class RunConfig:
    top_k: int = DEFAULT_TOP_K
    per_kind_cap: int = DEFAULT_PER_KIND_CAP
    pass_threshold: float = critic.DEFAULT_PASS_THRESHOLD
    preservation_floor: float = 0.5
    parallelism: int = 1

    def to_json(self) -> dict:
        # parallelism is deliberately absent: it must not influence results.
        return {
            "top_k": self.top_k,
            "per_kind_cap": self.per_kind_cap,
            "pass_threshold": self.pass_threshold,
            "preservation_floor": self.preservation_floor,
        }


@dataclass(frozen=True)
class HistoryEntry:
    iteration: int
    image_hash: str
    assessment: EmotionAssessment
    diagnoses: tuple[InstructionDiagnosis, ...] = ()

    def to_json(self) -> dict:
        return {
            "iteration": self.iteration,
            "image_hash": self.image_hash,
            "assessment": self.assessment.to_json(),
            "diagnoses": [d.to_json() for d in self.diagnoses],
        }

    @classmethod
    def from_json(cls, data: dict) -> HistoryEntry:
        return cls(
            data["iteration"],
            data["image_hash"],
            EmotionAssessment.from_json(data["assessment"]),
            tuple(InstructionDiagnosis.from_json(d) for d in data["diagnoses"]),
        )


@dataclass(frozen=True)
class BranchState:
    branch: int
    plan: EditPlan
    current_image: ImageArtifact
    iteration: int = 0
    status: str = "pre_creation"  # pre_creation | optimizing | accepted | rejected
    history: tuple[HistoryEntry, ...] = ()
    last_traces: tuple[tuple[int, ActionTrace], ...] = ()
    steps: int = 0
    edit_calls: int = 0
    preservation: dict | None = None
    note: str | None = None

    @property
    def terminal(self) -> bool:
        return self.status in ("accepted", "rejected")

    def to_json(self) -> dict:
        return {
            "branch": self.branch,
            "plan": self.plan.to_json(),
            "current_image": self.current_image.to_json(),
            "iteration": self.iteration,
            "status": self.status,
            "history": [h.to_json() for h in self.history],
            "last_traces": [t.to_json() for _, t in self.last_traces],
            "steps": self.steps,
            "edit_calls": self.edit_calls,
            "preservation": self.preservation,
            "note": self.note,
        }

    @classmethod
    def from_json(cls, data: dict) -> BranchState:
        traces = [ActionTrace.from_json(t) for t in data["last_traces"]]
        return cls(
            branch=data["branch"],
            plan=EditPlan.from_json(data["plan"]),
            current_image=ImageArtifact.from_json(data["current_image"]),
            iteration=data["iteration"],
            status=data["status"],
            history=tuple(HistoryEntry.from_json(h) for h in data["history"]),
            last_traces=tuple((t.instruction_index, t) for t in traces),
            steps=data["steps"],
            edit_calls=data["edit_calls"],
            preservation=data["preservation"],
            note=data["note"],
        )


@dataclass
class JobRecord:
    job_id: str
    spec: JobSpec
    source: ImageArtifact
    status: str
    stage: str | None
    cues: SemanticCues | None
    pool: tuple[str, ...]
    branches: tuple[BranchState, ...]
    outputs: tuple[dict, ...]
    audit_log: tuple[dict, ...]
    timing: dict = field(default_factory=dict, compare=False)

    def branch(self, k: int) -> BranchState:
        return self.branches[k - 1]


@dataclass
class _Context:
    spec: JobSpec
    config: RunConfig
    registry: ToolRegistry
    backends: Backends
    store: ImageStore
    source: ImageArtifact


@dataclass
class _BranchResult:
    state: BranchState
    events: list[tuple[int | None, str, str, dict]]
    files: dict[str, bytes]


def _portable(spec: JobSpec) -> dict:
    # The source is identified by content; its location is not part of the job.
    return {**spec.to_json(), "source_image": Path(spec.source_image).name}


def job_id_for(spec: JobSpec, source: ImageArtifact) -> str:
    body = canonical_json({"spec": _portable(spec), "source": source.content_hash})
    return hashlib.sha256(body).hexdigest()[:16]


# -- public entry points ------------------------------------------------------


def run_job(
    spec: JobSpec,
    tree: EmotionFactorTree | None,
    registry: ToolRegistry,
    backends: Backends,
    store: ImageStore,
    run_dir: str | Path,
    config: RunConfig | None = None,
    stop_after: str | None = None,
) -> JobRecord:
    """Run ``spec`` into an empty ``run_dir``.

    ``stop_after`` names a stage after whose commit the run stops with
    JobInterrupted, leaving a resumable directory.
    """
    config = config or RunConfig()
    rd = RunDirectory(run_dir)
    if rd.exists("job.json"):
        raise PreconditionError(f"{run_dir} already holds a job; use resume")
    source = store.ingest(spec.source_image)
    job_id = job_id_for(spec, source)
    rd.write({"job.json": dumps_doc({"job_id": job_id, "spec": spec.to_json(), "source": source.to_json(), "config": config.to_json()})})
    rd.write({"progress.json": dumps_doc({"completed": [], "status": "running"})})
    ctx = _Context(spec, config, registry, backends, store, source)
    return _drive(rd, ctx, tree, stop_after)


def resume_job(
    run_dir: str | Path,
    tree: EmotionFactorTree | None,
    registry: ToolRegistry,
    backends: Backends,
    store: ImageStore,
    config: RunConfig | None = None,
    stop_after: str | None = None,
) -> JobRecord:
    """Continue an interrupted or failed run; a completed run is returned untouched."""
    rd = RunDirectory(run_dir)
    rd.verify()
    progress = rd.read_json("progress.json")
    if progress["status"] == "completed":
        return load_record(run_dir)
    job = rd.read_json("job.json")
    spec = JobSpec.from_json(job["spec"])
    source = ImageArtifact.from_json(job["source"])
    store.check(source)
    base = config or RunConfig()
    config = RunConfig(**job["config"], parallelism=base.parallelism)
    ctx = _Context(spec, config, registry, backends, store, source)
    rd.remove_untracked("failure.json")
    return _drive(rd, ctx, tree, stop_after)


def load_record(run_dir: str | Path) -> JobRecord:
    rd = RunDirectory(run_dir)
    job = rd.read_json("job.json")
    progress = rd.read_json("progress.json")
    spec = JobSpec.from_json(job["spec"])
    cues = pool = None
    if rd.exists("planning.json"):
        p = rd.read_json("planning.json")
        cues = SemanticCues.from_json(p["cues"])
        pool = tuple(p["pool"])
    branches = []
    for k in range(1, spec.k + 1):
        if rd.exists(f"branches/{k}/state.json"):
            branches.append(BranchState.from_json(rd.read_json(f"branches/{k}/state.json")))
    outputs = tuple(rd.read_json("outputs/index.json")) if rd.exists("outputs/index.json") else ()
    timing = rd.read_json("timing.json") if rd.exists("timing.json") else {}
    completed = progress["completed"]
    return JobRecord(
        job_id=job["job_id"],
        spec=spec,
        source=ImageArtifact.from_json(job["source"]),
        status=progress["status"],
        stage=completed[-1] if completed else None,
        cues=cues,
        pool=pool or (),
        branches=tuple(branches),
        outputs=outputs,
        audit_log=tuple(rd.read_events()),
        timing=timing,
    )


# -- stage driver -------------------------------------------------------------


def _drive(rd: RunDirectory, ctx: _Context, tree: EmotionFactorTree | None, stop_after: str | None) -> JobRecord:
    progress = rd.read_json("progress.json")
    completed: list[str] = list(progress["completed"])
    timing = rd.read_json("timing.json") if rd.exists("timing.json") else {}
    stage = None
    try:
        for stage in STAGES:
            if stage in completed:
                continue
            started = time.perf_counter()
            if stage == "planning":
                _stage_planning(rd, ctx, tree)
            elif stage == "pre_creation":
                _stage_branches(rd, ctx, _pre_create)
            elif stage == "optimization":
                _stage_branches(rd, ctx, _optimize)
            else:
                _stage_finalize(rd, ctx)
            completed.append(stage)
            status = "completed" if stage == STAGES[-1] else "running"
            rd.write({"progress.json": dumps_doc({"completed": completed, "status": status})})
            timing[stage] = round(time.perf_counter() - started, 6)
            rd.write_untracked("timing.json", dumps_doc(timing))
            if stop_after == stage and stage != STAGES[-1]:
                raise JobInterrupted(f"stopped after {stage}")
    except JobInterrupted:
        raise
    except EmoflowError as exc:
        logger.error("job failed during %s: %s", stage, exc)
        rd.write({"progress.json": dumps_doc({"completed": completed, "status": "failed"})})
        rd.write_untracked("failure.json", dumps_doc({"stage": stage, "error": type(exc).__name__, "message": str(exc)}))
        raise
    return load_record(rd.root)


def _stage_planning(rd: RunDirectory, ctx: _Context, tree: EmotionFactorTree | None) -> None:
    spec, target = ctx.spec, ctx.spec.target_emotion
    job = rd.read_json("job.json")
    events: list[tuple[int | None, str, str, dict]] = [
        (None, "orchestrator", "job_started", {"job_id": job["job_id"], "spec": _portable(spec), "source": ctx.source.content_hash}),
    ]
    cues = planning.analyze(ctx.source, ctx.store, ctx.backends)
    events.append((None, "planning", "analyzed", {
        "scene_summary": cues.scene_summary,
        "entities": [e.name for e in cues.entities],
        "source_emotion": cues.source_emotion.value,
        "source_confidence": cues.source_confidence,
    }))

    pool: list[FactorNode] = []
    fallback = None
    if not target.in_domain:
        fallback = "out_of_domain"
    elif tree is None:
        fallback = "no_knowledge_base"
    else:
        try:
            pool = retrieve(tree, cues.cue_embedding, target, ctx.config.top_k, ctx.config.per_kind_cap)
        except EmptyKnowledgeBase:
            fallback = "empty_knowledge_base"
    events.append((None, "planning", "retrieved", {"pool": [n.id for n in pool], "fallback": fallback}))

    plans = planning.generate_plans(cues, target, pool, ctx.backends, spec.k, spec.n_max, spec.seed)
    events.append((None, "planning", "plans_generated", {
        "plans": [{"plan_id": p.plan_id, "instructions": [i.text for i in p.instructions]} for p in plans.plans],
    }))

    files = {"planning.json": dumps_doc({"cues": cues.to_json(), "pool": [n.id for n in pool], "fallback": fallback})}
    for plan in plans.plans:
        files[f"plans/plan_{plan.plan_id}.json"] = dumps_doc(plan.to_json())
        state = BranchState(plan.plan_id, plan, ctx.source)
        files[f"branches/{plan.plan_id}/state.json"] = dumps_doc(state.to_json())
    rd.write(files)
    rd.append_events(events)


def _load_states(rd: RunDirectory, k: int) -> list[BranchState]:
    return [BranchState.from_json(rd.read_json(f"branches/{i}/state.json")) for i in range(1, k + 1)]


def _stage_branches(rd: RunDirectory, ctx: _Context, work) -> None:
    states = _load_states(rd, ctx.spec.k)
    width = max(1, min(ctx.config.parallelism, len(states)))
    if width == 1:
        results = [work(ctx, s) for s in states]
    else:
        with ThreadPoolExecutor(max_workers=width) as pool:
            results = list(pool.map(lambda s: work(ctx, s), states))
    files: dict[str, bytes] = {}
    events = []
    for res in results:
        files.update(res.files)
        files[f"branches/{res.state.branch}/state.json"] = dumps_doc(res.state.to_json())
        events.extend(res.events)
    rd.write(files)
    rd.append_events(events)


def _run_instructions(ctx: _Context, state: BranchState, instructions, res: _BranchResult) -> BranchState:
    image, traces = editing.execute_plan(instructions, state.current_image, ctx.registry, ctx.backends, ctx.spec.retry_budget)
    last = dict(state.last_traces)
    before = state.current_image
    steps = state.steps
    for trace in traces:
        steps += 1
        base = f"branches/{state.branch}/step_{steps}"
        after_hash = trace.output_hash
        res.files[f"{base}/before"] = ctx.store.read(before)
        res.files[f"{base}/after"] = ctx.store.read(ctx.store.artifact("cas://" + after_hash))
        res.files[f"{base}/trace.json"] = dumps_doc(trace.to_json())
        res.events.append((state.branch, "editing", "instruction_executed", {
            "step": steps,
            "iteration": state.iteration,
            "instruction_index": trace.instruction_index,
            "directive": trace.directive,
            "final_status": trace.final_status,
            "attempts": [a.to_json() for a in trace.attempts],
        }))
        last[trace.instruction_index] = trace
        before = ctx.store.artifact("cas://" + after_hash)
    return replace(
        state,
        current_image=image,
        last_traces=tuple(sorted(last.items())),
        steps=steps,
        edit_calls=state.edit_calls + sum(t.edit_calls for t in traces),
    )


def _assess(ctx: _Context, state: BranchState, res: _BranchResult, diagnoses=()) -> BranchState:
    a = critic.assess(state.current_image, ctx.spec.target_emotion, ctx.backends, ctx.config.pass_threshold, ctx.source)
    entry = HistoryEntry(state.iteration, state.current_image.content_hash, a, tuple(diagnoses))
    res.files[f"branches/{state.branch}/assessment_{state.iteration}.json"] = dumps_doc(entry.to_json())
    payload = a.to_json()
    payload["iteration"] = state.iteration
    payload["image_hash"] = state.current_image.content_hash
    res.events.append((state.branch, "critic", "assessed", payload))
    preservation = None
    if a.source_similarity is not None:
        floor = ctx.config.preservation_floor
        preservation = {"score": a.source_similarity, "floor": floor, "meets_floor": a.source_similarity >= floor}
    if a.passed:
        status = "accepted"
    elif state.iteration >= ctx.spec.max_opt_iters:
        status = "rejected"
    else:
        status = "optimizing"
    note = f"optimization budget of {ctx.spec.max_opt_iters} exhausted" if status == "rejected" else None
    new = replace(state, history=state.history + (entry,), status=status, preservation=preservation, note=note)
    res.events.append((state.branch, "orchestrator", "branch_status", {"status": status, "iteration": state.iteration, "note": note}))
    return new


def _pre_create(ctx: _Context, state: BranchState) -> _BranchResult:
    res = _BranchResult(state, [], {})
    state = _run_instructions(ctx, state, state.plan.instructions, res)
    res.state = _assess(ctx, state, res)
    return res


def _optimize(ctx: _Context, state: BranchState) -> _BranchResult:
    res = _BranchResult(state, [], {})
    while state.status == "optimizing":
        state = replace(state, iteration=state.iteration + 1)
        traces = dict(state.last_traces)
        diagnoses = critic.diagnose(state.plan.instructions, state.current_image, ctx.spec.target_emotion, traces, ctx.backends)
        res.files[f"branches/{state.branch}/diagnosis_{state.iteration}.json"] = dumps_doc([d.to_json() for d in diagnoses])
        res.events.append((state.branch, "critic", "diagnosed", {
            "iteration": state.iteration,
            "diagnoses": [d.to_json() for d in diagnoses],
        }))
        plan, rerun = _apply_diagnoses(state.plan, diagnoses, ctx.spec.n_max)
        state = replace(state, plan=plan)
        if rerun:
            state = _run_instructions(ctx, state, rerun, res)
        state = _assess(ctx, state, res, diagnoses)
    res.state = state
    return res


def _apply_diagnoses(plan: EditPlan, diagnoses, n_max: int) -> tuple[EditPlan, list[Instruction]]:
    """Fold revisions into the plan and list the instructions to re-run.

    An escalation is appended while the plan is shorter than ``n_max`` and
    otherwise replaces the last instruction, so no pass runs more than
    ``n_max`` instructions. A revision that would duplicate another
    instruction's (element, method) pair is dropped and the original re-runs.
    """
    instructions = {ins.index: ins for ins in plan.instructions}
    rerun: dict[int, Instruction] = {}
    for d in diagnoses:
        if d.escalation:
            index = len(instructions) + 1 if len(instructions) < n_max else len(instructions)
            new = replace(d.revised, index=index)
        elif d.revised is not None:
            new = d.revised
        elif not d.executed:
            rerun[d.instruction_index] = instructions[d.instruction_index]
            continue
        else:
            continue
        clash = any(ins.key == new.key and i != new.index for i, ins in instructions.items())
        if clash:
            if new.index in instructions:
                rerun[new.index] = instructions[new.index]
            continue
        instructions[new.index] = new
        rerun[new.index] = new
    ordered = tuple(instructions[i] for i in sorted(instructions))
    return EditPlan(plan.plan_id, ordered, plan.rationale), [rerun[i] for i in sorted(rerun)]


def _stage_finalize(rd: RunDirectory, ctx: _Context) -> None:
    states = _load_states(rd, ctx.spec.k)
    files: dict[str, bytes] = {}
    events = []
    seen: dict[str, int] = {}
    outputs = []
    for s in states:
        if s.status == "accepted" and s.current_image.content_hash in seen:
            note = f"output duplicates branch {seen[s.current_image.content_hash]}"
            s = replace(s, status="rejected", note=note)
            events.append((s.branch, "orchestrator", "branch_status", {"status": "rejected", "iteration": s.iteration, "note": note}))
            files[f"branches/{s.branch}/state.json"] = dumps_doc(s.to_json())
        if s.status == "accepted":
            seen[s.current_image.content_hash] = s.branch
            name = f"outputs/branch_{s.branch}.png"
            files[name] = ctx.store.read(s.current_image)
            outputs.append({"branch": s.branch, "image": s.current_image.to_json(), "file": name, "preservation": s.preservation})
    files["outputs/index.json"] = dumps_doc(outputs)
    rd.write(files)
    summary = {
        "accepted": [o["branch"] for o in outputs],
        "rejected": [s.branch for s in _load_states(rd, ctx.spec.k) if s.status == "rejected"],
    }
    events.append((None, "orchestrator", "job_completed", summary))
    rd.append_events(events)


def edit_call_bound(spec: JobSpec) -> int:
    """Upper bound on edit-backend calls for one branch."""
    return spec.n_max * (1 + spec.retry_budget) * (1 + spec.max_opt_iters)


def describe_job(record: JobRecord) -> dict[str, Any]:
    return {
        "job_id": record.job_id,
        "status": record.status,
        "accepted": [b.branch for b in record.branches if b.status == "accepted"],
        "rejected": [b.branch for b in record.branches if b.status == "rejected"],
    }

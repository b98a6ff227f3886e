"""Command-line entry point: ``emoflow <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .backends import connect, mock_server
from .backends.client import Backends
from .backends.mock import MockScript
from .config import Config, load_config
from .errors import EmoflowError, JobInterrupted
from .images import ImageStore
from .knowledge import ExemplarItem, build_tree, load_tree, save_tree
from .labels import ElementKind
from .metrics import Sample, build_report
from .orchestrator import STAGES, JobRecord, JobSpec, load_record, resume_job, run_job
from .rundir import RunDirectory

logger = logging.getLogger("emoflow")


def _backends(cfg: Config, profile_name: str, store: ImageStore, seed: int | None) -> Backends:
    script = cfg.mock_script or MockScript(dimension=cfg.profile(profile_name).dimension)
    if seed is not None:
        script = replace(script, seed=seed)
    backends, _ = connect(cfg.profile(profile_name), store, script)
    return backends


def cmd_build_kb(args, cfg: Config) -> int:
    raw = json.loads(Path(args.exemplars).read_text(encoding="utf-8"))
    items = [ExemplarItem.from_json(d) for d in (raw["items"] if isinstance(raw, dict) else raw)]
    out = Path(args.out or cfg.knowledge_base or "knowledge")
    store = ImageStore(cfg.store_dir or out / "blobs")
    backends = _backends(cfg, args.backend_profile, store, args.seed)

    def describe(emotion, members):
        reply = backends.describe(emotion, [(m.id, m.caption) for m in members])
        return reply["description"], ElementKind(reply["kind"])

    tree = build_tree(items, cfg.cluster, describe)
    save_tree(tree, out)
    print(f"wrote {len(tree.nodes)} factor nodes (dimension {tree.dimension}) to {out}")
    return 0


def cmd_run(args, cfg: Config) -> int:
    out = Path(args.out or "run")
    cfg_run = cfg.run if args.parallelism is None else replace(cfg.run, parallelism=args.parallelism)
    tree = load_tree(cfg.knowledge_base) if cfg.knowledge_base else None
    store = ImageStore(cfg.store_dir or out / "blobs")
    if args.resume:
        job = json.loads((out / "job.json").read_text(encoding="utf-8"))
        spec = JobSpec.from_json(job["spec"])
        backends = _backends(cfg, args.backend_profile or spec.backend_profile, store, spec.seed)
        record = resume_job(out, tree, cfg.registry, backends, store, cfg_run, stop_after=args.stop_after)
    else:
        spec_path = Path(args.spec)
        data = json.loads(spec_path.read_text(encoding="utf-8"))
        src = Path(data["source_image"])
        if not src.is_absolute() and not src.exists():
            data["source_image"] = str(spec_path.parent / src)
        if args.seed is not None:
            data["seed"] = args.seed
        spec = JobSpec.from_json(data)
        backends = _backends(cfg, args.backend_profile or spec.backend_profile, store, spec.seed)
        record = run_job(spec, tree, cfg.registry, backends, store, out, cfg_run, stop_after=args.stop_after)
    accepted = [b.branch for b in record.branches if b.status == "accepted"]
    rejected = [b.branch for b in record.branches if b.status == "rejected"]
    print(f"job {record.job_id}: {len(accepted)} accepted {accepted}, {len(rejected)} rejected {rejected} -> {out}")
    return 0


def samples_from(record: JobRecord) -> list[Sample]:
    by_branch = {b.branch: b for b in record.branches}
    return [
        Sample(record.job_id, o["branch"], record.source, by_branch[o["branch"]].current_image, record.spec.target_emotion)
        for o in record.outputs
    ]


def cmd_metrics(args, cfg: Config) -> int:
    samples = []
    for run in args.runs:
        RunDirectory(run).verify()
        samples.extend(samples_from(load_record(run)))
    if not samples:
        print("no accepted outputs in the given run directories", file=sys.stderr)
        return 1
    store = ImageStore(cfg.store_dir or Path(args.runs[0]) / "blobs")
    backends = _backends(cfg, args.backend_profile or "mock", store, args.seed)
    report = build_report(samples, backends, with_lpips=not args.no_lpips)
    text = json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        print(text, end="")
    print(report.table(), end="", file=sys.stderr if not args.out else sys.stdout)
    return 0


def render_inspect(run_dir: str | Path) -> str:
    """Human-readable trace of a run, built from its audit log and branch states."""
    rd = RunDirectory(run_dir)
    rd.verify()
    record = load_record(run_dir)
    spec = record.spec
    lines = [
        f"job {record.job_id}  status={record.status}  target={spec.target_emotion}  "
        f"k={spec.k}  n_max={spec.n_max}  retries={spec.retry_budget}  max_opt_iters={spec.max_opt_iters}",
        f"source {record.source.content_hash[:12]}  {record.source.width}x{record.source.height}",
    ]
    by_branch: dict[int | None, list[dict]] = {}
    for ev in record.audit_log:
        by_branch.setdefault(ev["branch"], []).append(ev)
    lines.append("planning")
    for ev in by_branch.get(None, []):
        p = ev["payload"]
        if ev["event"] == "analyzed":
            lines.append(f"  scene: {p['scene_summary']}  (source emotion {p['source_emotion']}, confidence {p['source_confidence']})")
        elif ev["event"] == "retrieved":
            pool = ", ".join(p["pool"]) or "-"
            lines.append(f"  retrieved: {pool}" + (f"  [fallback: {p['fallback']}]" if p["fallback"] else ""))
        elif ev["event"] == "plans_generated":
            for plan in p["plans"]:
                lines.append(f"  plan {plan['plan_id']}: " + " | ".join(plan["instructions"]))
    for state in record.branches:
        lines.append(f"branch {state.branch}  {state.status}  iterations={state.iteration}  edit_calls={state.edit_calls}")
        for ev in by_branch.get(state.branch, []):
            p = ev["payload"]
            if ev["event"] == "instruction_executed":
                lines.append(f"  step {p['step']}  iter {p['iteration']}  instruction {p['instruction_index']}: {p['directive']}  -> {p['final_status']}")
                for a in p["attempts"]:
                    lines.append(f"    #{a['attempt']} {a['stage']:<4} {a['tool']:<16} {a['status']:<6} {a['detail']}")
            elif ev["event"] == "assessed":
                t = p["target"]
                mass = "n/a" if p["sentinel"] else f"{p['distribution'][t]:.3f}"
                lines.append(f"  assessment {p['iteration']}: {p['verdict']}  p({t})={mass}")
                for step in p["rationale"]:
                    lines.append(f"    - {step}")
            elif ev["event"] == "diagnosed":
                for d in p["diagnoses"]:
                    if d["escalation"]:
                        desc = f"escalation -> {d['revised']['text']}"
                    elif d["revised"]:
                        desc = f"ineffective -> {d['revised']['text']}"
                    elif not d["executed"]:
                        desc = f"not executed: {d['error_note']}"
                    else:
                        desc = "ok"
                    lines.append(f"  diagnosis {p['iteration']}  instruction {d['instruction_index']}: {desc}")
            elif ev["event"] == "branch_status" and p.get("note"):
                lines.append(f"  note: {p['note']}")
    if record.outputs:
        lines.append("outputs: " + ", ".join(f"branch {o['branch']} {o['image']['content_hash'][:12]}" for o in record.outputs))
    else:
        lines.append("outputs: none")
    return "\n".join(lines) + "\n"


def cmd_inspect(args, cfg: Config) -> int:
    sys.stdout.write(render_inspect(args.run))
    return 0


def cmd_mock_server(args, cfg: Config) -> int:
    script = MockScript.load(args.script) if args.script else (cfg.mock_script or MockScript())
    if args.seed is not None:
        script = replace(script, seed=args.seed)
    store = ImageStore(args.store or cfg.store_dir or "blobs")
    handle = mock_server(script, store, port=args.port, host=args.host)
    print(f"mock backend listening on {handle.url} (store {store.root})", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        handle.close()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="emoflow", description=__doc__)
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--seed", type=int, help="override the seed")
    parser.add_argument("--backend-profile", help="backend profile name (default: the job's profile, else 'mock')")
    parser.add_argument("--out", help="output location")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-kb", help="cluster exemplars into emotion-factor files")
    p.add_argument("exemplars")
    p.set_defaults(func=cmd_build_kb)

    p = sub.add_parser("run", help="run a job spec into a run directory")
    p.add_argument("spec", nargs="?")
    p.add_argument("--resume", action="store_true", help="continue the run in --out")
    p.add_argument("--parallelism", type=int)
    p.add_argument("--stop-after", choices=STAGES[:-1])
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("metrics", help="compute metrics over run directories")
    p.add_argument("runs", nargs="+")
    p.add_argument("--no-lpips", action="store_true")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("inspect", help="print a run's trace")
    p.add_argument("run")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("mock-server", help="serve deterministic mock backends")
    p.add_argument("--script")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--store", help="shared image blob directory")
    p.set_defaults(func=cmd_mock_server)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run" and not args.resume and not args.spec:
        parser.error("run needs a SPEC file unless --resume is given")
    if args.backend_profile is None and args.command in ("build-kb",):
        args.backend_profile = "mock"
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except JobInterrupted as exc:
        print(f"interrupted: {exc}", file=sys.stderr)
        return 3
    except (EmoflowError, KeyError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

"""Headless experiment CLI: runs, corpora, unit tests, sweeps, ablations, replay, serving."""

from __future__ import annotations

import argparse
import json
import statistics
import sys
from pathlib import Path

import numpy as np

from .arbiter import SessionConfig
from .baselines import RBIIConfig
from .corpus import generate_corpus, load_corpus, run_scripted_episode
from .episode import (
    compute_metrics,
    evaluate_predictor,
    read_episode,
    replay_episode,
    save_episode,
)
from .intent import NO_MOTION_ANNOTATION_WEIGHTS, GateConfig
from .predictors import (
    GatedEvidencePredictor,
    HatPredictor,
    RbiiPredictor,
    SingleSamplePredictor,
)
from .scenarios import BUILTIN_SCENARIOS, find_scenario
from .teleop import ScriptedHumanConfig

MODES = ("builtin", "endpoint", "hat", "rbii1", "rbii2", "full-teleop")


def session_config_from_args(args, seed: int) -> SessionConfig:
    gate = GateConfig(K=args.K, eta=args.eta, temperature=args.temperature)
    reasoner = "none" if args.mode == "full-teleop" else args.mode
    return SessionConfig(
        T=args.T,
        gate=gate,
        seed=seed,
        reasoner_choice=reasoner,
        allow_any_T=True,
    )


def cmd_run(args) -> int:
    scenario = find_scenario(args.scenario)
    config = session_config_from_args(args, args.seed)
    human = ScriptedHumanConfig(
        seed=args.seed,
        noise_sigma=args.noise_sigma,
        distractor_prob=args.distractor_prob,
        speed_scale=args.speed_scale,
        manual_grip=(args.mode == "full-teleop"),
    )
    episode, session = run_scripted_episode(scenario, config, human, mode=args.mode)
    out = Path(args.out or f"{scenario.name}_{args.mode}_seed{args.seed}.episode")
    save_episode(episode, out)
    metrics = compute_metrics(episode)
    print(f"episode written: {out}")
    print(
        f"success={metrics.success} time={metrics.completion_time_s:.1f}s "
        f"subtasks={episode.footer['outcome']['subtasks_completed']}/"
        f"{episode.footer['outcome']['subtasks_total']} "
        f"proposals={metrics.proposals_issued} confirmed={metrics.confirmed} denied={metrics.denied}"
    )
    return 0


def cmd_replay(args) -> int:
    episode = read_episode(args.file)
    replay_episode(episode)
    metrics = compute_metrics(episode)
    print(f"replay OK: trace hash {episode.trace_hash}")
    print(f"success={metrics.success} time={metrics.completion_time_s:.1f}s")
    return 0


def cmd_corpus(args) -> int:
    manifest = generate_corpus(
        args.out,
        n_segments=args.n,
        seed=args.seed,
        max_T=args.max_T,
        scenarios=tuple(args.scenarios),
        scenario_episodes=args.scenario_episodes,
    )
    print(f"corpus written to {args.out}")
    print(json.dumps(manifest, indent=2, sort_keys=True))
    return 0


def _config_header(args, manifest) -> str:
    payload = {
        "K": args.K,
        "eta": args.eta,
        "temperature": args.temperature,
        "seeds": list(range(args.seeds)),
        "corpus_seed": manifest["seed"],
        "corpus_hash": manifest["corpus_hash"],
    }
    return "# config: " + json.dumps(payload, sort_keys=True)


def _write_table(path, header_lines, columns, rows) -> None:
    lines = list(header_lines)
    lines.append("\t".join(columns))
    for row in rows:
        lines.append("\t".join(str(v) for v in row))
    text = "\n".join(lines) + "\n"
    if path:
        Path(path).write_text(text, encoding="utf-8")
    print(text, end="")


def cmd_unittest(args) -> int:
    manifest, segments = load_corpus(args.corpus)
    if not segments:
        print("empty corpus", file=sys.stderr)
        return 2
    gate = GateConfig(K=args.K, eta=args.eta, temperature=args.temperature)
    rbii = RBIIConfig()
    stochastic = [
        GatedEvidencePredictor(gate=gate),
        GatedEvidencePredictor(gate=gate, weights=NO_MOTION_ANNOTATION_WEIGHTS, name="builtin-gated-noVP"),
    ]
    deterministic = [HatPredictor(), RbiiPredictor(1, cfg=rbii), RbiiPredictor(2, cfg=rbii)]
    rows = []
    for predictor in stochastic:
        accs = []
        for s in range(args.seeds):
            report = evaluate_predictor(predictor, segments, T=args.T, seed=s)
            accs.append(report.accuracy)
        mean = statistics.mean(accs)
        std = statistics.pstdev(accs) if len(accs) > 1 else 0.0
        rows.append([predictor.name, f"{mean:.4f}", f"{std:.4f}", len(segments)])
    for predictor in deterministic:
        report = evaluate_predictor(predictor, segments, T=args.T, seed=0)
        # deterministic baselines: no spread to report
        rows.append([predictor.name, f"{report.accuracy:.4f}", "", len(segments)])
    _write_table(
        args.out,
        [_config_header(args, manifest)],
        ["predictor", "accuracy_mean", "accuracy_std", "n_segments"],
        rows,
    )
    return 0


def cmd_sweep_t(args) -> int:
    manifest, segments = load_corpus(args.corpus)
    gate = GateConfig(K=args.K, eta=args.eta, temperature=args.temperature)
    predictor = GatedEvidencePredictor(gate=gate)
    rows = []
    for T in args.T_values:
        accs = []
        for s in range(args.seeds):
            report = evaluate_predictor(predictor, segments, T=T, seed=s)
            accs.append(report.accuracy)
        mean = statistics.mean(accs)
        std = statistics.pstdev(accs) if len(accs) > 1 else 0.0
        rows.append([T, f"{mean:.4f}", f"{std:.4f}", len(segments)])
    _write_table(
        args.out,
        [_config_header(args, manifest)],
        ["T", "accuracy_mean", "accuracy_std", "n_segments"],
        rows,
    )
    return 0


def cmd_gate_ablation(args) -> int:
    manifest, segments = load_corpus(args.corpus)
    if args.label:
        segments = [s for s in segments if s.label == args.label]
    gate = GateConfig(K=args.K, eta=args.eta, temperature=args.temperature)
    gated = GatedEvidencePredictor(gate=gate)
    ungated = SingleSamplePredictor(temperature=args.temperature)
    rows = []
    for T in args.T_values:
        for s in range(args.seeds):
            g = evaluate_predictor(gated, segments, T=T, seed=s)
            u = evaluate_predictor(ungated, segments, T=T, seed=s)
            rows.append(
                [
                    T,
                    s,
                    f"{g.false_prediction_rate:.4f}",
                    f"{g.coverage:.4f}",
                    f"{u.false_prediction_rate:.4f}",
                    f"{u.coverage:.4f}",
                ]
            )
    _write_table(
        args.out,
        [_config_header(args, manifest)],
        ["T", "seed", "gated_false_rate", "gated_coverage", "ungated_false_rate", "ungated_coverage"],
        rows,
    )
    return 0


def cmd_serve(args) -> int:
    from .server import run_server

    run_server(host=args.host, port=args.port)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="teleop-assist",
        description="Shared-autonomy teleoperation sandbox and experiment harness",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common_gate(p):
        p.add_argument("--T", type=int, default=100)
        p.add_argument("--K", type=int, default=5)
        p.add_argument("--eta", type=int, default=4)
        p.add_argument("--temperature", type=float, default=0.7)

    p = sub.add_parser("run", help="run one scripted headless session")
    p.add_argument("--scenario", required=True)
    p.add_argument("--mode", choices=MODES, default="builtin")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float, default=0.0)
    p.add_argument("--distractor-prob", dest="distractor_prob", type=float, default=0.0)
    p.add_argument("--speed-scale", dest="speed_scale", type=float, default=1.0)
    common_gate(p)
    p.set_defaults(T=40)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("replay", help="replay an episode file and verify its trace hash")
    p.add_argument("file")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("corpus", help="generate a labeled segment corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-T", dest="max_T", type=int, default=100)
    p.add_argument("--scenarios", nargs="*", default=list(BUILTIN_SCENARIOS))
    p.add_argument("--scenario-episodes", dest="scenario_episodes", type=int, default=1)
    p.set_defaults(func=cmd_corpus)

    p = sub.add_parser("unittest", help="segment-level intent accuracy per predictor")
    p.add_argument("--corpus", required=True)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", default=None)
    common_gate(p)
    p.set_defaults(func=cmd_unittest)

    p = sub.add_parser("sweep-t", help="accuracy across history lengths")
    p.add_argument("--corpus", required=True)
    p.add_argument("--T-values", dest="T_values", type=int, nargs="*", default=[10, 25, 50, 100])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--out", default=None)
    common_gate(p)
    p.set_defaults(func=cmd_sweep_t)

    p = sub.add_parser("gate-ablation", help="false prediction rate, gated vs ungated")
    p.add_argument("--corpus", required=True)
    p.add_argument("--T-values", dest="T_values", type=int, nargs="*", default=[10, 25, 50, 100])
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--label", default="ambiguous")
    p.add_argument("--out", default=None)
    common_gate(p)
    p.set_defaults(func=cmd_gate_ablation)

    p = sub.add_parser("serve", help="serve the live cockpit session over WebSocket")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8720)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())

"""Command-line entry point wiring corpus, training, generation, and reports.

Subcommands: gen | train | generate | eval | signal | experiment. The
`experiment` pipeline runs gen -> train x modes -> eval x policies and writes
a combined comparison table, a desk-scale analog of the paper-style mode
matrix.

All randomness flows from a single --seed; each stage derives its own stream
as sha256("<seed>:<stage>") (see training.derive_seed). Stage outputs are
written under a tmp/ prefix inside the output directory and atomically
renamed into place when the stage succeeds. The LENCTL_OUT environment
variable overrides --out-dir everywhere.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import corpus as corpus_mod
from . import evaluation as ev
from . import signals as sig
from . import training as tr
from .model import LengthControlMode, ModelConfig, generate
from .signals import SignalConfig

__all__ = ["main", "build_parser"]


# ---------------------------------------------------------------------------
# small helpers


def _int_pair(text: str) -> tuple[int, int]:
    """Parse 'lo:hi' into an integer pair."""
    lo, _, hi = text.partition(":")
    return (int(lo), int(hi))


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _out_dir(args) -> Path:
    return Path(os.environ.get("LENCTL_OUT", args.out_dir))


class StageDir:
    """Stage outputs under <root>/tmp/, atomically published on success."""

    def __init__(self, root: Path):
        self.root = root
        self.tmp = root / "tmp"

    def __enter__(self) -> "StageDir":
        self.tmp.mkdir(parents=True, exist_ok=True)
        return self

    def path(self, rel: str) -> Path:
        p = self.tmp / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def __exit__(self, exc_type, exc, tb):
        if exc_type is not None:
            return False  # leave partial outputs under tmp/ for inspection
        for f in sorted(self.tmp.rglob("*")):
            if f.is_file():
                dest = self.root / f.relative_to(self.tmp)
                dest.parent.mkdir(parents=True, exist_ok=True)
                os.replace(f, dest)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return False


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage


def _corpus_spec(args, *, task=None, n=None, seed=None, source_len=None) -> corpus_mod.CorpusSpec:
    return corpus_mod.CorpusSpec(
        task=corpus_mod.Task(task if task is not None else args.task),
        vocab_size=args.vocab_size,
        n_examples=n if n is not None else args.n,
        source_len_range=source_len if source_len is not None else args.source_len,
        lengths=corpus_mod.LengthDistribution(
            mean=args.len_mean, sd=args.len_sd, min=args.len_min, max=args.len_max
        ),
        rng_seed=seed if seed is not None else args.seed,
    )


def _model_config(args, mode: str) -> ModelConfig:
    signal = SignalConfig(
        d_model=args.d_model,
        M=args.m,
        noise_enabled=not args.no_noise,
        rng_seed=args.seed,
    )
    return ModelConfig(
        d_model=args.d_model,
        n_heads=args.n_heads,
        n_enc_layers=args.enc_layers,
        n_dec_layers=args.dec_layers,
        d_ff=args.d_ff,
        vocab_size=args.vocab_size,
        max_positions=args.max_positions,
        mode=LengthControlMode(mode),
        signal=signal,
        laam_boost=args.laam_boost,
        activation=args.activation,
    ).validate()


def _train_config(args, seed: int) -> tr.TrainConfig:
    return tr.TrainConfig(
        batch_size=args.batch_size,
        steps=args.steps,
        lr=args.lr,
        adamw=tr.AdamWConfig(
            beta1=args.beta1, beta2=args.beta2, eps=args.adam_eps, weight_decay=args.weight_decay
        ),
        grad_clip_norm=args.grad_clip,
        noise_enabled=not args.no_noise,
        rng_seed=seed,
        checkpoint_every=args.checkpoint_every,
    ).validate()


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_gen(args) -> int:
    spec = _corpus_spec(args)
    out = Path(args.out)
    tmp_dir = out.parent / "tmp"
    tmp_dir.mkdir(parents=True, exist_ok=True)
    n = corpus_mod.write_corpus(
        corpus_mod.generate_corpus(spec), tmp_dir / out.name, header=corpus_mod.corpus_header(spec)
    )
    os.replace(tmp_dir / out.name, out)
    shutil.rmtree(tmp_dir, ignore_errors=True)
    print(f"wrote {n} examples to {out}")
    return 0


def _check_corpus_vocab(examples, vocab_size: int) -> None:
    top = max(max(ex.source + ex.target) for ex in examples) if examples else 0
    if top >= vocab_size:
        raise ValueError(f"corpus token id {top} out of range for --vocab-size {vocab_size}")


def _cmd_train(args) -> int:
    out_dir = _out_dir(args)
    examples = corpus_mod.read_corpus(args.corpus)
    if args.limit:
        examples = examples[: args.limit]
    _check_corpus_vocab(examples, args.vocab_size)
    cfg = _model_config(args, args.mode)
    tcfg = _train_config(args, tr.derive_seed(args.seed, f"train:{args.mode}"))
    with StageDir(out_dir) as stage:
        params, records = tr.train(
            examples, cfg, tcfg, checkpoint_path=stage.path("checkpoint.lcpt"), progress=True
        )
        tr.write_loss_log(stage.path("loss.csv"), records, tcfg)
    print(f"final loss {records[-1].loss:.4f} after {records[-1].step} steps -> {out_dir}")
    return 0


def _cmd_generate(args) -> int:
    params, cfg = ckpt.load_checkpoint(args.checkpoint)
    if args.source:
        if not args.length:
            raise ValueError("--source requires --length")
        tokens = [int(t) for t in _csv_list(args.source)]
        res = generate(tokens, args.length, params, cfg)
        print(" ".join(str(t) for t in res.tokens))
        if res.cap_hit:
            print("(hard cap hit)", file=sys.stderr)
        return 0
    examples = corpus_mod.read_corpus(args.corpus)
    if args.limit:
        examples = examples[: args.limit]
    records = ev.evaluate(params, cfg, examples, ev.LengthPolicy.REFERENCE, workers=args.workers)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8") as f:
        for r in records:
            f.write(json.dumps({"id": r.example_id, "l": r.target_length,
                                "gen_len": r.generated_length, "cap_hit": r.cap_hit,
                                "generated": list(r.generated), "reference": list(r.reference)},
                               separators=(",", ":")) + "\n")
    print(f"wrote {len(records)} generations to {out}")
    return 0


def _cmd_eval(args) -> int:
    out_dir = _out_dir(args)
    params, cfg = ckpt.load_checkpoint(args.checkpoint)
    examples = corpus_mod.read_corpus(args.corpus)
    if args.limit:
        examples = examples[: args.limit]
    policy = ev.LengthPolicy(args.policy)
    records = ev.evaluate(
        params,
        cfg,
        examples,
        policy,
        ood_range=args.ood_range,
        rng_seed=tr.derive_seed(args.seed, "eval"),
        workers=args.workers,
    )
    against = ev.read_records(args.ttest_against) if args.ttest_against else None
    with StageDir(out_dir) as stage:
        ev.write_reports(
            stage.tmp,
            records,
            bucket_width=args.bucket_width,
            outlier_threshold=args.outlier_threshold,
            hist_bin_width=args.hist_bin_width,
            ttest_against=against,
        )
    m = ev.length_mae(records)
    print(f"mae {m.mae:.3f} sd {m.sd:.3f} over {m.count} examples -> {out_dir}")
    return 0


def _cmd_signal(args) -> int:
    cfg = SignalConfig(d_model=args.d_model, M=args.m)
    lines: list[str] = []
    if args.dump == "pre":
        lines.append("ratio,dim,value")
        for r in np.linspace(0.0, 1.0, args.grid):
            vec = sig.pre_embedding(float(r), cfg)
            for dim, val in enumerate(vec):
                lines.append(f"{float(r):.6f},{dim},{val:.9f}")
    else:
        lines.append("omega,x,cos,sin")
        omegas = [float(w) for w in _csv_list(args.omegas)]
        for w in omegas:
            for x in np.linspace(0.0, 1.0, args.grid):
                c, s = sig.impatience_signal(w, float(x))
                lines.append(f"{w:.6f},{float(x):.6f},{c:.9f},{s:.9f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def _stage(name: str, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


def _cmd_experiment(args) -> int:
    out_dir = _out_dir(args)
    modes = _csv_list(args.modes)
    policies = _csv_list(args.policies)
    for m in modes:
        LengthControlMode(m)
    for p in policies:
        ev.LengthPolicy(p)

    # corpora -----------------------------------------------------------
    corpus_dir = out_dir / "corpus"
    main_path = corpus_dir / "corpus.jsonl"
    ood_path = corpus_dir / "ood.jsonl"

    def gen_stage():
        with StageDir(corpus_dir) as stage:
            spec = _corpus_spec(
                args, n=args.n_train + args.n_eval, seed=tr.derive_seed(args.seed, "gen:main")
            )
            corpus_mod.write_corpus(
                corpus_mod.generate_corpus(spec), stage.path("corpus.jsonl"),
                header=corpus_mod.corpus_header(spec),
            )
            if "random_ood" in policies:
                lo, hi = args.ood_source_len or (args.ood_range[1] + 10, args.ood_range[1] + 60)
                ood_spec = _corpus_spec(
                    args, n=args.ood_eval_n, seed=tr.derive_seed(args.seed, "gen:ood"),
                    source_len=(lo, hi),
                )
                corpus_mod.write_corpus(
                    corpus_mod.generate_corpus(ood_spec), stage.path("ood.jsonl"),
                    header=corpus_mod.corpus_header(ood_spec),
                )

    _stage("gen", gen_stage)
    examples = corpus_mod.read_corpus(main_path)
    train_split, eval_split, _ = corpus_mod.split_corpus(examples, args.n_train, args.n_eval)
    ood_split = corpus_mod.read_corpus(ood_path) if "random_ood" in policies else []

    # training ----------------------------------------------------------
    run_params: dict[str, dict] = {}
    for mode in modes:
        def train_stage(mode=mode):
            run_dir = out_dir / "runs" / mode
            cfg = _model_config(args, mode)
            if max(len(ex.source) for ex in examples + ood_split) > cfg.max_positions:
                raise ValueError("max_positions too small for the generated sources")
            tcfg = _train_config(args, tr.derive_seed(args.seed, f"train:{mode}"))
            with StageDir(run_dir) as stage:
                print(f"[train:{mode}] {tcfg.steps} steps ...", flush=True)
                params, records = tr.train(
                    train_split, cfg, tcfg, checkpoint_path=stage.path("checkpoint.lcpt"),
                    progress=True,
                )
                tr.write_loss_log(stage.path("loss.csv"), records, tcfg)
            run_params[mode] = {"params": params, "cfg": cfg}

        _stage(f"train:{mode}", train_stage)

    # evaluation --------------------------------------------------------
    all_records: dict[tuple[str, str], list[ev.GenerationRecord]] = {}
    for mode in modes:
        for policy in policies:
            def eval_stage(mode=mode, policy=policy):
                run = run_params[mode]
                pol = ev.LengthPolicy(policy)
                split = eval_split if pol is ev.LengthPolicy.REFERENCE else ood_split
                records = ev.evaluate(
                    run["params"], run["cfg"], split, pol,
                    ood_range=args.ood_range,
                    rng_seed=tr.derive_seed(args.seed, "eval"),
                    workers=args.workers,
                )
                all_records[(mode, policy)] = records
                width = args.bucket_width if pol is ev.LengthPolicy.REFERENCE else args.ood_bucket_width
                thr = (
                    args.outlier_threshold
                    if pol is ev.LengthPolicy.REFERENCE
                    else args.ood_outlier_threshold
                )
                eval_dir = out_dir / "eval" / f"{mode}_{policy}"
                with StageDir(eval_dir) as stage:
                    ev.write_reports(
                        stage.tmp, records, bucket_width=width, outlier_threshold=thr,
                        hist_bin_width=args.hist_bin_width,
                    )
                m = ev.length_mae(records)
                print(f"[eval:{mode}:{policy}] mae {m.mae:.3f} sd {m.sd:.3f}", flush=True)

            _stage(f"eval:{mode}:{policy}", eval_stage)

    # paired significance: pre vs rpe on example-level errors, per policy
    if "pre" in modes and "rpe" in modes:
        def ttest_stage():
            for policy in policies:
                res = ev.paired_t_test(
                    [r.abs_error for r in all_records[("pre", policy)]],
                    [r.abs_error for r in all_records[("rpe", policy)]],
                )
                eval_dir = out_dir / "eval" / f"pre_{policy}"
                with StageDir(eval_dir) as stage:
                    with open(stage.path("ttest.csv"), "w", encoding="utf-8") as f:
                        f.write("t,p,df,zero_variance\n")
                        f.write(f"{res.t:.6f},{res.p:.6g},{res.df},"
                                f"{'true' if res.zero_variance else 'false'}\n")

        _stage("ttest", ttest_stage)

    # comparison table ----------------------------------------------------
    def comparison_stage():
        rows = []
        for mode in modes:
            for policy in policies:
                records = all_records[(mode, policy)]
                thr = (
                    args.outlier_threshold
                    if policy == "reference"
                    else args.ood_outlier_threshold
                )
                m = ev.length_mae(records)
                rs = ev.rouge_summary(records)
                out_rate = sum(r.abs_error > thr for r in records) / len(records)
                rows.append([mode, policy, m.mae, m.sd, out_rate, rs.r1_f1, rs.r2_f1, rs.rl_f1])
        with StageDir(out_dir) as stage:
            with open(stage.path("comparison.csv"), "w", encoding="utf-8") as f:
                f.write("mode,policy,mae,sd,outlier_rate,r1,r2,rL\n")
                for row in rows:
                    f.write(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in row) + "\n")

    _stage("comparison", comparison_stage)
    print(f"experiment complete -> {out_dir / 'comparison.csv'}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_corpus_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=["prefix_copy", "marked_extract"], default="prefix_copy",
                   help="synthetic task")
    p.add_argument("--vocab-size", type=int, default=64, help="total vocabulary size")
    p.add_argument("--source-len", type=_int_pair, default=(80, 120), metavar="LO:HI",
                   help="source length range")
    p.add_argument("--len-mean", type=float, default=40.0, help="target length mean")
    p.add_argument("--len-sd", type=float, default=10.0, help="target length sd")
    p.add_argument("--len-min", type=int, default=8, help="target length lower bound")
    p.add_argument("--len-max", type=int, default=80, help="target length upper bound")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--d-model", type=int, default=64, help="embedding dimension")
    p.add_argument("--n-heads", type=int, default=4, help="attention heads")
    p.add_argument("--enc-layers", type=int, default=2, help="encoder layers")
    p.add_argument("--dec-layers", type=int, default=2, help="decoder layers")
    p.add_argument("--d-ff", type=int, default=128, help="feed-forward width")
    p.add_argument("--max-positions", type=int, default=512, help="max input positions")
    p.add_argument("--m", type=float, default=None,
                   help="impatience frequency scale M (default d_model/2)")
    p.add_argument("--laam-boost", type=float, default=1.0, help="LAAM boost beta")
    p.add_argument("--activation", choices=["gelu", "relu"], default="gelu",
                   help="feed-forward activation")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--steps", type=int, default=4000, help="optimizer steps")
    p.add_argument("--batch-size", type=int, default=16, help="examples per step")
    p.add_argument("--lr", type=float, default=3e-4, help="learning rate (constant)")
    p.add_argument("--beta1", type=float, default=0.9, help="AdamW beta1")
    p.add_argument("--beta2", type=float, default=0.99, help="AdamW beta2")
    p.add_argument("--adam-eps", type=float, default=1e-8, help="AdamW epsilon")
    p.add_argument("--weight-decay", type=float, default=0.01, help="decoupled weight decay")
    p.add_argument("--grad-clip", type=float, default=1.0,
                   help="global gradient-norm clip (0 disables)")
    p.add_argument("--no-noise", action="store_true", help="disable training ratio noise")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="periodic checkpoint interval in steps (0 = final only)")


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bucket-width", type=int, default=10, help="MAE bucket width in tokens")
    p.add_argument("--outlier-threshold", type=float, default=20.0,
                   help="absolute-error outlier threshold in tokens")
    p.add_argument("--hist-bin-width", type=int, default=5, help="length histogram bin width")
    p.add_argument("--workers", type=int, default=1, help="parallel generation workers")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lenctl",
        description="Length-controllable generation laboratory: corpora, training, evaluation.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    sub = parser.add_subparsers(dest="cmd", required=True, metavar="COMMAND")

    p = sub.add_parser("gen", help="generate a synthetic corpus",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    _add_corpus_flags(p)
    p.add_argument("--n", type=int, default=1000, help="number of examples")
    p.add_argument("--seed", type=int, default=0, help="corpus rng seed")
    p.add_argument("--out", required=True, help="output corpus file (jsonl)")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train one model on a corpus",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--corpus", required=True, help="corpus file from `gen`")
    p.add_argument("--limit", type=int, default=0, help="train on only the first N examples")
    p.add_argument("--mode", choices=[m.value for m in LengthControlMode], default="pre",
                   help="length-control strategy")
    p.add_argument("--vocab-size", type=int, default=64, help="model vocabulary size")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out-dir", required=True, help="output directory (checkpoint + loss log)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="generate from a checkpoint",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--source", default="", help="comma-separated source token ids")
    p.add_argument("--length", type=int, default=0, help="requested target length")
    p.add_argument("--corpus", default="", help="corpus file (batch generation)")
    p.add_argument("--limit", type=int, default=0, help="generate for only the first N examples")
    p.add_argument("--out", default="records.jsonl", help="records output (corpus mode)")
    p.add_argument("--workers", type=int, default=1, help="parallel generation workers")
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--corpus", required=True, help="evaluation corpus file")
    p.add_argument("--limit", type=int, default=0, help="evaluate only the first N examples")
    p.add_argument("--policy", choices=["reference", "random_ood"], default="reference",
                   help="target-length policy")
    p.add_argument("--ood-range", type=_int_pair, default=(100, 320), metavar="LO:HI",
                   help="OOD target length range")
    p.add_argument("--ttest-against", default="", help="records.jsonl of a run to compare against")
    _add_eval_flags(p)
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--out-dir", required=True, help="report output directory")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("signal", help="dump conditioning-signal CSV tables",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--dump", choices=["pre", "impatience"], default="pre",
                   help="which signal family to dump")
    p.add_argument("--d-model", type=int, default=8, help="embedding dimension")
    p.add_argument("--m", type=float, default=None,
                   help="impatience frequency scale M (default d_model/2)")
    p.add_argument("--grid", type=int, default=101, help="grid points over [0, 1]")
    p.add_argument("--omegas", default="0,128,256,512",
                   help="comma-separated pulsations (impatience dump)")
    p.add_argument("--out", default="", help="output file (default stdout)")
    p.set_defaults(func=_cmd_signal)

    p = sub.add_parser(
        "experiment",
        help="run the full gen -> train x modes -> eval x policies pipeline",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        epilog="A plan file (key=value lines, same parser as checkpoint headers) may preset "
               "any long flag, e.g. `modes=none,rpe,pre`; explicit flags win.",
    )
    p.add_argument("--plan", default="", help="key=value plan file presetting flags")
    p.add_argument("--modes", default="none,rpe,pre", help="comma-separated mode list")
    p.add_argument("--policies", default="reference,random_ood",
                   help="comma-separated length policies")
    _add_corpus_flags(p)
    p.add_argument("--n-train", type=int, default=5000, help="training examples")
    p.add_argument("--n-eval", type=int, default=500, help="held-out reference-policy examples")
    p.add_argument("--ood-eval-n", type=int, default=300, help="OOD evaluation examples")
    p.add_argument("--ood-range", type=_int_pair, default=(100, 320), metavar="LO:HI",
                   help="OOD target length range")
    p.add_argument("--ood-source-len", type=_int_pair, default=None, metavar="LO:HI",
                   help="OOD corpus source length range (default: beyond ood max)")
    _add_model_flags(p)
    _add_train_flags(p)
    _add_eval_flags(p)
    p.add_argument("--ood-bucket-width", type=int, default=25, help="OOD MAE bucket width")
    p.add_argument("--ood-outlier-threshold", type=float, default=5.0,
                   help="OOD outlier threshold in tokens")
    p.add_argument("--seed", type=int, default=0, help="master seed for every stage")
    p.add_argument("--out-dir", required=True, help="experiment output directory")
    p.set_defaults(func=_cmd_experiment)
    return parser


_PLAN_FLAGS = {
    "modes": str, "policies": str, "task": str, "vocab_size": int, "source_len": _int_pair,
    "len_mean": float, "len_sd": float, "len_min": int, "len_max": int,
    "n_train": int, "n_eval": int, "ood_eval_n": int, "ood_range": _int_pair,
    "ood_source_len": _int_pair, "d_model": int, "n_heads": int, "enc_layers": int,
    "dec_layers": int, "d_ff": int, "max_positions": int, "m": float, "laam_boost": float,
    "activation": str, "steps": int, "batch_size": int, "lr": float, "beta1": float,
    "beta2": float, "adam_eps": float, "weight_decay": float, "grad_clip": float,
    "no_noise": lambda s: s.lower() == "true", "checkpoint_every": int,
    "bucket_width": int, "outlier_threshold": float, "hist_bin_width": int, "workers": int,
    "ood_bucket_width": int, "ood_outlier_threshold": float, "seed": int, "out_dir": str,
}


def _load_plan(argv: list[str]) -> argparse.Namespace:
    """Preset a namespace from --plan key=value lines; explicit flags win."""
    ns = argparse.Namespace()
    if "--plan" not in argv:
        return ns
    plan_path = argv[argv.index("--plan") + 1]
    kv = ckpt.parse_kv(Path(plan_path).read_text(encoding="utf-8"))
    for key, raw in kv.items():
        if key not in _PLAN_FLAGS:
            raise ValueError(f"plan file {plan_path}: unknown key {key!r}")
        setattr(ns, key, _PLAN_FLAGS[key](raw))
    return ns


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        namespace = _load_plan(argv) if argv[:1] == ["experiment"] else argparse.Namespace()
        args = parser.parse_args(argv, namespace=namespace)
    except ValueError as e:
        print(f"[plan] error: {e}", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except StageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:
        print(f"[{args.cmd}] error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

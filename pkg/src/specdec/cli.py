"""Command-line entry point.

Subcommands: init-model, gen-corpus, train-heads, build-tree, generate,
bench, selftest.  Exit codes: 0 ok, 1 runtime failure, 2 usage error.
With -v, log records go to stderr as JSON lines.
"""

import argparse
import json
import logging
import sys

import numpy as np

from . import bench, engine, kernels, model, training, tree


class JsonLineHandler(logging.StreamHandler):
    def emit(self, record):
        line = json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "msg": record.getMessage()})
        self.stream.write(line + "\n")
        self.stream.flush()


def _parse_prompt(text):
    try:
        prompt = [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise SystemExit("prompt must be a comma- or space-separated token id list")
    if not prompt:
        raise SystemExit("empty prompt")
    return prompt


def _load_tree(args, n_heads):
    spec = tree.load_spec(args.tree) if args.tree else tree.default_tree(n_heads)
    return spec, tree.compile_tree(spec)


def _add_common(p):
    p.add_argument("-v", "--verbose", action="store_true", help="JSON-lines logging to stderr")


def build_parser():
    parser = argparse.ArgumentParser(prog="specdec",
                                     description="Multi-head speculative decoding with static "
                                                 "tree verification, at toy scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init-model", help="create a seeded random checkpoint")
    p.add_argument("--config", help="model config JSON file (defaults built in)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--head-init", choices=["zero", "random"], default="zero")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("gen-corpus", help="seeded synthetic corpus generator")
    p.add_argument("--vocab-size", type=int, default=512)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-len", type=int, default=6)
    p.add_argument("--max-len", type=int, default=24)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("train-heads", help="self-distillation training of the draft heads")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True, help="JSON file of token-id lists (prompts)")
    p.add_argument("--n-samples", type=int, default=200)
    p.add_argument("--preserve-special", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="trained checkpoint path")
    p.add_argument("--loss-csv", help="write the loss curve here")
    p.add_argument("--acc-json", help="write per-head Top-1 accuracy here")
    _add_common(p)

    p = sub.add_parser("build-tree", help="compile a tree spec into static buffers")
    p.add_argument("--spec", help="tree spec JSON; omitted -> documented default tree")
    p.add_argument("--k", type=int, default=3, help="head count for the default tree")
    p.add_argument("--out", required=True, help="compiled buffer dump (JSON)")
    _add_common(p)

    p = sub.add_parser("generate", help="greedy generation, baseline or speculative")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tree", help="tree spec JSON (default tree if omitted)")
    p.add_argument("--prompt", required=True, help="comma-separated token ids")
    p.add_argument("--max-tokens", type=int, default=64)
    p.add_argument("--mode", choices=["auto", "medusa"], default="medusa")
    p.add_argument("--eos", type=int, default=training.EOS_TOKEN)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)

    p = sub.add_parser("bench", help="AC / overhead / speedup sweep, CSV output")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--tree", help="tree spec JSON (default tree if omitted)")
    p.add_argument("--prompt", default="4,5,6,7")
    p.add_argument("--lengths", default="128,256,512,1024")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--precision", choices=["single", "double"], default="single")
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--kernels", action="store_true",
                   help="also benchmark the numba kernel against the numpy fallback")
    _add_common(p)

    p = sub.add_parser("selftest", help="run the oracle suites")
    p.add_argument("--trees", type=int, default=100)
    p.add_argument("--equivalence-runs", type=int, default=10)
    p.add_argument("--grad-points", type=int, default=5)
    _add_common(p)
    return parser


def _load_config(path):
    if not path:
        return model.ModelConfig()
    with open(path) as f:
        return model.ModelConfig(**json.load(f))


def cmd_init_model(args):
    bundle = model.init_bundle(_load_config(args.config), seed=args.seed,
                               head_init=args.head_init)
    model.save_bundle(bundle, args.out)
    print(f"wrote {args.out} ({bundle.config})")
    return 0


def cmd_gen_corpus(args):
    corpus = training.generate_corpus(args.vocab_size, args.n, seed=args.seed,
                                      min_len=args.min_len, max_len=args.max_len)
    with open(args.out, "w") as f:
        json.dump(corpus, f)
    print(f"wrote {len(corpus)} sequences to {args.out}")
    return 0


def cmd_train_heads(args):
    bundle = model.load_bundle(args.ckpt)
    with open(args.corpus) as f:
        prompts = json.load(f)
    samples = training.build_distill_set(bundle, prompts, args.n_samples,
                                         preserve_special=args.preserve_special)
    split = max(1, len(samples) // 10)
    cfg = training.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size,
                               epochs=args.epochs, n_heads=len(bundle.heads),
                               preserve_special=args.preserve_special, seed=args.seed)
    bundle, losses = training.train_heads(bundle, samples[split:], cfg)
    acc = training.eval_head_accuracy(bundle, samples[:split])
    model.save_bundle(bundle, args.out)
    if args.loss_csv:
        with open(args.loss_csv, "w") as f:
            f.write("step,loss\n")
            f.writelines(f"{i},{l}\n" for i, l in enumerate(losses))
    if args.acc_json:
        with open(args.acc_json, "w") as f:
            json.dump({"top1_accuracy": [None if np.isnan(a) else a for a in acc]}, f)
    print(f"trained on {len(samples) - split} samples; "
          f"held-out Top-1 per head: {[round(float(a), 4) for a in acc]}")
    return 0


def cmd_build_tree(args):
    spec = tree.load_spec(args.spec) if args.spec else tree.default_tree(args.k)
    buffers = tree.compile_tree(spec)
    report = tree.validate_buffers(buffers, spec)
    if not report.ok:
        print("compiled buffers failed the oracle check:", file=sys.stderr)
        for fail in report.failures:
            print(f"  {fail}", file=sys.stderr)
        return 1
    with open(args.out, "w") as f:
        json.dump(tree.buffers_to_json(buffers), f, indent=1)
    print(f"wrote {args.out}: T={buffers.n_nodes}, {buffers.n_paths} paths")
    return 0


def cmd_generate(args):
    bundle = model.load_bundle(args.ckpt)
    prompt = _parse_prompt(args.prompt)
    spec, buffers = _load_tree(args, len(bundle.heads))
    if args.mode == "auto":
        tokens, times = engine.generate_autoregressive(bundle, prompt, args.max_tokens,
                                                       eos_token=args.eos)
        for i, t in enumerate(times):
            print(json.dumps({"step": i, "step_time_s": t}))
    else:
        tokens, outcomes, _ = engine.generate_speculative(bundle, buffers, prompt,
                                                          args.max_tokens, eos_token=args.eos)
        for i, o in enumerate(outcomes):
            print(json.dumps({"step": i, "accepted_len": o.accepted_len,
                              "chosen_path_row": o.chosen_path_row,
                              "emitted": o.emitted_tokens, "bonus": o.bonus_token,
                              "step_time_s": o.step_time_s}))
    print(json.dumps({"tokens": tokens}))
    return 0


def cmd_bench(args):
    if args.kernels:
        print(json.dumps(kernels.benchmark_backends()))
    dtype = np.float32 if args.precision == "single" else np.float64
    src = model.load_bundle(args.ckpt)
    if src.dtype != dtype:
        src = model.ModelBundle(src.config, src.embed.astype(dtype),
                                [{k: a.astype(dtype) for k, a in l.items()} for l in src.layers],
                                src.final_norm.astype(dtype), src.w_out.astype(dtype),
                                [{k: a.astype(dtype) for k, a in h.items()} for h in src.heads])
    spec, buffers = _load_tree(args, len(src.heads))
    cfg = bench.SweepConfig(lengths=[int(x) for x in args.lengths.split(",")],
                            prompt=_parse_prompt(args.prompt),
                            repetitions=args.reps, warmup=args.warmup)
    rows = bench.sweep(src, buffers, cfg, out_csv=args.out)
    for r in rows:
        if r["rep"] == "median":
            print(f"len={r['length']:>5}  AC={r['ac']:.3f}  overhead={r['overhead']:.3f}  "
                  f"speedup_model={r['speedup_model']:.3f}  speedup_measured={r['speedup_measured']:.3f}")
    print(f"wrote {args.out}")
    return 0


def cmd_selftest(args):
    failures = []

    rng = np.random.default_rng(7)
    bad = 0
    for _ in range(args.trees):
        spec = tree.random_tree_spec(rng)
        if not tree.validate_buffers(tree.compile_tree(spec), spec).ok:
            bad += 1
    _report("mask/retrieval oracle", bad == 0, f"{args.trees} random trees, {bad} failures", failures)

    cfg = model.ModelConfig(n_layers=2, d_model=32, n_q_heads=4, n_kv_heads=2, d_ff=64,
                            vocab_size=64, max_seq_len=256, n_draft_heads=3)
    mismatches = 0
    for i in range(args.equivalence_runs):
        bundle = model.init_bundle(cfg, seed=100 + i, head_init="random")
        prompt = list(np.random.default_rng(i).integers(0, cfg.vocab_size, size=6))
        buffers = tree.compile_tree(tree.default_tree(3))
        auto, _ = engine.generate_autoregressive(bundle, prompt, 24)
        spec_out, _, _ = engine.generate_speculative(bundle, buffers, prompt, 24)
        if auto != spec_out:
            mismatches += 1
    _report("lossless greedy equivalence", mismatches == 0,
            f"{args.equivalence_runs} runs, {mismatches} mismatches", failures)

    worst = 0.0
    for i in range(args.grad_points):
        bundle = model.init_bundle(cfg, seed=200 + i, head_init="random")
        g = np.random.default_rng(300 + i)
        h = g.standard_normal((4, cfg.d_model))
        targets = g.integers(0, cfg.vocab_size, size=(4, 3))
        lam = training.default_lambdas(3)
        _, grads = model.head_loss(bundle, h, targets, lam)
        head = bundle.heads[0]
        for _ in range(4):
            r, c = g.integers(0, cfg.d_model), g.integers(0, cfg.d_model)
            eps = 1e-5
            w = head["w"]
            w.setflags(write=True)
            orig = w[r, c]
            w[r, c] = orig + eps
            lp, _ = model.head_loss(bundle, h, targets, lam)
            w[r, c] = orig - eps
            lm, _ = model.head_loss(bundle, h, targets, lam)
            w[r, c] = orig
            fd = (lp - lm) / (2 * eps)
            denom = max(abs(fd), abs(grads[0][0][r, c]), 1e-12)
            worst = max(worst, abs(fd - grads[0][0][r, c]) / denom)
    _report("head gradient check", worst <= 1e-4, f"worst relative error {worst:.2e}", failures)

    return 0 if not failures else 1


def _report(name, ok, detail, failures):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    if not ok:
        failures.append(name)


_COMMANDS = {
    "init-model": cmd_init_model,
    "gen-corpus": cmd_gen_corpus,
    "train-heads": cmd_train_heads,
    "build-tree": cmd_build_tree,
    "generate": cmd_generate,
    "bench": cmd_bench,
    "selftest": cmd_selftest,
}


def dispatch(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "verbose", False):
        root = logging.getLogger()
        root.setLevel(logging.INFO)
        root.addHandler(JsonLineHandler(sys.stderr))
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()

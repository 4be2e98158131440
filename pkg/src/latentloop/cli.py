"""Operator CLI: dataset generation, training, scaling sweeps, diagnostics.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical divergence.
All randomness derives from --seed through named streams; reruns with the
same seed produce byte-identical outputs. Config precedence is
command line (--set key=value) > --config file > built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _parse_kv(pairs):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise SystemExit(EXIT_USAGE)
        key, _, value = pair.partition("=")
        out[key] = _parse_value(value)
    return out


def _layered_config(path, sets):
    """File config overlaid with dotted-key --set overrides."""
    config = {"model": {}, "train": {}, "optimizer": {}}
    if path:
        with open(path) as fh:
            loaded = json.load(fh)
        for section in config:
            config[section].update(loaded.get(section, {}))
    for dotted, value in sets.items():
        section, _, key = dotted.partition(".")
        if section not in config or not key:
            raise SystemExit(EXIT_USAGE)
        config[section][key] = value
    return config


def build_parser() -> _Parser:
    parser = _Parser(prog="latentloop",
                     description="weight-tied iterative solver toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=0,
                       help="cap BLAS threads (0 = leave as-is)")

    g = sub.add_parser("gen-data", help="generate a dataset directory")
    common(g)
    g.add_argument("task", help="sudoku4 | sudoku9 | maze9 | maze15 | maze31")
    g.add_argument("params", nargs="*",
                   help="key=value: count, eval_count, clues, min_path, "
                        "max_path, solution_holdout")
    g.add_argument("--out", required=True)

    t = sub.add_parser("train", help="train a solver on a dataset")
    common(t)
    t.add_argument("--config", help="JSON config file (model/train/optimizer)")
    t.add_argument("--set", action="append", default=[], metavar="SEC.KEY=V")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="output prefix")
    t.add_argument("--resume", help="checkpoint to continue from")

    s = sub.add_parser("scale-sweep", help="depth/breadth scaling grid")
    common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="eval")
    s.add_argument("--depths", required=True, help="comma list, e.g. 16,64")
    s.add_argument("--breadths", required=True, help="comma list, e.g. 1,128")
    s.add_argument("--window", type=int, default=3)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--act", action="store_true",
                   help="halting queue for B=1 cells; nfe becomes measured")
    s.add_argument("--delta", type=float, default=0.0,
                   help="halting threshold with --act")
    s.add_argument("--params", choices=("raw", "ema", "both"), default="raw")
    s.add_argument("--max-instances", type=int, default=0)
    s.add_argument("--out", required=True)

    d = sub.add_parser("diagnose", help="residual/margin/projection exports")
    common(d)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--split", default="eval")
    d.add_argument("--out", required=True, help="output directory")
    d.add_argument("--residual-trace", action="store_true")
    d.add_argument("--project", action="store_true")
    d.add_argument("--margin", action="store_true")
    d.add_argument("--contraction", action="store_true")
    d.add_argument("--depth", type=int, default=16)
    d.add_argument("--restarts", type=int, default=1)
    d.add_argument("--max-instances", type=int, default=16)
    d.add_argument("--probe-pairs", type=int, default=16)
    d.add_argument("--probe-radius", type=float, default=0.1)
    return parser


# ---------------------------------------------------------------------------
# commands


TASKS = {
    "sudoku4": {"kind": "sudoku", "box": 2},
    "sudoku9": {"kind": "sudoku", "box": 3},
    "maze9": {"kind": "maze", "rows": 9, "cols": 9},
    "maze15": {"kind": "maze", "rows": 15, "cols": 15},
    "maze31": {"kind": "maze", "rows": 31, "cols": 31},
}


def cmd_gen_data(args) -> int:
    import numpy as np

    from . import tasks as T

    if args.task not in TASKS:
        sys.stderr.write(f"error: unknown task {args.task!r}; choose from "
                         f"{sorted(TASKS)}\n")
        return EXIT_USAGE
    spec = TASKS[args.task]
    params = _parse_kv(args.params)
    count = int(params.pop("count", 1000))
    eval_count = int(params.pop("eval_count", max(count // 8, 1)))
    seed = int(params.pop("seed", args.seed))

    if spec["kind"] == "sudoku":
        clues = params.pop("clues", "minimal")
        holdout = bool(params.pop("solution_holdout", spec["box"] == 2))
        if params:
            sys.stderr.write(f"error: unknown params {sorted(params)}\n")
            return EXIT_USAGE
        instances = T.gen_sudoku(spec["box"], count + 2 * eval_count,
                                 clue_policy=clues, seed=seed)
        if holdout:
            train, evals = T.split_disjoint_solutions(instances, eval_count,
                                                      seed=seed)
            train = train[:count]
        else:
            train, evals = instances[:count], instances[count:count + eval_count]
        if len(train) < count:
            raise T.GenerationError("not enough train instances after holdout")
        grid = train[0].grid
        vocab = T.SUDOKU_VOCAB
        gen_params = {"box": spec["box"], "clues": clues,
                      "solution_holdout": holdout}
        stats = {"mean_difficulty": float(np.mean(
            [i.difficulty for i in train]))}
    else:
        lo = int(params.pop("min_path", 1))
        hi = int(params.pop("max_path", 10 ** 9))
        if params:
            sys.stderr.write(f"error: unknown params {sorted(params)}\n")
            return EXIT_USAGE
        instances = T.gen_maze_unique(spec["rows"], spec["cols"],
                                      count + eval_count, path_range=(lo, hi),
                                      seed=seed)
        train, evals = instances[:count], instances[count:]
        grid = train[0].grid
        vocab = T.MAZE_VOCAB
        gen_params = {"rows": spec["rows"], "cols": spec["cols"],
                      "path_range": [lo, hi]}
        stats = {"mean_path_length": {
            "train": float(np.mean([i.difficulty for i in train])),
            "eval": float(np.mean([i.difficulty for i in evals]))}}

    os.makedirs(args.out, exist_ok=True)
    T.write_split(os.path.join(args.out, "train.txt"), train)
    T.write_split(os.path.join(args.out, "eval.txt"), evals)
    manifest = T.DatasetManifest(
        task=args.task, grid=grid, vocab=vocab,
        splits={"train": len(train), "eval": len(evals)}, seed=seed,
        params=gen_params, stats=stats)
    T.write_manifest(os.path.join(args.out, "manifest.json"), manifest)
    print(json.dumps({"task": args.task, "out": args.out,
                      "splits": manifest.splits, "stats": stats}))
    return EXIT_OK


def _load_model(checkpoint_path, use_ema=False):
    from .checkpoint import load_checkpoint
    from .model import IterativeReasoner, ModelConfig
    from .rng import RngStream

    ck = load_checkpoint(checkpoint_path)
    cfg = ModelConfig.from_dict(ck.config)
    model = IterativeReasoner(cfg, RngStream(0, "params"))
    arrays = ck.ema() if use_ema else ck.params()
    model.load_param_arrays(arrays)
    return model, ck


def cmd_train(args) -> int:
    import numpy as np

    from .checkpoint import load_checkpoint, save_checkpoint
    from .model import IterativeReasoner, ModelConfig
    from .optim import Optimizer, OptimizerConfig
    from .rng import RngStream, StreamSet
    from .scaling import ScalingBudget, acc_avg, run_dataset
    from .tasks import load_dataset
    from .training import RECORD_FIELDS, TrainConfig, train_loop

    config = _layered_config(args.config, _parse_kv(args.set))
    inputs, targets, manifest = load_dataset(args.data, "train")
    model_kw = dict(vocab_size=max(manifest.vocab) + 1,
                    seq_len=int(np.prod(manifest.grid)))
    model_kw.update(config["model"])
    model_cfg = ModelConfig(**model_kw)
    train_cfg = TrainConfig(**config["train"])
    opt_cfg = OptimizerConfig(**config["optimizer"])

    streams = StreamSet(args.seed)
    model = IterativeReasoner(model_cfg, streams.get("params"))
    opt = Optimizer(model.params, opt_cfg)
    start_step = 0
    if args.resume:
        ck = load_checkpoint(args.resume)
        model.load_param_arrays(ck.params())
        for k in model.params:
            opt.ema[k] = ck.ema()[k].copy()
        opt.load_state_arrays(ck.arrays, ck.step)
        streams.restore(ck.rng_states)
        start_step = ck.step

    eval_data = None
    if train_cfg.eval_every > 0:
        try:
            eval_data = load_dataset(args.data, "eval")[:2]
        except FileNotFoundError:
            eval_data = None

    log_path = f"{args.out}.log.csv"
    eval_path = f"{args.out}.eval.csv"
    ckpt_path = f"{args.out}.ckpt"
    append = start_step > 0
    log_fh = open(log_path, "a" if append else "w", newline="")
    log_writer = csv.writer(log_fh)
    if not append:
        log_writer.writerow(RECORD_FIELDS)
    eval_fh = None
    if eval_data is not None:
        eval_fh = open(eval_path, "a" if append else "w", newline="")
        if not append:
            csv.writer(eval_fh).writerow(["step", "eval_acc",
                                          "mean_fp_residual"])

    def save(step):
        arrays = dict(model.param_arrays())
        arrays.update({f"ema/{k}": v for k, v in opt.ema.items()})
        arrays.update(opt.state_arrays())
        save_checkpoint(ckpt_path, arrays, model_cfg.to_dict(),
                        streams.states(), step,
                        extra={"train": vars(train_cfg) | {
                            "anchor_range": list(train_cfg.anchor_range)
                            if train_cfg.anchor_range else None},
                            "optimizer": vars(opt_cfg)})

    last_eval = [start_step]

    def on_step(step):
        if train_cfg.save_every > 0 and step % train_cfg.save_every == 0:
            save(step)
        if eval_data is not None and train_cfg.eval_every > 0 and \
                step - last_eval[0] >= train_cfg.eval_every:
            last_eval[0] = step
            ex, ey = eval_data
            budget = ScalingBudget(
                depth=train_cfg.n_sup * model_cfg.outer_steps, breadth=1,
                window=1)
            per = run_dataset(model, ex[:256], budget, StreamSet(args.seed + 1))
            acc = float(np.mean([acc_avg(rs, t)
                                 for rs, t in zip(per, ey[:256])]))
            fp = float(np.mean([r.fp_residual for rs in per for r in rs]))
            csv.writer(eval_fh).writerow([step, f"{acc:.6f}", f"{fp:.6g}"])
            eval_fh.flush()

    def on_record(rec):
        log_writer.writerow([getattr(rec, f) for f in RECORD_FIELDS])

    try:
        train_loop(model, opt, train_cfg, streams, inputs, targets,
                   on_record=on_record, on_step=on_step)
    finally:
        log_fh.close()
        if eval_fh is not None:
            eval_fh.close()
    save(opt.t)
    print(json.dumps({"checkpoint": ckpt_path, "log": log_path,
                      "steps": opt.t, "params": model.n_params()}))
    return EXIT_OK


def cmd_scale_sweep(args) -> int:
    import numpy as np

    from .rng import StreamSet
    from .scaling import (SWEEP_FIELDS, ScalingBudget, act_queue_eval, nle,
                          sweep_cell)
    from .tasks import load_dataset

    depths = [int(v) for v in args.depths.split(",")]
    breadths = [int(v) for v in args.breadths.split(",")]
    if args.act and any(b != 1 for b in breadths):
        sys.stderr.write("error: --act supports breadths=1 only\n")
        return EXIT_USAGE
    inputs, targets, _ = load_dataset(args.data, args.split)
    if args.max_instances:
        inputs, targets = inputs[:args.max_instances], targets[:args.max_instances]

    param_sets = {"raw": ("raw",), "ema": ("ema",),
                  "both": ("raw", "ema")}[args.params]
    fields = list(SWEEP_FIELDS) + ["params_set"]
    rows = []
    for which in param_sets:
        model, _ = _load_model(args.checkpoint, use_ema=(which == "ema"))
        for d in depths:
            for b in breadths:
                try:
                    budget = ScalingBudget(
                        depth=d, breadth=b, window=min(args.window, d),
                        beta_eval=args.beta, act_enabled=args.act,
                        halt_threshold=args.delta)
                    if args.act:
                        results, avg_nfe = act_queue_eval(
                            inputs, model, budget, StreamSet(args.seed))
                        acc = float(np.mean([
                            np.array_equal(r.prediction, t)
                            for r, t in zip(results, targets)]))
                        row = {"D": d, "B": b, "nfe": avg_nfe,
                               "nle": nle(d, b, model.config),
                               "acc_avg": acc, "top1_conv": acc,
                               "majority": acc,
                               "mean_residual": float(np.mean(
                                   [r.window_residual for r in results])),
                               "delta_pi": 0.0}
                    else:
                        row = sweep_cell(model, inputs, targets, budget,
                                         StreamSet(args.seed))
                    row["params_set"] = which
                    rows.append(row)
                except Exception as exc:  # per-cell failure: log, continue
                    sys.stderr.write(f"cell D={d} B={b} failed: {exc}\n")
    with open(args.out, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    print(json.dumps({"out": args.out, "rows": len(rows)}))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    import numpy as np

    from .diagnostics import (collect_trajectories, contraction_probe,
                              project_trajectories, reasoner_operator)
    from .rng import StreamSet
    from .scaling import ScalingBudget, run_dataset
    from .tasks import load_dataset

    if not (args.residual_trace or args.project or args.margin
            or args.contraction):
        sys.stderr.write("error: pick at least one diagnostic "
                         "(--residual-trace/--project/--margin/--contraction)\n")
        return EXIT_USAGE
    model, _ = _load_model(args.checkpoint)
    inputs, targets, _ = load_dataset(args.data, args.split)
    inputs, targets = inputs[:args.max_instances], targets[:args.max_instances]
    os.makedirs(args.out, exist_ok=True)
    written = {}

    if args.residual_trace:
        budget = ScalingBudget(depth=args.depth, breadth=args.restarts,
                               window=min(3, args.depth))
        per = run_dataset(model, inputs, budget, StreamSet(args.seed))
        path = os.path.join(args.out, "residual_trace.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance", "restart", "step", "residual"])
            for i, rs in enumerate(per):
                for j, r in enumerate(rs):
                    for step, val in enumerate(r.residuals, start=1):
                        w.writerow([i, j, step, f"{val:.8g}"])
        written["residual_trace"] = path

    if args.margin:
        from .diagnostics import output_margin

        trajs = collect_trajectories(model, inputs, targets, depth=args.depth,
                                     restarts=args.restarts,
                                     streams=StreamSet(args.seed))
        path = os.path.join(args.out, "margins.csv")
        cfg = model.config
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance", "restart", "margin", "correct"])
            for t in trajs:
                i, j = t["traj"].split(".")
                z_final = np.asarray(t["states"][-1], dtype=np.float32)
                z_final = z_final.reshape(1, cfg.seq_len, cfg.hidden)
                gamma = output_margin(model, z_final, targets[int(i)][None])
                w.writerow([i, j, f"{gamma:.8g}", int(t["correct"])])
        written["margins"] = path

    if args.project:
        trajs = collect_trajectories(model, inputs, targets,
                                     depth=args.depth,
                                     restarts=args.restarts,
                                     streams=StreamSet(args.seed),
                                     max_instances=args.max_instances)
        path = os.path.join(args.out, "projection.csv")
        project_trajectories(trajs, path, seed=args.seed)
        written["projection"] = path

    if args.contraction:
        path = os.path.join(args.out, "contraction.csv")
        streams = StreamSet(args.seed)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["instance", "lipschitz_estimate"])
            for i in range(inputs.shape[0]):
                op = reasoner_operator(model, inputs[i])
                cfg = model.config
                state = np.zeros(2 * cfg.seq_len * cfg.hidden,
                                 dtype=np.float32)
                for _ in range(args.depth):
                    state = op(state)
                est = contraction_probe(op, state, args.probe_pairs,
                                        args.probe_radius,
                                        streams.get(f"probe.{i}"))
                w.writerow([i, f"{est:.8g}"])
        written["contraction"] = path

    print(json.dumps({"out": args.out, "written": written}))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .model import DivergenceError
    from .optim import NonFiniteGradientError
    from .tasks import GenerationError, ParseError
    from .tensor import NonFiniteError

    handler = {"gen-data": cmd_gen_data, "train": cmd_train,
               "scale-sweep": cmd_scale_sweep, "diagnose": cmd_diagnose}
    try:
        return handler[args.command](args)
    except (GenerationError, ParseError, FileNotFoundError) as exc:
        sys.stderr.write(f"data error: {exc}\n")
        return EXIT_DATA
    except (DivergenceError, NonFiniteError, NonFiniteGradientError) as exc:
        sys.stderr.write(f"numerical divergence: {exc}\n")
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())

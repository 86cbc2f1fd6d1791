"""Command-line experiment runner.

Subcommands: ``capacity``, ``gradcheck``, ``train``, ``ablate``, ``census``.

Every option may also come from a plain-text config file passed with
``--config``; one ``key = value`` per line, ``#`` starts a comment and
keys use the long flag name (dashes or underscores). Flags given on the
command line win over the file. The master seed defaults to the
``DAM_SEED`` environment variable, else 0. All randomness is derived from
it with :func:`densemem.numerics.make_rng` / :func:`derive_seed`.

Exit codes: 0 success, 1 runtime or numeric failure, 2 invalid input.
"""

from __future__ import annotations

import argparse
import io
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import dense_associative as da
from . import modern_hopfield as mh
from . import numerics as nx
from .dam import StaticMemory, dam_forward
from .errors import DenseMemError, DimensionError, FormatError, ParameterError

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("densemem")


class UsageError(Exception):
    """Bad flags or config; reported with exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print and exit itself
        raise UsageError(f"{self.prog}: {message}")


# --------------------------------------------------------------------------
# Option handling
# --------------------------------------------------------------------------


def read_config(path: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; keys are normalised to underscores."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise UsageError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in str(text).replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in str(text).replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from exc


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


class Option:
    """One command option: its flag, converter, default and whether it is required."""

    def __init__(self, name: str, kind: Callable = str, default=None, required: bool = False, help: str = ""):
        self.name, self.kind, self.default, self.required, self.help = name, kind, default, required, help

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


COMMON = [
    Option("seed", int, help="master seed (default: $DAM_SEED or 0)"),
    Option("out", str, help="output file (default: stdout)"),
    Option("config", str, help="key = value config file"),
]

COMMANDS: Dict[str, List[Option]] = {
    "capacity": [
        Option("interaction", str, required=True, help="polyN or exp"),
        Option("n", int, required=True, help="number of spins N"),
        Option("k", _int_list, required=True, help="comma-separated K grid"),
        Option("trials", int, 200),
        Option("corruption", float, 0.1, help="fraction of flipped bits"),
        Option("max-sweeps", int, 50),
    ],
    "gradcheck": [
        Option("target", str, required=True),
        Option("eps", float, 1e-6),
        Option("tol", float, None, help="pass threshold (default per target)"),
    ],
    "train": [
        Option("samples", int, 512),
        Option("occlusion", float, 0.3),
        Option("epochs", int, 60),
        Option("batch-size", int, 32),
        Option("use-memory", _bool, True),
        Option("memory-slots", int, 8),
        Option("embed-dim", int, 64),
        Option("blocks", int, 4),
        Option("heads", int, 4),
        Option("checkpoint", str, help="write the best parameters here"),
    ],
    "ablate": [
        Option("occlusion", _float_list, [0.0, 0.4], help="comma-separated occlusion levels"),
        Option("seeds", int, 3, help="number of derived seeds (>= 3)"),
        Option("samples", int, 256),
        Option("test-samples", int, 128),
        Option("epochs", int, 24),
        Option("batch-size", int, 32),
        Option("memory-slots", int, 8),
        Option("embed-dim", int, 64),
        Option("blocks", int, 4),
        Option("heads", int, 4),
    ],
    "census": [
        Option("beta", float, 32.0),
        Option("patterns", str, "well_separated_3", help="well_separated_<n> or a pattern file"),
        Option("dim", int, 8, help="pattern width for well_separated_<n>"),
        Option("probes", int, 20, help="probes per stored pattern"),
        Option("noise", float, 0.05),
        Option("iters", int, 50),
        Option("merge-tol", float, None),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="densemem", description="Dense associative memory experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name)
        for opt in COMMON + opts:
            # defaults are applied after merging with the config file
            p.add_argument(f"--{opt.name}", dest=opt.dest, type=opt.kind, default=None, help=opt.help)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> Dict[str, object]:
    """Merge defaults, config file and flags (in rising priority)."""
    opts = {o.dest: o for o in COMMON + COMMANDS[command]}
    values = {k: o.default for k, o in opts.items()}
    if ns.config:
        for key, raw in read_config(ns.config).items():
            if key not in opts or key == "config":
                raise UsageError(f"{ns.config}: unknown key {key!r} for {command}")
            try:
                values[key] = opts[key].kind(raw)
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{ns.config}: bad value for {key}: {exc}") from exc
    for key in opts:
        flag = getattr(ns, key, None)
        if flag is not None:
            values[key] = flag
    if values["seed"] is None:
        env = os.environ.get("DAM_SEED")
        try:
            values["seed"] = int(env) if env else 0
        except ValueError as exc:
            raise UsageError(f"DAM_SEED must be an integer, got {env!r}") from exc
    if values["seed"] < 0:
        raise UsageError("seed must be >= 0")
    missing = [f"--{o.name}" for o in COMMANDS[command] if o.required and values[o.dest] is None]
    if missing:
        raise UsageError(f"{command}: missing required option(s) {', '.join(missing)}")
    return values


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ParameterError(message)


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_capacity(v) -> int:
    inter = da.Interaction.parse(v["interaction"])
    _require(1 <= v["n"] <= 256, f"--n must lie in [1, 256], got {v['n']}")
    _require(v["trials"] >= 50, f"--trials must be >= 50, got {v['trials']}")
    _require(0.0 <= v["corruption"] <= 1.0, "--corruption must lie in [0, 1]")
    _require(bool(v["k"]) and min(v["k"]) >= 1, "--k needs values >= 1")
    _require(v["max_sweeps"] >= 1, "--max-sweeps must be >= 1")
    rows = da.capacity_experiment(inter, v["n"], v["k"], v["corruption"], v["trials"], v["seed"], v["max_sweeps"])
    buf = io.StringIO()
    da.write_capacity_csv(rows, buf)
    _emit(buf.getvalue(), v["out"])
    return EXIT_OK


def _target_energy(seed: int):
    rng = nx.make_rng(seed, "gradcheck", "energy_continuous")
    store = mh.ContinuousStore(rng.standard_normal((8, 5)), float(rng.uniform(0.2, 4.0)))
    return (lambda t: mh.energy_continuous(store, t)), rng.standard_normal(8), None, 1e-5


def _dam_instance(rng):
    xi = rng.standard_normal((4, 8))
    W_k = np.eye(8) + 0.3 * rng.standard_normal((8, 8))
    Q = rng.standard_normal((3, 8))
    w = nx.Tensor(rng.standard_normal((3, 8)))
    return xi, W_k, Q, w


def _target_dam_forward(seed: int):
    xi, W_k, Q, w = _dam_instance(nx.make_rng(seed, "gradcheck", "dam_forward"))
    f = lambda t: nx.sum(nx.mul(dam_forward(StaticMemory(nx.Tensor(xi), nx.Tensor(W_k)), t), w))
    return f, Q, None, 1e-5


def _target_dam_slots(seed: int):
    xi, W_k, Q, w = _dam_instance(nx.make_rng(seed, "gradcheck", "dam_forward"))
    f = lambda t: nx.sum(nx.mul(dam_forward(StaticMemory(t, nx.Tensor(W_k)), nx.Tensor(Q)), w))
    return f, xi, None, 1e-5


def _target_dam_projection(seed: int):
    xi, W_k, Q, w = _dam_instance(nx.make_rng(seed, "gradcheck", "dam_forward"))
    f = lambda t: nx.sum(nx.mul(dam_forward(StaticMemory(nx.Tensor(xi), t), nx.Tensor(Q)), w))
    return f, W_k, None, 1e-5


def _target_seg_loss(seed: int):
    from .seg.data import generate_dataset, stack
    from .seg.model import SegConfig, forward_seg, init_params, seg_loss

    cfg = SegConfig(image_size=16, embed_dim=16, blocks=2, heads=2, memory_slots=4)
    params = init_params(cfg, seed)
    images, masks = stack(generate_dataset(2, 0.3, nx.derive_seed(seed, "gradcheck"), cfg.image_size))
    name = "mem1.W_k"
    rng = nx.make_rng(seed, "gradcheck", "seg_loss")
    idx = rng.choice(params[name].data.size, 32, replace=False)

    def f(t):
        ps = {k: (t if k == name else nx.Tensor(p.data)) for k, p in params.items()}
        return seg_loss(forward_seg(cfg, ps, images), masks)

    return f, params[name].data, idx, 1e-4


GRADCHECK_TARGETS = {
    "energy_continuous": _target_energy,
    "dam_forward": _target_dam_forward,
    "dam_forward_xi": _target_dam_slots,
    "dam_forward_wk": _target_dam_projection,
    "seg_loss": _target_seg_loss,
}


def cmd_gradcheck(v) -> int:
    if v["target"] not in GRADCHECK_TARGETS:
        raise ParameterError(f"unknown target {v['target']!r}; targets: {', '.join(sorted(GRADCHECK_TARGETS))}")
    f, x, idx, default_tol = GRADCHECK_TARGETS[v["target"]](v["seed"])
    tol = default_tol if v["tol"] is None else v["tol"]
    err = nx.grad_check(f, x, eps=v["eps"], indices=idx)
    ok = err < tol
    _emit(
        f"target,seed,eps,max_rel_err,tol,pass\n{v['target']},{v['seed']},{v['eps']!r},{err!r},{tol!r},{int(ok)}\n",
        v["out"],
    )
    return EXIT_OK if ok else EXIT_RUNTIME


def _seg_config(v, use_memory: bool):
    from .seg.model import SegConfig

    return SegConfig(
        embed_dim=v["embed_dim"], blocks=v["blocks"], heads=v["heads"],
        memory_slots=v["memory_slots"], use_memory=use_memory,
    )


def cmd_train(v) -> int:
    from .seg.checkpoint import save_checkpoint
    from .seg.data import generate_dataset
    from .seg.train import TrainConfig, train

    _require(v["samples"] >= 1, "--samples must be >= 1")
    _require(0.0 <= v["occlusion"] <= 1.0, "--occlusion must lie in [0, 1]")
    seg_cfg = _seg_config(v, v["use_memory"])
    train_cfg = TrainConfig.scaled(v["epochs"], batch_size=v["batch_size"])
    data = generate_dataset(v["samples"], v["occlusion"], v["seed"], seg_cfg.image_size)
    params, record = train(seg_cfg, train_cfg, data, v["seed"])
    buf = io.StringIO()
    record.write_csv(buf, seg_cfg.classes)
    _emit(buf.getvalue(), v["out"])
    if v["checkpoint"]:
        save_checkpoint(seg_cfg, params, v["checkpoint"])
    return EXIT_OK


def cmd_ablate(v) -> int:
    from .seg.train import TrainConfig, ablate, write_ablation_csv

    _require(v["seeds"] >= 3, f"--seeds must be >= 3, got {v['seeds']}")
    _require(all(0.0 <= x <= 1.0 for x in v["occlusion"]) and v["occlusion"], "--occlusion levels must lie in [0, 1]")
    _require(v["samples"] >= 1 and v["test_samples"] >= 1, "sample counts must be >= 1")
    seeds = [nx.derive_seed(v["seed"], "ablate", j) for j in range(v["seeds"])]
    train_cfg = TrainConfig.scaled(v["epochs"], batch_size=v["batch_size"])
    rows = ablate(_seg_config(v, True), train_cfg, v["occlusion"], seeds, v["samples"], v["test_samples"])
    buf = io.StringIO()
    write_ablation_csv(rows, buf)
    _emit(buf.getvalue(), v["out"])
    return EXIT_OK


def read_pattern_file(path: str) -> np.ndarray:
    """One stored pattern per line (numbers split by commas or whitespace).

    Returns the d×N matrix whose columns are the patterns.
    """
    rows = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise FormatError(f"cannot read pattern file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            row = [float(x) for x in line.replace(",", " ").split()]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: not a list of numbers") from exc
        if not all(np.isfinite(row)):
            raise FormatError(f"{path}:{lineno}: non-finite value")
        if rows and len(row) != len(rows[0]):
            raise FormatError(f"{path}:{lineno}: expected {len(rows[0])} values, got {len(row)}")
        rows.append(row)
    if not rows:
        raise FormatError(f"{path}: no patterns")
    return np.array(rows).T


def cmd_census(v) -> int:
    _require(v["beta"] > 0, "--beta must be > 0")
    _require(v["iters"] >= 1, "--iters must be >= 1")
    _require(v["probes"] >= 1, "--probes must be >= 1")
    _require(v["noise"] >= 0, "--noise must be >= 0")
    spec = v["patterns"]
    if spec.startswith("well_separated_"):
        try:
            n = int(spec.rsplit("_", 1)[1])
        except ValueError as exc:
            raise ParameterError(f"bad pattern preset {spec!r}") from exc
        store = mh.well_separated_store(n, v["dim"], v["beta"])
    else:
        store = mh.ContinuousStore(read_pattern_file(spec), v["beta"])
    probes = mh.noisy_probes(store, v["probes"], v["noise"], nx.make_rng(v["seed"], "census"))
    census = mh.metastable_census(store, probes, v["iters"], v["merge_tol"])
    buf = io.StringIO()
    mh.write_census_csv(census, buf)
    _emit(buf.getvalue(), v["out"])
    return EXIT_OK


HANDLERS = {
    "capacity": cmd_capacity,
    "gradcheck": cmd_gradcheck,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "census": cmd_census,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError(f"choose a command: {', '.join(HANDLERS)}")
        values = resolve(ns.command, ns)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if ns.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return HANDLERS[ns.command](values)
    except (ParameterError, DimensionError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DenseMemError, ArithmeticError, OSError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    main_entry()

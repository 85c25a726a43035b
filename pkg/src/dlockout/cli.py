"""Command-line front end.

The lockout state file stands in for the chip's non-volatile counter, so
every command that runs the hardened design reads it under an exclusive
lock and writes it back atomically.  A missing or unreadable state file is
treated as a dead device.
"""

from __future__ import annotations

import argparse
import contextlib
import fcntl
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Any, Iterator, Sequence

from . import __version__
from .attacks import (
    AttackError,
    FaultSpec,
    Oracle,
    brute_force,
    dpa_attack,
    exhaustive_stream,
    fault_attack,
    golden_pairs,
    probe_vectors,
    random_stream,
)
from .bench import BENCH_WIDTHS, KINDS, generate_benchmark
from .ir import Design, DesignError, parse_design, serialize_design, structural_counts
from .lockout import DEFAULT_THRESHOLD, LockoutState, attach_checker, attach_comparators, attach_edu, harden_controller
from .metrics import (
    attempt_prob,
    correlation_r0,
    fault_trials,
    format_tables,
    key_prob,
    mtd0,
    mtd1,
    reproduce_tables,
)
from .obfuscate import (
    apply_masking,
    hex_to_bits,
    insert_key_muxes,
    points_from_design,
    provisioned_key,
    select_points,
)
from .sim import extract_power_trace, run_pass, simulate

STATE_ENV = "DLOCKOUT_STATE_DIR"
DEFAULT_STATE_DIR = ".dlockout"
PROJECT_FILE = "project.json"


class CliError(Exception):
    """Usage, IO or validation problem; reported on stderr with exit code 1."""


class PolicyError(CliError):
    pass


# ---------------------------------------------------------------------------
# file helpers


def _read_design(path: str) -> Design:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read design {path}: {exc.strerror}") from None
    return parse_design(text)


def atomic_write(path: Path, text: str) -> None:
    """Write-temp-then-rename, so readers see either the old or the new file."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def _write(path: str | Path, text: str) -> None:
    atomic_write(Path(path), text)


def state_dir(arg: str | None) -> Path:
    return Path(arg or os.environ.get(STATE_ENV) or DEFAULT_STATE_DIR)


def state_path(sdir: Path, d: Design) -> Path:
    return sdir / f"{d.name}.state.json"


@contextlib.contextmanager
def locked(path: Path) -> Iterator[None]:
    """Advisory exclusive lock on ``path`` (single writer per state file)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path.with_name(path.name + ".lock"), "a") as fh:
        fcntl.flock(fh, fcntl.LOCK_EX)
        try:
            yield
        finally:
            fcntl.flock(fh, fcntl.LOCK_UN)


def load_state(path: Path, d: Design) -> LockoutState:
    """Fail-closed: any problem with the state file refuses the run."""
    try:
        data = json.loads(path.read_text())
        st = LockoutState.from_dict(data)
    except FileNotFoundError:
        raise CliError(f"lockout state {path} is missing; refusing to run (treated as FULL lockout)") from None
    except (OSError, ValueError) as exc:
        raise CliError(f"lockout state {path} is corrupt ({exc}); refusing to run (treated as FULL lockout)") from None
    if data.get("design") not in (None, d.name):
        raise CliError(f"lockout state {path} belongs to design {data.get('design')!r}")
    if d.dlockout and st.threshold != d.dlockout["threshold"]:
        raise CliError(f"lockout state {path} threshold {st.threshold} disagrees with the design")
    return st


def save_state(path: Path, d: Design, st: LockoutState) -> None:
    atomic_write(path, json.dumps(dict(st.to_dict(), design=d.name), indent=2) + "\n")


def _project(sdir: Path) -> dict[str, Any]:
    p = sdir / PROJECT_FILE
    if not p.exists():
        return {"keyspec_dirs": []}
    try:
        return json.loads(p.read_text())
    except ValueError:
        raise CliError(f"project file {p} is corrupt") from None


def _register_keyspec(sdir: Path, keyspec: Path) -> None:
    proj = _project(sdir)
    kdir = str(keyspec.resolve().parent)
    if kdir not in proj["keyspec_dirs"]:
        proj["keyspec_dirs"].append(kdir)
    atomic_write(sdir / PROJECT_FILE, json.dumps(proj, indent=2) + "\n")


def check_attack_paths(sdir: Path, paths: Sequence[str | None]) -> None:
    """Attack commands must not touch anything in a keyspec directory."""
    kdirs = [Path(k) for k in _project(sdir)["keyspec_dirs"]]
    for raw in paths:
        if raw is None:
            continue
        p = Path(raw).resolve()
        if p.name.endswith(".keyspec.json"):
            raise PolicyError(f"policy: attack commands may not use keyspec file {raw}")
        for k in kdirs:
            if p == k or k in p.parents:
                raise PolicyError(f"policy: {raw} lies inside keyspec directory {k}")


def _parse_key(text: str, width: int) -> list[int]:
    try:
        return hex_to_bits(text, width)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _load_inputs(path: str | None, d: Design) -> list[dict[str, int]]:
    if path is None:
        return [{p.name: 0 for p in d.inputs}]
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read input vectors {path}: {exc}") from None
    if isinstance(data, dict):
        data = [data]
    if not isinstance(data, list) or not all(isinstance(v, dict) for v in data):
        raise CliError("input-vector file must be a JSON array of port->value maps")
    return [{k: int(v) for k, v in vec.items()} for vec in data]


def _print(obj: Any) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# commands


def cmd_generate(a) -> None:
    d = generate_benchmark(a.kind, a.size, a.seed, a.states, a.width)
    _write(a.output, serialize_design(d))
    c = structural_counts(d)
    print(f"{d.name}: {c['nodes']} nodes, {c['nets']} nets, {c['states']} states -> {a.output}")


def _overhead(before: Design, after: Design) -> dict[str, int]:
    b, c = structural_counts(before), structural_counts(after)
    return {k: c[k] - b[k] for k in ("mux", "xor", "nets", "states", "counter", "checker", "mask_cell")}


def cmd_obfuscate(a) -> None:
    d = _read_design(a.design)
    nets = select_points(d, a.m, a.policy, a.seed)
    od, spec, _ = insert_key_muxes(d, nets, a.seed)
    keyspec = Path(a.keyspec or Path("secrets") / f"{od.name}.keyspec.json")
    _write(a.output, serialize_design(od))
    _write(keyspec, spec.to_json())
    _register_keyspec(state_dir(a.state_dir), keyspec)
    ov = _overhead(d, od)
    print(f"key_width {od.key_width}; added {ov['mux']} MUXes, {ov['xor']} XORs, {ov['nets']} nets, "
          f"{ov['states']} FSM states -> {a.output} (keyspec {keyspec})")


def cmd_lockout(a) -> None:
    if a.X < 1:
        raise CliError("X must be >= 1")
    d = _read_design(a.design)
    if d.dlockout is not None:
        raise CliError("design is already hardened")
    points = points_from_design(d)
    h = d
    if a.mask:
        if not a.keyspec:
            raise CliError("--mask changes the correct key; pass --keyspec to record it")
        h, spec = apply_masking(h, points, a.seed)
        points = list(spec.points)
        _write(a.keyspec, spec.to_json())
        _register_keyspec(state_dir(a.state_dir), Path(a.keyspec))
    h = attach_comparators(h, points)
    h = attach_checker(h, a.X)
    h = harden_controller(h)
    if a.edu:
        h = attach_edu(h)
    sdir = state_dir(a.state_dir)
    sp = state_path(sdir, h)
    with locked(sp):
        if sp.exists() and not a.reset_state:
            raise CliError(f"lockout state {sp} already exists; --reset-state (designer only) overwrites it")
        _write(a.output, serialize_design(h))
        save_state(sp, h, LockoutState(0, a.X))
    ov = _overhead(d, h)
    print(f"hardened {h.name}: +{len(h.nodes_by_role('comparator'))} comparators, "
          f"+{len(h.nodes_by_role('shadow_comparator'))} shadow comparators, +{ov['counter']} counter, "
          f"+{ov['checker']} checker, +{ov['states']} state; X={a.X} -> {a.output}; state {sp}")


def cmd_simulate(a) -> None:
    d = _read_design(a.design)
    key = _parse_key(a.key, d.key_width)
    inputs = _load_inputs(a.inputs, d)
    sp = state_path(state_dir(a.state_dir), d)
    with locked(sp):
        st = load_state(sp, d)
        if a.cycles is None:
            r = run_pass(d, key, inputs[0], st)
            new, outputs, blackhole = r.lockout, r.outputs, r.blackhole
            trace = None
        else:
            trace, new = simulate(d, key, inputs, a.cycles, st)
            last = trace.snapshots[-1]
            outputs = dict(last.outputs)
            blackhole = last.state == (d.dlockout or {}).get("blackhole_state")
        if new.counter < st.counter:  # pragma: no cover - guarded by the simulator
            raise CliError("internal error: counter decreased")
        save_state(sp, d, new)
    if trace is not None and a.trace:
        _write(a.trace, trace.to_json() + "\n")
    if trace is not None and a.power:
        _write(a.power, extract_power_trace(trace, a.sigma, a.seed).to_csv())
    _print({"phase": new.phase.value, "outputs": outputs, "blackhole": bool(blackhole)})


def _golden(a, d: Design) -> list:
    if not a.reference:
        raise CliError("--reference (a working, unlocked design) is required for golden I/O pairs")
    ref = _read_design(a.reference)
    return golden_pairs(ref, probe_vectors(d, a.seed))


def _stream(a, m: int):
    if a.stream == "exhaustive":
        return exhaustive_stream(m)
    return random_stream(m, a.seed)


def cmd_attack(a) -> None:
    sdir = state_dir(a.state_dir)
    check_attack_paths(sdir, [a.design, getattr(a, "reference", None), a.output])
    d = _read_design(a.design)
    if a.mode == "brute":
        golden = _golden(a, d)
        sp = state_path(sdir, d)
        with locked(sp):
            st = load_state(sp, d)
            o = Oracle(d, st)
            rep = brute_force(o, _stream(a, d.key_width), a.budget, golden, a.seed)
            save_state(sp, d, o._lockout)
    elif a.mode == "fault":
        golden = _golden(a, d)
        targets = tuple(a.targets) if a.targets else tuple(
            sorted(n.params["point"] for n in d.nodes_by_role("comparator")))
        if a.no_edu and d.dlockout and d.dlockout.get("edu"):
            raise CliError("--no-edu given but the design has an EDU attached")
        f = FaultSpec(targets, a.saf, a.copies, None, a.fault_from)
        rep = fault_attack(d, f, _stream(a, d.key_width), golden, a.budget, a.seed)
    else:
        rep = dpa_attack(d, provisioned_key(d), a.traces, a.sigma, a.seed, p=a.p, verify=True)
    text = rep.to_json()
    if a.output:
        _write(a.output, text)
    print(text, end="")


def cmd_metrics(a) -> None:
    what = a.what
    if what == "tables":
        print(format_tables(reproduce_tables(a.C), a.format), end="")
        return
    if what == "r0":
        out = {"p": a.p, "q": a.q, "r0": correlation_r0(a.p, a.q)}
    elif what == "mtd":
        m0 = mtd0(correlation_r0(a.p, a.q), a.C)
        out = {"MTD0": m0, "MTD1": round(mtd1(a.M, a.N, a.r1sq, m0)), "MTD1_exact": mtd1(a.M, a.N, a.r1sq, m0)}
    elif what == "keyprob":
        P = key_prob(a.m, a.n)
        out = {"m": a.m, "n": a.n, "P": P.render(a.exp, a.decimals, a.mode)}
    elif what == "attempt":
        f = attempt_prob(a.K, a.X, key_prob(a.m, a.n), standard=a.standard)
        out = {"K": a.K, "X": a.X, "form": "standard" if a.standard else "reference",
               "f": f.render(a.exp, a.decimals, a.mode)}
    else:
        out = {"m": a.m, "n_dev": a.ndev, "X": a.X, "trials": fault_trials(a.m, a.ndev, a.X)}
    if a.format == "json":
        _print(out)
    elif a.format == "csv":
        print(",".join(out))
        print(",".join(str(v) for v in out.values()))
    else:
        for k, v in out.items():
            print(f"{k}: {v}")


def cmd_report(a) -> None:
    d = _read_design(a.design)
    counts = structural_counts(d)
    out: dict[str, Any] = {"design": d.name, "counts": counts}
    if a.baseline:
        out["added"] = _overhead(_read_design(a.baseline), d)
    if d.dlockout:
        out["dlockout"] = d.dlockout
    _print(out)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dlockout", description="Key obfuscation with design lockout.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--state-dir", help=f"lockout state directory (env {STATE_ENV}, default {DEFAULT_STATE_DIR})")
        if seed:
            p.add_argument("--seed", type=int, default=0, help="single source of randomness")

    p = sub.add_parser("generate", help="write a synthetic benchmark design")
    p.add_argument("--kind", choices=KINDS, required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--states", type=int)
    p.add_argument("--width", type=int, default=8, choices=BENCH_WIDTHS)
    p.add_argument("-o", "--output", required=True)
    common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("obfuscate", help="insert m key MUXes")
    p.add_argument("design")
    p.add_argument("-m", type=int, required=True)
    p.add_argument("--policy", choices=("max-slack", "random"), default="max-slack")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--keyspec", help="keyspec output (default secrets/<name>.keyspec.json)")
    common(p)
    p.set_defaults(func=cmd_obfuscate)

    p = sub.add_parser("lockout", help="harden an obfuscated design and initialise its state file")
    p.add_argument("design")
    p.add_argument("-X", type=int, default=DEFAULT_THRESHOLD)
    p.add_argument("--mask", action="store_true")
    p.add_argument("--edu", action="store_true")
    p.add_argument("--keyspec", help="keyspec to rewrite when masking")
    p.add_argument("--reset-state", action="store_true", help="designer only: overwrite an existing state file")
    p.add_argument("-o", "--output", required=True)
    common(p)
    p.set_defaults(func=cmd_lockout)

    p = sub.add_parser("simulate", help="run the design once under a key (updates the state file)")
    p.add_argument("design")
    p.add_argument("--key", required=True, help="hex key, bit i = key cell i")
    p.add_argument("--inputs", help="JSON array of per-cycle port->value maps")
    p.add_argument("--cycles", type=int, help="cycles to run (default: one schedule pass)")
    p.add_argument("--trace", help="trace JSON output (with --cycles)")
    p.add_argument("--power", help="power CSV output (with --cycles)")
    p.add_argument("--sigma", type=float, default=0.0)
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("attack", help="run an attack harness and write a JSON report")
    asub = p.add_subparsers(dest="mode", required=True)
    for mode in ("brute", "dpa", "fault"):
        q = asub.add_parser(mode)
        q.add_argument("design")
        q.add_argument("-o", "--output")
        common(q)
        if mode in ("brute", "fault"):
            q.add_argument("--reference", help="working unlocked design for golden I/O pairs")
            q.add_argument("--stream", choices=("exhaustive", "random"), default="exhaustive")
        if mode == "brute":
            q.add_argument("--budget", type=int, default=100)
        if mode == "fault":
            q.add_argument("--saf", type=int, choices=(0, 1), default=0)
            q.add_argument("--targets", type=int, nargs="*")
            q.add_argument("--copies", type=int, default=1)
            q.add_argument("--fault-from", type=int, default=1, help="first attempt (per copy) with the fault applied")
            q.add_argument("--budget", type=int)
            q.add_argument("--no-edu", action="store_true", help="assert the design has no EDU")
        if mode == "dpa":
            q.add_argument("--traces", type=int, default=5000)
            q.add_argument("--sigma", type=float, default=1.0)
            q.add_argument("-p", type=int, help="plaintext bits that switch (default: all)")
        q.set_defaults(func=cmd_attack)

    p = sub.add_parser("metrics", help="analytic formulas and table regeneration")
    msub = p.add_subparsers(dest="what", required=True)

    def fmt(q):
        q.add_argument("--format", choices=("text", "csv", "json"), default="text")

    def render(q):
        q.add_argument("--exp", type=int, help="fixed exponent for rendering")
        q.add_argument("--decimals", type=int, default=3)
        q.add_argument("--mode", choices=("round", "truncate"), default="round")

    q = msub.add_parser("tables")
    q.add_argument("-C", type=float, default=1.0)
    fmt(q)
    q = msub.add_parser("r0")
    q.add_argument("-p", type=int, required=True)
    q.add_argument("-q", type=int, required=True)
    fmt(q)
    q = msub.add_parser("mtd")
    for flag in ("-M", "-N", "-p", "-q"):
        q.add_argument(flag, type=int, required=True)
    q.add_argument("--r1sq", type=float, required=True)
    q.add_argument("-C", type=float, default=1.0)
    fmt(q)
    q = msub.add_parser("keyprob")
    q.add_argument("-m", type=int, required=True)
    q.add_argument("-n", type=int, required=True)
    render(q)
    fmt(q)
    q = msub.add_parser("attempt")
    for flag in ("-K", "-X", "-m", "-n"):
        q.add_argument(flag, type=int, required=True)
    q.add_argument("--standard", action="store_true", help="binomial pmf instead of the reference form")
    render(q)
    fmt(q)
    q = msub.add_parser("fault-trials")
    q.add_argument("-m", type=int, required=True)
    q.add_argument("--ndev", type=int, required=True)
    q.add_argument("-X", type=int, required=True)
    fmt(q)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("report", help="structural counts (and overhead against a baseline)")
    p.add_argument("design")
    p.add_argument("--baseline")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, DesignError, AttackError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line surface tying the modules into reproducible runs.

Commands: check (oracle-equivalence suite), theory (Monte Carlo claim
checks), train (one logged run), sweep (width x seed grid).  A single INI
config file is the source of truth; flags override individual keys and the
manifest written next to every output records the merged result.

Exit codes: 0 success, 1 check or statistical failure, 2 configuration
error, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import configparser
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .curvature import decompose, estimate_curvature, psd_check
from .diff import (
    fd_hessian,
    ggn_vp,
    half_squared_error,
    hvp,
    output_gradient,
    output_hessian,
    output_hessian_grad_product,
    raw_output,
    squared_error,
)
from .errors import ConfigError, CurvkitError, DivergenceError
from .experiment import (
    TrainConfig,
    generate_dataset,
    save_dataset,
    sgd_train,
    width_sweep,
)
from .network import (
    IDENTITY,
    RELU,
    Architecture,
    Network,
    init_network,
    load_network,
    save_network,
)
from .rng import AUX_STREAM, DISTRIBUTION_KINDS, RngStream
from .tables import write_csv
from .theory import (
    CurvatureBoundParams,
    McConfig,
    backfit_variance_constant,
    mc_bilinear_products,
    mc_cross_sample_stats,
    mc_curvature_positivity,
    mc_grad_norm_stats,
    mc_quadform_stats,
    positive_curvature_bound,
    predicted_variance_scale,
    quadform_samples,
)

MANIFEST_SCHEMA = "curvkit.manifest.v1"

THEORY_SUBCOMMANDS = ("thm1", "thm2", "norm", "identities", "cross")


def _parse_int_list(raw: str) -> list[int]:
    toks = raw.replace(",", " ").split()
    try:
        return [int(t) for t in toks]
    except ValueError as exc:
        raise ConfigError(f"expected integers, got {raw!r}") from exc


def _parse_int(raw: str) -> int:
    try:
        return int(raw)
    except ValueError as exc:
        raise ConfigError(f"expected an integer, got {raw!r}") from exc


def _parse_float(raw: str) -> float:
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"expected a number, got {raw!r}") from exc


def _parse_str(raw: str) -> str:
    return raw.strip()


# Section -> key -> (parser, default).  Unknown sections or keys are rejected.
CONFIG_SPEC = {
    "arch": {
        "widths": (_parse_int_list, [4, 5, 6, 3, 1]),
        "activation": (_parse_str, IDENTITY),
    },
    "init": {
        "distribution": (_parse_str, "gaussian"),
        "seed": (_parse_int, 1),
        "gain": (_parse_str, "auto"),
    },
    "train": {
        "lr": (_parse_float, 0.1),
        "halve_at": (_parse_int_list, [40, 80, 120]),
        "batch_size": (_parse_int, 100),
        "epochs": (_parse_int, 100),
        "probe_every": (_parse_int, 0),
    },
    "data": {
        "n_samples": (_parse_int, 1000),
        "seed": (_parse_int, 2),
    },
    "mc": {
        "trials": (_parse_int, 20000),
        "seed": (_parse_int, 3),
    },
    "out": {
        "directory": (_parse_str, "curvkit_out"),
    },
    "sweep": {
        "widths": (_parse_int_list, [50, 200, 400]),
        "n_seeds": (_parse_int, 10),
    },
    "theory": {
        "epsilon": (_parse_float, 0.1),
        "alpha": (_parse_float, 2.0),
        "beta": (_parse_float, 0.5),
        "gamma": (_parse_float, 1.0),
        "stderr_sigmas": (_parse_float, 4.0),
        "mean_tol_rel": (_parse_float, 0.10),
        "target_magnitude": (_parse_float, 1.0),
    },
}


def default_config() -> dict:
    return {sec: {k: copy.deepcopy(d) for k, (_, d) in keys.items()} for sec, keys in CONFIG_SPEC.items()}


def load_config(path: str | None) -> dict:
    """Defaults merged with an INI file; unknown sections or keys rejected."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        if section not in CONFIG_SPEC:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in CONFIG_SPEC[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            cfg[section][key] = CONFIG_SPEC[section][key][0](raw)
    _validate_config(cfg)
    return cfg


def _validate_config(cfg: dict) -> None:
    if cfg["arch"]["activation"] not in (IDENTITY, RELU):
        raise ConfigError(f"activation must be identity or relu, got {cfg['arch']['activation']!r}")
    if cfg["init"]["distribution"] not in DISTRIBUTION_KINDS:
        raise ConfigError(f"distribution must be one of {DISTRIBUTION_KINDS}")
    if any(w < 1 for w in cfg["arch"]["widths"]) or len(cfg["arch"]["widths"]) < 2:
        raise ConfigError(f"invalid widths {cfg['arch']['widths']}")
    if cfg["train"]["lr"] < 0:
        raise ConfigError("train lr must be non-negative")
    if cfg["mc"]["trials"] < 2:
        raise ConfigError("mc trials must be >= 2")


def _write_manifest(out_dir: Path, command: str, cfg: dict, extra: dict, started: float) -> None:
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "toolkit_version": __version__,
        "command": command,
        "config": cfg,
        "timing_s": round(time.perf_counter() - started, 3),
    }
    manifest.update(extra)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _prepare_out(cfg: dict, override: str | None) -> Path:
    out_dir = Path(override if override is not None else cfg["out"]["directory"])
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg["out"]["directory"] = str(out_dir)
    return out_dir


# ---------------------------------------------------------------------------
# check
# ---------------------------------------------------------------------------


def _relative(num: float, den: float) -> float:
    return num / max(den, 1e-300)


def _run_checks(net: Network, cfg: dict) -> list[dict]:
    gen = RngStream(cfg["data"]["seed"], AUX_STREAM).generator()
    n0 = net.arch.widths[0]
    inputs = gen.standard_normal((4, n0))
    inputs /= np.linalg.norm(inputs, axis=1, keepdims=True)
    targets = gen.integers(0, 2, size=4).astype(np.float64) * 2.0 - 1.0
    loss = squared_error()
    checks: list[dict] = []

    def add(name: str, value: float, tolerance: float) -> None:
        checks.append(
            {
                "name": name,
                "value": float(value),
                "tolerance": float(tolerance),
                # NaN must fail, so compare in the passing direction only.
                "passed": bool(value <= tolerance),
            }
        )

    with np.errstate(all="ignore"):
        x0 = inputs[0]
        dense = output_hessian(net, x0)
        dense_norm = np.linalg.norm(dense)
        add("output-hessian-symmetry", _relative(np.linalg.norm(dense - dense.T), dense_norm), 1e-10)

        fd_raw = fd_hessian(net, x0, 0.0, raw_output())
        add("output-hessian-vs-fd", _relative(np.linalg.norm(dense - fd_raw), np.linalg.norm(fd_raw)), 1e-5)

        g = output_gradient(net, x0)
        reference = dense @ g
        cases = output_hessian_grad_product(net, x0)
        add("case-product-vs-dense", _relative(np.linalg.norm(cases - reference), np.linalg.norm(reference)), 1e-10)

        dec = decompose(net, inputs, targets, loss)
        fd_loss = fd_hessian(net, inputs, targets, loss)
        add("decomposition-vs-fd", _relative(np.linalg.norm(dec.hessian - fd_loss), np.linalg.norm(fd_loss)), 1e-4)

        try:
            report = psd_check(dec.gauss_newton)
            add("gauss-newton-psd", -report.min_eigenvalue, -report.threshold)
        except CurvkitError:
            add("gauss-newton-psd", float("nan"), 0.0)

        worst_h = worst_g = 0.0
        for _ in range(50):
            v = gen.standard_normal(net.param_index.n_params)
            hv = hvp(net, inputs, targets, loss, v)
            ref_h = dec.hessian @ v
            worst_h = max(worst_h, _relative(np.linalg.norm(hv - ref_h), np.linalg.norm(ref_h)))
            gv = ggn_vp(net, inputs, targets, loss, v)
            ref_g = dec.gauss_newton @ v
            worst_g = max(worst_g, _relative(np.linalg.norm(gv - ref_g), np.linalg.norm(ref_g)))
        if np.isnan(dense_norm):
            worst_h = worst_g = float("nan")
        add("hvp-vs-dense", worst_h, 1e-4)
        add("ggn-vs-dense", worst_g, 1e-10)

        # One-step estimator on the one-parameter quadratic: exact at any rate.
        quad_net = Network(Architecture((1, 1)), [np.array([[1.5]])])
        quad_loss = half_squared_error(0.0)
        w = quad_net.weights[0][0, 0]
        lr = 0.05
        loss_before = 0.5 * w**2
        loss_after = 0.5 * (w - lr * w) ** 2
        est = estimate_curvature(loss_before, loss_after, w**2, lr)
        add("estimator-quadratic", abs(est - 0.5 * w**2), 1e-10)
    return checks


def cmd_check(cfg: dict, weights_path: str | None, out_dir: Path) -> int:
    if cfg["arch"]["activation"] != IDENTITY:
        print(
            "error: unsupported activation for the closed-form curvature checks: "
            f"{cfg['arch']['activation']!r} (identity required)",
            file=sys.stderr,
        )
        return 2
    started = time.perf_counter()
    if weights_path is not None:
        net = load_network(weights_path, strict=False)
        if net.arch.activation != IDENTITY:
            print("error: unsupported activation in weight file (identity required)", file=sys.stderr)
            return 2
    else:
        arch = Architecture(tuple(cfg["arch"]["widths"]), IDENTITY)
        net = init_network(arch, cfg["init"]["distribution"], RngStream(cfg["init"]["seed"], 0))
    if net.param_index.n_params > 4000:
        print("error: check requires a small architecture (P <= 4000)", file=sys.stderr)
        return 2
    checks = _run_checks(net, cfg)
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['name']}: value={c['value']:.3e} tol={c['tolerance']:.3e}")
    failures = [c for c in checks if not c["passed"]]
    (out_dir / "check_report.json").write_text(json.dumps(checks, indent=2) + "\n")
    _write_manifest(out_dir, "check", cfg, {"n_failures": len(failures)}, started)
    if failures:
        print(f"FAILED: first failing check is {failures[0]['name']}", file=sys.stderr)
        return 1
    print("all checks passed")
    return 0


# ---------------------------------------------------------------------------
# theory
# ---------------------------------------------------------------------------


def _mc_config(cfg: dict) -> McConfig:
    if cfg["arch"]["activation"] != IDENTITY:
        raise ConfigError("theory checks require identity activation")
    return McConfig(
        widths=tuple(cfg["arch"]["widths"]),
        distribution=cfg["init"]["distribution"],
        input_mode="fixed",
        n_trials=cfg["mc"]["trials"],
        master_seed=cfg["mc"]["seed"],
    )


def _require_constant_shape(widths: tuple[int, ...]) -> None:
    if len(set(widths[:-1])) != 1:
        raise ConfigError("this subcommand expects constant-shape widths (all equal except the output)")


def cmd_theory(sub: str, cfg: dict, out_dir: Path, threads: int) -> int:
    started = time.perf_counter()
    mc = _mc_config(cfg)
    tcfg = cfg["theory"]
    sigmas = tcfg["stderr_sigmas"]
    passed = True
    extra: dict = {}

    if sub == "thm1":
        summary = mc_quadform_stats(mc, threads)
        predicted = predicted_variance_scale(mc.widths)
        ratio = abs(summary.mean) / summary.stderr if summary.stderr > 0 else (0.0 if summary.mean == 0 else float("inf"))
        passed = ratio <= sigmas
        write_csv(
            out_dir / "thm1.csv",
            "curvkit.theory.thm1.v1",
            ["widths", "n_trials", "mean", "variance", "stderr", "abs_mean_over_stderr",
             "predicted_scale", "variance_over_predicted", "passed"],
            [[
                " ".join(map(str, mc.widths)), summary.n_trials, summary.mean, summary.variance,
                summary.stderr, ratio, predicted,
                summary.variance / predicted if predicted > 0 else float("nan"), passed,
            ]],
        )
        print(f"mean={summary.mean:.4e} stderr={summary.stderr:.4e} -> {'PASS' if passed else 'FAIL'}")

    elif sub == "norm":
        _require_constant_shape(mc.widths)
        result = mc_grad_norm_stats(mc, n_workers=threads)
        rel = abs(result.summary.mean - result.limit) / result.limit
        passed = rel <= tcfg["mean_tol_rel"]
        write_csv(
            out_dir / "norm.csv",
            "curvkit.theory.norm.v1",
            ["widths", "n_trials", "limit", "mean", "variance", "stderr", "rel_error", "passed"],
            [[
                " ".join(map(str, mc.widths)), result.summary.n_trials, result.limit,
                result.summary.mean, result.summary.variance, result.summary.stderr, rel, passed,
            ]],
        )
        _write_deviation(out_dir / "delta_table.csv", result.deviation)
        print(f"mean={result.summary.mean:.4f} limit={result.limit:.4f} -> {'PASS' if passed else 'FAIL'}")

    elif sub == "thm2":
        _require_constant_shape(mc.widths)
        multipliers = (1.0,) * len(mc.widths)
        eps = tcfg["epsilon"]
        norm_result = mc_grad_norm_stats(mc, multipliers, n_workers=threads)
        qf = quadform_samples(mc, threads)
        gamma_fit = backfit_variance_constant(float(np.var(qf, ddof=1)), multipliers, mc.widths[0])
        params = CurvatureBoundParams(
            epsilon=eps,
            loss_curvature_min=tcfg["alpha"],
            loss_slope_min=tcfg["beta"],
            multipliers=multipliers,
            base_width=mc.widths[0],
            variance_constant=tcfg["gamma"],
            input_norm_sq=1.0,
            deviation=norm_result.deviation,
        )
        bound = positive_curvature_bound(params)
        pos = mc_curvature_positivity(mc, eps, tcfg["target_magnitude"], threads)
        if bound > 0:
            margin = 1.645 * np.sqrt(bound * (1.0 - bound) / mc.n_trials) if bound < 1 else 0.0
            passed = pos.probability >= bound - margin
        else:
            passed = True  # vacuous bound carries no constraint
        write_csv(
            out_dir / "thm2.csv",
            "curvkit.theory.thm2.v1",
            ["widths", "base_width", "n_trials", "epsilon", "alpha", "beta", "gamma",
             "gamma_backfit", "bound", "empirical", "passed"],
            [[
                " ".join(map(str, mc.widths)), mc.widths[0], mc.n_trials, eps, tcfg["alpha"],
                tcfg["beta"], tcfg["gamma"], gamma_fit, bound, pos.probability, passed,
            ]],
        )
        _write_deviation(out_dir / "delta_table.csv", norm_result.deviation)
        print(f"bound={bound:.4f} empirical={pos.probability:.4f} -> {'PASS' if passed else 'FAIL'}")

    elif sub == "identities":
        n_in, n_out = mc.widths[0], mc.widths[1]
        gen = RngStream(mc.master_seed, AUX_STREAM).generator()
        vectors = [v / np.linalg.norm(v) for v in gen.standard_normal((6, n_out))]
        report = mc_bilinear_products(
            n_in, n_out, mc.distribution, vectors, mc.n_trials, mc.master_seed, threads
        )
        write_csv(
            out_dir / "identities.csv",
            "curvkit.theory.identities.v1",
            ["label", "n_in", "n_out", "n_trials", "measured_mean", "measured_stderr",
             "predicted_width_ratio", "predicted_second_moment"],
            [[r.label, report.n_in, report.n_out, report.n_trials, r.measured_mean,
              r.measured_stderr, r.predicted_width_ratio, r.predicted_second_moment]
             for r in report.rows],
        )
        print("identities report written (informational, no pass/fail)")

    elif sub == "cross":
        summary = mc_cross_sample_stats(mc, threads)
        ratio = abs(summary.mean) / summary.stderr if summary.stderr > 0 else (0.0 if summary.mean == 0 else float("inf"))
        passed = ratio <= sigmas
        second_moment = summary.variance + summary.mean**2
        predicted = predicted_variance_scale(mc.widths)
        write_csv(
            out_dir / "cross.csv",
            "curvkit.theory.cross.v1",
            ["widths", "n_trials", "mean", "stderr", "abs_mean_over_stderr",
             "second_moment", "predicted_scale", "passed"],
            [[" ".join(map(str, mc.widths)), summary.n_trials, summary.mean, summary.stderr,
              ratio, second_moment, predicted, passed]],
        )
        print(f"mean={summary.mean:.4e} stderr={summary.stderr:.4e} -> {'PASS' if passed else 'FAIL'}")

    else:
        raise ConfigError(f"unknown theory subcommand {sub!r}")

    _write_manifest(out_dir, f"theory {sub}", cfg, extra, started)
    return 0 if passed else 1


def _write_deviation(path, table) -> None:
    write_csv(
        path,
        "curvkit.theory.deviation.v1",
        ["eps", "tail_prob", "center", "n_trials"],
        [[e, t, table.center, table.n_trials] for e, t in zip(table.eps, table.tail)],
    )


# ---------------------------------------------------------------------------
# train / sweep
# ---------------------------------------------------------------------------


def _parse_gain(raw: str) -> float | None:
    if raw.strip().lower() == "auto":
        return None
    try:
        return float(raw)
    except ValueError as exc:
        raise ConfigError(f"init gain must be a number or 'auto', got {raw!r}") from exc


def _train_config(cfg: dict) -> TrainConfig:
    arch = Architecture(tuple(cfg["arch"]["widths"]), cfg["arch"]["activation"])
    return TrainConfig(
        architecture=arch,
        loss=squared_error(),
        learning_rate=cfg["train"]["lr"],
        halve_at=tuple(cfg["train"]["halve_at"]),
        batch_size=cfg["train"]["batch_size"],
        epochs=cfg["train"]["epochs"],
        probe_every=cfg["train"]["probe_every"],
        data_seed=cfg["data"]["seed"],
        init_seed=cfg["init"]["seed"],
        distribution=cfg["init"]["distribution"],
        init_gain=_parse_gain(cfg["init"]["gain"]),
    )


def cmd_train(cfg: dict, out_dir: Path) -> int:
    started = time.perf_counter()
    tc = _train_config(cfg)
    dataset = generate_dataset(cfg["data"]["n_samples"], tc.architecture.widths[0], tc.data_seed)
    save_dataset(dataset, out_dir / "dataset.csv")
    net = init_network(tc.architecture, tc.distribution, RngStream(tc.init_seed, 0),
                       rectifier_gain=tc.effective_init_gain)
    try:
        log = sgd_train(net, dataset, tc)
    except DivergenceError as exc:
        if exc.partial_log is not None:
            exc.partial_log.to_csv(out_dir / "runlog.csv")
        _write_manifest(out_dir, "train", cfg, {"aborted": str(exc)}, started)
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    log.to_csv(out_dir / "runlog.csv")
    save_network(net, out_dir / "network_final.txt")
    _write_manifest(
        out_dir,
        "train",
        cfg,
        {
            "final_loss": log.final_loss,
            "positivity_fraction": log.positivity_fraction(),
            "n_steps": len(log.records),
        },
        started,
    )
    print(f"final loss {log.final_loss:.6f}, positivity {log.positivity_fraction():.3f}")
    return 0


def cmd_sweep(cfg: dict, out_dir: Path, threads: int) -> int:
    started = time.perf_counter()
    base = _train_config(cfg)
    widths = cfg["sweep"]["widths"]
    n_seeds = cfg["sweep"]["n_seeds"]
    try:
        report = width_sweep(base, widths, n_seeds, cfg["data"]["n_samples"], threads)
    except DivergenceError as exc:
        _write_manifest(out_dir, "sweep", cfg, {"aborted": str(exc)}, started)
        print(f"aborted: {exc}", file=sys.stderr)
        return 3
    report.to_csv(out_dir / "sweep.csv")
    means = report.mean_init_functional_abs()
    _write_manifest(
        out_dir,
        "sweep",
        cfg,
        {
            "verdict": report.verdict,
            "mean_init_H_proj_abs": {str(w): means[w] for w in report.widths},
            "dataset_seeds": {str(w): s for w, s in report.dataset_seeds.items()},
        },
        started,
    )
    print(f"verdict: {report.verdict}")
    if report.verdict == "not-decreasing":
        return 1
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="curvkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="override the command's primary seed")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker processes for trials/cells")

    p_check = sub.add_parser("check", help="run the oracle-equivalence suite")
    common(p_check)
    p_check.add_argument("--weights", default=None, help="network file to check instead of a random net")

    p_theory = sub.add_parser("theory", help="Monte Carlo verification of the curvature claims")
    p_theory.add_argument("subcommand", choices=THEORY_SUBCOMMANDS)
    common(p_theory)

    p_train = sub.add_parser("train", help="one logged SGD run with curvature probes")
    common(p_train)

    p_sweep = sub.add_parser("sweep", help="width x seed sweep of initial curvature")
    common(p_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.command == "theory":
                cfg["mc"]["seed"] = args.seed
            else:
                cfg["init"]["seed"] = args.seed
        out_dir = _prepare_out(cfg, args.out)
        if args.command == "check":
            return cmd_check(cfg, args.weights, out_dir)
        if args.command == "theory":
            return cmd_theory(args.subcommand, cfg, out_dir, args.threads)
        if args.command == "train":
            return cmd_train(cfg, out_dir)
        if args.command == "sweep":
            return cmd_sweep(cfg, out_dir, args.threads)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

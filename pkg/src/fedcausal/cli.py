"""Command-line front end.

Every command reads one JSON config with sections ``dgp``, ``kernel``,
``estimator``, ``train`` and ``eval``; outputs go to ``<runs>/<config hash>/``.
``FEDCAUSAL_SEED`` overrides both the generator seed and the training seed.

Exit codes: 0 success, 2 config error, 3 protocol error, 4 numerical failure.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import subprocess
import sys
from dataclasses import fields
from types import SimpleNamespace

import numpy as np

from . import causalfi, causalrff, datagen, dataset, evaluation, fedci, kernels, mcmc
from .federation import ParameterVector, ProtocolError, Session, TrainConfig, Worker
from .federation import transport
from .federation.problem import LocalState, make_problem, sub_seed
from .federation.runtime import serve

log = logging.getLogger("fedcausal")

EXIT_OK, EXIT_CONFIG, EXIT_PROTOCOL, EXIT_NUMERIC = 0, 2, 3, 4
SECTIONS = ("dgp", "kernel", "estimator", "train", "eval")
ESTIMATORS = ("fedci", "causalrff", "causalfi", "quadratic")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config


def _pick(cls, d, section):
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"{section}: unknown field(s) {sorted(extra)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None


def load_config(path):
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(cfg) - set(SECTIONS)
    if extra:
        raise ConfigError(f"unknown section(s) {sorted(extra)}")
    cfg = {k: dict(cfg.get(k) or {}) for k in SECTIONS}
    env = os.environ.get("FEDCAUSAL_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"FEDCAUSAL_SEED must be an integer, got {env!r}") from None
        cfg["dgp"]["seed"] = seed
        cfg["train"]["master_seed"] = seed
    est = cfg["estimator"].get("name", "fedci")
    if est not in ESTIMATORS:
        raise ConfigError(f"estimator.name must be one of {ESTIMATORS}, got {est!r}")
    cfg["estimator"]["name"] = est
    return cfg


def config_hash(cfg):
    body = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode("utf-8")).hexdigest()[:12]


def dgp_config(cfg):
    d = dict(cfg["dgp"])
    d.setdefault("family", {"fedci": "fedci_real", "quadratic": "fedci_real"}.get(cfg["estimator"]["name"],
                                                                                cfg["estimator"]["name"]))
    return _pick(datagen.DgpConfig, d, "dgp")


def train_config(cfg, overrides=None):
    d = dict(cfg["train"])
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    if "max_rounds" in d and int(d["max_rounds"]) < 1:
        raise ConfigError("train: max_rounds must be at least 1")
    return _pick(TrainConfig, d, "train")


def kernel_options(cfg):
    k = cfg["kernel"]
    out = {}
    if "family" in k:
        if k["family"] not in kernels.FAMILIES:
            raise ConfigError(f"kernel: unsupported family {k['family']!r}")
        out["kernel"] = k["family"]
    if "lengthscale" in k:
        out["lengthscale"] = float(k["lengthscale"])
    if "B" in k:
        out["B"] = int(k["B"])
    return out


def eval_options(cfg):
    e = dict(cfg["eval"])
    e.setdefault("fractions", [0.05, 0.45, 0.40])
    e.setdefault("split_seed", 0)
    return e


# ---------------------------------------------------------------------------
# run directory


class Run:
    def __init__(self, cfg, runs):
        self.cfg = cfg
        self.hash = config_hash(cfg)
        self.root = os.path.join(runs, self.hash)
        for sub in ("data", "train", "estimates", "metrics"):
            os.makedirs(os.path.join(self.root, sub), exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def manifest(self):
        p = self.path("manifest.json")
        if os.path.exists(p):
            with open(p) as fh:
                return json.load(fh)
        return {"config_hash": self.hash, "config": self.cfg}

    def update(self, **entries):
        m = self.manifest()
        m.update(entries)
        with open(self.path("manifest.json"), "w") as fh:
            json.dump(m, fh, indent=2, sort_keys=True)
        return m

    def source_ids(self):
        p = self.path("data", "manifest.json")
        if not os.path.exists(p):
            raise ConfigError(f"no generated data under {self.path('data')}; run `gen` first")
        with open(p) as fh:
            return sorted(int(k) for k in json.load(fh)["files"])

    def shard(self, sid):
        return self.path("data", f"source_{sid}.csv")

    def truth_path(self, sid):
        return self.path("data", f"source_{sid}_truth.csv")


def split_shard(ds, ev, sid):
    sp = dataset.split(ds, tuple(ev["fractions"]), seed=sub_seed(ev["split_seed"], sid))
    if len(sp.train) == 0:
        raise dataset.DatasetError(f"source {sid}: the training split of {ds.n} records is empty")
    return ds.subset(sp.train), ds.subset(sp.test), sp


def load_shards(run):
    ev = eval_options(run.cfg)
    train, test, splits = {}, {}, {}
    for sid in run.source_ids():
        ds = dataset.load_csv(run.shard(sid), source_id=sid)
        train[sid], test[sid], splits[sid] = split_shard(ds, ev, sid)
    return train, test, splits


# ---------------------------------------------------------------------------
# estimator wiring


def problem_options(cfg, no_inter=False):
    est = dict(cfg["estimator"])
    name = est.pop("name")
    est.pop("transfer", None)
    for k in ("K", "N", "M", "burn_in", "aux", "surrogate", "pseudo_count"):
        est.pop(k, None)
    if name == "fedci" and no_inter:
        est["use_inter_dependency"] = False
    if name == "causalrff":
        est.update({k: v for k, v in kernel_options(cfg).items()})
    return name, est


def _save_result(path, problem, res, extra=None):
    body = {"problem": problem.spec(), "shared": res.shared, "segments": res.params.to_segments()}
    body.update(extra or {})
    with open(path, "w") as fh:
        json.dump(body, fh, sort_keys=True)


def _load_result(path):
    with open(path) as fh:
        body = json.load(fh)
    return make_problem(body["problem"]), SimpleNamespace(
        params=ParameterVector.from_segments(body["segments"]), shared=body["shared"]), body


def _write_rounds(path, results):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["stage", "round", "objective", "grad_norm"])
        for stage, res in results:
            for r in res.log:
                wr.writerow([stage, r.round, repr(r.objective), repr(r.grad_norm)])


def train_with_session(run, session, tcfg, no_inter=False):
    """Train the configured estimator over ``session``; writes parameter files and the round log."""
    cfg = run.cfg
    name, opts = problem_options(cfg, no_inter)
    tag = "_nointer" if no_inter else ""
    if name in ("fedci", "quadratic"):
        prob = make_problem({"name": name, "config": opts})
        res = session.train(prob, tcfg)
        _save_result(run.path("train", f"params{tag}.json"), prob, res)
        stages = [(name, res)]
    elif name == "causalrff":
        transfer = bool(cfg["estimator"].get("transfer", True))
        aux = dict(cfg["estimator"].get("aux") or {})
        aux.update({k: v for k, v in kernel_options(cfg).items() if k in ("kernel", "B")})
        fitted = causalrff.fit(None, tcfg, transfer=transfer, latent_options=opts, aux_options=aux, session=session)
        for stage, prob, res in (("latent", fitted.latent_problem, fitted.latent), ("aux_w", fitted.w_problem, fitted.w),
                                 ("aux_y", fitted.y_problem, fitted.y)):
            extra = {"residual_sd": {str(k): v for k, v in fitted.residual_sd.items()}} if stage == "aux_y" else None
            _save_result(run.path("train", f"params_{stage}.json"), prob, res, extra)
        stages = [("latent", fitted.latent), ("aux_w", fitted.w), ("aux_y", fitted.y)]
    else:
        mp = causalfi.CausalFiProblem(**opts)
        mres = session.train(mp, tcfg)
        session.query(mp, "pseudo", mres.params, seed=tcfg.master_seed,
                      options={"count": cfg["estimator"].get("pseudo_count")})
        sp = causalfi.SurrogateProblem(**dict(cfg["estimator"].get("surrogate") or {}))
        sres = session.train(sp, tcfg)
        e = cfg["estimator"]
        local = session.query(sp, "effect_samples", sres.params, seed=sub_seed(tcfg.master_seed, 99),
                              options={"K": e.get("K", 100), "N": e.get("N", 20), "M": e.get("M", 20)})
        verdicts = session.query(sp, "mechanism", None, options={})
        _save_result(run.path("train", "params_model.json"), mp, mres)
        _save_result(run.path("train", "params_surrogate.json"), sp, sres,
                     {"local_ate": {str(k): v for k, v in local.items()},
                      "mechanism": {str(k): v for k, v in verdicts.items()}})
        stages = [("model", mres), ("surrogate", sres)]
    _write_rounds(run.path("train", f"rounds{tag}.csv"), stages)
    return stages


def spawn_workers(run, port, sids, host="127.0.0.1"):
    ev = eval_options(run.cfg)
    procs = []
    for sid in sids:
        cmd = [sys.executable, "-m", "fedcausal", "worker", "--connect", f"{host}:{port}", "--data", run.shard(sid),
               "--source-id", str(sid), "--split-seed", str(ev["split_seed"]),
               "--fractions", ",".join(str(f) for f in ev["fractions"])]
        procs.append(subprocess.Popen(cmd))
    return procs


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args):
    cfg = load_config(args.config)
    run = Run(cfg, args.runs)
    fd = datagen.generate(dgp_config(cfg))
    datagen.write_dataset(fd, run.path("data"))
    run.update(seeds={"dgp": fd.config.seed}, dataset=run.path("data"), estimator=cfg["estimator"]["name"])
    print(run.root)
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config)
    run = Run(cfg, args.runs)
    tcfg = train_config(cfg, {"max_rounds": args.max_rounds})
    train, _, _ = load_shards(run)
    if args.transport == "socket":
        srv = transport.listen("127.0.0.1", 0)
        port = srv.getsockname()[1]
        procs = spawn_workers(run, port, sorted(train))
        try:
            chans = transport.accept_workers(srv, sorted(train), timeout=tcfg.timeout)
            session = Session(chans, tcfg.timeout)
            try:
                train_with_session(run, session, tcfg, args.no_inter_dependency)
            finally:
                session.stop()
        finally:
            srv.close()
            for p in procs:
                try:
                    p.wait(timeout=30)
                except subprocess.TimeoutExpired:
                    p.kill()
    else:
        session = Session.inproc(train)
        try:
            train_with_session(run, session, tcfg, args.no_inter_dependency)
        finally:
            session.stop()
    run.update(seeds={"dgp": cfg["dgp"].get("seed", 0), "train": tcfg.master_seed},
               round_log=run.path("train", "rounds.csv"))
    print(run.path("train"))
    return EXIT_OK


def cmd_coordinate(args):
    cfg = load_config(args.config)
    run = Run(cfg, args.runs)
    tcfg = train_config(cfg, {"max_rounds": args.max_rounds})
    host, port = _addr(args.listen)
    sids = [int(s) for s in args.sources.split(",")]
    srv = transport.listen(host, port)
    try:
        session = Session(transport.accept_workers(srv, sids, timeout=tcfg.timeout), tcfg.timeout)
        try:
            train_with_session(run, session, tcfg, args.no_inter_dependency)
        finally:
            session.stop()
    finally:
        srv.close()
    print(run.path("train"))
    return EXIT_OK


def _addr(text):
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise ConfigError(f"address must be host:port, got {text!r}") from None


def cmd_worker(args):
    host, port = _addr(args.connect)
    ds = dataset.load_csv(args.data, source_id=args.source_id)
    ev = {"fractions": [float(f) for f in args.fractions.split(",")], "split_seed": args.split_seed}
    train, test, _ = split_shard(ds, ev, args.source_id)
    sock = transport.connect(host, port, args.source_id)
    serve(sock, Worker(args.source_id, train, test))
    return EXIT_OK


def _estimate_fedci(run, train, test, tag=""):
    prob, res, _ = _load_result(run.path("train", f"params{tag}.json"))
    out = {}
    for sid in sorted(train):
        eff = prob.effects(res.params, LocalState(sid, train[sid], test[sid]), res.shared, seed=sub_seed(1, sid))
        fedci.write_ite_csv(run.path("estimates", f"ite{tag}_source_{sid}.csv"), eff)
        fedci.write_ate_json(run.path("estimates", f"ate{tag}_source_{sid}.json"), eff)
        out[sid] = {"ite": eff.ite_mean.tolist(), "ate": eff.ate_mean, "ate_var": eff.ate_var, "n": int(test[sid].n)}
    return out


def _estimate_causalrff(run, train, test):
    lp, lres, _ = _load_result(run.path("train", "params_latent.json"))
    wp, wres, _ = _load_result(run.path("train", "params_aux_w.json"))
    yp, yres, body = _load_result(run.path("train", "params_aux_y.json"))
    fitted = causalrff.RffFit(lp, lres, wp, wres, yp, yres, {int(k): v for k, v in body["residual_sd"].items()})
    e = run.cfg["estimator"]
    out = {}
    for sid in sorted(train):
        cates = causalrff.predict_cate(fitted, sid, test[sid].x, N=int(e.get("N", 200)),
                                       burn_in=int(e.get("burn_in", 100)), seed=sub_seed(2, sid))
        causalrff.write_cate_csv(run.path("estimates", f"cate_source_{sid}.csv"), cates)
        out[sid] = {"ite": cates.tolist(), "ate": float(cates.mean()), "n": int(test[sid].n)}
    glob = causalrff.estimate_global_ate([(v["ate"], v["n"]) for v in out.values()])
    T = fitted.transfer_factors()
    sums = {k: (v.sum(axis=1) - 1.0).tolist() for k, v in T.items()}
    n = [int(train[s].n) for s in sorted(train)]
    dx = int(lres.shared["dx"])
    bounds = causalrff.minimax_bounds(n, lp.B, dx, sums.get("lambda"), sums.get("gamma"), sums.get("eta"))
    with open(run.path("estimates", "global_ate.json"), "w") as fh:
        json.dump({"global_ate": glob, "local": {str(k): v["ate"] for k, v in out.items()}}, fh, indent=2,
                  sort_keys=True)
    run.update(bounds={"latent": bounds[0], "treatment": bounds[1], "outcome": bounds[2]})
    return out


def _estimate_causalfi(run, train, test):
    _, _, body = _load_result(run.path("train", "params_surrogate.json"))
    sp, sres, _ = _load_result(run.path("train", "params_surrogate.json"))
    e = run.cfg["estimator"]
    out = {}
    per = {}
    for sid in sorted(train):
        res = causalfi.local_effect_samples(sp, sres.params, sres.shared, test[sid], K=int(e.get("K", 100)),
                                        N=int(e.get("N", 20)), M=int(e.get("M", 20)), seed=sub_seed(3, 0))
        causalfi.write_cate_csv(run.path("estimates", f"cate_source_{sid}.csv"), res.cate)
        per[sid] = (res.n, res.ate)
        out[sid] = {"ite": res.cate.mean(axis=1).tolist(), "ate": float(res.ate.mean()), "n": res.n}
    samples = causalfi.pool_effect_samples(per)
    samples.write_json(run.path("estimates", "effect_samples.json"))
    votes = [(v["verdict"], v["p_value"]) if v["verdict"] else None for v in body.get("mechanism", {}).values()]
    try:
        verdict = causalfi.missing_mechanism_vote(votes)
    except ValueError:
        verdict = None
    run.update(missing_mechanism=verdict)
    return out


def cmd_estimate(args):
    cfg = load_config(args.config)
    run = Run(cfg, args.runs)
    train, test, _ = load_shards(run)
    name = cfg["estimator"]["name"]
    tag = "_nointer" if args.no_inter_dependency else ""
    if name == "fedci":
        out = _estimate_fedci(run, train, test, tag)
    elif name == "causalrff":
        out = _estimate_causalrff(run, train, test)
    elif name == "causalfi":
        out = _estimate_causalfi(run, train, test)
    else:
        raise ConfigError("the quadratic self-test estimator has no effect estimates")
    with open(run.path("estimates", f"estimates{tag}.json"), "w") as fh:
        json.dump({str(k): v for k, v in out.items()}, fh, sort_keys=True)
    print(run.path("estimates"))
    return EXIT_OK


def cmd_eval(args):
    cfg = load_config(args.config)
    run = Run(cfg, args.runs)
    _, _, splits = load_shards(run)
    reports = []
    for tag, label in (("", cfg["estimator"]["name"]), ("_nointer", cfg["estimator"]["name"] + "_no_inter_dependency")):
        p = run.path("estimates", f"estimates{tag}.json")
        if not os.path.exists(p):
            continue
        with open(p) as fh:
            est = {int(k): v for k, v in json.load(fh).items()}
        true_ite, est_ite, per = [], [], {}
        missing = False
        for sid in sorted(est):
            tp = run.truth_path(sid)
            if not os.path.exists(tp):
                missing = True
                break
            truth = datagen.read_truth(tp).subset(splits[sid].test)
            true_ite.append(truth.ite)
            est_ite.append(np.asarray(est[sid]["ite"]))
            per[str(sid)] = evaluation.pehe(truth.ite, est_ite[-1])[1]
        if missing:
            log.warning("truth file missing; metrics skipped, estimates kept")
            continue
        t, e = np.concatenate(true_ite), np.concatenate(est_ite)
        n = [est[s]["n"] for s in sorted(est)]
        ate = causalrff.estimate_global_ate([(est[s]["ate"], est[s]["n"]) for s in sorted(est)]) if sum(n) else None
        reports.append(evaluation.report(label, t, e, ate, per))
    if reports:
        evaluation.write_reports_csv(run.path("metrics", "report.csv"), reports)
        evaluation.write_report_json(run.path("metrics", "report.json"), reports[0])
        for r in reports:
            print(f"{r.label}: sqrt_pehe={r.sqrt_pehe:.6g} ate_error={r.ate_error:.6g}")
        run.update(metrics=run.path("metrics", "report.csv"))
    return EXIT_OK


def cmd_selftest(args):
    """Quadratic objective over three in-process sources; the optimum is the mean of the centers."""
    rng = np.random.default_rng(0)
    centers = {str(s): rng.normal(size=3).tolist() for s in (1, 2, 3)}
    data = {s: dataset.SourceDataset(s, np.array([0, 1]), np.array([0.0, 1.0]), np.zeros((2, 1))) for s in (1, 2, 3)}
    prob = make_problem({"name": "quadratic", "config": {"dim": 3, "centers": centers}})
    session = Session.inproc(data)
    try:
        res = session.train(prob, TrainConfig(max_rounds=500, learning_rate=0.1, tolerance=1e-14))
    finally:
        session.stop()
    target = np.mean([centers[k] for k in centers], axis=0)
    err = float(np.abs(res.params["theta"] - target).max())
    ok = err < 1e-6
    # the sampler on a distribution it can propose exactly accepts every move
    r = mcmc.independent_mh(lambda z: -0.5 * z[:, 0] ** 2, lambda k, g: g.standard_normal((k, 1)),
                            lambda z: -0.5 * z[:, 0] ** 2, 200, 10, 0)
    ok = ok and r.accept_rate == 1.0
    print(f"selftest {'ok' if ok else 'FAILED'}: quadratic error {err:.2e}, sampler acceptance {r.accept_rate:.3f}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser():
    ap = argparse.ArgumentParser(prog="fedcausal", description="Federated causal effect estimation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--runs", default="runs", help="parent directory of run directories")
        return p

    with_config(sub.add_parser("gen", help="generate synthetic sources")).set_defaults(func=cmd_gen)
    p = with_config(sub.add_parser("train", help="federated training"))
    p.add_argument("--transport", choices=("inproc", "socket"), default="inproc")
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--no-inter-dependency", action="store_true", help="drop the shared latent component (FedCI)")
    p.set_defaults(func=cmd_train)
    p = with_config(sub.add_parser("estimate", help="effect estimates on the test split"))
    p.add_argument("--no-inter-dependency", action="store_true")
    p.set_defaults(func=cmd_estimate)
    with_config(sub.add_parser("eval", help="metrics against the truth files")).set_defaults(func=cmd_eval)
    p = with_config(sub.add_parser("coordinate", help="drive training for external workers"))
    p.add_argument("--listen", default="127.0.0.1:5555")
    p.add_argument("--sources", required=True, help="comma-separated source ids")
    p.add_argument("--max-rounds", type=int)
    p.add_argument("--no-inter-dependency", action="store_true")
    p.set_defaults(func=cmd_coordinate)
    p = sub.add_parser("worker", help="serve one source shard")
    p.add_argument("--connect", required=True, help="coordinator host:port")
    p.add_argument("--data", required=True, help="source CSV")
    p.add_argument("--source-id", type=int, required=True)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--fractions", default="0.05,0.45,0.4")
    p.set_defaults(func=cmd_worker)
    sub.add_parser("selftest", help="built-in smoke test").set_defaults(func=cmd_selftest)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, dataset.DatasetError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, np.linalg.LinAlgError, mcmc.SamplerError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())

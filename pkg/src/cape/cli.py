"""Command-line surface: setup, perturb, attack, evaluate, dp-check, serve-check.

Configuration precedence is CLI flags > config file (--config) > built-in
defaults, and the effective configuration is echoed into a run manifest
written atomically next to every output artifact.  All randomness flows
from a single --seed; when omitted a fresh seed is drawn and recorded, so
every run remains reproducible from its manifest.

Exit codes: 0 success, 1 configuration/data error, 2 provider error,
3 partial corpus failure (without --skip-errors), 4 dp-check violation.
"""

from __future__ import annotations

import argparse
import json
import os
import secrets
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from .attacks import knn_attack, mti_attack
from .errors import CapeError, ConfigError, DataError, ProviderError
from .mechanism import (
    MechanismConfig,
    PartialFailureError,
    load_artifact,
    perturb_corpus,
    read_prompts,
)
from .metrics import DEFAULT_TRIALS, cdf_diagnostic, mapping_stats, rouge_l_f1
from .providers import ContextWindow, FileProvider, HttpProvider
from .sampler import dp_ratio_check
from .utility import UtilityParams, calibrate_bound
from .vocab import DistanceCache, load_embeddings, load_nonsensitive, load_vocabulary

PROVIDER_URL_ENV = "CAPE_PROVIDER_URL"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_PROVIDER = 2
EXIT_PARTIAL = 3
EXIT_VIOLATION = 4


class _Parser(argparse.ArgumentParser):
    # usage problems must exit 1, not argparse's default 2
    def error(self, message):
        raise ConfigError(message)


def _atomic_write_json(obj, path) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp, path)


def _write_manifest(command: str, output_path, *, config=None, provider=None,
                    inputs=None, seed=None, summary=None, started=None, elapsed=None):
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "provider": provider.descriptor.to_json_obj() if provider is not None else None,
        "inputs": inputs or {},
        "output": str(output_path),
        "seed": seed,
        "summary": summary,
        "started_at": started,
        "runtime_seconds": elapsed,
    }
    _atomic_write_json(manifest, f"{output_path}.manifest.json")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    return secrets.randbits(63)


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return obj


def _merged(flag_value, file_config: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    if key in file_config and file_config[key] is not None:
        return file_config[key]
    return default


def _make_provider(spec: str | None, vocab_path=None):
    if spec is None:
        spec = os.environ.get(PROVIDER_URL_ENV)
    if not spec:
        raise ConfigError(
            f"no provider given: pass --provider or set {PROVIDER_URL_ENV}"
        )
    if spec.startswith("file:"):
        return FileProvider(spec[len("file:"):])
    if spec.startswith(("http://", "https://")):
        if vocab_path is None:
            raise ConfigError("an HTTP provider requires --vocab for the binding check")
        return HttpProvider(spec, load_vocabulary(vocab_path))
    if os.path.isdir(spec):
        return FileProvider(spec)
    raise ConfigError(f"cannot interpret provider spec {spec!r} (not a URL or directory)")


def _embedding_source(args, provider=None):
    if getattr(args, "embeddings", None):
        if getattr(args, "vocab", None) is None and provider is None:
            raise ConfigError("--embeddings requires --vocab")
        vocab = load_vocabulary(args.vocab) if args.vocab else provider.vocabulary()
        return load_embeddings(args.embeddings, vocab)
    if provider is not None:
        return provider.embedding_table()
    raise ConfigError("no embedding source: pass --embeddings/--vocab or --provider")


# ---------------------------------------------------------------- commands


def cmd_setup(args) -> int:
    started, t0 = _now(), time.monotonic()
    vocab = load_vocabulary(args.vocab)
    table = load_embeddings(args.embeddings, vocab)
    os.makedirs(args.out, exist_ok=True)
    config_path = os.path.join(args.out, "setup.json")
    if os.path.exists(config_path) and not args.force:
        with open(config_path, encoding="utf-8") as f:
            existing = json.load(f)
        if existing.get("vocab_sha256") == vocab.sha256:
            print(f"setup cache at {args.out} is current; reusing (--force to rebuild)")
            return EXIT_OK
    info = {
        "vocab_sha256": vocab.sha256,
        "vocab_size": vocab.size,
        "dim": table.dim,
        "clip_bound": None,
        "max_distance": None,
    }
    if args.precompute_distances:
        cache = DistanceCache(table)
        cache.precompute_all()
        matrix = np.vstack([cache.row(i).distances for i in range(vocab.size)])
        np.save(os.path.join(args.out, "distances.npy"), matrix)
        info["max_distance"] = float(matrix.max())
        print(f"precomputed {vocab.size} distance rows (d_max={info['max_distance']:.4f})")
    if args.calibrate:
        fixture = FileProvider(args.calibrate)
        samples = list(fixture.iter_recorded_logits())
        info["clip_bound"] = calibrate_bound(samples)
        print(f"calibrated clip bound from {len(samples)} contexts: {info['clip_bound']:.6g}")
    _atomic_write_json(info, config_path)
    elapsed = time.monotonic() - t0
    _write_manifest(
        "setup", config_path,
        inputs={"vocab": str(args.vocab), "embeddings": str(args.embeddings)},
        summary=info, started=started, elapsed=elapsed,
    )
    print(f"setup complete in {elapsed:.2f}s -> {config_path}")
    return EXIT_OK


def cmd_perturb(args) -> int:
    started, t0 = _now(), time.monotonic()
    file_config = _load_config_file(args.config)
    seed = _resolve_seed(_merged(args.seed, file_config, "seed", None))
    epsilon = _merged(args.epsilon, file_config, "epsilon", None)
    if epsilon is None:
        raise ConfigError("--epsilon is required (directly or via --config)")
    config = MechanismConfig(
        epsilon=epsilon,
        params=UtilityParams(
            logit_weight=_merged(args.lambda_l, file_config, "lambda_logit", 0.5),
            distance_weight=_merged(args.lambda_d, file_config, "lambda_distance", 1.0),
        ),
        n_buckets=int(_merged(args.buckets, file_config, "n_buckets", 50)),
        clip_bound=_merged(args.clip_bound, file_config, "clip_bound", None),
        nonsensitive_policy=_merged(args.policy, file_config, "nonsensitive_policy", "skip"),
        seed=seed,
        mode=_merged(args.mode, file_config, "mode", "bidirectional"),
    )
    provider = _make_provider(args.provider, args.vocab)
    nonsensitive = None
    if args.nonsensitive:
        nonsensitive = load_nonsensitive(args.nonsensitive, provider.vocabulary())
        if nonsensitive.skipped_count:
            print(
                f"warning: {nonsensitive.skipped_count} non-sensitive entries not in "
                "vocabulary were skipped",
                file=sys.stderr,
            )
    prompts = read_prompts(args.input, provider)
    summary = perturb_corpus(
        prompts, config, provider, args.output,
        jobs=args.jobs, skip_errors=args.skip_errors, nonsensitive=nonsensitive,
    )
    elapsed = time.monotonic() - t0
    _write_manifest(
        "perturb", args.output,
        config=config.to_json_obj(), provider=provider,
        inputs={"input": str(args.input), "nonsensitive": args.nonsensitive},
        seed=seed, summary=summary, started=started, elapsed=elapsed,
    )
    print(
        f"perturbed {summary['prompts']} prompts "
        f"({summary['positions_perturbed']} positions, {summary['errors']} errors) "
        f"in {elapsed:.2f}s -> {args.output}"
    )
    return EXIT_OK


def cmd_attack(args) -> int:
    started, t0 = _now(), time.monotonic()
    artifact = load_artifact(args.artifact)
    provider = None
    if args.attack == "knn":
        provider = _make_provider(args.provider, args.vocab) if args.provider else None
        table = _embedding_source(args, provider)
        report = knn_attack(artifact, table, k=args.k)
    elif args.attack == "mti":
        provider = _make_provider(args.provider, args.vocab)
        report = mti_attack(artifact, provider)
    else:
        raise ConfigError(f"unknown attack {args.attack!r}")
    report.write_json(args.out)
    if args.csv:
        _per_prompt_csv(report, args.csv)
    elapsed = time.monotonic() - t0
    _write_manifest(
        "attack", args.out,
        config={"attack": args.attack, "k": args.k}, provider=provider,
        inputs={"artifact": str(args.artifact)},
        summary={"asr": report.asr, "privacy_score": report.privacy_score},
        started=started, elapsed=elapsed,
    )
    print(
        f"{args.attack} attack: asr={report.asr:.4f} "
        f"privacy_score={report.privacy_score:.4f} -> {args.out}"
    )
    return EXIT_OK


def _per_prompt_csv(report, path) -> None:
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = _csv.writer(f)
        fields = sorted({k for row in report.per_prompt for k in row})
        writer.writerow(fields)
        for row in report.per_prompt:
            writer.writerow([row.get(k) for k in fields])


def cmd_evaluate(args) -> int:
    started, t0 = _now(), time.monotonic()
    if args.metric == "rouge":
        artifact = load_artifact(args.artifact)
        rows = [
            (obj["prompt_id"], rouge_l_f1(obj["original_ids"], obj["perturbed_ids"]))
            for obj in artifact
            if "error" not in obj
        ]
        mean = sum(r for _, r in rows) / len(rows) if rows else 0.0
        _atomic_write_json(
            {"mean_rouge_l_f1": mean, "per_prompt": [{"prompt_id": p, "rouge_l_f1": r} for p, r in rows]},
            args.out,
        )
        summary = {"mean_rouge_l_f1": mean}
        provider = None
    elif args.metric == "mapping":
        provider = _make_provider(args.provider, args.vocab)
        artifact = load_artifact(args.artifact)
        config = MechanismConfig.from_json_obj(artifact[0]["config"])
        vocab = provider.vocabulary()
        token_id = vocab.id_of(args.token) if not args.token.isdigit() else int(args.token)
        distances = DistanceCache(provider.embedding_table())
        context = None
        if args.context_text:
            ids = tuple(provider.tokenize(args.context_text))
            pos = args.context_position
            if ids[pos] != token_id:
                raise ConfigError(
                    f"context position {pos} holds token id {ids[pos]}, not {token_id}"
                )
            context = ContextWindow(ids, pos, config.mode)
        stats = mapping_stats(
            token_id, config, provider, distances, context=context, trials=args.trials
        )
        _atomic_write_json(stats.to_json_obj(), args.out)
        summary = stats.to_json_obj()
    elif args.metric == "cdf":
        provider = _make_provider(args.provider, args.vocab)
        artifact = load_artifact(args.artifact)
        config = MechanismConfig.from_json_obj(artifact[0]["config"])
        vocab = provider.vocabulary()
        token_id = vocab.id_of(args.token) if not args.token.isdigit() else int(args.token)
        distances = DistanceCache(provider.embedding_table())
        if args.context_text:
            ids = tuple(provider.tokenize(args.context_text))
            pos = args.context_position
            if ids[pos] != token_id:
                raise ConfigError(
                    f"context position {pos} holds token id {ids[pos]}, not {token_id}"
                )
            context = ContextWindow(ids, pos, config.mode)
        else:
            context = ContextWindow((token_id,), 0, config.mode)
        logits = provider.context_logits(context)
        bound = config.clip_bound or calibrate_bound([logits])
        from .utility import hybrid_utility

        utilities = hybrid_utility(logits, distances.row(token_id), config.params, bound)
        diag = cdf_diagnostic(utilities, config.epsilon, config.n_buckets, k=args.k)
        base, _ = os.path.splitext(args.out)
        std_csv, bkt_csv = f"{base}_standard.csv", f"{base}_bucketized.csv"
        diag.write_csv(std_csv, bkt_csv)
        std_tail, bkt_tail = diag.tail_mass()
        summary = {
            "analytic_bound": diag.analytic_bound,
            "top_k_mass_standard": diag.top_k_mass_standard,
            "top_k_mass_bucketized": diag.top_k_mass_bucketized,
            "tail_mass_standard": std_tail,
            "tail_mass_bucketized": bkt_tail,
            "k": diag.k,
            "csv": [std_csv, bkt_csv],
        }
        _atomic_write_json(summary, args.out)
    else:
        raise ConfigError(f"unknown metric {args.metric!r}")
    elapsed = time.monotonic() - t0
    _write_manifest(
        "evaluate", args.out,
        config={"metric": args.metric}, provider=provider,
        inputs={"artifact": str(args.artifact)},
        summary=summary, started=started, elapsed=elapsed,
    )
    print(f"evaluate {args.metric} -> {args.out}")
    return EXIT_OK


def cmd_dp_check(args) -> int:
    started, t0 = _now(), time.monotonic()
    if args.vocab_size > 200:
        raise ConfigError(
            f"fixture vocabulary of {args.vocab_size} tokens would make exact "
            "enumeration intractable (limit 200)"
        )
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    all_passed = True
    results = []
    for fixture_idx in range(args.fixtures):
        utilities = rng.uniform(0.0, 1.0, size=(args.vocab_size, args.vocab_size))
        for t in range(args.vocab_size):
            utilities[t, t] = utilities[t].max() + rng.uniform(0.0, 0.05)
        report = dp_ratio_check(
            utilities, args.epsilon, args.buckets, bucketized=not args.no_bucketing
        )
        results.append(report)
        all_passed &= report.passed
        flag = "" if not report.per_origin_undercounts else " [cross-origin eps' exceeds per-origin]"
        print(
            f"fixture {fixture_idx}: max_ratio={report.max_ratio:.6g} "
            f"bound={report.bound:.6g} eps'={report.epsilon_prime:.4f} "
            f"{'PASS' if report.passed else 'FAIL'}{flag}"
        )
    elapsed = time.monotonic() - t0
    if args.out:
        _atomic_write_json(
            {
                "epsilon": args.epsilon,
                "n_buckets": args.buckets,
                "bucketized": not args.no_bucketing,
                "fixtures": [
                    {
                        "max_ratio": r.max_ratio,
                        "bound": r.bound,
                        "epsilon_prime": r.epsilon_prime,
                        "passed": r.passed,
                    }
                    for r in results
                ],
                "all_passed": all_passed,
            },
            args.out,
        )
        _write_manifest(
            "dp-check", args.out,
            config={
                "vocab_size": args.vocab_size, "epsilon": args.epsilon,
                "buckets": args.buckets, "fixtures": args.fixtures,
                "no_bucketing": args.no_bucketing, "seed": args.seed,
            },
            summary={"all_passed": all_passed}, started=started, elapsed=elapsed,
        )
    print(f"dp-check {'passed' if all_passed else 'FAILED'} in {elapsed:.2f}s")
    return EXIT_OK if all_passed else EXIT_VIOLATION


def cmd_serve_check(args) -> int:
    import httpx

    url = args.url or os.environ.get(PROVIDER_URL_ENV)
    if not url:
        raise ConfigError(f"pass --url or set {PROVIDER_URL_ENV}")
    try:
        resp = httpx.get(url.rstrip("/") + "/info", timeout=args.timeout)
        resp.raise_for_status()
    except httpx.HTTPError as exc:
        raise ProviderError(f"sidecar at {url} is not healthy: {exc}") from None
    info = resp.json()
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cape", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("setup", help="precompute distances and calibrate the clip bound")
    p.add_argument("--vocab", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--precompute-distances", action="store_true")
    p.add_argument("--calibrate", metavar="FIXTURE_DIR",
                   help="fixture directory whose recorded logits calibrate the clip bound")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_setup)

    p = sub.add_parser("perturb", help="perturb a corpus of prompts")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--epsilon", type=float)
    p.add_argument("--lambda-l", dest="lambda_l", type=float, help="logit importance (default 0.5)")
    p.add_argument("--lambda-d", dest="lambda_d", type=float, help="distance importance (default 1.0)")
    p.add_argument("--buckets", type=int, help="bucket count (default 50)")
    p.add_argument("--clip-bound", dest="clip_bound", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--provider", help="file:DIR or http(s)://URL")
    p.add_argument("--vocab", help="vocabulary file (required for HTTP providers)")
    p.add_argument("--mode", choices=["bidirectional", "causal"])
    p.add_argument("--nonsensitive", help="override the shipped non-sensitive token list")
    p.add_argument("--policy", choices=["skip", "perturb-all"])
    p.add_argument("--config", help="JSON config file (flags take precedence)")
    p.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    p.add_argument("--skip-errors", action="store_true")
    p.set_defaults(func=cmd_perturb)

    p = sub.add_parser("attack", help="run a privacy attack against an artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--attack", choices=["knn", "mti"], required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--csv", help="optional per-prompt CSV")
    p.add_argument("--provider")
    p.add_argument("--vocab")
    p.add_argument("--embeddings")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("evaluate", help="utility / privacy metrics over an artifact")
    p.add_argument("--artifact", required=True)
    p.add_argument("--metric", choices=["rouge", "mapping", "cdf"], required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--provider")
    p.add_argument("--vocab")
    p.add_argument("--token", help="token string or id (mapping/cdf)")
    p.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    p.add_argument("--context-text", dest="context_text")
    p.add_argument("--context-position", dest="context_position", type=int, default=0)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("dp-check", help="exact privacy-ratio verification on small fixtures")
    p.add_argument("--vocab-size", dest="vocab_size", type=int, default=50)
    p.add_argument("--epsilon", type=float, default=2.0)
    p.add_argument("--buckets", type=int, default=5)
    p.add_argument("--fixtures", type=int, default=3)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-bucketing", dest="no_bucketing", action="store_true",
                   help="check the standard exponential mechanism instead")
    p.add_argument("--out")
    p.set_defaults(func=cmd_dp_check)

    p = sub.add_parser("serve-check", help="ping a model-server sidecar's /info")
    p.add_argument("--url")
    p.add_argument("--timeout", type=float, default=10.0)
    p.set_defaults(func=cmd_serve_check)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except PartialFailureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL
    except ProviderError as exc:
        print(f"provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()

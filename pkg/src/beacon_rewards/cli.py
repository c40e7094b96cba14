"""Command line entry point: simulate, analyze, report, full, serve."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .analyzer import AnalyzerError, AnalyzerHalt, process_range, reconcile
from .chain_sim import write_ndjson
from .config import ConfigError, RunConfig, dump_config, load_config
from .entities import EntityMap, EntityMapError, build_map, write_synthetic
from .metrics import MetricError, write_report
from .rewards import DEFAULT_PARAMS
from .sources import FileProvider, HttpProvider, SimProvider, SourceError, StateProvider, write_fixtures
from .store import Store, StoreConflict

log = logging.getLogger("beacon_rewards")

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_HALTED = 3
EXIT_AUDIT = 4


class AuditFailure(Exception):
    pass


def make_provider(config: RunConfig) -> StateProvider:
    if config.provider == "sim":
        return SimProvider(config.sim_config())
    if config.provider == "http":
        return HttpProvider(config.base_url or "")
    return FileProvider(config.states_dir)


def entity_map_for(config: RunConfig) -> EntityMap:
    if config.deposits is not None and config.entities is not None:
        return build_map(config.deposits, config.entities)
    generated = config.entities_dir / "deposits.csv"
    if generated.exists():
        return build_map(generated, config.entities_dir / "entities.csv")
    return EntityMap()


def cmd_simulate(config: RunConfig) -> Path:
    config.out.mkdir(parents=True, exist_ok=True)
    (config.out / "config.yaml").write_text(dump_config(config))
    provider = SimProvider(config.sim_config())
    last = provider.slot_range().last_slot
    states = (provider.get_state(s) for s in range(last + 1))
    n = write_fixtures(states, config.states_dir)
    if config.ndjson:
        with open(config.out / "snapshots.ndjson", "w") as fh:
            write_ndjson((provider.get_state(s) for s in range(last + 1)), fh)
    if config.entity_shares and config.deposits is None:
        count = len(provider.get_state(last).balances)
        write_synthetic(config.entities_dir, count, config.entity_shares, seed=config.seed)
    log.info("wrote %d states to %s", n, config.states_dir)
    return config.states_dir


def _audit(store: Store, provider: StateProvider, first: int, last: int) -> list[str]:
    problems = []
    for r in store.all_rows():
        if not (r.att_reward <= r.att_max and r.sync_reward <= r.sync_max and r.achieved <= r.maximum):
            problems.append(f"MER dominance violated: epoch {r.epoch} validator {r.validator_index}")
    if last - first >= 2:
        for m in reconcile(store, provider, first, last):
            problems.append(
                f"balance mismatch: validator {m.validator_index} moved {m.balance_delta}, ledger says {m.ledger_delta}"
            )
    return problems


def cmd_analyze(config: RunConfig, provider: Optional[StateProvider] = None) -> Store:
    provider = provider or make_provider(config)
    spe = DEFAULT_PARAMS.slots_per_epoch
    rng = provider.slot_range()
    last = config.last_epoch
    if last is None:
        last = (rng.last_slot + 1) // spe - 2
    if last < config.first_epoch:
        raise AnalyzerError(f"states up to slot {rng.last_slot} cannot settle epoch {config.first_epoch}")
    store = Store(config.store_dir)
    process_range(provider, config.first_epoch, last, entity_map_for(config), store)
    problems = _audit(store, provider, config.first_epoch, last)
    if problems:
        for p in problems[:20]:
            log.error(p)
        raise AuditFailure(f"{len(problems)} audit failures")
    log.info("indexed epochs %d..%d into %s", config.first_epoch, last, config.store_dir)
    return store


def cmd_report(config: RunConfig) -> Path:
    store = Store(config.store_dir)
    path = write_report(store, entity_map_for(config), config.report_dir, config.split_epoch, config.reports)
    log.info("report written to %s", config.report_dir)
    return path


def cmd_full(config: RunConfig) -> Path:
    cmd_simulate(config)
    cmd_analyze(config, FileProvider(config.states_dir))
    return cmd_report(config)


def cmd_serve(config: RunConfig, host: str, port: int) -> None:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(make_provider(config)), host=host, port=port, log_level="info")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int)
    common.add_argument("--validators", type=int, dest="validator_count")
    common.add_argument("--epochs", type=int)
    common.add_argument("--split-epoch", type=int)
    common.add_argument("--out", type=Path)
    common.add_argument("--provider", choices=["sim", "files", "http"])
    common.add_argument("--base-url")
    common.add_argument("--deposits", type=Path)
    common.add_argument("--entities", type=Path)
    common.add_argument("--first-epoch", type=int)
    common.add_argument("--last-epoch", type=int)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="beacon-rewards", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="write simulated state fixtures")
    sub.add_parser("analyze", parents=[common], help="index rewards into the ledger store")
    sub.add_parser("report", parents=[common], help="export metrics and summary.txt")
    sub.add_parser("full", parents=[common], help="simulate, analyze and report")
    serve = sub.add_parser("serve", parents=[common], help="serve states over HTTP")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)
    return parser


_OVERRIDES = (
    "seed", "validator_count", "epochs", "split_epoch", "out", "provider",
    "base_url", "deposits", "entities", "first_epoch", "last_epoch",
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if not args.verbose:
        logging.getLogger("httpx").setLevel(logging.WARNING)
    overrides = {k: getattr(args, k) for k in _OVERRIDES}
    try:
        config = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"invalid configuration:\n{exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        if args.command == "simulate":
            cmd_simulate(config)
        elif args.command == "analyze":
            cmd_analyze(config)
        elif args.command == "report":
            print(cmd_report(config).read_text(), end="")
        elif args.command == "full":
            print(cmd_full(config).read_text(), end="")
        elif args.command == "serve":
            cmd_serve(config, args.host, args.port)
    except AnalyzerHalt as exc:
        print(f"analysis halted, resumable: {exc}", file=sys.stderr)
        return EXIT_HALTED
    except AuditFailure as exc:
        print(f"audit failed: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (AnalyzerError, SourceError, StoreConflict, EntityMapError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

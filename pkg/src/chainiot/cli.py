"""Command line: network lifecycle, identities, ledger checks, benchmarks, aux storage, demo.

Exit codes: 0 success, 1 validation error, 2 runtime failure.
"""

from __future__ import annotations

import asyncio
import logging
import sys
from pathlib import Path

import click

from . import canonical
from .errors import LedgerError, PlatformError, ValidationError
from .identity import Role

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

data_dir_option = click.option(
    "--data-dir", "-d", default="chainiot-data", envvar="CHAINIOT_DATA_DIR", show_default=True,
    type=click.Path(file_okay=False), help="Network data directory.",
)


def _info(data_dir):
    from .network import NetworkInfo

    return NetworkInfo.load(data_dir)


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging (repeatable).")
def cli(verbose):
    """Consortium-blockchain IoT service platform."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


# -- network -------------------------------------------------------------------------

@cli.group()
def network():
    """Bootstrap, start and stop a local network."""


@network.command("init")
@click.argument("path", type=click.Path(dir_okay=False))
@data_dir_option
@click.option("--base-port", default=17050, show_default=True)
@click.option("--solo", is_flag=True, help="Single ordering node.")
@click.option("--orgs", default=2, show_default=True)
@click.option("--peers", default=2, show_default=True, help="Peers per org.")
def network_init(path, data_dir, base_port, solo, orgs, peers):
    """Write a default topology file to PATH."""
    from .topology import default_topology

    cfg = default_topology(str(Path(data_dir).resolve()), base_port=base_port, solo=solo, orgs=orgs, peers=peers)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    cfg.save(path)
    click.echo(path)


@network.command("up")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Topology file; the default layout is used when omitted.")
@data_dir_option
@click.option("--base-port", default=17050, show_default=True, help="Used without --config.")
@click.option("--solo", is_flag=True, help="Used without --config.")
@click.option("--keep", is_flag=True, help="Restart an existing network instead of bootstrapping afresh.")
def network_up_cmd(config_path, data_dir, base_port, solo, keep):
    """Bootstrap (unless --keep) and start every node process."""
    from .network import network_up
    from .topology import TopologyConfig, default_topology

    if config_path:
        cfg = TopologyConfig.load(config_path)
    else:
        cfg = default_topology(str(Path(data_dir).resolve()), base_port=base_port, solo=solo)
    info = network_up(cfg, fresh=not keep)
    for ep in info.peers + info.orderers:
        click.echo(f"{ep.name:<14} {ep.org:<8} {ep.host}:{ep.port}")
    if info.aux is not None:
        click.echo(f"{'aux':<14} {info.aux.org:<8} {info.aux.host}:{info.aux.port}")
    click.echo(f"network up in {cfg.data_dir}")


@network.command("down")
@data_dir_option
def network_down_cmd(data_dir):
    """Stop every node process (peers write state snapshots on the way out)."""
    from .network import network_down

    names = network_down(data_dir)
    click.echo(f"stopped {len(names)} node(s)")


@network.command("status")
@data_dir_option
def network_status(data_dir):
    """Query each node's stats endpoint."""
    from .network import node_call

    info = _info(data_dir)

    async def run():
        for ep in info.peers + info.orderers:
            try:
                st = await node_call(info, ep, "Stats", timeout=2.0)
            except PlatformError as err:
                click.echo(f"{ep.name:<14} unreachable ({err.code})")
                continue
            extra = f"role={st['role']} term={st['term']}" if st.get("kind") == "orderer" else ""
            click.echo(f"{ep.name:<14} height={st['height']} {extra}".rstrip())

    asyncio.run(run())


# -- identity ------------------------------------------------------------------------

@cli.group()
def identity():
    """Issue and revoke member identities."""


@identity.command("issue")
@data_dir_option
@click.option("--org", required=True)
@click.option("--subject", required=True)
@click.option("--role", type=click.Choice([r.value for r in Role]), default=Role.WRITER.value, show_default=True)
@click.option("--label", help="Wallet label (default subject@org).")
@click.option("--days", default=365, show_default=True)
@click.option("--export", type=click.Path(dir_okay=False), help="Also write the identity to this file.")
def identity_issue(data_dir, org, subject, role, label, days, export):
    """Issue a certificate from ORG's CA into the network wallet."""
    from .network import issue

    label, ident = issue(_info(data_dir), org, subject, Role(role), label=label, days=days)
    if export:
        canonical.dump_file(export, ident.to_dict())
    cert = ident.certificate
    click.echo(f"{label} serial={cert.serial} role={cert.role.value} notAfter={canonical.format_time(cert.not_after)}")


@identity.command("revoke")
@data_dir_option
@click.option("--org", help="Required with --serial.")
@click.option("--serial", type=int)
@click.option("--label", help="Revoke the wallet identity with this label.")
def identity_revoke(data_dir, org, serial, label):
    """Add a certificate serial to its org's revocation list."""
    from .network import revoke

    info = _info(data_dir)
    if label:
        ident = info.wallet().get(label)
        org, serial = ident.org_id, ident.certificate.serial
    if org is None or serial is None:
        raise ValidationError("give --label, or both --org and --serial")
    revoke(info, org, serial)
    click.echo(f"revoked {org} serial {serial}")


# -- ledger --------------------------------------------------------------------------

@cli.group()
def ledger():
    """Ledger inspection."""


@ledger.command("verify")
@data_dir_option
@click.option("--node", "nodes", multiple=True, help="Limit to these nodes (repeatable).")
def ledger_verify(data_dir, nodes):
    """Walk every node's block file and check hash links, data hashes and cross-node agreement."""
    from .network import verify_ledgers

    reports = verify_ledgers(data_dir, nodes or None)
    for r in reports:
        status = "ok" if r.ok else ("corrupt at block %d" % r.first_bad if r.first_bad is not None
                                    else "diverges at block %d" % r.diverges_at)
        click.echo(f"{r.node:<14} height={r.height:<6} head={r.head_hash[:16] or '-':<16} {status}")
    if not all(r.ok for r in reports):
        raise ValidationError("ledger verification failed")


# -- bench ---------------------------------------------------------------------------

def load_workloads(path) -> list:
    """A workload file holds one workload object, a list of them, or {"workloads": [...]}."""
    from .bench import WorkloadSpec

    try:
        d = canonical.load_file(path)
    except ValueError as exc:
        raise ValidationError(f"{path}: not valid JSON: {exc}") from None
    items = d.get("workloads") if isinstance(d, dict) and "workloads" in d else d
    if isinstance(items, dict):
        items = [items]
    if not isinstance(items, list) or not items:
        raise ValidationError(f"{path}: no workloads")
    return [WorkloadSpec.from_dict(x) for x in items]


@cli.group()
def bench():
    """Fixed-load benchmarks."""


@bench.command("run")
@data_dir_option
@click.option("--workload", "workload_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def bench_run(data_dir, workload_path, out_dir):
    """Run each workload in the file and write report.json plus summary.tsv to OUT."""
    from .bench import run_workload, write_report

    specs = load_workloads(workload_path)
    info = _info(data_dir)

    async def run():
        reports = []
        for spec in specs:
            r = await run_workload(info, spec)
            lat = r.latency
            click.echo(f"{spec.label or spec.operation:<28} W={r.throughput:9.2f}/s  "
                       f"meanL={lat.mean if lat.mean is not None else float('nan'):.4f}s  "
                       f"failed={r.failed}")
            reports.append(r)
        return reports

    reports = asyncio.run(run())
    full, table = write_report(reports, out_dir)
    click.echo(f"wrote {full} and {table}")
    bad = sorted({peer for r in reports for peer, ok in r.extra["replayConsistent"].items() if not ok})
    if bad:
        raise LedgerError(f"replay from genesis does not reproduce live state on {', '.join(bad)}")


# -- aux -----------------------------------------------------------------------------

@cli.group()
def aux():
    """Off-chain content-addressed blob storage."""


def _aux_identity(info, label):
    wallet = info.wallet()
    return wallet.get(label or f"admin@{info.peers[0].org}")


@aux.command("put")
@data_dir_option
@click.argument("file", type=click.File("rb"))
@click.option("--identity", "label", help="Wallet label to sign with.")
def aux_put(data_dir, file, label):
    """Store FILE ('-' for stdin) and print its URI."""
    from .auxstore import BlobClient

    info = _info(data_dir)
    data = file.read()

    async def run():
        c = await BlobClient.open(info.aux.host, info.aux.port, _aux_identity(info, label))
        try:
            return await c.put(data)
        finally:
            await c.close()

    click.echo(asyncio.run(run()))


@aux.command("get")
@data_dir_option
@click.argument("uri")
@click.option("--out", "out", type=click.File("wb"), default="-", show_default=True)
@click.option("--identity", "label", help="Wallet label to sign with.")
def aux_get(data_dir, uri, out, label):
    """Fetch URI, verify it against its digest and write it out."""
    from .auxstore import BlobClient

    info = _info(data_dir)

    async def run():
        c = await BlobClient.open(info.aux.host, info.aux.port, _aux_identity(info, label))
        try:
            return await c.get(uri)
        finally:
            await c.close()

    out.write(asyncio.run(run()))


# -- demo ----------------------------------------------------------------------------

@cli.group()
def demo():
    """Scripted end-to-end lifecycle."""


@demo.command("run")
@data_dir_option
@click.option("--request-id", help="Fixed request UUID (a rerun with the same id is rejected).")
@click.option("--revoke-midway", is_flag=True, help="Revoke the device certificate before it responds.")
@click.option("--no-corrupt", is_flag=True, help="Skip the blob tampering check.")
@click.option("--json", "as_json", is_flag=True, help="Print the transcript as JSON.")
def demo_run_cmd(data_dir, request_id, revoke_midway, no_corrupt, as_json):
    """Register a device and service, request it, respond via aux storage, verify, deregister."""
    from .demo import demo_run

    info = _info(data_dir)
    echo = None if as_json else click.echo
    t = asyncio.run(demo_run(info, request_id, revoke_midway, not no_corrupt, echo))
    if as_json:
        click.echo(canonical.encode(t.to_dict()).decode())
    if not t.ok:
        click.echo(f"demo failed at step: {t.failed_step}", err=True)
        sys.exit(EXIT_RUNTIME)
    if not as_json:
        click.echo(f"demo complete: all transactions VALID, blob verified={t.blob_verified}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="chainiot", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_RUNTIME
    except click.UsageError as exc:
        exc.show()
        return EXIT_INVALID
    except click.ClickException as exc:
        exc.show()
        return EXIT_INVALID
    except ValidationError as exc:
        click.echo(f"error: {exc.code}: {exc}", err=True)
        return EXIT_INVALID
    except PlatformError as exc:
        click.echo(f"error: {exc.code}: {exc}", err=True)
        return EXIT_RUNTIME
    except OSError as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_RUNTIME
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

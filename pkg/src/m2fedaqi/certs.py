"""Certificate generation for a federation: one root CA, a server and N clients."""

from __future__ import annotations

import datetime as dt
import ipaddress
from pathlib import Path

from cryptography import x509
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.x509.oid import ExtendedKeyUsageOID, NameOID


def _name(cn: str) -> x509.Name:
    return x509.Name(
        [
            x509.NameAttribute(NameOID.ORGANIZATION_NAME, "m2fedaqi federation"),
            x509.NameAttribute(NameOID.COMMON_NAME, cn),
        ]
    )


def _key():
    return ec.generate_private_key(ec.SECP256R1())


def _write(path: Path, cert: x509.Certificate, key) -> None:
    path.with_suffix(".crt").write_bytes(cert.public_bytes(serialization.Encoding.PEM))
    key_path = path.with_suffix(".key")
    key_path.write_bytes(
        key.private_bytes(
            serialization.Encoding.PEM,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
    )
    key_path.chmod(0o600)


def make_root(cn: str = "m2fedaqi-root", days: int = 365, now=None):
    now = now or dt.datetime.now(dt.timezone.utc)
    key = _key()
    cert = (
        x509.CertificateBuilder()
        .subject_name(_name(cn))
        .issuer_name(_name(cn))
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(now - dt.timedelta(minutes=5))
        .not_valid_after(now + dt.timedelta(days=days))
        .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
        .add_extension(
            x509.KeyUsage(
                digital_signature=True, key_cert_sign=True, crl_sign=True,
                content_commitment=False, key_encipherment=False, data_encipherment=False,
                key_agreement=False, encipher_only=False, decipher_only=False,
            ),
            critical=True,
        )
        .add_extension(x509.SubjectKeyIdentifier.from_public_key(key.public_key()), critical=False)
        .sign(key, hashes.SHA256())
    )
    return cert, key


def issue(root_cert, root_key, cn: str, server: bool, hosts=(), days: int = 365,
          not_before=None, not_after=None):
    """Sign a leaf identity with the root. ``hosts`` become SAN entries for servers."""
    now = dt.datetime.now(dt.timezone.utc)
    key = _key()
    builder = (
        x509.CertificateBuilder()
        .subject_name(_name(cn))
        .issuer_name(root_cert.subject)
        .public_key(key.public_key())
        .serial_number(x509.random_serial_number())
        .not_valid_before(not_before or now - dt.timedelta(minutes=5))
        .not_valid_after(not_after or now + dt.timedelta(days=days))
        .add_extension(x509.BasicConstraints(ca=False, path_length=None), critical=True)
        .add_extension(
            x509.ExtendedKeyUsage(
                [ExtendedKeyUsageOID.SERVER_AUTH if server else ExtendedKeyUsageOID.CLIENT_AUTH]
            ),
            critical=False,
        )
        .add_extension(
            x509.AuthorityKeyIdentifier.from_issuer_public_key(root_key.public_key()),
            critical=False,
        )
    )
    if hosts:
        san = []
        for h in hosts:
            try:
                san.append(x509.IPAddress(ipaddress.ip_address(h)))
            except ValueError:
                san.append(x509.DNSName(h))
        builder = builder.add_extension(x509.SubjectAlternativeName(san), critical=False)
    return builder.sign(root_key, hashes.SHA256()), key


def generate_federation(out_dir, n_clients: int, hosts=("localhost", "127.0.0.1"),
                        days: int = 365, client_prefix: str = "client") -> dict:
    """Write ``root``, ``server`` and ``client-<i>`` cert/key pairs into ``out_dir``.

    Returns a mapping from identity name to its certificate path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root_cert, root_key = make_root(days=days)
    _write(out / "root", root_cert, root_key)
    paths = {"root": out / "root.crt"}
    cert, key = issue(root_cert, root_key, "server", server=True, hosts=hosts, days=days)
    _write(out / "server", cert, key)
    paths["server"] = out / "server.crt"
    for i in range(n_clients):
        name = f"{client_prefix}-{i}"
        cert, key = issue(root_cert, root_key, name, server=False, days=days)
        _write(out / name, cert, key)
        paths[name] = out / f"{name}.crt"
    return paths


def generate_self_signed(out_dir, cn: str) -> Path:
    """A client identity that chains to nothing: used to exercise rejection."""
    cert, key = make_root(cn)
    path = Path(out_dir) / cn
    _write(path, cert, key)
    return path.with_suffix(".crt")

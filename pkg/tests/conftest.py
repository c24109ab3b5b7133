import pytest

from b4f import crypto
from b4f.crypto import CertificateAuthority, generate_keypair, issue_pseudonym_batch
from b4f.records import BsmMessage, VehicleSample, make_signed_record


class Fleet:
    """A CA plus one vehicle holding consecutive pseudonyms from t=0."""

    def __init__(self, n_certs=4, start=0, label="V1", ca=None):
        self.ca = ca or CertificateAuthority(generate_keypair(crypto.derive_seed("test-ca")))
        self.keys = [generate_keypair(crypto.derive_seed("veh", label, i)) for i in range(n_certs)]
        self.certs = issue_pseudonym_batch(self.ca, [k.public_key for k in self.keys], start, holder=label)
        self.by_id = {c.pseudonym_id: c for c in self.certs}

    def lookup(self, pid):
        return self.by_id.get(pid)

    def pair_at(self, t):
        for c, k in zip(self.certs, self.keys):
            if c.covers(t):
                return c, k.secret_key
        raise LookupError(t)

    def signed(self, record, t):
        cert, sk = self.pair_at(t)
        return make_signed_record(record, cert, sk, t)

    def bsm(self, t, x=0, y=0, v=10_000):
        cert, _ = self.pair_at(t)
        return BsmMessage(cert.pseudonym_id, t, x, y, v)


def sample(t, x=0, y=0, v=10_000, **kw):
    return VehicleSample(t, x, y, v, kw.get("brake", False), kw.get("steer", 0),
                         kw.get("autopilot", False), kw.get("airbag", False))


@pytest.fixture
def fleet():
    return Fleet()


ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is not None and rep.when == "call":
        ACCEPTANCE[mark.args[0]] = (rep.passed, mark.args[1], getattr(item, "detail", ""))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, title, detail = ACCEPTANCE[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'} {title}"
        terminalreporter.write_line(f"{line} ({detail})" if detail else line)

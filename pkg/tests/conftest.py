import pytest

from provhunt.ingest import Event

NS = 1_000_000_000
MIN = 60 * NS


def P(node_id, name):
    return ("process", node_id, name)


def F(node_id, name):
    return ("file", node_id, name)


def S(node_id, name):
    return ("socket", node_id, name)


def ev(ts, src, op, dst):
    """src / dst are (type, id, name) triples."""
    return Event(
        ts=ts,
        src_id=src[1],
        src_type=src[0],
        src_name=src[2],
        op=op,
        dst_id=dst[1],
        dst_type=dst[0],
        dst_name=dst[2],
    )


FIG4_T0 = 1_000_000_000_000_000  # network burst
FIG4_T1 = FIG4_T0 + 60 * NS  # directory cascade
FIG4_T2 = FIG4_T1 + 10 * NS  # similar lock files


@pytest.fixture
def fig4_events():
    """Mail-client fixture exercising all three reduction rules at once:
    a sub-second two-port network burst, a directory access cascade, and a
    pair of near-identical lock files."""
    alpine = P("p_alpine", "alpine")
    return [
        ev(FIG4_T0, alpine, "connect", S("s1", "127.0.0.1:1")),
        ev(FIG4_T0 + NS // 2, alpine, "read", S("s2", "127.0.0.1:25")),
        ev(FIG4_T1, alpine, "open", F("f_d1", "/usr/home/user")),
        ev(FIG4_T1 + NS, alpine, "open", F("f_d2", "/usr/home/user/mail")),
        ev(FIG4_T1 + 2 * NS, alpine, "open", F("f_sent", "/usr/home/user/mail/sent")),
        ev(FIG4_T2, alpine, "write", F("f_l1", "/usr/home/user/mail/msg.1001.lock")),
        ev(FIG4_T2 + NS, alpine, "write", F("f_l2", "/usr/home/user/mail/msg.1002.lock")),
    ]

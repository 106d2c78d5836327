import numpy as np
import pytest

from session_coder.data import CODES, CtrsLabels, MetadataRecord, MetadataVocab, Session, Utterance, build_examples
from session_coder.data import EmbeddedSession
from session_coder.synthetic import SyntheticSpec, generate_synthetic


def make_session(sid="s0", therapist="t0", roles=("therapist", "patient", "therapist"), codes=None, meta=None):
    utts = tuple(
        Utterance(role, (f"tok{i}", "word"), float(2 * i), float(2 * i + 1)) for i, role in enumerate(roles)
    )
    codes = codes if codes is not None else (3,) * len(CODES)
    return Session(sid, therapist, utts, CtrsLabels(tuple(codes)), meta or MetadataRecord())


def small_synthetic(n_sessions=40, n_therapists=10, seed=7, **kw):
    spec = SyntheticSpec(n_sessions=n_sessions, n_therapists=n_therapists, seed=seed, **kw)
    return generate_synthetic(spec)


def synthetic_examples(role_filter="therapist_only", metadata=True, max_len=256, **kw):
    sessions, emb = small_synthetic(**kw)
    embedded = {k: EmbeddedSession(k, v) for k, v in emb.items()}
    return build_examples(sessions, embedded, MetadataVocab.default(), role_filter, metadata, max_len)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

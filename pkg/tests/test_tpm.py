import pickle

import pytest

from rhattest.tpm import (PCR_COUNT, ZERO_PCR, PcrIndexError, Quote, SoftTpm, TpmError,
                          load_public_key, verify_quote)

# SHA-256(32 zero bytes || b"m1"), computed with the openssl CLI
M1_DIGEST = "115c506099b00f5ae1c653209156cb7eae53904419984c359c0b1ce152f23178"
NONCE = bytes(range(32))


@pytest.fixture(scope="module")
def shared_tpm():
    return SoftTpm()


@pytest.fixture
def tpm():
    return SoftTpm()


def test_fresh_pcrs_are_zero(tpm):
    assert all(tpm.pcr_read(i) == ZERO_PCR for i in range(PCR_COUNT))
    assert tpm.boot_counter == 0


def test_extend_matches_frozen_digest(tpm):
    assert tpm.pcr_extend(16, b"m1").hex() == M1_DIGEST
    assert tpm.pcr_read(16).hex() == M1_DIGEST
    assert tpm.pcr_read(15) == ZERO_PCR


def test_extend_is_order_sensitive():
    a, b = SoftTpm(key_size=1024), SoftTpm(key_size=1024)
    for x in (b"m1", b"m2"):
        a.pcr_extend(0, x)
    for x in (b"m2", b"m1"):
        b.pcr_extend(0, x)
    assert a.pcr_read(0) != b.pcr_read(0)


def test_extend_is_deterministic_across_instances():
    a, b = SoftTpm(key_size=1024), SoftTpm(key_size=1024)
    for i in range(50):
        a.pcr_extend(3, b"x%d" % i)
        b.pcr_extend(3, b"x%d" % i)
    assert a.pcr_read(3) == b.pcr_read(3)


@pytest.mark.parametrize("index", [-1, 24, 100])
def test_index_out_of_range(tpm, index):
    for call in (lambda: tpm.pcr_read(index), lambda: tpm.pcr_extend(index, b"x"),
                 lambda: tpm.quote(index, NONCE)):
        with pytest.raises(PcrIndexError):
            call()


def test_empty_extend_rejected(tpm):
    with pytest.raises(TpmError):
        tpm.pcr_extend(16, b"")


def test_quote_verifies(shared_tpm):
    shared_tpm.pcr_extend(16, b"quoted")
    q = shared_tpm.quote(16, NONCE)
    assert q.pcr_value == shared_tpm.pcr_read(16) and q.nonce == NONCE
    assert verify_quote(shared_tpm.public_key, q.pcr_value, NONCE, q.signature)
    assert Quote.from_dict(q.to_dict()) == q


def test_quote_binds_nonce_and_value(shared_tpm):
    q = shared_tpm.quote(16, NONCE)
    other = bytes(32)
    assert not verify_quote(shared_tpm.public_key, q.pcr_value, other, q.signature)
    assert not verify_quote(shared_tpm.public_key, bytes(32), NONCE, q.signature)


def test_every_single_bit_flip_of_a_signature_fails(shared_tpm):
    q = shared_tpm.quote(16, NONCE)
    pub = shared_tpm.public_key
    for bit in range(len(q.signature) * 8):
        sig = bytearray(q.signature)
        sig[bit // 8] ^= 1 << (bit % 8)
        assert not verify_quote(pub, q.pcr_value, NONCE, bytes(sig))


def test_quote_from_another_key_fails(shared_tpm):
    other = SoftTpm(key_size=1024)
    q = other.quote(16, NONCE)
    assert not verify_quote(shared_tpm.public_key, q.pcr_value, NONCE, q.signature)


def test_quote_needs_32_byte_nonce(shared_tpm):
    with pytest.raises(TpmError):
        shared_tpm.quote(16, b"short")


def test_reset_zeroes_pcrs_and_counts_boots(tpm):
    tpm.pcr_extend(16, b"m1")
    assert tpm.reset() == 1
    assert tpm.pcr_read(16) == ZERO_PCR
    assert tpm.reset() == 2 and tpm.boot_counter == 2


def test_public_state_has_no_private_material(tpm):
    state = tpm.public_state()
    assert set(state) == {"pcrs", "attestation_pcr", "boot_counter", "public_key"}
    assert load_public_key(state["public_key"]).public_numbers() == tpm.public_key.public_numbers()
    assert "PRIVATE" not in repr(state)
    with pytest.raises(TypeError):
        pickle.dumps(tpm)

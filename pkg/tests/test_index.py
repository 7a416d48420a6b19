"""Hopscotch index tests driven by a model map and brute-force collisions."""

import random
import struct

import pytest

from erdasim.index import (ENTRY_LEN, WORD_OFF, HopscotchIndex, TableFullError,
                           hash64, pack_entry, scan_window, unpack_entry)
from erdasim.nvm import NvmDevice


def make_index(slots=64, H=32):
    dev = NvmDevice(ENTRY_LEN * (slots + H - 1) + 64)
    return HopscotchIndex(dev, base=0, slots=slots, neighborhood=H)


def find_colliding_keys(slots, count, width=8, start=0):
    """Brute-force keys sharing one home slot; returns (home, keys)."""
    buckets = {}
    i = start
    while True:
        key = f"{i:0{width}d}".encode()
        home = hash64(key) % slots
        buckets.setdefault(home, []).append(key)
        if len(buckets[home]) == count:
            return home, buckets[home]
        i += 1


def test_fnv1a_known_vectors():
    # published FNV-1a 64-bit test vectors
    assert hash64(b"") == 0xCBF29CE484222325
    assert hash64(b"a") == 0xAF63DC4C8601EC8C
    assert hash64(b"foobar") == 0x85944171F73967E8


def test_entry_pack_layout():
    raw = pack_entry(1, b"key", 3, 0b101, 0x1122334455667788)
    assert len(raw) == 32
    assert raw[0] == 1 and raw[1] == 3
    assert raw[2:18] == b"key" + b"\x00" * 13
    assert raw[18] == 3
    assert struct.unpack_from("<I", raw, 20)[0] == 0b101
    assert struct.unpack_from("<Q", raw, 24)[0] == 0x1122334455667788
    ent = unpack_entry(raw)
    assert ent.key == b"key" and ent.word == 0x1122334455667788


def test_entry_addr_formula():
    idx = make_index(slots=64)
    key = b"somekey1"
    assert idx.entry_addr(key) == 32 * (hash64(key) % 64)


def test_insert_lookup_update_remove():
    idx = make_index()
    slot = idx.insert(b"alpha", head_id=1, word=111)
    found = idx.lookup(b"alpha")
    assert found is not None and found[0] == slot
    assert found[1].word == 111 and found[1].head_id == 1
    idx.update_word(slot, 222)
    assert idx.lookup(b"alpha")[1].word == 222
    idx.remove(slot)
    assert idx.lookup(b"alpha") is None


def test_update_word_is_one_atomic_8_byte_store():
    idx = make_index()
    slot = idx.insert(b"k", 0, 1)
    idx.device.flush()
    ops_before = idx.device.store_ops
    actual_before = idx.device.write_bytes_actual
    idx.update_word(slot, 0xDEADBEEF)
    assert idx.device.store_ops == ops_before + 1
    assert idx.device.write_bytes_actual == actual_before + 8
    # and the store is 8-aligned at the word offset
    assert (idx.slot_addr(slot) + WORD_OFF) % 8 == 0


def test_displacement_keeps_keys_reachable():
    idx = make_index(slots=256)
    home, keys = find_colliding_keys(256, 12)
    words = {}
    for i, key in enumerate(keys):
        idx.insert(key, 0, i + 1)
        words[key] = i + 1
    # fill neighboring homes to force actual displacement chains
    extra = []
    i = 10_000
    while len(extra) < 30:
        key = f"{i:08d}".encode()
        if 0 <= hash64(key) % 256 - home < 16:
            extra.append(key)
            idx.insert(key, 0, 100 + len(extra))
            words[key] = 100 + len(extra)
        i += 1
    for key, word in words.items():
        found = idx.lookup(key)
        assert found is not None, key
        assert found[1].word == word
        assert 0 <= found[0] - idx.home_slot(key) < idx.H


def test_neighborhood_overflow_raises_table_full():
    idx = make_index(slots=64)
    home, keys = find_colliding_keys(64, idx.H + 1)
    for key in keys[:-1]:
        idx.insert(key, 0, 1)
    with pytest.raises(TableFullError):
        idx.insert(keys[-1], 0, 1)


def test_model_map_equivalence_random_ops():
    # entries move when later inserts displace them, so every mutation
    # locates its slot through lookup first, exactly like the servers do
    idx = make_index(slots=256, H=32)
    model: dict[bytes, int] = {}
    rng = random.Random(77)
    keyspace = [f"{i:06d}".encode() for i in range(600)]
    for _ in range(10_000):
        key = rng.choice(keyspace)
        action = rng.random()
        try:
            if key not in model:
                word = rng.randrange(1 << 62)
                idx.insert(key, 0, word)
                model[key] = word
            elif action < 0.5:
                word = rng.randrange(1 << 62)
                slot, _ = idx.lookup(key)
                idx.update_word(slot, word)
                model[key] = word
            elif action < 0.7:
                slot, _ = idx.lookup(key)
                idx.remove(slot)
                del model[key]
            else:
                found = idx.lookup(key)
                assert found is not None and found[1].word == model[key]
        except TableFullError:
            # acceptable under heavy collision load; key stays absent
            assert key not in model
    for key in keyspace:
        found = idx.lookup(key)
        if key in model:
            assert found is not None and found[1].word == model[key]
        else:
            assert found is None


def test_displacement_refreshes_tracked_slot():
    # regression guard: update after displacement must target the new slot
    idx = make_index(slots=64)
    home, keys = find_colliding_keys(64, 6)
    idx.insert(keys[0], 0, 10)
    for key in keys[1:]:
        idx.insert(key, 0, 11)
    slot, entry = idx.lookup(keys[0])
    idx.update_word(slot, 99)
    assert idx.lookup(keys[0])[1].word == 99


def test_scan_window_matches_server_lookup():
    idx = make_index(slots=64)
    home, keys = find_colliding_keys(64, 8)
    for i, key in enumerate(keys):
        idx.insert(key, 0, i)
    base = idx.entry_addr(keys[3])
    window = idx.device.read(base, ENTRY_LEN * idx.H)
    hit = scan_window(window, keys[3])
    assert hit is not None
    rel, entry = hit
    assert entry.word == 3
    assert idx.lookup(keys[3])[0] == idx.home_slot(keys[3]) + rel


def test_scan_window_misses_absent_key():
    idx = make_index(slots=64)
    idx.insert(b"present1", 0, 5)
    base = idx.entry_addr(b"absent99")
    window = idx.device.read(base, ENTRY_LEN * idx.H)
    assert scan_window(window, b"absent99") is None


def test_key_length_limits():
    idx = make_index()
    with pytest.raises(Exception):
        idx.insert(b"", 0, 0)
    with pytest.raises(Exception):
        idx.insert(b"x" * 17, 0, 0)
    idx.insert(b"x" * 16, 0, 0)
    assert idx.lookup(b"x" * 16) is not None

#!/usr/bin/env python3
"""Independent reference for the hash/MAC vectors in this directory.

Written separately from the C++ code: BLAKE3 is computed by the recursive
subtree definition (no chaining-value stack) and HMAC by the textbook
formula. Regenerate with:  python3 oracle.py > vectors.txt
"""

import struct

IV = [0x6A09E667, 0xBB67AE85, 0x3C6EF372, 0xA54FF53A,
      0x510E527F, 0x9B05688C, 0x1F83D9AB, 0x5BE0CD19]
PERM = [2, 6, 3, 10, 7, 0, 4, 13, 1, 11, 12, 5, 9, 14, 15, 8]
CHUNK_START, CHUNK_END, PARENT, ROOT, KEYED = 1, 2, 4, 8, 16
MASK = 0xFFFFFFFF


def rotr(x, n):
    return ((x >> n) | (x << (32 - n))) & MASK


def compress(cv, block, counter, blen, flags):
    m = list(struct.unpack("<16I", block.ljust(64, b"\0")))
    v = list(cv) + IV[:4] + [counter & MASK, counter >> 32, blen, flags]

    def mix(a, b, c, d, x, y):
        v[a] = (v[a] + v[b] + x) & MASK
        v[d] = rotr(v[d] ^ v[a], 16)
        v[c] = (v[c] + v[d]) & MASK
        v[b] = rotr(v[b] ^ v[c], 12)
        v[a] = (v[a] + v[b] + y) & MASK
        v[d] = rotr(v[d] ^ v[a], 8)
        v[c] = (v[c] + v[d]) & MASK
        v[b] = rotr(v[b] ^ v[c], 7)

    for r in range(7):
        mix(0, 4, 8, 12, m[0], m[1]); mix(1, 5, 9, 13, m[2], m[3])
        mix(2, 6, 10, 14, m[4], m[5]); mix(3, 7, 11, 15, m[6], m[7])
        mix(0, 5, 10, 15, m[8], m[9]); mix(1, 6, 11, 12, m[10], m[11])
        mix(2, 7, 8, 13, m[12], m[13]); mix(3, 4, 9, 14, m[14], m[15])
        m = [m[p] for p in PERM]
    return [v[i] ^ v[i + 8] for i in range(8)] + [v[i + 8] ^ cv[i] for i in range(8)]


def chunk_node(key, data, index, flags):
    """Returns (cv, block, counter, blen, flags) of the chunk's final block."""
    blocks = [data[i:i + 64] for i in range(0, len(data), 64)] or [b""]
    cv = key
    for n, blk in enumerate(blocks[:-1]):
        f = flags | (CHUNK_START if n == 0 else 0)
        cv = compress(cv, blk, index, 64, f)[:8]
    f = flags | CHUNK_END | (CHUNK_START if len(blocks) == 1 else 0)
    return (cv, blocks[-1], index, len(blocks[-1]), f)


def subtree(key, data, first_chunk, flags):
    if len(data) <= 1024:
        return chunk_node(key, data, first_chunk, flags)
    chunks = (len(data) + 1023) // 1024
    left_chunks = 1 << ((chunks - 1).bit_length() - 1)
    split = left_chunks * 1024
    l = subtree(key, data[:split], first_chunk, flags)
    r = subtree(key, data[split:], first_chunk + left_chunks, flags)
    lcv = compress(*l)[:8]
    rcv = compress(*r)[:8]
    block = struct.pack("<16I", *(lcv + rcv))
    return (key, block, 0, 64, flags | PARENT)


def blake3(data, key=None, out_len=32):
    kw = list(struct.unpack("<8I", key)) if key else IV
    flags = KEYED if key else 0
    cv, block, _, blen, f = subtree(kw, data, 0, flags)
    out = b""
    counter = 0
    while len(out) < out_len:
        words = compress(cv, block, counter, blen, f | ROOT)
        out += struct.pack("<16I", *words)
        counter += 1
    return out[:out_len]


def hmac(key, msg):
    if len(key) > 64:
        key = blake3(key)
    key = key.ljust(64, b"\0")
    ipad = bytes(b ^ 0x36 for b in key)
    opad = bytes(b ^ 0x5C for b in key)
    return blake3(opad + blake3(ipad + msg))


def pattern(n):
    return bytes(i % 251 for i in range(n))


def main():
    for n in [0, 1, 63, 64, 65, 1023, 1024, 1025, 2048, 2049, 3072, 3073,
              4096, 4097, 8192, 8193, 31744, 102400]:
        print(f"blake3_pattern_{n} {blake3(pattern(n)).hex()}")
    print(f"blake3_abc {blake3(b'abc').hex()}")
    print(f"blake3_xof64_1025 {blake3(pattern(1025), out_len=64).hex()}")
    k = b"whats the Elvish word for friend"
    for n in [0, 1, 1025]:
        print(f"blake3_keyed_{n} {blake3(pattern(n), key=k).hex()}")

    zero = bytes(32)
    print(f"hmac_zero_dev0 {hmac(zero, b'dev0').hex()}")
    long_key = pattern(100)
    print(f"hmac_longkey {hmac(long_key, b'message').hex()}")

    # Derived engine values.
    k_d = hmac(zero, b"dev0")
    print(f"data_key_dev0_kid2 {hmac(k_d, struct.pack('<I', 2)).hex()}")
    k_net = bytes(range(32))
    iv, j = 0x0123456789AB, 0x0000BEEF0001
    msg = struct.pack("<Q", iv) + struct.pack("<Q", j)[:6]
    print(f"net_mac_vector {hmac(k_net, msg)[:8].hex()}")
    print(f"node_hash_zero_340 {blake3(bytes(340 * 8))[:16].hex()}")
    ivs = b"".join(struct.pack("<Q", 1000 + i) for i in range(5)).ljust(340 * 8, b"\0")
    print(f"node_hash_5_340 {blake3(ivs)[:16].hex()}")
    k_f = bytes([0x11]) * 32
    parent = bytes([0x22]) * 16
    msg = struct.pack("<Q", 681) + struct.pack("<Q", 7) + parent
    bind = hmac(k_f, msg)[:8]
    seal = hmac(k_f, b"snvme-tag" + msg[:16] + bind)[:8]
    print(f"freshness_tag_vector {(bind + seal).hex()}")


if __name__ == "__main__":
    main()

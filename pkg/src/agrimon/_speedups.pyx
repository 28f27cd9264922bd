# cython: boundscheck=False, wraparound=False
"""Compiled versions of the hot codec kernels; see ``_purepy`` for semantics."""

from agrimon.errors import Malformed, Truncated, VarintOutOfRange

cdef long long MAX_REMAINING_LENGTH = 268435455


cpdef unsigned int crc16(data):
    cdef const unsigned char[:] view
    cdef unsigned int crc = 0xFFFF
    cdef Py_ssize_t i, n
    cdef int bit
    if not isinstance(data, (bytes, bytearray)):
        data = bytes(data)
    view = data
    n = view.shape[0]
    for i in range(n):
        crc ^= view[i]
        for bit in range(8):
            if crc & 1:
                crc = (crc >> 1) ^ 0xA001
            else:
                crc >>= 1
    return crc


cpdef bytes encode_remaining_length(long long n):
    cdef unsigned char out[4]
    cdef int k = 0
    cdef unsigned char digit
    if n < 0 or n > MAX_REMAINING_LENGTH:
        raise VarintOutOfRange(f"remaining length {n} outside 0..{MAX_REMAINING_LENGTH}")
    while True:
        digit = n & 0x7F
        n >>= 7
        if n:
            out[k] = digit | 0x80
            k += 1
        else:
            out[k] = digit
            k += 1
            return out[:k]


def decode_remaining_length(buf, Py_ssize_t offset=0):
    cdef long long value = 0
    cdef int shift = 0
    cdef int i
    cdef Py_ssize_t n = len(buf)
    cdef unsigned char byte
    for i in range(4):
        if offset + i >= n:
            raise Truncated("remaining length ends mid-number")
        byte = buf[offset + i]
        value |= (<long long>(byte & 0x7F)) << shift
        if not byte & 0x80:
            return value, i + 1
        shift += 7
    raise Malformed("remaining length continues past the fourth octet")


cpdef bint topic_matches(str topic_filter, str topic):
    cdef list flevels, tlevels
    cdef Py_ssize_t i, nf, nt
    cdef str f
    if topic.startswith("$") and topic_filter[:1] in ("+", "#"):
        return False
    flevels = topic_filter.split("/")
    tlevels = topic.split("/")
    nf = len(flevels)
    nt = len(tlevels)
    for i in range(nf):
        f = flevels[i]
        if f == "#":
            return True
        if i >= nt:
            return False
        if f != "+" and f != tlevels[i]:
            return False
    return nf == nt

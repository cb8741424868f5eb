"""Philox4x64-10 counter-based generator usable from numba kernels.

The raw word sequence for key ``(seed, stream_id)`` is identical to
``numpy.random.Philox(key=[seed, stream_id]).random_raw()``; numpy's
generator objects cannot be driven per path from inside a jitted loop,
hence this port. Normals come from a 256-layer ziggurat (same layout as
numpy's, tables built at import).

A stream is one ``STREAM_DTYPE`` record (key, counter, 4-word buffer,
buffer position). Records are passed by reference into jitted helpers
without reference counting, which keeps a raw draw at a few nanoseconds.
"""

import numpy as np
from llvmlite import ir
from numba import njit, types
from numba.extending import intrinsic

_M0 = np.uint64(0xD2E7470EE14C6C93)
_M1 = np.uint64(0xCA5A826395121157)
_W0 = np.uint64(0x9E3779B97F4A7C15)
_W1 = np.uint64(0xBB67AE8584CAA73B)
_MASK52 = np.uint64(0x000FFFFFFFFFFFFF)
_S11 = np.uint64(11)
_S8 = np.uint64(8)
_ONE = np.uint64(1)
_ZERO = np.uint64(0)
_FF = np.uint64(0xFF)

STREAM_DTYPE = np.dtype(
    [
        ("key0", np.uint64),
        ("key1", np.uint64),
        ("counter", np.uint64),
        ("buf", np.uint64, (4,)),
        ("pos", np.int64),
    ]
)

_ZIG_R = 3.6541528853610087963519472518
_ZIG_V = 0.00492867323397465524494185531


def _ziggurat_tables():
    m1 = 2.0**52
    dn = _ZIG_R
    tn = dn
    q = _ZIG_V / np.exp(-0.5 * dn * dn)
    ki = np.zeros(256, dtype=np.uint64)
    wi = np.zeros(256)
    fi = np.zeros(256)
    ki[0] = np.uint64((dn / q) * m1)
    wi[0] = q / m1
    wi[255] = dn / m1
    fi[0] = 1.0
    fi[255] = np.exp(-0.5 * dn * dn)
    for i in range(254, 0, -1):
        dn = np.sqrt(-2.0 * np.log(_ZIG_V / dn + np.exp(-0.5 * dn * dn)))
        ki[i + 1] = np.uint64((dn / tn) * m1)
        tn = dn
        fi[i] = np.exp(-0.5 * dn * dn)
        wi[i] = dn / m1
    return ki, wi, fi


_KI, _WI, _FI = _ziggurat_tables()


@intrinsic
def _umulhi(typingctx, a, b):
    """High 64 bits of the 128-bit product (a single mulq on x86-64)."""
    sig = types.uint64(types.uint64, types.uint64)

    def codegen(context, builder, signature, args):
        wide = ir.IntType(128)
        prod = builder.mul(builder.zext(args[0], wide), builder.zext(args[1], wide))
        return builder.trunc(builder.lshr(prod, ir.Constant(wide, 64)), ir.IntType(64))

    return sig, codegen


@njit(cache=True, inline="always")
def _mulhilo(a, b):
    return _umulhi(a, b), a * b


@njit(cache=True)
def philox_block(c0, c1, c2, c3, k0, k1):
    """Ten Philox rounds on one 256-bit counter."""
    for r in range(10):
        if r > 0:
            k0 = k0 + _W0
            k1 = k1 + _W1
        hi0, lo0 = _mulhilo(_M0, c0)
        hi1, lo1 = _mulhilo(_M1, c2)
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return c0, c1, c2, c3


@njit(cache=True)
def stream_init(seed, stream_id, st):
    st.key0 = np.uint64(seed)
    st.key1 = np.uint64(stream_id)
    st.counter = _ZERO
    st.pos = 4


@njit(cache=True)
def next_raw(st):
    pos = st.pos
    if pos >= 4:
        # 2**64 blocks are never reached, so the counter never carries into word 1
        st.counter += _ONE
        b0, b1, b2, b3 = philox_block(st.counter, _ZERO, _ZERO, _ZERO, st.key0, st.key1)
        st.buf[0] = b0
        st.buf[1] = b1
        st.buf[2] = b2
        st.buf[3] = b3
        st.pos = 1
        return b0
    st.pos = pos + 1
    return st.buf[pos]


@njit(cache=True)
def next_double(state):
    """Uniform on [0, 1) with 53 random bits."""
    return (next_raw(state) >> _S11) * (1.0 / 9007199254740992.0)


@njit(cache=True)
def next_normal(state):
    while True:
        r = next_raw(state)
        idx = r & _FF
        r = r >> _S8
        sign = r & _ONE
        rabs = (r >> _ONE) & _MASK52
        x = rabs * _WI[idx]
        if sign:
            x = -x
        if rabs < _KI[idx]:
            return x
        if idx == 0:
            while True:
                xx = -(1.0 / _ZIG_R) * np.log1p(-next_double(state))
                yy = -np.log1p(-next_double(state))
                if yy + yy > xx * xx:
                    if (rabs >> _S8) & _ONE:
                        return -(_ZIG_R + xx)
                    return _ZIG_R + xx
        else:
            if (_FI[idx - 1] - _FI[idx]) * next_double(state) + _FI[idx] < np.exp(
                -0.5 * x * x
            ):
                return x


@njit(cache=True)
def fill_raw(seed, stream_id, out):
    work = np.empty(1, dtype=STREAM_DTYPE)
    state = work[0]
    stream_init(seed, stream_id, state)
    for i in range(out.shape[0]):
        out[i] = next_raw(state)


@njit(cache=True)
def fill_normals(seed, stream_id, out):
    work = np.empty(1, dtype=STREAM_DTYPE)
    state = work[0]
    stream_init(seed, stream_id, state)
    for i in range(out.shape[0]):
        out[i] = next_normal(state)


def new_state(seed, stream_id):
    """A one-record stream state that Python code can hold between draws."""
    state = np.zeros(1, dtype=STREAM_DTYPE)
    _init_record(np.uint64(seed), np.uint64(stream_id), state)
    return state


@njit(cache=True)
def _init_record(seed, stream_id, state):
    stream_init(seed, stream_id, state[0])


@njit(cache=True)
def draw_normals(state, out):
    """Fill ``out`` from the stream held in ``state`` (a ``new_state`` array)."""
    st = state[0]
    for i in range(out.shape[0]):
        out[i] = next_normal(st)

import numpy as np
import pytest


def conv2d_reference(x, w, b):
    """Quadruple-loop same-padded cross-correlation. Deliberately naive;
    the fast implementation is tested against this."""
    bsz, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x.astype(np.float64), ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((bsz, co, h, wd))
    for n in range(bsz):
        for o in range(co):
            for y in range(h):
                for xx in range(wd):
                    out[n, o, y, xx] = np.sum(
                        xp[n, :, y:y + kh, xx:xx + kw] * w[o]) + b[o]
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

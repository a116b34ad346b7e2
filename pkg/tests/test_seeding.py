import numpy as np

from evlab.seeding import array_digest, derive_seed, rng, text_digest


def test_derive_seed_is_stable_and_path_sensitive():
    assert derive_seed(7, "model", "gbdt") == derive_seed(7, "model", "gbdt")
    seen = {derive_seed(7, "model", k) for k in ("gbdt", "mlp", "linear_svm")}
    seen |= {derive_seed(8, "model", "gbdt"), derive_seed(7, "modelgbdt")}
    assert len(seen) == 5


def test_derive_seed_fits_in_63_bits():
    for k in range(50):
        s = derive_seed(k, "x")
        assert 0 <= s < 2**63


def test_rng_streams_repeat():
    assert np.array_equal(rng(3).random(4), rng(3).random(4))


def test_digests():
    a = np.arange(6, dtype=np.int64)
    assert array_digest(a) == array_digest(a.copy())
    assert array_digest(a) != array_digest(a.reshape(2, 3))
    assert array_digest(a) != array_digest(a.astype(np.int32))
    assert text_digest("abc") == text_digest(b"abc")

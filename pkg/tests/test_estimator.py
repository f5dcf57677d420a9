import numpy as np
from sklearn.base import clone

from gtfnmf import GTFNMF
from gtfnmf.audio import AudioBuffer
from gtfnmf.learning import HyperParams


def test_sklearn_parameter_protocol():
    est = GTFNMF(n_subbands=4, backend="ihgp", iterations=3)
    c = clone(est)
    assert c.get_params()["n_subbands"] == 4 and c.get_params()["backend"] == "ihgp"
    c.set_params(power=0.5)
    assert c.power == 0.5


def test_fit_transform_predict_sample():
    t = np.arange(3000) / 16000
    y = 0.5 * (1 + 0.5 * np.sin(2 * np.pi * 5 * t)) * np.sin(2 * np.pi * 600 * t)
    est = GTFNMF(n_subbands=3, n_modulators=1, iterations=2, noise_var=1e-4).fit(AudioBuffer(y, 16000))
    amps = est.transform(y)
    assert amps.shape == (3000, 3) and np.all(amps >= 0)
    mean, sd = est.predict(y, return_std=True)
    assert mean.shape == (3000,) and np.all(sd > 0)
    assert np.isfinite(est.score(y))
    s, Z, G = est.sample(200, seed=1)
    assert s.shape == (200,) and Z.shape == (200, 3) and G.shape == (200, 1)


def test_from_hyperparams():
    hp = HyperParams([0.3], 0.005, 1.0, 0.02, 1.0, [[1.0]], 0.01)
    est = GTFNMF.from_hyperparams(hp, iterations=1)
    assert est.predict(np.zeros(100)).shape == (100,)

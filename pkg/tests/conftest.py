from types import SimpleNamespace

import pytest

from lockdnn.attacks import default_toy_dataset, train_default_toy
from lockdnn.keying import KeyGenParams, gen_keys
from lockdnn.obfuscator import obfuscate


@pytest.fixture(scope="session")
def toy_bundle():
    """Trained bundled CNN + keys + obfuscated copy, cached per seed.

    Training is deterministic, so every test sees identical models.
    """
    cache = {}

    def get(seed: int):
        if seed not in cache:
            dataset = default_toy_dataset(seed)
            result = train_default_toy(seed)
            keys = gen_keys(seed, KeyGenParams(seg_bits=8, n_detectors=4, n_groups=16))
            obf = obfuscate(result.model, keys.mkey)
            cache[seed] = SimpleNamespace(
                seed=seed, dataset=dataset, result=result,
                model=result.model, keys=keys, obf=obf,
            )
        return cache[seed]

    return get

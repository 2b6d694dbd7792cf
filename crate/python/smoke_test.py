"""Smoke test of the feature_aging_py extension module.

Build the module and run:

    cargo build --release -p feature-aging-py
    python3 python/smoke_test.py target/release/libfeature_aging_py.so
"""

import importlib.machinery
import importlib.util
import json
import math
import random
import sys
import tempfile
from pathlib import Path


def load(path):
    loader = importlib.machinery.ExtensionFileLoader("feature_aging_py", str(path))
    spec = importlib.util.spec_from_loader("feature_aging_py", loader)
    module = importlib.util.module_from_spec(spec)
    loader.exec_module(module)
    return module


def unit(rng, d):
    v = [rng.uniform(-1, 1) for _ in range(d)]
    n = math.sqrt(sum(x * x for x in v))
    return [x / n for x in v]


def main():
    default = Path(__file__).resolve().parents[1] / "target" / "release" / "libfeature_aging_py.so"
    fa = load(sys.argv[1] if len(sys.argv) > 1 else default)
    rng = random.Random(0)

    cfg = json.loads(fa.preset_config("desk"))
    assert cfg["preset"] == "desk" and cfg["fam"]["batch"] == 64
    assert json.loads(fa.preset_config("paper"))["fam"]["iterations"] == 200_000

    gallery = [(f"s{i}", 4.0, unit(rng, 8)) for i in range(5)]
    probes = [(s, 12.0, v) for s, _, v in gallery]
    assert fa.closed_set_rank1(gallery, probes) == 1.0

    assert abs(fa.threshold_at_far([0.1, 0.2, 0.3, 0.4], 0.25) - 0.4) < 1e-6

    with tempfile.TemporaryDirectory() as tmp:
        path = str(Path(tmp) / "g.faeb")
        fa.save_embeddings(path, gallery)
        back = fa.load_embeddings(path)
        assert [e[0] for e in back] == [e[0] for e in gallery]
        assert all(abs(a - b) < 1e-6 for e, f in zip(back, gallery) for a, b in zip(e[2], f[2]))

        assert fa.run_cli(["evaluate", "--no-such-flag"]) == 2
        assert fa.run_cli(["evaluate", "--gallery", path, "--probes", path, "--out", tmp]) == 0
        assert (Path(tmp) / "report.json").exists()

    try:
        fa.preset_config("huge")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")
    print("feature_aging_py smoke test passed")


if __name__ == "__main__":
    main()

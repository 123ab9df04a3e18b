"""Smoke test for the pyexitcde extension module."""

import math
import os
import sys
import tempfile

import pyexitcde


def main():
    assert "two_freq_sine" in pyexitcde.RunConfig.presets()

    samples = pyexitcde.synthetic("two_freq_sine_classification", 4, seed=1)
    times, values, label = samples[1]
    assert len(times) == 50 and len(values[0]) == 1 and label == [1.0]

    err = pyexitcde.RunConfig.preset("toy_gradcheck").grad_check()
    print(f"gradcheck max relative error {err:.2e}")
    assert err < 1e-4

    cfg = pyexitcde.RunConfig.preset("two_freq_sine")
    cfg.max_epochs = 2
    cfg.mode = "exit"
    result = cfg.run()
    trace = result.tau_trace
    assert len(trace) == 2
    assert all(0.0 <= s < e for _, s, e in trace)

    model = result.model
    logits = model.predict(times, values)
    assert len(logits) == 2 and all(math.isfinite(v) for v in logits)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.json")
        model.save(path)
        again = pyexitcde.Model.load(path)
        assert again.predict(times, values) == logits
        assert again.bounds == model.bounds

    try:
        pyexitcde.RunConfig.from_toml("[train]\nbogus = 1\n")
    except ValueError as e:
        assert "bogus" in str(e)
    else:
        raise AssertionError("unknown key accepted")

    print(f"ok: test accuracy {result.test_metric:.3f}, bounds {model.bounds}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

import json
from pathlib import Path

import jsonschema
import numpy as np
import pytest
from scipy.io import wavfile

from livesong.cqt import SAMPLE_RATE

SCHEMA_DIR = Path(__file__).resolve().parent.parent / "docs" / "schemas"


def check_schema(payload, name):
    """Validate a JSON payload against a published schema by name."""
    schema = json.loads((SCHEMA_DIR / f"{name}.schema.json").read_text())
    jsonschema.validate(payload, schema)


def write_wav(path, samples, rate=SAMPLE_RATE):
    """Write float samples in [-1, 1] as 16-bit PCM."""
    data = np.asarray(samples)
    pcm = np.clip(np.round(data * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(path, rate, pcm)
    return path


@pytest.fixture
def wav_factory(tmp_path):
    def make(name, samples, rate=SAMPLE_RATE):
        return write_wav(tmp_path / name, samples, rate)

    return make


def sine_clip(freq_hz, seconds, rate=SAMPLE_RATE, amp=0.5):
    t = np.arange(int(round(seconds * rate))) / rate
    return amp * np.sin(2 * np.pi * freq_hz * t)

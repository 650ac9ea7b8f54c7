"""Round-trip a trained model through the TypeScript exporter.

Trains a tiny classifier, describes it as JSON, runs the exporter CLI
(`node exporter/dist/cli.js`), loads the emitted manifest back with this
package, and checks the logits against the exporter's self-check bundle.

Requires node; build the exporter first if dist/ is missing:

    cd exporter && npm install && npm run build
    python3 demos/export_interop.py
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from marginlab.net import Dense, load_network
from marginlab.tensorio import read_tensor
from marginlab.train import DatasetConfig, HyperParams, make_synthetic_dataset, train_model

ROOT = Path(__file__).resolve().parents[1]
CLI = ROOT / "exporter" / "dist" / "cli.js"
if not CLI.exists():
    sys.exit("exporter/dist/cli.js missing; run `npm run build` in exporter/")

cfg = DatasetConfig("blobs", ambient_dim=6, signal_dim=2, noise_std=0.1,
                    train_samples=200, test_samples=100, num_classes=2)
train_split, test_split = make_synthetic_dataset(cfg, seed=1)
hp = HyperParams(depth=1, width=8, learning_rate=0.1, batch_size=16,
                 weight_decay=0.0, label_noise_fraction=0.0,
                 train_subset_size=200, seed=1)
entry = train_model(train_split, test_split, hp)
print(f"trained {entry.model_id}: test acc {entry.test_accuracy:.3f}")

layers = []
for layer in entry.network.layers:
    if isinstance(layer, Dense):
        layers.append({"kind": "dense", "weight": layer.weight.tolist(),
                       "bias": layer.bias.tolist()})
    else:
        layers.append({"kind": "relu"})
source = {"num_classes": 2, "input_shape": [cfg.ambient_dim], "layers": layers}

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    (tmp / "model.json").write_text(json.dumps(source))
    subprocess.run(
        ["node", str(CLI), "export-model", "--in", str(tmp / "model.json"),
         "--out", str(tmp / "bundle"), "--name", "demo"],
        check=True,
    )
    reloaded = load_network(tmp / "bundle" / "demo_model.json")
    check_input = read_tensor(tmp / "bundle" / "demo_check_input.mpt")
    expected = read_tensor(tmp / "bundle" / "demo_check_logits.mpt")
    logits = reloaded.forward(check_input)
    error = float(np.max(np.abs(logits - expected)))
    print(f"self-check logits agree to {error:.2e}")
    assert error <= 1e-5
print("round trip ok")

"""Write the default blur and advection-diffusion configs as editable JSON files."""
import os
import sys

from psfkit.config import ExperimentConfig, advdiff_defaults

out = sys.argv[1] if len(sys.argv) > 1 else "configs"
os.makedirs(out, exist_ok=True)
for name, cfg in (("blur.json", ExperimentConfig()), ("advdiff.json", advdiff_defaults())):
    with open(os.path.join(out, name), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_json(indent=2) + "\n")
    print(os.path.join(out, name))

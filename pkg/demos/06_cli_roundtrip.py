"""Command-line round trip: write a panel, fit it, test it.

The same steps from a shell:

    vareg simulate --out panel.csv --teachers 400 --years 5
    vareg fit-longrun --input panel.csv --se both --out fit.json
    vareg overid-test --input panel.csv
"""
import json
import tempfile
from pathlib import Path

from vareg.cli import main

with tempfile.TemporaryDirectory() as tmp:
    tmp = Path(tmp)
    main(["simulate", "--out", str(tmp / "panel.csv"), "--teachers", "400", "--years", "5", "--seed", "6"])
    main(["fit-longrun", "--input", str(tmp / "panel.csv"), "--se", "both", "--out", str(tmp / "fit.json")])
    fit = json.loads((tmp / "fit.json").read_text())
    print("kappa", round(fit["kappa"], 3), "SEs", {k: round(v, 3) for k, v in fit["se"].items()})
    code = main(["overid-test", "--input", str(tmp / "panel.csv"), "--out", str(tmp / "j.json")])
    print("overid-test exit", code, json.loads((tmp / "j.json").read_text())["j_test"])

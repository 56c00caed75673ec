"""Build the pbc2 example tables from the Mayo PBC sequential data.

The data ship with R's ``survival`` package as ``pbcseq``; the ``rdatasets``
wheel bundles a copy, so no network access is needed::

    pip install rdatasets
    python tools/make_pbc2.py tests/data

Death is the event; transplantation and loss to follow-up are censored.
Times are converted from days to years with a 365.24-day year, and age at each
visit is baseline age plus follow-up time.
"""

import argparse
import os

import numpy as np
import pandas as pd

YEAR = 365.24


def build():
    import rdatasets

    seq = rdatasets.data("survival", "pbcseq")
    seq = seq.sort_values(["id", "day"], kind="mergesort")
    first = seq.groupby("id", sort=True).first().reset_index()
    base_age = np.round(first["age"] * 365.25) / YEAR
    surv = pd.DataFrame(
        {
            "id": first["id"],
            "time": first["futime"] / YEAR,
            "event": (first["status"] == 2).astype(int),
            "baselineAge": base_age,
            "sex": first["sex"].map({"f": "female", "m": "male"}),
            "treatment": first["trt"].map({1: "D-penicil", 0: "placebo", 2: "placebo"}),
        }
    )
    age0 = dict(zip(first["id"], base_age))
    fup = seq["day"] / YEAR
    long = pd.DataFrame(
        {
            "id": seq["id"],
            "age": seq["id"].map(age0) + fup,
            "fuptime": fup,
            "serBilir": seq["bili"],
            "serChol": seq["chol"],
            "albumin": seq["albumin"],
            "alkaline": seq["alk.phos"],
            "SGOT": seq["ast"],
            "platelets": seq["platelet"],
            "prothrombin": seq["protime"],
        }
    )
    return surv, long


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("outdir")
    args = parser.parse_args()
    surv, long = build()
    os.makedirs(args.outdir, exist_ok=True)
    surv.to_csv(os.path.join(args.outdir, "pbc2_survival.csv"), index=False, float_format="%.10g")
    long.to_csv(os.path.join(args.outdir, "pbc2_longitudinal.csv"), index=False, float_format="%.10g")
    print(f"wrote {len(surv)} subjects, {len(long)} visits to {args.outdir}")


if __name__ == "__main__":
    main()

"""How the phantom's texture knob shows up in the 32 STAD features.

Stage S1 phantoms get knob 0 (isotropic band-limited texture) and S4 get
knob 1 (an oriented grating blended in). Directional features should move
the most; shape features should not care.
"""
import numpy as np

from liverstad.pipeline.cohort import CohortSpec, plan_cohort, render_case
from liverstad.stad.extract import FEATURE_NAMES, extract_stad


def cohort_features(knob, n=6):
    spec = CohortSpec(n_cases=n, modalities=("GED4",), knob_jitter=0.0, seed=21,
                      knob_by_stage={s: knob for s in ("S1", "S2", "S3", "S4")})
    rows = []
    for i, case in enumerate(plan_cohort(spec)):
        vol, mask = render_case(case, spec, "GED4", i)
        rows.append(extract_stad(vol, mask, case.vendor).values)
    return np.array(rows)


low, high = cohort_features(0.0), cohort_features(1.0)
spread = np.sqrt((low.var(axis=0, ddof=1) + high.var(axis=0, ddof=1)) / 2) + 1e-12
effect = (high.mean(axis=0) - low.mean(axis=0)) / spread

print(f"{'feature':<24}{'knob 0':>12}{'knob 1':>12}{'effect':>9}")
for k in np.argsort(-np.abs(effect)):
    print(f"{FEATURE_NAMES[k]:<24}{low[:, k].mean():12.4g}{high[:, k].mean():12.4g}{effect[k]:9.2f}")
